#include "pmoe/nn.hpp"

#include <cmath>

#include "pmoe/errors.hpp"

namespace pmoe::nn {

namespace {

MatrixXd leaky(const MatrixXd& z, double slope) {
  return z.unaryExpr([slope](double v) { return v >= 0.0 ? v : slope * v; });
}

MatrixXd leaky_grad_from_pre(const MatrixXd& z, double slope) {
  return z.unaryExpr([slope](double v) { return v >= 0.0 ? 1.0 : slope; });
}

}  // namespace

MatrixXd MlpNet::forward(const MatrixXd& input, ForwardCache* cache,
                         const std::vector<MatrixXd>* lateral) const {
  if (layers.empty()) throw ShapeError("mlp_forward: empty network");
  if (input.rows() != input_dim())
    throw ShapeError("mlp_forward: input dim " + std::to_string(input.rows()) +
                     " != " + std::to_string(input_dim()));
  if (!input.allFinite()) throw NumericError("mlp_forward: non-finite input");
  if (lateral && lateral->size() != layers.size())
    throw ShapeError("mlp_forward: lateral entry count mismatch");

  if (cache) {
    cache->input = input;
    cache->pre.clear();
    cache->post.clear();
  }

  MatrixXd h = input;
  for (std::size_t l = 0; l < layers.size(); ++l) {
    const DenseLayer& layer = layers[l];
    if (h.rows() != layer.in_dim())
      throw ShapeError("mlp_forward: layer dim chain broken at layer " +
                       std::to_string(l));
    MatrixXd z = (layer.weights.value * h).colwise() +
                 VectorXd(layer.bias.value.col(0));
    if (lateral && (*lateral)[l].size() > 0) {
      if ((*lateral)[l].rows() != z.rows() || (*lateral)[l].cols() != z.cols())
        throw ShapeError("mlp_forward: lateral shape mismatch at layer " +
                         std::to_string(l));
      z += (*lateral)[l];
    }
    const bool last = (l + 1 == layers.size());
    MatrixXd h_next = last ? z : leaky(z, leaky_slope);
    if (cache) {
      cache->pre.push_back(z);
      cache->post.push_back(h_next);
    }
    h = std::move(h_next);
  }
  return h;
}

MatrixXd MlpNet::backward(const ForwardCache& cache, const MatrixXd& out_grad,
                          std::vector<MatrixXd>* lateral_grads) {
  if (cache.pre.size() != layers.size() || cache.post.size() != layers.size())
    throw CacheError("mlp_backward: cache does not match network depth");
  if (out_grad.rows() != output_dim() ||
      out_grad.cols() != cache.input.cols())
    throw ShapeError("mlp_backward: output gradient shape mismatch");

  if (lateral_grads) lateral_grads->assign(layers.size(), MatrixXd());

  MatrixXd g = out_grad;  // dL/dh_l, starting at the output
  for (std::size_t li = layers.size(); li-- > 0;) {
    DenseLayer& layer = layers[li];
    const bool last = (li + 1 == layers.size());
    MatrixXd gz = last ? g : MatrixXd(g.cwiseProduct(
                                 leaky_grad_from_pre(cache.pre[li], leaky_slope)));
    const MatrixXd& h_in = (li == 0) ? cache.input : cache.post[li - 1];
    if (h_in.rows() != layer.in_dim())
      throw CacheError("mlp_backward: cached activation shape mismatch");
    layer.weights.grad.noalias() += gz * h_in.transpose();
    layer.bias.grad.col(0).noalias() += gz.rowwise().sum();
    if (lateral_grads) (*lateral_grads)[li] = gz;
    g.noalias() = layer.weights.value.transpose() * gz;
  }
  return g;
}

std::vector<Tensor*> MlpNet::params() {
  std::vector<Tensor*> out;
  for (auto& l : layers) {
    out.push_back(&l.weights);
    out.push_back(&l.bias);
  }
  return out;
}

std::vector<const Tensor*> MlpNet::params() const {
  std::vector<const Tensor*> out;
  for (const auto& l : layers) {
    out.push_back(&l.weights);
    out.push_back(&l.bias);
  }
  return out;
}

void MlpNet::zero_grads() {
  for (Tensor* t : params()) t->zero_grad();
}

MlpNet make_mlp(Eigen::Index in, const std::vector<Eigen::Index>& hidden,
                Eigen::Index out, double leaky_slope, Rng& rng) {
  std::vector<Eigen::Index> dims;
  dims.push_back(in);
  dims.insert(dims.end(), hidden.begin(), hidden.end());
  dims.push_back(out);

  MlpNet net;
  net.leaky_slope = leaky_slope;
  for (std::size_t l = 0; l + 1 < dims.size(); ++l) {
    DenseLayer layer;
    layer.weights = Tensor(dims[l + 1], dims[l]);
    layer.bias = Tensor(dims[l + 1], 1);
    const double bound = 1.0 / std::sqrt(static_cast<double>(dims[l]));
    for (Eigen::Index i = 0; i < layer.weights.value.rows(); ++i)
      for (Eigen::Index j = 0; j < layer.weights.value.cols(); ++j)
        layer.weights.value(i, j) = rng.uniform(-bound, bound);
    for (Eigen::Index i = 0; i < layer.bias.value.rows(); ++i)
      layer.bias.value(i, 0) = rng.uniform(-bound, bound);
    net.layers.push_back(std::move(layer));
  }
  return net;
}

MlpNet make_like(const MlpNet& src) {
  MlpNet net;
  net.leaky_slope = src.leaky_slope;
  for (const auto& l : src.layers) {
    DenseLayer layer;
    layer.weights = Tensor(l.out_dim(), l.in_dim());
    layer.bias = Tensor(l.out_dim(), 1);
    net.layers.push_back(std::move(layer));
  }
  return net;
}

void check_same_architecture(const MlpNet& a, const MlpNet& b) {
  if (a.layers.size() != b.layers.size())
    throw ShapeError("architecture mismatch: layer count");
  for (std::size_t l = 0; l < a.layers.size(); ++l)
    if (a.layers[l].in_dim() != b.layers[l].in_dim() ||
        a.layers[l].out_dim() != b.layers[l].out_dim())
      throw ShapeError("architecture mismatch at layer " + std::to_string(l));
}

void copy_except_final(const MlpNet& src, MlpNet& dst) {
  check_same_architecture(src, dst);
  for (std::size_t l = 0; l + 1 < src.layers.size(); ++l) {
    dst.layers[l].weights.value = src.layers[l].weights.value;
    dst.layers[l].bias.value = src.layers[l].bias.value;
  }
}

void zero_final(MlpNet& net) {
  net.layers.back().weights.value.setZero();
  net.layers.back().bias.value.setZero();
}

double frobenius_norm(const Tensor& t) { return t.value.norm(); }

double weight_norm_sum(const MlpNet& net) {
  double s = 0.0;
  for (const auto& l : net.layers) s += l.weights.value.norm();
  return s;
}

void adam_update(Tensor& param, AdamState& state, const AdamConfig& cfg,
                 long step) {
  if (state.m.size() == 0) {
    state.m = MatrixXd::Zero(param.value.rows(), param.value.cols());
    state.v = MatrixXd::Zero(param.value.rows(), param.value.cols());
  }
  if (state.m.rows() != param.value.rows() ||
      state.m.cols() != param.value.cols() ||
      param.grad.rows() != param.value.rows() ||
      param.grad.cols() != param.value.cols())
    throw ShapeError("adam_update: shape mismatch");

  state.m = cfg.beta1 * state.m + (1.0 - cfg.beta1) * param.grad;
  state.v = cfg.beta2 * state.v +
            (1.0 - cfg.beta2) * param.grad.cwiseProduct(param.grad);
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(step));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(step));
  const MatrixXd m_hat = state.m / bc1;
  const MatrixXd v_hat = state.v / bc2;
  param.value -=
      cfg.lr * m_hat.cwiseQuotient(v_hat.cwiseSqrt().array().matrix() +
                                   MatrixXd::Constant(v_hat.rows(),
                                                      v_hat.cols(), cfg.eps));
}

Adam::Adam(std::vector<Tensor*> params, AdamConfig cfg)
    : params_(std::move(params)), cfg_(cfg) {
  states_.resize(params_.size());
}

void Adam::step() {
  ++step_;
  for (std::size_t i = 0; i < params_.size(); ++i)
    adam_update(*params_[i], states_[i], cfg_, step_);
}

void Adam::zero_grad() {
  for (Tensor* t : params_) t->zero_grad();
}

}  // namespace pmoe::nn
