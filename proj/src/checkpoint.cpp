#include "pmoe/checkpoint.hpp"

#include <nlohmann/json.hpp>

#include <cstring>
#include <fstream>

#include "pmoe/errors.hpp"

namespace pmoe::checkpoint {

using Eigen::MatrixXd;
using Eigen::VectorXd;
using ordered_json = nlohmann::ordered_json;

namespace {

constexpr char kMagic[4] = {'P', 'M', 'O', 'E'};
constexpr std::uint32_t kVersion = 1;

void write_raw(std::ostream& out, const void* p, std::size_t n) {
  out.write(static_cast<const char*>(p), static_cast<std::streamsize>(n));
}

void write_u32(std::ostream& out, std::uint32_t v) { write_raw(out, &v, 4); }

void write_block(std::ostream& out, const MatrixXd& m) {
  write_raw(out, m.data(), sizeof(double) * m.size());
}

void read_raw(std::istream& in, void* p, std::size_t n) {
  in.read(static_cast<char*>(p), static_cast<std::streamsize>(n));
  if (!in) throw FormatError("checkpoint truncated");
}

std::uint32_t read_u32(std::istream& in) {
  std::uint32_t v;
  read_raw(in, &v, 4);
  return v;
}

void read_block(std::istream& in, MatrixXd& m) {
  read_raw(in, m.data(), sizeof(double) * m.size());
}

void read_vector(std::istream& in, VectorXd& v) {
  read_raw(in, v.data(), sizeof(double) * v.size());
}

}  // namespace

std::string variant_name(policy::Variant v) {
  switch (v) {
    case policy::Variant::kProgressive: return "progressive";
    case policy::Variant::kMlp: return "mlp";
    case policy::Variant::kSoftMoe: return "soft-moe";
    case policy::Variant::kManualPnn: return "manual-pnn";
  }
  throw ConfigError("invalid policy variant value");
}

policy::Variant variant_from_name(const std::string& name) {
  if (name == "progressive") return policy::Variant::kProgressive;
  if (name == "mlp") return policy::Variant::kMlp;
  if (name == "soft-moe") return policy::Variant::kSoftMoe;
  if (name == "manual-pnn") return policy::Variant::kManualPnn;
  throw ConfigError("unknown policy variant: " + name);
}

void save_checkpoint(const std::string& path, const policy::PolicyState& p,
                     const TrainerSnapshot* snap) {
  auto& mutable_p = const_cast<policy::PolicyState&>(p);
  const std::vector<nn::Tensor*> params = policy::all_params(mutable_p);

  ordered_json manifest;
  const policy::PolicyConfig& c = p.config;
  manifest["config"] = {{"input_dim", c.input_dim},
                        {"action_dim", c.action_dim},
                        {"hidden", c.hidden},
                        {"gating_hidden", c.gating_hidden},
                        {"critic_hidden", c.critic_hidden},
                        {"max_experts", c.max_experts},
                        {"adapter_init_scale", c.adapter_init_scale},
                        {"log_std_init", c.log_std_init},
                        {"leaky_slope", c.leaky_slope},
                        {"variant", variant_name(c.variant)},
                        {"literal_routing", c.literal_routing},
                        {"baseline_experts", c.baseline_experts}};
  manifest["experts"] = p.expert_count();
  manifest["active"] = p.active;
  ordered_json frozen = ordered_json::array();
  for (const auto& e : p.experts) frozen.push_back(e.frozen);
  manifest["frozen"] = frozen;
  manifest["gating_frozen"] = p.gating_frozen;

  ordered_json blocks = ordered_json::array();
  for (const nn::Tensor* t : params)
    blocks.push_back({{"rows", t->value.rows()}, {"cols", t->value.cols()}});
  manifest["blocks"] = blocks;

  manifest["has_trainer_state"] = snap != nullptr;
  if (snap) {
    ordered_json clips = ordered_json::array();
    for (std::size_t i = 0; i < snap->clip_ids.size(); ++i) {
      const motion::ClipStats& s = snap->clip_stats.at(i);
      clips.push_back({{"id", snap->clip_ids[i]},
                       {"mean_track_reward", s.mean_track_reward},
                       {"initialized", s.initialized},
                       {"successes", s.successes},
                       {"attempts", s.attempts}});
    }
    manifest["trainer"] = {
        {"iteration", snap->iteration},
        {"history_len", snap->confidence_history.size()},
        {"norm_dim", snap->norm_mean.size()},
        {"opt_step", snap->opt_step},
        {"opt_states", snap->opt_states.size()},
        {"gating_step", snap->gating_step},
        {"gating_states", snap->gating_states.size()},
        {"clips", clips}};
  }

  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write checkpoint: " + path);
  const std::string header = manifest.dump();
  write_raw(out, kMagic, 4);
  write_u32(out, kVersion);
  write_u32(out, static_cast<std::uint32_t>(header.size()));
  write_raw(out, header.data(), header.size());
  for (const nn::Tensor* t : params) write_block(out, t->value);
  if (snap) {
    write_raw(out, snap->confidence_history.data(),
              sizeof(double) * snap->confidence_history.size());
    double count = snap->norm_count;
    write_raw(out, &count, 8);
    write_raw(out, snap->norm_mean.data(),
              sizeof(double) * snap->norm_mean.size());
    write_raw(out, snap->norm_m2.data(),
              sizeof(double) * snap->norm_m2.size());
    for (const nn::AdamState& s : snap->opt_states) {
      write_block(out, s.m);
      write_block(out, s.v);
    }
    for (const nn::AdamState& s : snap->gating_states) {
      write_block(out, s.m);
      write_block(out, s.v);
    }
  }
  if (!out) throw IoError("checkpoint write failed: " + path);
}

policy::PolicyState load_checkpoint(const std::string& path,
                                    TrainerSnapshot* snap) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint: " + path);
  char magic[4];
  read_raw(in, magic, 4);
  if (std::memcmp(magic, kMagic, 4) != 0)
    throw FormatError("not a checkpoint file: " + path);
  const std::uint32_t version = read_u32(in);
  if (version != kVersion)
    throw FormatError("unsupported checkpoint version " +
                      std::to_string(version));
  const std::uint32_t header_len = read_u32(in);
  std::string header(header_len, '\0');
  read_raw(in, header.data(), header_len);
  ordered_json manifest;
  try {
    manifest = ordered_json::parse(header);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("bad checkpoint manifest: ") + e.what());
  }

  const auto& jc = manifest.at("config");
  policy::PolicyConfig cfg;
  cfg.input_dim = jc.at("input_dim").get<int>();
  cfg.action_dim = jc.at("action_dim").get<int>();
  cfg.hidden = jc.at("hidden").get<int>();
  cfg.gating_hidden = jc.at("gating_hidden").get<int>();
  cfg.critic_hidden = jc.at("critic_hidden").get<int>();
  cfg.max_experts = jc.at("max_experts").get<int>();
  cfg.adapter_init_scale = jc.at("adapter_init_scale").get<double>();
  cfg.log_std_init = jc.at("log_std_init").get<double>();
  cfg.leaky_slope = jc.at("leaky_slope").get<double>();
  cfg.variant = variant_from_name(jc.at("variant").get<std::string>());
  cfg.literal_routing = jc.at("literal_routing").get<bool>();
  cfg.baseline_experts = jc.at("baseline_experts").get<int>();

  Rng scratch(0);  // structural init only; every value is overwritten below
  policy::PolicyState p = policy::make_policy(cfg, scratch);
  const int experts = manifest.at("experts").get<int>();
  while (p.expert_count() < experts) policy::activate_expert(p, scratch);
  p.active = manifest.at("active").get<int>();
  const auto& frozen = manifest.at("frozen");
  const auto& gating_frozen = manifest.at("gating_frozen");
  if (static_cast<int>(frozen.size()) != experts ||
      static_cast<int>(gating_frozen.size()) != experts)
    throw FormatError("checkpoint frozen flags do not match expert count");
  for (int k = 0; k < experts; ++k) {
    p.experts[k].frozen = frozen[k].get<bool>();
    p.gating_frozen[k] = gating_frozen[k].get<bool>();
  }

  const std::vector<nn::Tensor*> params = policy::all_params(p);
  const auto& blocks = manifest.at("blocks");
  if (blocks.size() != params.size())
    throw FormatError("checkpoint block table does not match architecture");
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (blocks[i].at("rows").get<Eigen::Index>() != params[i]->value.rows() ||
        blocks[i].at("cols").get<Eigen::Index>() != params[i]->value.cols())
      throw FormatError("checkpoint block shape mismatch at index " +
                        std::to_string(i));
    read_block(in, params[i]->value);
    params[i]->zero_grad();
  }

  if (manifest.at("has_trainer_state").get<bool>() && snap) {
    const auto& jt = manifest.at("trainer");
    snap->iteration = jt.at("iteration").get<int>();
    snap->confidence_history.resize(jt.at("history_len").get<std::size_t>());
    read_raw(in, snap->confidence_history.data(),
             sizeof(double) * snap->confidence_history.size());
    const Eigen::Index dim = jt.at("norm_dim").get<Eigen::Index>();
    read_raw(in, &snap->norm_count, 8);
    snap->norm_mean.resize(dim);
    snap->norm_m2.resize(dim);
    read_vector(in, snap->norm_mean);
    read_vector(in, snap->norm_m2);
    snap->opt_step = jt.at("opt_step").get<long>();
    snap->gating_step = jt.at("gating_step").get<long>();

    // optimizer moment shapes follow the live optimizer layouts on restore;
    // stored flat against the trainable tensor list
    auto read_states = [&](std::size_t count,
                           const std::vector<nn::Tensor*>& tensors,
                           std::vector<nn::AdamState>& states) {
      if (count != tensors.size())
        throw FormatError("checkpoint optimizer state count mismatch");
      states.resize(count);
      for (std::size_t i = 0; i < count; ++i) {
        states[i].m.resize(tensors[i]->value.rows(), tensors[i]->value.cols());
        states[i].v.resize(tensors[i]->value.rows(), tensors[i]->value.cols());
        read_block(in, states[i].m);
        read_block(in, states[i].v);
      }
    };
    std::vector<nn::Tensor*> gating_ts;
    for (nn::Tensor* t : p.gating_heads[p.active].params())
      gating_ts.push_back(t);
    std::vector<nn::Tensor*> policy_ts;
    {
      std::vector<nn::Tensor*> trainable = policy::trainable_params(p);
      for (nn::Tensor* t : trainable) {
        bool is_gating = false;
        for (nn::MlpNet& head : p.gating_heads)
          for (nn::Tensor* g : head.params())
            if (g == t) is_gating = true;
        if (!is_gating) policy_ts.push_back(t);
      }
    }
    read_states(jt.at("opt_states").get<std::size_t>(), policy_ts,
                snap->opt_states);
    read_states(jt.at("gating_states").get<std::size_t>(), gating_ts,
                snap->gating_states);

    snap->clip_ids.clear();
    snap->clip_stats.clear();
    for (const auto& c : jt.at("clips")) {
      snap->clip_ids.push_back(c.at("id").get<std::string>());
      motion::ClipStats s;
      s.mean_track_reward = c.at("mean_track_reward").get<double>();
      s.initialized = c.at("initialized").get<bool>();
      s.successes = c.at("successes").get<long>();
      s.attempts = c.at("attempts").get<long>();
      snap->clip_stats.push_back(s);
    }
  }
  return p;
}

}  // namespace pmoe::checkpoint
