#include <cstdio>
#include <fstream>

#include "doctest.h"
#include "pmoe/checkpoint.hpp"
#include "pmoe/config.hpp"
#include "pmoe/errors.hpp"

using namespace pmoe;
using Eigen::VectorXd;

namespace {

policy::PolicyState small_policy(policy::Variant v, Rng& rng,
                                 int experts = 1) {
  policy::PolicyConfig cfg;
  cfg.input_dim = 5;
  cfg.action_dim = 3;
  cfg.hidden = 8;
  cfg.gating_hidden = 4;
  cfg.critic_hidden = 8;
  cfg.variant = v;
  policy::PolicyState p = policy::make_policy(cfg, rng);
  while (p.expert_count() < experts) policy::activate_expert(p, rng);
  return p;
}

struct TempFile {
  std::string path;
  explicit TempFile(std::string p) : path(std::move(p)) {}
  ~TempFile() { std::remove(path.c_str()); }
};

}  // namespace

TEST_CASE("checkpoint round trip is bit-exact") {
  Rng rng(51);
  policy::PolicyState p =
      small_policy(policy::Variant::kProgressive, rng, 2);
  // make the zeroed final layer nonzero so the check has teeth
  for (nn::Tensor* t : policy::all_params(p))
    for (int i = 0; i < t->value.size(); ++i) t->value.data()[i] += rng.normal();

  TempFile f("ckpt_roundtrip.pmoe");
  checkpoint::save_checkpoint(f.path, p);
  policy::PolicyState q = checkpoint::load_checkpoint(f.path);

  CHECK(q.expert_count() == 2);
  CHECK(q.active == 1);
  CHECK(q.experts[0].frozen);
  CHECK_FALSE(q.experts[1].frozen);
  CHECK(q.gating_frozen[0]);

  std::vector<nn::Tensor*> pa = policy::all_params(p);
  std::vector<nn::Tensor*> qa = policy::all_params(q);
  REQUIRE(pa.size() == qa.size());
  for (std::size_t i = 0; i < pa.size(); ++i)
    CHECK(pa[i]->value == qa[i]->value);

  SUBCASE("saved files are byte-identical for the same state") {
    TempFile g("ckpt_roundtrip2.pmoe");
    checkpoint::save_checkpoint(g.path, q);
    std::ifstream a(f.path, std::ios::binary), b(g.path, std::ios::binary);
    std::string sa((std::istreambuf_iterator<char>(a)), {});
    std::string sb((std::istreambuf_iterator<char>(b)), {});
    CHECK(sa == sb);
  }
}

TEST_CASE("checkpoint preserves trainer state") {
  Rng rng(52);
  policy::PolicyState p = small_policy(policy::Variant::kProgressive, rng);

  checkpoint::TrainerSnapshot snap;
  snap.iteration = 17;
  snap.confidence_history = {0.1, 0.2, 0.3};
  snap.norm_count = 42.0;
  snap.norm_mean = VectorXd::LinSpaced(5, -1.0, 1.0);
  snap.norm_m2 = VectorXd::Constant(5, 2.5);
  snap.opt_step = 9;
  snap.gating_step = 4;
  // moment buffers shaped like the live optimizer layout
  std::vector<nn::Tensor*> gating_ts;
  for (nn::Tensor* t : p.gating_heads[0].params()) gating_ts.push_back(t);
  std::vector<nn::Tensor*> policy_ts;
  for (nn::Tensor* t : policy::trainable_params(p)) {
    bool is_gating = false;
    for (nn::Tensor* g : gating_ts) is_gating |= g == t;
    if (!is_gating) policy_ts.push_back(t);
  }
  for (nn::Tensor* t : policy_ts) {
    nn::AdamState s;
    s.m = 0.5 * t->value;
    s.v = t->value.cwiseAbs();
    snap.opt_states.push_back(s);
  }
  for (nn::Tensor* t : gating_ts) {
    nn::AdamState s;
    s.m = -0.25 * t->value;
    s.v = t->value.cwiseAbs2();
    snap.gating_states.push_back(s);
  }
  snap.clip_ids = {"push_3", "box_4"};
  motion::ClipStats cs;
  cs.mean_track_reward = 0.625;
  cs.initialized = true;
  cs.successes = 3;
  cs.attempts = 7;
  snap.clip_stats = {cs, motion::ClipStats{}};

  TempFile f("ckpt_trainer.pmoe");
  checkpoint::save_checkpoint(f.path, p, &snap);
  checkpoint::TrainerSnapshot back;
  policy::PolicyState q = checkpoint::load_checkpoint(f.path, &back);

  CHECK(back.iteration == 17);
  CHECK(back.confidence_history == snap.confidence_history);
  CHECK(back.norm_count == 42.0);
  CHECK(back.norm_mean == snap.norm_mean);
  CHECK(back.norm_m2 == snap.norm_m2);
  CHECK(back.opt_step == 9);
  CHECK(back.gating_step == 4);
  REQUIRE(back.opt_states.size() == snap.opt_states.size());
  for (std::size_t i = 0; i < snap.opt_states.size(); ++i) {
    CHECK(back.opt_states[i].m == snap.opt_states[i].m);
    CHECK(back.opt_states[i].v == snap.opt_states[i].v);
  }
  REQUIRE(back.gating_states.size() == snap.gating_states.size());
  CHECK(back.clip_ids == snap.clip_ids);
  CHECK(back.clip_stats[0].mean_track_reward == 0.625);
  CHECK(back.clip_stats[0].successes == 3);
  CHECK(back.clip_stats[1].attempts == 0);
}

TEST_CASE("checkpoint format errors") {
  SUBCASE("missing file") {
    CHECK_THROWS_AS(checkpoint::load_checkpoint("no_such.pmoe"), IoError);
  }

  SUBCASE("wrong magic") {
    TempFile f("ckpt_badmagic.pmoe");
    std::ofstream out(f.path, std::ios::binary);
    out << "NOPEimmaterial";
    out.close();
    CHECK_THROWS_AS(checkpoint::load_checkpoint(f.path), FormatError);
  }

  SUBCASE("truncation") {
    Rng rng(53);
    policy::PolicyState p = small_policy(policy::Variant::kMlp, rng);
    TempFile f("ckpt_trunc.pmoe");
    checkpoint::save_checkpoint(f.path, p);
    std::ifstream in(f.path, std::ios::binary);
    std::string bytes((std::istreambuf_iterator<char>(in)), {});
    in.close();
    std::ofstream out(f.path, std::ios::binary | std::ios::trunc);
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size() - 16));
    out.close();
    CHECK_THROWS_AS(checkpoint::load_checkpoint(f.path), FormatError);
  }
}

TEST_CASE("checkpoints cover every policy variant") {
  for (auto v : {policy::Variant::kMlp, policy::Variant::kSoftMoe,
                 policy::Variant::kManualPnn}) {
    Rng rng(54);
    policy::PolicyState p = small_policy(v, rng);
    TempFile f("ckpt_variant.pmoe");
    checkpoint::save_checkpoint(f.path, p);
    policy::PolicyState q = checkpoint::load_checkpoint(f.path);
    CHECK(q.config.variant == v);
    std::vector<nn::Tensor*> pa = policy::all_params(p);
    std::vector<nn::Tensor*> qa = policy::all_params(q);
    REQUIRE(pa.size() == qa.size());
    for (std::size_t i = 0; i < pa.size(); ++i)
      CHECK(pa[i]->value == qa[i]->value);
  }
}

TEST_CASE("variant names round-trip") {
  for (auto v : {policy::Variant::kProgressive, policy::Variant::kMlp,
                 policy::Variant::kSoftMoe, policy::Variant::kManualPnn})
    CHECK(checkpoint::variant_from_name(checkpoint::variant_name(v)) == v);
  CHECK_THROWS_AS(checkpoint::variant_from_name("transformer"), ConfigError);
}

TEST_CASE("run config") {
  SUBCASE("defaults serialize and round-trip identically") {
    config::RunConfig cfg;
    const std::string text = config::serialize_run_config(cfg);
    const config::RunConfig back = config::parse_run_config(text);
    CHECK(back == cfg);
    CHECK(config::serialize_run_config(back) == text);
  }

  SUBCASE("values survive the round trip") {
    config::RunConfig cfg;
    cfg.seed = 99;
    cfg.variant = "mlp";
    cfg.clips = {"a.mclp", "b.mclp"};
    cfg.trainer.strategy = trainer::SamplingStrategy::kUniform;
    cfg.trainer.temperature = 0.37;
    cfg.env.perturbation.mode = env::PerturbationMode::kNoise;
    cfg.env.perturbation.noise_scale = 0.3;
    cfg.sim.friction = 0.55;
    const config::RunConfig back =
        config::parse_run_config(config::serialize_run_config(cfg));
    CHECK(back == cfg);
    CHECK(back.trainer.temperature == 0.37);
    CHECK(back.sim.friction == 0.55);
  }

  SUBCASE("unknown keys are rejected with their path") {
    CHECK_THROWS_WITH_AS(config::parse_run_config(R"({"sede": 1})"),
                         doctest::Contains("sede"), ConfigError);
    CHECK_THROWS_WITH_AS(
        config::parse_run_config(R"({"trainer": {"gama": 0.9}})"),
        doctest::Contains("trainer.gama"), ConfigError);
    CHECK_THROWS_WITH_AS(
        config::parse_run_config(
            R"({"env": {"perturbation": {"model": "none"}}})"),
        doctest::Contains("env.perturbation.model"), ConfigError);
  }

  SUBCASE("invalid values are rejected") {
    CHECK_THROWS_AS(config::parse_run_config(R"({"trainer": {"gamma": 2.0}})"),
                    ConfigError);
    CHECK_THROWS_AS(config::parse_run_config("not json"), ConfigError);
    CHECK_THROWS_AS(
        config::parse_run_config(R"({"env": {"action_mode": "magic"}})"),
        ConfigError);
  }

  SUBCASE("file io") {
    config::RunConfig cfg;
    cfg.seed = 7;
    const std::string path = "run_config_test.json";
    config::save_run_config(cfg, path);
    const config::RunConfig back = config::load_run_config(path);
    CHECK(back == cfg);
    std::remove(path.c_str());
    CHECK_THROWS_AS(config::load_run_config("missing.json"), IoError);
  }
}
