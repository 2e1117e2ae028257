#include "pmoe/config.hpp"

#include <nlohmann/json.hpp>

#include <fstream>
#include <set>
#include <sstream>

#include "pmoe/errors.hpp"

namespace pmoe::config {

using ordered_json = nlohmann::ordered_json;

namespace {

void check_keys(const ordered_json& j, const std::string& path,
                const std::set<std::string>& allowed) {
  if (!j.is_object())
    throw ConfigError("config: " + path + " must be an object");
  for (const auto& [key, value] : j.items())
    if (!allowed.count(key))
      throw ConfigError("config: unknown key \"" +
                        (path.empty() ? key : path + "." + key) + "\"");
}

template <typename T>
void maybe(const ordered_json& j, const char* key, T& out) {
  if (j.contains(key)) j.at(key).get_to(out);
}

std::string action_mode_name(env::ActionMode m) {
  return m == env::ActionMode::kResidual ? "residual" : "absolute";
}

env::ActionMode action_mode_from_name(const std::string& s) {
  if (s == "residual") return env::ActionMode::kResidual;
  if (s == "absolute") return env::ActionMode::kAbsolute;
  throw ConfigError("config: unknown action mode: " + s);
}

std::string perturbation_name(env::PerturbationMode m) {
  switch (m) {
    case env::PerturbationMode::kNone: return "none";
    case env::PerturbationMode::kObject: return "object";
    case env::PerturbationMode::kNoise: return "noise";
  }
  throw ConfigError("invalid perturbation mode value");
}

env::PerturbationMode perturbation_from_name(const std::string& s) {
  if (s == "none") return env::PerturbationMode::kNone;
  if (s == "object") return env::PerturbationMode::kObject;
  if (s == "noise") return env::PerturbationMode::kNoise;
  throw ConfigError("config: unknown perturbation mode: " + s);
}

}  // namespace

RunConfig parse_run_config(const std::string& text) {
  ordered_json j;
  try {
    j = ordered_json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("config: parse failure: ") + e.what());
  }

  check_keys(j, "",
             {"seed", "output_dir", "variant", "character_model", "clips",
              "iterations", "hidden", "gating_hidden", "critic_hidden",
              "adapter_init_scale", "log_std_init", "literal_routing",
              "baseline_experts", "sim", "env", "trainer"});

  RunConfig cfg;
  maybe(j, "seed", cfg.seed);
  maybe(j, "output_dir", cfg.output_dir);
  maybe(j, "variant", cfg.variant);
  maybe(j, "character_model", cfg.character_model);
  maybe(j, "clips", cfg.clips);
  maybe(j, "iterations", cfg.iterations);
  maybe(j, "hidden", cfg.hidden);
  maybe(j, "gating_hidden", cfg.gating_hidden);
  maybe(j, "critic_hidden", cfg.critic_hidden);
  maybe(j, "adapter_init_scale", cfg.adapter_init_scale);
  maybe(j, "log_std_init", cfg.log_std_init);
  maybe(j, "literal_routing", cfg.literal_routing);
  maybe(j, "baseline_experts", cfg.baseline_experts);

  if (j.contains("sim")) {
    const ordered_json& js = j.at("sim");
    check_keys(js, "sim",
               {"dt", "substeps", "gravity", "contact_stiffness",
                "contact_damping", "friction", "tangent_damping",
                "max_contact_force", "control_rate"});
    maybe(js, "dt", cfg.sim.dt);
    maybe(js, "substeps", cfg.sim.substeps);
    maybe(js, "gravity", cfg.sim.gravity);
    maybe(js, "contact_stiffness", cfg.sim.contact_stiffness);
    maybe(js, "contact_damping", cfg.sim.contact_damping);
    maybe(js, "friction", cfg.sim.friction);
    maybe(js, "tangent_damping", cfg.sim.tangent_damping);
    maybe(js, "max_contact_force", cfg.sim.max_contact_force);
    maybe(js, "control_rate", cfg.sim.control_rate);
  }

  if (j.contains("env")) {
    const ordered_json& je = j.at("env");
    check_keys(je, "env",
               {"max_episode_steps", "termination_threshold",
                "randomize_start_frame", "action_mode", "perturbation"});
    maybe(je, "max_episode_steps", cfg.env.max_episode_steps);
    maybe(je, "termination_threshold", cfg.env.termination_threshold);
    maybe(je, "randomize_start_frame", cfg.env.randomize_start_frame);
    if (je.contains("action_mode"))
      cfg.env.action_mode =
          action_mode_from_name(je.at("action_mode").get<std::string>());
    if (je.contains("perturbation")) {
      const ordered_json& jp = je.at("perturbation");
      check_keys(jp, "env.perturbation",
                 {"mode", "object_masses", "throw_interval", "throw_speed",
                  "noise_scale"});
      if (jp.contains("mode"))
        cfg.env.perturbation.mode =
            perturbation_from_name(jp.at("mode").get<std::string>());
      maybe(jp, "object_masses", cfg.env.perturbation.object_masses);
      maybe(jp, "throw_interval", cfg.env.perturbation.throw_interval);
      maybe(jp, "throw_speed", cfg.env.perturbation.throw_speed);
      maybe(jp, "noise_scale", cfg.env.perturbation.noise_scale);
    }
  }

  if (j.contains("trainer")) {
    const ordered_json& jt = j.at("trainer");
    check_keys(jt, "trainer",
               {"gamma", "lambda", "clip_eps", "epochs", "minibatch_size",
                "rollout_steps", "adapter_weight", "learning_rate",
                "gating_learning_rate", "entropy_coef", "strategy",
                "temperature", "stagnation_window", "stagnation_delta",
                "max_experts", "adapter_init_scale", "pss_enabled",
                "routing_candidates"});
    maybe(jt, "gamma", cfg.trainer.gamma);
    maybe(jt, "lambda", cfg.trainer.lambda);
    maybe(jt, "clip_eps", cfg.trainer.clip_eps);
    maybe(jt, "epochs", cfg.trainer.epochs);
    maybe(jt, "minibatch_size", cfg.trainer.minibatch_size);
    maybe(jt, "rollout_steps", cfg.trainer.rollout_steps);
    maybe(jt, "adapter_weight", cfg.trainer.adapter_weight);
    maybe(jt, "learning_rate", cfg.trainer.learning_rate);
    maybe(jt, "gating_learning_rate", cfg.trainer.gating_learning_rate);
    maybe(jt, "entropy_coef", cfg.trainer.entropy_coef);
    if (jt.contains("strategy"))
      cfg.trainer.strategy =
          trainer::sampling_strategy_from_string(
              jt.at("strategy").get<std::string>());
    maybe(jt, "temperature", cfg.trainer.temperature);
    maybe(jt, "stagnation_window", cfg.trainer.stagnation_window);
    maybe(jt, "stagnation_delta", cfg.trainer.stagnation_delta);
    maybe(jt, "max_experts", cfg.trainer.max_experts);
    maybe(jt, "adapter_init_scale", cfg.trainer.adapter_init_scale);
    maybe(jt, "pss_enabled", cfg.trainer.pss_enabled);
    maybe(jt, "routing_candidates", cfg.trainer.routing_candidates);
  }

  cfg.sim.validate();
  cfg.trainer.validate();
  return cfg;
}

std::string serialize_run_config(const RunConfig& cfg) {
  ordered_json j;
  j["seed"] = cfg.seed;
  j["output_dir"] = cfg.output_dir;
  j["variant"] = cfg.variant;
  j["character_model"] = cfg.character_model;
  j["clips"] = cfg.clips;
  j["iterations"] = cfg.iterations;
  j["hidden"] = cfg.hidden;
  j["gating_hidden"] = cfg.gating_hidden;
  j["critic_hidden"] = cfg.critic_hidden;
  j["adapter_init_scale"] = cfg.adapter_init_scale;
  j["log_std_init"] = cfg.log_std_init;
  j["literal_routing"] = cfg.literal_routing;
  j["baseline_experts"] = cfg.baseline_experts;
  j["sim"] = {{"dt", cfg.sim.dt},
              {"substeps", cfg.sim.substeps},
              {"gravity", cfg.sim.gravity},
              {"contact_stiffness", cfg.sim.contact_stiffness},
              {"contact_damping", cfg.sim.contact_damping},
              {"friction", cfg.sim.friction},
              {"tangent_damping", cfg.sim.tangent_damping},
              {"max_contact_force", cfg.sim.max_contact_force},
              {"control_rate", cfg.sim.control_rate}};
  j["env"] = {
      {"max_episode_steps", cfg.env.max_episode_steps},
      {"termination_threshold", cfg.env.termination_threshold},
      {"randomize_start_frame", cfg.env.randomize_start_frame},
      {"action_mode", action_mode_name(cfg.env.action_mode)},
      {"perturbation",
       {{"mode", perturbation_name(cfg.env.perturbation.mode)},
        {"object_masses", cfg.env.perturbation.object_masses},
        {"throw_interval", cfg.env.perturbation.throw_interval},
        {"throw_speed", cfg.env.perturbation.throw_speed},
        {"noise_scale", cfg.env.perturbation.noise_scale}}}};
  j["trainer"] = {{"gamma", cfg.trainer.gamma},
                  {"lambda", cfg.trainer.lambda},
                  {"clip_eps", cfg.trainer.clip_eps},
                  {"epochs", cfg.trainer.epochs},
                  {"minibatch_size", cfg.trainer.minibatch_size},
                  {"rollout_steps", cfg.trainer.rollout_steps},
                  {"adapter_weight", cfg.trainer.adapter_weight},
                  {"learning_rate", cfg.trainer.learning_rate},
                  {"gating_learning_rate", cfg.trainer.gating_learning_rate},
                  {"entropy_coef", cfg.trainer.entropy_coef},
                  {"strategy", trainer::to_string(cfg.trainer.strategy)},
                  {"temperature", cfg.trainer.temperature},
                  {"stagnation_window", cfg.trainer.stagnation_window},
                  {"stagnation_delta", cfg.trainer.stagnation_delta},
                  {"max_experts", cfg.trainer.max_experts},
                  {"adapter_init_scale", cfg.trainer.adapter_init_scale},
                  {"pss_enabled", cfg.trainer.pss_enabled},
                  {"routing_candidates", cfg.trainer.routing_candidates}};
  return j.dump(2) + "\n";
}

bool RunConfig::operator==(const RunConfig& other) const {
  return serialize_run_config(*this) == serialize_run_config(other);
}

RunConfig load_run_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config: " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_run_config(ss.str());
}

void save_run_config(const RunConfig& cfg, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write config: " + path);
  out << serialize_run_config(cfg);
}

}  // namespace pmoe::config
