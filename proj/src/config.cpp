#include "dpl/config.hpp"

#include <fstream>
#include <set>

#include "dpl/checkpoint.hpp"
#include "dpl/errors.hpp"

namespace dpl {

namespace {

using nlohmann::json;

// Reads fields from one JSON object and rejects keys nobody asked for.
class ObjectReader {
 public:
  ObjectReader(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw ConfigError(where() + " must be an object");
  }

  ~ObjectReader() noexcept(false) {
    if (std::uncaught_exceptions() > 0) return;
    for (const auto& [key, value] : j_.items())
      if (!used_.count(key)) throw ConfigError("unknown config key " + path_ + "." + key);
  }

  template <typename T>
  void get(const char* key, T& out) {
    used_.insert(key);
    if (!j_.contains(key)) return;
    try {
      out = j_.at(key).get<T>();
    } catch (const json::exception&) {
      throw ConfigError("wrong type for config key " + path_ + "." + key);
    }
  }

  bool has(const char* key) {
    used_.insert(key);
    return j_.contains(key);
  }

  const json& at(const char* key) const { return j_.at(key); }
  std::string child(const char* key) const { return path_ + "." + key; }

 private:
  std::string where() const { return path_.empty() ? "config" : path_; }

  const json& j_;
  std::string path_;
  std::set<std::string> used_;
};

template <typename Enum, typename Parse>
void get_enum(ObjectReader& r, const char* key, Enum& out, Parse parse) {
  std::string name;
  if (!r.has(key)) return;
  r.get(key, name);
  try {
    out = parse(name);
  } catch (const ConfigError& e) {
    throw ConfigError(r.child(key) + ": " + e.what());
  }
}

indicators::PromptPair read_prompts(const json& j, const std::string& path) {
  if (!j.is_array() || j.size() != 2 || !j[0].is_string() || !j[1].is_string())
    throw ConfigError(path + " must be a [positive, negative] string pair");
  indicators::PromptPair p{j[0].get<std::string>(), j[1].get<std::string>()};
  try {
    p.validate();
  } catch (const ConfigError& e) {
    throw ConfigError(path + ": " + e.what());
  }
  return p;
}

data::CompressionPolicy read_policy(const json& j, const std::string& path) {
  ObjectReader r(j, path);
  data::CompressionPolicy p;
  get_enum(r, "mode", p.mode, data::compression_mode_from_string);
  if (r.has("quality_range")) {
    const auto& q = r.at("quality_range");
    if (!q.is_array() || q.size() != 2 || !q[0].is_number_integer() || !q[1].is_number_integer())
      throw ConfigError(r.child("quality_range") + " must be [lo, hi] integers");
    p.quality_lo = q[0].get<int>();
    p.quality_hi = q[1].get<int>();
  }
  try {
    p.validate();
  } catch (const ConfigError& e) {
    throw ConfigError(path + ": " + e.what());
  }
  return p;
}

json policy_json(const data::CompressionPolicy& p) {
  return {{"mode", data::to_string(p.mode)}, {"quality_range", {p.quality_lo, p.quality_hi}}};
}

}  // namespace

void RunConfig::validate() const {
  if (model.backbone.output_channels < 3) throw ConfigError("model.backbone.output_channels must be >= 3");
  if (model.hidden_size < 1 || model.proposer_hidden < 1) throw ConfigError("model sizes must be positive");
  if (model.delta < 0 || model.delta > model.backbone.output_channels)
    throw ConfigError("model.delta must lie in [0, output_channels] (0 selects c/3)");
  if (!(model.initial_sigma > fsm::MaskProposerImpl::kSigmaFloor))
    throw ConfigError("model.initial_sigma must exceed the sigma floor");
  if (indicators.kind != "stub" && indicators.kind != "prompt")
    throw ConfigError("indicators.kind must be 'stub' or 'prompt'");
  if (indicators.embedder != "hash" && indicators.embedder != "torchscript")
    throw ConfigError("indicators.embedder must be 'hash' or 'torchscript'");
  if (indicators.kind == "prompt" && indicators.embedder == "torchscript" && indicators.embedder_path.empty())
    throw ConfigError("indicators.embedder_path is required for the torchscript embedder");
  if (!(indicators.temperature > 0)) throw ConfigError("indicators.temperature must be positive");
  if (indicators.quality_levels < 2 || indicators.identifiability_levels < 2)
    throw ConfigError("indicator level counts must be at least 2");
  if (training.stage1_epochs < 0 || training.stage2_epochs < 0)
    throw ConfigError("stage epoch counts must be non-negative");
  if (training.batch_size < 1) throw ConfigError("training.batch_size must be positive");
  if (!(training.learning_rate >= 0) || !(training.stage2_learning_rate >= 0))
    throw ConfigError("learning rates must be non-negative");
  if (!(training.focal_gamma >= 0)) throw ConfigError("training.focal_gamma must be non-negative");
  if (training.max_batches_per_epoch < 0) throw ConfigError("training.max_batches_per_epoch must be >= 0");
  if (training.value_hidden < 1) throw ConfigError("training.value_hidden must be positive");
  ppo.validate();
  data.train_compression.validate();
  data.test_compression.validate();
  if (data.image_size < kMinImageSide) throw ConfigError("data.image_size too small");
}

RunConfig config_from_json(const nlohmann::json& j) {
  RunConfig c;
  {
    ObjectReader r(j, "");
    std::int64_t seed = 0;
    if (r.has("seed")) {
      r.get("seed", seed);
      if (seed < 0) throw ConfigError("seed must be non-negative");
      c.seed = static_cast<std::uint64_t>(seed);
    }
    r.get("output_dir", c.output_dir);
    r.get("deterministic", c.deterministic);
    r.get("fixed_depth", c.fixed_depth);

    if (r.has("model")) {
      ObjectReader m(r.at("model"), "model");
      if (m.has("backbone")) {
        ObjectReader b(m.at("backbone"), "model.backbone");
        b.get("name", c.model.backbone.name);
        b.get("output_channels", c.model.backbone.output_channels);
        b.get("pretrained_path", c.model.backbone.pretrained_path);
        b.get("bias", c.model.backbone.bias);
      }
      m.get("hidden_size", c.model.hidden_size);
      m.get("proposer_hidden", c.model.proposer_hidden);
      m.get("delta", c.model.delta);
      m.get("initial_sigma", c.model.initial_sigma);
      get_enum(m, "fusion", c.model.fusion, branches::fusion_from_string);
    }

    if (r.has("indicators")) {
      ObjectReader ind(r.at("indicators"), "indicators");
      ind.get("kind", c.indicators.kind);
      ind.get("embedder", c.indicators.embedder);
      ind.get("embedder_path", c.indicators.embedder_path);
      if (ind.has("quality_prompts"))
        c.indicators.quality_prompts = read_prompts(ind.at("quality_prompts"), ind.child("quality_prompts"));
      if (ind.has("identifiability_prompts"))
        c.indicators.identifiability_prompts =
            read_prompts(ind.at("identifiability_prompts"), ind.child("identifiability_prompts"));
      ind.get("temperature", c.indicators.temperature);
      ind.get("quality_levels", c.indicators.quality_levels);
      ind.get("identifiability_levels", c.indicators.identifiability_levels);
    }

    if (r.has("training")) {
      ObjectReader t(r.at("training"), "training");
      t.get("stage1_epochs", c.training.stage1_epochs);
      t.get("stage2_epochs", c.training.stage2_epochs);
      t.get("batch_size", c.training.batch_size);
      t.get("learning_rate", c.training.learning_rate);
      t.get("stage2_learning_rate", c.training.stage2_learning_rate);
      t.get("focal_gamma", c.training.focal_gamma);
      t.get("use_reg", c.training.use_reg);
      get_enum(t, "reg_placement", c.training.reg_placement, training::reg_placement_from_string);
      get_enum(t, "reg_sign", c.training.reg_sign, training::reg_sign_from_string);
      t.get("value_hidden", c.training.value_hidden);
      t.get("auto_fit_indicators", c.training.auto_fit_indicators);
      t.get("max_batches_per_epoch", c.training.max_batches_per_epoch);
      t.get("export_trajectories", c.training.export_trajectories);
    }

    if (r.has("ppo")) {
      ObjectReader p(r.at("ppo"), "ppo");
      p.get("clip_epsilon", c.ppo.clip_epsilon);
      p.get("ppo_epochs_per_batch", c.ppo.ppo_epochs_per_batch);
      p.get("entropy_coefficient", c.ppo.entropy_coefficient);
      p.get("normalize_advantages", c.ppo.normalize_advantages);
      get_enum(p, "return_rule", c.ppo.return_rule, training::return_rule_from_string);
    }

    if (r.has("data")) {
      ObjectReader d(r.at("data"), "data");
      d.get("train_manifest", c.data.train_manifest);
      d.get("test_manifest", c.data.test_manifest);
      d.get("image_size", c.data.image_size);
      if (d.has("train_compression"))
        c.data.train_compression = read_policy(d.at("train_compression"), d.child("train_compression"));
      if (d.has("test_compression"))
        c.data.test_compression = read_policy(d.at("test_compression"), d.child("test_compression"));
    }
  }
  c.validate();
  return c;
}

nlohmann::json to_json(const RunConfig& c) {
  json j;
  j["seed"] = c.seed;
  j["output_dir"] = c.output_dir;
  j["deterministic"] = c.deterministic;
  j["fixed_depth"] = c.fixed_depth;
  j["model"] = {{"backbone",
                 {{"name", c.model.backbone.name},
                  {"output_channels", c.model.backbone.output_channels},
                  {"pretrained_path", c.model.backbone.pretrained_path},
                  {"bias", c.model.backbone.bias}}},
                {"hidden_size", c.model.hidden_size},
                {"proposer_hidden", c.model.proposer_hidden},
                {"delta", c.model.delta},
                {"initial_sigma", c.model.initial_sigma},
                {"fusion", branches::to_string(c.model.fusion)}};
  j["indicators"] = {
      {"kind", c.indicators.kind},
      {"embedder", c.indicators.embedder},
      {"embedder_path", c.indicators.embedder_path},
      {"quality_prompts", {c.indicators.quality_prompts.positive, c.indicators.quality_prompts.negative}},
      {"identifiability_prompts",
       {c.indicators.identifiability_prompts.positive, c.indicators.identifiability_prompts.negative}},
      {"temperature", c.indicators.temperature},
      {"quality_levels", c.indicators.quality_levels},
      {"identifiability_levels", c.indicators.identifiability_levels}};
  j["training"] = {{"stage1_epochs", c.training.stage1_epochs},
                   {"stage2_epochs", c.training.stage2_epochs},
                   {"batch_size", c.training.batch_size},
                   {"learning_rate", c.training.learning_rate},
                   {"stage2_learning_rate", c.training.stage2_learning_rate},
                   {"focal_gamma", c.training.focal_gamma},
                   {"use_reg", c.training.use_reg},
                   {"reg_placement", training::to_string(c.training.reg_placement)},
                   {"reg_sign", training::to_string(c.training.reg_sign)},
                   {"value_hidden", c.training.value_hidden},
                   {"auto_fit_indicators", c.training.auto_fit_indicators},
                   {"max_batches_per_epoch", c.training.max_batches_per_epoch},
                   {"export_trajectories", c.training.export_trajectories}};
  j["ppo"] = {{"clip_epsilon", c.ppo.clip_epsilon},
              {"ppo_epochs_per_batch", c.ppo.ppo_epochs_per_batch},
              {"entropy_coefficient", c.ppo.entropy_coefficient},
              {"normalize_advantages", c.ppo.normalize_advantages},
              {"return_rule", training::to_string(c.ppo.return_rule)}};
  j["data"] = {{"train_manifest", c.data.train_manifest},
               {"test_manifest", c.data.test_manifest},
               {"image_size", c.data.image_size},
               {"train_compression", policy_json(c.data.train_compression)},
               {"test_compression", policy_json(c.data.test_compression)}};
  return j;
}

RunConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("missing config file: " + path.string());
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("invalid JSON in " + path.string() + ": " + e.what());
  }
  return config_from_json(j);
}

std::string fingerprint(const RunConfig& config) { return sha256_hex(to_json(config).dump()); }

}  // namespace dpl
