#include <cstdio>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>

#include "CLI11.hpp"

#include "dpl/config.hpp"
#include "dpl/data.hpp"
#include "dpl/errors.hpp"
#include "dpl/evaluation.hpp"
#include "dpl/indicators.hpp"
#include "dpl/pipeline.hpp"
#include "dpl/trainer.hpp"

namespace fs = std::filesystem;
using namespace dpl;

namespace {

struct GlobalOptions {
  std::string config_path;
  std::optional<std::uint64_t> seed;
  bool deterministic = false;
};

RunConfig resolve_config(const GlobalOptions& g) {
  RunConfig c = g.config_path.empty() ? RunConfig{} : load_config(g.config_path);
  if (g.seed) c.seed = *g.seed;
  if (g.deterministic) c.deterministic = true;
  c.validate();
  return c;
}

void print_histogram(const char* name, const std::vector<int>& h) {
  std::cout << name << " levels:";
  for (std::size_t i = 0; i < h.size(); ++i) std::cout << "  " << (i + 1) << ":" << h[i];
  std::cout << '\n';
}

int cmd_fit_indicators(const GlobalOptions& g) {
  auto config = resolve_config(g);
  apply_runtime(config);
  auto fit = fit_indicators(config);
  auto paths = quantizer_paths(config);
  std::cout << "fitted on " << fit.n_images << " training images\n";
  print_histogram("quality", fit.quality_histogram);
  print_histogram("identifiability", fit.identifiability_histogram);
  std::cout << "wrote " << paths.quality.string() << "\nwrote " << paths.identifiability.string() << '\n';
  return 0;
}

int cmd_train(const GlobalOptions& g, bool resume) {
  auto config = resolve_config(g);
  auto result = training::train(config, resume, &std::cout);
  std::cout << "last checkpoint: " << result.last_checkpoint.string() << '\n';
  return 0;
}

struct EvalArgs {
  std::string checkpoint;
  std::string manifest;
  std::string split = "test";
  std::string policy;
  std::vector<int> quality;
  std::string perturbation;  // kind:severity
  bool robustness = false;
  std::string out;
  int batch_size = 64;
};

// Loads the checkpoint and works out manifest, policy and seed, preferring
// flags, then --config, then the checkpoint's own config.
struct EvalSetup {
  LoadedModel model;
  std::vector<data::Sample> samples;
  evaluation::EvalOptions options;
  fs::path out_dir;
};

EvalSetup prepare_eval(const GlobalOptions& g, const EvalArgs& a) {
  std::optional<RunConfig> user;
  if (!g.config_path.empty()) user = resolve_config(g);
  if (a.checkpoint.empty()) throw ConfigError("--checkpoint is required");
  if (!fs::exists(a.checkpoint)) throw Error("checkpoint not found: " + a.checkpoint);
  EvalSetup s;
  s.model = load_model(a.checkpoint);
  const RunConfig& base = user ? *user : s.model.config;
  apply_runtime(base);
  std::string manifest = !a.manifest.empty() ? a.manifest : base.data.test_manifest;
  if (manifest.empty()) manifest = base.data.train_manifest;
  s.options.policy = base.data.test_compression;
  if (!a.policy.empty()) s.options.policy.mode = data::compression_mode_from_string(a.policy);
  if (a.quality.size() == 1) {
    s.options.policy.quality_lo = s.options.policy.quality_hi = a.quality[0];
  } else if (a.quality.size() == 2) {
    s.options.policy.quality_lo = a.quality[0];
    s.options.policy.quality_hi = a.quality[1];
  } else if (!a.quality.empty()) {
    throw ConfigError("--quality takes one or two integers");
  }
  s.options.policy.validate();
  s.options.seed = g.seed ? *g.seed : base.seed;
  s.options.batch_size = a.batch_size;
  if (!a.perturbation.empty()) {
    auto colon = a.perturbation.find(':');
    if (colon == std::string::npos) throw ConfigError("--perturbation expects kind:severity");
    evaluation::PerturbationSpec p;
    p.kind = evaluation::perturbation_from_string(a.perturbation.substr(0, colon));
    try {
      p.severity = std::stoi(a.perturbation.substr(colon + 1));
    } catch (const std::exception&) {
      throw ConfigError("--perturbation severity must be an integer");
    }
    p.validate();
    s.options.perturbation = p;
  }
  s.samples = load_split(manifest, data::split_from_string(a.split), base.data.image_size);
  s.out_dir = !a.out.empty() ? fs::path(a.out) : fs::path(a.checkpoint).parent_path().parent_path() / "eval";
  return s;
}

int cmd_eval(const GlobalOptions& g, const EvalArgs& a) {
  auto s = prepare_eval(g, a);
  auto report = evaluation::evaluate(*s.model.detector, s.samples, s.options);
  report.checkpoint = a.checkpoint;
  std::string stem = std::string("report_") + data::to_string(s.options.policy.mode);
  if (s.options.policy.mode != data::CompressionMode::kNone)
    stem += "_q" + std::to_string(s.options.policy.quality_lo) + "-" + std::to_string(s.options.policy.quality_hi);
  if (s.options.perturbation)
    stem += std::string("_") + evaluation::to_string(s.options.perturbation->kind) + std::to_string(s.options.perturbation->severity);
  report.save(s.out_dir / (stem + ".txt"), s.out_dir / (stem + ".json"));
  std::cout << report.to_text();
  std::cout << "wrote " << (s.out_dir / (stem + ".txt")).string() << '\n';
  if (a.robustness) {
    auto cells = evaluation::robustness_sweep(*s.model.detector, s.samples, s.options);
    evaluation::save_robustness_csv(cells, s.out_dir / "robustness.csv");
    evaluation::plot_robustness(cells, s.out_dir / "robustness.png", report.auc);
    for (const auto& c : cells)
      std::printf("%-10s severity %d  auc %.6f\n", evaluation::to_string(c.kind), c.severity, c.auc);
    std::cout << "wrote " << (s.out_dir / "robustness.csv").string() << " and robustness.png\n";
  }
  return 0;
}

int cmd_score(const GlobalOptions& g, const std::string& image_path, const std::string& which,
              const std::string& quantizer) {
  auto config = resolve_config(g);
  indicators::IndicatorKind kind;
  if (which == "vqi") kind = indicators::IndicatorKind::kQuality;
  else if (which == "fii") kind = indicators::IndicatorKind::kIdentifiability;
  else throw ConfigError("--which must be vqi or fii");
  auto paths = quantizer_paths(config);
  fs::path qpath = !quantizer.empty() ? fs::path(quantizer)
                                      : (kind == indicators::IndicatorKind::kQuality ? paths.quality : paths.identifiability);
  if (!fs::exists(qpath)) throw Error("quantizer not found: " + qpath.string() + " (run fit-indicators first)");
  auto spec = indicators::QuantizerSpec::load(qpath);
  auto image = resize_to(load_image(image_path), config.data.image_size);
  auto indicator = make_indicator(config.indicators, kind);
  const double q = (*indicator)(image).value;
  std::printf("%s score %.9f level %d\n", which.c_str(), q, indicators::quantize(q, spec).value);
  return 0;
}

int cmd_synth(const GlobalOptions& g, data::SyntheticOptions opts, const std::string& out) {
  if (out.empty()) throw ConfigError("--out is required");
  if (g.seed) opts.seed = *g.seed;
  else if (!g.config_path.empty()) opts.seed = resolve_config(g).seed;
  auto entries = data::make_synthetic_dataset(opts, out);
  std::cout << "wrote " << entries.size() << " images and " << (fs::path(out) / "manifest.tsv").string() << '\n';
  return 0;
}

int cmd_export(const GlobalOptions& g, const EvalArgs& a) {
  if (a.out.empty()) throw ConfigError("--out is required");
  EvalArgs copy = a;
  auto s = prepare_eval(g, copy);
  evaluation::export_embeddings(*s.model.detector, s.samples, s.options, a.out);
  std::cout << "wrote " << s.samples.size() << " embeddings to " << a.out << '\n';
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Dual-branch progressive learning deepfake detector toolkit"};
  app.require_subcommand(1);
  app.fallthrough();
  GlobalOptions g;
  std::uint64_t seed = 0;
  app.add_option("--config", g.config_path, "Run config (JSON)");
  auto* seed_opt = app.add_option("--seed", seed, "Root seed (overrides the config)");
  app.add_flag("--deterministic", g.deterministic, "Single-threaded deterministic kernels");

  auto* fit = app.add_subcommand("fit-indicators", "Fit the quality and identifiability quantizers");

  bool resume = false;
  auto* train = app.add_subcommand("train", "Run both training stages");
  train->add_flag("--resume", resume, "Continue after the newest checkpoint");

  EvalArgs ev;
  auto* eval = app.add_subcommand("eval", "Evaluate a checkpoint");
  eval->add_option("--checkpoint", ev.checkpoint, "Checkpoint file")->required();
  eval->add_option("--manifest", ev.manifest, "Manifest (default: the config's test manifest)");
  eval->add_option("--split", ev.split, "Manifest split")->check(CLI::IsMember({"train", "val", "test"}));
  eval->add_option("--policy", ev.policy, "Compression policy")->check(CLI::IsMember({"none", "random_jpeg", "fixed_jpeg"}));
  eval->add_option("--quality", ev.quality, "JPEG quality (fixed) or range LO HI")->expected(1, 2);
  eval->add_option("--perturbation", ev.perturbation, "kind:severity, e.g. noise:3");
  eval->add_flag("--robustness", ev.robustness, "Sweep 4 perturbations x 5 severities");
  eval->add_option("--out", ev.out, "Output directory");
  eval->add_option("--batch-size", ev.batch_size, "Evaluation batch size")->check(CLI::PositiveNumber);

  std::string image_path, which = "vqi", quantizer;
  auto* score = app.add_subcommand("score", "Score one image with an indicator");
  score->add_option("image", image_path, "Image file")->required();
  score->add_option("--which", which, "vqi or fii")->check(CLI::IsMember({"vqi", "fii"}));
  score->add_option("--quantizer", quantizer, "Quantizer file (default: from the config's output dir)");

  data::SyntheticOptions so;
  std::string synth_out;
  std::vector<int> synth_quality;
  auto* synth = app.add_subcommand("synth", "Generate a synthetic face dataset");
  synth->add_option("--out", synth_out, "Output directory")->required();
  synth->add_option("--n-per-class", so.n_per_class, "Images per class")->check(CLI::PositiveNumber);
  synth->add_option("--artifact-strength", so.artifact_strength, "Planted artifact strength")->check(CLI::Range(0.0, 1.0));
  synth->add_option("--quality-range", synth_quality, "JPEG quality LO HI")->expected(2);
  synth->add_option("--image-size", so.image_size, "Image side")->check(CLI::Range(32, 4096));
  synth->add_option("--test-fraction", so.test_fraction, "Per-class test fraction")->check(CLI::Range(0.0, 1.0));

  EvalArgs ex;
  auto* exp = app.add_subcommand("export-embeddings", "Write fused features for external projection");
  exp->add_option("--checkpoint", ex.checkpoint, "Checkpoint file")->required();
  exp->add_option("--manifest", ex.manifest, "Manifest (default: the config's test manifest)");
  exp->add_option("--split", ex.split, "Manifest split")->check(CLI::IsMember({"train", "val", "test"}));
  exp->add_option("--policy", ex.policy, "Compression policy")->check(CLI::IsMember({"none", "random_jpeg", "fixed_jpeg"}));
  exp->add_option("--out", ex.out, "Output TSV")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 1;
  }
  if (*seed_opt) g.seed = seed;

  try {
    if (*fit) return cmd_fit_indicators(g);
    if (*train) return cmd_train(g, resume);
    if (*eval) return cmd_eval(g, ev);
    if (*score) return cmd_score(g, image_path, which, quantizer);
    if (*synth) {
      if (!synth_quality.empty()) {
        so.quality_lo = synth_quality[0];
        so.quality_hi = synth_quality[1];
      }
      return cmd_synth(g, so, synth_out);
    }
    if (*exp) return cmd_export(g, ex);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  }
  return 1;
}
