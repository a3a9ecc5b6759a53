#include "ran/cli.hpp"

#include <CLI11.hpp>

#include <cmath>
#include <cstdio>
#include <iostream>

#include "ran/beam_search.hpp"
#include "ran/random.hpp"

namespace ran::cli {

namespace {

using caption::StructureOp;

std::string join_structures(const std::vector<StructureOp>& ops) {
  std::string out;
  for (auto op : ops) out += (out.empty() ? "" : ",") + std::string(caption::op_code(op));
  return out;
}

std::string join_split(const std::array<double, 3>& f) {
  char buf[96];
  std::snprintf(buf, sizeof buf, "%g,%g,%g", f[0], f[1], f[2]);
  return buf;
}

std::optional<ad::Primitive> primitive_from_name(const std::string& name) {
  for (int i = 0; i <= static_cast<int>(ad::Primitive::cross_entropy); ++i) {
    const auto p = static_cast<ad::Primitive>(i);
    if (name == ad::to_string(p)) return p;
  }
  return std::nullopt;
}

// Builds a CliConfig from --config, then --set, then explicit flags.
struct Layered {
  std::string config_path;
  std::vector<std::string> sets;

  void add_to(CLI::App* app) {
    app->add_option("--config", config_path, "key = value config file (flags override it)")->check(CLI::ExistingFile);
    app->add_option("--set", sets, "Extra key=value override, repeatable");
  }
  CliConfig base() const {
    CliConfig cfg;
    if (!config_path.empty()) cfg.load_file(config_path);
    for (const auto& s : sets) cfg.set_assignment(s);
    return cfg;
  }
};

glyph::DatasetManifest open_manifest(const std::filesystem::path& data, const std::string& split) {
  const auto path = data / (split + ".tsv");
  if (!std::filesystem::exists(path)) throw ConfigError("missing manifest " + path.string());
  return glyph::read_manifest(path, split);
}

int run_synth(const CliConfig& cfg, const std::filesystem::path& out) {
  const auto result = glyph::synth_dataset(cfg.synth, out);
  std::cout << "train=" << result.train.items.size() << " valid=" << result.valid.items.size()
            << " test=" << result.test.items.size() << '\n';
  std::cout << "zero_shot=" << (result.zero_shot.ok ? "ok" : "violated") << '\n';
  std::cout << "out=" << out.string() << '\n';
  return kExitOk;
}

int run_train(const CliConfig& cfg, const std::filesystem::path& data, const std::filesystem::path& out,
              std::filesystem::path log, bool quiet) {
  const auto train_m = open_manifest(data, "train");
  const auto valid_m = open_manifest(data, "valid");
  if (log.empty()) log = std::filesystem::path(out.string() + ".log.tsv");
  train::TrainOptions opts;
  opts.checkpoint_path = out;
  opts.log_path = log;
  opts.progress = quiet ? nullptr : &std::cerr;
  const auto result = train::train(train_m, valid_m, cfg.train, opts);
  const auto& last = result.log.back();
  std::cout << "epochs=" << result.epochs_run << '\n';
  std::cout << "best_epoch=" << result.best.epoch << '\n';
  std::cout << "final_valid_accuracy=" << last.valid_accuracy << '\n';
  std::cout << "best_valid_accuracy=" << result.best.valid_accuracy << '\n';
  std::cout << "checkpoint=" << out.string() << '\n';
  std::cout << "log=" << log.string() << '\n';
  return kExitOk;
}

int run_eval(const std::filesystem::path& data, const std::string& split, const std::filesystem::path& ckpt_path,
             std::size_t beam, const std::filesystem::path& report_path) {
  const auto manifest = open_manifest(data, split);
  const auto ckpt = train::load_checkpoint(ckpt_path);
  const auto report = train::evaluate(manifest, ckpt, beam);
  if (!report_path.empty()) train::write_report(report, report_path);
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.6f", report.accuracy);
  std::cout << "accuracy=" << buf << '\n';
  std::cout << "exact_match=" << report.exact_match << '/' << report.total << '\n';
  return kExitOk;
}

int run_decode(const std::filesystem::path& image_path, const std::filesystem::path& ckpt_path, std::size_t beam,
               const std::filesystem::path& attn_dir) {
  const auto img = glyph::read_pgm(image_path);
  const auto ckpt = train::load_checkpoint(ckpt_path);
  const model::RanModel<float> m(ckpt.model_config(), ckpt.params);
  const auto decoded = model::decode_caption(m, img, ckpt.vocab, {beam, ckpt.config.max_len});
  std::cout << "caption=" << decoded.caption << '\n';
  std::cout << "log_prob=" << decoded.log_prob << '\n';
  std::cout << "finished=" << (decoded.finished ? "true" : "false") << '\n';
  if (attn_dir.empty()) return kExitOk;

  std::filesystem::create_directories(attn_dir);
  const std::size_t gh = static_cast<std::size_t>(ckpt.model_config().encoder.grid_side(img.height()));
  const std::size_t gw = static_cast<std::size_t>(ckpt.model_config().encoder.grid_side(img.width()));
  for (std::size_t t = 0; t < decoded.alphas.size(); ++t) {
    const auto& a = decoded.alphas[t];
    std::vector<double> alpha(a.values().begin(), a.values().end());
    const auto heat = attention_heatmap(alpha, gh, gw, img.width(), img.height());
    const auto name = "step_" + std::to_string(t + 1) + "_" + token_file_name(decoded.tokens.at(t)) + ".pgm";
    glyph::write_pgm(heat, attn_dir / name);
  }
  std::cout << "heatmaps=" << decoded.alphas.size() << '\n';
  return kExitOk;
}

int run_gradcheck(std::uint64_t seed, double eps, const std::string& fault) {
  if (!fault.empty()) {
    const auto p = primitive_from_name(fault);
    if (!p) throw ConfigError("unknown primitive '" + fault + "'");
    ad::debug::inject_backward_fault(*p);
  }
  const auto r = gradcheck_micro(seed, eps);
  ad::debug::inject_backward_fault(std::nullopt);
  const bool ok = std::isfinite(r.max_relative_error) && r.max_relative_error < kGradCheckTolerance;
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.3e", r.max_relative_error);
  std::cout << "max_relative_error=" << buf << '\n';
  std::cout << "worst=" << r.worst_param << '[' << r.worst_index << "] analytic=" << r.analytic
            << " numeric=" << r.numeric << '\n';
  std::cout << "coordinates=" << r.coordinates << '\n';
  std::cout << (ok ? "PASS" : "FAIL") << '\n';
  return ok ? kExitOk : kExitCheckFailed;
}

}  // namespace

ad::GradCheckResult gradcheck_micro(std::uint64_t seed, double eps) {
  model::ModelConfig cfg;
  cfg.encoder = model::EncoderConfig::parse("1x8");
  cfg.embed_dim = 8;
  cfg.hidden_dim = 8;
  cfg.coverage_maps = 4;
  cfg.coverage_kernel = 5;
  cfg.vocab_size = 6;
  auto params = model::init_params<double>(cfg, seed);

  // Random ink so that no pooling window holds ties.
  glyph::GlyphImage img(8, 8);
  Rng rng(mix_seed(seed, "gradcheck/image"));
  for (auto& px : img.pixels()) px = static_cast<float>(rng.uniform());
  const std::vector<std::size_t> target{0, 5, 2, 4, 4, 3, 1};

  const model::RanModel<double> m(cfg, params);
  const ad::LossBuilder loss = [&](ad::Graph<double>& g, const ad::ParamSet<double>& ps) {
    const auto p = m.bind(g, ps);
    return m.teacher_forced_loss(g, p, img, target);
  };
  return ad::grad_check(loss, params, eps, std::size_t{1} << 20, seed);
}

glyph::GlyphImage attention_heatmap(std::span<const double> alpha, std::size_t grid_h, std::size_t grid_w, int width,
                                    int height) {
  if (alpha.size() != grid_h * grid_w || grid_h == 0 || grid_w == 0)
    throw glyph::GlyphError(glyph::GlyphErrc::bad_arguments, "attention map does not match the grid");
  double peak = 0.0;
  for (double a : alpha) peak = std::max(peak, a);
  glyph::GlyphImage out(width, height);
  if (!(peak > 0.0)) return out;
  for (int y = 0; y < height; ++y) {
    const std::size_t gy = static_cast<std::size_t>(y) * grid_h / static_cast<std::size_t>(height);
    for (int x = 0; x < width; ++x) {
      const std::size_t gx = static_cast<std::size_t>(x) * grid_w / static_cast<std::size_t>(width);
      out.at(x, y) = static_cast<float>(alpha[gy * grid_w + gx] / peak);
    }
  }
  return out;
}

std::string token_file_name(const std::string& token) {
  if (token == "{") return "lbrace";
  if (token == "}") return "rbrace";
  if (token == caption::kEndToken) return "end";
  if (token == caption::kStartToken) return "start";
  std::string out;
  for (char c : token) out += std::isalnum(static_cast<unsigned char>(c)) || c == '_' || c == '-' ? c : '_';
  return out;
}

int run_cli(int argc, char** argv) {
  CLI::App app{"ran: radical analysis network toolkit"};
  app.require_subcommand(1);
  app.option_defaults()->always_capture_default();
  const CliConfig defaults;

  // synth
  auto* synth = app.add_subcommand("synth", "Synthesize a zero-shot glyph dataset");
  Layered synth_layers;
  synth_layers.add_to(synth);
  int radicals = defaults.synth.radicals, compositions = defaults.synth.compositions;
  int image_size = defaults.synth.image_size, max_depth = defaults.synth.max_depth;
  std::string structures = join_structures(defaults.synth.structures), split = join_split(defaults.synth.split);
  std::uint64_t synth_seed = defaults.synth.seed;
  std::string synth_out;
  auto* o_radicals = synth->add_option("--radicals", radicals, "Radical inventory size");
  auto* o_structures = synth->add_option("--structures", structures, "Comma-separated structure operators");
  auto* o_compositions = synth->add_option("--compositions", compositions, "Number of distinct compositions");
  auto* o_split = synth->add_option("--split", split, "train,valid,test fractions");
  auto* o_sseed = synth->add_option("--seed", synth_seed, "Random seed");
  auto* o_simg = synth->add_option("--image-size", image_size, "Glyph side in pixels");
  auto* o_depth = synth->add_option("--max-depth", max_depth, "Maximum tree depth");
  synth->add_option("--out", synth_out, "Output directory")->required();

  // train
  auto* trn = app.add_subcommand("train", "Train a model on a synthesized dataset");
  Layered train_layers;
  train_layers.add_to(trn);
  std::string data_dir, train_out, train_log;
  int epochs = defaults.train.epochs, batch = defaults.train.batch_size, patience = defaults.train.patience;
  std::uint64_t train_seed = defaults.train.seed;
  bool quiet = false;
  trn->add_option("--data", data_dir, "Dataset directory (train.tsv, valid.tsv)")->required();
  trn->add_option("--out", train_out, "Checkpoint path")->required();
  trn->add_option("--log", train_log, "Training log TSV (default <out>.log.tsv)");
  auto* o_epochs = trn->add_option("--epochs", epochs, "Maximum epochs");
  auto* o_batch = trn->add_option("--batch-size", batch, "Samples per update");
  auto* o_patience = trn->add_option("--patience", patience, "Epochs without improvement before stopping");
  auto* o_tseed = trn->add_option("--seed", train_seed, "Random seed");
  trn->add_flag("--quiet", quiet, "No per-epoch progress on stderr");

  // eval
  auto* ev = app.add_subcommand("eval", "Exact-match evaluation of a checkpoint");
  std::string eval_data, eval_split = "test", eval_ckpt, eval_report;
  std::size_t eval_beam = model::kDefaultBeam;
  ev->add_option("--data", eval_data, "Dataset directory")->required();
  ev->add_option("--split", eval_split, "Manifest name (train, valid or test)");
  ev->add_option("--ckpt", eval_ckpt, "Checkpoint")->required()->check(CLI::ExistingFile);
  ev->add_option("--beam", eval_beam, "Beam width")->check(CLI::PositiveNumber);
  ev->add_option("--report", eval_report, "Per-sample TSV report");

  // decode
  auto* dec = app.add_subcommand("decode", "Decode one glyph image");
  dec->alias("attn-dump");
  std::string dec_image, dec_ckpt, dec_attn;
  std::size_t dec_beam = model::kDefaultBeam;
  dec->add_option("--image", dec_image, "PGM glyph")->required();
  dec->add_option("--ckpt", dec_ckpt, "Checkpoint")->required()->check(CLI::ExistingFile);
  dec->add_option("--beam", dec_beam, "Beam width")->check(CLI::PositiveNumber);
  dec->add_option("--attn-dir", dec_attn, "Write step_<t>_<token>.pgm attention heatmaps here");

  // gradcheck
  auto* gc = app.add_subcommand("gradcheck", "Finite-difference check of every backward rule");
  std::string preset = "micro", fault;
  std::uint64_t gc_seed = 1;
  double gc_eps = 1e-4;
  gc->add_option("--preset", preset, "Model preset")->check(CLI::IsMember({"micro"}));
  gc->add_option("--seed", gc_seed, "Parameter and input seed");
  gc->add_option("--eps", gc_eps, "Central-difference step");
  gc->add_option("--inject-fault", fault, "Scale one primitive's backward rule (negative control)")
      ->group("");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitUsage;
  }

  try {
    if (*synth) {
      CliConfig cfg = synth_layers.base();
      if (*o_radicals) cfg.synth.radicals = radicals;
      if (*o_structures) cfg.set("structures", structures);
      if (*o_compositions) cfg.synth.compositions = compositions;
      if (*o_split) cfg.set("split", split);
      if (*o_sseed) cfg.set("seed", std::to_string(synth_seed));
      if (*o_simg) cfg.set("image_size", std::to_string(image_size));
      if (*o_depth) cfg.synth.max_depth = max_depth;
      return run_synth(cfg, synth_out);
    }
    if (*trn) {
      CliConfig cfg = train_layers.base();
      if (*o_epochs) cfg.train.epochs = epochs;
      if (*o_batch) cfg.train.batch_size = batch;
      if (*o_patience) cfg.train.patience = patience;
      if (*o_tseed) cfg.set("seed", std::to_string(train_seed));
      return run_train(cfg, data_dir, train_out, train_log, quiet);
    }
    if (*ev) return run_eval(eval_data, eval_split, eval_ckpt, eval_beam, eval_report);
    if (*dec) return run_decode(dec_image, dec_ckpt, dec_beam, dec_attn);
    if (*gc) return run_gradcheck(gc_seed, gc_eps, fault);
  } catch (const train::TrainError& e) {
    std::cerr << "error: " << train::to_string(e.code()) << ": " << e.what() << '\n';
    return e.code() == train::TrainErrc::divergence ? kExitDivergence : kExitUsage;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitUsage;
  }
  return kExitUsage;
}

}  // namespace ran::cli
