#include "ran/train.hpp"

#include <charconv>
#include <chrono>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <sstream>

#include "ran/random.hpp"

namespace ran::train {

const char* to_string(TrainErrc code) {
  switch (code) {
    case TrainErrc::zero_shot_violation: return "ZeroShotViolation";
    case TrainErrc::divergence: return "DivergenceError";
    case TrainErrc::empty_manifest: return "EmptyManifest";
    case TrainErrc::incompatible_checkpoint: return "IncompatibleCheckpoint";
    case TrainErrc::corrupt_checkpoint: return "CorruptCheckpoint";
    case TrainErrc::shape_mismatch: return "ShapeError";
    case TrainErrc::bad_config: return "BadConfig";
  }
  return "?";
}

// ---------------------------------------------------------------------------
// Config

model::ModelConfig TrainConfig::model_config(std::size_t vocab_size) const {
  model::ModelConfig m;
  try {
    m.encoder = model::EncoderConfig::parse(encoder);
  } catch (const std::invalid_argument& e) {
    throw TrainError(TrainErrc::bad_config, e.what());
  }
  m.embed_dim = embed_dim;
  m.hidden_dim = hidden_dim;
  m.coverage_maps = coverage_maps;
  m.coverage_kernel = coverage_kernel;
  m.vocab_size = vocab_size;
  return m;
}

namespace {

std::string fmt_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

template <typename Int>
Int parse_int(const std::string& key, const std::string& value) {
  Int v{};
  const auto [end, ec] = std::from_chars(value.data(), value.data() + value.size(), v);
  if (ec != std::errc() || end != value.data() + value.size() || value.empty() || value[0] == '-' || v < 0)
    throw TrainError(TrainErrc::bad_config, "'" + key + "' expects a non-negative integer, got '" + value + "'");
  return v;
}

double parse_double(const std::string& key, const std::string& value) {
  try {
    std::size_t used = 0;
    const double v = std::stod(value, &used);
    if (used != value.size()) throw std::invalid_argument(value);
    return v;
  } catch (const std::exception&) {
    throw TrainError(TrainErrc::bad_config, "'" + key + "' expects a number, got '" + value + "'");
  }
}

bool parse_bool(const std::string& key, const std::string& value) {
  if (value == "true" || value == "1") return true;
  if (value == "false" || value == "0") return false;
  throw TrainError(TrainErrc::bad_config, "'" + key + "' expects true or false, got '" + value + "'");
}

}  // namespace

std::string TrainConfig::serialize() const {
  std::ostringstream os;
  os << "batch_size=" << batch_size << '\n'
     << "beam=" << beam << '\n'
     << "clip_norm=" << fmt_double(clip_norm) << '\n'
     << "coverage_kernel=" << coverage_kernel << '\n'
     << "coverage_maps=" << coverage_maps << '\n'
     << "embed_dim=" << embed_dim << '\n'
     << "encoder=" << encoder << '\n'
     << "epochs=" << epochs << '\n'
     << "epsilon=" << fmt_double(epsilon) << '\n'
     << "hidden_dim=" << hidden_dim << '\n'
     << "image_size=" << image_size << '\n'
     << "max_len=" << max_len << '\n'
     << "patience=" << patience << '\n'
     << "precision=" << precision << '\n'
     << "rho=" << fmt_double(rho) << '\n'
     << "seed=" << seed << '\n'
     << "stop_when_perfect=" << (stop_when_perfect ? "true" : "false") << '\n';
  return os.str();
}

bool apply_setting(TrainConfig& cfg, const std::string& key, const std::string& value) {
  if (key == "encoder") cfg.encoder = value;
  else if (key == "image_size") cfg.image_size = parse_int<int>(key, value);
  else if (key == "embed_dim") cfg.embed_dim = parse_int<std::size_t>(key, value);
  else if (key == "hidden_dim") cfg.hidden_dim = parse_int<std::size_t>(key, value);
  else if (key == "coverage_maps") cfg.coverage_maps = parse_int<std::size_t>(key, value);
  else if (key == "coverage_kernel") cfg.coverage_kernel = parse_int<std::size_t>(key, value);
  else if (key == "batch_size") cfg.batch_size = parse_int<int>(key, value);
  else if (key == "epochs") cfg.epochs = parse_int<int>(key, value);
  else if (key == "patience") cfg.patience = parse_int<int>(key, value);
  else if (key == "seed") cfg.seed = parse_int<std::uint64_t>(key, value);
  else if (key == "precision") cfg.precision = parse_int<int>(key, value);
  else if (key == "rho") cfg.rho = parse_double(key, value);
  else if (key == "epsilon") cfg.epsilon = parse_double(key, value);
  else if (key == "clip_norm") cfg.clip_norm = parse_double(key, value);
  else if (key == "beam") cfg.beam = parse_int<std::size_t>(key, value);
  else if (key == "max_len") cfg.max_len = parse_int<std::size_t>(key, value);
  else if (key == "stop_when_perfect") cfg.stop_when_perfect = parse_bool(key, value);
  else return false;
  return true;
}

void TrainConfig::validate() const {
  const auto bad = [](const std::string& what) { throw TrainError(TrainErrc::bad_config, what); };
  if (precision != 32 && precision != 64) bad("precision must be 32 or 64");
  if (batch_size < 1) bad("batch_size must be >= 1");
  if (image_size < 1) bad("image_size must be >= 1");
  if (beam < 1) bad("beam must be >= 1");
  if (max_len < 1) bad("max_len must be >= 1");
  if (!(rho > 0.0 && rho < 1.0)) bad("rho must lie in (0,1)");
  if (!(epsilon > 0.0)) bad("epsilon must be positive");
  if (!(clip_norm > 0.0)) bad("clip_norm must be positive");
  try {
    model_config(16).validate();
  } catch (const std::invalid_argument& e) {
    bad(e.what());
  }
}

// ---------------------------------------------------------------------------
// Adadelta

template <typename T>
AdadeltaState<T> AdadeltaState<T>::fresh(const ParamSet<T>& params, double rho, double epsilon, double clip_norm) {
  return {rho, epsilon, clip_norm, ad::zero_gradients(params), ad::zero_gradients(params)};
}

template <typename T>
double global_norm(const Gradients<T>& grads) {
  double sq = 0.0;
  for (const auto& g : grads)
    for (T v : g.values()) sq += static_cast<double>(v) * static_cast<double>(v);
  return std::sqrt(sq);
}

template <typename T>
double adadelta_update(ParamSet<T>& params, Gradients<T> grads, AdadeltaState<T>& state) {
  if (grads.size() != params.size() || state.sq_grad.size() != params.size() || state.sq_update.size() != params.size())
    throw TrainError(TrainErrc::shape_mismatch, "adadelta: gradient/state count differs from parameter count");
  for (std::size_t p = 0; p < params.size(); ++p)
    if (grads[p].shape() != params[p].shape() || state.sq_grad[p].shape() != params[p].shape() ||
        state.sq_update[p].shape() != params[p].shape())
      throw TrainError(TrainErrc::shape_mismatch, "adadelta: shape mismatch for " + params.name(p));

  const double norm = global_norm(grads);
  const double scale = norm > state.clip_norm ? state.clip_norm / norm : 1.0;
  const double rho = state.rho, eps = state.epsilon;
  for (std::size_t p = 0; p < params.size(); ++p) {
    auto theta = params[p].values();
    auto g2 = state.sq_grad[p].values();
    auto dx2 = state.sq_update[p].values();
    const auto g = grads[p].values();
    for (std::size_t i = 0; i < theta.size(); ++i) {
      const double gi = static_cast<double>(g[i]) * scale;
      const double acc_g = rho * g2[i] + (1.0 - rho) * gi * gi;
      const double dx = -std::sqrt(static_cast<double>(dx2[i]) + eps) / std::sqrt(acc_g + eps) * gi;
      g2[i] = static_cast<T>(acc_g);
      dx2[i] = static_cast<T>(rho * dx2[i] + (1.0 - rho) * dx * dx);
      theta[i] = static_cast<T>(theta[i] + dx);
    }
  }
  return norm;
}

// ---------------------------------------------------------------------------
// Data

caption::Vocabulary training_vocab(const glyph::DatasetManifest& train) {
  const auto captions = train.captions();
  return caption::build_vocab(captions);
}

std::vector<Sample> load_samples(const glyph::DatasetManifest& manifest, const caption::Vocabulary& vocab,
                                 bool tolerate_bad_images) {
  std::vector<Sample> out;
  out.reserve(manifest.items.size());
  for (const auto& item : manifest.items) {
    Sample s;
    s.id = item.sample_id;
    s.caption = caption::canonicalize(item.caption);
    try {
      s.image = glyph::read_pgm(manifest.image_file(item));
    } catch (const glyph::GlyphError& e) {
      if (!tolerate_bad_images) throw;
      s.load_error = e.what();
    }
    try {
      s.target = caption::encode_caption(s.caption, vocab);
    } catch (const caption::CaptionError&) {
      if (!tolerate_bad_images) throw;
    }
    out.push_back(std::move(s));
  }
  return out;
}

template <typename T>
double mean_token_loss(const model::RanModel<T>& model, const std::vector<Sample>& samples) {
  double total = 0.0;
  std::size_t tokens = 0;
  for (const auto& s : samples) {
    if (!s.load_error.empty() || s.target.size() < 2) continue;
    ad::Graph<T> g(false);
    const auto p = model.bind(g);
    total += static_cast<double>(g.value(model.teacher_forced_loss(g, p, s.image, s.target))[0]);
    tokens += s.target.size() - 1;
  }
  return tokens ? total / static_cast<double>(tokens) : 0.0;
}

template <typename T>
EvalReport evaluate_samples(const model::RanModel<T>& model, const caption::Vocabulary& vocab,
                            const std::vector<Sample>& samples, const model::BeamOptions& beam) {
  EvalReport report;
  for (const auto& s : samples) {
    EvalRecord rec;
    rec.sample_id = s.id;
    rec.reference = s.caption;
    if (!s.load_error.empty()) {
      rec.error = s.load_error;
    } else {
      const auto decoded = model::decode_caption(model, s.image, vocab, beam);
      rec.prediction = decoded.caption;
      rec.log_prob = decoded.log_prob;
      rec.correct = decoded.finished && decoded.caption == s.caption;
    }
    report.exact_match += rec.correct ? 1 : 0;
    report.records.push_back(std::move(rec));
  }
  report.total = report.records.size();
  report.accuracy = report.total ? static_cast<double>(report.exact_match) / static_cast<double>(report.total) : 0.0;
  return report;
}

EvalReport evaluate(const glyph::DatasetManifest& manifest, const Checkpoint& ckpt, std::size_t beam) {
  if (manifest.items.empty()) throw TrainError(TrainErrc::empty_manifest, "manifest has no samples");
  const model::RanModel<float> m(ckpt.model_config(), ckpt.params);
  const auto samples = load_samples(manifest, ckpt.vocab, true);
  return evaluate_samples(m, ckpt.vocab, samples, {beam, ckpt.config.max_len});
}

void write_report(const EvalReport& report, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write report " + path.string());
  out << "sample_id\tprediction\treference\tcorrect\tlog_prob\terror\n";
  for (const auto& r : report.records)
    out << r.sample_id << '\t' << r.prediction << '\t' << r.reference << '\t' << (r.correct ? 1 : 0) << '\t'
        << fmt_double(r.log_prob) << '\t' << r.error << '\n';
}

// ---------------------------------------------------------------------------
// Training

namespace {

template <typename T>
Checkpoint snapshot(const TrainConfig& cfg, const caption::Vocabulary& vocab, const model::RanModel<T>& m,
                    const AdadeltaState<T>& opt, int epoch, double accuracy) {
  Checkpoint c;
  c.config = cfg;
  c.vocab = vocab;
  c.params = m.params().template cast<float>();
  for (const auto& t : opt.sq_grad) c.sq_grad.push_back(t.template cast<float>());
  for (const auto& t : opt.sq_update) c.sq_update.push_back(t.template cast<float>());
  c.epoch = epoch;
  c.valid_accuracy = accuracy;
  return c;
}

template <typename T>
TrainResult train_impl(const std::vector<Sample>& train_set, const std::vector<Sample>& valid_set,
                       const caption::Vocabulary& vocab, const TrainConfig& cfg, const TrainOptions& opts) {
  model::RanModel<T> m(cfg.model_config(vocab.size()), cfg.seed);
  auto opt = AdadeltaState<T>::fresh(m.params(), cfg.rho, cfg.epsilon, cfg.clip_norm);
  const model::BeamOptions beam{cfg.beam, cfg.max_len};

  std::ofstream log_file;
  if (opts.log_path) {
    log_file.open(*opts.log_path, std::ios::binary);
    if (!log_file) throw std::runtime_error("cannot write training log " + opts.log_path->string());
    log_file << "epoch\tmean_loss\tvalid_accuracy\n";
  }

  TrainResult result;
  double best_acc = -1.0, best_vloss = 0.0;
  int since_best = 0;

  const auto record = [&](int epoch, double mean_loss) {
    EpochLog row{epoch, mean_loss, 0.0, 0.0};
    row.valid_accuracy = evaluate_samples(m, vocab, valid_set, beam).accuracy;
    row.valid_loss = mean_token_loss(m, valid_set);
    result.log.push_back(row);
    if (log_file) log_file << epoch << '\t' << fmt_double(mean_loss) << '\t' << fmt_double(row.valid_accuracy) << '\n' << std::flush;
    if (opts.progress)
      *opts.progress << "epoch " << epoch << " loss " << mean_loss << " valid_acc " << row.valid_accuracy
                     << " valid_loss " << row.valid_loss << std::endl;

    const bool improved = row.valid_accuracy > best_acc || (row.valid_accuracy == best_acc && row.valid_loss < best_vloss);
    if (improved) {
      best_acc = row.valid_accuracy;
      best_vloss = row.valid_loss;
      since_best = 0;
      result.best = snapshot(cfg, vocab, m, opt, epoch, row.valid_accuracy);
      if (opts.checkpoint_path) save_checkpoint(result.best, *opts.checkpoint_path);
    } else {
      ++since_best;
    }
    return row;
  };

  record(0, mean_token_loss(m, train_set));

  std::vector<std::size_t> order(train_set.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    if (cfg.stop_when_perfect && best_acc >= 1.0) break;
    if (since_best >= cfg.patience && epoch > 1) break;

    Rng rng(mix_seed(cfg.seed, "epoch/" + std::to_string(epoch)));
    rng.shuffle(order);
    double loss_sum = 0.0;
    std::size_t tokens = 0;
    for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(cfg.batch_size)) {
      const std::size_t end = std::min(order.size(), start + static_cast<std::size_t>(cfg.batch_size));
      auto grads = ad::zero_gradients(m.params());
      for (std::size_t k = start; k < end; ++k) {
        const Sample& s = train_set[order[k]];
        ad::Graph<T> g;
        const auto p = m.bind(g);
        const ad::Var loss = m.teacher_forced_loss(g, p, s.image, s.target);
        const double value = static_cast<double>(g.value(loss)[0]);
        if (!std::isfinite(value))
          throw TrainError(TrainErrc::divergence, "non-finite loss at epoch " + std::to_string(epoch) + " on " + s.id);
        loss_sum += value;
        tokens += s.target.size() - 1;
        ad::accumulate(grads, g.backward(loss, m.params()));
      }
      const T inv = static_cast<T>(1.0 / static_cast<double>(end - start));
      for (auto& t : grads)
        for (auto& v : t.values()) v *= inv;
      const double norm = adadelta_update(m.params(), std::move(grads), opt);
      if (!std::isfinite(norm))
        throw TrainError(TrainErrc::divergence, "non-finite gradient norm at epoch " + std::to_string(epoch));
    }
    result.epochs_run = epoch;
    record(epoch, loss_sum / static_cast<double>(std::max<std::size_t>(tokens, 1)));
  }
  return result;
}

}  // namespace

TrainResult train(const glyph::DatasetManifest& train_manifest, const glyph::DatasetManifest& valid_manifest,
                  const TrainConfig& cfg, const TrainOptions& opts) {
  cfg.validate();
  if (train_manifest.items.empty()) throw TrainError(TrainErrc::empty_manifest, "training manifest is empty");
  const auto train_captions = train_manifest.captions();
  const auto valid_captions = valid_manifest.captions();
  const auto zs = caption::zero_shot_check(train_captions, valid_captions);
  if (!zs.ok) {
    std::string missing;
    for (const auto& t : zs.missing_tokens) missing += (missing.empty() ? "" : " ") + t;
    throw TrainError(TrainErrc::zero_shot_violation, "validation uses tokens unseen in training: " + missing);
  }

  const auto vocab = training_vocab(train_manifest);
  const auto train_set = load_samples(train_manifest, vocab);
  const auto valid_set = load_samples(valid_manifest, vocab);
  for (const auto* set : {&train_set, &valid_set})
    for (const auto& s : *set)
      if (s.image.width() != cfg.image_size || s.image.height() != cfg.image_size)
        throw TrainError(TrainErrc::bad_config, "image " + s.id + " is " + std::to_string(s.image.width()) + "x" +
                                                    std::to_string(s.image.height()) + ", config image_size is " +
                                                    std::to_string(cfg.image_size));

  if (cfg.precision == 64) return train_impl<double>(train_set, valid_set, vocab, cfg, opts);
  return train_impl<float>(train_set, valid_set, vocab, cfg, opts);
}

#define RAN_TRAIN_INSTANTIATE(T)                                                                                    \
  template struct AdadeltaState<T>;                                                                                 \
  template double global_norm<T>(const Gradients<T>&);                                                              \
  template double adadelta_update<T>(ParamSet<T>&, Gradients<T>, AdadeltaState<T>&);                                \
  template double mean_token_loss<T>(const model::RanModel<T>&, const std::vector<Sample>&);                        \
  template EvalReport evaluate_samples<T>(const model::RanModel<T>&, const caption::Vocabulary&,                    \
                                          const std::vector<Sample>&, const model::BeamOptions&);

RAN_TRAIN_INSTANTIATE(float)
RAN_TRAIN_INSTANTIATE(double)

}  // namespace ran::train
