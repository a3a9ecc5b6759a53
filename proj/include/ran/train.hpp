#pragma once

// Training (teacher-forced cross entropy, adadelta with global-norm
// clipping), checkpoints and exact-match evaluation.

#include <cmath>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "ran/beam_search.hpp"
#include "ran/caption.hpp"
#include "ran/glyph.hpp"
#include "ran/model.hpp"

namespace ran::train {

using ad::Gradients;
using ad::ParamSet;
using ad::Tensor;

enum class TrainErrc {
  zero_shot_violation,
  divergence,
  empty_manifest,
  incompatible_checkpoint,
  corrupt_checkpoint,
  shape_mismatch,
  bad_config,
};

const char* to_string(TrainErrc code);

class TrainError : public std::runtime_error {
 public:
  TrainError(TrainErrc code, const std::string& what) : std::runtime_error(what), code_(code) {}
  TrainErrc code() const noexcept { return code_; }

 private:
  TrainErrc code_;
};

struct TrainConfig {
  std::string encoder = "vgg14s";
  int image_size = 64;
  std::size_t embed_dim = 256;
  std::size_t hidden_dim = 256;
  std::size_t coverage_maps = 256;
  std::size_t coverage_kernel = 5;
  int batch_size = 16;
  int epochs = 200;
  int patience = 30;
  std::uint64_t seed = 1;
  int precision = 32;  // 32 or 64
  double rho = 0.95;
  double epsilon = 1e-8;
  double clip_norm = 100.0;
  std::size_t beam = model::kDefaultBeam;
  std::size_t max_len = model::kDefaultMaxLen;
  /// Stop as soon as validation exact-match reaches 1.
  bool stop_when_perfect = true;

  model::ModelConfig model_config(std::size_t vocab_size) const;
  /// Sorted key=value lines.
  std::string serialize() const;
  void validate() const;
  bool operator==(const TrainConfig&) const = default;
};

/// Sets one TrainConfig field from its serialized form. Returns false for an
/// unknown key; throws TrainError(bad_config) for an unparsable value.
bool apply_setting(TrainConfig& cfg, const std::string& key, const std::string& value);

/// 16 hex digits of FNV-1a over `text`.
std::string fingerprint(const std::string& text);

// ---------------------------------------------------------------------------
// Adadelta

template <typename T>
struct AdadeltaState {
  double rho = 0.95;
  double epsilon = 1e-8;
  double clip_norm = 100.0;
  Gradients<T> sq_grad;    // E[g^2]
  Gradients<T> sq_update;  // E[dx^2]

  static AdadeltaState fresh(const ParamSet<T>& params, double rho, double epsilon, double clip_norm);
};

template <typename T>
double global_norm(const Gradients<T>& grads);

/// Clips `grads` to clip_norm (global L2 norm), then applies one adadelta
/// step to `params`. Returns the norm before clipping.
template <typename T>
double adadelta_update(ParamSet<T>& params, Gradients<T> grads, AdadeltaState<T>& state);

// ---------------------------------------------------------------------------
// Checkpoints

inline constexpr char kCheckpointMagic[9] = "RANCKPT1";
inline constexpr int kCheckpointVersion = 1;

struct Checkpoint {
  TrainConfig config;
  caption::Vocabulary vocab;
  ParamSet<float> params;
  /// E[g^2] and E[dx^2]; empty when not stored.
  Gradients<float> sq_grad, sq_update;
  int epoch = 0;
  double valid_accuracy = 0.0;

  model::ModelConfig model_config() const { return config.model_config(vocab.size()); }
};

/// The header text (config, dims, vocabulary, fingerprint).
std::string checkpoint_header(const Checkpoint& ckpt);
std::vector<char> encode_checkpoint(const Checkpoint& ckpt);
Checkpoint decode_checkpoint(const std::vector<char>& bytes);
void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);

// ---------------------------------------------------------------------------
// Data, training, evaluation

struct Sample {
  std::string id;
  std::string caption;  // canonical
  glyph::GlyphImage image;
  std::vector<std::size_t> target;  // Start ... End
  std::string load_error;           // non-empty when the image could not be read
};

/// Loads images and encodes captions. Unreadable images are recorded in
/// Sample::load_error when `tolerate_bad_images`, else rethrown.
std::vector<Sample> load_samples(const glyph::DatasetManifest& manifest, const caption::Vocabulary& vocab,
                                 bool tolerate_bad_images = false);

struct EpochLog {
  int epoch = 0;
  double mean_loss = 0.0;  // per token
  double valid_accuracy = 0.0;
  double valid_loss = 0.0;  // per token
};

struct TrainOptions {
  std::optional<std::filesystem::path> checkpoint_path;  // best checkpoint is written here
  std::optional<std::filesystem::path> log_path;         // TSV epoch<TAB>mean_loss<TAB>valid_accuracy
  std::ostream* progress = nullptr;
};

struct TrainResult {
  Checkpoint best;
  std::vector<EpochLog> log;
  int epochs_run = 0;
};

/// Vocabulary from the training captions.
caption::Vocabulary training_vocab(const glyph::DatasetManifest& train);

TrainResult train(const glyph::DatasetManifest& train_manifest, const glyph::DatasetManifest& valid_manifest,
                  const TrainConfig& cfg, const TrainOptions& opts = {});

struct EvalRecord {
  std::string sample_id;
  std::string prediction;
  std::string reference;
  bool correct = false;
  double log_prob = 0.0;
  std::string error;
};

struct EvalReport {
  std::size_t total = 0;
  std::size_t exact_match = 0;
  double accuracy = 0.0;
  std::vector<EvalRecord> records;
};

template <typename T>
EvalReport evaluate_samples(const model::RanModel<T>& model, const caption::Vocabulary& vocab,
                            const std::vector<Sample>& samples, const model::BeamOptions& beam);

EvalReport evaluate(const glyph::DatasetManifest& manifest, const Checkpoint& ckpt, std::size_t beam);

void write_report(const EvalReport& report, const std::filesystem::path& path);

/// Mean per-token teacher-forced loss of `samples` under `model`.
template <typename T>
double mean_token_loss(const model::RanModel<T>& model, const std::vector<Sample>& samples);

}  // namespace ran::train
