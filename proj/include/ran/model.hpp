#pragma once

// Radical analysis network: a VGG-style fully convolutional encoder that
// turns a glyph into an H x W grid of D-dimensional annotation vectors, and
// a decoder of two GRU layers with coverage-based spatial attention that
// emits one caption token per step.
//
// Per step t, with previous token y and state s:
//   s_hat = GRU1(E[y], s)
//   F     = Q * (sum of past alphas)           (5x5 conv, M planes)
//   e_i   = v^T tanh(W_att s_hat + U_att a_i + U_f f_i)
//   alpha = softmax(e),  c = sum_i alpha_i a_i
//   s'    = GRU2(c, s_hat)
//   p     = softmax(W_o maxout2(E[y] + W_s s' + W_c c + b))
//
// GRU(x, h): z = sig(Wz x + Uz h + bz), r = sig(Wr x + Ur h + br),
//            h~ = tanh(Wh x + Uh (r * h) + bh), h' = (1 - z) * h + z * h~.

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "ran/glyph.hpp"
#include "ran/graph.hpp"

namespace ran::model {

using ad::Graph;
using ad::ParamSet;
using ad::Tensor;
using ad::Var;

struct EncoderBlock {
  int layers = 0;
  int channels = 0;
  bool operator==(const EncoderBlock&) const = default;
};

struct EncoderConfig {
  std::vector<EncoderBlock> blocks;
  int kernel = 3;
  int input_channels = 1;

  int output_channels() const { return blocks.empty() ? input_channels : blocks.back().channels; }
  /// Grid side for an input side (ceil-mode halving per block).
  int grid_side(int input_side) const;

  static EncoderConfig vgg14s();  // (3,3,4,4) layers, (32,64,128,256) channels
  static EncoderConfig vgg14();   // (3,3,4,4) layers, (64,128,256,512) channels
  /// "vgg14s", "vgg14" or an explicit list such as "2x8,3x16" (layers x channels).
  static EncoderConfig parse(const std::string& text);
  std::string to_string() const;

  bool operator==(const EncoderConfig&) const = default;
};

struct ModelConfig {
  EncoderConfig encoder = EncoderConfig::vgg14s();
  std::size_t embed_dim = 256;       // m (even)
  std::size_t hidden_dim = 256;      // n
  std::size_t coverage_maps = 256;   // M
  std::size_t coverage_kernel = 5;
  std::size_t vocab_size = 0;        // K

  /// D; the attention dimension equals it.
  std::size_t annotation_dim() const { return static_cast<std::size_t>(encoder.output_channels()); }
  std::size_t attention_dim() const { return annotation_dim(); }

  void validate() const;
  bool operator==(const ModelConfig&) const = default;
};

/// Uniform(-r, r) weights with r = sqrt(6 / (fan_in + fan_out)); zero biases.
template <typename T>
ParamSet<T> init_params(const ModelConfig& cfg, std::uint64_t seed);

/// Parameter names, in ParamSet order, together with their shapes.
std::vector<std::pair<std::string, ad::Shape>> param_layout(const ModelConfig& cfg);

/// Parameter handles bound into one graph.
struct GruVars {
  Var wz, uz, bz, wr, ur, br, wh, uh, bh;
};

struct ParamVars {
  std::vector<Var> conv_w, conv_b;
  Var embed;
  GruVars gru1, gru2;
  Var att_v, att_w, att_u, att_uf;
  Var cov_q, cov_b;
  Var out_wo, out_ws, out_wc, out_b;
};

/// Annotation grid A inside a graph.
struct Annotations {
  Var grid;        // [L x D]
  Var grid_t;      // [D x L]
  Var projected;   // [L x n'] = U_att a_i per row
  std::size_t height = 0, width = 0;
  std::size_t cells() const { return height * width; }
};

struct StepVars {
  Var s;          // hidden state [n]
  Var coverage;   // running sum of past alphas [L]
};

struct StepOutput {
  Var s_hat, alpha, context, logits, probs;
  StepVars next;
};

template <typename T>
class RanModel {
 public:
  RanModel(ModelConfig cfg, ParamSet<T> params);
  RanModel(const ModelConfig& cfg, std::uint64_t seed) : RanModel(cfg, init_params<T>(cfg, seed)) {}

  const ModelConfig& config() const noexcept { return cfg_; }
  const ParamSet<T>& params() const noexcept { return params_; }
  ParamSet<T>& params() noexcept { return params_; }

  ParamVars bind(Graph<T>& g) const;
  /// Binds another parameter set of the same layout (it must outlive `g`).
  ParamVars bind(Graph<T>& g, const ParamSet<T>& params) const;

  /// Stacked conv + tanh layers, 2x2 max-pool after each block.
  Annotations encode(Graph<T>& g, const ParamVars& p, const glyph::GlyphImage& img) const;

  /// F = Q * coverage + bias as [M x H x W].
  Var coverage_features(Graph<T>& g, const ParamVars& p, Var coverage, std::size_t height, std::size_t width) const;

  /// Returns (alpha [L], context [D]).
  std::pair<Var, Var> attend(Graph<T>& g, const ParamVars& p, const Annotations& a, Var s_hat, Var coverage) const;

  StepOutput step(Graph<T>& g, const ParamVars& p, const Annotations& a, std::size_t y_prev, const StepVars& state) const;

  /// s = 0 and zero coverage.
  StepVars initial_state(Graph<T>& g, const Annotations& a) const;

  /// Sum of per-step cross entropies for target = [Start, y_1..y_C, End]
  /// under teacher forcing. Alpha maps are appended to `alphas` when given.
  Var teacher_forced_loss(Graph<T>& g, const ParamVars& p, const glyph::GlyphImage& img,
                          std::span<const std::size_t> target, std::vector<Var>* alphas = nullptr) const;

 private:
  Var gru(Graph<T>& g, const GruVars& w, Var x, Var h) const;

  ModelConfig cfg_;
  ParamSet<T> params_;
};

// Inference-side values (no gradient bookkeeping).

template <typename T>
struct EncodedImage {
  Tensor<T> grid;       // [L x D]
  Tensor<T> grid_t;     // [D x L]
  Tensor<T> projected;  // [L x n']
  std::size_t height = 0, width = 0;
  std::size_t cells() const { return height * width; }
};

template <typename T>
struct DecoderState {
  Tensor<T> s;                          // [n]
  Tensor<T> coverage;                   // [L], sum of alpha_history
  std::vector<Tensor<T>> alpha_history;
  std::size_t y_prev = 0;
};

template <typename T>
struct StepResult {
  Tensor<T> probs;  // [K]
  DecoderState<T> state;
};

template <typename T>
EncodedImage<T> encode_image(const RanModel<T>& model, const glyph::GlyphImage& img);

template <typename T>
DecoderState<T> initial_decoder_state(const RanModel<T>& model, const EncodedImage<T>& enc, std::size_t start_index);

/// One decoding step from `state`, feeding `y_prev` (which overrides state.y_prev).
template <typename T>
StepResult<T> decode_step(const RanModel<T>& model, const EncodedImage<T>& enc, const DecoderState<T>& state,
                          std::size_t y_prev);

/// Q * (sum of the alpha maps) + bias, as [M x H x W].
template <typename T>
Tensor<T> coverage_map(std::span<const Tensor<T>> alpha_history, const Tensor<T>& q, const Tensor<T>& bias,
                       std::size_t height, std::size_t width);

}  // namespace ran::model
