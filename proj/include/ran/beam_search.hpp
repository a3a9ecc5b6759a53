#pragma once

#include <string>
#include <vector>

#include "ran/caption.hpp"
#include "ran/model.hpp"

namespace ran::model {

inline constexpr std::size_t kDefaultBeam = 10;
inline constexpr std::size_t kDefaultMaxLen = 40;

struct BeamOptions {
  std::size_t beam = kDefaultBeam;
  /// Maximum number of emitted tokens, End included.
  std::size_t max_len = kDefaultMaxLen;
};

template <typename T>
struct BeamHypothesis {
  std::vector<std::size_t> tokens;  // emitted tokens, Start excluded
  double log_prob = 0.0;
  DecoderState<T> state;
  bool finished = false;
};

template <typename T>
struct BeamResult {
  std::vector<std::size_t> tokens;  // End included when finished
  double log_prob = 0.0;
  bool finished = false;
  std::vector<Tensor<T>> alphas;    // one map per emitted token
};

/// Length-capped beam search from Start. Hypotheses that emit End are
/// frozen; the best finished one wins (ties: earlier finish, then
/// lexicographic token order). Falls back to the best live hypothesis when
/// nothing finished within max_len.
template <typename T>
BeamResult<T> beam_search(const RanModel<T>& model, const EncodedImage<T>& enc, std::size_t start_index,
                          std::size_t end_index, const BeamOptions& opts = {});

template <typename T>
struct Decoded {
  std::string caption;
  std::vector<std::string> tokens;  // End included when finished
  double log_prob = 0.0;
  bool finished = false;
  std::vector<Tensor<T>> alphas;
};

template <typename T>
Decoded<T> decode_caption(const RanModel<T>& model, const glyph::GlyphImage& img, const caption::Vocabulary& vocab,
                          const BeamOptions& opts = {});

}  // namespace ran::model
