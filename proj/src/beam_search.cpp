#include "ran/beam_search.hpp"

#include <algorithm>
#include <cmath>

namespace ran::model {

namespace {

double log_of(double p) { return std::log(std::max(p, 1e-300)); }

template <typename T>
bool better_live(const BeamHypothesis<T>& a, const BeamHypothesis<T>& b) {
  if (a.log_prob != b.log_prob) return a.log_prob > b.log_prob;
  return a.tokens < b.tokens;
}

template <typename T>
bool better_finished(const BeamHypothesis<T>& a, const BeamHypothesis<T>& b) {
  if (a.log_prob != b.log_prob) return a.log_prob > b.log_prob;
  if (a.tokens.size() != b.tokens.size()) return a.tokens.size() < b.tokens.size();
  return a.tokens < b.tokens;
}

}  // namespace

template <typename T>
BeamResult<T> beam_search(const RanModel<T>& model, const EncodedImage<T>& enc, std::size_t start_index,
                          std::size_t end_index, const BeamOptions& opts) {
  const std::size_t beam = std::max<std::size_t>(opts.beam, 1);
  std::vector<BeamHypothesis<T>> live(1);
  live[0].state = initial_decoder_state(model, enc, start_index);
  std::vector<BeamHypothesis<T>> finished;

  struct Candidate {
    std::size_t parent, token;
    double log_prob;
  };

  for (std::size_t len = 0; len < opts.max_len && !live.empty(); ++len) {
    std::vector<StepResult<T>> steps;
    steps.reserve(live.size());
    std::vector<Candidate> cands;
    for (std::size_t h = 0; h < live.size(); ++h) {
      steps.push_back(decode_step(model, enc, live[h].state, live[h].state.y_prev));
      const auto& probs = steps.back().probs;
      for (std::size_t k = 0; k < probs.size(); ++k)
        cands.push_back({h, k, live[h].log_prob + log_of(static_cast<double>(probs[k]))});
    }
    const auto order = [&](const Candidate& a, const Candidate& b) {
      if (a.log_prob != b.log_prob) return a.log_prob > b.log_prob;
      const auto& ta = live[a.parent].tokens;
      const auto& tb = live[b.parent].tokens;
      if (ta != tb) return ta < tb;
      return a.token < b.token;
    };
    const std::size_t keep = std::min(beam, cands.size());
    std::partial_sort(cands.begin(), cands.begin() + static_cast<std::ptrdiff_t>(keep), cands.end(), order);
    cands.resize(keep);

    std::vector<BeamHypothesis<T>> next;
    for (const auto& c : cands) {
      BeamHypothesis<T> hyp;
      hyp.tokens = live[c.parent].tokens;
      hyp.tokens.push_back(c.token);
      hyp.log_prob = c.log_prob;
      hyp.state = steps[c.parent].state;
      hyp.state.y_prev = c.token;
      hyp.finished = c.token == end_index;
      (hyp.finished ? finished : next).push_back(std::move(hyp));
    }
    live = std::move(next);
    std::sort(live.begin(), live.end(), better_live<T>);

    // Scores only decrease, so a live hypothesis can no longer overtake.
    if (!finished.empty() && !live.empty()) {
      const auto best = std::min_element(finished.begin(), finished.end(), better_finished<T>);
      if (best->log_prob >= live.front().log_prob) break;
    }
  }

  const BeamHypothesis<T>* winner = nullptr;
  if (!finished.empty())
    winner = &*std::min_element(finished.begin(), finished.end(), better_finished<T>);
  else if (!live.empty())
    winner = &live.front();

  BeamResult<T> result;
  if (winner) {
    result.tokens = winner->tokens;
    result.log_prob = winner->log_prob;
    result.finished = winner->finished;
    result.alphas = winner->state.alpha_history;
  }
  return result;
}

template <typename T>
Decoded<T> decode_caption(const RanModel<T>& model, const glyph::GlyphImage& img, const caption::Vocabulary& vocab,
                          const BeamOptions& opts) {
  const auto enc = encode_image(model, img);
  auto r = beam_search(model, enc, vocab.start_index(), vocab.end_index(), opts);
  Decoded<T> out;
  out.caption = caption::decode_indices(r.tokens, vocab);
  for (auto t : r.tokens) out.tokens.push_back(vocab.token(t));
  out.log_prob = r.log_prob;
  out.finished = r.finished;
  out.alphas = std::move(r.alphas);
  return out;
}

template BeamResult<float> beam_search<float>(const RanModel<float>&, const EncodedImage<float>&, std::size_t,
                                              std::size_t, const BeamOptions&);
template BeamResult<double> beam_search<double>(const RanModel<double>&, const EncodedImage<double>&, std::size_t,
                                                std::size_t, const BeamOptions&);
template Decoded<float> decode_caption<float>(const RanModel<float>&, const glyph::GlyphImage&,
                                              const caption::Vocabulary&, const BeamOptions&);
template Decoded<double> decode_caption<double>(const RanModel<double>&, const glyph::GlyphImage&,
                                                const caption::Vocabulary&, const BeamOptions&);

}  // namespace ran::model
