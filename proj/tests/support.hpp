#pragma once

// Generators and oracles shared by the unit tests and the acceptance binary.
// Nothing here calls into the code under test except to build values.

#include <cmath>
#include <filesystem>
#include <random>
#include <string>
#include <vector>

#include "ran/caption.hpp"

namespace ran::testing {

inline std::size_t pick(std::mt19937_64& rng, std::size_t n) { return static_cast<std::size_t>(rng() % n); }

/// Random tree with depth <= max_depth and arity in [2, max_arity].
inline caption::DecompositionTree random_caption_tree(std::mt19937_64& rng, int max_depth, std::size_t max_arity,
                                                     std::size_t radicals = 12) {
  if (max_depth == 0 || pick(rng, 3) == 0)
    return caption::DecompositionTree::leaf("r" + std::to_string(1 + pick(rng, radicals)));
  const auto ops = caption::all_structure_ops();
  const auto op = ops[pick(rng, ops.size())];
  const std::size_t arity = 2 + pick(rng, max_arity - 1);
  std::vector<caption::DecompositionTree> kids;
  for (std::size_t i = 0; i < arity; ++i) kids.push_back(random_caption_tree(rng, max_depth - 1, max_arity, radicals));
  return caption::DecompositionTree::internal(op, std::move(kids));
}

/// Hand serializer used as an oracle for caption::serialize.
inline std::string oracle_serialize(const caption::DecompositionTree& t) {
  if (t.is_leaf()) return t.radical();
  std::string out(caption::op_code(t.op()));
  out += " {";
  for (const auto& c : t.children()) out += " " + oracle_serialize(c);
  return out + " }";
}

/// Random word soup over braces, operators, radicals, control words and junk,
/// joined by mixed whitespace.
inline std::string fuzz_caption(std::mt19937_64& rng) {
  static const std::vector<std::string> words{"{", "}", "a", "d", "stl", "str", "sbl", "sl", "sb", "st", "s", "w",
                                              "r1", "r2", "xyz", "<s>", "</s>", "{{", "a{", "}r", "", "\t", "q"};
  static const std::vector<std::string> gaps{" ", "  ", "\t", "\n", " \r\n "};
  const std::size_t n = pick(rng, 16);
  std::string out;
  for (std::size_t i = 0; i < n; ++i) {
    if (i) out += gaps[pick(rng, gaps.size())];
    out += words[pick(rng, words.size())];
  }
  return out;
}

/// Fresh empty directory under the system temp dir.
inline std::filesystem::path scratch_dir(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / ("ran-test-" + name);
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

/// Taylor series oracles, 64-bit.
inline double series_exp(double x) {
  // exp(x) = exp(x / 2^k)^(2^k) with a short series near zero.
  int k = 0;
  while (std::abs(x) > 0.5) {
    x /= 2;
    ++k;
  }
  double term = 1.0, sum = 1.0;
  for (int i = 1; i < 30; ++i) {
    term *= x / i;
    sum += term;
  }
  for (int i = 0; i < k; ++i) sum *= sum;
  return sum;
}
inline double series_tanh(double x) {
  const double e = series_exp(-2.0 * std::abs(x));
  const double t = (1.0 - e) / (1.0 + e);
  return x < 0 ? -t : t;
}
inline double series_sigmoid(double x) { return 1.0 / (1.0 + series_exp(-x)); }

}  // namespace ran::testing
