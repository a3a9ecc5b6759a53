#pragma once

// Command-line front end and its key = value config files.

#include <filesystem>
#include <string>
#include <vector>

#include "ran/glyph.hpp"
#include "ran/grad_check.hpp"
#include "ran/train.hpp"

namespace ran::cli {

enum ExitCode : int {
  kExitOk = 0,
  kExitCheckFailed = 1,
  kExitUsage = 2,
  kExitDivergence = 3,
};

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Training settings plus dataset synthesis settings. `seed` and
/// `image_size` feed both.
struct CliConfig {
  train::TrainConfig train;
  glyph::SynthOptions synth;

  /// Throws ConfigError naming the key when it is unknown or its value
  /// does not parse.
  void set(const std::string& key, const std::string& value);
  /// Accepts "key=value".
  void set_assignment(const std::string& assignment);
  void load_file(const std::filesystem::path& path);
};

/// One-line-per-key file syntax: `key = value`, `#` comments, optional
/// double quotes around strings, and lists either as "a,d" or ["a", "d"].
std::vector<std::pair<std::string, std::string>> parse_config_text(const std::string& text);

std::vector<caption::StructureOp> parse_structures(const std::string& list);
std::array<double, 3> parse_split(const std::string& list);

/// Gradient check of the micro model: encoder 1x8 (D = 8), n = m = 8,
/// K = 6, 8x8 input, every parameter coordinate at 64-bit.
ad::GradCheckResult gradcheck_micro(std::uint64_t seed = 1, double eps = 1e-4);
inline constexpr double kGradCheckTolerance = 1e-4;

/// alpha [H*W] upsampled (nearest neighbour) to width x height and scaled
/// so that its maximum maps to 1 (255 once written as PGM).
glyph::GlyphImage attention_heatmap(std::span<const double> alpha, std::size_t grid_h, std::size_t grid_w, int width,
                                    int height);

/// File-name form of a vocabulary token for heatmap names.
std::string token_file_name(const std::string& token);

int run_cli(int argc, char** argv);

}  // namespace ran::cli
