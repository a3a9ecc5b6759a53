#pragma once

// Synthetic glyphs: seeded radical bitmaps, recursive composition by
// structure operator, PGM I/O and zero-shot dataset synthesis.

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "ran/caption.hpp"
#include "ran/random.hpp"

namespace ran::glyph {

enum class GlyphErrc {
  cell_too_small,
  missing_radical,
  coverage_infeasible,
  bad_arguments,
  bad_image,
  bad_manifest,
};

class GlyphError : public std::runtime_error {
 public:
  GlyphError(GlyphErrc code, const std::string& what) : std::runtime_error(what), code_(code) {}
  GlyphErrc code() const noexcept { return code_; }

 private:
  GlyphErrc code_;
};

/// Row-major grayscale image, intensities in [0,1] (1 = ink).
class GlyphImage {
 public:
  GlyphImage() = default;
  GlyphImage(int width, int height, float fill = 0.0f);

  int width() const noexcept { return width_; }
  int height() const noexcept { return height_; }
  bool empty() const noexcept { return pixels_.empty(); }

  float& at(int x, int y) { return pixels_[static_cast<std::size_t>(y) * width_ + x]; }
  float at(int x, int y) const { return pixels_[static_cast<std::size_t>(y) * width_ + x]; }

  std::span<float> pixels() noexcept { return pixels_; }
  std::span<const float> pixels() const noexcept { return pixels_; }

  bool operator==(const GlyphImage&) const = default;

 private:
  int width_ = 0;
  int height_ = 0;
  std::vector<float> pixels_;
};

/// Bilinear resampling onto a width x height grid (pixel-center aligned).
GlyphImage resample_bilinear(const GlyphImage& src, int width, int height);

/// Binary P5, maxval 255, value = round(pixel * 255).
void write_pgm(const GlyphImage& img, const std::filesystem::path& path);
std::vector<std::uint8_t> encode_pgm(const GlyphImage& img);
/// Accepts P5 with maxval <= 255 and comment lines in the header.
GlyphImage read_pgm(const std::filesystem::path& path);

inline constexpr int kMinCell = 8;

/// 3-6 anti-aliased strokes; a pure function of its arguments.
GlyphImage render_radical(const std::string& radical_id, int cell, std::uint64_t seed);

struct RadicalAtlas {
  int cell = 0;
  std::uint64_t seed = 0;
  std::map<std::string, GlyphImage> entries;

  static RadicalAtlas build(std::span<const std::string> radical_ids, int cell, std::uint64_t seed);
  const GlyphImage& at(const std::string& radical_id) const;
};

/// Layout constants for the surround and within operators (fractions of
/// the parent side length).
inline constexpr double kCornerInnerScale = 0.55;
inline constexpr double kSideInnerScale = 0.60;
inline constexpr double kSurroundInnerScale = 0.55;
inline constexpr double kWithinInnerScale = 0.50;

GlyphImage compose(const caption::DecompositionTree& tree, const RadicalAtlas& atlas, int out_size);
GlyphImage compose(const caption::DecompositionTree& tree, const RadicalAtlas& atlas, int width, int height);

// Datasets.

inline constexpr std::string_view kManifestHeader = "# ran-kit manifest v1";

struct ManifestItem {
  std::string sample_id;
  std::string caption;
  std::string image_path;  // relative to the manifest's directory
};

struct DatasetManifest {
  std::string split;
  std::filesystem::path base_dir;
  std::vector<ManifestItem> items;

  std::vector<std::string> captions() const;
  std::filesystem::path image_file(const ManifestItem& item) const { return base_dir / item.image_path; }
};

void write_manifest(const DatasetManifest& manifest, const std::filesystem::path& path);
/// Checks the header, id uniqueness and that every caption parses.
DatasetManifest read_manifest(const std::filesystem::path& path, std::string split = {});

std::vector<std::string> radical_inventory(int count);

/// A random tree of depth 1..max_depth over the given radicals and operators.
caption::DecompositionTree random_tree(Rng& rng, std::span<const std::string> radicals,
                                       std::span<const caption::StructureOp> ops, int max_depth);

struct SynthOptions {
  int radicals = 20;
  std::vector<caption::StructureOp> structures{caption::all_structure_ops().begin(),
                                               caption::all_structure_ops().end()};
  int compositions = 200;
  std::array<double, 3> split{0.7, 0.1, 0.2};
  std::uint64_t seed = 1;
  int image_size = 64;
  int atlas_cell = 64;
  int max_depth = 3;
  int max_attempts = 64;
};

struct SynthResult {
  DatasetManifest train, valid, test;
  RadicalAtlas atlas;
  caption::ZeroShotReport zero_shot;
};

/// Sizes of the three splits for `compositions` items (valid and test are
/// rounded, train takes the rest).
std::array<int, 3> split_sizes(int compositions, const std::array<double, 3>& fractions);

/// Builds the trees and splits without touching the filesystem.
SynthResult plan_dataset(const SynthOptions& opts);

/// plan_dataset, then writes images/<id>.pgm plus train/valid/test.tsv and
/// vocab.tsv under out_dir.
SynthResult synth_dataset(const SynthOptions& opts, const std::filesystem::path& out_dir);

}  // namespace ran::glyph
