#include "ran/glyph.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <set>
#include <sstream>

namespace ran::glyph {

using caption::DecompositionTree;
using caption::StructureOp;

GlyphImage::GlyphImage(int width, int height, float fill) : width_(width), height_(height) {
  if (width <= 0 || height <= 0) throw GlyphError(GlyphErrc::bad_image, "image dimensions must be positive");
  pixels_.assign(static_cast<std::size_t>(width) * static_cast<std::size_t>(height), fill);
}

GlyphImage resample_bilinear(const GlyphImage& src, int width, int height) {
  GlyphImage out(width, height);
  const double sx = static_cast<double>(src.width()) / width;
  const double sy = static_cast<double>(src.height()) / height;
  for (int y = 0; y < height; ++y) {
    const double fy = std::clamp((y + 0.5) * sy - 0.5, 0.0, src.height() - 1.0);
    const int y0 = static_cast<int>(fy);
    const int y1 = std::min(y0 + 1, src.height() - 1);
    const double wy = fy - y0;
    for (int x = 0; x < width; ++x) {
      const double fx = std::clamp((x + 0.5) * sx - 0.5, 0.0, src.width() - 1.0);
      const int x0 = static_cast<int>(fx);
      const int x1 = std::min(x0 + 1, src.width() - 1);
      const double wx = fx - x0;
      const double top = (1 - wx) * src.at(x0, y0) + wx * src.at(x1, y0);
      const double bot = (1 - wx) * src.at(x0, y1) + wx * src.at(x1, y1);
      out.at(x, y) = static_cast<float>(std::clamp((1 - wy) * top + wy * bot, 0.0, 1.0));
    }
  }
  return out;
}

GlyphImage render_radical(const std::string& radical_id, int cell, std::uint64_t seed) {
  if (cell < kMinCell)
    throw GlyphError(GlyphErrc::cell_too_small,
                     "radical cell " + std::to_string(cell) + " < " + std::to_string(kMinCell));
  Rng rng(mix_seed(seed, radical_id));
  GlyphImage img(cell, cell);

  const double half_width = std::max(1.0, cell / 16.0);
  const double lo = 0.1 * cell, hi = 0.9 * cell;
  const int strokes = 3 + static_cast<int>(rng.index(4));
  for (int s = 0; s < strokes; ++s) {
    double x0, y0, x1, y1;
    do {
      x0 = rng.uniform(lo, hi);
      y0 = rng.uniform(lo, hi);
      x1 = rng.uniform(lo, hi);
      y1 = rng.uniform(lo, hi);
    } while (std::hypot(x1 - x0, y1 - y0) < 0.3 * cell);

    const double dx = x1 - x0, dy = y1 - y0;
    const double len2 = dx * dx + dy * dy;
    for (int y = 0; y < cell; ++y) {
      for (int x = 0; x < cell; ++x) {
        const double px = x + 0.5, py = y + 0.5;
        const double t = std::clamp(((px - x0) * dx + (py - y0) * dy) / len2, 0.0, 1.0);
        const double d = std::hypot(px - (x0 + t * dx), py - (y0 + t * dy));
        // One-pixel linear falloff at the stroke edge.
        const double v = std::clamp(half_width + 0.5 - d, 0.0, 1.0);
        img.at(x, y) = std::max(img.at(x, y), static_cast<float>(v));
      }
    }
  }
  return img;
}

RadicalAtlas RadicalAtlas::build(std::span<const std::string> radical_ids, int cell, std::uint64_t seed) {
  RadicalAtlas atlas;
  atlas.cell = cell;
  atlas.seed = seed;
  for (const auto& id : radical_ids) atlas.entries.emplace(id, render_radical(id, cell, seed));
  return atlas;
}

const GlyphImage& RadicalAtlas::at(const std::string& radical_id) const {
  auto it = entries.find(radical_id);
  if (it == entries.end()) throw GlyphError(GlyphErrc::missing_radical, "radical '" + radical_id + "' not in atlas");
  return it->second;
}

namespace {

struct Rect {
  int x, y, w, h;
};

void paste_max(GlyphImage& dst, const GlyphImage& src, int ox, int oy) {
  for (int y = 0; y < src.height(); ++y)
    for (int x = 0; x < src.width(); ++x) {
      float& d = dst.at(ox + x, oy + y);
      d = std::max(d, src.at(x, y));
    }
}

int scaled(int side, double f) { return std::max(1, static_cast<int>(std::lround(side * f))); }

// Splits `r` into n equal strips along x (horizontal = true) or y.
std::vector<Rect> strips(Rect r, std::size_t n, bool horizontal) {
  std::vector<Rect> out;
  const int extent = horizontal ? r.w : r.h;
  for (std::size_t k = 0; k < n; ++k) {
    const int a = static_cast<int>(k * extent / n);
    const int b = static_cast<int>((k + 1) * extent / n);
    out.push_back(horizontal ? Rect{r.x + a, r.y, std::max(1, b - a), r.h} : Rect{r.x, r.y + a, r.w, std::max(1, b - a)});
  }
  return out;
}

// Where the second child of a two-part surround/within layout goes.
Rect inner_rect(StructureOp op, int w, int h) {
  switch (op) {
    case StructureOp::stl: {  // open towards bottom-right
      const int iw = scaled(w, kCornerInnerScale), ih = scaled(h, kCornerInnerScale);
      return {w - iw, h - ih, iw, ih};
    }
    case StructureOp::str: {  // open towards bottom-left
      const int iw = scaled(w, kCornerInnerScale), ih = scaled(h, kCornerInnerScale);
      return {0, h - ih, iw, ih};
    }
    case StructureOp::sbl: {  // open towards top-right
      const int iw = scaled(w, kCornerInnerScale), ih = scaled(h, kCornerInnerScale);
      return {w - iw, 0, iw, ih};
    }
    case StructureOp::sl: {  // open on the right
      const int iw = scaled(w, kSideInnerScale), ih = scaled(h, kSideInnerScale);
      return {w - iw, (h - ih) / 2, iw, ih};
    }
    case StructureOp::sb: {  // open at the top
      const int iw = scaled(w, kSideInnerScale), ih = scaled(h, kSideInnerScale);
      return {(w - iw) / 2, 0, iw, ih};
    }
    case StructureOp::st: {  // open at the bottom
      const int iw = scaled(w, kSideInnerScale), ih = scaled(h, kSideInnerScale);
      return {(w - iw) / 2, h - ih, iw, ih};
    }
    case StructureOp::s: {
      const int iw = scaled(w, kSurroundInnerScale), ih = scaled(h, kSurroundInnerScale);
      return {(w - iw) / 2, (h - ih) / 2, iw, ih};
    }
    case StructureOp::w: {
      const int iw = scaled(w, kWithinInnerScale), ih = scaled(h, kWithinInnerScale);
      return {(w - iw) / 2, (h - ih) / 2, iw, ih};
    }
    default:
      return {0, 0, w, h};
  }
}

GlyphImage compose_rec(const DecompositionTree& tree, const RadicalAtlas& atlas, int w, int h) {
  if (tree.is_leaf()) {
    const auto& src = atlas.at(tree.radical());
    if (src.width() == w && src.height() == h) return src;
    return resample_bilinear(src, w, h);
  }

  GlyphImage canvas(w, h);
  const auto children = tree.children();
  const auto place = [&](const DecompositionTree& child, Rect r) {
    paste_max(canvas, compose_rec(child, atlas, r.w, r.h), r.x, r.y);
  };

  if (tree.op() == StructureOp::a || tree.op() == StructureOp::d) {
    const auto rects = strips({0, 0, w, h}, children.size(), tree.op() == StructureOp::a);
    for (std::size_t k = 0; k < children.size(); ++k) place(children[k], rects[k]);
    return canvas;
  }

  place(children[0], {0, 0, w, h});
  const Rect inner = inner_rect(tree.op(), w, h);
  if (children.size() == 2) {
    place(children[1], inner);
  } else {
    // Three or more parts: the inner region is shared left to right.
    const auto rects = strips(inner, children.size() - 1, true);
    for (std::size_t k = 1; k < children.size(); ++k) place(children[k], rects[k - 1]);
  }
  return canvas;
}

}  // namespace

GlyphImage compose(const DecompositionTree& tree, const RadicalAtlas& atlas, int width, int height) {
  if (width <= 0 || height <= 0) throw GlyphError(GlyphErrc::bad_arguments, "canvas size must be positive");
  return compose_rec(tree, atlas, width, height);
}

GlyphImage compose(const DecompositionTree& tree, const RadicalAtlas& atlas, int out_size) {
  return compose(tree, atlas, out_size, out_size);
}

// ---------------------------------------------------------------------------
// Manifests

std::vector<std::string> DatasetManifest::captions() const {
  std::vector<std::string> out;
  out.reserve(items.size());
  for (const auto& it : items) out.push_back(it.caption);
  return out;
}

void write_manifest(const DatasetManifest& manifest, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw GlyphError(GlyphErrc::bad_manifest, "cannot write manifest " + path.string());
  out << kManifestHeader << '\n';
  for (const auto& it : manifest.items) out << it.sample_id << '\t' << it.caption << '\t' << it.image_path << '\n';
}

DatasetManifest read_manifest(const std::filesystem::path& path, std::string split) {
  std::ifstream in(path);
  if (!in) throw GlyphError(GlyphErrc::bad_manifest, "cannot open manifest " + path.string());
  DatasetManifest m;
  m.split = std::move(split);
  m.base_dir = path.parent_path();

  std::string line;
  if (!std::getline(in, line) || line != kManifestHeader)
    throw GlyphError(GlyphErrc::bad_manifest, path.string() + ": missing '" + std::string(kManifestHeader) + "' header");

  std::set<std::string> ids;
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    const auto t1 = line.find('\t');
    const auto t2 = t1 == std::string::npos ? t1 : line.find('\t', t1 + 1);
    if (t2 == std::string::npos)
      throw GlyphError(GlyphErrc::bad_manifest, path.string() + ":" + std::to_string(lineno) + ": expected 3 columns");
    ManifestItem item{line.substr(0, t1), line.substr(t1 + 1, t2 - t1 - 1), line.substr(t2 + 1)};
    if (!ids.insert(item.sample_id).second)
      throw GlyphError(GlyphErrc::bad_manifest,
                       path.string() + ":" + std::to_string(lineno) + ": duplicate sample id " + item.sample_id);
    try {
      caption::parse_caption(item.caption);
    } catch (const caption::CaptionError& e) {
      throw GlyphError(GlyphErrc::bad_manifest, path.string() + ":" + std::to_string(lineno) + ": " + e.what());
    }
    m.items.push_back(std::move(item));
  }
  return m;
}

// ---------------------------------------------------------------------------
// Synthesis

std::vector<std::string> radical_inventory(int count) {
  std::vector<std::string> out;
  for (int i = 1; i <= count; ++i) out.push_back("r" + std::to_string(i));
  return out;
}

namespace {

constexpr double kSubtreeProbability = 0.3;
constexpr double kTernaryProbability = 0.15;

DecompositionTree random_subtree(Rng& rng, std::span<const std::string> radicals, std::span<const StructureOp> ops,
                                 int depth_budget) {
  const StructureOp op = ops[rng.index(ops.size())];
  const bool splits = op == StructureOp::a || op == StructureOp::d;
  const std::size_t arity = splits && rng.uniform() < kTernaryProbability ? 3 : 2;
  std::vector<DecompositionTree> children;
  for (std::size_t k = 0; k < arity; ++k) {
    if (depth_budget > 1 && rng.uniform() < kSubtreeProbability)
      children.push_back(random_subtree(rng, radicals, ops, depth_budget - 1));
    else
      children.push_back(DecompositionTree::leaf(radicals[rng.index(radicals.size())]));
  }
  return DecompositionTree::internal(op, std::move(children));
}

}  // namespace

DecompositionTree random_tree(Rng& rng, std::span<const std::string> radicals, std::span<const StructureOp> ops,
                              int max_depth) {
  if (radicals.empty() || ops.empty() || max_depth < 1)
    throw GlyphError(GlyphErrc::bad_arguments, "random_tree needs radicals, operators and max_depth >= 1");
  return random_subtree(rng, radicals, ops, max_depth);
}

std::array<int, 3> split_sizes(int compositions, const std::array<double, 3>& f) {
  for (double x : f)
    if (!(x >= 0.0) || x > 1.0) throw GlyphError(GlyphErrc::bad_arguments, "split fractions must lie in [0,1]");
  if (std::abs(f[0] + f[1] + f[2] - 1.0) > 1e-6)
    throw GlyphError(GlyphErrc::bad_arguments, "split fractions must sum to 1");
  if (f[0] <= 0.0) throw GlyphError(GlyphErrc::bad_arguments, "train fraction must be positive");
  const int valid = static_cast<int>(std::lround(f[1] * compositions));
  const int test = static_cast<int>(std::lround(f[2] * compositions));
  const int train = compositions - valid - test;
  if (train <= 0) throw GlyphError(GlyphErrc::bad_arguments, "split leaves no training compositions");
  return {train, valid, test};
}

SynthResult plan_dataset(const SynthOptions& opts) {
  if (opts.radicals < 1 || opts.compositions < 1 || opts.structures.empty() || opts.max_depth < 1)
    throw GlyphError(GlyphErrc::bad_arguments, "synthesis needs >= 1 radical, operator and composition");
  const auto sizes = split_sizes(opts.compositions, opts.split);
  const auto radicals = radical_inventory(opts.radicals);

  for (int attempt = 0; attempt < opts.max_attempts; ++attempt) {
    Rng rng(mix_seed(opts.seed, "trees/" + std::to_string(attempt)));

    std::set<std::string> seen;
    std::vector<std::string> captions;
    const std::size_t budget = static_cast<std::size_t>(opts.compositions) * 1000;
    for (std::size_t draws = 0; captions.size() < static_cast<std::size_t>(opts.compositions) && draws < budget;
         ++draws) {
      auto text = caption::serialize(random_tree(rng, radicals, opts.structures, opts.max_depth));
      if (seen.insert(text).second) captions.push_back(std::move(text));
    }
    if (captions.size() < static_cast<std::size_t>(opts.compositions))
      throw GlyphError(GlyphErrc::coverage_infeasible,
                       "only " + std::to_string(captions.size()) + " distinct compositions available");

    const std::vector<std::string> train(captions.begin(), captions.begin() + sizes[0]);
    const std::vector<std::string> held(captions.begin() + sizes[0], captions.end());
    auto report = caption::zero_shot_check(train, held);
    if (!report.ok) continue;

    SynthResult result;
    result.zero_shot = std::move(report);
    result.atlas = RadicalAtlas::build(radicals, opts.atlas_cell, opts.seed);
    DatasetManifest* splits[3] = {&result.train, &result.valid, &result.test};
    const char* names[3] = {"train", "valid", "test"};
    std::size_t next = 0;
    for (int s = 0; s < 3; ++s) {
      splits[s]->split = names[s];
      for (int k = 0; k < sizes[s]; ++k, ++next) {
        char id[32];
        std::snprintf(id, sizeof id, "s%05zu", next);
        splits[s]->items.push_back({id, captions[next], std::string("images/") + id + ".pgm"});
      }
    }
    return result;
  }
  throw GlyphError(GlyphErrc::coverage_infeasible,
                   "no split covering every held-out radical and operator after " +
                       std::to_string(opts.max_attempts) + " attempts");
}

SynthResult synth_dataset(const SynthOptions& opts, const std::filesystem::path& out_dir) {
  auto result = plan_dataset(opts);
  std::filesystem::create_directories(out_dir / "images");
  for (auto* m : {&result.train, &result.valid, &result.test}) {
    m->base_dir = out_dir;
    for (const auto& item : m->items) {
      const auto img = compose(caption::parse_caption(item.caption), result.atlas, opts.image_size);
      write_pgm(img, out_dir / item.image_path);
    }
    write_manifest(*m, out_dir / (m->split + ".tsv"));
  }
  const auto corpus = result.train.captions();
  caption::write_vocab(caption::build_vocab(corpus), out_dir / "vocab.tsv");
  return result;
}

}  // namespace ran::glyph
