#include "ran/model.hpp"

#include <cmath>
#include <sstream>

#include "ran/random.hpp"

namespace ran::model {

using ad::Shape;

int EncoderConfig::grid_side(int input_side) const {
  int side = input_side;
  for (std::size_t b = 0; b < blocks.size(); ++b) side = (side + 1) / 2;
  return side;
}

EncoderConfig EncoderConfig::vgg14s() { return {{{3, 32}, {3, 64}, {4, 128}, {4, 256}}, 3, 1}; }
EncoderConfig EncoderConfig::vgg14() { return {{{3, 64}, {3, 128}, {4, 256}, {4, 512}}, 3, 1}; }

EncoderConfig EncoderConfig::parse(const std::string& text) {
  if (text == "vgg14s" || text == "VGG14-s") return vgg14s();
  if (text == "vgg14" || text == "VGG14") return vgg14();
  EncoderConfig cfg;
  std::istringstream in(text);
  std::string item;
  while (std::getline(in, item, ',')) {
    const auto x = item.find('x');
    int layers = 0, channels = 0;
    try {
      if (x == std::string::npos) throw std::invalid_argument("missing x");
      std::size_t used = 0;
      layers = std::stoi(item.substr(0, x), &used);
      if (used != x) throw std::invalid_argument("junk");
      channels = std::stoi(item.substr(x + 1), &used);
      if (used != item.size() - x - 1) throw std::invalid_argument("junk");
    } catch (const std::exception&) {
      throw std::invalid_argument("encoder block '" + item + "' is not <layers>x<channels>");
    }
    if (layers < 1 || channels < 1) throw std::invalid_argument("encoder block '" + item + "' must be positive");
    cfg.blocks.push_back({layers, channels});
  }
  if (cfg.blocks.empty()) throw std::invalid_argument("encoder '" + text + "' has no blocks");
  return cfg;
}

std::string EncoderConfig::to_string() const {
  std::string out;
  for (const auto& b : blocks) {
    if (!out.empty()) out += ',';
    out += std::to_string(b.layers) + "x" + std::to_string(b.channels);
  }
  return out;
}

void ModelConfig::validate() const {
  if (encoder.blocks.empty()) throw std::invalid_argument("encoder needs at least one block");
  if (encoder.kernel % 2 == 0 || encoder.kernel < 1) throw std::invalid_argument("encoder kernel must be odd");
  if (embed_dim == 0 || embed_dim % 2 != 0) throw std::invalid_argument("embedding dimension must be even and positive");
  if (hidden_dim == 0 || coverage_maps == 0) throw std::invalid_argument("decoder dimensions must be positive");
  if (coverage_kernel % 2 == 0) throw std::invalid_argument("coverage kernel must be odd");
  if (vocab_size < 2) throw std::invalid_argument("vocabulary must hold at least two tokens");
}

namespace {

struct ParamSpec {
  std::string name;
  Shape shape;
  bool bias;
};

std::vector<ParamSpec> layout(const ModelConfig& cfg) {
  cfg.validate();
  const std::size_t m = cfg.embed_dim, n = cfg.hidden_dim, D = cfg.annotation_dim(), na = cfg.attention_dim();
  const std::size_t M = cfg.coverage_maps, K = cfg.vocab_size, ck = cfg.coverage_kernel;
  const auto k = static_cast<std::size_t>(cfg.encoder.kernel);

  std::vector<ParamSpec> out;
  auto in_ch = static_cast<std::size_t>(cfg.encoder.input_channels);
  for (std::size_t b = 0; b < cfg.encoder.blocks.size(); ++b) {
    const auto ch = static_cast<std::size_t>(cfg.encoder.blocks[b].channels);
    for (int l = 0; l < cfg.encoder.blocks[b].layers; ++l) {
      const std::string prefix = "enc.b" + std::to_string(b) + ".c" + std::to_string(l);
      out.push_back({prefix + ".w", {ch, in_ch, k, k}, false});
      out.push_back({prefix + ".b", {ch}, true});
      in_ch = ch;
    }
  }
  out.push_back({"dec.embed", {K, m}, false});
  for (auto [name, in] : {std::pair{"gru1", m}, std::pair{"gru2", D}}) {
    const std::string p = name;
    for (const char* gate : {"z", "r", "h"}) {
      out.push_back({p + ".w" + gate, {n, in}, false});
      out.push_back({p + ".u" + gate, {n, n}, false});
      out.push_back({p + ".b" + gate, {n}, true});
    }
  }
  out.push_back({"att.v", {na}, false});
  out.push_back({"att.w", {na, n}, false});
  out.push_back({"att.u", {na, D}, false});
  out.push_back({"att.uf", {na, M}, false});
  out.push_back({"cov.q", {M, 1, ck, ck}, false});
  out.push_back({"cov.b", {M}, true});
  out.push_back({"out.wo", {K, m / 2}, false});
  out.push_back({"out.ws", {m, n}, false});
  out.push_back({"out.wc", {m, D}, false});
  out.push_back({"out.b", {m}, true});
  return out;
}

// Glorot-uniform fans: [out, in] matrices, [out, in, k, k] kernels, vectors as [n, 1].
std::pair<double, double> fans(const Shape& s) {
  if (s.size() == 4) return {double(s[1] * s[2] * s[3]), double(s[0] * s[2] * s[3])};
  if (s.size() == 2) return {double(s[1]), double(s[0])};
  return {double(ad::shape_size(s)), 1.0};
}

}  // namespace

std::vector<std::pair<std::string, Shape>> param_layout(const ModelConfig& cfg) {
  std::vector<std::pair<std::string, Shape>> out;
  for (auto& p : layout(cfg)) out.emplace_back(p.name, p.shape);
  return out;
}

template <typename T>
ParamSet<T> init_params(const ModelConfig& cfg, std::uint64_t seed) {
  ParamSet<T> params;
  for (const auto& spec : layout(cfg)) {
    Tensor<T> t(spec.shape);
    if (!spec.bias) {
      const auto [fan_in, fan_out] = fans(spec.shape);
      const double r = std::sqrt(6.0 / (fan_in + fan_out));
      Rng rng(mix_seed(seed, spec.name));
      for (auto& v : t.values()) v = static_cast<T>(r * (2.0 * rng.uniform() - 1.0));
    }
    params.add(spec.name, std::move(t));
  }
  return params;
}

template <typename T>
RanModel<T>::RanModel(ModelConfig cfg, ParamSet<T> params) : cfg_(std::move(cfg)), params_(std::move(params)) {
  const auto expected = layout(cfg_);
  if (expected.size() != params_.size())
    throw std::invalid_argument("parameter table has " + std::to_string(params_.size()) + " tensors, expected " +
                                std::to_string(expected.size()));
  for (std::size_t i = 0; i < expected.size(); ++i) {
    if (params_.name(i) != expected[i].name || params_[i].shape() != expected[i].shape)
      throw std::invalid_argument("parameter " + std::to_string(i) + " is " + params_.name(i) + " " +
                                  ad::shape_string(params_[i].shape()) + ", expected " + expected[i].name + " " +
                                  ad::shape_string(expected[i].shape));
  }
}

template <typename T>
ParamVars RanModel<T>::bind(Graph<T>& g) const {
  return bind(g, params_);
}

template <typename T>
ParamVars RanModel<T>::bind(Graph<T>& g, const ParamSet<T>& ps) const {
  ParamVars p;
  for (std::size_t b = 0; b < cfg_.encoder.blocks.size(); ++b)
    for (int l = 0; l < cfg_.encoder.blocks[b].layers; ++l) {
      const std::string prefix = "enc.b" + std::to_string(b) + ".c" + std::to_string(l);
      p.conv_w.push_back(g.param(ps, prefix + ".w"));
      p.conv_b.push_back(g.param(ps, prefix + ".b"));
    }
  p.embed = g.param(ps, "dec.embed");
  const auto gru_vars = [&](const std::string& name) {
    return GruVars{g.param(ps, name + ".wz"), g.param(ps, name + ".uz"), g.param(ps, name + ".bz"),
                   g.param(ps, name + ".wr"), g.param(ps, name + ".ur"), g.param(ps, name + ".br"),
                   g.param(ps, name + ".wh"), g.param(ps, name + ".uh"), g.param(ps, name + ".bh")};
  };
  p.gru1 = gru_vars("gru1");
  p.gru2 = gru_vars("gru2");
  p.att_v = g.param(ps, "att.v");
  p.att_w = g.param(ps, "att.w");
  p.att_u = g.param(ps, "att.u");
  p.att_uf = g.param(ps, "att.uf");
  p.cov_q = g.param(ps, "cov.q");
  p.cov_b = g.param(ps, "cov.b");
  p.out_wo = g.param(ps, "out.wo");
  p.out_ws = g.param(ps, "out.ws");
  p.out_wc = g.param(ps, "out.wc");
  p.out_b = g.param(ps, "out.b");
  return p;
}

template <typename T>
Annotations RanModel<T>::encode(Graph<T>& g, const ParamVars& p, const glyph::GlyphImage& img) const {
  const auto h = static_cast<std::size_t>(img.height()), w = static_cast<std::size_t>(img.width());
  Tensor<T> input({1, h, w});
  std::copy(img.pixels().begin(), img.pixels().end(), input.data());
  Var x = g.constant(std::move(input));

  std::size_t layer = 0;
  for (const auto& block : cfg_.encoder.blocks) {
    for (int l = 0; l < block.layers; ++l, ++layer) x = ad::tanh(g, ad::conv2d(g, x, p.conv_w[layer], p.conv_b[layer]));
    x = ad::maxpool2(g, x);
  }
  const auto& shape = g.shape(x);
  Annotations a;
  a.height = shape[1];
  a.width = shape[2];
  a.grid_t = ad::reshape(g, x, {shape[0], a.cells()});
  a.grid = ad::transpose(g, a.grid_t);
  a.projected = ad::linear_rows(g, a.grid, p.att_u);
  return a;
}

template <typename T>
Var RanModel<T>::coverage_features(Graph<T>& g, const ParamVars& p, Var coverage, std::size_t height,
                                   std::size_t width) const {
  const Var plane = ad::reshape(g, coverage, {1, height, width});
  return ad::conv2d(g, plane, p.cov_q, p.cov_b);
}

template <typename T>
std::pair<Var, Var> RanModel<T>::attend(Graph<T>& g, const ParamVars& p, const Annotations& a, Var s_hat,
                                        Var coverage) const {
  const std::size_t L = a.cells();
  const Var f = coverage_features(g, p, coverage, a.height, a.width);
  const Var f_rows = ad::transpose(g, ad::reshape(g, f, {cfg_.coverage_maps, L}));  // [L x M]
  Var pre = ad::add(g, a.projected, ad::linear_rows(g, f_rows, p.att_uf));
  pre = ad::add_rows(g, pre, ad::linear(g, s_hat, p.att_w));
  const Var v_row = ad::reshape(g, p.att_v, {1, cfg_.attention_dim()});
  const Var energy = ad::reshape(g, ad::linear_rows(g, ad::tanh(g, pre), v_row), {L});
  const Var alpha = ad::softmax(g, energy);
  const Var context = ad::linear(g, alpha, a.grid_t);
  return {alpha, context};
}

template <typename T>
Var RanModel<T>::gru(Graph<T>& g, const GruVars& w, Var x, Var h) const {
  const Var z = ad::sigmoid(g, ad::add(g, ad::affine(g, x, w.wz, w.bz), ad::linear(g, h, w.uz)));
  const Var r = ad::sigmoid(g, ad::add(g, ad::affine(g, x, w.wr, w.br), ad::linear(g, h, w.ur)));
  const Var candidate =
      ad::tanh(g, ad::add(g, ad::affine(g, x, w.wh, w.bh), ad::linear(g, ad::mul(g, r, h), w.uh)));
  return ad::add(g, h, ad::mul(g, z, ad::sub(g, candidate, h)));
}

template <typename T>
StepOutput RanModel<T>::step(Graph<T>& g, const ParamVars& p, const Annotations& a, std::size_t y_prev,
                             const StepVars& state) const {
  StepOutput out;
  const Var emb = ad::embed(g, y_prev, p.embed);
  out.s_hat = gru(g, p.gru1, emb, state.s);
  std::tie(out.alpha, out.context) = attend(g, p, a, out.s_hat, state.coverage);
  out.next.s = gru(g, p.gru2, out.context, out.s_hat);
  out.next.coverage = ad::add(g, state.coverage, out.alpha);

  Var pre = ad::add(g, emb, ad::affine(g, out.next.s, p.out_ws, p.out_b));
  pre = ad::add(g, pre, ad::linear(g, out.context, p.out_wc));
  out.logits = ad::linear(g, ad::maxout2(g, pre), p.out_wo);
  out.probs = ad::softmax(g, out.logits);
  return out;
}

template <typename T>
StepVars RanModel<T>::initial_state(Graph<T>& g, const Annotations& a) const {
  return {g.constant(Tensor<T>({cfg_.hidden_dim})), g.constant(Tensor<T>({a.cells()}))};
}

template <typename T>
Var RanModel<T>::teacher_forced_loss(Graph<T>& g, const ParamVars& p, const glyph::GlyphImage& img,
                                     std::span<const std::size_t> target, std::vector<Var>* alphas) const {
  if (target.size() < 2) throw std::invalid_argument("target needs at least Start and End");
  const Annotations a = encode(g, p, img);
  StepVars state = initial_state(g, a);
  Var total;
  for (std::size_t t = 1; t < target.size(); ++t) {
    const StepOutput out = step(g, p, a, target[t - 1], state);
    const Var ce = ad::cross_entropy(g, out.probs, target[t]);
    total = total.valid() ? ad::add(g, total, ce) : ce;
    if (alphas) alphas->push_back(out.alpha);
    state = out.next;
  }
  return total;
}

// ---------------------------------------------------------------------------
// Inference

template <typename T>
EncodedImage<T> encode_image(const RanModel<T>& model, const glyph::GlyphImage& img) {
  Graph<T> g(false);
  const ParamVars p = model.bind(g);
  const Annotations a = model.encode(g, p, img);
  return {g.value(a.grid), g.value(a.grid_t), g.value(a.projected), a.height, a.width};
}

template <typename T>
DecoderState<T> initial_decoder_state(const RanModel<T>& model, const EncodedImage<T>& enc, std::size_t start_index) {
  DecoderState<T> st;
  st.s = Tensor<T>({model.config().hidden_dim});
  st.coverage = Tensor<T>({enc.cells()});
  st.y_prev = start_index;
  return st;
}

template <typename T>
StepResult<T> decode_step(const RanModel<T>& model, const EncodedImage<T>& enc, const DecoderState<T>& state,
                          std::size_t y_prev) {
  Graph<T> g(false);
  const ParamVars p = model.bind(g);
  Annotations a;
  a.grid = g.constant(enc.grid);
  a.grid_t = g.constant(enc.grid_t);
  a.projected = g.constant(enc.projected);
  a.height = enc.height;
  a.width = enc.width;
  const StepVars sv{g.constant(state.s), g.constant(state.coverage)};
  const StepOutput out = model.step(g, p, a, y_prev, sv);

  StepResult<T> r;
  r.probs = g.value(out.probs);
  r.state.s = g.value(out.next.s);
  r.state.coverage = g.value(out.next.coverage);
  r.state.alpha_history = state.alpha_history;
  r.state.alpha_history.push_back(g.value(out.alpha));
  r.state.y_prev = y_prev;
  return r;
}

template <typename T>
Tensor<T> coverage_map(std::span<const Tensor<T>> alpha_history, const Tensor<T>& q, const Tensor<T>& bias,
                       std::size_t height, std::size_t width) {
  Tensor<T> plane({1, height, width});
  for (const auto& alpha : alpha_history) {
    if (alpha.size() != height * width)
      throw ad::TensorError(ad::TensorErrc::shape_error, "coverage_map: alpha of length " + std::to_string(alpha.size()) +
                                                             " for a " + std::to_string(height) + "x" +
                                                             std::to_string(width) + " grid");
    for (std::size_t i = 0; i < alpha.size(); ++i) plane[i] += alpha[i];
  }
  Graph<T> g(false);
  return g.value(ad::conv2d(g, g.constant(std::move(plane)), g.constant(q), g.constant(bias)));
}

#define RAN_MODEL_INSTANTIATE(T)                                                                              \
  template ParamSet<T> init_params<T>(const ModelConfig&, std::uint64_t);                                     \
  template class RanModel<T>;                                                                                 \
  template EncodedImage<T> encode_image<T>(const RanModel<T>&, const glyph::GlyphImage&);                     \
  template DecoderState<T> initial_decoder_state<T>(const RanModel<T>&, const EncodedImage<T>&, std::size_t); \
  template StepResult<T> decode_step<T>(const RanModel<T>&, const EncodedImage<T>&, const DecoderState<T>&,   \
                                        std::size_t);                                                         \
  template Tensor<T> coverage_map<T>(std::span<const Tensor<T>>, const Tensor<T>&, const Tensor<T>&,          \
                                     std::size_t, std::size_t);

RAN_MODEL_INSTANTIATE(float)
RAN_MODEL_INSTANTIATE(double)

}  // namespace ran::model
