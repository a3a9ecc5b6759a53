#include <doctest.h>

#include <fstream>
#include <random>
#include <sstream>

#include "support.hpp"
#include "ran/train.hpp"

using namespace ran;
using namespace ran::train;
using T = ad::Tensor<double>;

namespace {

ParamSet<double> two_params(std::vector<double> a, std::vector<double> b) {
  ParamSet<double> p;
  const auto na = a.size(), nb = b.size();
  p.add("a", T({na}, std::move(a)));
  p.add("b", T({nb}, std::move(b)));
  return p;
}

TrainErrc code_of(const std::function<void()>& f) {
  try {
    f();
  } catch (const TrainError& e) {
    return e.code();
  }
  FAIL("no TrainError thrown");
  return TrainErrc::bad_config;
}

TrainConfig tiny_config() {
  TrainConfig c;
  c.encoder = "1x4";
  c.embed_dim = 6;
  c.hidden_dim = 6;
  c.coverage_maps = 3;
  c.image_size = 16;
  c.batch_size = 3;
  c.epochs = 1;
  c.precision = 64;
  c.beam = 2;
  c.max_len = 12;
  return c;
}

glyph::SynthResult tiny_dataset(const std::filesystem::path& dir) {
  glyph::SynthOptions o;
  o.radicals = 4;
  o.structures = {caption::StructureOp::a, caption::StructureOp::d};
  o.compositions = 12;
  o.split = {0.5, 0.25, 0.25};
  o.image_size = 16;
  o.atlas_cell = 16;
  o.max_depth = 2;
  o.seed = 5;
  return glyph::synth_dataset(o, dir);
}

Checkpoint random_checkpoint(std::uint64_t seed, bool with_state) {
  Checkpoint c;
  c.config = tiny_config();
  c.config.seed = seed;
  c.vocab = caption::build_vocab(std::vector<std::string>{"a { r1 r2 }", "d { r3 stl { r1 r2 } }"});
  c.params = model::init_params<float>(c.model_config(), seed);
  if (with_state) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<float> u(0.0f, 1.0f);
    c.sq_grad = ad::zero_gradients(c.params);
    c.sq_update = ad::zero_gradients(c.params);
    for (auto* g : {&c.sq_grad, &c.sq_update})
      for (auto& t : *g)
        for (auto& v : t.values()) v = u(rng);
  }
  c.epoch = static_cast<int>(seed % 17);
  c.valid_accuracy = 1.0 / double(seed + 3);
  return c;
}

void check_same(const Checkpoint& a, const Checkpoint& b) {
  CHECK(a.config == b.config);
  CHECK(a.vocab == b.vocab);
  CHECK(a.params == b.params);
  CHECK(a.sq_grad == b.sq_grad);
  CHECK(a.sq_update == b.sq_update);
  CHECK(a.epoch == b.epoch);
  CHECK(a.valid_accuracy == b.valid_accuracy);
}

}  // namespace

TEST_CASE("adadelta first step has the closed form") {
  auto p = two_params({1.0, -2.0, 0.5}, {3.0});
  const std::vector<T> g{T({3}, {0.3, -0.02, 4.0}), T({1}, {-1.5})};
  auto st = AdadeltaState<double>::fresh(p, 0.95, 1e-6, 100.0);
  const auto before = p;
  const double norm = adadelta_update(p, g, st);
  CHECK(norm == doctest::Approx(std::sqrt(0.09 + 0.0004 + 16.0 + 2.25)).epsilon(1e-14));
  for (std::size_t t = 0; t < 2; ++t)
    for (std::size_t i = 0; i < g[t].size(); ++i) {
      const double gi = g[t][i];
      const double dx = -(std::sqrt(1e-6) / std::sqrt(0.05 * gi * gi + 1e-6)) * gi;
      CHECK(p[t][i] - before[t][i] == doctest::Approx(dx).epsilon(1e-12));
      CHECK(st.sq_grad[t][i] == doctest::Approx(0.05 * gi * gi).epsilon(1e-14));
      CHECK(st.sq_update[t][i] == doctest::Approx(0.05 * dx * dx).epsilon(1e-12));
    }
}

TEST_CASE("adadelta with a zero gradient decays the accumulators and leaves parameters") {
  auto p = two_params({1.0, 2.0}, {3.0});
  auto st = AdadeltaState<double>::fresh(p, 0.9, 1e-6, 100.0);
  adadelta_update(p, {T({2}, {0.5, -0.5}), T({1}, {2.0})}, st);
  const auto params = p;
  const auto sg = st.sq_grad, su = st.sq_update;
  adadelta_update(p, {T({2}), T({1})}, st);
  CHECK(p == params);
  for (std::size_t t = 0; t < 2; ++t)
    for (std::size_t i = 0; i < sg[t].size(); ++i) {
      CHECK(st.sq_grad[t][i] == doctest::Approx(0.9 * sg[t][i]).epsilon(1e-14));
      CHECK(st.sq_update[t][i] == doctest::Approx(0.9 * su[t][i]).epsilon(1e-14));
    }
}

TEST_CASE("adadelta clipping equals pre-scaled gradients") {
  std::mt19937_64 rng(3);
  std::normal_distribution<double> n01;
  std::vector<T> g{T({5}), T({4})};
  for (auto& t : g)
    for (auto& v : t.values()) v = n01(rng);
  const double clip = 2.0;
  const double scale = 10.0 * clip / global_norm(g);
  std::vector<T> big = g, small = g;
  for (std::size_t t = 0; t < 2; ++t)
    for (std::size_t i = 0; i < g[t].size(); ++i) {
      big[t][i] *= scale;
      small[t][i] = big[t][i] * 0.1;
    }
  CHECK(global_norm(big) == doctest::Approx(10.0 * clip));
  auto p1 = two_params({0, 0, 0, 0, 0}, {0, 0, 0, 0}), p2 = p1;
  auto s1 = AdadeltaState<double>::fresh(p1, 0.95, 1e-6, clip), s2 = s1;
  for (int step = 0; step < 3; ++step) {
    CHECK(adadelta_update(p1, big, s1) == doctest::Approx(10.0 * clip));
    adadelta_update(p2, small, s2);
  }
  for (std::size_t t = 0; t < 2; ++t)
    for (std::size_t i = 0; i < g[t].size(); ++i) CHECK(p1[t][i] == doctest::Approx(p2[t][i]).epsilon(1e-12));
}

TEST_CASE("adadelta single step is scale free when epsilon is negligible") {
  const std::vector<T> g{T({3}, {0.3, -0.02, 4.0}), T({1}, {-1.5})};
  for (double c : {0.1, 1.0, 50.0}) {
    std::vector<T> gc = g;
    for (auto& t : gc)
      for (auto& v : t.values()) v *= c;
    auto p = two_params({0, 0, 0}, {0});
    auto st = AdadeltaState<double>::fresh(p, 0.95, 1e-12, 1e9);
    adadelta_update(p, gc, st);
    auto q = two_params({0, 0, 0}, {0});
    auto sq = AdadeltaState<double>::fresh(q, 0.95, 1e-12, 1e9);
    adadelta_update(q, g, sq);
    for (std::size_t t = 0; t < 2; ++t)
      for (std::size_t i = 0; i < g[t].size(); ++i) {
        CHECK(p[t][i] * g[t][i] < 0.0);
        CHECK(std::abs(p[t][i] / q[t][i] - 1.0) < 0.01);
      }
  }
}

TEST_CASE("adadelta rejects misaligned gradients") {
  auto p = two_params({1, 2}, {3});
  auto st = AdadeltaState<double>::fresh(p, 0.95, 1e-6, 100);
  CHECK(code_of([&] { adadelta_update(p, {T({2})}, st); }) == TrainErrc::shape_mismatch);
  CHECK(code_of([&] { adadelta_update(p, {T({2}), T({2})}, st); }) == TrainErrc::shape_mismatch);
}

TEST_CASE("config serialization round trip") {
  TrainConfig c = tiny_config();
  c.epsilon = 1.0 / 3.0;
  c.rho = 0.9;
  c.stop_when_perfect = false;
  c.seed = 18446744073709551615ULL;  // full u64 range
  TrainConfig back;
  std::istringstream in(c.serialize());
  std::vector<std::string> keys;
  for (std::string line; std::getline(in, line);) {
    const auto eq = line.find('=');
    REQUIRE(eq != std::string::npos);
    keys.push_back(line.substr(0, eq));
    CHECK(apply_setting(back, line.substr(0, eq), line.substr(eq + 1)));
  }
  CHECK(std::is_sorted(keys.begin(), keys.end()));
  CHECK(back == c);

  CHECK_FALSE(apply_setting(back, "learning_rate", "1"));
  CHECK(code_of([&] { apply_setting(back, "batch_size", "many"); }) == TrainErrc::bad_config);
  back.precision = 16;
  CHECK(code_of([&] { back.validate(); }) == TrainErrc::bad_config);
  back = c;
  back.encoder = "3y2";
  CHECK(code_of([&] { back.validate(); }) == TrainErrc::bad_config);
  CHECK(std::string(to_string(TrainErrc::zero_shot_violation)) == "ZeroShotViolation");
}

TEST_CASE("checkpoint round trip is bit exact") {
  for (std::uint64_t seed = 1; seed <= 6; ++seed) {
    const auto c = random_checkpoint(seed, seed % 2 == 0);
    const auto bytes = encode_checkpoint(c);
    const auto back = decode_checkpoint(bytes);
    check_same(c, back);
    CHECK(encode_checkpoint(back) == bytes);
  }
  const auto dir = testing::scratch_dir("ckpt");
  const auto c = random_checkpoint(9, true);
  save_checkpoint(c, dir / "m.ckpt");
  check_same(c, load_checkpoint(dir / "m.ckpt"));
  CHECK_FALSE(std::filesystem::exists(dir / "m.ckpt.tmp"));
  CHECK_THROWS(load_checkpoint(dir / "missing.ckpt"));
}

TEST_CASE("damaged checkpoints are rejected") {
  const auto c = random_checkpoint(4, true);
  const auto bytes = encode_checkpoint(c);

  auto cut = bytes;
  cut.pop_back();
  CHECK(code_of([&] { decode_checkpoint(cut); }) == TrainErrc::corrupt_checkpoint);
  cut.resize(20);
  CHECK(code_of([&] { decode_checkpoint(cut); }) == TrainErrc::corrupt_checkpoint);

  auto magic = bytes;
  magic[3] = 'X';
  CHECK(code_of([&] { decode_checkpoint(magic); }) == TrainErrc::corrupt_checkpoint);

  auto extra = bytes;
  extra.push_back(0);
  CHECK(code_of([&] { decode_checkpoint(extra); }) == TrainErrc::corrupt_checkpoint);

  // Edited dimension in the header: the fingerprint no longer matches.
  std::string text(bytes.begin(), bytes.end());
  const auto pos = text.find("hidden_dim=6");
  REQUIRE(pos != std::string::npos);
  text[pos + 11] = '8';
  const std::vector<char> edited(text.begin(), text.end());
  CHECK(code_of([&] { decode_checkpoint(edited); }) == TrainErrc::incompatible_checkpoint);

  // A consistent header whose dimensions disagree with the tensors.
  auto wrong = c;
  wrong.config.hidden_dim = 8;
  CHECK(code_of([&] { decode_checkpoint(encode_checkpoint(wrong)); }) == TrainErrc::incompatible_checkpoint);

  const auto hdr = checkpoint_header(c);
  CHECK(hdr.find("fingerprint=" + fingerprint(hdr.substr(0, hdr.rfind("fingerprint=")))) != std::string::npos);
}

TEST_CASE("evaluation") {
  const auto dir = testing::scratch_dir("eval");
  const auto data = tiny_dataset(dir);
  Checkpoint c;
  c.config = tiny_config();
  c.vocab = training_vocab(data.train);
  c.params = model::init_params<float>(c.model_config(), 2);

  glyph::DatasetManifest empty;
  CHECK(code_of([&] { evaluate(empty, c, 2); }) == TrainErrc::empty_manifest);

  const auto a = evaluate(data.test, c, 2);
  const auto b = evaluate(data.test, c, 2);
  CHECK(a.total == data.test.items.size());
  REQUIRE(a.records.size() == b.records.size());
  for (std::size_t i = 0; i < a.records.size(); ++i) {
    CHECK(a.records[i].prediction == b.records[i].prediction);
    CHECK(a.records[i].log_prob == b.records[i].log_prob);
    CHECK(a.records[i].reference == data.test.items[i].caption);
  }
  CHECK(a.accuracy == double(a.exact_match) / double(a.total));

  write_report(a, dir / "report.tsv");
  std::ifstream in(dir / "report.tsv");
  std::string line;
  std::getline(in, line);
  CHECK(line == "sample_id\tprediction\treference\tcorrect\tlog_prob\terror");
  std::size_t rows = 0;
  while (std::getline(in, line)) ++rows;
  CHECK(rows == a.total);

  // An unreadable image is an error row, not an abort.
  auto broken = data.test;
  std::filesystem::remove(broken.image_file(broken.items[0]));
  const auto r = evaluate(broken, c, 2);
  CHECK_FALSE(r.records[0].error.empty());
  CHECK_FALSE(r.records[0].correct);
}

TEST_CASE("training is deterministic and starts near uniform loss") {
  const auto dir = testing::scratch_dir("train");
  const auto data = tiny_dataset(dir);
  auto cfg = tiny_config();
  TrainOptions opts;
  opts.checkpoint_path = dir / "m.ckpt";
  opts.log_path = dir / "m.log.tsv";
  const auto a = train::train(data.train, data.valid, cfg, opts);
  const auto b = train::train(data.train, data.valid, cfg);
  REQUIRE(a.log.size() == 2);
  REQUIRE(b.log.size() == 2);
  CHECK(a.log[0].epoch == 0);
  CHECK(a.log[1].mean_loss == b.log[1].mean_loss);
  CHECK(a.log[1].valid_accuracy == b.log[1].valid_accuracy);
  CHECK(a.best.params == b.best.params);

  const double lnk = std::log(double(training_vocab(data.train).size()));
  CHECK(std::abs(a.log[0].mean_loss - lnk) < 0.2 * lnk);

  CHECK(std::filesystem::exists(dir / "m.ckpt"));
  std::ifstream in(dir / "m.log.tsv");
  std::string line;
  std::getline(in, line);
  CHECK(line == "epoch\tmean_loss\tvalid_accuracy");
  std::size_t rows = 0;
  while (std::getline(in, line)) ++rows;
  CHECK(rows == 2);

  cfg.seed = 2;
  const auto c = train::train(data.train, data.valid, cfg);
  CHECK(c.log[1].mean_loss != a.log[1].mean_loss);
}

TEST_CASE("training preconditions") {
  const auto dir = testing::scratch_dir("train-pre");
  const auto data = tiny_dataset(dir);
  const auto cfg = tiny_config();

  glyph::DatasetManifest empty;
  CHECK(code_of([&] { train::train(empty, data.valid, cfg); }) == TrainErrc::empty_manifest);

  auto unseen = data.valid;
  unseen.items[0].caption = "a { r99 r1 }";
  CHECK(code_of([&] { train::train(data.train, unseen, cfg); }) == TrainErrc::zero_shot_violation);
  try {
    train::train(data.train, unseen, cfg);
  } catch (const TrainError& e) {
    CHECK(std::string(e.what()).find("r99") != std::string::npos);
  }

  auto big = cfg;
  big.image_size = 32;
  CHECK(code_of([&] { train::train(data.train, data.valid, big); }) == TrainErrc::bad_config);
}
