#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>
#include <map>
#include <sstream>

#include "ran/random.hpp"
#include "ran/train.hpp"

namespace ran::train {

namespace {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");
static_assert(sizeof(float) == 4);

constexpr std::string_view kParamPrefix = "param/";
constexpr std::string_view kSqGradPrefix = "adadelta.sq_grad/";
constexpr std::string_view kSqUpdatePrefix = "adadelta.sq_update/";

[[noreturn]] void corrupt(const std::string& what) { throw TrainError(TrainErrc::corrupt_checkpoint, what); }
[[noreturn]] void incompatible(const std::string& what) {
  throw TrainError(TrainErrc::incompatible_checkpoint, what);
}

class Writer {
 public:
  void bytes(const void* p, std::size_t n) {
    const char* c = static_cast<const char*>(p);
    out_.insert(out_.end(), c, c + n);
  }
  void u32(std::uint32_t v) { bytes(&v, 4); }
  void str(std::string_view s) {
    u32(static_cast<std::uint32_t>(s.size()));
    bytes(s.data(), s.size());
  }
  void tensor(const std::string& name, const Tensor<float>& t) {
    str(name);
    u32(static_cast<std::uint32_t>(t.rank()));
    for (auto d : t.shape()) u32(static_cast<std::uint32_t>(d));
    bytes(t.data(), t.size() * sizeof(float));
  }
  std::vector<char> take() { return std::move(out_); }

 private:
  std::vector<char> out_;
};

class Reader {
 public:
  explicit Reader(const std::vector<char>& buf) : buf_(buf) {}

  void bytes(void* p, std::size_t n) {
    if (buf_.size() - pos_ < n) corrupt("checkpoint truncated at byte " + std::to_string(pos_));
    std::memcpy(p, buf_.data() + pos_, n);
    pos_ += n;
  }
  std::uint32_t u32() {
    std::uint32_t v = 0;
    bytes(&v, 4);
    return v;
  }
  std::string str() {
    const std::uint32_t n = u32();
    if (n > buf_.size() - pos_) corrupt("checkpoint string of " + std::to_string(n) + " bytes overruns the file");
    std::string s(buf_.data() + pos_, n);
    pos_ += n;
    return s;
  }
  std::pair<std::string, Tensor<float>> tensor() {
    std::string name = str();
    const std::uint32_t rank = u32();
    if (rank > 8) corrupt("tensor '" + name + "' has implausible rank " + std::to_string(rank));
    ad::Shape shape(rank);
    std::size_t count = 1;
    for (auto& d : shape) {
      d = u32();
      count *= d;
      if (count > (buf_.size() - pos_) / sizeof(float) + 1) corrupt("tensor '" + name + "' overruns the file");
    }
    Tensor<float> t(shape);
    bytes(t.data(), t.size() * sizeof(float));
    return {std::move(name), std::move(t)};
  }
  bool done() const { return pos_ == buf_.size(); }

 private:
  const std::vector<char>& buf_;
  std::size_t pos_ = 0;
};

std::string format_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

// Header body (everything before the fingerprint line).
std::string header_body(const Checkpoint& ckpt) {
  std::ostringstream os;
  os << "version=" << kCheckpointVersion << '\n';
  os << ckpt.config.serialize();
  os << "vocab_size=" << ckpt.vocab.size() << '\n';
  os << "vocab=";
  for (std::size_t i = 0; i < ckpt.vocab.size(); ++i) os << (i ? " " : "") << ckpt.vocab.token(i);
  os << '\n';
  os << "epoch=" << ckpt.epoch << '\n';
  os << "valid_accuracy=" << format_double(ckpt.valid_accuracy) << '\n';
  return os.str();
}

}  // namespace

std::string fingerprint(const std::string& text) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(fnv1a(text)));
  return buf;
}

std::string checkpoint_header(const Checkpoint& ckpt) {
  const std::string body = header_body(ckpt);
  return body + "fingerprint=" + fingerprint(body) + "\n";
}

std::vector<char> encode_checkpoint(const Checkpoint& ckpt) {
  Writer w;
  w.bytes(kCheckpointMagic, 8);
  w.str(checkpoint_header(ckpt));
  const bool with_opt = !ckpt.sq_grad.empty();
  const std::size_t n = ckpt.params.size();
  w.u32(static_cast<std::uint32_t>(with_opt ? 3 * n : n));
  for (std::size_t i = 0; i < n; ++i) w.tensor(std::string(kParamPrefix) + ckpt.params.name(i), ckpt.params[i]);
  if (with_opt) {
    for (std::size_t i = 0; i < n; ++i) w.tensor(std::string(kSqGradPrefix) + ckpt.params.name(i), ckpt.sq_grad.at(i));
    for (std::size_t i = 0; i < n; ++i)
      w.tensor(std::string(kSqUpdatePrefix) + ckpt.params.name(i), ckpt.sq_update.at(i));
  }
  return w.take();
}

Checkpoint decode_checkpoint(const std::vector<char>& bytes) {
  Reader r(bytes);
  char magic[8];
  r.bytes(magic, 8);
  if (std::memcmp(magic, kCheckpointMagic, 8) != 0) corrupt("bad checkpoint magic");
  const std::string header = r.str();
  const std::uint32_t count = r.u32();
  std::vector<std::pair<std::string, Tensor<float>>> tensors;
  for (std::uint32_t i = 0; i < count; ++i) tensors.push_back(r.tensor());
  if (!r.done()) corrupt("trailing bytes after the tensor table");

  // Header: key=value lines, the last one being the fingerprint of the rest.
  const auto fp_pos = header.rfind("fingerprint=");
  if (fp_pos == std::string::npos || (fp_pos != 0 && header[fp_pos - 1] != '\n'))
    incompatible("checkpoint header has no fingerprint");
  const std::string body = header.substr(0, fp_pos);
  std::string stored = header.substr(fp_pos + 12);
  if (!stored.empty() && stored.back() == '\n') stored.pop_back();
  if (stored != fingerprint(body)) incompatible("checkpoint header does not match its fingerprint");

  std::map<std::string, std::string> kv;
  std::istringstream in(body);
  std::string line;
  while (std::getline(in, line)) {
    const auto eq = line.find('=');
    if (eq == std::string::npos) incompatible("malformed header line '" + line + "'");
    kv[line.substr(0, eq)] = line.substr(eq + 1);
  }
  if (kv["version"] != std::to_string(kCheckpointVersion))
    incompatible("checkpoint version " + kv["version"] + ", expected " + std::to_string(kCheckpointVersion));

  Checkpoint ckpt;
  try {
    for (const auto& [key, value] : kv) {
      if (key == "version" || key == "vocab" || key == "vocab_size") continue;
      if (key == "epoch") {
        ckpt.epoch = std::stoi(value);
      } else if (key == "valid_accuracy") {
        ckpt.valid_accuracy = std::stod(value);
      } else if (!apply_setting(ckpt.config, key, value)) {
        incompatible("unknown checkpoint header key '" + key + "'");
      }
    }
    std::vector<std::string> tokens;
    std::istringstream vs(kv["vocab"]);
    for (std::string t; vs >> t;) tokens.push_back(t);
    if (std::to_string(tokens.size()) != kv["vocab_size"]) incompatible("vocabulary size does not match vocab_size");
    ckpt.vocab = caption::Vocabulary(std::move(tokens));
  } catch (const TrainError&) {
    throw;
  } catch (const std::exception& e) {
    incompatible(std::string("unreadable checkpoint header: ") + e.what());
  }

  const auto layout = model::param_layout(ckpt.model_config());
  const std::size_t n = layout.size();
  if (count != n && count != 3 * n)
    incompatible("checkpoint holds " + std::to_string(count) + " tensors, model needs " + std::to_string(n));
  for (std::size_t i = 0; i < count; ++i) {
    const std::size_t p = i % n;
    const std::string_view prefix = i < n ? kParamPrefix : i < 2 * n ? kSqGradPrefix : kSqUpdatePrefix;
    auto& [name, t] = tensors[i];
    if (name != std::string(prefix) + layout[p].first || t.shape() != layout[p].second)
      incompatible("tensor '" + name + "' " + ad::shape_string(t.shape()) + " where " + std::string(prefix) +
                   layout[p].first + " " + ad::shape_string(layout[p].second) + " was expected");
    if (i < n)
      ckpt.params.add(layout[p].first, std::move(t));
    else
      (i < 2 * n ? ckpt.sq_grad : ckpt.sq_update).push_back(std::move(t));
  }
  return ckpt;
}

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path) {
  const auto bytes = encode_checkpoint(ckpt);
  const auto tmp = std::filesystem::path(path.string() + ".tmp");
  {
    std::ofstream out(tmp, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write checkpoint " + tmp.string());
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw std::runtime_error("short write to " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open checkpoint " + path.string());
  const std::vector<char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return decode_checkpoint(bytes);
}

}  // namespace ran::train
