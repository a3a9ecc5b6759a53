#include <fstream>
#include <sstream>

#include "ran/cli.hpp"

namespace ran::cli {

namespace {

std::string trim(std::string_view s) {
  const auto first = s.find_first_not_of(" \t\r");
  if (first == std::string_view::npos) return {};
  const auto last = s.find_last_not_of(" \t\r");
  return std::string(s.substr(first, last - first + 1));
}

std::string unquote(const std::string& s) {
  if (s.size() >= 2 && s.front() == '"' && s.back() == '"') return s.substr(1, s.size() - 2);
  return s;
}

// ["a", "d"] -> a,d ; "x" -> x ; plain values pass through.
std::string normalize_value(const std::string& raw, int line_no) {
  if (raw.empty()) throw ConfigError("line " + std::to_string(line_no) + ": missing value");
  if (raw.front() != '[') return unquote(raw);
  if (raw.back() != ']') throw ConfigError("line " + std::to_string(line_no) + ": unterminated list");
  std::string out;
  std::istringstream items(raw.substr(1, raw.size() - 2));
  for (std::string item; std::getline(items, item, ',');) {
    item = unquote(trim(item));
    if (item.empty()) continue;
    out += (out.empty() ? "" : ",") + item;
  }
  return out;
}

std::vector<std::string> split_commas(const std::string& list) {
  std::vector<std::string> out;
  std::istringstream in(list);
  for (std::string item; std::getline(in, item, ',');) out.push_back(trim(item));
  return out;
}

int to_int(const std::string& key, const std::string& value) {
  try {
    std::size_t used = 0;
    const int v = std::stoi(value, &used);
    if (used == value.size()) return v;
  } catch (const std::exception&) {
  }
  throw ConfigError("'" + key + "' expects an integer, got '" + value + "'");
}

}  // namespace

std::vector<std::pair<std::string, std::string>> parse_config_text(const std::string& text) {
  std::vector<std::pair<std::string, std::string>> out;
  std::istringstream in(text);
  int line_no = 0;
  for (std::string line; std::getline(in, line);) {
    ++line_no;
    bool quoted = false;
    for (std::size_t i = 0; i < line.size(); ++i) {
      if (line[i] == '"') quoted = !quoted;
      if (line[i] == '#' && !quoted) {
        line.resize(i);
        break;
      }
    }
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError("line " + std::to_string(line_no) + ": expected key = value");
    const std::string key = trim(std::string_view(line).substr(0, eq));
    if (key.empty()) throw ConfigError("line " + std::to_string(line_no) + ": empty key");
    out.emplace_back(key, normalize_value(trim(std::string_view(line).substr(eq + 1)), line_no));
  }
  return out;
}

std::vector<caption::StructureOp> parse_structures(const std::string& list) {
  std::vector<caption::StructureOp> ops;
  for (const auto& code : split_commas(list)) {
    const auto op = caption::op_from_code(code);
    if (!op) throw ConfigError("unknown structure operator '" + code + "'");
    if (std::find(ops.begin(), ops.end(), *op) == ops.end()) ops.push_back(*op);
  }
  if (ops.empty()) throw ConfigError("structure list is empty");
  return ops;
}

std::array<double, 3> parse_split(const std::string& list) {
  const auto parts = split_commas(list);
  if (parts.size() != 3) throw ConfigError("split needs three fractions train,valid,test, got '" + list + "'");
  std::array<double, 3> out{};
  for (std::size_t i = 0; i < 3; ++i) {
    try {
      std::size_t used = 0;
      out[i] = std::stod(parts[i], &used);
      if (used != parts[i].size()) throw std::invalid_argument(parts[i]);
    } catch (const std::exception&) {
      throw ConfigError("split fraction '" + parts[i] + "' is not a number");
    }
  }
  return out;
}

void CliConfig::set(const std::string& key, const std::string& value) {
  if (key == "radicals") {
    synth.radicals = to_int(key, value);
  } else if (key == "structures") {
    synth.structures = parse_structures(value);
  } else if (key == "compositions") {
    synth.compositions = to_int(key, value);
  } else if (key == "split") {
    synth.split = parse_split(value);
  } else if (key == "max_depth") {
    synth.max_depth = to_int(key, value);
  } else if (key == "atlas_cell") {
    synth.atlas_cell = to_int(key, value);
  } else {
    try {
      if (!train::apply_setting(train, key, value)) throw ConfigError("unknown config key '" + key + "'");
    } catch (const train::TrainError& e) {
      throw ConfigError(e.what());
    }
    if (key == "seed") synth.seed = train.seed;
    if (key == "image_size") synth.image_size = train.image_size;
  }
}

void CliConfig::set_assignment(const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos) throw ConfigError("expected key=value, got '" + assignment + "'");
  set(trim(std::string_view(assignment).substr(0, eq)), unquote(trim(std::string_view(assignment).substr(eq + 1))));
}

void CliConfig::load_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot read config file " + path.string());
  std::ostringstream text;
  text << in.rdbuf();
  try {
    for (const auto& [key, value] : parse_config_text(text.str())) set(key, value);
  } catch (const ConfigError& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
}

}  // namespace ran::cli
