#include "ran/caption.hpp"

#include <algorithm>
#include <array>
#include <cctype>
#include <fstream>
#include <sstream>

namespace ran::caption {

namespace {

constexpr std::array<StructureOp, kNumStructureOps> kOps = {
    StructureOp::a,  StructureOp::d,  StructureOp::stl, StructureOp::str, StructureOp::sbl,
    StructureOp::sl, StructureOp::sb, StructureOp::st,  StructureOp::s,   StructureOp::w};

constexpr std::array<std::string_view, kNumStructureOps> kCodes = {"a",  "d",  "stl", "str", "sbl",
                                                                   "sl", "sb", "st",  "s",   "w"};

bool is_space(char c) { return std::isspace(static_cast<unsigned char>(c)) != 0; }

class Parser {
 public:
  explicit Parser(std::span<const CaptionToken> tokens) : tokens_(tokens) {}

  DecompositionTree run() {
    if (tokens_.empty()) throw CaptionError(CaptionErrc::empty_caption, "empty caption");
    check_balance();
    auto tree = parse_tree();
    if (pos_ != tokens_.size())
      throw CaptionError(CaptionErrc::trailing_input,
                         "trailing input at token " + std::to_string(pos_) + " '" + tokens_[pos_].text() + "'");
    return tree;
  }

 private:
  using Kind = CaptionToken::Kind;

  void check_balance() const {
    long depth = 0;
    for (const auto& t : tokens_) {
      if (t.kind == Kind::open_brace) ++depth;
      if (t.kind == Kind::close_brace && --depth < 0)
        throw CaptionError(CaptionErrc::unbalanced_braces, "closing brace without a matching opening brace");
    }
    if (depth != 0) throw CaptionError(CaptionErrc::unbalanced_braces, "unclosed brace");
  }

  DecompositionTree parse_tree() {
    if (pos_ >= tokens_.size()) throw CaptionError(CaptionErrc::malformed_structure, "unexpected end of caption");
    const auto& tok = tokens_[pos_];
    switch (tok.kind) {
      case Kind::radical:
        ++pos_;
        return DecompositionTree::leaf(tok.radical);
      case Kind::structure:
        return parse_internal();
      default:
        throw CaptionError(CaptionErrc::malformed_structure,
                           "unexpected '" + tok.text() + "' at token " + std::to_string(pos_));
    }
  }

  DecompositionTree parse_internal() {
    const StructureOp op = tokens_[pos_++].op;
    if (pos_ >= tokens_.size() || tokens_[pos_].kind != Kind::open_brace)
      throw CaptionError(CaptionErrc::malformed_structure,
                         "structure '" + std::string(op_code(op)) + "' not followed by '{'");
    ++pos_;
    std::vector<DecompositionTree> children;
    while (pos_ < tokens_.size() && tokens_[pos_].kind != Kind::close_brace) children.push_back(parse_tree());
    // Balance was checked up front, so the closing brace exists.
    ++pos_;
    if (children.size() < 2)
      throw CaptionError(CaptionErrc::arity_error, "structure '" + std::string(op_code(op)) + "' has " +
                                                       std::to_string(children.size()) + " child(ren), needs >= 2");
    return DecompositionTree::internal(op, std::move(children));
  }

  std::span<const CaptionToken> tokens_;
  std::size_t pos_ = 0;
};

void serialize_into(const DecompositionTree& tree, std::string& out) {
  if (!out.empty()) out += ' ';
  if (tree.is_leaf()) {
    out += tree.radical();
    return;
  }
  out += op_code(tree.op());
  out += " {";
  for (const auto& child : tree.children()) serialize_into(child, out);
  out += " }";
}

}  // namespace

const char* to_string(CaptionErrc code) {
  switch (code) {
    case CaptionErrc::empty_caption: return "EmptyCaption";
    case CaptionErrc::invalid_token: return "InvalidToken";
    case CaptionErrc::unbalanced_braces: return "UnbalancedBraces";
    case CaptionErrc::malformed_structure: return "MalformedStructure";
    case CaptionErrc::arity_error: return "ArityError";
    case CaptionErrc::trailing_input: return "TrailingInput";
    case CaptionErrc::out_of_vocabulary: return "OutOfVocabulary";
    case CaptionErrc::bad_vocabulary_file: return "BadVocabularyFile";
  }
  return "?";
}

std::span<const StructureOp> all_structure_ops() { return kOps; }

std::string_view op_code(StructureOp op) { return kCodes[static_cast<std::size_t>(op)]; }

std::optional<StructureOp> op_from_code(std::string_view code) {
  for (std::size_t i = 0; i < kCodes.size(); ++i)
    if (kCodes[i] == code) return kOps[i];
  return std::nullopt;
}

std::string CaptionToken::text() const {
  switch (kind) {
    case Kind::radical: return radical;
    case Kind::structure: return std::string(op_code(op));
    case Kind::open_brace: return std::string(kOpenBrace);
    case Kind::close_brace: return std::string(kCloseBrace);
    case Kind::start: return std::string(kStartToken);
    case Kind::end: return std::string(kEndToken);
  }
  return {};
}

DecompositionTree DecompositionTree::leaf(std::string radical) {
  if (radical.empty() || std::any_of(radical.begin(), radical.end(),
                                     [](char c) { return is_space(c) || c == '{' || c == '}'; }))
    throw CaptionError(CaptionErrc::invalid_token, "invalid radical id '" + radical + "'");
  DecompositionTree t;
  t.radical_ = std::move(radical);
  return t;
}

DecompositionTree DecompositionTree::internal(StructureOp op, std::vector<DecompositionTree> children) {
  if (children.size() < 2)
    throw CaptionError(CaptionErrc::arity_error, "structure node needs at least two children");
  DecompositionTree t;
  t.op_ = op;
  t.children_ = std::move(children);
  return t;
}

int DecompositionTree::depth() const {
  int d = 0;
  for (const auto& c : children_) d = std::max(d, c.depth() + 1);
  return d;
}

std::size_t DecompositionTree::leaf_count() const {
  if (is_leaf()) return 1;
  std::size_t n = 0;
  for (const auto& c : children_) n += c.leaf_count();
  return n;
}

std::vector<CaptionToken> tokenize(std::string_view caption) {
  std::vector<CaptionToken> tokens;
  std::size_t i = 0;
  while (i < caption.size()) {
    while (i < caption.size() && is_space(caption[i])) ++i;
    std::size_t j = i;
    while (j < caption.size() && !is_space(caption[j])) ++j;
    if (j == i) break;
    const std::string_view word = caption.substr(i, j - i);
    i = j;

    using Kind = CaptionToken::Kind;
    if (word == kOpenBrace) {
      tokens.push_back(CaptionToken::make(Kind::open_brace));
    } else if (word == kCloseBrace) {
      tokens.push_back(CaptionToken::make(Kind::close_brace));
    } else if (auto op = op_from_code(word)) {
      tokens.push_back(CaptionToken::make_structure(*op));
    } else if (word == kStartToken) {
      tokens.push_back(CaptionToken::make(Kind::start));
    } else if (word == kEndToken) {
      tokens.push_back(CaptionToken::make(Kind::end));
    } else {
      if (word.find_first_of("{}") != std::string_view::npos)
        throw CaptionError(CaptionErrc::invalid_token, "brace inside word '" + std::string(word) + "'");
      tokens.push_back(CaptionToken::make_radical(std::string(word)));
    }
  }
  if (tokens.empty()) throw CaptionError(CaptionErrc::empty_caption, "empty caption");
  return tokens;
}

DecompositionTree parse(std::span<const CaptionToken> tokens) { return Parser(tokens).run(); }

std::string serialize(const DecompositionTree& tree) {
  std::string out;
  serialize_into(tree, out);
  return out;
}

std::string canonicalize(std::string_view caption) { return serialize(parse_caption(caption)); }

Vocabulary::Vocabulary(std::vector<std::string> tokens) : index_to_token_(std::move(tokens)) {
  token_to_index_.reserve(index_to_token_.size());
  for (std::size_t i = 0; i < index_to_token_.size(); ++i) {
    if (!token_to_index_.emplace(index_to_token_[i], i).second)
      throw CaptionError(CaptionErrc::bad_vocabulary_file, "duplicate vocabulary token '" + index_to_token_[i] + "'");
  }
}

const std::string& Vocabulary::token(std::size_t index) const {
  if (index >= index_to_token_.size())
    throw CaptionError(CaptionErrc::out_of_vocabulary, "vocabulary index " + std::to_string(index) + " out of range");
  return index_to_token_[index];
}

std::optional<std::size_t> Vocabulary::find(std::string_view token) const {
  auto it = token_to_index_.find(std::string(token));
  if (it == token_to_index_.end()) return std::nullopt;
  return it->second;
}

std::size_t Vocabulary::index_of(std::string_view token) const {
  if (auto i = find(token)) return *i;
  throw CaptionError(CaptionErrc::out_of_vocabulary, "token '" + std::string(token) + "' not in vocabulary");
}

Vocabulary build_vocab(std::span<const std::string> corpus) {
  std::set<std::string> rest;
  for (auto code : kCodes) rest.emplace(code);
  rest.emplace(kOpenBrace);
  rest.emplace(kCloseBrace);
  for (const auto& caption : corpus)
    for (const auto& tok : tokenize(caption))
      if (tok.kind == CaptionToken::Kind::radical) rest.insert(tok.radical);

  std::vector<std::string> tokens{std::string(kStartToken), std::string(kEndToken)};
  tokens.insert(tokens.end(), rest.begin(), rest.end());
  return Vocabulary(std::move(tokens));
}

std::vector<std::size_t> encode_caption(std::string_view caption, const Vocabulary& vocab) {
  const auto tokens = tokenize(caption);
  std::vector<std::size_t> out;
  out.reserve(tokens.size() + 2);
  out.push_back(vocab.start_index());
  for (const auto& t : tokens) out.push_back(vocab.index_of(t.text()));
  out.push_back(vocab.end_index());
  return out;
}

std::string decode_indices(std::span<const std::size_t> indices, const Vocabulary& vocab) {
  const std::size_t start = vocab.start_index();
  const std::size_t end = vocab.end_index();
  std::string out;
  for (std::size_t k = 0; k < indices.size(); ++k) {
    if (k == 0 && indices[k] == start) continue;
    if (indices[k] == end) break;
    if (!out.empty()) out += ' ';
    out += vocab.token(indices[k]);
  }
  return out;
}

std::set<std::string> content_tokens(std::string_view caption) {
  std::set<std::string> out;
  for (const auto& t : tokenize(caption))
    if (t.kind == CaptionToken::Kind::radical || t.kind == CaptionToken::Kind::structure) out.insert(t.text());
  return out;
}

ZeroShotReport zero_shot_check(std::span<const std::string> train, std::span<const std::string> test) {
  std::set<std::string> seen;
  for (const auto& c : train) seen.merge(content_tokens(c));
  ZeroShotReport report;
  for (const auto& c : test)
    for (auto& t : content_tokens(c))
      if (!seen.contains(t)) report.missing_tokens.insert(t);
  report.ok = report.missing_tokens.empty();
  return report;
}

std::vector<std::string> read_corpus(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open caption corpus " + path.string());
  std::vector<std::string> out;
  std::string line;
  while (std::getline(in, line)) {
    auto first = std::find_if_not(line.begin(), line.end(), is_space);
    if (first == line.end() || *first == '#') continue;
    auto last = std::find_if_not(line.rbegin(), line.rend(), is_space).base();
    out.emplace_back(first, last);
  }
  return out;
}

void write_vocab(const Vocabulary& vocab, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write vocabulary " + path.string());
  for (std::size_t i = 0; i < vocab.size(); ++i) out << i << '\t' << vocab.token(i) << '\n';
}

Vocabulary read_vocab(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw CaptionError(CaptionErrc::bad_vocabulary_file, "cannot open vocabulary " + path.string());
  std::vector<std::string> tokens;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto tab = line.find('\t');
    std::size_t index = 0;
    std::istringstream idx(line.substr(0, tab));
    if (tab == std::string::npos || !(idx >> index) || index != tokens.size())
      throw CaptionError(CaptionErrc::bad_vocabulary_file,
                         "vocabulary line " + std::to_string(tokens.size() + 1) + " is not 'index<TAB>token' in order");
    tokens.push_back(line.substr(tab + 1));
  }
  Vocabulary vocab(std::move(tokens));
  for (auto required : {kStartToken, kEndToken, kOpenBrace, kCloseBrace})
    if (!vocab.contains(required))
      throw CaptionError(CaptionErrc::bad_vocabulary_file, "vocabulary lacks '" + std::string(required) + "'");
  for (auto code : kCodes)
    if (!vocab.contains(code))
      throw CaptionError(CaptionErrc::bad_vocabulary_file, "vocabulary lacks '" + std::string(code) + "'");
  return vocab;
}

}  // namespace ran::caption
