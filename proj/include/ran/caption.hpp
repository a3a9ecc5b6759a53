#pragma once

// Radical-decomposition captions: tokens, trees, vocabulary.
//
// A caption linearizes a decomposition tree, e.g. "stl { r1 d { r2 r3 } }".
// Every structure operator is followed by a brace-delimited list of at
// least two children.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <set>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace ran::caption {

enum class CaptionErrc {
  empty_caption,
  invalid_token,
  unbalanced_braces,
  malformed_structure,
  arity_error,
  trailing_input,
  out_of_vocabulary,
  bad_vocabulary_file,
};

const char* to_string(CaptionErrc code);

class CaptionError : public std::runtime_error {
 public:
  CaptionError(CaptionErrc code, const std::string& what)
      : std::runtime_error(what), code_(code) {}
  CaptionErrc code() const noexcept { return code_; }

 private:
  CaptionErrc code_;
};

/// The ten spatial structures between radicals.
enum class StructureOp : std::uint8_t { a, d, stl, str, sbl, sl, sb, st, s, w };

inline constexpr std::size_t kNumStructureOps = 10;

std::span<const StructureOp> all_structure_ops();
std::string_view op_code(StructureOp op);
std::optional<StructureOp> op_from_code(std::string_view code);

inline constexpr std::string_view kOpenBrace = "{";
inline constexpr std::string_view kCloseBrace = "}";
inline constexpr std::string_view kStartToken = "<s>";
inline constexpr std::string_view kEndToken = "</s>";

struct CaptionToken {
  enum class Kind : std::uint8_t { radical, structure, open_brace, close_brace, start, end };

  Kind kind = Kind::radical;
  StructureOp op = StructureOp::a;  // valid when kind == structure
  std::string radical;              // valid when kind == radical

  static CaptionToken make_radical(std::string id) { return {Kind::radical, StructureOp::a, std::move(id)}; }
  static CaptionToken make_structure(StructureOp op) { return {Kind::structure, op, {}}; }
  static CaptionToken make(Kind kind) { return {kind, StructureOp::a, {}}; }

  /// Surface form of the token ("r1", "stl", "{", "<s>", ...).
  std::string text() const;

  bool operator==(const CaptionToken&) const = default;
};

class DecompositionTree {
 public:
  static DecompositionTree leaf(std::string radical);
  static DecompositionTree internal(StructureOp op, std::vector<DecompositionTree> children);

  bool is_leaf() const noexcept { return children_.empty(); }
  const std::string& radical() const noexcept { return radical_; }
  StructureOp op() const noexcept { return op_; }
  std::span<const DecompositionTree> children() const noexcept { return children_; }

  /// Leaves have depth 0.
  int depth() const;
  std::size_t leaf_count() const;

  bool operator==(const DecompositionTree&) const = default;

 private:
  StructureOp op_ = StructureOp::a;
  std::string radical_;
  std::vector<DecompositionTree> children_;
};

/// Splits on any whitespace run. Braces, structure codes and the two control
/// words are classified first; any other word is a radical.
std::vector<CaptionToken> tokenize(std::string_view caption);

/// tree ::= radical | op "{" tree tree+ "}"; the whole input must be consumed.
DecompositionTree parse(std::span<const CaptionToken> tokens);

inline DecompositionTree parse_caption(std::string_view caption) { return parse(tokenize(caption)); }

/// Canonical single-space form.
std::string serialize(const DecompositionTree& tree);

/// serialize(parse(tokenize(caption))).
std::string canonicalize(std::string_view caption);

class Vocabulary {
 public:
  Vocabulary() = default;
  /// Takes the full ordered token list; index i maps to tokens[i].
  explicit Vocabulary(std::vector<std::string> tokens);

  std::size_t size() const noexcept { return index_to_token_.size(); }
  const std::string& token(std::size_t index) const;
  std::optional<std::size_t> find(std::string_view token) const;
  /// Throws out_of_vocabulary.
  std::size_t index_of(std::string_view token) const;
  bool contains(std::string_view token) const { return find(token).has_value(); }

  std::size_t start_index() const { return index_of(kStartToken); }
  std::size_t end_index() const { return index_of(kEndToken); }

  const std::vector<std::string>& tokens() const noexcept { return index_to_token_; }

  bool operator==(const Vocabulary& other) const { return index_to_token_ == other.index_to_token_; }

 private:
  std::vector<std::string> index_to_token_;
  std::unordered_map<std::string, std::size_t> token_to_index_;
};

/// Control tokens first, then every other token in sorted order.
Vocabulary build_vocab(std::span<const std::string> corpus);

/// Start + caption tokens + End.
std::vector<std::size_t> encode_caption(std::string_view caption, const Vocabulary& vocab);

/// Joins the tokens between Start and End (either may be absent) with single spaces.
std::string decode_indices(std::span<const std::size_t> indices, const Vocabulary& vocab);

struct ZeroShotReport {
  bool ok = true;
  std::set<std::string> missing_tokens;
};

/// ok iff every radical and structure code used in `test` also occurs in `train`.
ZeroShotReport zero_shot_check(std::span<const std::string> train, std::span<const std::string> test);

/// Radical and structure-code words of a caption.
std::set<std::string> content_tokens(std::string_view caption);

// Files.
std::vector<std::string> read_corpus(const std::filesystem::path& path);
void write_vocab(const Vocabulary& vocab, const std::filesystem::path& path);
Vocabulary read_vocab(const std::filesystem::path& path);

}  // namespace ran::caption
