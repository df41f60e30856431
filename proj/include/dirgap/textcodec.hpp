#pragma once

// Character-level tokenization and the symmetric "x: S y: T" prompt.

#include <array>
#include <cstdint>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "dirgap/errors.hpp"
#include "dirgap/mapgen.hpp"

namespace dirgap {

enum class Direction { Forward, Inverse };

inline std::string_view to_string(Direction d) {
  return d == Direction::Forward ? "forward" : "inverse";
}

inline Direction parse_direction(std::string_view s) {
  if (s == "forward" || s == "fwd" || s == "a2b") return Direction::Forward;
  if (s == "inverse" || s == "inv" || s == "b2a") return Direction::Inverse;
  throw ConfigError("unknown direction: " + std::string(s));
}

// Source and target strings of a pair for the given direction.
inline std::pair<const std::string&, const std::string&> oriented(const Pair& p,
                                                                   Direction d) {
  if (d == Direction::Forward) return {p.a, p.b};
  return {p.b, p.a};
}

class Vocab {
 public:
  static constexpr std::string_view kPadName = "<pad>";
  static constexpr std::string_view kSpaceName = "<space>";

  // Σ in order, then any of ' ', ':', 'x', 'y' not already in Σ, then PAD.
  explicit Vocab(const StringSpec& spec) {
    for (char c : spec.alphabet) add(c);
    for (char c : {' ', ':', 'x', 'y'})
      if (id_of_[static_cast<unsigned char>(c)] < 0) add(c);
    pad_id_ = static_cast<int>(chars_.size());
  }

  int size() const { return pad_id_ + 1; }
  int pad_id() const { return pad_id_; }

  int id(char c) const {
    const int i = id_of_[static_cast<unsigned char>(c)];
    if (i < 0) throw EncodingError(std::string("character '") + c + "' not in vocabulary");
    return i;
  }

  bool is_pad(int id) const { return id == pad_id_; }

  char symbol(int id) const {
    if (id < 0 || id >= pad_id_)
      throw DecodeError("token id " + std::to_string(id) + " has no character");
    return chars_[static_cast<std::size_t>(id)];
  }

  // One symbol per line; space and PAD use bracketed names.
  std::string serialize() const {
    std::string out;
    for (char c : chars_) {
      out += c == ' ' ? std::string(kSpaceName) : std::string(1, c);
      out += '\n';
    }
    out += kPadName;
    out += '\n';
    return out;
  }

  std::vector<std::string> symbols() const {
    std::vector<std::string> out;
    std::istringstream is(serialize());
    for (std::string line; std::getline(is, line);) out.push_back(line);
    return out;
  }

 private:
  static constexpr std::array<int, 256> make_empty_table() {
    std::array<int, 256> t{};
    t.fill(-1);
    return t;
  }

  void add(char c) {
    id_of_[static_cast<unsigned char>(c)] = static_cast<int>(chars_.size());
    chars_.push_back(c);
  }

  std::vector<char> chars_;
  std::array<int, 256> id_of_ = make_empty_table();
  int pad_id_ = 0;
};

struct TaskInstance {
  std::vector<std::int32_t> input_ids;  // right-padded to max_len
  std::vector<std::uint8_t> loss_mask;  // 1 only on target-span positions
  Direction direction = Direction::Forward;
  int prompt_len = 0;  // tokens up to and including the space after "y:"
  int target_len = 0;
};

/// "x: {src} y: {tgt}" where (src, tgt) = (A, B) forward and (B, A) inverse.
inline std::string render_prompt(const Pair& pair, Direction d) {
  const auto [src, tgt] = oriented(pair, d);
  std::string out;
  out.reserve(src.size() + tgt.size() + 7);
  out += "x: ";
  out += src;
  out += " y: ";
  out += tgt;
  return out;
}

inline constexpr int kDefaultMaxLen = 32;

inline TaskInstance encode_example(const Pair& pair, Direction d, const Vocab& vocab,
                                   int max_len = kDefaultMaxLen) {
  const std::string text = render_prompt(pair, d);
  if (static_cast<int>(text.size()) > max_len)
    throw EncodingError("pair (" + pair.a + ", " + pair.b + ") renders to " +
                        std::to_string(text.size()) + " tokens, exceeding max_len " +
                        std::to_string(max_len));
  const auto [src, tgt] = oriented(pair, d);
  TaskInstance ti;
  ti.direction = d;
  ti.prompt_len = static_cast<int>(src.size()) + 7;
  ti.target_len = static_cast<int>(tgt.size());
  ti.input_ids.assign(static_cast<std::size_t>(max_len), vocab.pad_id());
  ti.loss_mask.assign(static_cast<std::size_t>(max_len), 0);
  for (std::size_t i = 0; i < text.size(); ++i) ti.input_ids[i] = vocab.id(text[i]);
  for (int i = ti.prompt_len; i < ti.prompt_len + ti.target_len; ++i)
    ti.loss_mask[static_cast<std::size_t>(i)] = 1;
  return ti;
}

inline std::vector<std::int32_t> encode_text(std::string_view text, const Vocab& vocab) {
  std::vector<std::int32_t> ids;
  ids.reserve(text.size());
  for (char c : text) ids.push_back(vocab.id(c));
  return ids;
}

// PAD renders as nothing.
inline std::string decode(const std::vector<std::int32_t>& ids, const Vocab& vocab) {
  std::string out;
  for (auto id : ids) {
    if (id < 0 || id >= vocab.size())
      throw DecodeError("unknown token id " + std::to_string(id));
    if (!vocab.is_pad(id)) out += vocab.symbol(id);
  }
  return out;
}

}  // namespace dirgap
