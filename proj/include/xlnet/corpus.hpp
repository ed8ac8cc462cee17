// Copyright 2026 The xlnet-desk Authors.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

// Tokenization, vocabulary files, two-segment packing and stream windowing.

#pragma once

#include <algorithm>
#include <array>
#include <cstdint>
#include <fstream>
#include <istream>
#include <map>
#include <ostream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "xlnet/rng.hpp"

namespace xlnet {

enum class TokenizerMode { kChar, kWord };

inline TokenizerMode parse_tokenizer_mode(std::string_view s) {
  if (s == "char") return TokenizerMode::kChar;
  if (s == "word") return TokenizerMode::kWord;
  throw std::invalid_argument("unknown tokenizer '" + std::string(s) + "' (expected char or word)");
}

namespace detail {

/// Splits UTF-8 text into code points. Invalid lead bytes become one-byte
/// tokens so that no input is ever dropped.
inline std::vector<std::string> utf8_chars(std::string_view text) {
  std::vector<std::string> out;
  out.reserve(text.size());
  for (std::size_t i = 0; i < text.size();) {
    const auto c = static_cast<unsigned char>(text[i]);
    std::size_t len = 1;
    if (c >= 0xF0) len = 4;
    else if (c >= 0xE0) len = 3;
    else if (c >= 0xC0) len = 2;
    len = std::min(len, text.size() - i);
    out.emplace_back(text.substr(i, len));
    i += len;
  }
  return out;
}

inline std::vector<std::string> split_words(std::string_view text) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : text) {
    if (c == ' ' || c == '\n' || c == '\t' || c == '\r') {
      if (!cur.empty()) out.push_back(std::move(cur));
      cur.clear();
    } else {
      cur.push_back(c);
    }
  }
  if (!cur.empty()) out.push_back(std::move(cur));
  return out;
}

inline std::string escape_token(const std::string& t) {
  std::string out;
  for (char c : t) {
    switch (c) {
      case '\n': out += "\\n"; break;
      case '\t': out += "\\t"; break;
      case '\r': out += "\\r"; break;
      case ' ': out += "\\s"; break;
      case '\\': out += "\\\\"; break;
      default: out.push_back(c);
    }
  }
  return out;
}

inline std::string unescape_token(const std::string& t) {
  std::string out;
  for (std::size_t i = 0; i < t.size(); ++i) {
    if (t[i] != '\\' || i + 1 == t.size()) {
      out.push_back(t[i]);
      continue;
    }
    switch (t[++i]) {
      case 'n': out.push_back('\n'); break;
      case 't': out.push_back('\t'); break;
      case 'r': out.push_back('\r'); break;
      case 's': out.push_back(' '); break;
      case '\\': out.push_back('\\'); break;
      default: throw std::runtime_error("vocab: bad escape '\\" + std::string(1, t[i]) + "'");
    }
  }
  return out;
}

}  // namespace detail

/// Token <-> id table. Ids 0..4 are reserved for MASK, CLS, SEP, UNK, PAD.
class Vocab {
 public:
  static constexpr int kMask = 0;
  static constexpr int kCls = 1;
  static constexpr int kSep = 2;
  static constexpr int kUnk = 3;
  static constexpr int kPad = 4;
  static constexpr int kNumReserved = 5;

  explicit Vocab(TokenizerMode mode = TokenizerMode::kChar) : mode_(mode) {
    tokens_ = {"<mask>", "<cls>", "<sep>", "<unk>", "<pad>"};
  }

  /// Frequency-ranked vocabulary, at most `max_size` entries including the
  /// reserved ones. Ties break on the token's byte order.
  static Vocab build(std::string_view text, std::size_t max_size, TokenizerMode mode = TokenizerMode::kChar) {
    if (text.empty()) throw std::invalid_argument("build_vocab: empty text");
    if (max_size < kNumReserved) throw std::invalid_argument("build_vocab: max_size below reserved count");
    std::map<std::string, std::size_t> counts;
    for (auto& t : tokenize(text, mode)) ++counts[t];
    std::vector<std::pair<std::string, std::size_t>> ranked(counts.begin(), counts.end());
    std::stable_sort(ranked.begin(), ranked.end(),
                     [](const auto& a, const auto& b) { return a.second > b.second; });
    Vocab v(mode);
    for (const auto& [tok, n] : ranked) {
      if (v.tokens_.size() >= max_size) break;
      v.add(tok);
    }
    return v;
  }

  static std::vector<std::string> tokenize(std::string_view text, TokenizerMode mode) {
    return mode == TokenizerMode::kChar ? detail::utf8_chars(text) : detail::split_words(text);
  }

  std::vector<int> encode(std::string_view text) const {
    std::vector<int> ids;
    for (const auto& t : tokenize(text, mode_)) ids.push_back(id(t));
    return ids;
  }

  std::string decode(const std::vector<int>& ids) const {
    std::string out;
    for (std::size_t i = 0; i < ids.size(); ++i) {
      if (mode_ == TokenizerMode::kWord && i) out.push_back(' ');
      out += token(ids[i]);
    }
    return out;
  }

  int id(const std::string& tok) const {
    auto it = index_.find(tok);
    return it == index_.end() ? kUnk : it->second;
  }

  bool contains(const std::string& tok) const { return index_.count(tok) != 0; }

  const std::string& token(int id) const {
    if (id < 0 || static_cast<std::size_t>(id) >= tokens_.size()) {
      throw std::out_of_range("vocab: id " + std::to_string(id) + " out of range");
    }
    return tokens_[static_cast<std::size_t>(id)];
  }

  static bool is_special(int id) { return id == kMask || id == kCls || id == kSep || id == kPad; }

  std::size_t size() const { return tokens_.size(); }
  TokenizerMode mode() const { return mode_; }

  /// One token per line; line number is the id.
  void save(std::ostream& os) const {
    for (const auto& t : tokens_) os << detail::escape_token(t) << '\n';
  }

  void save(const std::string& path) const {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw std::runtime_error("cannot write vocab file " + path);
    save(os);
  }

  static Vocab load(std::istream& is, TokenizerMode mode = TokenizerMode::kChar) {
    Vocab v(mode);
    std::string line;
    std::size_t n = 0;
    while (std::getline(is, line)) {
      if (n < kNumReserved) {
        if (line != v.tokens_[n]) {
          throw std::runtime_error("vocab file line " + std::to_string(n + 1) + ": expected reserved entry '" +
                                   v.tokens_[n] + "', got '" + line + "'");
        }
        ++n;
        continue;
      }
      ++n;
      v.add(detail::unescape_token(line));
    }
    if (n < kNumReserved) throw std::runtime_error("vocab file is missing reserved entries");
    return v;
  }

  static Vocab load(const std::string& path, TokenizerMode mode = TokenizerMode::kChar) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("cannot read vocab file " + path);
    return load(is, mode);
  }

  bool operator==(const Vocab& o) const { return mode_ == o.mode_ && tokens_ == o.tokens_; }

 private:
  void add(const std::string& tok) {
    index_.emplace(tok, static_cast<int>(tokens_.size()));
    tokens_.push_back(tok);
  }

  TokenizerMode mode_;
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, int> index_;
};

/// [CLS, A, SEP, B, SEP] with segment ids 0 for CLS, A and the first SEP and
/// 1 for B and the final SEP.
struct PackedPair {
  std::vector<int> tokens;
  std::vector<int> segments;
  /// Document that memory may be shared with, or kNoContext for pairs drawn
  /// from two different documents.
  long doc_id = kNoContext;
  bool same_context = false;

  static constexpr long kNoContext = -1;
};

inline PackedPair pack_two_segments(std::vector<int> a, std::vector<int> b, std::size_t seq_len,
                                    long doc_id = PackedPair::kNoContext, bool same_context = false) {
  if (seq_len < 5) throw std::invalid_argument("pack_two_segments: seq_len must be at least 5");
  if (a.empty() || b.empty()) throw std::invalid_argument("pack_two_segments: both segments must be non-empty");
  while (a.size() + b.size() + 3 > seq_len) {
    if (a.size() >= b.size()) a.pop_back();
    else b.pop_back();
  }
  PackedPair p;
  p.tokens.push_back(Vocab::kCls);
  p.tokens.insert(p.tokens.end(), a.begin(), a.end());
  p.tokens.push_back(Vocab::kSep);
  p.segments.assign(p.tokens.size(), 0);
  p.tokens.insert(p.tokens.end(), b.begin(), b.end());
  p.tokens.push_back(Vocab::kSep);
  p.segments.resize(p.tokens.size(), 1);
  p.same_context = same_context;
  p.doc_id = same_context ? doc_id : PackedPair::kNoContext;
  return p;
}

/// Samples two segments: half the time consecutive pieces of one document,
/// otherwise pieces of two different documents.
inline PackedPair sample_pair(const std::vector<std::vector<int>>& documents, std::size_t seq_len, Rng& rng) {
  if (documents.empty()) throw std::invalid_argument("sample_pair: no documents");
  const std::size_t half = (seq_len - 3) / 2;
  auto piece = [&](const std::vector<int>& doc, std::size_t start) {
    const std::size_t end = std::min(doc.size(), start + half);
    return std::vector<int>(doc.begin() + static_cast<long>(start), doc.begin() + static_cast<long>(end));
  };
  const std::size_t d = rng.below(documents.size());
  const auto& doc = documents[d];
  const bool same = documents.size() == 1 || rng.bernoulli(0.5);
  if (same && doc.size() >= 2) {
    const std::size_t max_start = doc.size() > 2 * half ? doc.size() - 2 * half : 0;
    const std::size_t start = rng.below(max_start + 1);
    const std::size_t mid = std::min(start + std::max<std::size_t>(1, std::min(half, (doc.size() - start) / 2)),
                                     doc.size() - 1);
    std::vector<int> a(doc.begin() + static_cast<long>(start), doc.begin() + static_cast<long>(mid));
    std::vector<int> b = piece(doc, mid);
    return pack_two_segments(std::move(a), std::move(b), seq_len, static_cast<long>(d), true);
  }
  std::size_t e = rng.below(documents.size() - 1);
  if (e >= d) ++e;
  const auto& other = documents[e];
  auto a = piece(doc, rng.below(doc.size() > half ? doc.size() - half + 1 : 1));
  auto b = piece(other, rng.below(other.size() > half ? other.size() - half + 1 : 1));
  if (a.empty() || b.empty()) throw std::invalid_argument("sample_pair: empty document");
  return pack_two_segments(std::move(a), std::move(b), seq_len);
}

/// A fixed-length slice of a token stream. Positions are 1-based offsets in
/// the stream, so consecutive windows continue each other's numbering.
struct Window {
  std::vector<int> tokens;
  std::vector<long> positions;
  std::size_t valid = 0;  // tokens before padding
  bool padded = false;
};

/// Non-overlapping windows; a short final window is padded with `pad_id`
/// and flagged.
inline std::vector<Window> stream_windows(const std::vector<int>& stream, std::size_t seq_len, std::size_t stride,
                                          int pad_id = Vocab::kPad) {
  if (seq_len == 0) throw std::invalid_argument("stream_windows: seq_len must be positive");
  if (stride != seq_len) throw std::invalid_argument("stream_windows: stride must equal seq_len");
  std::vector<Window> out;
  for (std::size_t start = 0; start < stream.size() || (out.empty() && start == 0); start += stride) {
    Window w;
    w.valid = std::min(seq_len, stream.size() - start);
    w.padded = w.valid < seq_len;
    w.tokens.assign(stream.begin() + static_cast<long>(start), stream.begin() + static_cast<long>(start + w.valid));
    w.tokens.resize(seq_len, pad_id);
    for (std::size_t i = 0; i < seq_len; ++i) w.positions.push_back(static_cast<long>(start + i + 1));
    out.push_back(std::move(w));
    if (stream.empty()) break;
  }
  return out;
}

/// Splits text into documents at blank lines.
inline std::vector<std::string> split_documents(std::string_view text) {
  std::vector<std::string> docs;
  std::string cur;
  std::size_t i = 0;
  while (i < text.size()) {
    const std::size_t nl = text.find('\n', i);
    const std::string_view line = text.substr(i, nl == std::string_view::npos ? std::string_view::npos : nl - i);
    if (line.empty()) {
      if (!cur.empty()) docs.push_back(std::move(cur));
      cur.clear();
    } else {
      cur.append(line);
      cur.push_back('\n');
    }
    if (nl == std::string_view::npos) break;
    i = nl + 1;
  }
  if (!cur.empty()) docs.push_back(std::move(cur));
  return docs;
}

inline std::string read_text_file(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot read " + path);
  std::ostringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

// ------------------------------------------------------------ synthetic data

/// English-like text from a small phrase grammar, split into paragraphs by
/// blank lines. Deterministic in `seed`.
inline std::string synthetic_corpus(std::size_t bytes, std::uint64_t seed) {
  static constexpr std::array kDet = {"the", "a", "this", "that", "every", "one"};
  static constexpr std::array kAdj = {"small", "old",   "green", "quiet", "bright", "heavy", "young",
                                      "cold",  "happy", "dark",  "tall",  "strange", "gentle", "lazy"};
  static constexpr std::array kNoun = {"river", "house", "dog",    "teacher", "garden", "city",  "boat",
                                       "child", "forest", "letter", "window", "farmer", "horse", "song",
                                       "market", "bridge", "lamp",  "road",   "king",   "bird"};
  static constexpr std::array kVerb = {"sees",   "finds",  "follows", "carries", "builds", "paints",
                                       "watches", "opens", "remembers", "hears", "keeps",  "visits"};
  static constexpr std::array kIntr = {"sleeps", "waits", "sings", "runs", "falls", "smiles", "rests"};
  static constexpr std::array kPrep = {"near", "under", "behind", "across", "beside", "inside"};
  static constexpr std::array kAdv = {"slowly", "often", "never", "quietly", "again", "today"};
  static constexpr std::array kName = {"anna", "boris", "clara", "david", "elena", "felix", "greta", "jonas", "zara"};

  Rng rng(seed);
  auto pick = [&](const auto& arr) { return std::string(arr[rng.below(arr.size())]); };
  auto noun_phrase = [&] {
    if (rng.bernoulli(0.15)) return pick(kName);
    std::string np = pick(kDet) + " ";
    if (rng.bernoulli(0.5)) np += pick(kAdj) + " ";
    return np + pick(kNoun);
  };
  auto sentence = [&] {
    std::string s = noun_phrase() + " ";
    if (rng.bernoulli(0.3)) s += pick(kAdv) + " ";
    if (rng.bernoulli(0.35)) {
      s += pick(kIntr);
    } else {
      s += pick(kVerb) + " " + noun_phrase();
    }
    if (rng.bernoulli(0.4)) s += " " + pick(kPrep) + " " + noun_phrase();
    if (rng.bernoulli(0.2)) s += " and " + noun_phrase() + " " + pick(kIntr);
    return s + ".";
  };
  std::string out;
  out.reserve(bytes + 256);
  while (out.size() < bytes) {
    const std::size_t n_sent = 3 + rng.below(6);
    for (std::size_t i = 0; i < n_sent; ++i) {
      if (i) out.push_back(' ');
      out += sentence();
    }
    out += "\n\n";
  }
  return out;
}

/// One example of the segment-overlap classification task.
struct OverlapExample {
  int label = 0;  // 1 when segment B shares a character with segment A
  std::string a;
  std::string b;
};

/// Balanced examples over `alphabet`: A holds `a_len` distinct characters,
/// B holds `b_len`. Positive examples plant exactly one of A's characters in
/// B; negatives draw B from the characters A does not use.
inline std::vector<OverlapExample> make_overlap_task(std::size_t n, std::size_t a_len, std::size_t b_len,
                                                     std::string_view alphabet, std::uint64_t seed) {
  if (a_len == 0 || b_len == 0) throw std::invalid_argument("make_overlap_task: segments must be nonempty");
  if (alphabet.size() <= a_len) throw std::invalid_argument("make_overlap_task: alphabet too small");
  Rng rng(seed);
  std::vector<OverlapExample> out;
  for (std::size_t i = 0; i < n; ++i) {
    std::string pool(alphabet);
    for (std::size_t k = pool.size(); k > 1; --k) std::swap(pool[k - 1], pool[rng.below(k)]);
    OverlapExample ex;
    ex.label = static_cast<int>(i % 2);
    ex.a = pool.substr(0, a_len);
    const std::string rest = pool.substr(a_len);
    for (std::size_t k = 0; k < b_len; ++k) ex.b.push_back(rest[rng.below(rest.size())]);
    if (ex.label == 1) ex.b[rng.below(b_len)] = ex.a[rng.below(a_len)];
    out.push_back(std::move(ex));
  }
  return out;
}

inline void write_overlap_tsv(std::ostream& os, const std::vector<OverlapExample>& examples) {
  for (const auto& e : examples) os << e.label << '\t' << e.a << '\t' << e.b << '\n';
}

inline std::vector<OverlapExample> read_labeled_tsv(std::istream& is) {
  std::vector<OverlapExample> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty()) continue;
    const auto t1 = line.find('\t');
    const auto t2 = t1 == std::string::npos ? std::string::npos : line.find('\t', t1 + 1);
    if (t2 == std::string::npos) {
      throw std::runtime_error("labeled TSV line " + std::to_string(lineno) + ": expected label<TAB>A<TAB>B");
    }
    OverlapExample e;
    e.label = std::stoi(line.substr(0, t1));
    e.a = line.substr(t1 + 1, t2 - t1 - 1);
    e.b = line.substr(t2 + 1);
    out.push_back(std::move(e));
  }
  return out;
}

}  // namespace xlnet
