// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <span>
#include <string>
#include <vector>

#include "normlab/core.hpp"
#include "normlab/ops.hpp"

namespace normlab {

using ops::TokenId;

struct TokenStream {
  std::vector<TokenId> ids;
  std::uint32_t vocab_size = 256;
  std::string source;

  std::size_t total_tokens() const { return ids.size(); }

  void validate() const {
    for (std::size_t i = 0; i < ids.size(); ++i)
      if (ids[i] >= vocab_size)
        throw FormatError("token id " + std::to_string(ids[i]) + " at offset " + std::to_string(i) +
                          " is out of range for vocab " + std::to_string(vocab_size));
  }
};

enum class CorpusFormat { raw_bytes, u16_tokens };

// Token file layout (little-endian):
//   magic "NLTK1\0" (6 bytes) | u32 vocab_size | u64 count | count x u16 ids
inline constexpr std::array<char, 6> kTokenMagic = {'N', 'L', 'T', 'K', '1', '\0'};
inline constexpr std::size_t kTokenHeaderBytes = 6 + 4 + 8;

namespace detail {

template <class T>
void put_le(std::string& out, T v) {
  for (std::size_t i = 0; i < sizeof(T); ++i) out.push_back(static_cast<char>((static_cast<std::uint64_t>(v) >> (8 * i)) & 0xff));
}

template <class T>
T get_le(const unsigned char* p) {
  std::uint64_t v = 0;
  for (std::size_t i = 0; i < sizeof(T); ++i) v |= static_cast<std::uint64_t>(p[i]) << (8 * i);
  return static_cast<T>(v);
}

inline std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::string data((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (in.bad()) throw IoError("read failed: " + path.string());
  return data;
}

}  // namespace detail

inline TokenStream from_bytes(std::string_view bytes, std::string source = "bytes") {
  if (bytes.empty()) throw FormatError("empty corpus");
  TokenStream s;
  s.vocab_size = 256;
  s.source = std::move(source);
  s.ids.reserve(bytes.size());
  for (unsigned char c : bytes) s.ids.push_back(c);
  return s;
}

inline TokenStream parse_token_file(std::string_view data, std::string source = "tokens") {
  if (data.size() < kTokenHeaderBytes || std::memcmp(data.data(), kTokenMagic.data(), kTokenMagic.size()) != 0)
    throw FormatError("not a token file (bad magic): " + source);
  const auto* p = reinterpret_cast<const unsigned char*>(data.data());
  TokenStream s;
  s.source = std::move(source);
  s.vocab_size = detail::get_le<std::uint32_t>(p + 6);
  const auto count = detail::get_le<std::uint64_t>(p + 10);
  if (s.vocab_size == 0 || s.vocab_size > 65536) throw FormatError("token file vocab must be in [1, 65536]");
  if (data.size() != kTokenHeaderBytes + 2 * count)
    throw FormatError("token file size does not match its count of " + std::to_string(count));
  if (count == 0) throw FormatError("empty corpus");
  s.ids.resize(count);
  for (std::size_t i = 0; i < count; ++i) s.ids[i] = detail::get_le<std::uint16_t>(p + kTokenHeaderBytes + 2 * i);
  s.validate();
  return s;
}

inline std::string encode_token_file(std::span<const TokenId> ids, std::uint32_t vocab_size) {
  if (vocab_size == 0 || vocab_size > 65536) throw ConfigError("token file vocab must be in [1, 65536]");
  std::string out(kTokenMagic.begin(), kTokenMagic.end());
  detail::put_le<std::uint32_t>(out, vocab_size);
  detail::put_le<std::uint64_t>(out, ids.size());
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] >= vocab_size)
      throw ConfigError("token id " + std::to_string(ids[i]) + " at offset " + std::to_string(i) +
                        " is out of range for vocab " + std::to_string(vocab_size));
    detail::put_le<std::uint16_t>(out, static_cast<std::uint16_t>(ids[i]));
  }
  return out;
}

inline TokenStream ingest(const std::filesystem::path& path, CorpusFormat format) {
  const std::string data = detail::read_file(path);
  if (format == CorpusFormat::raw_bytes) return from_bytes(data, path.filename().string());
  return parse_token_file(data, path.filename().string());
}

struct DataBudget {
  std::size_t train_tokens = 0;
  std::size_t val_tokens = 0;
  std::uint64_t seed = 0;
};

struct Split {
  std::vector<TokenId> ids;
  std::uint64_t hash = 0;

  std::size_t size() const { return ids.size(); }
};

inline std::uint64_t hash_tokens(std::span<const TokenId> ids) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (TokenId t : ids) {
    for (int i = 0; i < 4; ++i) {
      h ^= (t >> (8 * i)) & 0xff;
      h *= 0x100000001b3ULL;
    }
  }
  return h;
}

inline Split make_split(std::vector<TokenId> ids) {
  Split s;
  s.hash = hash_tokens(ids);
  s.ids = std::move(ids);
  return s;
}

// Train is a prefix of the stream; val is the last val_tokens, so every
// budget drawn from one stream shares the same validation set.
inline std::pair<Split, Split> subset(const TokenStream& stream, const DataBudget& budget) {
  const std::size_t n = stream.total_tokens();
  if (budget.train_tokens == 0 || budget.val_tokens == 0) throw ConfigError("budget needs train and val tokens");
  if (budget.train_tokens + budget.val_tokens > n)
    throw ConfigError("budget of " + std::to_string(budget.train_tokens) + " train + " +
                      std::to_string(budget.val_tokens) + " val tokens exceeds the " + std::to_string(n) +
                      " available in " + stream.source);
  auto first = stream.ids.begin();
  return {make_split({first, first + static_cast<std::ptrdiff_t>(budget.train_tokens)}),
          make_split({stream.ids.end() - static_cast<std::ptrdiff_t>(budget.val_tokens), stream.ids.end()})};
}

// B rows of block_size + 1 consecutive tokens (inputs plus shifted targets).
// Offsets are a pure function of (split hash, seed, step).
inline std::vector<TokenId> batches(const Split& split, std::size_t batch_size, std::size_t block_size,
                                    std::uint64_t seed, std::uint64_t step) {
  if (block_size >= split.size())
    throw ConfigError("block_size " + std::to_string(block_size) + " needs a split longer than " +
                      std::to_string(split.size()) + " tokens");
  const std::size_t span = block_size + 1;
  const std::uint64_t positions = split.size() - block_size;
  CounterRng rng(mix64(seed, split.hash), step * batch_size);
  std::vector<TokenId> out(batch_size * span);
  for (std::size_t b = 0; b < batch_size; ++b) {
    const auto off = static_cast<std::size_t>(rng.below(positions));
    std::copy_n(split.ids.begin() + static_cast<std::ptrdiff_t>(off), span, out.begin() + static_cast<std::ptrdiff_t>(b * span));
  }
  return out;
}

// Deterministic English-like text: a Zipf-distributed lexicon of pseudo-words
// with preferred successors, grouped into capitalized, punctuated sentences.
// Used as the default corpus when no data file is given.
class SyntheticCorpus {
 public:
  explicit SyntheticCorpus(std::uint64_t seed = 0, std::size_t lexicon = 3000) : seed_(seed) {
    static constexpr const char* onsets[] = {"b", "c", "d", "f", "g", "h", "j", "k", "l", "m", "n", "p", "r",
                                             "s", "t", "v", "w", "th", "st", "br", "cl", "gr", "pr", "sh"};
    static constexpr const char* nuclei[] = {"a", "e", "i", "o", "u", "ai", "ea", "ou", "io", "ee"};
    static constexpr const char* codas[] = {"", "", "", "n", "r", "s", "t", "l", "nd", "ng", "st", "m"};
    CounterRng rng(mix64(seed, 0x57a7), 0);
    words_.reserve(lexicon);
    for (std::size_t i = 0; i < lexicon; ++i) {
      // frequent words are short
      const std::size_t syl = 1 + (i < 60 ? 0 : rng.below(i < 600 ? 2 : 3));
      std::string w;
      for (std::size_t s = 0; s < syl; ++s) {
        w += onsets[rng.below(std::size(onsets))];
        w += nuclei[rng.below(std::size(nuclei))];
        if (s + 1 == syl || rng.below(3) == 0) w += codas[rng.below(std::size(codas))];
      }
      words_.push_back(std::move(w));
    }
    double z = 0;
    cdf_.resize(lexicon);
    for (std::size_t i = 0; i < lexicon; ++i) {
      z += 1.0 / std::pow(static_cast<double>(i + 1), 1.05);
      cdf_[i] = z;
    }
    for (double& c : cdf_) c /= z;
    succ_.resize(lexicon);
    for (std::size_t i = 0; i < lexicon; ++i)
      for (std::size_t k = 0; k < kSucc; ++k) succ_[i][k] = zipf(rng.uniform());
  }

  std::string generate(std::size_t n_bytes) const {
    CounterRng rng(mix64(seed_, 0x7e47), 0);
    std::string out;
    out.reserve(n_bytes + 64);
    std::size_t prev = zipf(rng.uniform());
    std::size_t sentences = 0;
    while (out.size() < n_bytes) {
      const std::size_t len = 4 + rng.below(12);
      for (std::size_t i = 0; i < len; ++i) {
        const std::size_t w = rng.uniform() < 0.65 ? succ_[prev][rng.below(kSucc)] : zipf(rng.uniform());
        std::string word = words_[w];
        if (i == 0) word[0] = static_cast<char>(word[0] - 'a' + 'A');
        out += word;
        if (i + 1 < len) out += rng.below(9) == 0 ? ", " : " ";
        prev = w;
      }
      out += rng.below(10) == 0 ? "?" : ".";
      out += (++sentences % (5 + rng.below(4)) == 0) ? "\n" : " ";
    }
    out.resize(n_bytes);
    return out;
  }

  TokenStream stream(std::size_t n_tokens) const { return from_bytes(generate(n_tokens), "synthetic:" + std::to_string(seed_)); }

 private:
  static constexpr std::size_t kSucc = 6;

  std::size_t zipf(double u) const {
    return static_cast<std::size_t>(std::lower_bound(cdf_.begin(), cdf_.end(), u) - cdf_.begin());
  }

  std::uint64_t seed_;
  std::vector<std::string> words_;
  std::vector<double> cdf_;
  std::vector<std::array<std::size_t, kSucc>> succ_;
};

}  // namespace normlab
