#pragma once
// Caption tokenization and n-gram bookkeeping shared by the metric stack.

#include <array>
#include <map>
#include <string>
#include <vector>

namespace refdic {

using TokenSeq = std::vector<std::string>;

constexpr int kMaxNGram = 4;

// Lowercase, map every char outside [a-z0-9 ] to a space, split on whitespace.
inline TokenSeq tokenize(const std::string& text) {
  std::string norm;
  norm.reserve(text.size());
  for (unsigned char c : text) {
    if (c >= 'A' && c <= 'Z') c = static_cast<unsigned char>(c - 'A' + 'a');
    if ((c >= 'a' && c <= 'z') || (c >= '0' && c <= '9'))
      norm.push_back(static_cast<char>(c));
    else
      norm.push_back(' ');
  }
  TokenSeq toks;
  size_t i = 0;
  while (i < norm.size()) {
    while (i < norm.size() && norm[i] == ' ') ++i;
    size_t j = i;
    while (j < norm.size() && norm[j] != ' ') ++j;
    if (j > i) toks.push_back(norm.substr(i, j - i));
    i = j;
  }
  return toks;
}

inline std::string join_tokens(const TokenSeq& toks, size_t begin, size_t len) {
  std::string s;
  for (size_t k = 0; k < len; ++k) {
    if (k) s.push_back(' ');
    s += toks[begin + k];
  }
  return s;
}

// counts[n-1] maps the space-joined n-gram to its occurrence count.
using NGramCounts = std::array<std::map<std::string, int>, kMaxNGram>;

inline NGramCounts ngram_counts(const TokenSeq& toks, int max_n = kMaxNGram) {
  NGramCounts counts;
  for (int n = 1; n <= max_n; ++n) {
    if (toks.size() < static_cast<size_t>(n)) break;
    for (size_t i = 0; i + n <= toks.size(); ++i)
      counts[n - 1][join_tokens(toks, i, n)] += 1;
  }
  return counts;
}

}  // namespace refdic
