#pragma once
// Token table built from a manifest split. Fixed special ids, then every
// distinct caption token of the split in lexicographic order (no count
// cutoff), so the same corpus always yields the same table.

#include <map>
#include <string>
#include <unordered_map>
#include <vector>

#include <json.hpp>

#include "refdic/common.hpp"
#include "refdic/corpus.hpp"
#include "refdic/text.hpp"

namespace refdic {

struct Vocab {
  static constexpr int kPad = 0;
  static constexpr int kBos = 1;
  static constexpr int kEos = 2;
  static constexpr int kUnk = 3;

  std::vector<std::string> tokens;
  std::unordered_map<std::string, int> index;

  static Vocab with_specials() {
    Vocab v;
    for (const char* s : {"<pad>", "<bos>", "<eos>", "<unk>"}) {
      v.index.emplace(s, static_cast<int>(v.tokens.size()));
      v.tokens.emplace_back(s);
    }
    return v;
  }

  static Vocab build(const DatasetManifest& m, const std::string& split = "train") {
    std::map<std::string, int> counts;
    for (const auto& img : m.images) {
      if (img.split != split) continue;
      for (const auto& cap : img.captions)
        for (const auto& tok : tokenize(cap)) ++counts[tok];
    }
    if (counts.empty()) throw DataError("vocab: split '" + split + "' has no tokens");
    Vocab v = with_specials();
    for (const auto& [tok, n] : counts) {
      (void)n;
      v.index.emplace(tok, static_cast<int>(v.tokens.size()));
      v.tokens.push_back(tok);
    }
    return v;
  }

  int size() const { return static_cast<int>(tokens.size()); }

  int id(const std::string& tok) const {
    auto it = index.find(tok);
    return it == index.end() ? kUnk : it->second;
  }

  std::vector<int> encode(const TokenSeq& toks) const {
    std::vector<int> out;
    out.reserve(toks.size());
    for (const auto& t : toks) out.push_back(id(t));
    return out;
  }

  TokenSeq decode(const std::vector<int>& ids) const {
    TokenSeq out;
    for (int i : ids) {
      if (i < 0 || i >= size()) throw InternalError("vocab: id out of range");
      if (i == kPad || i == kBos || i == kEos) continue;
      out.push_back(tokens[i]);
    }
    return out;
  }

  nlohmann::json to_json() const { return nlohmann::json(tokens); }

  static Vocab from_json(const nlohmann::json& j) {
    Vocab v;
    if (!j.is_array() || j.size() < 4) throw DataError("vocab json: need the special tokens");
    for (const auto& t : j) {
      if (!t.is_string()) throw DataError("vocab json: tokens must be strings");
      std::string s = t.get<std::string>();
      if (v.index.count(s)) throw DataError("vocab json: duplicate token '" + s + "'");
      v.index.emplace(s, static_cast<int>(v.tokens.size()));
      v.tokens.push_back(s);
    }
    if (v.tokens[0] != "<pad>" || v.tokens[1] != "<bos>" || v.tokens[2] != "<eos>" ||
        v.tokens[3] != "<unk>")
      throw DataError("vocab json: special tokens out of place");
    return v;
  }
};

}  // namespace refdic
