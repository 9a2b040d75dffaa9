#pragma once
// Synthetic desk-scale corpus generator. Pure function of (seed, config):
// scenes are drawn from a fixed template list, each planting 1..k objects with
// optional color/size attributes. Captions verbalize the full scene (every
// planted category appears in every caption), scene graphs record exactly the
// planted structure, embeddings are hashed bags of tokens (so images sharing
// objects land near each other), and region features are per-category code
// vectors plus attribute offsets plus Gaussian noise.

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "refdic/common.hpp"
#include "refdic/corpus.hpp"
#include "refdic/rng.hpp"
#include "refdic/text.hpp"

namespace refdic {

struct SynthConfig {
  int n_images = 200;
  int captions_per_image = 5;
  int objects_min = 2;
  int objects_max = 4;
  double attr_prob = 0.7;    // chance an object gets an attribute
  int d_feat = 64;           // region feature width
  int d_emb = 64;            // embedding table width
  double feature_noise = 0.05;
  double train_frac = 0.8;
  double val_frac = 0.1;     // remainder is test
};

struct SynthResult {
  DatasetManifest manifest;
  EmbeddingTable embeddings{1};
};

namespace synthdata {

struct SceneTemplate {
  const char* name;
  std::array<const char*, 6> categories;
};

inline const std::vector<SceneTemplate>& scene_templates() {
  static const std::vector<SceneTemplate> scenes = {
      {"bathroom", {"towel", "toilet", "sink", "mirror", "curtain", "bathtub"}},
      {"bedroom", {"bed", "lamp", "pillow", "dresser", "window", "chair"}},
      {"street", {"car", "bus", "motorcycle", "helmet", "road", "sign"}},
      {"park", {"tree", "dog", "bench", "girl", "boy", "bike"}},
      {"kitchen", {"oven", "pot", "plate", "counter", "fridge", "spoon"}},
  };
  return scenes;
}

inline const std::vector<std::string>& attribute_lexicon() {
  static const std::vector<std::string> attrs = {
      "red", "blue", "green", "pink", "white", "black",
      "yellow", "brown", "big", "small", "old", "new"};
  return attrs;
}

inline std::vector<std::string> object_lexicon() {
  std::vector<std::string> cats;
  for (const auto& s : scene_templates())
    for (const char* c : s.categories) cats.push_back(c);
  return cats;
}

// Stable pseudo-random unit direction for a token, independent of the corpus
// seed so that category geometry is shared across corpora.
inline std::vector<double> token_code(const std::string& token, int dim) {
  Rng rng(fnv1a64(token) ^ 0x5eed5eed5eed5eedull);
  std::vector<double> v(dim);
  double norm_sq = 0;
  for (auto& x : v) {
    x = rng.normal();
    norm_sq += x * x;
  }
  double norm = std::sqrt(norm_sq);
  for (auto& x : v) x /= norm;
  return v;
}

// Hashed bag-of-tokens embedding, L2-normalized by EmbeddingTable::put.
inline std::vector<float> bag_embedding(const std::vector<std::string>& tokens, int dim) {
  std::vector<double> acc(dim, 0.0);
  for (const auto& tok : tokens) {
    uint64_t h = fnv1a64(tok);
    int idx = static_cast<int>(h % static_cast<uint64_t>(dim));
    double sign = ((h >> 32) & 1) ? 1.0 : -1.0;
    acc[idx] += sign;
  }
  std::vector<float> out(dim);
  for (int i = 0; i < dim; ++i) out[i] = static_cast<float>(acc[i]);
  return out;
}

}  // namespace synthdata

inline SynthResult synth_corpus(uint64_t seed, const SynthConfig& cfg) {
  if (cfg.n_images < 1) throw DataError("synth: n_images must be >= 1");
  if (cfg.captions_per_image < 1) throw DataError("synth: captions_per_image must be >= 1");
  if (cfg.objects_min < 1) throw DataError("synth: objects_min must be >= 1");
  if (cfg.objects_max < cfg.objects_min) throw DataError("synth: objects_max < objects_min");
  if (cfg.objects_max > 6) throw DataError("synth: objects_max must be <= 6");
  if (cfg.d_feat < 1 || cfg.d_emb < 1) throw DataError("synth: dims must be positive");
  if (cfg.train_frac < 0 || cfg.val_frac < 0 || cfg.train_frac + cfg.val_frac > 1.0)
    throw DataError("synth: bad split fractions");

  Rng rng(seed);
  SynthResult res;
  res.embeddings = EmbeddingTable(static_cast<uint32_t>(cfg.d_emb));

  const auto& scenes = synthdata::scene_templates();
  const auto& attrs = synthdata::attribute_lexicon();

  int n_train = static_cast<int>(cfg.n_images * cfg.train_frac);
  int n_val = static_cast<int>(cfg.n_images * cfg.val_frac);
  if (cfg.n_images >= 3) {
    n_train = std::max(1, n_train);
    n_val = std::max(1, n_val);
    if (n_train + n_val >= cfg.n_images) n_train = cfg.n_images - n_val - 1;
  }

  for (int i = 0; i < cfg.n_images; ++i) {
    ImageRecord img;
    char buf[16];
    std::snprintf(buf, sizeof(buf), "img%04d", i);
    img.id = buf;
    img.embedding_key = img.id;
    img.split = i < n_train ? "train" : (i < n_train + n_val ? "val" : "test");

    const auto& scene = scenes[rng.next_u64() % scenes.size()];
    int n_obj = rng.uniform_int(cfg.objects_min, cfg.objects_max);
    std::vector<int> slots(scene.categories.size());
    for (size_t k = 0; k < slots.size(); ++k) slots[k] = static_cast<int>(k);
    rng.shuffle(slots);
    for (int k = 0; k < n_obj; ++k) {
      SceneObject obj;
      obj.category = scene.categories[slots[k]];
      if (rng.bernoulli(cfg.attr_prob)) obj.attributes.push_back(rng.pick(attrs));
      img.graph.objects.push_back(std::move(obj));
    }
    for (int k = 0; k + 1 < n_obj; ++k)
      if (rng.bernoulli(0.5))
        img.graph.relations.push_back({k, rng.bernoulli(0.5) ? "beside" : "near", k + 1});

    // Captions: every planted object (with its attribute) in varying order
    // and phrasing, always inside the scene word.
    for (int j = 0; j < cfg.captions_per_image; ++j) {
      std::vector<int> order(img.graph.objects.size());
      for (size_t k = 0; k < order.size(); ++k) order[k] = static_cast<int>(k);
      if (j > 0) rng.shuffle(order);
      std::vector<std::string> phrases;
      for (int k : order) {
        const auto& obj = img.graph.objects[k];
        std::string np = rng.bernoulli(0.5) ? "a " : "the ";
        if (!obj.attributes.empty()) np += obj.attributes[0] + " ";
        np += obj.category;
        phrases.push_back(np);
      }
      std::string cap;
      int style = j % 3;
      if (style == 0) {
        cap = "a " + std::string(scene.name) + " with ";
        for (size_t k = 0; k < phrases.size(); ++k) {
          if (k) cap += " and ";
          cap += phrases[k];
        }
      } else if (style == 1) {
        for (size_t k = 0; k < phrases.size(); ++k) {
          if (k) cap += " and ";
          cap += phrases[k];
        }
        cap += " in a " + std::string(scene.name);
      } else {
        cap = "there is ";
        for (size_t k = 0; k < phrases.size(); ++k) {
          if (k) cap += rng.bernoulli(0.5) ? " beside " : " near ";
          cap += phrases[k];
        }
        cap += " in a " + std::string(scene.name);
      }
      img.captions.push_back(cap);
    }

    // Region features: category code + attribute offset + noise.
    for (const auto& obj : img.graph.objects) {
      std::vector<double> f = synthdata::token_code(obj.category, cfg.d_feat);
      for (const auto& a : obj.attributes) {
        auto code = synthdata::token_code("attr:" + a, cfg.d_feat);
        for (int d = 0; d < cfg.d_feat; ++d) f[d] += 0.35 * code[d];
      }
      for (int d = 0; d < cfg.d_feat; ++d) f[d] += cfg.feature_noise * rng.normal();
      img.features.push_back(std::move(f));
    }

    // Embeddings: image = bag over scene+categories+attributes; captions = bag
    // over their tokens.
    std::vector<std::string> img_tokens = {scene.name};
    for (const auto& obj : img.graph.objects) {
      img_tokens.push_back(obj.category);
      for (const auto& a : obj.attributes) img_tokens.push_back(a);
    }
    res.embeddings.put(img.embedding_key, synthdata::bag_embedding(img_tokens, cfg.d_emb));
    for (size_t j = 0; j < img.captions.size(); ++j)
      res.embeddings.put(caption_embedding_key(img.embedding_key, j),
                         synthdata::bag_embedding(tokenize(img.captions[j]), cfg.d_emb));

    res.manifest.images.push_back(std::move(img));
  }
  res.manifest.reindex();
  return res;
}

}  // namespace refdic
