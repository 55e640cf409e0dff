#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <string>
#include <unordered_map>
#include <vector>

#include <nlohmann/json.hpp>

#include "hyperlora/errors.hpp"
#include "hyperlora/rng.hpp"
#include "hyperlora/task_corpus.hpp"
#include "hyperlora/tensor.hpp"

namespace hyperlora {

// ---------------------------------------------------------------------------
// Frozen text encoders. An encoder maps a prompt batch of N items to a
// [N, L, C] condition tensor. Encoders hold no trainable state: identical
// text always yields identical features, which is what lets prompt batches
// act as stable task fingerprints.
// ---------------------------------------------------------------------------

class ConditionEncoder {
 public:
  virtual ~ConditionEncoder() = default;
  virtual std::string name() const = 0;
  virtual int feature_dim() const = 0;     // C
  virtual int max_positions() const = 0;   // L

  // [L, C]; positions past the text are zero rows.
  virtual Tensor<float> encode_text(const std::string& text) const = 0;

  // [N, L, C]
  Tensor<float> encode_batch(const PromptBatch& batch) const {
    if (batch.items.empty())
      throw DomainError("cannot encode an empty prompt batch");
    const std::int64_t N = static_cast<std::int64_t>(batch.items.size());
    const std::int64_t L = max_positions(), C = feature_dim();
    Tensor<float> out({N, L, C});
    for (std::int64_t n = 0; n < N; ++n) {
      Tensor<float> row = encode_text(batch.items[static_cast<std::size_t>(n)]);
      if (row.dim(0) != L || row.dim(1) != C)
        throw StructuralError("encoder returned a bad row shape");
      std::copy(row.data(), row.data() + row.numel(), &out(n, 0, 0));
    }
    return out;
  }
};

// Splits text into consecutive chunks of at most max_len characters.
inline std::vector<std::string> chunk_long_sequence(const std::string& text,
                                                    std::size_t max_len) {
  if (max_len == 0) throw ConfigError("chunk length must be positive");
  std::vector<std::string> chunks;
  for (std::size_t pos = 0; pos < text.size(); pos += max_len)
    chunks.push_back(text.substr(pos, max_len));
  if (chunks.empty()) chunks.push_back("");
  return chunks;
}

namespace detail {

// Deterministic pseudo-embedding: hash -> C unit-scaled floats.
inline void hashed_features(std::uint64_t h, float scale, float* out, int c) {
  Rng rng(h);
  for (int i = 0; i < c; ++i)
    out[i] += scale * static_cast<float>(rng.uniform(-1.0, 1.0));
}

}  // namespace detail

// Character-trigram hashing encoder. Position t of a text contributes the
// hash embeddings of its (prev, cur, next) trigram and of its single
// character; '^' and '$' pad the boundaries. Texts longer than max_positions
// are chunked and the chunk encodings averaged.
class HashedTrigramEncoder final : public ConditionEncoder {
 public:
  HashedTrigramEncoder(int feature_dim, int max_positions)
      : c_(feature_dim), l_(max_positions) {
    if (c_ < 1 || l_ < 1)
      throw ConfigError("encoder dims must be positive");
  }

  std::string name() const override { return "hashed_trigram"; }
  int feature_dim() const override { return c_; }
  int max_positions() const override { return l_; }

  Tensor<float> encode_text(const std::string& text) const override {
    if (text.size() > static_cast<std::size_t>(l_)) {
      auto chunks = chunk_long_sequence(text, static_cast<std::size_t>(l_));
      Tensor<float> acc = Tensor<float>::zeros({l_, c_});
      for (const auto& chunk : chunks) {
        Tensor<float> e = encode_text(chunk);
        for (std::int64_t i = 0; i < acc.numel(); ++i) acc[i] += e[i];
      }
      const float inv = 1.0f / static_cast<float>(chunks.size());
      for (std::int64_t i = 0; i < acc.numel(); ++i) acc[i] *= inv;
      return acc;
    }
    Tensor<float> out = Tensor<float>::zeros({l_, c_});
    const float scale = 1.0f / std::sqrt(static_cast<float>(c_));
    for (std::size_t t = 0; t < text.size(); ++t) {
      char prev = t == 0 ? '^' : text[t - 1];
      char cur = text[t];
      char next = t + 1 == text.size() ? '$' : text[t + 1];
      char tri[3] = {prev, cur, next};
      std::uint64_t htri = fnv1a64_bytes(tri, 3, fnv1a64("tri"));
      std::uint64_t huni = fnv1a64_bytes(&cur, 1, fnv1a64("uni"));
      float* row = &out(static_cast<std::int64_t>(t), 0);
      detail::hashed_features(htri, scale, row, c_);
      detail::hashed_features(huni, scale, row, c_);
    }
    return out;
  }

 private:
  int c_;
  int l_;
};

// Unigram-only variant kept as a second registered encoder: weaker features,
// same interface. Useful for encoder-swap ablations.
class CharUnigramEncoder final : public ConditionEncoder {
 public:
  CharUnigramEncoder(int feature_dim, int max_positions)
      : c_(feature_dim), l_(max_positions) {
    if (c_ < 1 || l_ < 1)
      throw ConfigError("encoder dims must be positive");
  }

  std::string name() const override { return "char_unigram"; }
  int feature_dim() const override { return c_; }
  int max_positions() const override { return l_; }

  Tensor<float> encode_text(const std::string& text) const override {
    if (text.size() > static_cast<std::size_t>(l_)) {
      auto chunks = chunk_long_sequence(text, static_cast<std::size_t>(l_));
      Tensor<float> acc = Tensor<float>::zeros({l_, c_});
      for (const auto& chunk : chunks) {
        Tensor<float> e = encode_text(chunk);
        for (std::int64_t i = 0; i < acc.numel(); ++i) acc[i] += e[i];
      }
      const float inv = 1.0f / static_cast<float>(chunks.size());
      for (std::int64_t i = 0; i < acc.numel(); ++i) acc[i] *= inv;
      return acc;
    }
    Tensor<float> out = Tensor<float>::zeros({l_, c_});
    const float scale = 1.0f / std::sqrt(static_cast<float>(c_));
    for (std::size_t t = 0; t < text.size(); ++t) {
      char cur = text[t];
      std::uint64_t h = fnv1a64_bytes(&cur, 1, fnv1a64("uni"));
      detail::hashed_features(h, scale, &out(static_cast<std::int64_t>(t), 0),
                              c_);
    }
    return out;
  }

 private:
  int c_;
  int l_;
};

// ---------------------------------------------------------------------------
// Registry
// ---------------------------------------------------------------------------

using EncoderFactory = std::function<std::shared_ptr<ConditionEncoder>(
    int feature_dim, int max_positions)>;

inline std::map<std::string, EncoderFactory>& encoder_registry() {
  static std::map<std::string, EncoderFactory> registry = {
      {"hashed_trigram",
       [](int c, int l) { return std::make_shared<HashedTrigramEncoder>(c, l); }},
      {"char_unigram",
       [](int c, int l) { return std::make_shared<CharUnigramEncoder>(c, l); }},
  };
  return registry;
}

inline void register_encoder(const std::string& name, EncoderFactory factory) {
  encoder_registry()[name] = std::move(factory);
}

inline std::shared_ptr<ConditionEncoder> make_encoder(const std::string& name,
                                                      int feature_dim,
                                                      int max_positions) {
  auto& reg = encoder_registry();
  auto it = reg.find(name);
  if (it == reg.end()) {
    std::string known;
    for (const auto& [k, v] : reg) known += (known.empty() ? "" : ", ") + k;
    throw ConfigError("unknown condition encoder '" + name +
                      "' (registered: " + known + ")");
  }
  return it->second(feature_dim, max_positions);
}

// ---------------------------------------------------------------------------
// Memoizing wrapper: prompt batches repeat heavily during generator training,
// so per-text encodings are cached by content hash.
// ---------------------------------------------------------------------------

class CachingEncoder final : public ConditionEncoder {
 public:
  explicit CachingEncoder(std::shared_ptr<ConditionEncoder> inner)
      : inner_(std::move(inner)) {
    if (!inner_) throw ConfigError("caching encoder needs an inner encoder");
  }

  std::string name() const override { return inner_->name(); }
  int feature_dim() const override { return inner_->feature_dim(); }
  int max_positions() const override { return inner_->max_positions(); }

  Tensor<float> encode_text(const std::string& text) const override {
    std::uint64_t key = fnv1a64(text);
    auto it = cache_.find(key);
    if (it != cache_.end()) {
      ++hits_;
      return it->second;
    }
    ++misses_;
    Tensor<float> e = inner_->encode_text(text);
    cache_.emplace(key, e);
    return e;
  }

  std::size_t hits() const { return hits_; }
  std::size_t misses() const { return misses_; }

 private:
  std::shared_ptr<ConditionEncoder> inner_;
  mutable std::unordered_map<std::uint64_t, Tensor<float>> cache_;
  mutable std::size_t hits_ = 0;
  mutable std::size_t misses_ = 0;
};

// ---------------------------------------------------------------------------
// Fingerprint separability: encode several prompt batches per task, mean-pool
// each into a fingerprint vector, then classify held-out fingerprints by
// nearest task centroid (cosine similarity). Returns the accuracy in [0, 1].
// ---------------------------------------------------------------------------

inline double fingerprint_separability(const std::vector<TaskDataset>& tasks,
                                       const ConditionEncoder& encoder,
                                       std::size_t batches_per_task,
                                       std::size_t batch_len,
                                       std::uint64_t seed) {
  if (tasks.size() < 2)
    throw DomainError("separability needs at least two tasks");
  if (batches_per_task < 2)
    throw DomainError("separability needs at least two batches per task");
  const std::int64_t C = encoder.feature_dim();
  std::vector<std::vector<std::vector<double>>> prints(tasks.size());
  for (std::size_t ti = 0; ti < tasks.size(); ++ti) {
    for (std::size_t b = 0; b < batches_per_task; ++b) {
      auto pool = tasks[ti].train_count();
      PromptBatch batch = sample_prompt_batch(
          tasks[ti], batch_len, pool,
          derive_seed(seed, "sep/" + tasks[ti].task_id + "/" + std::to_string(b)));
      Tensor<float> enc = encoder.encode_batch(batch);
      std::vector<double> fp(static_cast<std::size_t>(C), 0.0);
      const std::int64_t rows = enc.dim(0) * enc.dim(1);
      for (std::int64_t r = 0; r < rows; ++r)
        for (std::int64_t c = 0; c < C; ++c)
          fp[static_cast<std::size_t>(c)] += enc[r * C + c];
      for (auto& v : fp) v /= static_cast<double>(rows);
      prints[ti].push_back(std::move(fp));
    }
  }
  // first half -> centroids, second half -> probes
  std::size_t half = batches_per_task / 2;
  std::vector<std::vector<double>> centroids(
      tasks.size(), std::vector<double>(static_cast<std::size_t>(C), 0.0));
  for (std::size_t ti = 0; ti < tasks.size(); ++ti) {
    for (std::size_t b = 0; b < half; ++b)
      for (std::size_t c = 0; c < static_cast<std::size_t>(C); ++c)
        centroids[ti][c] += prints[ti][b][c];
    for (auto& v : centroids[ti]) v /= static_cast<double>(half);
  }
  auto cosine = [&](const std::vector<double>& a, const std::vector<double>& b) {
    double dot = 0, na = 0, nb = 0;
    for (std::size_t i = 0; i < a.size(); ++i) {
      dot += a[i] * b[i];
      na += a[i] * a[i];
      nb += b[i] * b[i];
    }
    if (na == 0 || nb == 0) return -1.0;
    return dot / std::sqrt(na * nb);
  };
  std::size_t correct = 0, total = 0;
  for (std::size_t ti = 0; ti < tasks.size(); ++ti)
    for (std::size_t b = half; b < batches_per_task; ++b) {
      double best = -2.0;
      std::size_t best_task = 0;
      for (std::size_t cj = 0; cj < tasks.size(); ++cj) {
        double s = cosine(prints[ti][b], centroids[cj]);
        if (s > best) {
          best = s;
          best_task = cj;
        }
      }
      correct += (best_task == ti);
      ++total;
    }
  return static_cast<double>(correct) / static_cast<double>(total);
}

}  // namespace hyperlora
