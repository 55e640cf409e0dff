#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "hyperlora/backbone.hpp"
#include "hyperlora/errors.hpp"
#include "hyperlora/tensor.hpp"

namespace hyperlora {

// ---------------------------------------------------------------------------
// Lossless adapter <-> token-grid codec.
//
// Flattening order is canonical: targets in adapter order, A before B, each
// row-major. The float stream is cut into rows of width c_w (zero-padded at
// the tail), rows are stacked into layers of l_w, and layers into a grid of
// shape [n_w, l_w, c_w]. Padding cells are real zeros: the generator is
// trained to reproduce them, and decoding simply drops them.
// ---------------------------------------------------------------------------

inline constexpr int kMaxTokenWidth = 512;

struct TokenizationPlan {
  int c_w = 0;
  int l_w = 0;
  std::int64_t n_w = 0;
  std::int64_t total_floats = 0;
  int rank = 0;
  std::vector<std::string> targets;
  std::vector<std::vector<std::int64_t>> a_shapes;  // per target
  std::vector<std::vector<std::int64_t>> b_shapes;

  std::vector<std::int64_t> grid_shape() const { return {n_w, l_w, c_w}; }

  std::int64_t padded_floats() const {
    return n_w * static_cast<std::int64_t>(l_w) * c_w;
  }

  nlohmann::ordered_json to_json() const {
    nlohmann::ordered_json j;
    j["c_w"] = c_w;
    j["l_w"] = l_w;
    j["n_w"] = n_w;
    j["total_floats"] = total_floats;
    j["rank"] = rank;
    j["targets"] = targets;
    j["a_shapes"] = a_shapes;
    j["b_shapes"] = b_shapes;
    return j;
  }

  static TokenizationPlan from_json(const nlohmann::json& j) {
    TokenizationPlan p;
    p.c_w = j.at("c_w").get<int>();
    p.l_w = j.at("l_w").get<int>();
    p.n_w = j.at("n_w").get<std::int64_t>();
    p.total_floats = j.at("total_floats").get<std::int64_t>();
    p.rank = j.at("rank").get<int>();
    p.targets = j.at("targets").get<std::vector<std::string>>();
    p.a_shapes = j.at("a_shapes").get<std::vector<std::vector<std::int64_t>>>();
    p.b_shapes = j.at("b_shapes").get<std::vector<std::vector<std::int64_t>>>();
    return p;
  }

  void validate() const {
    if (c_w < 1 || c_w > kMaxTokenWidth)
      throw ConfigError("token width must be in [1, " +
                        std::to_string(kMaxTokenWidth) + "], got " +
                        std::to_string(c_w));
    if (l_w < 1) throw ConfigError("tokens per layer must be positive");
    if (n_w < 1 || total_floats < 1)
      throw StructuralError("tokenization plan has empty geometry");
    if (targets.size() != a_shapes.size() || targets.size() != b_shapes.size())
      throw StructuralError("tokenization plan fields misaligned");
    std::int64_t n = 0;
    for (std::size_t i = 0; i < targets.size(); ++i) {
      std::int64_t na = 1, nb = 1;
      for (auto d : a_shapes[i]) na *= d;
      for (auto d : b_shapes[i]) nb *= d;
      n += na + nb;
    }
    if (n != total_floats)
      throw StructuralError("tokenization plan float count mismatch");
    std::int64_t rows = (total_floats + c_w - 1) / c_w;
    if (n_w != (rows + l_w - 1) / l_w)
      throw StructuralError("tokenization plan grid height mismatch");
  }
};

template <typename T>
std::vector<T> flatten_lora(const LoRAAdapter<T>& ad) {
  std::vector<T> flat;
  for (std::size_t i = 0; i < ad.targets.size(); ++i) {
    flat.insert(flat.end(), ad.A[i].vec().begin(), ad.A[i].vec().end());
    flat.insert(flat.end(), ad.B[i].vec().begin(), ad.B[i].vec().end());
  }
  return flat;
}

template <typename T = float>
Tensor<T> tokenize_lora(const LoRAAdapter<T>& ad, int c_w, int l_w,
                        TokenizationPlan* plan_out = nullptr) {
  if (c_w < 1 || c_w > kMaxTokenWidth)
    throw ConfigError("token width must be in [1, " +
                      std::to_string(kMaxTokenWidth) + "], got " +
                      std::to_string(c_w));
  if (l_w < 1) throw ConfigError("tokens per layer must be positive");
  if (ad.targets.empty()) throw StructuralError("adapter has no targets");
  std::vector<T> flat = flatten_lora(ad);
  const std::int64_t total = static_cast<std::int64_t>(flat.size());
  const std::int64_t rows = (total + c_w - 1) / c_w;
  const std::int64_t n_w = (rows + l_w - 1) / l_w;
  Tensor<T> grid = Tensor<T>::zeros({n_w, l_w, c_w});
  for (std::int64_t i = 0; i < total; ++i)
    grid[i] = flat[static_cast<std::size_t>(i)];
  if (plan_out) {
    TokenizationPlan p;
    p.c_w = c_w;
    p.l_w = l_w;
    p.n_w = n_w;
    p.total_floats = total;
    p.rank = ad.rank;
    p.targets = ad.targets;
    for (std::size_t i = 0; i < ad.targets.size(); ++i) {
      p.a_shapes.push_back(ad.A[i].shape());
      p.b_shapes.push_back(ad.B[i].shape());
    }
    p.validate();
    *plan_out = p;
  }
  return grid;
}

template <typename T = float>
LoRAAdapter<T> detokenize_lora(const Tensor<T>& grid,
                               const TokenizationPlan& plan) {
  plan.validate();
  if (grid.shape() != plan.grid_shape())
    throw StructuralError("grid shape " + grid.shape_str() +
                          " does not match the plan (expected [" +
                          std::to_string(plan.n_w) + ", " +
                          std::to_string(plan.l_w) + ", " +
                          std::to_string(plan.c_w) + "])");
  LoRAAdapter<T> ad;
  ad.rank = plan.rank;
  ad.targets = plan.targets;
  std::int64_t pos = 0;
  for (std::size_t i = 0; i < plan.targets.size(); ++i) {
    Tensor<T> a(plan.a_shapes[i]);
    for (std::int64_t j = 0; j < a.numel(); ++j) a[j] = grid[pos++];
    Tensor<T> b(plan.b_shapes[i]);
    for (std::int64_t j = 0; j < b.numel(); ++j) b[j] = grid[pos++];
    ad.A.push_back(std::move(a));
    ad.B.push_back(std::move(b));
  }
  return ad;
}

// ---------------------------------------------------------------------------
// Grid persistence: one "grid" tensor plus the plan embedded as JSON metadata
// ---------------------------------------------------------------------------

inline void save_token_grid(const Tensor<float>& grid,
                            const TokenizationPlan& plan,
                            const std::map<std::string, std::string>& extra_meta,
                            const std::filesystem::path& path) {
  WeightFile wf;
  wf.meta["kind"] = "token_grid";
  wf.meta["plan"] = plan.to_json().dump();
  for (const auto& [k, v] : extra_meta) wf.meta[k] = v;
  wf.add("grid", grid);
  save_weight_file(wf, path);
}

inline std::pair<Tensor<float>, TokenizationPlan> load_token_grid(
    const std::filesystem::path& path) {
  WeightFile wf = load_weight_file(path);
  if (wf.meta_or("kind", "") != "token_grid")
    throw StructuralError("weight file is not a token grid: " + path.string());
  TokenizationPlan plan;
  try {
    plan = TokenizationPlan::from_json(
        nlohmann::json::parse(wf.meta_or("plan", "")));
  } catch (const nlohmann::json::exception& e) {
    throw StructuralError("token grid has a malformed plan: " +
                          std::string(e.what()));
  }
  plan.validate();
  Tensor<float> grid = wf.get("grid");
  if (grid.shape() != plan.grid_shape())
    throw StructuralError("stored grid does not match its plan");
  return {std::move(grid), plan};
}

}  // namespace hyperlora
