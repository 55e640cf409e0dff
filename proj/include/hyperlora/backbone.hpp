#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "hyperlora/errors.hpp"
#include "hyperlora/nn_common.hpp"
#include "hyperlora/rng.hpp"
#include "hyperlora/serialize.hpp"
#include "hyperlora/tensor.hpp"

namespace hyperlora {

// ---------------------------------------------------------------------------
// Character vocabulary. Fixed and global: ids must be stable across runs.
// ---------------------------------------------------------------------------

inline constexpr int kPadToken = 0;
inline constexpr int kBosToken = 1;
inline constexpr int kSepToken = 2;
inline constexpr int kEosToken = 3;
inline constexpr int kVocabSize = 68;  // 4 specials + 26 + 26 + 10 + ' ' + ':'

inline int encode_char(char c) {
  if (c >= 'a' && c <= 'z') return 4 + (c - 'a');
  if (c >= 'A' && c <= 'Z') return 30 + (c - 'A');
  if (c >= '0' && c <= '9') return 56 + (c - '0');
  if (c == ' ') return 66;
  if (c == ':') return 67;
  throw DomainError(std::string("character not in vocabulary: '") + c + "'");
}

inline char decode_char(int id) {
  if (id >= 4 && id < 30) return static_cast<char>('a' + id - 4);
  if (id >= 30 && id < 56) return static_cast<char>('A' + id - 30);
  if (id >= 56 && id < 66) return static_cast<char>('0' + id - 56);
  if (id == 66) return ' ';
  if (id == 67) return ':';
  throw DomainError("token id " + std::to_string(id) + " is not a character");
}

// ---------------------------------------------------------------------------
// Model definition
// ---------------------------------------------------------------------------

struct BackboneConfig {
  int vocab_size = kVocabSize;
  int context_len = 32;
  int d_model = 64;
  int n_layers = 2;
  int n_heads = 4;
  int d_ff = 256;
  double norm_eps = 1e-5;

  int head_dim() const { return d_model / n_heads; }

  void validate() const {
    if (d_model % n_heads != 0)
      throw ConfigError("d_model must be divisible by n_heads");
    if (vocab_size < kVocabSize)
      throw ConfigError("vocab_size smaller than the character set");
    if (context_len < 4 || d_model < 2 || n_layers < 1 || n_heads < 1 ||
        d_ff < 1)
      throw ConfigError("backbone dimensions must be positive");
  }
};

// Pre-norm transformer block: x += Wo·attn(rms(x)); x += W2·gelu(W1·rms(x)).
// All linears are bias-free, stored row-major [out, in].
template <typename T>
struct BackboneLayer {
  Tensor<T> norm1_g, norm2_g;  // [d]
  Tensor<T> wq, wk, wv, wo;    // [d, d]
  Tensor<T> w1;                // [d_ff, d]
  Tensor<T> w2;                // [d, d_ff]
};

template <typename T>
struct Backbone {
  BackboneConfig cfg;
  Tensor<T> tok_emb;  // [V, d]
  Tensor<T> pos_emb;  // [T, d]
  std::vector<BackboneLayer<T>> layers;
  Tensor<T> norm_f_g;  // [d]
  Tensor<T> head;      // [V, d]

  void for_each_param(
      const std::function<void(const std::string&, Tensor<T>&)>& fn) {
    fn("tok_emb", tok_emb);
    fn("pos_emb", pos_emb);
    for (std::size_t i = 0; i < layers.size(); ++i) {
      const std::string p = "layers." + std::to_string(i) + ".";
      fn(p + "norm1_g", layers[i].norm1_g);
      fn(p + "attn.wq", layers[i].wq);
      fn(p + "attn.wk", layers[i].wk);
      fn(p + "attn.wv", layers[i].wv);
      fn(p + "attn.wo", layers[i].wo);
      fn(p + "norm2_g", layers[i].norm2_g);
      fn(p + "mlp.w1", layers[i].w1);
      fn(p + "mlp.w2", layers[i].w2);
    }
    fn("norm_f_g", norm_f_g);
    fn("head", head);
  }

  std::int64_t param_count() {
    std::int64_t n = 0;
    for_each_param([&](const std::string&, Tensor<T>& t) { n += t.numel(); });
    return n;
  }
};

template <typename T = float>
Backbone<T> init_backbone(const BackboneConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  Backbone<T> m;
  m.cfg = cfg;
  Rng rng(derive_seed(seed, "backbone/init"));
  const T emb_std = static_cast<T>(0.02);
  m.tok_emb.reset({cfg.vocab_size, cfg.d_model});
  m.tok_emb.fill_normal(rng, emb_std);
  m.pos_emb.reset({cfg.context_len, cfg.d_model});
  m.pos_emb.fill_normal(rng, emb_std);
  m.layers.resize(static_cast<std::size_t>(cfg.n_layers));
  for (auto& layer : m.layers) {
    layer.norm1_g = Tensor<T>::full({cfg.d_model}, T{1});
    layer.norm2_g = Tensor<T>::full({cfg.d_model}, T{1});
    for (Tensor<T>* w : {&layer.wq, &layer.wk, &layer.wv, &layer.wo}) {
      w->reset({cfg.d_model, cfg.d_model});
      w->fill_normal(rng, emb_std);
    }
    layer.w1.reset({cfg.d_ff, cfg.d_model});
    layer.w1.fill_normal(rng, emb_std);
    layer.w2.reset({cfg.d_model, cfg.d_ff});
    layer.w2.fill_normal(rng, emb_std);
  }
  m.norm_f_g = Tensor<T>::full({cfg.d_model}, T{1});
  m.head.reset({cfg.vocab_size, cfg.d_model});
  m.head.fill_normal(rng, emb_std);
  return m;
}

template <typename T>
Backbone<T> make_zero_grads(Backbone<T>& model) {
  Backbone<T> g;
  g.cfg = model.cfg;
  g.tok_emb = Tensor<T>::zeros(model.tok_emb.shape());
  g.pos_emb = Tensor<T>::zeros(model.pos_emb.shape());
  g.layers.resize(model.layers.size());
  for (std::size_t i = 0; i < model.layers.size(); ++i) {
    g.layers[i].norm1_g = Tensor<T>::zeros(model.layers[i].norm1_g.shape());
    g.layers[i].norm2_g = Tensor<T>::zeros(model.layers[i].norm2_g.shape());
    g.layers[i].wq = Tensor<T>::zeros(model.layers[i].wq.shape());
    g.layers[i].wk = Tensor<T>::zeros(model.layers[i].wk.shape());
    g.layers[i].wv = Tensor<T>::zeros(model.layers[i].wv.shape());
    g.layers[i].wo = Tensor<T>::zeros(model.layers[i].wo.shape());
    g.layers[i].w1 = Tensor<T>::zeros(model.layers[i].w1.shape());
    g.layers[i].w2 = Tensor<T>::zeros(model.layers[i].w2.shape());
  }
  g.norm_f_g = Tensor<T>::zeros(model.norm_f_g.shape());
  g.head = Tensor<T>::zeros(model.head.shape());
  return g;
}

// ---------------------------------------------------------------------------
// Low-rank adapters on the q/v projections
// ---------------------------------------------------------------------------

template <typename T>
struct LoRAAdapter {
  std::string task_id;
  std::string step_id;
  int rank = 4;
  std::vector<std::string> targets;  // canonical order: per layer wq then wv
  std::vector<Tensor<T>> A;          // [rank, d]  (down projection)
  std::vector<Tensor<T>> B;          // [d, rank]  (up projection, zero init)

  int target_index(const std::string& name) const {
    for (std::size_t i = 0; i < targets.size(); ++i)
      if (targets[i] == name) return static_cast<int>(i);
    return -1;
  }

  std::int64_t param_count() const {
    std::int64_t n = 0;
    for (const auto& t : A) n += t.numel();
    for (const auto& t : B) n += t.numel();
    return n;
  }
};

inline std::vector<std::string> lora_target_names(const BackboneConfig& cfg) {
  std::vector<std::string> names;
  for (int i = 0; i < cfg.n_layers; ++i) {
    names.push_back("layers." + std::to_string(i) + ".attn.wq");
    names.push_back("layers." + std::to_string(i) + ".attn.wv");
  }
  return names;
}

// B starts at zero so the adapted model equals the base model at step 0;
// A gets small fan-in-scaled uniform noise.
template <typename T = float>
LoRAAdapter<T> init_lora(const BackboneConfig& cfg, int rank,
                         std::uint64_t seed, const std::string& task_id = "") {
  if (rank < 1 || rank >= cfg.d_model)
    throw ConfigError("lora rank must be in [1, d_model)");
  LoRAAdapter<T> ad;
  ad.task_id = task_id;
  ad.rank = rank;
  ad.targets = lora_target_names(cfg);
  Rng rng(derive_seed(seed, "lora/init/" + task_id));
  const T bound = static_cast<T>(1.0 / std::sqrt(double(cfg.d_model)));
  for (std::size_t i = 0; i < ad.targets.size(); ++i) {
    Tensor<T> a({rank, cfg.d_model});
    a.fill_uniform(rng, -bound, bound);
    ad.A.push_back(std::move(a));
    ad.B.push_back(Tensor<T>::zeros({cfg.d_model, rank}));
  }
  return ad;
}

template <typename T>
LoRAAdapter<T> make_zero_lora_grads(const LoRAAdapter<T>& ad) {
  LoRAAdapter<T> g;
  g.task_id = ad.task_id;
  g.rank = ad.rank;
  g.targets = ad.targets;
  for (std::size_t i = 0; i < ad.targets.size(); ++i) {
    g.A.push_back(Tensor<T>::zeros(ad.A[i].shape()));
    g.B.push_back(Tensor<T>::zeros(ad.B[i].shape()));
  }
  return g;
}

// Returns a copy of the model with W_eff = W + B·A folded into each target.
template <typename T>
Backbone<T> merge_lora(const Backbone<T>& model, const LoRAAdapter<T>& ad) {
  Backbone<T> merged = model;
  const int d = model.cfg.d_model;
  for (std::size_t t = 0; t < ad.targets.size(); ++t) {
    const std::string& name = ad.targets[t];
    // parse "layers.<i>.attn.<which>"
    std::size_t dot1 = name.find('.');
    std::size_t dot2 = name.find('.', dot1 + 1);
    int layer = std::stoi(name.substr(dot1 + 1, dot2 - dot1 - 1));
    if (layer < 0 || layer >= static_cast<int>(model.layers.size()))
      throw StructuralError("adapter target out of range: " + name);
    Tensor<T>* w = nullptr;
    if (name.ends_with(".attn.wq")) w = &merged.layers[static_cast<std::size_t>(layer)].wq;
    else if (name.ends_with(".attn.wv")) w = &merged.layers[static_cast<std::size_t>(layer)].wv;
    else throw StructuralError("unsupported adapter target: " + name);
    const Tensor<T>& A = ad.A[t];
    const Tensor<T>& B = ad.B[t];
    if (A.dim(0) != ad.rank || A.dim(1) != d || B.dim(0) != d ||
        B.dim(1) != ad.rank)
      throw StructuralError("adapter tensor shapes do not match the model");
    for (int o = 0; o < d; ++o)
      for (int r = 0; r < ad.rank; ++r) {
        T b = B(o, r);
        if (b == T{0}) continue;
        for (int i = 0; i < d; ++i) (*w)(o, i) += b * A(r, i);
      }
  }
  return merged;
}

// ---------------------------------------------------------------------------
// Tokenized batches
// ---------------------------------------------------------------------------

// Sequence layout: BOS <prompt> SEP <answer> EOS, PAD to context_len.
// Inputs are positions [0, len-1); targets are shifted by one. The loss mask
// covers exactly the answer and EOS targets.
template <typename T>
struct TokenBatch {
  Tensor<int> tokens;   // [B, T]
  Tensor<int> targets;  // [B, T]
  Tensor<T> mask;       // [B, T], 1 where the target participates in the loss
};

template <typename T = float>
TokenBatch<T> make_token_batch(const BackboneConfig& cfg,
                               const std::vector<std::string>& prompts,
                               const std::vector<std::string>& answers) {
  if (prompts.size() != answers.size() || prompts.empty())
    throw StructuralError("token batch needs aligned non-empty prompts/answers");
  const std::int64_t B = static_cast<std::int64_t>(prompts.size());
  const std::int64_t Tn = cfg.context_len;
  TokenBatch<T> batch;
  batch.tokens = Tensor<int>::full({B, Tn}, kPadToken);
  batch.targets = Tensor<int>::full({B, Tn}, kPadToken);
  batch.mask = Tensor<T>::zeros({B, Tn});
  for (std::int64_t b = 0; b < B; ++b) {
    const std::string& prompt = prompts[static_cast<std::size_t>(b)];
    const std::string& answer = answers[static_cast<std::size_t>(b)];
    std::vector<int> seq;
    seq.push_back(kBosToken);
    for (char c : prompt) seq.push_back(encode_char(c));
    seq.push_back(kSepToken);
    std::size_t answer_start = seq.size();  // first answer target index - 1
    for (char c : answer) seq.push_back(encode_char(c));
    seq.push_back(kEosToken);
    if (static_cast<std::int64_t>(seq.size()) > Tn + 1)
      throw DomainError("sequence longer than context (" +
                        std::to_string(seq.size() - 1) + " > " +
                        std::to_string(Tn) + "): " + prompt);
    for (std::size_t t = 0; t + 1 < seq.size(); ++t) {
      batch.tokens(b, static_cast<std::int64_t>(t)) = seq[t];
      batch.targets(b, static_cast<std::int64_t>(t)) = seq[t + 1];
      if (t + 1 >= answer_start)
        batch.mask(b, static_cast<std::int64_t>(t)) = T{1};
    }
  }
  return batch;
}

// ---------------------------------------------------------------------------
// Forward / loss / backward
// ---------------------------------------------------------------------------

template <typename T>
struct LayerCache {
  Tensor<T> x_in, n1, q, k, v, att, attn_concat, x_mid, n2, h_pre, h_act;
  Tensor<T> r1, r2;        // [B, T] rmsnorm inverse factors
  Tensor<T> aq_x, av_x;    // [B, T, rank] adapter down-projections (optional)
};

template <typename T>
struct ForwardCache {
  Tensor<T> x0;
  std::vector<LayerCache<T>> layers;
  Tensor<T> x_f, nf, rf, logits;
  double n_masked = 0.0;
};

namespace detail {

// y[b,t,:] = rms(x[b,t,:]) ⊙ g; r[b,t] = 1/sqrt(mean(x²)+eps)
template <typename T>
void rmsnorm_fwd(const Tensor<T>& x, const Tensor<T>& g, double eps,
                 Tensor<T>& y, Tensor<T>& r) {
  const std::int64_t B = x.dim(0), Tn = x.dim(1), D = x.dim(2);
  y.reset({B, Tn, D});
  r.reset({B, Tn});
  for (std::int64_t b = 0; b < B; ++b)
    for (std::int64_t t = 0; t < Tn; ++t) {
      double ss = 0.0;
      const T* xp = &x(b, t, 0);
      for (std::int64_t i = 0; i < D; ++i)
        ss += static_cast<double>(xp[i]) * static_cast<double>(xp[i]);
      T inv = static_cast<T>(1.0 / std::sqrt(ss / static_cast<double>(D) + eps));
      r(b, t) = inv;
      T* yp = &y(b, t, 0);
      for (std::int64_t i = 0; i < D; ++i) yp[i] = xp[i] * inv * g[i];
    }
}

// dx += rmsnorm backward; dg accumulated
template <typename T>
void rmsnorm_bwd(const Tensor<T>& x, const Tensor<T>& g, const Tensor<T>& r,
                 const Tensor<T>& dy, Tensor<T>& dx, Tensor<T>& dg) {
  const std::int64_t B = x.dim(0), Tn = x.dim(1), D = x.dim(2);
  for (std::int64_t b = 0; b < B; ++b)
    for (std::int64_t t = 0; t < Tn; ++t) {
      const T* xp = &x(b, t, 0);
      const T* dyp = &dy(b, t, 0);
      T* dxp = &dx(b, t, 0);
      const T inv = r(b, t);
      double dot = 0.0;
      for (std::int64_t i = 0; i < D; ++i)
        dot += static_cast<double>(dyp[i]) * static_cast<double>(g[i]) *
               static_cast<double>(xp[i]);
      const T coef = static_cast<T>(static_cast<double>(inv) *
                                    static_cast<double>(inv) *
                                    static_cast<double>(inv) * dot /
                                    static_cast<double>(D));
      for (std::int64_t i = 0; i < D; ++i) {
        dxp[i] += dyp[i] * g[i] * inv - coef * xp[i];
        dg[i] += dyp[i] * xp[i] * inv;
      }
    }
}

// y[b,t,o] = Σ_i W[o,i] x[b,t,i]
template <typename T>
void linear_fwd(const Tensor<T>& x, const Tensor<T>& w, Tensor<T>& y) {
  const std::int64_t B = x.dim(0), Tn = x.dim(1), In = x.dim(2), Out = w.dim(0);
  y.reset({B, Tn, Out});
  for (std::int64_t b = 0; b < B; ++b)
    for (std::int64_t t = 0; t < Tn; ++t) {
      const T* xp = &x(b, t, 0);
      T* yp = &y(b, t, 0);
      for (std::int64_t o = 0; o < Out; ++o) {
        const T* wp = &w(o, 0);
        T acc{0};
        for (std::int64_t i = 0; i < In; ++i) acc += wp[i] * xp[i];
        yp[o] = acc;
      }
    }
}

// dx += dy·W ; dW += Σ dy ⊗ x
template <typename T>
void linear_bwd(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& dy,
                Tensor<T>* dx, Tensor<T>* dw) {
  const std::int64_t B = x.dim(0), Tn = x.dim(1), In = x.dim(2), Out = w.dim(0);
  for (std::int64_t b = 0; b < B; ++b)
    for (std::int64_t t = 0; t < Tn; ++t) {
      const T* xp = &x(b, t, 0);
      const T* dyp = &dy(b, t, 0);
      for (std::int64_t o = 0; o < Out; ++o) {
        const T d = dyp[o];
        if (dw) {
          T* dwp = &(*dw)(o, 0);
          for (std::int64_t i = 0; i < In; ++i) dwp[i] += d * xp[i];
        }
        if (dx) {
          const T* wp = &w(o, 0);
          T* dxp = &(*dx)(b, t, 0);
          for (std::int64_t i = 0; i < In; ++i) dxp[i] += d * wp[i];
        }
      }
    }
}

// Adapter route: y += B (A x); caches ax = A x for the backward pass.
template <typename T>
void lora_fwd(const Tensor<T>& x, const Tensor<T>& A, const Tensor<T>& B,
              Tensor<T>& y, Tensor<T>& ax) {
  const std::int64_t Bn = x.dim(0), Tn = x.dim(1), In = x.dim(2);
  const std::int64_t R = A.dim(0), Out = B.dim(0);
  ax.reset({Bn, Tn, R});
  for (std::int64_t b = 0; b < Bn; ++b)
    for (std::int64_t t = 0; t < Tn; ++t) {
      const T* xp = &x(b, t, 0);
      T* axp = &ax(b, t, 0);
      for (std::int64_t r = 0; r < R; ++r) {
        const T* ap = &A(r, 0);
        T acc{0};
        for (std::int64_t i = 0; i < In; ++i) acc += ap[i] * xp[i];
        axp[r] = acc;
      }
      T* yp = &y(b, t, 0);
      for (std::int64_t o = 0; o < Out; ++o) {
        const T* bp = &B(o, 0);
        T acc{0};
        for (std::int64_t r = 0; r < R; ++r) acc += bp[r] * axp[r];
        yp[o] += acc;
      }
    }
}

// Backward of y += B (A x): accumulates dA, dB and dx.
template <typename T>
void lora_bwd(const Tensor<T>& x, const Tensor<T>& ax, const Tensor<T>& A,
              const Tensor<T>& B, const Tensor<T>& dy, Tensor<T>* dx,
              Tensor<T>& dA, Tensor<T>& dB) {
  const std::int64_t Bn = x.dim(0), Tn = x.dim(1), In = x.dim(2);
  const std::int64_t R = A.dim(0), Out = B.dim(0);
  std::vector<T> dax(static_cast<std::size_t>(R));
  for (std::int64_t b = 0; b < Bn; ++b)
    for (std::int64_t t = 0; t < Tn; ++t) {
      const T* dyp = &dy(b, t, 0);
      const T* axp = &ax(b, t, 0);
      const T* xp = &x(b, t, 0);
      for (std::int64_t r = 0; r < R; ++r) dax[static_cast<std::size_t>(r)] = T{0};
      for (std::int64_t o = 0; o < Out; ++o) {
        const T d = dyp[o];
        T* dbp = &dB(o, 0);
        const T* bp = &B(o, 0);
        for (std::int64_t r = 0; r < R; ++r) {
          dbp[r] += d * axp[r];
          dax[static_cast<std::size_t>(r)] += d * bp[r];
        }
      }
      for (std::int64_t r = 0; r < R; ++r) {
        const T dr = dax[static_cast<std::size_t>(r)];
        T* dap = &dA(r, 0);
        for (std::int64_t i = 0; i < In; ++i) dap[i] += dr * xp[i];
        if (dx) {
          const T* ap = &A(r, 0);
          T* dxp = &(*dx)(b, t, 0);
          for (std::int64_t i = 0; i < In; ++i) dxp[i] += dr * ap[i];
        }
      }
    }
}

}  // namespace detail

// Full-batch forward. Returns mean cross-entropy over masked targets and
// fills the cache for backward. `lora` may be null (plain backbone).
template <typename T>
double forward_loss(const Backbone<T>& model, const LoRAAdapter<T>* lora,
                    const TokenBatch<T>& batch, ForwardCache<T>& cache) {
  const BackboneConfig& cfg = model.cfg;
  const std::int64_t B = batch.tokens.dim(0), Tn = batch.tokens.dim(1);
  const std::int64_t D = cfg.d_model, H = cfg.n_heads, Dh = cfg.head_dim();
  const std::int64_t F = cfg.d_ff, V = cfg.vocab_size;
  const double scale = 1.0 / std::sqrt(static_cast<double>(Dh));
  if (Tn > cfg.context_len)
    throw StructuralError("batch longer than the model context");

  cache.layers.assign(static_cast<std::size_t>(cfg.n_layers), LayerCache<T>{});
  cache.x0.reset({B, Tn, D});
  for (std::int64_t b = 0; b < B; ++b)
    for (std::int64_t t = 0; t < Tn; ++t) {
      int tok = batch.tokens(b, t);
      if (tok < 0 || tok >= cfg.vocab_size)
        throw StructuralError("token id out of range: " + std::to_string(tok));
      for (std::int64_t i = 0; i < D; ++i)
        cache.x0(b, t, i) = model.tok_emb(tok, i) + model.pos_emb(t, i);
    }

  Tensor<T> x = cache.x0;
  for (int li = 0; li < cfg.n_layers; ++li) {
    const BackboneLayer<T>& L = model.layers[static_cast<std::size_t>(li)];
    LayerCache<T>& C = cache.layers[static_cast<std::size_t>(li)];
    C.x_in = x;
    detail::rmsnorm_fwd(C.x_in, L.norm1_g, cfg.norm_eps, C.n1, C.r1);
    detail::linear_fwd(C.n1, L.wq, C.q);
    detail::linear_fwd(C.n1, L.wk, C.k);
    detail::linear_fwd(C.n1, L.wv, C.v);
    if (lora) {
      const std::string base = "layers." + std::to_string(li) + ".attn.";
      int iq = lora->target_index(base + "wq");
      int iv = lora->target_index(base + "wv");
      if (iq >= 0)
        detail::lora_fwd(C.n1, lora->A[static_cast<std::size_t>(iq)],
                         lora->B[static_cast<std::size_t>(iq)], C.q, C.aq_x);
      if (iv >= 0)
        detail::lora_fwd(C.n1, lora->A[static_cast<std::size_t>(iv)],
                         lora->B[static_cast<std::size_t>(iv)], C.v, C.av_x);
    }
    // causal multi-head attention
    C.att.reset({B, H, Tn, Tn});
    C.attn_concat = Tensor<T>::zeros({B, Tn, D});
    for (std::int64_t b = 0; b < B; ++b)
      for (std::int64_t h = 0; h < H; ++h) {
        const std::int64_t off = h * Dh;
        for (std::int64_t t = 0; t < Tn; ++t) {
          double maxs = -1e30;
          std::vector<double> scores(static_cast<std::size_t>(t + 1));
          for (std::int64_t s = 0; s <= t; ++s) {
            double acc = 0.0;
            const T* qp = &C.q(b, t, off);
            const T* kp = &C.k(b, s, off);
            for (std::int64_t j = 0; j < Dh; ++j)
              acc += static_cast<double>(qp[j]) * static_cast<double>(kp[j]);
            acc *= scale;
            scores[static_cast<std::size_t>(s)] = acc;
            maxs = std::max(maxs, acc);
          }
          double denom = 0.0;
          for (std::int64_t s = 0; s <= t; ++s)
            denom += std::exp(scores[static_cast<std::size_t>(s)] - maxs);
          T* ap = &C.att(b, h, t, 0);
          for (std::int64_t s = 0; s <= t; ++s)
            ap[s] = static_cast<T>(
                std::exp(scores[static_cast<std::size_t>(s)] - maxs) / denom);
          T* op = &C.attn_concat(b, t, off);
          for (std::int64_t s = 0; s <= t; ++s) {
            const T a = ap[s];
            const T* vp = &C.v(b, s, off);
            for (std::int64_t j = 0; j < Dh; ++j) op[j] += a * vp[j];
          }
        }
      }
    Tensor<T> proj;
    detail::linear_fwd(C.attn_concat, L.wo, proj);
    C.x_mid.reset({B, Tn, D});
    for (std::int64_t i = 0; i < C.x_mid.numel(); ++i)
      C.x_mid[i] = C.x_in[i] + proj[i];
    detail::rmsnorm_fwd(C.x_mid, L.norm2_g, cfg.norm_eps, C.n2, C.r2);
    detail::linear_fwd(C.n2, L.w1, C.h_pre);
    C.h_act.reset({B, Tn, F});
    for (std::int64_t i = 0; i < C.h_pre.numel(); ++i)
      C.h_act[i] = gelu(C.h_pre[i]);
    Tensor<T> ff;
    detail::linear_fwd(C.h_act, L.w2, ff);
    x.reset({B, Tn, D});
    for (std::int64_t i = 0; i < x.numel(); ++i) x[i] = C.x_mid[i] + ff[i];
  }
  cache.x_f = x;
  detail::rmsnorm_fwd(cache.x_f, model.norm_f_g, cfg.norm_eps, cache.nf,
                      cache.rf);
  detail::linear_fwd(cache.nf, model.head, cache.logits);

  double n_masked = 0.0, loss = 0.0;
  for (std::int64_t b = 0; b < B; ++b)
    for (std::int64_t t = 0; t < Tn; ++t) {
      if (batch.mask(b, t) == T{0}) continue;
      n_masked += 1.0;
      const T* lp = &cache.logits(b, t, 0);
      double maxl = -1e30;
      for (std::int64_t vtok = 0; vtok < V; ++vtok)
        maxl = std::max(maxl, static_cast<double>(lp[vtok]));
      double denom = 0.0;
      for (std::int64_t vtok = 0; vtok < V; ++vtok)
        denom += std::exp(static_cast<double>(lp[vtok]) - maxl);
      int target = batch.targets(b, t);
      loss -= static_cast<double>(lp[target]) - maxl - std::log(denom);
    }
  if (n_masked == 0.0) throw StructuralError("batch has no masked targets");
  cache.n_masked = n_masked;
  return loss / n_masked;
}

// Backward for forward_loss. `grads` may be null when only adapter gradients
// are needed (frozen backbone); `lora`/`lora_grads` may be null for plain
// training. Gradients accumulate.
template <typename T>
void backward(const Backbone<T>& model, const LoRAAdapter<T>* lora,
              const TokenBatch<T>& batch, const ForwardCache<T>& cache,
              Backbone<T>* grads, LoRAAdapter<T>* lora_grads) {
  const BackboneConfig& cfg = model.cfg;
  const std::int64_t B = batch.tokens.dim(0), Tn = batch.tokens.dim(1);
  const std::int64_t D = cfg.d_model, H = cfg.n_heads, Dh = cfg.head_dim();
  const std::int64_t V = cfg.vocab_size;
  const double scale = 1.0 / std::sqrt(static_cast<double>(Dh));
  if ((lora == nullptr) != (lora_grads == nullptr))
    throw StructuralError("adapter gradients need the adapter and vice versa");

  // dlogits = mask/n · (softmax - onehot)
  Tensor<T> dlogits = Tensor<T>::zeros({B, Tn, V});
  for (std::int64_t b = 0; b < B; ++b)
    for (std::int64_t t = 0; t < Tn; ++t) {
      if (batch.mask(b, t) == T{0}) continue;
      const T* lp = &cache.logits(b, t, 0);
      double maxl = -1e30;
      for (std::int64_t vtok = 0; vtok < V; ++vtok)
        maxl = std::max(maxl, static_cast<double>(lp[vtok]));
      double denom = 0.0;
      for (std::int64_t vtok = 0; vtok < V; ++vtok)
        denom += std::exp(static_cast<double>(lp[vtok]) - maxl);
      T* dp = &dlogits(b, t, 0);
      for (std::int64_t vtok = 0; vtok < V; ++vtok)
        dp[vtok] = static_cast<T>(
            std::exp(static_cast<double>(lp[vtok]) - maxl) / denom /
            cache.n_masked);
      dp[batch.targets(b, t)] -= static_cast<T>(1.0 / cache.n_masked);
    }

  Tensor<T> dnf = Tensor<T>::zeros({B, Tn, D});
  detail::linear_bwd(cache.nf, model.head, dlogits, &dnf,
                     grads ? &grads->head : nullptr);
  Tensor<T> dx = Tensor<T>::zeros({B, Tn, D});
  {
    Tensor<T> dg_scratch;
    Tensor<T>* dgf = grads ? &grads->norm_f_g : nullptr;
    if (!dgf) {
      dg_scratch = Tensor<T>::zeros({D});
      dgf = &dg_scratch;
    }
    detail::rmsnorm_bwd(cache.x_f, model.norm_f_g, cache.rf, dnf, dx, *dgf);
  }

  for (int li = cfg.n_layers - 1; li >= 0; --li) {
    const BackboneLayer<T>& L = model.layers[static_cast<std::size_t>(li)];
    const LayerCache<T>& C = cache.layers[static_cast<std::size_t>(li)];
    BackboneLayer<T>* G =
        grads ? &grads->layers[static_cast<std::size_t>(li)] : nullptr;

    // feed-forward half: x_out = x_mid + W2·gelu(W1·rms2(x_mid))
    Tensor<T> dff = dx;  // gradient wrt the ff output
    Tensor<T> dh_act = Tensor<T>::zeros(C.h_act.shape());
    detail::linear_bwd(C.h_act, L.w2, dff, &dh_act, G ? &G->w2 : nullptr);
    Tensor<T> dh_pre(C.h_pre.shape());
    for (std::int64_t i = 0; i < dh_pre.numel(); ++i)
      dh_pre[i] = dh_act[i] * gelu_grad(C.h_pre[i]);
    Tensor<T> dn2 = Tensor<T>::zeros(C.n2.shape());
    detail::linear_bwd(C.n2, L.w1, dh_pre, &dn2, G ? &G->w1 : nullptr);
    Tensor<T> dx_mid = dx;  // residual path
    {
      Tensor<T> dg_scratch;
      Tensor<T>* dg2 = G ? &G->norm2_g : nullptr;
      if (!dg2) {
        dg_scratch = Tensor<T>::zeros({D});
        dg2 = &dg_scratch;
      }
      detail::rmsnorm_bwd(C.x_mid, L.norm2_g, C.r2, dn2, dx_mid, *dg2);
    }

    // attention half: x_mid = x_in + Wo·attn
    Tensor<T> dattn_concat = Tensor<T>::zeros({B, Tn, D});
    detail::linear_bwd(C.attn_concat, L.wo, dx_mid, &dattn_concat,
                       G ? &G->wo : nullptr);
    Tensor<T> dq = Tensor<T>::zeros({B, Tn, D});
    Tensor<T> dk = Tensor<T>::zeros({B, Tn, D});
    Tensor<T> dv = Tensor<T>::zeros({B, Tn, D});
    std::vector<double> datt(static_cast<std::size_t>(Tn));
    for (std::int64_t b = 0; b < B; ++b)
      for (std::int64_t h = 0; h < H; ++h) {
        const std::int64_t off = h * Dh;
        for (std::int64_t t = 0; t < Tn; ++t) {
          const T* dop = &dattn_concat(b, t, off);
          const T* ap = &C.att(b, h, t, 0);
          double dot = 0.0;
          for (std::int64_t s = 0; s <= t; ++s) {
            const T* vp = &C.v(b, s, off);
            double acc = 0.0;
            for (std::int64_t j = 0; j < Dh; ++j)
              acc += static_cast<double>(dop[j]) * static_cast<double>(vp[j]);
            datt[static_cast<std::size_t>(s)] = acc;
            dot += acc * static_cast<double>(ap[s]);
            // dv from this (t, s) pair
            T* dvp = &dv(b, s, off);
            const T a = ap[s];
            for (std::int64_t j = 0; j < Dh; ++j) dvp[j] += a * dop[j];
          }
          for (std::int64_t s = 0; s <= t; ++s) {
            const double dscore =
                static_cast<double>(ap[s]) *
                (datt[static_cast<std::size_t>(s)] - dot) * scale;
            const T* kp = &C.k(b, s, off);
            const T* qp = &C.q(b, t, off);
            T* dqp = &dq(b, t, off);
            T* dkp = &dk(b, s, off);
            for (std::int64_t j = 0; j < Dh; ++j) {
              dqp[j] += static_cast<T>(dscore * static_cast<double>(kp[j]));
              dkp[j] += static_cast<T>(dscore * static_cast<double>(qp[j]));
            }
          }
        }
      }

    Tensor<T> dn1 = Tensor<T>::zeros(C.n1.shape());
    detail::linear_bwd(C.n1, L.wq, dq, &dn1, G ? &G->wq : nullptr);
    detail::linear_bwd(C.n1, L.wk, dk, &dn1, G ? &G->wk : nullptr);
    detail::linear_bwd(C.n1, L.wv, dv, &dn1, G ? &G->wv : nullptr);
    if (lora) {
      const std::string base = "layers." + std::to_string(li) + ".attn.";
      int iq = lora->target_index(base + "wq");
      int iv = lora->target_index(base + "wv");
      if (iq >= 0)
        detail::lora_bwd(C.n1, C.aq_x, lora->A[static_cast<std::size_t>(iq)],
                         lora->B[static_cast<std::size_t>(iq)], dq, &dn1,
                         lora_grads->A[static_cast<std::size_t>(iq)],
                         lora_grads->B[static_cast<std::size_t>(iq)]);
      if (iv >= 0)
        detail::lora_bwd(C.n1, C.av_x, lora->A[static_cast<std::size_t>(iv)],
                         lora->B[static_cast<std::size_t>(iv)], dv, &dn1,
                         lora_grads->A[static_cast<std::size_t>(iv)],
                         lora_grads->B[static_cast<std::size_t>(iv)]);
    }
    Tensor<T> dx_in = dx_mid;  // residual path
    {
      Tensor<T> dg_scratch;
      Tensor<T>* dg1 = G ? &G->norm1_g : nullptr;
      if (!dg1) {
        dg_scratch = Tensor<T>::zeros({D});
        dg1 = &dg_scratch;
      }
      detail::rmsnorm_bwd(C.x_in, L.norm1_g, C.r1, dn1, dx_in, *dg1);
    }
    dx = std::move(dx_in);
  }

  if (grads) {
    for (std::int64_t b = 0; b < B; ++b)
      for (std::int64_t t = 0; t < Tn; ++t) {
        int tok = batch.tokens(b, t);
        for (std::int64_t i = 0; i < D; ++i) {
          grads->tok_emb(tok, i) += dx(b, t, i);
          grads->pos_emb(t, i) += dx(b, t, i);
        }
      }
  }
}

template <typename T>
double forward_loss(const Backbone<T>& model, const TokenBatch<T>& batch,
                    ForwardCache<T>& cache) {
  return forward_loss(model, static_cast<const LoRAAdapter<T>*>(nullptr),
                      batch, cache);
}

template <typename T>
void backward(const Backbone<T>& model, const TokenBatch<T>& batch,
              const ForwardCache<T>& cache, Backbone<T>* grads) {
  backward(model, static_cast<const LoRAAdapter<T>*>(nullptr), batch, cache,
           grads, static_cast<LoRAAdapter<T>*>(nullptr));
}

// ---------------------------------------------------------------------------
// Greedy decoding with a per-layer KV cache
// ---------------------------------------------------------------------------

template <typename T>
std::string generate_answer(const Backbone<T>& model,
                            const LoRAAdapter<T>* lora,
                            const std::string& prompt, int max_new = 12) {
  const BackboneConfig& cfg = model.cfg;
  const std::int64_t D = cfg.d_model, H = cfg.n_heads, Dh = cfg.head_dim();
  const std::int64_t F = cfg.d_ff, V = cfg.vocab_size;
  const double scale = 1.0 / std::sqrt(static_cast<double>(Dh));

  std::vector<int> seq;
  seq.push_back(kBosToken);
  for (char c : prompt) seq.push_back(encode_char(c));
  seq.push_back(kSepToken);
  if (static_cast<std::int64_t>(seq.size()) >= cfg.context_len)
    throw DomainError("prompt does not fit the model context: " + prompt);

  struct KV {
    std::vector<T> k, v;  // t-major rows of size D
  };
  std::vector<KV> kv(static_cast<std::size_t>(cfg.n_layers));

  std::string answer;
  std::vector<T> x(static_cast<std::size_t>(D));
  std::vector<T> n1(static_cast<std::size_t>(D)), q(static_cast<std::size_t>(D)),
      krow(static_cast<std::size_t>(D)), vrow(static_cast<std::size_t>(D)),
      attn_out(static_cast<std::size_t>(D)), proj(static_cast<std::size_t>(D)),
      n2(static_cast<std::size_t>(D)), ff(static_cast<std::size_t>(D));
  std::vector<T> h(static_cast<std::size_t>(F));
  std::vector<T> logits(static_cast<std::size_t>(V));
  std::vector<T> ax;

  auto rms_vec = [&](const std::vector<T>& in, const Tensor<T>& g,
                     std::vector<T>& out) {
    double ss = 0.0;
    for (std::int64_t i = 0; i < D; ++i)
      ss += static_cast<double>(in[static_cast<std::size_t>(i)]) *
            static_cast<double>(in[static_cast<std::size_t>(i)]);
    T inv = static_cast<T>(
        1.0 / std::sqrt(ss / static_cast<double>(D) + cfg.norm_eps));
    for (std::int64_t i = 0; i < D; ++i)
      out[static_cast<std::size_t>(i)] =
          in[static_cast<std::size_t>(i)] * inv * g[i];
  };
  auto mat_vec = [](const Tensor<T>& w, const std::vector<T>& in,
                    std::vector<T>& out) {
    const std::int64_t Out = w.dim(0), In = w.dim(1);
    for (std::int64_t o = 0; o < Out; ++o) {
      const T* wp = &w(o, 0);
      T acc{0};
      for (std::int64_t i = 0; i < In; ++i)
        acc += wp[i] * in[static_cast<std::size_t>(i)];
      out[static_cast<std::size_t>(o)] = acc;
    }
  };
  auto lora_vec = [&](const Tensor<T>& A, const Tensor<T>& Bm,
                      const std::vector<T>& in, std::vector<T>& out) {
    const std::int64_t R = A.dim(0), In = A.dim(1), Out = Bm.dim(0);
    ax.assign(static_cast<std::size_t>(R), T{0});
    for (std::int64_t r = 0; r < R; ++r) {
      const T* apn = &A(r, 0);
      T acc{0};
      for (std::int64_t i = 0; i < In; ++i)
        acc += apn[i] * in[static_cast<std::size_t>(i)];
      ax[static_cast<std::size_t>(r)] = acc;
    }
    for (std::int64_t o = 0; o < Out; ++o) {
      const T* bp = &Bm(o, 0);
      T acc{0};
      for (std::int64_t r = 0; r < R; ++r)
        acc += bp[r] * ax[static_cast<std::size_t>(r)];
      out[static_cast<std::size_t>(o)] += acc;
    }
  };

  int next_token = -1;
  for (std::int64_t t = 0;
       t < cfg.context_len && static_cast<int>(answer.size()) < max_new; ++t) {
    int tok;
    if (t < static_cast<std::int64_t>(seq.size()))
      tok = seq[static_cast<std::size_t>(t)];
    else
      tok = next_token;
    for (std::int64_t i = 0; i < D; ++i)
      x[static_cast<std::size_t>(i)] = model.tok_emb(tok, i) + model.pos_emb(t, i);

    for (int li = 0; li < cfg.n_layers; ++li) {
      const BackboneLayer<T>& L = model.layers[static_cast<std::size_t>(li)];
      KV& cacheL = kv[static_cast<std::size_t>(li)];
      rms_vec(x, L.norm1_g, n1);
      mat_vec(L.wq, n1, q);
      mat_vec(L.wk, n1, krow);
      mat_vec(L.wv, n1, vrow);
      if (lora) {
        const std::string base = "layers." + std::to_string(li) + ".attn.";
        int iq = lora->target_index(base + "wq");
        int iv = lora->target_index(base + "wv");
        if (iq >= 0)
          lora_vec(lora->A[static_cast<std::size_t>(iq)],
                   lora->B[static_cast<std::size_t>(iq)], n1, q);
        if (iv >= 0)
          lora_vec(lora->A[static_cast<std::size_t>(iv)],
                   lora->B[static_cast<std::size_t>(iv)], n1, vrow);
      }
      cacheL.k.insert(cacheL.k.end(), krow.begin(), krow.end());
      cacheL.v.insert(cacheL.v.end(), vrow.begin(), vrow.end());
      const std::int64_t steps = t + 1;
      for (std::int64_t hh = 0; hh < H; ++hh) {
        const std::int64_t off = hh * Dh;
        double maxs = -1e30;
        std::vector<double> scores(static_cast<std::size_t>(steps));
        for (std::int64_t s = 0; s < steps; ++s) {
          const T* kp = &cacheL.k[static_cast<std::size_t>(s * D + off)];
          double acc = 0.0;
          for (std::int64_t j = 0; j < Dh; ++j)
            acc += static_cast<double>(q[static_cast<std::size_t>(off + j)]) *
                   static_cast<double>(kp[j]);
          acc *= scale;
          scores[static_cast<std::size_t>(s)] = acc;
          maxs = std::max(maxs, acc);
        }
        double denom = 0.0;
        for (std::int64_t s = 0; s < steps; ++s)
          denom += std::exp(scores[static_cast<std::size_t>(s)] - maxs);
        for (std::int64_t j = 0; j < Dh; ++j)
          attn_out[static_cast<std::size_t>(off + j)] = T{0};
        for (std::int64_t s = 0; s < steps; ++s) {
          T a = static_cast<T>(
              std::exp(scores[static_cast<std::size_t>(s)] - maxs) / denom);
          const T* vp = &cacheL.v[static_cast<std::size_t>(s * D + off)];
          for (std::int64_t j = 0; j < Dh; ++j)
            attn_out[static_cast<std::size_t>(off + j)] += a * vp[j];
        }
      }
      mat_vec(L.wo, attn_out, proj);
      for (std::int64_t i = 0; i < D; ++i)
        x[static_cast<std::size_t>(i)] += proj[static_cast<std::size_t>(i)];
      rms_vec(x, L.norm2_g, n2);
      mat_vec(L.w1, n2, h);
      for (std::int64_t i = 0; i < F; ++i)
        h[static_cast<std::size_t>(i)] = gelu(h[static_cast<std::size_t>(i)]);
      mat_vec(L.w2, h, ff);
      for (std::int64_t i = 0; i < D; ++i)
        x[static_cast<std::size_t>(i)] += ff[static_cast<std::size_t>(i)];
    }

    // only positions at/after the SEP produce answer tokens
    if (t + 1 < static_cast<std::int64_t>(seq.size())) continue;
    rms_vec(x, model.norm_f_g, n1);
    mat_vec(model.head, n1, logits);
    int best = 0;
    for (std::int64_t vtok = 1; vtok < V; ++vtok)
      if (logits[static_cast<std::size_t>(vtok)] >
          logits[static_cast<std::size_t>(best)])
        best = static_cast<int>(vtok);
    if (best == kEosToken) break;
    if (best == kPadToken || best == kBosToken || best == kSepToken) break;
    answer.push_back(decode_char(best));
    next_token = best;
  }
  return answer;
}

template <typename T>
std::string generate_answer(const Backbone<T>& model, const std::string& prompt,
                            int max_new = 12) {
  return generate_answer(model, static_cast<const LoRAAdapter<T>*>(nullptr),
                         prompt, max_new);
}

// ---------------------------------------------------------------------------
// Serialization
// ---------------------------------------------------------------------------

template <typename T>
WeightFile backbone_to_weight_file(Backbone<T>& model) {
  WeightFile wf;
  wf.meta["kind"] = "backbone";
  wf.meta["vocab_size"] = std::to_string(model.cfg.vocab_size);
  wf.meta["context_len"] = std::to_string(model.cfg.context_len);
  wf.meta["d_model"] = std::to_string(model.cfg.d_model);
  wf.meta["n_layers"] = std::to_string(model.cfg.n_layers);
  wf.meta["n_heads"] = std::to_string(model.cfg.n_heads);
  wf.meta["d_ff"] = std::to_string(model.cfg.d_ff);
  model.for_each_param([&](const std::string& name, Tensor<T>& t) {
    if constexpr (std::is_same_v<T, float>) {
      wf.add(name, t);
    } else {
      Tensor<float> f = t.template cast<float>();
      wf.add(name, f);
    }
  });
  return wf;
}

template <typename T = float>
Backbone<T> backbone_from_weight_file(const WeightFile& wf) {
  if (wf.meta_or("kind", "") != "backbone")
    throw StructuralError("weight file is not a backbone checkpoint");
  BackboneConfig cfg;
  cfg.vocab_size = std::stoi(wf.meta_or("vocab_size", "0"));
  cfg.context_len = std::stoi(wf.meta_or("context_len", "0"));
  cfg.d_model = std::stoi(wf.meta_or("d_model", "0"));
  cfg.n_layers = std::stoi(wf.meta_or("n_layers", "0"));
  cfg.n_heads = std::stoi(wf.meta_or("n_heads", "0"));
  cfg.d_ff = std::stoi(wf.meta_or("d_ff", "0"));
  cfg.validate();
  Backbone<T> m = init_backbone<T>(cfg, 0);
  m.for_each_param([&](const std::string& name, Tensor<T>& t) {
    Tensor<float> f = wf.get(name);
    check_same_shape(f, t.template cast<float>(), name.c_str());
    t = f.template cast<T>();
  });
  return m;
}

template <typename T>
WeightFile lora_to_weight_file(const LoRAAdapter<T>& ad) {
  WeightFile wf;
  wf.meta["kind"] = "lora";
  wf.meta["task_id"] = ad.task_id;
  wf.meta["step_id"] = ad.step_id;
  wf.meta["rank"] = std::to_string(ad.rank);
  std::string joined;
  for (std::size_t i = 0; i < ad.targets.size(); ++i)
    joined += (i ? "," : "") + ad.targets[i];
  wf.meta["targets"] = joined;
  for (std::size_t i = 0; i < ad.targets.size(); ++i) {
    if constexpr (std::is_same_v<T, float>) {
      wf.add(ad.targets[i] + ".A", ad.A[i]);
      wf.add(ad.targets[i] + ".B", ad.B[i]);
    } else {
      Tensor<float> fa = ad.A[i].template cast<float>();
      Tensor<float> fb = ad.B[i].template cast<float>();
      wf.add(ad.targets[i] + ".A", fa);
      wf.add(ad.targets[i] + ".B", fb);
    }
  }
  return wf;
}

template <typename T = float>
LoRAAdapter<T> lora_from_weight_file(const WeightFile& wf) {
  if (wf.meta_or("kind", "") != "lora")
    throw StructuralError("weight file is not an adapter checkpoint");
  LoRAAdapter<T> ad;
  ad.task_id = wf.meta_or("task_id", "");
  ad.step_id = wf.meta_or("step_id", "");
  ad.rank = std::stoi(wf.meta_or("rank", "0"));
  std::string joined = wf.meta_or("targets", "");
  std::size_t pos = 0;
  while (pos <= joined.size() && !joined.empty()) {
    std::size_t comma = joined.find(',', pos);
    if (comma == std::string::npos) comma = joined.size();
    ad.targets.push_back(joined.substr(pos, comma - pos));
    pos = comma + 1;
    if (pos > joined.size()) break;
  }
  for (const auto& name : ad.targets) {
    ad.A.push_back(wf.get(name + ".A").template cast<T>());
    ad.B.push_back(wf.get(name + ".B").template cast<T>());
    if (ad.A.back().dim(0) != ad.rank || ad.B.back().dim(1) != ad.rank)
      throw StructuralError("adapter rank does not match tensor shapes");
  }
  return ad;
}

}  // namespace hyperlora
