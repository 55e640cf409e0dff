#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "hyperlora/errors.hpp"
#include "hyperlora/nn_common.hpp"
#include "hyperlora/rng.hpp"
#include "hyperlora/serialize.hpp"
#include "hyperlora/tensor.hpp"

namespace hyperlora {

// ---------------------------------------------------------------------------
// Cascaded hyper-convolutional decoder.
//
// Every block maps a [N, L, C] tensor to [N', L', C'] through three conv
// roles, each a 2D convolution over one plane of the cube with the remaining
// axis as channels:
//   * W role: channels N, plane (L, C), resizes C  (x-axis = C)
//   * H role: channels C, plane (N, L), resizes L  (x-axis = L)
//   * L role: channels C, plane (L, N), resizes N  (x-axis = N)
// Two branches compute the same [N, L', C'] shape in opposite role order,
// then the block combines them with a learned bias tensor:
//   c_W = Conv1_H(Conv1_W(x));  c_H = Conv2_W(Conv2_H(x))
//   out = Conv_L((c_W + c_H + b) / 3)
// GELU follows each branch conv (toggleable); the combining Conv_L is linear.
//
// Resizing happens only on a conv's x-axis: an integer shrink uses a strided
// conv (TF-style "same" padding); anything else nearest-resizes the x-axis
// first and then applies a stride-1 conv.
// ---------------------------------------------------------------------------

struct BlockSpec {
  std::int64_t n_in = 0, l_in = 0, c_in = 0;
  std::int64_t n_out = 0, l_out = 0, c_out = 0;
  int kernel = 3;
  bool gelu = true;

  nlohmann::ordered_json to_json() const {
    return nlohmann::ordered_json{{"in", {n_in, l_in, c_in}},
                                  {"out", {n_out, l_out, c_out}},
                                  {"kernel", kernel},
                                  {"gelu", gelu}};
  }

  static BlockSpec from_json(const nlohmann::json& j) {
    BlockSpec b;
    auto in = j.at("in");
    auto out = j.at("out");
    b.n_in = in.at(0).get<std::int64_t>();
    b.l_in = in.at(1).get<std::int64_t>();
    b.c_in = in.at(2).get<std::int64_t>();
    b.n_out = out.at(0).get<std::int64_t>();
    b.l_out = out.at(1).get<std::int64_t>();
    b.c_out = out.at(2).get<std::int64_t>();
    b.kernel = j.at("kernel").get<int>();
    b.gelu = j.at("gelu").get<bool>();
    return b;
  }
};

struct DecoderSpec {
  std::vector<BlockSpec> blocks;

  void validate() const {
    if (blocks.empty()) throw ConfigError("decoder needs at least one block");
    for (std::size_t i = 0; i < blocks.size(); ++i) {
      const BlockSpec& b = blocks[i];
      for (std::int64_t d : {b.n_in, b.l_in, b.c_in, b.n_out, b.l_out, b.c_out})
        if (d < 1)
          throw ConfigError("decoder block " + std::to_string(i) +
                            " has non-positive dims");
      if (b.kernel < 1 || b.kernel % 2 == 0)
        throw ConfigError("decoder kernels must be odd and positive");
      if (i > 0) {
        const BlockSpec& prev = blocks[i - 1];
        if (prev.n_out != b.n_in || prev.l_out != b.l_in ||
            prev.c_out != b.c_in)
          throw ConfigError("decoder block " + std::to_string(i) +
                            " input does not chain from block " +
                            std::to_string(i - 1));
      }
    }
  }

  std::vector<std::int64_t> in_shape() const {
    return {blocks.front().n_in, blocks.front().l_in, blocks.front().c_in};
  }
  std::vector<std::int64_t> out_shape() const {
    return {blocks.back().n_out, blocks.back().l_out, blocks.back().c_out};
  }

  nlohmann::ordered_json to_json() const {
    nlohmann::ordered_json arr = nlohmann::ordered_json::array();
    for (const auto& b : blocks) arr.push_back(b.to_json());
    return nlohmann::ordered_json{{"blocks", arr}};
  }

  static DecoderSpec from_json(const nlohmann::json& j) {
    DecoderSpec s;
    for (const auto& jb : j.at("blocks")) s.blocks.push_back(BlockSpec::from_json(jb));
    s.validate();
    return s;
  }
};

template <typename T>
struct ConvParams {
  Tensor<T> kernel;  // [CH, CH, ky, kx]
  Tensor<T> bias;    // [CH]
};

template <typename T>
struct DecoderBlock {
  ConvParams<T> w1, h1;     // branch 1: W then H
  ConvParams<T> h2, w2;     // branch 2: H then W
  ConvParams<T> convl;      // combining conv, L role
  Tensor<T> bias;           // [N_in, L_out, C_out]
};

template <typename T>
struct HyperDecoder {
  DecoderSpec spec;
  std::vector<DecoderBlock<T>> blocks;

  void for_each_param(
      const std::function<void(const std::string&, Tensor<T>&)>& fn) {
    for (std::size_t i = 0; i < blocks.size(); ++i) {
      const std::string p = "blocks." + std::to_string(i) + ".";
      fn(p + "w1.kernel", blocks[i].w1.kernel);
      fn(p + "w1.bias", blocks[i].w1.bias);
      fn(p + "h1.kernel", blocks[i].h1.kernel);
      fn(p + "h1.bias", blocks[i].h1.bias);
      fn(p + "h2.kernel", blocks[i].h2.kernel);
      fn(p + "h2.bias", blocks[i].h2.bias);
      fn(p + "w2.kernel", blocks[i].w2.kernel);
      fn(p + "w2.bias", blocks[i].w2.bias);
      fn(p + "convl.kernel", blocks[i].convl.kernel);
      fn(p + "convl.bias", blocks[i].convl.bias);
      fn(p + "bias", blocks[i].bias);
    }
  }

  std::int64_t param_count() {
    std::int64_t n = 0;
    for_each_param([&](const std::string&, Tensor<T>& t) { n += t.numel(); });
    return n;
  }
};

namespace detail {

// --- axis-role permutations -------------------------------------------------

enum class ConvRole { kW, kH, kL };

// [N, L, C] -> [CH, Y, X] for the role
template <typename T>
Tensor<T> permute_to_role(const Tensor<T>& x, ConvRole role) {
  const std::int64_t N = x.dim(0), L = x.dim(1), C = x.dim(2);
  switch (role) {
    case ConvRole::kW:
      return x;  // already [N(ch), L(y), C(x)]
    case ConvRole::kH: {
      Tensor<T> out({C, N, L});
      for (std::int64_t n = 0; n < N; ++n)
        for (std::int64_t l = 0; l < L; ++l)
          for (std::int64_t c = 0; c < C; ++c) out(c, n, l) = x(n, l, c);
      return out;
    }
    case ConvRole::kL: {
      Tensor<T> out({C, L, N});
      for (std::int64_t n = 0; n < N; ++n)
        for (std::int64_t l = 0; l < L; ++l)
          for (std::int64_t c = 0; c < C; ++c) out(c, l, n) = x(n, l, c);
      return out;
    }
  }
  throw StructuralError("invalid conv role");
}

// [CH, Y, X] -> [N, L, C]
template <typename T>
Tensor<T> permute_from_role(const Tensor<T>& x, ConvRole role) {
  switch (role) {
    case ConvRole::kW:
      return x;
    case ConvRole::kH: {
      const std::int64_t C = x.dim(0), N = x.dim(1), L = x.dim(2);
      Tensor<T> out({N, L, C});
      for (std::int64_t c = 0; c < C; ++c)
        for (std::int64_t n = 0; n < N; ++n)
          for (std::int64_t l = 0; l < L; ++l) out(n, l, c) = x(c, n, l);
      return out;
    }
    case ConvRole::kL: {
      const std::int64_t C = x.dim(0), L = x.dim(1), N = x.dim(2);
      Tensor<T> out({N, L, C});
      for (std::int64_t c = 0; c < C; ++c)
        for (std::int64_t l = 0; l < L; ++l)
          for (std::int64_t n = 0; n < N; ++n) out(n, l, c) = x(c, l, n);
      return out;
    }
  }
  throw StructuralError("invalid conv role");
}

// --- nearest-neighbour x-axis resize ----------------------------------------

inline std::int64_t nearest_src(std::int64_t dst, std::int64_t in,
                                std::int64_t out) {
  return dst * in / out;  // floor; matches the usual nearest-resize convention
}

template <typename T>
Tensor<T> resize_x_nearest(const Tensor<T>& x, std::int64_t x_out) {
  const std::int64_t CH = x.dim(0), Y = x.dim(1), X = x.dim(2);
  Tensor<T> out({CH, Y, x_out});
  for (std::int64_t ch = 0; ch < CH; ++ch)
    for (std::int64_t y = 0; y < Y; ++y)
      for (std::int64_t xo = 0; xo < x_out; ++xo)
        out(ch, y, xo) = x(ch, y, nearest_src(xo, X, x_out));
  return out;
}

template <typename T>
void resize_x_nearest_bwd(const Tensor<T>& dy, std::int64_t x_in,
                          Tensor<T>& dx) {
  const std::int64_t CH = dy.dim(0), Y = dy.dim(1), Xo = dy.dim(2);
  for (std::int64_t ch = 0; ch < CH; ++ch)
    for (std::int64_t y = 0; y < Y; ++y)
      for (std::int64_t xo = 0; xo < Xo; ++xo)
        dx(ch, y, nearest_src(xo, x_in, Xo)) += dy(ch, y, xo);
}

// --- 2D conv on [CH, Y, X], stride on x only, TF-style same padding ---------

struct ConvPads {
  std::int64_t y_beg, x_beg;
};

inline ConvPads conv_pads(std::int64_t ky, std::int64_t kx, std::int64_t x_in,
                          std::int64_t x_out, std::int64_t stride) {
  std::int64_t pad_x_total =
      std::max<std::int64_t>(0, (x_out - 1) * stride + kx - x_in);
  return ConvPads{(ky - 1) / 2, pad_x_total / 2};
}

template <typename T>
void conv2d_fwd(const Tensor<T>& x, const Tensor<T>& kernel,
                const Tensor<T>& bias, std::int64_t stride, std::int64_t x_out,
                Tensor<T>& y) {
  const std::int64_t CH = x.dim(0), Y = x.dim(1), X = x.dim(2);
  const std::int64_t ky = kernel.dim(2), kx = kernel.dim(3);
  if (kernel.dim(0) != CH || kernel.dim(1) != CH)
    throw StructuralError("conv kernel channels do not match the input");
  const ConvPads pads = conv_pads(ky, kx, X, x_out, stride);
  y.reset({CH, Y, x_out});
  for (std::int64_t co = 0; co < CH; ++co)
    for (std::int64_t yy = 0; yy < Y; ++yy)
      for (std::int64_t xo = 0; xo < x_out; ++xo) {
        T acc = bias[co];
        for (std::int64_t ci = 0; ci < CH; ++ci)
          for (std::int64_t dy = 0; dy < ky; ++dy) {
            const std::int64_t iy = yy + dy - pads.y_beg;
            if (iy < 0 || iy >= Y) continue;
            const T* xrow = &x(ci, iy, 0);
            const T* krow = &kernel(co, ci, dy, 0);
            for (std::int64_t dx = 0; dx < kx; ++dx) {
              const std::int64_t ix = xo * stride + dx - pads.x_beg;
              if (ix < 0 || ix >= X) continue;
              acc += krow[dx] * xrow[ix];
            }
          }
        y(co, yy, xo) = acc;
      }
}

template <typename T>
void conv2d_bwd(const Tensor<T>& x, const Tensor<T>& kernel,
                const Tensor<T>& dy, std::int64_t stride, Tensor<T>* dx,
                Tensor<T>& dkernel, Tensor<T>& dbias) {
  const std::int64_t CH = x.dim(0), Y = x.dim(1), X = x.dim(2);
  const std::int64_t ky = kernel.dim(2), kx = kernel.dim(3);
  const std::int64_t x_out = dy.dim(2);
  const ConvPads pads = conv_pads(ky, kx, X, x_out, stride);
  for (std::int64_t co = 0; co < CH; ++co)
    for (std::int64_t yy = 0; yy < Y; ++yy)
      for (std::int64_t xo = 0; xo < x_out; ++xo) {
        const T d = dy(co, yy, xo);
        if (d == T{0}) continue;
        dbias[co] += d;
        for (std::int64_t ci = 0; ci < CH; ++ci)
          for (std::int64_t dyk = 0; dyk < ky; ++dyk) {
            const std::int64_t iy = yy + dyk - pads.y_beg;
            if (iy < 0 || iy >= Y) continue;
            for (std::int64_t dxk = 0; dxk < kx; ++dxk) {
              const std::int64_t ix = xo * stride + dxk - pads.x_beg;
              if (ix < 0 || ix >= X) continue;
              dkernel(co, ci, dyk, dxk) += d * x(ci, iy, ix);
              if (dx) (*dx)(ci, iy, ix) += d * kernel(co, ci, dyk, dxk);
            }
          }
      }
}

// --- one conv role application with caching ---------------------------------

template <typename T>
struct RoleConvCache {
  Tensor<T> x_perm;    // permuted input [CH, Y, Xin]
  Tensor<T> x_conv;    // what the conv actually saw (resized or same)
  Tensor<T> y_pre;     // conv output before activation [CH, Y, Xout]
  std::int64_t stride = 1;
  bool used_resize = false;
};

// x [N,L,C] -> y [N,L,C with one axis resized], activation optional
template <typename T>
Tensor<T> role_conv_fwd(const Tensor<T>& x, const ConvParams<T>& p,
                        ConvRole role, std::int64_t x_out_size, bool act,
                        RoleConvCache<T>& cache) {
  cache.x_perm = permute_to_role(x, role);
  const std::int64_t X = cache.x_perm.dim(2);
  if (x_out_size < X && X % x_out_size == 0) {
    cache.stride = X / x_out_size;
    cache.used_resize = false;
    cache.x_conv = cache.x_perm;
  } else if (x_out_size == X) {
    cache.stride = 1;
    cache.used_resize = false;
    cache.x_conv = cache.x_perm;
  } else {
    cache.stride = 1;
    cache.used_resize = true;
    cache.x_conv = resize_x_nearest(cache.x_perm, x_out_size);
  }
  conv2d_fwd(cache.x_conv, p.kernel, p.bias, cache.stride, x_out_size,
             cache.y_pre);
  Tensor<T> y = cache.y_pre;
  if (act)
    for (std::int64_t i = 0; i < y.numel(); ++i) y[i] = gelu(y[i]);
  return permute_from_role(y, role);
}

// dy [N,L,C'] -> dx [N,L,C] accumulated; dp accumulated
template <typename T>
void role_conv_bwd(const Tensor<T>& dy_nlc, const ConvParams<T>& p,
                   ConvRole role, bool act, const RoleConvCache<T>& cache,
                   Tensor<T>& dx_nlc, ConvParams<T>& dp) {
  Tensor<T> dy = permute_to_role(dy_nlc, role);
  if (act)
    for (std::int64_t i = 0; i < dy.numel(); ++i)
      dy[i] *= gelu_grad(cache.y_pre[i]);
  Tensor<T> dx_conv = Tensor<T>::zeros(cache.x_conv.shape());
  conv2d_bwd(cache.x_conv, p.kernel, dy, cache.stride, &dx_conv, dp.kernel,
             dp.bias);
  Tensor<T> dx_perm;
  if (cache.used_resize) {
    dx_perm = Tensor<T>::zeros(cache.x_perm.shape());
    resize_x_nearest_bwd(dx_conv, cache.x_perm.dim(2), dx_perm);
  } else {
    dx_perm = std::move(dx_conv);
  }
  Tensor<T> dx_add = permute_from_role(dx_perm, role);
  for (std::int64_t i = 0; i < dx_nlc.numel(); ++i) dx_nlc[i] += dx_add[i];
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Initialization
// ---------------------------------------------------------------------------

namespace detail {

template <typename T>
ConvParams<T> init_conv(std::int64_t ch, int k, Rng& rng) {
  ConvParams<T> p;
  p.kernel.reset({ch, ch, k, k});
  const double bound = 1.0 / std::sqrt(static_cast<double>(ch) * k * k);
  p.kernel.fill_uniform(rng, static_cast<T>(-bound), static_cast<T>(bound));
  p.bias = Tensor<T>::zeros({ch});
  return p;
}

}  // namespace detail

template <typename T = float>
HyperDecoder<T> init_decoder(const DecoderSpec& spec, std::uint64_t seed) {
  spec.validate();
  HyperDecoder<T> dec;
  dec.spec = spec;
  for (std::size_t i = 0; i < spec.blocks.size(); ++i) {
    const BlockSpec& b = spec.blocks[i];
    Rng rng(derive_seed(seed, "decoder/init/block" + std::to_string(i)));
    DecoderBlock<T> blk;
    blk.w1 = detail::init_conv<T>(b.n_in, b.kernel, rng);
    blk.h1 = detail::init_conv<T>(b.c_out, b.kernel, rng);
    blk.h2 = detail::init_conv<T>(b.c_in, b.kernel, rng);
    blk.w2 = detail::init_conv<T>(b.n_in, b.kernel, rng);
    blk.convl = detail::init_conv<T>(b.c_out, b.kernel, rng);
    blk.bias = Tensor<T>::zeros({b.n_in, b.l_out, b.c_out});
    dec.blocks.push_back(std::move(blk));
  }
  return dec;
}

template <typename T>
HyperDecoder<T> make_zero_decoder_grads(HyperDecoder<T>& dec) {
  HyperDecoder<T> g;
  g.spec = dec.spec;
  g.blocks.resize(dec.blocks.size());
  for (std::size_t i = 0; i < dec.blocks.size(); ++i) {
    auto zero_like = [](const ConvParams<T>& p) {
      ConvParams<T> z;
      z.kernel = Tensor<T>::zeros(p.kernel.shape());
      z.bias = Tensor<T>::zeros(p.bias.shape());
      return z;
    };
    g.blocks[i].w1 = zero_like(dec.blocks[i].w1);
    g.blocks[i].h1 = zero_like(dec.blocks[i].h1);
    g.blocks[i].h2 = zero_like(dec.blocks[i].h2);
    g.blocks[i].w2 = zero_like(dec.blocks[i].w2);
    g.blocks[i].convl = zero_like(dec.blocks[i].convl);
    g.blocks[i].bias = Tensor<T>::zeros(dec.blocks[i].bias.shape());
  }
  return g;
}

// ---------------------------------------------------------------------------
// Forward / backward
// ---------------------------------------------------------------------------

template <typename T>
struct BlockForwardCache {
  detail::RoleConvCache<T> w1, h1, h2, w2, convl;
  Tensor<T> x_in;
  Tensor<T> combined;  // (c_W + c_H + b) / 3
};

template <typename T>
struct DecoderForwardCache {
  std::vector<BlockForwardCache<T>> blocks;
};

template <typename T>
Tensor<T> block_forward(const DecoderBlock<T>& blk, const BlockSpec& spec,
                        const Tensor<T>& x, BlockForwardCache<T>& cache) {
  if (x.shape() != std::vector<std::int64_t>{spec.n_in, spec.l_in, spec.c_in})
    throw StructuralError("decoder block input shape " + x.shape_str() +
                          " does not match its spec");
  cache.x_in = x;
  using detail::ConvRole;
  // branch 1: W (resize C) then H (resize L)
  Tensor<T> t1 = detail::role_conv_fwd(x, blk.w1, ConvRole::kW, spec.c_out,
                                       spec.gelu, cache.w1);
  Tensor<T> c_w = detail::role_conv_fwd(t1, blk.h1, ConvRole::kH, spec.l_out,
                                        spec.gelu, cache.h1);
  // branch 2: H (resize L) then W (resize C)
  Tensor<T> t2 = detail::role_conv_fwd(x, blk.h2, ConvRole::kH, spec.l_out,
                                       spec.gelu, cache.h2);
  Tensor<T> c_h = detail::role_conv_fwd(t2, blk.w2, ConvRole::kW, spec.c_out,
                                        spec.gelu, cache.w2);
  check_same_shape(c_w, c_h, "decoder branches");
  check_same_shape(c_w, blk.bias, "decoder block bias");
  cache.combined.reset(c_w.shape());
  const T third = static_cast<T>(1.0 / 3.0);
  for (std::int64_t i = 0; i < c_w.numel(); ++i)
    cache.combined[i] = (c_w[i] + c_h[i] + blk.bias[i]) * third;
  // combining conv: L role (resize N), always linear
  return detail::role_conv_fwd(cache.combined, blk.convl, ConvRole::kL,
                               spec.n_out, false, cache.convl);
}

template <typename T>
Tensor<T> block_backward(const DecoderBlock<T>& blk, const BlockSpec& spec,
                         const Tensor<T>& dy, const BlockForwardCache<T>& cache,
                         DecoderBlock<T>& grads) {
  using detail::ConvRole;
  Tensor<T> dcombined = Tensor<T>::zeros(cache.combined.shape());
  detail::role_conv_bwd(dy, blk.convl, ConvRole::kL, false, cache.convl,
                        dcombined, grads.convl);
  const T third = static_cast<T>(1.0 / 3.0);
  Tensor<T> dbranch(dcombined.shape());
  for (std::int64_t i = 0; i < dcombined.numel(); ++i) {
    dbranch[i] = dcombined[i] * third;
    grads.bias[i] += dcombined[i] * third;
  }
  Tensor<T> dx = Tensor<T>::zeros(cache.x_in.shape());
  // branch 1 backward: H then W
  {
    Tensor<T> dt1 = Tensor<T>::zeros({spec.n_in, spec.l_in, spec.c_out});
    detail::role_conv_bwd(dbranch, blk.h1, ConvRole::kH, spec.gelu, cache.h1,
                          dt1, grads.h1);
    detail::role_conv_bwd(dt1, blk.w1, ConvRole::kW, spec.gelu, cache.w1, dx,
                          grads.w1);
  }
  // branch 2 backward: W then H
  {
    Tensor<T> dt2 = Tensor<T>::zeros({spec.n_in, spec.l_out, spec.c_in});
    detail::role_conv_bwd(dbranch, blk.w2, ConvRole::kW, spec.gelu, cache.w2,
                          dt2, grads.w2);
    detail::role_conv_bwd(dt2, blk.h2, ConvRole::kH, spec.gelu, cache.h2, dx,
                          grads.h2);
  }
  return dx;
}

template <typename T>
Tensor<T> decoder_forward(const HyperDecoder<T>& dec, const Tensor<T>& x,
                          DecoderForwardCache<T>& cache) {
  cache.blocks.assign(dec.blocks.size(), BlockForwardCache<T>{});
  Tensor<T> h = x;
  for (std::size_t i = 0; i < dec.blocks.size(); ++i)
    h = block_forward(dec.blocks[i], dec.spec.blocks[i], h, cache.blocks[i]);
  return h;
}

template <typename T>
Tensor<T> decoder_backward(const HyperDecoder<T>& dec, const Tensor<T>& dy,
                           const DecoderForwardCache<T>& cache,
                           HyperDecoder<T>& grads) {
  Tensor<T> d = dy;
  for (std::size_t i = dec.blocks.size(); i-- > 0;)
    d = block_backward(dec.blocks[i], dec.spec.blocks[i], d, cache.blocks[i],
                       grads.blocks[i]);
  return d;  // gradient wrt the decoder input
}

// Convenience batched inference: [B, N, L, C] -> [B, N', L', C'].
template <typename T>
Tensor<T> decoder_forward_batched(const HyperDecoder<T>& dec,
                                  const Tensor<T>& x) {
  if (x.ndim() != 4)
    throw StructuralError("batched decoder input must be 4-D, got " +
                          x.shape_str());
  const std::int64_t B = x.dim(0);
  const auto in = dec.spec.in_shape();
  if (x.dim(1) != in[0] || x.dim(2) != in[1] || x.dim(3) != in[2])
    throw StructuralError("batched decoder input " + x.shape_str() +
                          " does not match the spec condition shape");
  const auto out_shape = dec.spec.out_shape();
  Tensor<T> out({B, out_shape[0], out_shape[1], out_shape[2]});
  Tensor<T> sample({in[0], in[1], in[2]});
  const std::int64_t in_numel = sample.numel();
  const std::int64_t out_numel = out_shape[0] * out_shape[1] * out_shape[2];
  for (std::int64_t b = 0; b < B; ++b) {
    for (std::int64_t i = 0; i < in_numel; ++i)
      sample[i] = x[b * in_numel + i];
    DecoderForwardCache<T> cache;
    Tensor<T> y = decoder_forward(dec, sample, cache);
    for (std::int64_t i = 0; i < out_numel; ++i) out[b * out_numel + i] = y[i];
  }
  return out;
}

// Mean squared error over every grid cell (padding included).
template <typename T>
double mse_loss(const Tensor<T>& pred, const Tensor<T>& target,
                Tensor<T>* dpred = nullptr) {
  check_same_shape(pred, target, "mse");
  const std::int64_t n = pred.numel();
  double loss = 0.0;
  if (dpred) dpred->reset(pred.shape());
  for (std::int64_t i = 0; i < n; ++i) {
    const double diff =
        static_cast<double>(pred[i]) - static_cast<double>(target[i]);
    loss += diff * diff;
    if (dpred) (*dpred)[i] = static_cast<T>(2.0 * diff / static_cast<double>(n));
  }
  return loss / static_cast<double>(n);
}

// ---------------------------------------------------------------------------
// Serialization
// ---------------------------------------------------------------------------

template <typename T>
WeightFile decoder_to_weight_file(HyperDecoder<T>& dec) {
  WeightFile wf;
  wf.meta["kind"] = "generator";
  wf.meta["spec"] = dec.spec.to_json().dump();
  dec.for_each_param([&](const std::string& name, Tensor<T>& t) {
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
HyperDecoder<T> decoder_from_weight_file(const WeightFile& wf) {
  if (wf.meta_or("kind", "") != "generator")
    throw StructuralError("weight file is not a generator checkpoint");
  DecoderSpec spec;
  try {
    spec = DecoderSpec::from_json(nlohmann::json::parse(wf.meta_or("spec", "")));
  } catch (const nlohmann::json::exception& e) {
    throw StructuralError("generator checkpoint has a malformed spec: " +
                          std::string(e.what()));
  }
  HyperDecoder<T> dec = init_decoder<T>(spec, 0);
  dec.for_each_param([&](const std::string& name, Tensor<T>& t) {
    Tensor<float> f = wf.get(name);
    if (f.shape() != t.shape())
      throw StructuralError("generator tensor shape drifted: " + name);
    t = f.template cast<T>();
  });
  return dec;
}

}  // namespace hyperlora
