#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "gmoe/core/ops.hpp"
#include "gmoe/core/tensor.hpp"
#include "gmoe/rng.hpp"

// Standard transformer constituents assembled by the models: linear layers,
// FFN, multi-head attention, patch/token embeddings.

namespace gmoe {

template <typename T>
struct NamedParam {
  std::string name;
  Tensor<T>* tensor;
};

template <typename T>
using ParamList = std::vector<NamedParam<T>>;

template <typename T>
void append_params(ParamList<T>& dst, const std::string& prefix,
                   ParamList<T> src) {
  for (auto& p : src) dst.push_back({prefix + "." + p.name, p.tensor});
}

// Truncated normal, resampled beyond two standard deviations.
template <typename T>
void init_trunc_normal(Tensor<T>& t, RngStream& rng, double std_dev = 0.02) {
  for (std::size_t i = 0; i < t.size(); ++i) {
    double z;
    do {
      z = rng.gaussian();
    } while (std::abs(z) > 2.0);
    t.at(i) = static_cast<T>(z * std_dev);
  }
}

template <typename T>
struct LinearLayer {
  Tensor<T> weight;  // [out, in]
  Tensor<T> bias;    // [out], absent when has_bias is false
  bool has_bias = true;

  LinearLayer() = default;
  LinearLayer(std::size_t out, std::size_t in, bool with_bias = true)
      : weight({out, in}), has_bias(with_bias) {
    if (has_bias) bias = Tensor<T>({out});
  }

  void init(RngStream& rng, double std_dev = 0.02) {
    init_trunc_normal(weight, rng, std_dev);
    if (has_bias) bias.fill(T(0));
  }

  // x: [m, in] -> [m, out]
  Tensor<T> forward(Tape<T>* tape, const Tensor<T>& x) const {
    Tensor<T> w = use_param(tape, weight);
    Tensor<T> y = matmul(x, transpose(w));
    if (!has_bias) return y;
    return add_row(y, use_param(tape, bias));
  }

  ParamList<T> parameters() {
    if (!has_bias) return {{"weight", &weight}};
    return {{"weight", &weight}, {"bias", &bias}};
  }
};

template <typename T>
struct LayerNormLayer {
  Tensor<T> gamma;
  Tensor<T> beta;
  T eps = T(1e-6);

  LayerNormLayer() = default;
  explicit LayerNormLayer(std::size_t n) : gamma({n}), beta({n}) {
    gamma.fill(T(1));
  }

  Tensor<T> forward(Tape<T>* tape, const Tensor<T>& x) const {
    return layer_norm(x, use_param(tape, gamma), use_param(tape, beta), eps);
  }

  ParamList<T> parameters() {
    return {{"gamma", &gamma}, {"beta", &beta}};
  }
};

template <typename T>
struct FeedForward {
  LinearLayer<T> fc1;  // [hidden, d]
  LinearLayer<T> fc2;  // [d, hidden]
  Activation act = Activation::gelu;

  FeedForward() = default;
  FeedForward(std::size_t d, std::size_t hidden, Activation a)
      : fc1(hidden, d), fc2(d, hidden), act(a) {}

  void init(RngStream& rng) {
    fc1.init(rng);
    fc2.init(rng);
  }

  Tensor<T> forward(Tape<T>* tape, const Tensor<T>& x) const {
    return fc2.forward(tape, activate(act, fc1.forward(tape, x)));
  }

  ParamList<T> parameters() {
    ParamList<T> out;
    append_params(out, "fc1", fc1.parameters());
    append_params(out, "fc2", fc2.parameters());
    return out;
  }
};

template <typename T>
struct MultiHeadAttention {
  LinearLayer<T> wq, wk, wv, wo;
  std::size_t heads = 1;
  std::size_t head_dim = 0;

  MultiHeadAttention() = default;
  // No bias on the key projection: a constant added to every key shifts each
  // query's scores uniformly, which softmax cancels.
  MultiHeadAttention(std::size_t d, std::size_t h)
      : wq(d, d),
        wk(d, d, /*with_bias=*/false),
        wv(d, d),
        wo(d, d),
        heads(h),
        head_dim(d / h) {
    if (h == 0 || d % h != 0)
      throw ShapeError("mha: width " + std::to_string(d) +
                       " not divisible by heads " + std::to_string(h));
  }

  void init(RngStream& rng) {
    wq.init(rng);
    wk.init(rng);
    wv.init(rng);
    wo.init(rng);
  }

  // x: [t, d] -> [t, d], scaled dot-product attention per head.
  Tensor<T> forward(Tape<T>* tape, const Tensor<T>& x) const {
    const Tensor<T> q = wq.forward(tape, x);
    const Tensor<T> k = wk.forward(tape, x);
    const Tensor<T> v = wv.forward(tape, x);
    const T inv_sqrt_dh = T(1) / std::sqrt(static_cast<T>(head_dim));

    std::vector<Tensor<T>> outs;
    outs.reserve(heads);
    for (std::size_t h = 0; h < heads; ++h) {
      const std::size_t c0 = h * head_dim, c1 = c0 + head_dim;
      Tensor<T> qh = slice_cols(q, c0, c1);
      Tensor<T> kh = slice_cols(k, c0, c1);
      Tensor<T> vh = slice_cols(v, c0, c1);
      Tensor<T> scores = scale(matmul(qh, transpose(kh)), inv_sqrt_dh);
      Tensor<T> attn = softmax(scores, 1);
      outs.push_back(matmul(attn, vh));
    }
    return wo.forward(tape, concat_cols(outs));
  }

  ParamList<T> parameters() {
    ParamList<T> out;
    append_params(out, "wq", wq.parameters());
    append_params(out, "wk", wk.parameters());
    append_params(out, "wv", wv.parameters());
    append_params(out, "wo", wo.parameters());
    return out;
  }
};

// Rearranges one [C*H*W] image into [T, C*p*p] patch rows. Pure permutation.
template <typename T>
Tensor<T> im2patches(const Tensor<T>& image, std::size_t channels,
                     std::size_t height, std::size_t width, std::size_t p) {
  if (image.size() != channels * height * width)
    throw ShapeError("im2patches: image size " + std::to_string(image.size()) +
                     " does not match " + std::to_string(channels) + "x" +
                     std::to_string(height) + "x" + std::to_string(width));
  if (p == 0 || height % p != 0 || width % p != 0)
    throw ShapeError("im2patches: image extent not divisible by patch size " +
                     std::to_string(p));
  const std::size_t gh = height / p, gw = width / p;
  const std::size_t tokens = gh * gw, cols = channels * p * p;

  std::vector<int> map(tokens * cols);
  std::size_t out = 0;
  for (std::size_t ti = 0; ti < gh; ++ti)
    for (std::size_t tj = 0; tj < gw; ++tj)
      for (std::size_t c = 0; c < channels; ++c)
        for (std::size_t pi = 0; pi < p; ++pi)
          for (std::size_t pj = 0; pj < p; ++pj)
            map[out++] = static_cast<int>(c * height * width +
                                          (ti * p + pi) * width + tj * p + pj);

  Tensor<T> patches({tokens, cols});
  for (std::size_t i = 0; i < map.size(); ++i)
    patches.at(i) = image.at(static_cast<std::size_t>(map[i]));
  if (Tape<T>* tape = detail::common_tape<T>({&image})) {
    const int px = tape->node_of(image);
    auto shape = image.shape();
    tape->mark(patches,
               tape->record({px}, [px, map, shape](const Tensor<T>& g,
                                                   auto& sink) {
                 Tensor<T> dx(shape);
                 for (std::size_t i = 0; i < map.size(); ++i)
                   dx.at(static_cast<std::size_t>(map[i])) += g.at(i);
                 sink.add(px, dx);
               }));
  }
  return patches;
}

// Patch embedding: unfold, layer-normalize the patch pixels, project, add
// learned positions. With a zero image every token reduces to the projection
// bias.
template <typename T>
struct PatchEmbed {
  std::size_t channels = 3, height = 224, width = 224, patch = 16;
  LinearLayer<T> proj;
  LayerNormLayer<T> ln;  // over patch pixels
  Tensor<T> pos;         // [tokens, d]

  PatchEmbed() = default;
  PatchEmbed(std::size_t c, std::size_t h, std::size_t w, std::size_t p,
             std::size_t d)
      : channels(c),
        height(h),
        width(w),
        patch(p),
        proj(d, c * p * p),
        ln(c * p * p),
        pos({(h / p) * (w / p), d}) {
    if (p == 0 || h % p != 0 || w % p != 0)
      throw ShapeError("patch_embed: image extents not divisible by patch size");
  }

  std::size_t tokens() const { return (height / patch) * (width / patch); }

  void init(RngStream& rng) {
    proj.init(rng);
    init_trunc_normal(pos, rng);
  }

  // image: [C*H*W] (or any view with that many elements) -> [T, d]
  Tensor<T> forward(Tape<T>* tape, const Tensor<T>& image) const {
    Tensor<T> patches = im2patches(image, channels, height, width, patch);
    Tensor<T> tok = proj.forward(tape, ln.forward(tape, patches));
    return add(tok, use_param(tape, pos));
  }

  ParamList<T> parameters() {
    ParamList<T> out;
    append_params(out, "proj", proj.parameters());
    append_params(out, "ln", ln.parameters());
    out.push_back({"pos", &pos});
    return out;
  }
};

// Token embedding for datasets that already come as token rows.
template <typename T>
struct TokenEmbed {
  std::size_t tokens_in = 0, dim_in = 0;
  LinearLayer<T> proj;
  Tensor<T> pos;  // [tokens, d]

  TokenEmbed() = default;
  TokenEmbed(std::size_t t, std::size_t d_in, std::size_t d)
      : tokens_in(t), dim_in(d_in), proj(d, d_in), pos({t, d}) {}

  void init(RngStream& rng) {
    proj.init(rng);
    init_trunc_normal(pos, rng);
  }

  // sample: [T*dim_in] flat -> [T, d]
  Tensor<T> forward(Tape<T>* tape, const Tensor<T>& sample) const {
    Tensor<T> rows = reshape(sample, {tokens_in, dim_in});
    return add(proj.forward(tape, rows), use_param(tape, pos));
  }

  ParamList<T> parameters() {
    ParamList<T> out;
    append_params(out, "proj", proj.parameters());
    out.push_back({"pos", &pos});
    return out;
  }
};

}  // namespace gmoe
