#pragma once

// Full-recompute decoder in double precision. Shares no code with the
// library forward pass: every position is recomputed from scratch, layer by
// layer over the whole sequence, with an explicit causal mask.

#include <cmath>
#include <vector>

#include "stlm/adapter.hpp"
#include "stlm/transformer.hpp"

namespace stlm::testing {

using Mat = std::vector<std::vector<double>>;

inline std::vector<double> ref_linear(const DenseTensor& w, const std::vector<double>& x,
                                      const DenseTensor* bias) {
  const std::size_t rows = w.dims[0], cols = w.dims[1];
  std::vector<double> y(rows, 0.0);
  for (std::size_t r = 0; r < rows; ++r) {
    double acc = 0.0;
    for (std::size_t j = 0; j < cols; ++j) acc += static_cast<double>(w.data[r * cols + j]) * x[j];
    y[r] = acc + (bias ? bias->data[r] : 0.0);
  }
  return y;
}

inline std::vector<double> ref_norm(const std::vector<double>& x, const DenseTensor& g,
                                    const DenseTensor& b, double eps) {
  double mean = 0.0;
  for (double v : x) mean += v;
  mean /= static_cast<double>(x.size());
  double var = 0.0;
  for (double v : x) var += (v - mean) * (v - mean);
  var /= static_cast<double>(x.size());
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    out[i] = (x[i] - mean) / std::sqrt(var + eps) * g.data[i] + b.data[i];
  }
  return out;
}

// Rotation written as a complex multiply on (x_i, x_{i+half}).
inline void ref_rotate(double* head, std::size_t rot, std::size_t pos, double base) {
  const std::size_t half = rot / 2;
  for (std::size_t i = 0; i < half; ++i) {
    const double ang = static_cast<double>(pos) * std::pow(base, -static_cast<double>(2 * i) / rot);
    const double re = head[i], im = head[i + half];
    head[i] = re * std::cos(ang) - im * std::sin(ang);
    head[i + half] = re * std::sin(ang) + im * std::cos(ang);
  }
}

// y += scale * B (A x), the unmerged low-rank path.
inline void add_lora_path(const LoraPair& p, double scale, const std::vector<double>& x, std::vector<double>& y) {
  const std::size_t rank = p.a.dims[0], cols = p.a.dims[1];
  std::vector<double> ax(rank, 0.0);
  for (std::size_t k = 0; k < rank; ++k)
    for (std::size_t j = 0; j < cols; ++j) ax[k] += static_cast<double>(p.a.data[k * cols + j]) * x[j];
  for (std::size_t i = 0; i < y.size(); ++i) {
    double acc = 0.0;
    for (std::size_t k = 0; k < rank; ++k) acc += static_cast<double>(p.b.data[i * rank + k]) * ax[k];
    y[i] += scale * acc;
  }
}

// Logits [T][vocab] for the whole token sequence. With an adapter, each
// targeted projection computes W x + (alpha / rank) B (A x) instead of using
// merged weights.
inline Mat reference_logits(const Model& model, const std::vector<TokenId>& tokens,
                            const LoraAdapter* adapter = nullptr) {
  const ModelConfig& c = model.config;
  const std::size_t T = tokens.size(), d = c.d_model, hd = c.head_dim();
  auto dense = [&](std::string_view name) { return to_dense(model.weights.get(name)); };
  const DenseTensor embed = dense(names::kEmbed);

  Mat x(T, std::vector<double>(d));
  for (std::size_t t = 0; t < T; ++t) {
    for (std::size_t i = 0; i < d; ++i) x[t][i] = embed.data[tokens[t] * d + i];
  }
  for (std::size_t l = 0; l < c.n_layers; ++l) {
    const auto L = [&](std::string_view s) { return dense(names::layer(l, s)); };
    const DenseTensor g1 = L(names::kNorm1Weight), b1 = L(names::kNorm1Bias);
    const DenseTensor g2 = L(names::kNorm2Weight), b2 = L(names::kNorm2Bias);
    const DenseTensor wqkv = L(names::kQkvWeight), bqkv = L(names::kQkvBias);
    const DenseTensor wo = L(names::kAttnOutWeight), bo = L(names::kAttnOutBias);
    const DenseTensor wu = L(names::kMlpUpWeight), bu = L(names::kMlpUpBias);
    const DenseTensor wd = L(names::kMlpDownWeight), bd = L(names::kMlpDownBias);

    Mat q(T), k(T), v(T);
    for (std::size_t t = 0; t < T; ++t) {
      const auto h1 = ref_norm(x[t], g1, b1, c.layernorm_eps);
      auto qkv = ref_linear(wqkv, h1, &bqkv);
      if (adapter) {
        const auto it = adapter->targets.find(names::layer(l, names::kQkvWeight));
        if (it != adapter->targets.end()) {
          add_lora_path(it->second, static_cast<double>(adapter->alpha) / static_cast<double>(adapter->rank), h1, qkv);
        }
      }
      q[t].assign(qkv.begin(), qkv.begin() + d);
      k[t].assign(qkv.begin() + d, qkv.begin() + 2 * d);
      v[t].assign(qkv.begin() + 2 * d, qkv.end());
      for (std::size_t h = 0; h < c.n_heads; ++h) {
        ref_rotate(q[t].data() + h * hd, c.rotary_dims(), t, c.rope_base);
        ref_rotate(k[t].data() + h * hd, c.rotary_dims(), t, c.rope_base);
      }
    }
    Mat next = x;
    for (std::size_t t = 0; t < T; ++t) {
      std::vector<double> attn(d, 0.0);
      for (std::size_t h = 0; h < c.n_heads; ++h) {
        std::vector<double> s(T, -INFINITY);
        double m = -INFINITY;
        for (std::size_t u = 0; u < T; ++u) {
          if (u > t) continue;  // causal mask
          double dot = 0.0;
          for (std::size_t i = 0; i < hd; ++i) dot += q[t][h * hd + i] * k[u][h * hd + i];
          s[u] = dot / std::sqrt(static_cast<double>(hd));
          m = std::max(m, s[u]);
        }
        double z = 0.0;
        for (std::size_t u = 0; u <= t; ++u) z += std::exp(s[u] - m);
        for (std::size_t u = 0; u <= t; ++u) {
          const double p = std::exp(s[u] - m) / z;
          for (std::size_t i = 0; i < hd; ++i) attn[h * hd + i] += p * v[u][h * hd + i];
        }
      }
      const auto a = ref_linear(wo, attn, &bo);
      auto up = ref_linear(wu, ref_norm(x[t], g2, b2, c.layernorm_eps), &bu);
      for (double& e : up) e = 0.5 * e * (1.0 + std::erf(e / std::sqrt(2.0)));
      const auto mlp = ref_linear(wd, up, &bd);
      for (std::size_t i = 0; i < d; ++i) next[t][i] = x[t][i] + a[i] + mlp[i];
    }
    x = std::move(next);
  }
  const DenseTensor gf = dense(names::kFinalNormWeight), bf = dense(names::kFinalNormBias);
  const DenseTensor un = dense(names::kUnembed);
  Mat logits(T);
  for (std::size_t t = 0; t < T; ++t) logits[t] = ref_linear(un, ref_norm(x[t], gf, bf, c.layernorm_eps), nullptr);
  return logits;
}

}  // namespace stlm::testing
