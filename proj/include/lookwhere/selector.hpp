#pragma once

// Low-resolution selector: a depth-truncated ViT trunk over a downsampled
// view, plus an FFN head that expands each low-res patch token into a q x q
// block of the high-res selection map. cls and register outputs are handed
// to the extractor as its global tokens.

#include <algorithm>
#include <vector>

#include "lookwhere/vit.hpp"

namespace lookwhere {

struct MapHeadParams {
  Tensor w1, b1;  // [D,hidden], [hidden]
  Tensor w2, b2;  // [hidden, q*q], [q*q]

  static MapHeadParams init(int dim, int hidden, int q, Rng& rng) {
    if (hidden <= 0 || q <= 0) throw ValueError("MapHeadParams: bad geometry");
    MapHeadParams p;
    p.w1 = Tensor::zeros({dim, hidden}, true);
    fill_normal(p.w1, rng, 0.02);
    p.b1 = Tensor::zeros({hidden}, true);
    p.w2 = Tensor::zeros({hidden, q * q}, true);
    fill_normal(p.w2, rng, 0.02);
    p.b2 = Tensor::zeros({q * q}, true);
    return p;
  }

  int block_side() const {
    int qq = w2.dim(1);
    int q = int(std::sqrt(double(qq)) + 0.5);
    if (q * q != qq) throw ValueError("MapHeadParams: head width is not a square");
    return q;
  }

  void collect_named(const std::string& prefix, NamedParams& out) const {
    out[prefix + "w1"] = w1;
    out[prefix + "b1"] = b1;
    out[prefix + "w2"] = w2;
    out[prefix + "b2"] = b2;
  }

  MapHeadParams clone(bool rg = true) const {
    MapHeadParams p;
    p.w1 = w1.clone(rg);
    p.b1 = b1.clone(rg);
    p.w2 = w2.clone(rg);
    p.b2 = b2.clone(rg);
    return p;
  }
};

struct SelectorParams {
  ViTParams trunk;     // trunk.config describes the low-res geometry
  MapHeadParams head;

  int low_depth() const { return int(trunk.layers.size()); }
  int n_low() const { return trunk.config.grid_side(); }

  NamedParams named(const std::string& prefix = "selector.") const {
    NamedParams out;
    trunk.collect_named(prefix + "trunk.", out);
    head.collect_named(prefix + "head.", out);
    return out;
  }

  SelectorParams clone(bool rg = true) const { return {trunk.clone(rg), head.clone(rg)}; }
};

struct SelectorOutput {
  Tensor map;        // [n_high, n_high], raw scores (pre-softmax)
  Tensor cls;        // [D]
  Tensor registers;  // [G, D]; undefined when G = 0
};

// Per-token FFN expansion into q x q blocks, assembled in grid order and
// bilinearly resized when n_low * q != n_high. Only patch tokens enter.
inline Tensor map_head(const Tensor& patch_tokens, const MapHeadParams& head, int n_low, int n_high) {
  if (patch_tokens.ndim() != 2 || patch_tokens.dim(0) != n_low * n_low)
    throw ShapeError("map_head: expected one token per low-res grid cell");
  if (n_high < n_low) throw ValueError("map_head: target side smaller than grid");
  const int q = head.block_side();
  Tensor h = gelu(add_rowvec(matmul(patch_tokens, head.w1), head.b1));
  Tensor s = add_rowvec(matmul(h, head.w2), head.b2);  // [n_low^2, q^2]

  const int side = n_low * q;
  std::vector<int> perm(size_t(side) * side);
  for (int r = 0; r < side; ++r)
    for (int c = 0; c < side; ++c) {
      int tr = r / q, i = r % q, tc = c / q, j = c % q;
      perm[size_t(r) * side + c] = (tr * n_low + tc) * q * q + (i * q + j);
    }
  Tensor assembled = gather_flat(reshape(s, {n_low * n_low * q * q}), perm);
  if (side == n_high) return reshape(assembled, {n_high, n_high});
  Tensor resize = bilinear_resize_matrix(side, n_high);
  Tensor flat = matmul(resize, reshape(assembled, {side * side, 1}));
  return reshape(flat, {n_high, n_high});
}

// Downsamples the input, runs the truncated trunk, splits global tokens and
// produces the raw selection map over the high-res grid.
inline SelectorOutput selector_forward(const Tensor& image_high, const SelectorParams& params, int n_high) {
  const ViTConfig& cfg = params.trunk.config;
  Tensor low = downsample(image_high, cfg.image_size);
  ForwardTrace trace = vit_forward(low, params.trunk, params.low_depth());
  const int d = cfg.embed_dim;
  const int g = cfg.num_registers;
  Tensor tokens = trace.final_tokens;
  SelectorOutput out;
  out.cls = reshape(slice_rows(tokens, 0, 1), {d});
  if (g > 0) out.registers = slice_rows(tokens, 1, 1 + g);
  Tensor pat = slice_rows(tokens, 1 + g, tokens.dim(0));
  out.map = map_head(pat, params.head, cfg.grid_side(), n_high);
  return out;
}

// Indices of the k largest map cells, ties broken toward the smaller linear
// index, returned sorted ascending by linear index.
inline std::vector<int> top_k_select(const Tensor& map, int k) {
  const int64_t n = map.numel();
  if (k < 1 || k > n) throw ValueError("top_k_select: k out of range");
  std::vector<int> idx(n);
  for (int64_t i = 0; i < n; ++i) idx[i] = int(i);
  std::stable_sort(idx.begin(), idx.end(), [&](int a, int b) {
    double va = map.data()[a], vb = map.data()[b];
    if (va != vb) return va > vb;
    return a < b;
  });
  idx.resize(k);
  std::sort(idx.begin(), idx.end());
  return idx;
}

}  // namespace lookwhere
