#pragma once

// Full-depth extractor over the selected high-res patches. Global tokens
// (cls, registers) arrive from the selector instead of the extractor's own
// learned tokens, which is what lets a k-token forward stand in for the
// dense run. Sparse outputs are densified by inverse-distance interpolation
// with constant weights, so gradients flow through token values only.

#include <algorithm>
#include <cmath>
#include <vector>

#include "lookwhere/vit.hpp"

namespace lookwhere {

struct InterpConfig {
  int neighbors = 5;
  double pow = 1.0;
  double epsilon = 1e-8;
};

enum class Conditioning { kSelectorTokens, kNone };

struct SparseLatents {
  Tensor cls;           // [D]
  Tensor registers;     // [G, D]; undefined when G = 0
  Tensor patch_tokens;  // [k, D]
  std::vector<int> positions;  // strictly increasing linear grid indices
};

struct DenseLatents {
  Tensor cls;
  Tensor registers;
  Tensor grid;  // [N*N, D]
};

// Embeds only the selected patches (projection work scales with k).
inline Tensor tokenize_selected(const Tensor& image_high, const std::vector<int>& positions,
                                const ViTParams& params) {
  const ViTConfig& cfg = params.config;
  if (image_high.ndim() != 3 || image_high.dim(0) != cfg.image_size || image_high.dim(2) != cfg.channels)
    throw ShapeError("tokenize_selected: image does not match config geometry");
  if (positions.empty()) throw ValueError("tokenize_selected: no positions");
  const int n = cfg.grid_side(), p = cfg.patch_size, c = cfg.channels, r = cfg.image_size;
  for (size_t i = 0; i < positions.size(); ++i) {
    if (positions[i] < 0 || positions[i] >= n * n) throw IndexError("tokenize_selected: position outside grid");
    for (size_t j = i + 1; j < positions.size(); ++j)
      if (positions[i] == positions[j]) throw ValueError("tokenize_selected: duplicate position");
  }
  std::vector<double> rows(positions.size() * size_t(p) * p * c);
  const auto& img = image_high.data();
  size_t idx = 0;
  for (int pos : positions) {
    int gr = pos / n, gc = pos % n;
    for (int pi = 0; pi < p; ++pi)
      for (int pj = 0; pj < p; ++pj)
        for (int ch = 0; ch < c; ++ch)
          rows[idx++] = img[(size_t(gr * p + pi) * r + (gc * p + pj)) * c + ch];
  }
  Tensor patches = Tensor::from_data({int(positions.size()), p * p * c}, std::move(rows));
  return embed(patches, params, positions);
}

// Full-depth run over [cls; registers; selected patches]. Conditioning picks
// where the global tokens come from: the selector's outputs or the
// extractor's own learned tokens.
inline SparseLatents extractor_forward(const Tensor& sparse_tokens, const Tensor& selector_cls,
                                       const Tensor& selector_registers, const ViTParams& params,
                                       const std::vector<int>& positions,
                                       Conditioning conditioning = Conditioning::kSelectorTokens) {
  const ViTConfig& cfg = params.config;
  const int d = cfg.embed_dim, g = cfg.num_registers;
  if (sparse_tokens.ndim() != 2 || sparse_tokens.dim(1) != d)
    throw ShapeError("extractor_forward: token width mismatch");
  if (int(positions.size()) != sparse_tokens.dim(0))
    throw ShapeError("extractor_forward: one position per sparse token required");

  Tensor cls, regs;
  if (conditioning == Conditioning::kSelectorTokens) {
    if (!selector_cls.defined()) throw ValueError("extractor_forward: selector cls missing");
    cls = selector_cls;
    if (g > 0) {
      if (!selector_registers.defined()) throw ValueError("extractor_forward: selector registers missing");
      regs = selector_registers;
    }
  } else {
    cls = params.cls_token;
    if (g > 0) regs = params.reg_tokens;
  }
  if (cls.ndim() != 1 || cls.dim(0) != d) throw ShapeError("extractor_forward: cls width mismatch");
  if (g > 0 && (regs.ndim() != 2 || regs.dim(0) != g || regs.dim(1) != d))
    throw ShapeError("extractor_forward: register shape mismatch");

  std::vector<Tensor> parts;
  parts.push_back(reshape(cls, {1, d}));
  if (g > 0) parts.push_back(regs);
  parts.push_back(sparse_tokens);
  ForwardTrace trace = vit_forward_tokens(concat_rows(parts), params, int(params.layers.size()));

  SparseLatents out;
  Tensor tokens = trace.final_tokens;
  out.cls = reshape(slice_rows(tokens, 0, 1), {d});
  if (g > 0) out.registers = slice_rows(tokens, 1, 1 + g);
  out.patch_tokens = slice_rows(tokens, 1 + g, tokens.dim(0));
  out.positions = positions;
  return out;
}

// Inverse-distance weights from every grid cell to its nearest visible
// tokens. Row-major [N*N, k]; each row sums to 1. A cell closer than epsilon
// to a visible token copies it exactly. Neighbor choice orders by squared
// distance (exact integers) with the lower token index winning ties.
inline std::vector<double> interpolation_weights(const std::vector<int>& positions, int n_high,
                                                 const InterpConfig& cfg) {
  const int k = int(positions.size());
  if (k == 0) throw ValueError("interpolation_weights: no positions");
  if (cfg.neighbors < 1 || cfg.neighbors > k)
    throw ValueError("interpolation_weights: neighbors must be in [1, k]");
  if (cfg.epsilon <= 0.0) throw ValueError("interpolation_weights: epsilon must be positive");
  const int n2 = n_high * n_high;
  for (int pos : positions)
    if (pos < 0 || pos >= n2) throw IndexError("interpolation_weights: position outside grid");

  std::vector<double> w(size_t(n2) * k, 0.0);
  std::vector<std::pair<int64_t, int>> order(k);  // (squared distance, token index)
  const double eps2 = cfg.epsilon * cfg.epsilon;
  for (int cell = 0; cell < n2; ++cell) {
    const int cr = cell / n_high, cc = cell % n_high;
    int snap = -1;
    for (int j = 0; j < k; ++j) {
      const int pr = positions[j] / n_high, pc = positions[j] % n_high;
      const int64_t dr = pr - cr, dc = pc - cc;
      const int64_t d2 = dr * dr + dc * dc;
      if (double(d2) < eps2 && snap < 0) snap = j;
      order[j] = {d2, j};
    }
    double* row = &w[size_t(cell) * k];
    if (snap >= 0) {
      row[snap] = 1.0;
      continue;
    }
    std::partial_sort(order.begin(), order.begin() + cfg.neighbors, order.end());
    double total = 0.0;
    for (int j = 0; j < cfg.neighbors; ++j) {
      double dist = std::sqrt(double(order[j].first));
      double wt = 1.0 / std::pow(dist, cfg.pow);
      row[order[j].second] = wt;
      total += wt;
    }
    for (int j = 0; j < cfg.neighbors; ++j) row[order[j].second] /= total;
  }
  return w;
}

// Scatter sparse tokens onto the full grid via the constant weight matrix.
// Differentiable in the token values; positions and weights are constants.
inline DenseLatents interpolate_sparse(const SparseLatents& sparse, int n_high, const InterpConfig& cfg) {
  const int k = sparse.patch_tokens.dim(0);
  if (int(sparse.positions.size()) != k)
    throw ShapeError("interpolate_sparse: token/position count mismatch");
  Tensor weights = Tensor::from_data({n_high * n_high, k},
                                     interpolation_weights(sparse.positions, n_high, cfg));
  DenseLatents dense;
  dense.cls = sparse.cls;
  dense.registers = sparse.registers;
  dense.grid = matmul(weights, sparse.patch_tokens);
  return dense;
}

}  // namespace lookwhere
