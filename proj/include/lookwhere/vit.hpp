#pragma once

// Minimal pre-norm ViT: patch embedding with a learned positional grid on
// patch tokens only (cls and registers carry none), pre-norm attention and
// FFN sub-blocks, no final norm. Depth-truncated runs expose every
// intermediate via ForwardTrace.

#include <cmath>
#include <string>
#include <vector>

#include "lookwhere/rng.hpp"
#include "lookwhere/tensor.hpp"

namespace lookwhere {

struct ViTConfig {
  int image_size = 64;
  int patch_size = 8;
  int channels = 1;
  int embed_dim = 64;
  int num_layers = 4;
  int num_heads = 4;
  int num_registers = 4;
  double ffn_ratio = 4.0;

  int grid_side() const { return image_size / patch_size; }
  int num_patches() const { return grid_side() * grid_side(); }
  int ffn_hidden() const { return int(ffn_ratio * embed_dim + 0.5); }
  int head_dim() const { return embed_dim / num_heads; }
  int seq_len() const { return 1 + num_registers + num_patches(); }

  void validate() const {
    if (image_size <= 0 || patch_size <= 0 || image_size % patch_size != 0)
      throw ValueError("ViTConfig: image_size must be a positive multiple of patch_size");
    if (embed_dim <= 0 || num_heads <= 0 || embed_dim % num_heads != 0)
      throw ValueError("ViTConfig: embed_dim must be divisible by num_heads");
    if (num_layers < 0 || num_registers < 0 || channels <= 0)
      throw ValueError("ViTConfig: bad layer/register/channel count");
    if (ffn_hidden() <= 0) throw ValueError("ViTConfig: ffn_ratio too small");
  }
};

struct LayerParams {
  Tensor ln1_gamma, ln1_beta;
  Tensor wq, bq, wk, bk, wv, bv, wo, bo;
  Tensor ln2_gamma, ln2_beta;
  Tensor ffn_w1, ffn_b1, ffn_w2, ffn_b2;
};

struct ViTParams {
  ViTConfig config;
  Tensor patch_weight;  // [P*P*C, D]
  Tensor patch_bias;    // [D]
  Tensor pos_grid;      // [N, N, D]
  Tensor cls_token;     // [D]
  Tensor reg_tokens;    // [G, D] (G may be 0 -> undefined tensor)
  std::vector<LayerParams> layers;

  static ViTParams init(const ViTConfig& cfg, Rng& rng) {
    cfg.validate();
    ViTParams p;
    p.config = cfg;
    const int d = cfg.embed_dim;
    const int n = cfg.grid_side();
    const int pin = cfg.patch_size * cfg.patch_size * cfg.channels;
    const double sd = 0.02;
    auto w = [&](Shape s) {
      Tensor t = Tensor::zeros(std::move(s), true);
      fill_normal(t, rng, sd);
      return t;
    };
    p.patch_weight = w({pin, d});
    p.patch_bias = Tensor::zeros({d}, true);
    p.pos_grid = w({n, n, d});
    p.cls_token = w({d});
    if (cfg.num_registers > 0) p.reg_tokens = w({cfg.num_registers, d});
    p.layers.resize(cfg.num_layers);
    for (auto& l : p.layers) {
      l.ln1_gamma = Tensor::full({d}, 1.0, true);
      l.ln1_beta = Tensor::zeros({d}, true);
      l.wq = w({d, d});
      l.bq = Tensor::zeros({d}, true);
      l.wk = w({d, d});
      l.bk = Tensor::zeros({d}, true);
      l.wv = w({d, d});
      l.bv = Tensor::zeros({d}, true);
      l.wo = w({d, d});
      l.bo = Tensor::zeros({d}, true);
      l.ln2_gamma = Tensor::full({d}, 1.0, true);
      l.ln2_beta = Tensor::zeros({d}, true);
      l.ffn_w1 = w({d, cfg.ffn_hidden()});
      l.ffn_b1 = Tensor::zeros({cfg.ffn_hidden()}, true);
      l.ffn_w2 = w({cfg.ffn_hidden(), d});
      l.ffn_b2 = Tensor::zeros({d}, true);
    }
    return p;
  }

  void collect_named(const std::string& prefix, NamedParams& out) const {
    out[prefix + "patch_proj.weight"] = patch_weight;
    out[prefix + "patch_proj.bias"] = patch_bias;
    out[prefix + "pos_grid"] = pos_grid;
    out[prefix + "cls_token"] = cls_token;
    if (reg_tokens.defined()) out[prefix + "reg_tokens"] = reg_tokens;
    for (size_t i = 0; i < layers.size(); ++i) {
      const auto& l = layers[i];
      std::string lp = prefix + "layers." + std::to_string(i) + ".";
      out[lp + "ln1.gamma"] = l.ln1_gamma;
      out[lp + "ln1.beta"] = l.ln1_beta;
      out[lp + "attn.wq"] = l.wq;
      out[lp + "attn.bq"] = l.bq;
      out[lp + "attn.wk"] = l.wk;
      out[lp + "attn.bk"] = l.bk;
      out[lp + "attn.wv"] = l.wv;
      out[lp + "attn.bv"] = l.bv;
      out[lp + "attn.wo"] = l.wo;
      out[lp + "attn.bo"] = l.bo;
      out[lp + "ln2.gamma"] = l.ln2_gamma;
      out[lp + "ln2.beta"] = l.ln2_beta;
      out[lp + "ffn.w1"] = l.ffn_w1;
      out[lp + "ffn.b1"] = l.ffn_b1;
      out[lp + "ffn.w2"] = l.ffn_w2;
      out[lp + "ffn.b2"] = l.ffn_b2;
    }
  }

  NamedParams named(const std::string& prefix = "") const {
    NamedParams out;
    collect_named(prefix, out);
    return out;
  }

  ViTParams clone(bool requires_grad = true) const {
    ViTParams p;
    p.config = config;
    p.patch_weight = patch_weight.clone(requires_grad);
    p.patch_bias = patch_bias.clone(requires_grad);
    p.pos_grid = pos_grid.clone(requires_grad);
    p.cls_token = cls_token.clone(requires_grad);
    if (reg_tokens.defined()) p.reg_tokens = reg_tokens.clone(requires_grad);
    for (const auto& l : layers) {
      LayerParams c;
      c.ln1_gamma = l.ln1_gamma.clone(requires_grad);
      c.ln1_beta = l.ln1_beta.clone(requires_grad);
      c.wq = l.wq.clone(requires_grad);
      c.bq = l.bq.clone(requires_grad);
      c.wk = l.wk.clone(requires_grad);
      c.bk = l.bk.clone(requires_grad);
      c.wv = l.wv.clone(requires_grad);
      c.bv = l.bv.clone(requires_grad);
      c.wo = l.wo.clone(requires_grad);
      c.bo = l.bo.clone(requires_grad);
      c.ln2_gamma = l.ln2_gamma.clone(requires_grad);
      c.ln2_beta = l.ln2_beta.clone(requires_grad);
      c.ffn_w1 = l.ffn_w1.clone(requires_grad);
      c.ffn_b1 = l.ffn_b1.clone(requires_grad);
      c.ffn_w2 = l.ffn_w2.clone(requires_grad);
      c.ffn_b2 = l.ffn_b2.clone(requires_grad);
      p.layers.push_back(std::move(c));
    }
    return p;
  }

  void set_requires_grad(bool rg) {
    for (auto& [name, t] : named()) t.set_requires_grad(rg);
  }
};

// image [R,R,C] -> patches [N*N, P*P*C], rows in row-major grid order,
// each row scanning the patch in row-major pixel order, channels innermost.
inline Tensor patchify(const Tensor& image, int patch_size) {
  if (image.ndim() != 3) throw ShapeError("patchify: expected [R,R,C] image");
  int r = image.dim(0), c = image.dim(2);
  if (image.dim(1) != r) throw ShapeError("patchify: image must be square");
  if (patch_size <= 0 || r % patch_size != 0)
    throw ShapeError("patchify: image side must be a multiple of patch size");
  int n = r / patch_size, p = patch_size;
  std::vector<double> out(size_t(n) * n * p * p * c);
  const auto& img = image.data();
  size_t idx = 0;
  for (int gr = 0; gr < n; ++gr)
    for (int gc = 0; gc < n; ++gc)
      for (int pi = 0; pi < p; ++pi)
        for (int pj = 0; pj < p; ++pj)
          for (int ch = 0; ch < c; ++ch)
            out[idx++] = img[(size_t(gr * p + pi) * r + (gc * p + pj)) * c + ch];
  auto in = image.node();
  int rr = r;
  return detail::make_op({n * n, p * p * c}, std::move(out), {image},
                         [in, n, p, c, rr](detail::Node& self) {
    if (!in->requires_grad) return;
    in->ensure_grad();
    size_t idx = 0;
    for (int gr = 0; gr < n; ++gr)
      for (int gc = 0; gc < n; ++gc)
        for (int pi = 0; pi < p; ++pi)
          for (int pj = 0; pj < p; ++pj)
            for (int ch = 0; ch < c; ++ch)
              in->grad[(size_t(gr * p + pi) * rr + (gc * p + pj)) * c + ch] += self.grad[idx++];
  });
}

inline Tensor unpatchify(const Tensor& patches, int image_size, int patch_size, int channels) {
  int n = image_size / patch_size, p = patch_size, c = channels;
  if (patches.ndim() != 2 || patches.dim(0) != n * n || patches.dim(1) != p * p * c)
    throw ShapeError("unpatchify: shape mismatch");
  std::vector<double> img(size_t(image_size) * image_size * c);
  size_t idx = 0;
  for (int gr = 0; gr < n; ++gr)
    for (int gc = 0; gc < n; ++gc)
      for (int pi = 0; pi < p; ++pi)
        for (int pj = 0; pj < p; ++pj)
          for (int ch = 0; ch < c; ++ch)
            img[(size_t(gr * p + pi) * image_size + (gc * p + pj)) * c + ch] = patches.data()[idx++];
  return Tensor::from_data({image_size, image_size, c}, std::move(img));
}

// Projects patch rows and adds the positional entry for each grid position
// (linear row-major indices into the model's grid).
inline Tensor embed(const Tensor& patches, const ViTParams& params, const std::vector<int>& positions) {
  if (patches.ndim() != 2 || patches.dim(1) != params.patch_weight.dim(0))
    throw ShapeError("embed: patch row width does not match projection");
  if (int(positions.size()) != patches.dim(0))
    throw ShapeError("embed: one position required per patch row");
  const int n2 = params.config.num_patches();
  for (int pos : positions)
    if (pos < 0 || pos >= n2) throw IndexError("embed: position outside the grid");
  Tensor proj = add_rowvec(matmul(patches, params.patch_weight), params.patch_bias);
  Tensor pos_flat = reshape(params.pos_grid, {n2, params.config.embed_dim});
  return add(proj, gather_rows(pos_flat, positions));
}

struct AttentionResult {
  Tensor tokens;  // [T, D]
  Tensor logits;  // [H, T, T], pre-softmax, scaled by 1/sqrt(D/H)
};

// Pre-norm attention sub-block: x + proj(attend(norm(x))).
inline AttentionResult attention_layer(const Tensor& tokens, const LayerParams& lp, int num_heads) {
  if (tokens.ndim() != 2) throw ShapeError("attention_layer: expected [T,D] tokens");
  const int d = tokens.dim(1);
  if (num_heads <= 0 || d % num_heads != 0) throw ValueError("attention_layer: heads must divide width");
  const int hd = d / num_heads;
  const double inv_scale = 1.0 / std::sqrt(double(hd));

  Tensor u = layer_norm(tokens, lp.ln1_gamma, lp.ln1_beta);
  Tensor q = add_rowvec(matmul(u, lp.wq), lp.bq);
  Tensor k = add_rowvec(matmul(u, lp.wk), lp.bk);
  Tensor v = add_rowvec(matmul(u, lp.wv), lp.bv);

  std::vector<Tensor> outs, logits;
  outs.reserve(num_heads);
  logits.reserve(num_heads);
  for (int h = 0; h < num_heads; ++h) {
    Tensor qh = slice_cols(q, h * hd, (h + 1) * hd);
    Tensor kh = slice_cols(k, h * hd, (h + 1) * hd);
    Tensor vh = slice_cols(v, h * hd, (h + 1) * hd);
    Tensor lg = scale(matmul_nt(qh, kh), inv_scale);
    logits.push_back(lg);
    Tensor attn = softmax(lg, 1);
    outs.push_back(matmul(attn, vh));
  }
  Tensor merged = num_heads == 1 ? outs[0] : concat_cols(outs);
  Tensor projected = add_rowvec(matmul(merged, lp.wo), lp.bo);
  return {add(tokens, projected), stack0(logits)};
}

// Pre-norm FFN sub-block: x + w2(gelu(w1(norm(x)))).
inline Tensor ffn_block(const Tensor& tokens, const LayerParams& lp) {
  Tensor u = layer_norm(tokens, lp.ln2_gamma, lp.ln2_beta);
  Tensor h = gelu(add_rowvec(matmul(u, lp.ffn_w1), lp.ffn_b1));
  return add(tokens, add_rowvec(matmul(h, lp.ffn_w2), lp.ffn_b2));
}

inline AttentionResult transformer_layer(const Tensor& tokens, const LayerParams& lp, int num_heads) {
  AttentionResult att = attention_layer(tokens, lp, num_heads);
  return {ffn_block(att.tokens, lp), att.logits};
}

struct ForwardTrace {
  Tensor final_tokens;                  // [T, D], graph-attached
  std::vector<Tensor> attention_logits;  // one detached [H,T,T] per executed layer
  int num_registers = 0;

  int seq_len() const { return final_tokens.dim(0); }
  int executed_layers() const { return int(attention_logits.size()); }
};

// Runs depth_limit layers over an already-assembled token sequence.
inline ForwardTrace vit_forward_tokens(const Tensor& seq, const ViTParams& params, int depth_limit) {
  if (depth_limit < 0 || depth_limit > int(params.layers.size()))
    throw ValueError("vit_forward: depth_limit out of range");
  ForwardTrace trace;
  trace.num_registers = params.config.num_registers;
  Tensor x = seq;
  for (int l = 0; l < depth_limit; ++l) {
    AttentionResult r = transformer_layer(x, params.layers[l], params.config.num_heads);
    x = r.tokens;
    trace.attention_logits.push_back(r.logits.detach());
  }
  trace.final_tokens = x;
  return trace;
}

// Assembles [cls; registers; patches] from an image and runs depth_limit
// layers (depth 0 returns raw embeddings).
inline ForwardTrace vit_forward(const Tensor& image, const ViTParams& params, int depth_limit) {
  const ViTConfig& cfg = params.config;
  if (image.ndim() != 3 || image.dim(0) != cfg.image_size || image.dim(1) != cfg.image_size ||
      image.dim(2) != cfg.channels)
    throw ShapeError("vit_forward: image does not match config geometry");
  Tensor patches = patchify(image, cfg.patch_size);
  std::vector<int> positions(cfg.num_patches());
  for (size_t i = 0; i < positions.size(); ++i) positions[i] = int(i);
  Tensor pat = embed(patches, params, positions);
  std::vector<Tensor> parts;
  parts.push_back(reshape(params.cls_token, {1, cfg.embed_dim}));
  if (cfg.num_registers > 0) parts.push_back(params.reg_tokens);
  parts.push_back(pat);
  return vit_forward_tokens(concat_rows(parts), params, depth_limit);
}

inline ForwardTrace vit_forward(const Tensor& image, const ViTParams& params) {
  return vit_forward(image, params, int(params.layers.size()));
}

namespace detail {

// Corner-aligned bilinear sampling positions for resizing a side-n1 grid to
// side n2; returns for each target cell the 4 source taps and weights.
struct BilinearTap {
  int idx[4];
  double w[4];
};

inline std::vector<BilinearTap> bilinear_taps(int n1, int n2) {
  std::vector<BilinearTap> taps(size_t(n2) * n2);
  const double step = n2 > 1 ? double(n1 - 1) / double(n2 - 1) : 0.0;
  for (int r = 0; r < n2; ++r)
    for (int c = 0; c < n2; ++c) {
      double fr = n2 > 1 ? r * step : 0.5 * (n1 - 1);
      double fc = n2 > 1 ? c * step : 0.5 * (n1 - 1);
      int r0 = std::min(int(fr), n1 - 1), c0 = std::min(int(fc), n1 - 1);
      int r1 = std::min(r0 + 1, n1 - 1), c1 = std::min(c0 + 1, n1 - 1);
      double ar = fr - r0, ac = fc - c0;
      BilinearTap t;
      t.idx[0] = r0 * n1 + c0;
      t.idx[1] = r0 * n1 + c1;
      t.idx[2] = r1 * n1 + c0;
      t.idx[3] = r1 * n1 + c1;
      t.w[0] = (1 - ar) * (1 - ac);
      t.w[1] = (1 - ar) * ac;
      t.w[2] = ar * (1 - ac);
      t.w[3] = ar * ac;
      taps[size_t(r) * n2 + c] = t;
    }
  return taps;
}

}  // namespace detail

// Value-level resize of a learned positional grid [N1,N1,D] -> [N2,N2,D].
// Returns a fresh leaf; N2 == N1 is an exact copy.
inline Tensor interpolate_pos_grid(const Tensor& grid, int n2) {
  if (grid.ndim() != 3 || grid.dim(0) != grid.dim(1)) throw ShapeError("interpolate_pos_grid: expected [N,N,D]");
  const int n1 = grid.dim(0), d = grid.dim(2);
  if (n2 <= 0) throw ValueError("interpolate_pos_grid: target side must be positive");
  if (n2 == n1) return grid.detach();
  auto taps = detail::bilinear_taps(n1, n2);
  std::vector<double> out(size_t(n2) * n2 * d);
  const auto& src = grid.data();
  for (size_t cell = 0; cell < taps.size(); ++cell) {
    const auto& t = taps[cell];
    for (int ch = 0; ch < d; ++ch) {
      double acc = 0.0;
      for (int i = 0; i < 4; ++i) acc += t.w[i] * src[size_t(t.idx[i]) * d + ch];
      out[cell * d + ch] = acc;
    }
  }
  return Tensor::from_data({n2, n2, d}, std::move(out));
}

// Dense constant resize matrix [n2*n2, n1*n1] for differentiable map resizing.
inline Tensor bilinear_resize_matrix(int n1, int n2) {
  auto taps = detail::bilinear_taps(n1, n2);
  std::vector<double> w(size_t(n2) * n2 * n1 * n1, 0.0);
  for (size_t cell = 0; cell < taps.size(); ++cell)
    for (int i = 0; i < 4; ++i) w[cell * n1 * n1 + taps[cell].idx[i]] += taps[cell].w[i];
  return Tensor::from_data({n2 * n2, n1 * n1}, std::move(w));
}

// Corner-aligned bilinear downsample of a square image, per channel.
// Value-level (images are constants).
inline Tensor downsample(const Tensor& image, int out_side) {
  if (image.ndim() != 3 || image.dim(0) != image.dim(1)) throw ShapeError("downsample: expected [R,R,C]");
  const int r = image.dim(0), c = image.dim(2);
  if (out_side <= 0) throw ValueError("downsample: target side must be positive");
  if (out_side > r) throw ValueError("downsample: target side exceeds source");
  if (out_side == r) return image.detach();
  auto taps = detail::bilinear_taps(r, out_side);
  std::vector<double> out(size_t(out_side) * out_side * c);
  const auto& src = image.data();
  for (size_t cell = 0; cell < taps.size(); ++cell) {
    const auto& t = taps[cell];
    for (int ch = 0; ch < c; ++ch) {
      double acc = 0.0;
      for (int i = 0; i < 4; ++i) acc += t.w[i] * src[size_t(t.idx[i]) * c + ch];
      out[cell * c + ch] = acc;
    }
  }
  return Tensor::from_data({out_side, out_side, c}, std::move(out));
}

}  // namespace lookwhere
