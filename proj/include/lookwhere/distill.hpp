#pragma once

// What-where distillation targets and losses. The teacher's attention logits
// are aggregated into a single probability map over patch positions: average
// pre-softmax rows within each query type first, then across the chosen
// types, then across heads and layers, and softmax once over all positions.

#include <atomic>
#include <string>
#include <vector>

#include "lookwhere/extractor.hpp"
#include "lookwhere/vit.hpp"

namespace lookwhere {

enum class LayerSet { kFirstHalf, kLastHalf, kLastThird, kLastOnly, kAllLayers };

struct AggregationSpec {
  bool use_cls = false;
  bool use_reg = false;
  bool use_pat = true;
  LayerSet layers = LayerSet::kLastOnly;

  void validate() const {
    if (!use_cls && !use_reg && !use_pat)
      throw ValueError("AggregationSpec: at least one query type required");
  }
};

inline const char* layer_set_name(LayerSet s) {
  switch (s) {
    case LayerSet::kFirstHalf: return "first_half";
    case LayerSet::kLastHalf: return "last_half";
    case LayerSet::kLastThird: return "last_third";
    case LayerSet::kLastOnly: return "last_only";
    case LayerSet::kAllLayers: return "all_layers";
  }
  return "?";
}

// Layer indices a set selects out of l executed layers. Halves and thirds
// round down but never below one layer.
inline std::vector<int> resolve_layer_set(LayerSet set, int executed) {
  if (executed <= 0) throw ValueError("resolve_layer_set: no executed layers");
  auto span = [&](int from, int count) {
    std::vector<int> out;
    for (int i = 0; i < count; ++i) out.push_back(from + i);
    return out;
  };
  const int half = std::max(1, executed / 2);
  const int third = std::max(1, executed / 3);
  switch (set) {
    case LayerSet::kFirstHalf: return span(0, half);
    case LayerSet::kLastHalf: return span(executed - half, half);
    case LayerSet::kLastThird: return span(executed - third, third);
    case LayerSet::kLastOnly: return span(executed - 1, 1);
    case LayerSet::kAllLayers: return span(0, executed);
  }
  throw ValueError("resolve_layer_set: unknown set");
}

// Probability map [N,N] over patch positions from a trace's stored logits.
inline Tensor aggregate_attention(const ForwardTrace& trace, const AggregationSpec& spec) {
  spec.validate();
  const int g = trace.num_registers;
  if (spec.use_reg && g == 0)
    throw ValueError("aggregate_attention: register queries requested but model has none");
  const int t = trace.seq_len();
  const int n2 = t - 1 - g;
  const int n = int(std::sqrt(double(n2)) + 0.5);
  if (n * n != n2) throw ShapeError("aggregate_attention: patch count is not square");
  const auto layers = resolve_layer_set(spec.layers, trace.executed_layers());

  std::vector<std::pair<int, int>> query_spans;  // row ranges per chosen type
  if (spec.use_cls) query_spans.emplace_back(0, 1);
  if (spec.use_reg) query_spans.emplace_back(1, 1 + g);
  if (spec.use_pat) query_spans.emplace_back(1 + g, t);

  std::vector<double> acc(n2, 0.0);
  for (int layer : layers) {
    const Tensor& logits = trace.attention_logits[layer];
    const int heads = logits.dim(0);
    const auto& lv = logits.data();
    for (int h = 0; h < heads; ++h) {
      const double* hm = lv.data() + size_t(h) * t * t;
      for (int col = 0; col < n2; ++col) {
        double across_types = 0.0;
        for (const auto& [r0, r1] : query_spans) {
          double within = 0.0;
          for (int row = r0; row < r1; ++row) within += hm[size_t(row) * t + (1 + g + col)];
          across_types += within / double(r1 - r0);
        }
        acc[col] += across_types / double(query_spans.size());
      }
    }
  }
  // average over heads and layers
  double denom = 0.0;
  for (int layer : layers) denom += double(trace.attention_logits[layer].dim(0));
  for (auto& v : acc) v /= denom;

  Tensor flat = Tensor::from_data({n2}, std::move(acc));
  return reshape(softmax(flat, 0), {n, n});
}

struct TeacherTargets {
  Tensor cls;            // [D]
  Tensor patch_tokens;   // [N*N, D]
  Tensor attention_map;  // [N, N], sums to 1
};

namespace detail {
inline std::atomic<int64_t>& teacher_eval_counter() {
  static std::atomic<int64_t> counter{0};
  return counter;
}
}  // namespace detail

inline int64_t teacher_eval_count() { return detail::teacher_eval_counter().load(); }
inline void reset_teacher_eval_count() { detail::teacher_eval_counter().store(0); }

// Full-depth frozen teacher pass; everything detached.
inline TeacherTargets teacher_targets(const Tensor& image, const ViTParams& teacher,
                                      const AggregationSpec& spec) {
  detail::teacher_eval_counter().fetch_add(1);
  NoGradGuard ng;
  ForwardTrace trace = vit_forward(image, teacher, int(teacher.layers.size()));
  const int d = teacher.config.embed_dim;
  const int g = teacher.config.num_registers;
  TeacherTargets out;
  Tensor tokens = trace.final_tokens;
  out.cls = reshape(slice_rows(tokens, 0, 1), {d}).detach();
  out.patch_tokens = slice_rows(tokens, 1 + g, tokens.dim(0)).detach();
  out.attention_map = aggregate_attention(trace, spec).detach();
  return out;
}

enum class MapLoss { kKl, kMse };

struct LossWeights {
  double cls = 1.0;
  double pat = 1.0;
  double map = 0.1;

  void validate() const {
    if (cls < 0 || pat < 0 || map < 0) throw ValueError("LossWeights: negative weight");
    if (cls == 0 && pat == 0 && map == 0) throw ValueError("LossWeights: all weights zero");
  }
};

struct DistillLosses {
  Tensor total, cls, pat, map;
};

struct DistillOptions {
  MapLoss map_loss = MapLoss::kKl;
  bool reverse_kl = false;
};

// l_cls: MSE between cls tokens. l_pat: MSE between the densified grid and
// the teacher's patch tokens. l_map: divergence between the teacher map and
// softmax over the raw selector map.
inline DistillLosses compute_losses(const DenseLatents& dense, const Tensor& selector_map_raw,
                                    const TeacherTargets& targets, const LossWeights& weights,
                                    const DistillOptions& opts = {}) {
  weights.validate();
  const int n2 = int(targets.attention_map.numel());
  if (selector_map_raw.numel() != n2)
    throw ShapeError("compute_losses: selector map and teacher map sizes differ");
  DistillLosses out;
  out.cls = mse(dense.cls, targets.cls);
  out.pat = mse(dense.grid, targets.patch_tokens);
  Tensor student = softmax(reshape(selector_map_raw, {n2}), 0);
  Tensor teacher = reshape(targets.attention_map, {n2});
  if (opts.map_loss == MapLoss::kKl)
    out.map = opts.reverse_kl ? kl_divergence(student, teacher) : kl_divergence(teacher, student);
  else
    out.map = mse(student, teacher);
  out.total = add(add(scale(out.cls, weights.cls), scale(out.pat, weights.pat)), scale(out.map, weights.map));
  return out;
}

}  // namespace lookwhere
