#pragma once

#include <algorithm>
#include <cmath>
#include <iostream>
#include <map>
#include <ostream>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "lookwhere/extractor.hpp"
#include "lookwhere/selector.hpp"
#include "lookwhere/tensor.hpp"
#include "lookwhere/train.hpp"
#include "lookwhere/vit.hpp"

namespace lookwhere {

// ---------------------------------------------------------------------------
// kNN probes
// ---------------------------------------------------------------------------

enum class Metric { kEuclidean, kCosine };

struct EmbeddingBank {
  enum class Kind { kClassToken, kPatchToken };

  Tensor keys;              // [M, D]
  std::vector<int> labels;  // M entries
  Kind kind = Kind::kClassToken;

  int size() const { return keys.defined() ? keys.dim(0) : 0; }

  void validate() const {
    if (!keys.defined() || keys.ndim() != 2 || keys.dim(0) < 1)
      throw ValueError("EmbeddingBank: need at least one key");
    if (int(labels.size()) != keys.dim(0))
      throw ValueError("EmbeddingBank: label count must match key count");
  }
};

namespace detail {

inline double pair_distance(const std::vector<double>& a, std::size_t ai,
                            const std::vector<double>& b, std::size_t bi, int d, Metric metric) {
  if (metric == Metric::kEuclidean) {
    double sum = 0.0;
    for (int j = 0; j < d; ++j) {
      double diff = a[ai + std::size_t(j)] - b[bi + std::size_t(j)];
      sum += diff * diff;
    }
    return sum;  // squared; monotone in the true distance
  }
  double dot = 0.0, na = 0.0, nb = 0.0;
  for (int j = 0; j < d; ++j) {
    double x = a[ai + std::size_t(j)], y = b[bi + std::size_t(j)];
    dot += x * y;
    na += x * x;
    nb += y * y;
  }
  double denom = std::sqrt(na) * std::sqrt(nb);
  return 1.0 - (denom > 1e-300 ? dot / denom : 0.0);
}

// Majority vote over the `neighbors` nearest bank rows; distance ties break
// toward the smaller bank index, vote ties toward the smaller class id.
inline int knn_vote(const EmbeddingBank& bank, const std::vector<double>& query,
                    std::size_t query_off, int exclude_index, int neighbors, Metric metric) {
  const int m = bank.size(), d = bank.keys.dim(1);
  const std::vector<double>& keys = bank.keys.data();
  std::vector<std::pair<double, int>> dist;
  dist.reserve(std::size_t(m));
  for (int i = 0; i < m; ++i) {
    if (i == exclude_index) continue;
    dist.emplace_back(pair_distance(query, query_off, keys, std::size_t(i) * d, d, metric), i);
  }
  std::partial_sort(dist.begin(), dist.begin() + neighbors, dist.end());
  std::map<int, int> votes;
  for (int i = 0; i < neighbors; ++i) votes[bank.labels[std::size_t(dist[std::size_t(i)].second)]]++;
  int best_class = -1, best_count = -1;
  for (const auto& [cls, count] : votes)
    if (count > best_count) {  // map iterates ascending: ties keep the smaller class
      best_class = cls;
      best_count = count;
    }
  return best_class;
}

}  // namespace detail

// Fraction of queries whose majority class matches. With leave_one_out the
// queries must be the bank itself (row i skips bank entry i).
inline double knn_classify(const EmbeddingBank& bank, const Tensor& queries,
                           const std::vector<int>& query_labels, int neighbors = 3,
                           bool leave_one_out = false, Metric metric = Metric::kEuclidean) {
  bank.validate();
  if (!queries.defined() || queries.ndim() != 2 || queries.dim(1) != bank.keys.dim(1))
    throw ShapeError("knn_classify: query width must match bank width");
  if (int(query_labels.size()) != queries.dim(0))
    throw ValueError("knn_classify: one label per query required");
  const int m = bank.size();
  const int avail = leave_one_out ? m - 1 : m;
  if (neighbors < 1 || neighbors > avail)
    throw ValueError("knn_classify: neighbors out of range for this bank");
  if (leave_one_out && queries.dim(0) != m)
    throw ValueError("knn_classify: leave-one-out expects the bank as queries");
  const int d = queries.dim(1);
  const std::vector<double>& q = queries.data();
  long correct = 0;
  for (int i = 0; i < queries.dim(0); ++i) {
    int predicted = detail::knn_vote(bank, q, std::size_t(i) * d, leave_one_out ? i : -1,
                                     neighbors, metric);
    if (predicted == query_labels[std::size_t(i)]) ++correct;
  }
  return double(correct) / double(queries.dim(0));
}

// Patch-token variant: majority over the nearest train patches, no
// self-exclusion (banks and queries come from disjoint splits).
inline double knn_segment(const EmbeddingBank& bank, const Tensor& queries,
                          const std::vector<int>& query_labels, int neighbors = 20,
                          Metric metric = Metric::kEuclidean) {
  return knn_classify(bank, queries, query_labels, neighbors, false, metric);
}

// ---------------------------------------------------------------------------
// Embedding banks from models
// ---------------------------------------------------------------------------

inline EmbeddingBank build_class_bank(const SelectorParams& selector, const ViTParams& extractor,
                                      const std::vector<Sample>& data, int k,
                                      SelectionMode selection = SelectionMode::kSelector,
                                      Conditioning conditioning = Conditioning::kSelectorTokens,
                                      Rng* rng = nullptr) {
  if (data.empty()) throw ValueError("build_class_bank: empty dataset");
  if (selection == SelectionMode::kRandom && rng == nullptr)
    throw ValueError("build_class_bank: random selection needs an rng");
  NoGradGuard ng;
  const int n_high = extractor.config.grid_side();
  const int d = extractor.config.embed_dim;
  EmbeddingBank bank;
  bank.kind = EmbeddingBank::Kind::kClassToken;
  bank.keys = Tensor::zeros({int(data.size()), d});
  for (std::size_t i = 0; i < data.size(); ++i) {
    const Sample& s = data[i];
    SelectorOutput sel = selector_forward(s.image, selector, n_high);
    std::vector<int> positions = selection == SelectionMode::kSelector
                                     ? top_k_select(sel.map, k)
                                     : random_selector_baseline(n_high, k, *rng);
    Tensor toks = tokenize_selected(s.image, positions, extractor);
    SparseLatents sparse =
        extractor_forward(toks, sel.cls, sel.registers, extractor, positions, conditioning);
    for (int j = 0; j < d; ++j)
      bank.keys.data_mut()[i * std::size_t(d) + std::size_t(j)] = sparse.cls.data()[std::size_t(j)];
    bank.labels.push_back(s.label);
  }
  return bank;
}

inline EmbeddingBank build_patch_bank(const SelectorParams& selector, const ViTParams& extractor,
                                      const std::vector<Sample>& data, int k,
                                      SelectionMode selection = SelectionMode::kSelector,
                                      Conditioning conditioning = Conditioning::kSelectorTokens,
                                      Rng* rng = nullptr) {
  if (data.empty()) throw ValueError("build_patch_bank: empty dataset");
  if (selection == SelectionMode::kRandom && rng == nullptr)
    throw ValueError("build_patch_bank: random selection needs an rng");
  NoGradGuard ng;
  const int n_high = extractor.config.grid_side();
  const int d = extractor.config.embed_dim;
  EmbeddingBank bank;
  bank.kind = EmbeddingBank::Kind::kPatchToken;
  bank.keys = Tensor::zeros({int(data.size()) * k, d});
  for (std::size_t i = 0; i < data.size(); ++i) {
    const Sample& s = data[i];
    SelectorOutput sel = selector_forward(s.image, selector, n_high);
    std::vector<int> positions = selection == SelectionMode::kSelector
                                     ? top_k_select(sel.map, k)
                                     : random_selector_baseline(n_high, k, *rng);
    Tensor toks = tokenize_selected(s.image, positions, extractor);
    SparseLatents sparse =
        extractor_forward(toks, sel.cls, sel.registers, extractor, positions, conditioning);
    for (std::size_t p = 0; p < positions.size(); ++p) {
      std::size_t row = i * std::size_t(k) + p;
      for (int j = 0; j < d; ++j)
        bank.keys.data_mut()[row * std::size_t(d) + std::size_t(j)] =
            sparse.patch_tokens.at(int(p), j);
      bank.labels.push_back(s.patch_labels[std::size_t(positions[p])]);
    }
  }
  return bank;
}

inline EmbeddingBank build_teacher_class_bank(const ViTParams& teacher,
                                              const std::vector<Sample>& data) {
  if (data.empty()) throw ValueError("build_teacher_class_bank: empty dataset");
  NoGradGuard ng;
  const int d = teacher.config.embed_dim;
  EmbeddingBank bank;
  bank.kind = EmbeddingBank::Kind::kClassToken;
  bank.keys = Tensor::zeros({int(data.size()), d});
  for (std::size_t i = 0; i < data.size(); ++i) {
    ForwardTrace trace = vit_forward(data[i].image, teacher);
    for (int j = 0; j < d; ++j)
      bank.keys.data_mut()[i * std::size_t(d) + std::size_t(j)] = trace.final_tokens.at(0, j);
    bank.labels.push_back(data[i].label);
  }
  return bank;
}

// ---------------------------------------------------------------------------
// Compute accountant
// ---------------------------------------------------------------------------

struct CostReport {
  double flops_total = 0.0;
  double flops_attention = 0.0;
  double flops_ffn = 0.0;
  double flops_embed = 0.0;
  double flops_head = 0.0;
  std::vector<int> tokens_per_layer;
  double peak_activation_values = 0.0;
};

// Per layer with T tokens: attention 4*T*D^2 + 2*T^2*D, FFN 2*T*D*F.
// The embedding term covers the patch projection for `embedded_patches`
// patches; `head_classes` adds a class-token linear head. Softmax, norms and
// GELU are not counted.
inline CostReport count_flops(const ViTConfig& cfg, const std::vector<int>& tokens_per_layer,
                              int embedded_patches = -1, int head_classes = 0) {
  const double d = cfg.embed_dim;
  const double f = cfg.ffn_hidden();
  if (embedded_patches < 0) embedded_patches = cfg.num_patches();
  CostReport report;
  report.tokens_per_layer = tokens_per_layer;
  for (int tokens : tokens_per_layer) {
    if (tokens < 1) throw ValueError("count_flops: layers need at least one token");
    const double t = tokens;
    report.flops_attention += 4.0 * t * d * d + 2.0 * t * t * d;
    report.flops_ffn += 2.0 * t * d * f;
    const double attn_live = 4.0 * t * d + double(cfg.num_heads) * t * t;
    const double ffn_live = 2.0 * t * d + t * f;
    report.peak_activation_values =
        std::max({report.peak_activation_values, attn_live, ffn_live});
  }
  report.flops_embed =
      double(embedded_patches) * double(cfg.patch_size) * cfg.patch_size * cfg.channels * d;
  if (head_classes > 0) report.flops_head = d * double(head_classes);
  report.flops_total =
      report.flops_attention + report.flops_ffn + report.flops_embed + report.flops_head;
  return report;
}

// Selector stage (truncated low-res trunk plus map head) followed by the
// extractor stage over 1+G+k tokens at full depth.
inline CostReport lookwhere_cost(const ViTConfig& low_cfg, int low_depth, int map_hidden,
                                 const ViTConfig& full_cfg, int k, int head_classes = 0) {
  if (k < 0 || k > full_cfg.num_patches()) throw ValueError("lookwhere_cost: k out of range");
  if (low_depth < 0 || low_depth > low_cfg.num_layers)
    throw ValueError("lookwhere_cost: bad selector depth");
  const int low_tokens = 1 + low_cfg.num_registers + low_cfg.num_patches();
  CostReport selector =
      count_flops(low_cfg, std::vector<int>(std::size_t(low_depth), low_tokens));
  const int n_low2 = low_cfg.num_patches();
  const double d = low_cfg.embed_dim;
  const int q = (full_cfg.grid_side() + low_cfg.grid_side() - 1) / low_cfg.grid_side();
  selector.flops_head += double(n_low2) * (d * map_hidden + double(map_hidden) * q * q);

  const int ext_tokens = 1 + full_cfg.num_registers + k;
  CostReport extractor = count_flops(
      full_cfg, std::vector<int>(std::size_t(full_cfg.num_layers), ext_tokens), k, head_classes);

  CostReport total;
  total.flops_attention = selector.flops_attention + extractor.flops_attention;
  total.flops_ffn = selector.flops_ffn + extractor.flops_ffn;
  total.flops_embed = selector.flops_embed + extractor.flops_embed;
  total.flops_head = selector.flops_head + extractor.flops_head;
  total.flops_total = total.flops_attention + total.flops_ffn + total.flops_embed +
                      total.flops_head;
  total.tokens_per_layer = selector.tokens_per_layer;
  total.tokens_per_layer.insert(total.tokens_per_layer.end(), extractor.tokens_per_layer.begin(),
                                extractor.tokens_per_layer.end());
  total.peak_activation_values =
      std::max(selector.peak_activation_values, extractor.peak_activation_values);
  return total;
}

// ---------------------------------------------------------------------------
// Linear probe
// ---------------------------------------------------------------------------

struct LinearProbeConfig {
  int epochs = 300;
  double lr = 0.05;
  double weight_decay = 0.0;
  int num_classes = 0;  // 0: infer from the labels
};

// Multinomial logistic regression on frozen features, trained full-batch with
// AdamW from a zero init (convex, so the run is deterministic). Reports top-1
// on the eval split when given, else on the training features.
inline double linear_probe(const Tensor& features, const std::vector<int>& labels,
                           const LinearProbeConfig& cfg = {}, const Tensor* eval_features = nullptr,
                           const std::vector<int>* eval_labels = nullptr) {
  if (!features.defined() || features.ndim() != 2 || features.dim(0) < 1)
    throw ShapeError("linear_probe: features must be [M, D]");
  if (int(labels.size()) != features.dim(0))
    throw ValueError("linear_probe: one label per feature row required");
  if ((eval_features == nullptr) != (eval_labels == nullptr))
    throw ValueError("linear_probe: eval features and labels come together");

  int classes = cfg.num_classes;
  for (int l : labels) {
    if (l < 0) throw ValueError("linear_probe: negative label");
    classes = std::max(classes, l + 1);
  }
  bool single = true;
  for (int l : labels)
    if (l != labels[0]) single = false;
  if (single) {
    std::cerr << "linear_probe: single-class data, probe is vacuous\n";
    if (!eval_labels) return 1.0;
    long hit = 0;
    for (int l : *eval_labels)
      if (l == labels[0]) ++hit;
    return double(hit) / double(eval_labels->size());
  }

  const int d = features.dim(1);
  LinearHead head;
  head.weight = Tensor::zeros({d, classes}, true);
  head.bias = Tensor::zeros({classes}, true);
  NamedParams params = head.named();
  AdamWState state{AdamWConfig{cfg.lr, 0.9, 0.999, 1e-8, cfg.weight_decay}};
  Tensor x = features.detach();
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    zero_grad(params);
    Tensor loss = cross_entropy(head.forward(x), labels);
    backward(loss);
    state.hp.lr = lr_at(epoch, cfg.epochs, cfg.lr, cfg.lr * 0.01, 0.0);
    adamw_step(params, state);
  }

  NoGradGuard ng;
  const Tensor& ex = eval_features ? *eval_features : features;
  const std::vector<int>& el = eval_labels ? *eval_labels : labels;
  if (ex.ndim() != 2 || ex.dim(1) != d) throw ShapeError("linear_probe: eval width mismatch");
  if (int(el.size()) != ex.dim(0)) throw ValueError("linear_probe: eval label count mismatch");
  Tensor logits = head.forward(ex.detach());
  long correct = 0;
  for (int i = 0; i < ex.dim(0); ++i)
    if (detail::argmax_row(logits, i) == el[std::size_t(i)]) ++correct;
  return double(correct) / double(ex.dim(0));
}

// ---------------------------------------------------------------------------
// Report formatting
// ---------------------------------------------------------------------------

struct MetricReport {
  std::vector<std::pair<std::string, double>> rows;

  void add(const std::string& name, double value) { rows.emplace_back(name, value); }
};

inline std::string metrics_table(const MetricReport& report) {
  std::size_t width = 6;
  for (const auto& [name, value] : report.rows) width = std::max(width, name.size());
  std::ostringstream out;
  out << std::left;
  for (const auto& [name, value] : report.rows) {
    out.width(std::streamsize(width + 2));
    out << name;
    out << value << "\n";
  }
  return out.str();
}

inline std::string metrics_csv(const MetricReport& report) {
  std::ostringstream out;
  out.precision(12);
  out << "metric,value\n";
  for (const auto& [name, value] : report.rows) out << name << "," << value << "\n";
  return out.str();
}

}  // namespace lookwhere
