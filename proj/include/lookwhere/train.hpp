#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <ostream>
#include <string>
#include <vector>

#include "lookwhere/data.hpp"
#include "lookwhere/distill.hpp"
#include "lookwhere/extractor.hpp"
#include "lookwhere/selector.hpp"
#include "lookwhere/tensor.hpp"
#include "lookwhere/vit.hpp"

namespace lookwhere {

// ---------------------------------------------------------------------------
// Linear heads and schedules
// ---------------------------------------------------------------------------

struct LinearHead {
  Tensor weight;  // [D, classes]
  Tensor bias;    // [classes]

  static LinearHead init(int dim, int classes, Rng& rng) {
    if (dim <= 0 || classes <= 0) throw ValueError("LinearHead: bad geometry");
    LinearHead h;
    h.weight = Tensor::zeros({dim, classes}, true);
    fill_normal(h.weight, rng, 0.02);
    h.bias = Tensor::zeros({classes}, true);
    return h;
  }

  int classes() const { return weight.dim(1); }

  Tensor forward(const Tensor& x) const {  // [T, D] -> [T, classes]
    return add_rowvec(matmul(x, weight), bias);
  }

  void collect_named(const std::string& prefix, NamedParams& out) const {
    out.emplace(prefix + "weight", weight);
    out.emplace(prefix + "bias", bias);
  }

  NamedParams named(const std::string& prefix = "head.") const {
    NamedParams out;
    collect_named(prefix, out);
    return out;
  }

  LinearHead clone(bool rg = true) const { return {weight.clone(rg), bias.clone(rg)}; }
};

// Linear warmup to the peak over the first warmup fraction of steps, then
// cosine decay to the floor.
inline double lr_at(long step, long total_steps, double peak, double floor_lr,
                    double warmup_frac) {
  if (total_steps <= 0) return peak;
  if (floor_lr > peak) throw ValueError("lr_at: floor above peak");
  warmup_frac = std::clamp(warmup_frac, 0.0, 1.0);
  const long warm = std::lround(warmup_frac * double(total_steps));
  if (step < warm) return peak * double(step + 1) / double(warm);
  if (step >= total_steps || total_steps == warm) return floor_lr;
  const double t = double(step - warm) / double(total_steps - warm);
  return floor_lr + (peak - floor_lr) * 0.5 * (1.0 + std::cos(t * 3.14159265358979323846));
}

// Deterministic horizontal-flip hook.
inline Sample flip_horizontal(const Sample& s) {
  Sample out;
  out.label = s.label;
  const int side = s.image.dim(0), ch = s.image.dim(2);
  out.image = Tensor::zeros(s.image.shape());
  for (int r = 0; r < side; ++r)
    for (int c = 0; c < side; ++c)
      for (int h = 0; h < ch; ++h)
        out.image.data_mut()[(std::size_t(r) * side + c) * ch + h] =
            s.image.data()[(std::size_t(r) * side + side - 1 - c) * ch + h];
  const int grid = int(std::sqrt(double(s.patch_labels.size())) + 0.5);
  out.patch_labels.assign(s.patch_labels.size(), 0);
  for (int r = 0; r < grid; ++r)
    for (int c = 0; c < grid; ++c)
      out.patch_labels[std::size_t(r) * grid + c] = s.patch_labels[std::size_t(r) * grid + grid - 1 - c];
  out.glyph_row = s.glyph_row;
  out.glyph_col = -1;  // no longer meaningful after the flip
  return out;
}

// ---------------------------------------------------------------------------
// Teacher supervision
// ---------------------------------------------------------------------------

struct TeacherTrainConfig {
  int epochs = 12;
  int batch_size = 16;
  double lr = 1e-3;
  double lr_floor = 1e-5;
  double warmup_frac = 0.1;
  double weight_decay = 0.01;
  double early_stop_acc = 0.975;
  std::uint64_t seed = 0;
  bool augment_flip = false;
};

struct TeacherEpoch {
  double loss = 0.0;
  double accuracy = 0.0;
};

struct TeacherHistory {
  std::vector<TeacherEpoch> epochs;
  bool early_stopped = false;
};

inline TeacherHistory train_teacher(ViTParams& teacher, LinearHead& head,
                                    const std::vector<Sample>& data,
                                    const TeacherTrainConfig& cfg, std::ostream* log = nullptr) {
  if (data.empty()) throw ValueError("train_teacher: empty dataset");
  if (cfg.epochs < 1 || cfg.batch_size < 1) throw ValueError("train_teacher: bad loop sizes");
  NamedParams params = teacher.named("teacher.");
  head.collect_named("head.", params);
  AdamWState state{AdamWConfig{cfg.lr, 0.9, 0.999, 1e-8, cfg.weight_decay}};
  Rng rng(cfg.seed);

  const long n = long(data.size());
  const long batches = (n + cfg.batch_size - 1) / cfg.batch_size;
  const long total_steps = long(cfg.epochs) * batches;
  long step = 0;
  TeacherHistory hist;

  std::vector<int> order(data.size());
  std::iota(order.begin(), order.end(), 0);
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    rng.shuffle(order.begin(), order.end());
    double loss_sum = 0.0;
    long correct = 0;
    for (long b = 0; b < batches; ++b) {
      const long lo = b * cfg.batch_size;
      const long hi = std::min(n, lo + cfg.batch_size);
      zero_grad(params);
      for (long i = lo; i < hi; ++i) {
        const Sample& base = data[std::size_t(order[std::size_t(i)])];
        Sample flipped;
        const Sample* s = &base;
        if (cfg.augment_flip && rng.uniform_int(0, 1) == 1) {
          flipped = flip_horizontal(base);
          s = &flipped;
        }
        ForwardTrace trace = vit_forward(s->image, teacher);
        Tensor cls = slice_rows(trace.final_tokens, 0, 1);
        Tensor logits = head.forward(cls);
        int arg = 0;
        for (int c = 1; c < head.classes(); ++c)
          if (logits.at(0, c) > logits.at(0, arg)) arg = c;
        if (arg == s->label) ++correct;
        Tensor loss = cross_entropy(logits, {s->label});
        loss_sum += loss.item();
        backward(scale(loss, 1.0 / double(hi - lo)));
      }
      state.hp.lr = lr_at(step, total_steps, cfg.lr, cfg.lr_floor, cfg.warmup_frac);
      adamw_step(params, state);
      ++step;
    }
    TeacherEpoch e{loss_sum / double(n), double(correct) / double(n)};
    hist.epochs.push_back(e);
    if (log)
      *log << "teacher epoch " << (epoch + 1) << " loss " << e.loss << " acc " << e.accuracy
           << "\n";
    if (e.accuracy >= cfg.early_stop_acc) {
      hist.early_stopped = true;
      break;
    }
  }
  return hist;
}

inline double evaluate_teacher_accuracy(const ViTParams& teacher, const LinearHead& head,
                                        const std::vector<Sample>& data) {
  if (data.empty()) throw ValueError("evaluate_teacher_accuracy: empty dataset");
  NoGradGuard ng;
  long correct = 0;
  for (const Sample& s : data) {
    ForwardTrace trace = vit_forward(s.image, teacher);
    Tensor logits = head.forward(slice_rows(trace.final_tokens, 0, 1));
    int arg = 0;
    for (int c = 1; c < head.classes(); ++c)
      if (logits.at(0, c) > logits.at(0, arg)) arg = c;
    if (arg == s.label) ++correct;
  }
  return double(correct) / double(data.size());
}

// ---------------------------------------------------------------------------
// Student initialization
// ---------------------------------------------------------------------------

struct StudentInit {
  SelectorParams selector;
  ViTParams extractor;
};

// The extractor starts as a full copy of the teacher. The selector trunk
// copies the embedding, global tokens and the first low_depth layers, with the
// positional grid re-interpolated to the low-res geometry; its map head is
// fresh.
inline StudentInit init_from_teacher(const ViTParams& teacher, int low_image_side, int low_depth,
                                     int map_hidden, Rng& rng) {
  const ViTConfig& tc = teacher.config;
  if (low_depth < 0 || low_depth > tc.num_layers)
    throw ValueError("init_from_teacher: low depth must not exceed the teacher's depth");
  if (low_image_side <= 0 || low_image_side % tc.patch_size != 0 ||
      low_image_side > tc.image_size)
    throw ValueError("init_from_teacher: low-res side must be a patch multiple within the teacher's");

  StudentInit out;
  out.extractor = teacher.clone(true);

  ViTConfig lc = tc;
  lc.image_size = low_image_side;
  lc.num_layers = low_depth;
  lc.validate();
  ViTParams trunk = teacher.clone(true);
  trunk.config = lc;
  trunk.layers.resize(std::size_t(low_depth));
  trunk.pos_grid = interpolate_pos_grid(teacher.pos_grid, lc.grid_side()).clone(true);
  out.selector.trunk = std::move(trunk);

  const int n_high = tc.grid_side(), n_low = lc.grid_side();
  const int q = (n_high + n_low - 1) / n_low;
  out.selector.head = MapHeadParams::init(tc.embed_dim, map_hidden, q, rng);
  return out;
}

// ---------------------------------------------------------------------------
// What-where pretraining
// ---------------------------------------------------------------------------

struct PretrainConfig {
  int epochs = 8;
  int batch_size = 16;
  int k_min = 4;
  int k_max = 16;
  LossWeights weights;
  AdamWConfig adamw{1e-3, 0.9, 0.999, 1e-8, 0.01};
  double lr_floor = 1e-5;
  double warmup_frac = 0.1;
  std::uint64_t seed = 0;
  AggregationSpec aggregation;
  InterpConfig interp;
  Conditioning conditioning = Conditioning::kSelectorTokens;
  DistillOptions distill;
  bool augment_flip = false;
};

struct PretrainEpoch {
  double total = 0.0, cls = 0.0, pat = 0.0, map = 0.0;
};

struct PretrainHistory {
  std::vector<PretrainEpoch> epochs;
};

// The teacher is frozen, so its targets are computed once per image and
// reused across epochs (flipped images bypass the cache).
inline PretrainHistory pretrain(SelectorParams& selector, ViTParams& extractor,
                                const ViTParams& teacher, const std::vector<Sample>& data,
                                const PretrainConfig& cfg, std::ostream* log = nullptr) {
  if (data.empty()) throw ValueError("pretrain: empty dataset");
  if (cfg.epochs < 1 || cfg.batch_size < 1) throw ValueError("pretrain: bad loop sizes");
  const int n_high = extractor.config.grid_side();
  if (cfg.k_min < 1 || cfg.k_min > cfg.k_max || cfg.k_max > n_high * n_high)
    throw ValueError("pretrain: need 1 <= k_min <= k_max <= N^2");
  cfg.weights.validate();
  cfg.aggregation.validate();

  NamedParams params = selector.named("selector.");
  extractor.collect_named("extractor.", params);
  AdamWState state{cfg.adamw};
  Rng rng(cfg.seed);

  std::vector<TeacherTargets> cache;
  cache.reserve(data.size());
  for (const Sample& s : data) cache.push_back(teacher_targets(s.image, teacher, cfg.aggregation));

  const long n = long(data.size());
  const long batches = (n + cfg.batch_size - 1) / cfg.batch_size;
  const long total_steps = long(cfg.epochs) * batches;
  long step = 0;
  PretrainHistory hist;

  std::vector<int> order(data.size());
  std::iota(order.begin(), order.end(), 0);
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    rng.shuffle(order.begin(), order.end());
    PretrainEpoch acc;
    for (long b = 0; b < batches; ++b) {
      const long lo = b * cfg.batch_size;
      const long hi = std::min(n, lo + cfg.batch_size);
      const int k = rng.uniform_int(cfg.k_min, cfg.k_max);  // one k per batch
      zero_grad(params);
      PretrainEpoch batch_mean;
      for (long i = lo; i < hi; ++i) {
        const int idx = order[std::size_t(i)];
        const Sample& base = data[std::size_t(idx)];
        Sample flipped;
        const Sample* s = &base;
        bool use_cache = true;
        if (cfg.augment_flip && rng.uniform_int(0, 1) == 1) {
          flipped = flip_horizontal(base);
          s = &flipped;
          use_cache = false;
        }
        TeacherTargets targets =
            use_cache ? cache[std::size_t(idx)]
                      : teacher_targets(s->image, teacher, cfg.aggregation);
        SelectorOutput sel = selector_forward(s->image, selector, n_high);
        std::vector<int> positions = top_k_select(sel.map, k);
        Tensor toks = tokenize_selected(s->image, positions, extractor);
        SparseLatents sparse =
            extractor_forward(toks, sel.cls, sel.registers, extractor, positions,
                              cfg.conditioning);
        InterpConfig interp = cfg.interp;  // small k shrinks the neighborhood
        interp.neighbors = std::min(interp.neighbors, k);
        DenseLatents dense = interpolate_sparse(sparse, n_high, interp);
        DistillLosses losses = compute_losses(dense, sel.map, targets, cfg.weights, cfg.distill);
        backward(scale(losses.total, 1.0 / double(hi - lo)));
        const double bt = losses.total.item(), bc = losses.cls.item(), bp = losses.pat.item(),
                     bm = losses.map.item();
        batch_mean.total += bt;
        batch_mean.cls += bc;
        batch_mean.pat += bp;
        batch_mean.map += bm;
        acc.total += bt;
        acc.cls += bc;
        acc.pat += bp;
        acc.map += bm;
      }
      state.hp.lr = lr_at(step, total_steps, cfg.adamw.lr, cfg.lr_floor, cfg.warmup_frac);
      adamw_step(params, state);
      ++step;
      if (log) {
        const double inv = 1.0 / double(hi - lo);
        *log << "epoch " << (epoch + 1) << " step " << step << " loss_total "
             << batch_mean.total * inv << " loss_cls " << batch_mean.cls * inv << " loss_pat "
             << batch_mean.pat * inv << " loss_map " << batch_mean.map * inv << "\n";
      }
    }
    acc.total /= double(n);
    acc.cls /= double(n);
    acc.pat /= double(n);
    acc.map /= double(n);
    hist.epochs.push_back(acc);
  }
  return hist;
}

// ---------------------------------------------------------------------------
// Finetuning and the random-selection ablation
// ---------------------------------------------------------------------------

enum class SelectionMode { kSelector, kRandom };
enum class HeadKind { kClassToken, kPatchToken };

inline std::vector<int> random_selector_baseline(int n_high, int k, Rng& rng) {
  const int n2 = n_high * n_high;
  if (k < 1 || k > n2) throw ValueError("random_selector_baseline: k out of range");
  return rng.sample_without_replacement(n2, k);
}

struct FinetuneConfig {
  int epochs = 8;
  int batch_size = 16;
  HeadKind head = HeadKind::kClassToken;
  SelectionMode selection = SelectionMode::kSelector;
  int k = 6;
  bool varied_k = false;
  int k_min = 1;
  int k_max = 64;
  AdamWConfig adamw{1e-3, 0.9, 0.999, 1e-8, 0.01};
  double lr_floor = 1e-5;
  double warmup_frac = 0.1;
  std::uint64_t seed = 0;
  Conditioning conditioning = Conditioning::kSelectorTokens;
  bool augment_flip = false;
};

struct FinetuneEpoch {
  double loss = 0.0;
  double accuracy = 0.0;
};

struct FinetuneHistory {
  std::vector<FinetuneEpoch> epochs;
};

namespace detail {

inline int argmax_row(const Tensor& logits, int row) {
  int arg = 0;
  for (int c = 1; c < logits.dim(1); ++c)
    if (logits.at(row, c) > logits.at(row, arg)) arg = c;
  return arg;
}

}  // namespace detail

// The selector runs in no-gradient mode and its parameters stay out of the
// optimizer; only the extractor and the head learn. The teacher is not
// involved at all.
inline FinetuneHistory finetune(const SelectorParams& selector, ViTParams& extractor,
                                LinearHead& head, const std::vector<Sample>& data,
                                const FinetuneConfig& cfg, std::ostream* log = nullptr) {
  if (data.empty()) throw ValueError("finetune: empty dataset");
  if (cfg.epochs < 1 || cfg.batch_size < 1) throw ValueError("finetune: bad loop sizes");
  const int n_high = extractor.config.grid_side();
  const int n2 = n_high * n_high;
  if (cfg.varied_k) {
    if (cfg.k_min < 1 || cfg.k_min > cfg.k_max || cfg.k_max > n2)
      throw ValueError("finetune: need 1 <= k_min <= k_max <= N^2");
  } else if (cfg.k < 1 || cfg.k > n2) {
    throw ValueError("finetune: k out of range");
  }

  NamedParams params = extractor.named("extractor.");
  head.collect_named("head.", params);
  AdamWState state{cfg.adamw};
  Rng rng(cfg.seed);

  const long n = long(data.size());
  const long batches = (n + cfg.batch_size - 1) / cfg.batch_size;
  const long total_steps = long(cfg.epochs) * batches;
  long step = 0;
  FinetuneHistory hist;

  std::vector<int> order(data.size());
  std::iota(order.begin(), order.end(), 0);
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    rng.shuffle(order.begin(), order.end());
    double loss_sum = 0.0;
    long correct = 0, predictions = 0;
    for (long b = 0; b < batches; ++b) {
      const long lo = b * cfg.batch_size;
      const long hi = std::min(n, lo + cfg.batch_size);
      const int k = cfg.varied_k ? rng.uniform_int(cfg.k_min, cfg.k_max) : cfg.k;
      zero_grad(params);
      for (long i = lo; i < hi; ++i) {
        const Sample& base = data[std::size_t(order[std::size_t(i)])];
        Sample flipped;
        const Sample* s = &base;
        if (cfg.augment_flip && rng.uniform_int(0, 1) == 1) {
          flipped = flip_horizontal(base);
          s = &flipped;
        }
        SelectorOutput sel;
        {
          NoGradGuard ng;
          sel = selector_forward(s->image, selector, n_high);
        }
        std::vector<int> positions = cfg.selection == SelectionMode::kSelector
                                         ? top_k_select(sel.map, k)
                                         : random_selector_baseline(n_high, k, rng);
        Tensor toks = tokenize_selected(s->image, positions, extractor);
        SparseLatents sparse =
            extractor_forward(toks, sel.cls, sel.registers, extractor, positions,
                              cfg.conditioning);
        Tensor loss;
        if (cfg.head == HeadKind::kClassToken) {
          Tensor logits = head.forward(reshape(sparse.cls, {1, extractor.config.embed_dim}));
          if (detail::argmax_row(logits, 0) == s->label) ++correct;
          ++predictions;
          loss = cross_entropy(logits, {s->label});
        } else {
          Tensor logits = head.forward(sparse.patch_tokens);
          std::vector<int> labels(positions.size());
          for (std::size_t p = 0; p < positions.size(); ++p) {
            labels[p] = s->patch_labels[std::size_t(positions[p])];
            if (detail::argmax_row(logits, int(p)) == labels[p]) ++correct;
            ++predictions;
          }
          loss = cross_entropy(logits, labels);
        }
        loss_sum += loss.item();
        backward(scale(loss, 1.0 / double(hi - lo)));
      }
      state.hp.lr = lr_at(step, total_steps, cfg.adamw.lr, cfg.lr_floor, cfg.warmup_frac);
      adamw_step(params, state);
      ++step;
    }
    FinetuneEpoch e{loss_sum / double(n), double(correct) / double(std::max(1L, predictions))};
    hist.epochs.push_back(e);
    if (log)
      *log << "finetune epoch " << (epoch + 1) << " loss " << e.loss << " acc " << e.accuracy
           << "\n";
  }
  return hist;
}

// ---------------------------------------------------------------------------
// Lightweight evaluation passes
// ---------------------------------------------------------------------------

inline double evaluate_accuracy(const SelectorParams& selector, const ViTParams& extractor,
                                const LinearHead& head, const std::vector<Sample>& data, int k,
                                SelectionMode selection = SelectionMode::kSelector,
                                Conditioning conditioning = Conditioning::kSelectorTokens,
                                Rng* rng = nullptr) {
  if (data.empty()) throw ValueError("evaluate_accuracy: empty dataset");
  if (selection == SelectionMode::kRandom && rng == nullptr)
    throw ValueError("evaluate_accuracy: random selection needs an rng");
  NoGradGuard ng;
  const int n_high = extractor.config.grid_side();
  long correct = 0;
  for (const Sample& s : data) {
    SelectorOutput sel = selector_forward(s.image, selector, n_high);
    std::vector<int> positions = selection == SelectionMode::kSelector
                                     ? top_k_select(sel.map, k)
                                     : random_selector_baseline(n_high, k, *rng);
    Tensor toks = tokenize_selected(s.image, positions, extractor);
    SparseLatents sparse =
        extractor_forward(toks, sel.cls, sel.registers, extractor, positions, conditioning);
    Tensor logits = head.forward(reshape(sparse.cls, {1, extractor.config.embed_dim}));
    if (detail::argmax_row(logits, 0) == s.label) ++correct;
  }
  return double(correct) / double(data.size());
}

inline double evaluate_patch_accuracy(const SelectorParams& selector, const ViTParams& extractor,
                                      const LinearHead& head, const std::vector<Sample>& data,
                                      int k, SelectionMode selection = SelectionMode::kSelector,
                                      Conditioning conditioning = Conditioning::kSelectorTokens,
                                      Rng* rng = nullptr) {
  if (data.empty()) throw ValueError("evaluate_patch_accuracy: empty dataset");
  if (selection == SelectionMode::kRandom && rng == nullptr)
    throw ValueError("evaluate_patch_accuracy: random selection needs an rng");
  NoGradGuard ng;
  const int n_high = extractor.config.grid_side();
  long correct = 0, total = 0;
  for (const Sample& s : data) {
    SelectorOutput sel = selector_forward(s.image, selector, n_high);
    std::vector<int> positions = selection == SelectionMode::kSelector
                                     ? top_k_select(sel.map, k)
                                     : random_selector_baseline(n_high, k, *rng);
    Tensor toks = tokenize_selected(s.image, positions, extractor);
    SparseLatents sparse =
        extractor_forward(toks, sel.cls, sel.registers, extractor, positions, conditioning);
    Tensor logits = head.forward(sparse.patch_tokens);
    for (std::size_t p = 0; p < positions.size(); ++p) {
      if (detail::argmax_row(logits, int(p)) == s.patch_labels[std::size_t(positions[p])])
        ++correct;
      ++total;
    }
  }
  return double(correct) / double(std::max(1L, total));
}

// Mean divergence between the teacher's aggregated map and the selector's
// softmaxed map over a dataset; used to track what the map loss optimizes.
inline double mean_map_divergence(const SelectorParams& selector, const ViTParams& teacher,
                                  const std::vector<Sample>& data, const AggregationSpec& agg) {
  if (data.empty()) throw ValueError("mean_map_divergence: empty dataset");
  NoGradGuard ng;
  const int n_high = teacher.config.grid_side();
  const int n2 = n_high * n_high;
  double sum = 0.0;
  for (const Sample& s : data) {
    TeacherTargets targets = teacher_targets(s.image, teacher, agg);
    SelectorOutput sel = selector_forward(s.image, selector, n_high);
    Tensor student = softmax(reshape(sel.map, {n2}), 0);
    sum += kl_divergence(reshape(targets.attention_map, {n2}), student).item();
  }
  return sum / double(data.size());
}

}  // namespace lookwhere
