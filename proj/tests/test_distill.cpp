#include "lookwhere/distill.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <vector>

using namespace lookwhere;

namespace {

Tensor random_image(int side, int channels, Rng& rng) {
  Tensor t = Tensor::zeros({side, side, channels});
  fill_normal(t, rng, 1.0);
  return t;
}

ViTParams tiny_vit(Rng& rng, int image = 32, int patch = 8, int layers = 2, int registers = 2) {
  ViTConfig cfg;
  cfg.image_size = image;
  cfg.patch_size = patch;
  cfg.embed_dim = 8;
  cfg.num_heads = 2;
  cfg.num_layers = layers;
  cfg.num_registers = registers;
  cfg.ffn_ratio = 2.0;
  return ViTParams::init(cfg, rng);
}

// trace with hand-filled logits; final tokens only carry the geometry
ForwardTrace fake_trace(const std::vector<Tensor>& logits, int registers) {
  ForwardTrace t;
  t.final_tokens = Tensor::zeros({logits[0].dim(1), 4});
  t.attention_logits = logits;
  t.num_registers = registers;
  return t;
}

TEST(LayerSets, ResolveWithFloorAndMinimumOne) {
  EXPECT_EQ(resolve_layer_set(LayerSet::kFirstHalf, 6), (std::vector<int>{0, 1, 2}));
  EXPECT_EQ(resolve_layer_set(LayerSet::kLastHalf, 6), (std::vector<int>{3, 4, 5}));
  EXPECT_EQ(resolve_layer_set(LayerSet::kLastThird, 6), (std::vector<int>{4, 5}));
  EXPECT_EQ(resolve_layer_set(LayerSet::kLastOnly, 6), (std::vector<int>{5}));
  EXPECT_EQ(resolve_layer_set(LayerSet::kAllLayers, 3), (std::vector<int>{0, 1, 2}));

  EXPECT_EQ(resolve_layer_set(LayerSet::kFirstHalf, 2), (std::vector<int>{0}));
  EXPECT_EQ(resolve_layer_set(LayerSet::kLastThird, 2), (std::vector<int>{1}));
  EXPECT_EQ(resolve_layer_set(LayerSet::kLastOnly, 1), (std::vector<int>{0}));
  EXPECT_THROW(resolve_layer_set(LayerSet::kAllLayers, 0), ValueError);
}

TEST(Aggregate, EqualLogitsGiveUniformMap) {
  const int g = 1, n2 = 4, t = 1 + g + n2;
  Tensor logits = Tensor::full({2, t, t}, 0.7);
  AggregationSpec spec;
  spec.use_cls = spec.use_reg = spec.use_pat = true;
  Tensor map = aggregate_attention(fake_trace({logits}, g), spec);
  EXPECT_EQ(map.shape(), (Shape{2, 2}));
  for (double v : map.data()) EXPECT_NEAR(v, 0.25, 1e-12);
}

TEST(Aggregate, SingleClsQuerySingleLayerHead) {
  const int g = 0, n2 = 4, t = 5;
  Rng rng(2);
  Tensor logits = Tensor::zeros({1, t, t});
  fill_normal(logits, rng, 1.0);
  AggregationSpec spec;
  spec.use_cls = true;
  spec.use_pat = false;
  Tensor map = aggregate_attention(fake_trace({logits}, g), spec);

  // softmax over the cls row's patch columns
  std::vector<double> row(n2);
  double mx = -1e300;
  for (int j = 0; j < n2; ++j) {
    row[j] = logits.at(0, 0, 1 + j);
    mx = std::max(mx, row[j]);
  }
  double z = 0;
  for (int j = 0; j < n2; ++j) z += std::exp(row[j] - mx);
  for (int j = 0; j < n2; ++j)
    EXPECT_NEAR(map.data()[j], std::exp(row[j] - mx) / z, 1e-12);
}

TEST(Aggregate, RegisterQueriesRequireRegisters) {
  Tensor logits = Tensor::zeros({1, 5, 5});
  AggregationSpec spec;
  spec.use_reg = true;
  EXPECT_THROW(aggregate_attention(fake_trace({logits}, 0), spec), ValueError);
  AggregationSpec none;
  none.use_cls = none.use_reg = none.use_pat = false;
  EXPECT_THROW(aggregate_attention(fake_trace({logits}, 0), none), ValueError);
}

// every query-set x layer-set combination against an independent oracle
TEST(Aggregate, AllSpecsMatchBruteForce) {
  const int g = 2, n = 2, n2 = n * n, t = 1 + g + n2, heads = 2, layers = 3;
  Rng rng(3);
  for (int trial = 0; trial < 10; ++trial) {
    std::vector<Tensor> logits;
    for (int l = 0; l < layers; ++l) {
      Tensor lg = Tensor::zeros({heads, t, t});
      fill_normal(lg, rng, 1.5);
      logits.push_back(lg);
    }
    ForwardTrace trace = fake_trace(logits, g);

    for (int mask = 1; mask < 8; ++mask) {
      for (LayerSet ls : {LayerSet::kFirstHalf, LayerSet::kLastHalf, LayerSet::kLastThird,
                          LayerSet::kLastOnly, LayerSet::kAllLayers}) {
        AggregationSpec spec;
        spec.use_cls = mask & 1;
        spec.use_reg = mask & 2;
        spec.use_pat = mask & 4;
        spec.layers = ls;
        Tensor map = aggregate_attention(trace, spec);

        // oracle: independent loops, then one softmax
        auto chosen = resolve_layer_set(ls, layers);
        std::vector<double> agg(n2, 0.0);
        int hl = 0;
        for (int l : chosen)
          for (int h = 0; h < heads; ++h) {
            ++hl;
            for (int col = 0; col < n2; ++col) {
              double types = 0.0;
              int ntypes = 0;
              auto add_type = [&](int r0, int r1) {
                double m = 0.0;
                for (int r = r0; r < r1; ++r) m += logits[l].at(h, r, 1 + g + col);
                types += m / (r1 - r0);
                ++ntypes;
              };
              if (spec.use_cls) add_type(0, 1);
              if (spec.use_reg) add_type(1, 1 + g);
              if (spec.use_pat) add_type(1 + g, t);
              agg[col] += types / ntypes;
            }
          }
        for (auto& v : agg) v /= hl;
        double mx = agg[0];
        for (double v : agg) mx = std::max(mx, v);
        double z = 0.0;
        for (double v : agg) z += std::exp(v - mx);

        double checksum = 0.0;
        for (int col = 0; col < n2; ++col) {
          double want = std::exp(agg[col] - mx) / z;
          EXPECT_NEAR(map.data()[col], want, 1e-9);
          checksum += map.data()[col];
          EXPECT_GE(map.data()[col], 0.0);
        }
        EXPECT_NEAR(checksum, 1.0, 1e-9);
      }
    }
  }
}

TEST(TeacherTargets, ShapesDetachedAndCounted) {
  Rng rng(4);
  ViTParams teacher = tiny_vit(rng);
  teacher.set_requires_grad(false);
  Tensor img = random_image(32, 1, rng);

  reset_teacher_eval_count();
  AggregationSpec spec;  // defaults: pat queries, last layer only
  EXPECT_TRUE(spec.use_pat);
  EXPECT_FALSE(spec.use_cls);
  EXPECT_EQ(spec.layers, LayerSet::kLastOnly);

  TeacherTargets targets = teacher_targets(img, teacher, spec);
  EXPECT_EQ(teacher_eval_count(), 1);
  EXPECT_EQ(targets.cls.shape(), (Shape{8}));
  EXPECT_EQ(targets.patch_tokens.shape(), (Shape{16, 8}));
  EXPECT_EQ(targets.attention_map.shape(), (Shape{4, 4}));
  EXPECT_FALSE(targets.cls.requires_grad());
  EXPECT_FALSE(targets.patch_tokens.requires_grad());
  double s = 0.0;
  for (double v : targets.attention_map.data()) {
    EXPECT_GE(v, 0.0);
    s += v;
  }
  EXPECT_NEAR(s, 1.0, 1e-9);
}

// plumbing identity: all positions visible, conditioning on the extractor's
// own globals, extractor = teacher -> reconstruction losses vanish
TEST(Losses, SelfConsistencyAtFullVisibility) {
  Rng rng(5);
  ViTParams teacher = tiny_vit(rng);
  teacher.set_requires_grad(false);
  ViTParams extractor = teacher.clone(true);
  Tensor img = random_image(32, 1, rng);

  AggregationSpec spec;
  TeacherTargets targets = teacher_targets(img, teacher, spec);

  std::vector<int> all(16);
  for (int i = 0; i < 16; ++i) all[i] = i;
  Tensor tokens = tokenize_selected(img, all, extractor);
  SparseLatents sparse =
      extractor_forward(tokens, Tensor(), Tensor(), extractor, all, Conditioning::kNone);
  InterpConfig icfg;
  icfg.neighbors = 5;
  DenseLatents dense = interpolate_sparse(sparse, 4, icfg);

  Tensor map_raw = Tensor::zeros({4, 4});
  fill_normal(map_raw, rng, 1.0);
  DistillLosses losses = compute_losses(dense, map_raw, targets, LossWeights{});

  EXPECT_EQ(losses.cls.item(), 0.0);
  EXPECT_EQ(losses.pat.item(), 0.0);
}

TEST(Losses, KlVanishesWhenStudentMatchesTeacher) {
  Rng rng(6);
  ViTParams teacher = tiny_vit(rng);
  teacher.set_requires_grad(false);
  Tensor img = random_image(32, 1, rng);
  TeacherTargets targets = teacher_targets(img, teacher, AggregationSpec{});

  // raw map = log teacher + constant reproduces the teacher after softmax
  std::vector<double> raw(16);
  for (int i = 0; i < 16; ++i) raw[i] = std::log(targets.attention_map.data()[i]) + 3.0;

  DenseLatents dense;
  dense.cls = targets.cls;
  dense.grid = targets.patch_tokens;
  DistillLosses losses = compute_losses(dense, Tensor::from_data({4, 4}, raw), targets, LossWeights{});
  EXPECT_NEAR(losses.map.item(), 0.0, 1e-12);
  EXPECT_NEAR(losses.total.item(), 0.0, 1e-12);
}

TEST(Losses, WeightsCombineLinearly) {
  Rng rng(7);
  ViTParams teacher = tiny_vit(rng);
  teacher.set_requires_grad(false);
  Tensor img = random_image(32, 1, rng);
  TeacherTargets targets = teacher_targets(img, teacher, AggregationSpec{});

  DenseLatents dense;
  dense.cls = Tensor::zeros({8});
  fill_normal(dense.cls, rng, 1.0);
  dense.grid = Tensor::zeros({16, 8});
  fill_normal(dense.grid, rng, 1.0);
  Tensor raw = Tensor::zeros({4, 4});
  fill_normal(raw, rng, 1.0);

  LossWeights w;
  w.cls = 0.5;
  w.pat = 2.0;
  w.map = 0.25;
  DistillLosses losses = compute_losses(dense, raw, targets, w);
  double want = 0.5 * losses.cls.item() + 2.0 * losses.pat.item() + 0.25 * losses.map.item();
  EXPECT_NEAR(losses.total.item(), want, 1e-12);

  LossWeights defaults;
  EXPECT_EQ(defaults.cls, 1.0);
  EXPECT_EQ(defaults.pat, 1.0);
  EXPECT_EQ(defaults.map, 0.1);

  LossWeights bad;
  bad.cls = -1;
  EXPECT_THROW(compute_losses(dense, raw, targets, bad), ValueError);
  LossWeights zero;
  zero.cls = zero.pat = zero.map = 0.0;
  EXPECT_THROW(compute_losses(dense, raw, targets, zero), ValueError);
}

TEST(Losses, ZeroMapWeightKillsMapGradient) {
  Rng rng(8);
  ViTParams teacher = tiny_vit(rng);
  teacher.set_requires_grad(false);
  Tensor img = random_image(32, 1, rng);
  TeacherTargets targets = teacher_targets(img, teacher, AggregationSpec{});

  DenseLatents dense;
  dense.cls = Tensor::zeros({8}, true);
  dense.grid = Tensor::zeros({16, 8}, true);
  Tensor raw = Tensor::zeros({4, 4}, true);
  fill_normal(raw, rng, 1.0);

  LossWeights w;
  w.map = 0.0;
  DistillLosses losses = compute_losses(dense, raw, targets, w);
  backward(losses.total);
  for (double g : raw.grad_or_zero()) EXPECT_EQ(g, 0.0);
}

TEST(Losses, MapLossShiftInvariantAndVariants) {
  Rng rng(9);
  ViTParams teacher = tiny_vit(rng);
  teacher.set_requires_grad(false);
  Tensor img = random_image(32, 1, rng);
  TeacherTargets targets = teacher_targets(img, teacher, AggregationSpec{});

  DenseLatents dense;
  dense.cls = targets.cls;
  dense.grid = targets.patch_tokens;
  Tensor raw = Tensor::zeros({4, 4});
  fill_normal(raw, rng, 1.0);

  DistillLosses a = compute_losses(dense, raw, targets, LossWeights{});
  std::vector<double> shifted = raw.data();
  for (auto& v : shifted) v += 17.0;
  DistillLosses b = compute_losses(dense, Tensor::from_data({4, 4}, shifted), targets, LossWeights{});
  EXPECT_NEAR(a.map.item(), b.map.item(), 1e-9);

  // reverse KL and MSE variants agree with direct evaluation
  DistillOptions rev;
  rev.reverse_kl = true;
  DistillLosses r = compute_losses(dense, raw, targets, LossWeights{}, rev);
  Tensor student = softmax(reshape(raw, {16}), 0);
  Tensor tmap = reshape(targets.attention_map, {16});
  EXPECT_NEAR(r.map.item(), kl_divergence(student, tmap).item(), 1e-12);

  DistillOptions msev;
  msev.map_loss = MapLoss::kMse;
  DistillLosses m = compute_losses(dense, raw, targets, LossWeights{}, msev);
  EXPECT_NEAR(m.map.item(), mse(student, tmap).item(), 1e-12);
}

TEST(Losses, TeacherStaysGradFree) {
  Rng rng(10);
  ViTParams teacher = tiny_vit(rng);
  teacher.set_requires_grad(false);
  Tensor img = random_image(32, 1, rng);
  TeacherTargets targets = teacher_targets(img, teacher, AggregationSpec{});

  ViTParams extractor = teacher.clone(true);
  std::vector<int> picks = {0, 5, 9};
  Tensor tokens = tokenize_selected(img, picks, extractor);
  SparseLatents sparse =
      extractor_forward(tokens, Tensor(), Tensor(), extractor, picks, Conditioning::kNone);
  InterpConfig icfg;
  icfg.neighbors = 3;
  DenseLatents dense = interpolate_sparse(sparse, 4, icfg);
  Tensor raw = Tensor::zeros({4, 4}, true);

  DistillLosses losses = compute_losses(dense, raw, targets, LossWeights{});
  backward(losses.total);

  for (const auto& [name, t] : teacher.named())
    for (double g : t.grad_or_zero()) EXPECT_EQ(g, 0.0);
  bool extractor_touched = false;
  for (double g : extractor.patch_weight.grad_or_zero()) extractor_touched |= g != 0.0;
  EXPECT_TRUE(extractor_touched);
}

TEST(Losses, GradientsMatchFiniteDifferences) {
  Rng rng(11);
  ViTParams teacher = tiny_vit(rng);
  teacher.set_requires_grad(false);
  Tensor img = random_image(32, 1, rng);
  TeacherTargets targets = teacher_targets(img, teacher, AggregationSpec{});

  Tensor raw = Tensor::zeros({4, 4}, true);
  fill_normal(raw, rng, 1.0);
  Tensor cls = Tensor::zeros({8}, true);
  fill_normal(cls, rng, 1.0);
  Tensor grid = Tensor::zeros({16, 8}, true);
  fill_normal(grid, rng, 1.0);

  auto forward = [&]() {
    DenseLatents dense;
    dense.cls = cls;
    dense.grid = grid;
    return compute_losses(dense, raw, targets, LossWeights{}).total;
  };
  Tensor loss = forward();
  backward(loss);
  auto f = [&]() { return forward().item(); };
  for (Tensor* t : {&raw, &cls, &grid}) {
    auto fd = finite_diff_grad(f, *t, 1e-5);
    const auto& an = t->grad_or_zero();
    double worst = 0.0;
    for (size_t i = 0; i < fd.size(); ++i) {
      double denom = std::max({std::abs(an[i]), std::abs(fd[i]), 1e-6});
      worst = std::max(worst, std::abs(an[i] - fd[i]) / denom);
    }
    EXPECT_LT(worst, 1e-4);
  }
}

}  // namespace
