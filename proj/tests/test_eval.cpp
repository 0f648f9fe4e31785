#include <gtest/gtest.h>

#include <cmath>

#include "lookwhere/eval.hpp"

using namespace lookwhere;

namespace {

EmbeddingBank make_bank(const std::vector<std::vector<double>>& rows,
                        const std::vector<int>& labels) {
  const int m = int(rows.size()), d = int(rows[0].size());
  std::vector<double> flat;
  for (const auto& r : rows) flat.insert(flat.end(), r.begin(), r.end());
  EmbeddingBank bank;
  bank.keys = Tensor::from_data({m, d}, flat);
  bank.labels = labels;
  return bank;
}

}  // namespace

TEST(KnnClassify, SingleClassBankIsPerfect) {
  EmbeddingBank bank = make_bank({{0.0}, {1.0}, {2.0}, {5.0}}, {3, 3, 3, 3});
  double acc = knn_classify(bank, bank.keys, bank.labels, 3, true);
  EXPECT_DOUBLE_EQ(acc, 1.0);
}

TEST(KnnClassify, LeaveOneOutExcludesTheQueryItself) {
  EmbeddingBank bank = make_bank({{0.0, 0.0}, {1.0, 0.0}, {1.1, 0.0}}, {0, 1, 1});
  // Without exclusion every point is its own nearest neighbor.
  EXPECT_DOUBLE_EQ(knn_classify(bank, bank.keys, bank.labels, 1, false), 1.0);
  // With exclusion the isolated class-0 point gets voted down: 2/3.
  EXPECT_DOUBLE_EQ(knn_classify(bank, bank.keys, bank.labels, 1, true), 2.0 / 3.0);
}

TEST(KnnClassify, HandEnumeratedSixPointSet) {
  // 1-D points 0,1,2,10,11,12 with labels 0,0,1,1,1,0 under leave-one-out 3-NN:
  // q=0 sees {1:0, 2:1, 10:1} -> 1 (wrong);  q=1 sees {0,2,10} -> 1 (wrong);
  // q=2 sees {1,0,10} -> 0 (wrong);          q=10 sees {11,12,2} -> 1 (right);
  // q=11 sees {10,12,2} -> 1 (right);        q=12 sees {11,10,2} -> 1 (wrong).
  EmbeddingBank bank =
      make_bank({{0.0}, {1.0}, {2.0}, {10.0}, {11.0}, {12.0}}, {0, 0, 1, 1, 1, 0});
  double acc = knn_classify(bank, bank.keys, bank.labels, 3, true);
  EXPECT_DOUBLE_EQ(acc, 2.0 / 6.0);
}

TEST(KnnClassify, TiesBreakTowardSmallerClassAndIndex) {
  // Vote tie between classes 1 and 2 -> class 1 wins.
  EmbeddingBank bank = make_bank({{-1.0}, {1.0}}, {2, 1});
  Tensor query = Tensor::from_data({1, 1}, {0.0});
  EXPECT_DOUBLE_EQ(knn_classify(bank, query, {1}, 2, false), 1.0);
  EXPECT_DOUBLE_EQ(knn_classify(bank, query, {2}, 2, false), 0.0);

  // Distance tie with one neighbor -> the smaller bank index supplies the vote.
  EmbeddingBank tie = make_bank({{1.0}, {-1.0}}, {3, 1});
  EXPECT_DOUBLE_EQ(knn_classify(tie, query, {3}, 1, false), 1.0);
}

TEST(KnnClassify, InvariantUnderOrthogonalTransform) {
  Rng rng(17);
  const int m = 24, q = 10, d = 6;
  Tensor keys = Tensor::zeros({m, d});
  Tensor queries = Tensor::zeros({q, d});
  fill_normal(keys, rng, 1.0);
  fill_normal(queries, rng, 1.0);
  std::vector<int> key_labels, query_labels;
  for (int i = 0; i < m; ++i) key_labels.push_back(int(rng.uniform_int(0, 2)));
  for (int i = 0; i < q; ++i) query_labels.push_back(int(rng.uniform_int(0, 2)));

  auto rotate = [&](const Tensor& x) {
    // Givens rotations on dimension pairs (0,1), (2,3), (4,5).
    Tensor out = x.detach().clone(false);
    const double angles[3] = {0.7, 1.3, 2.1};
    for (int r = 0; r < x.dim(0); ++r)
      for (int p = 0; p < 3; ++p) {
        double c = std::cos(angles[p]), s = std::sin(angles[p]);
        double a = out.at(r, 2 * p), b = out.at(r, 2 * p + 1);
        out.data_mut()[std::size_t(r) * d + 2 * p] = c * a - s * b;
        out.data_mut()[std::size_t(r) * d + 2 * p + 1] = s * a + c * b;
      }
    return out;
  };

  EmbeddingBank bank;
  bank.keys = keys;
  bank.labels = key_labels;
  EmbeddingBank rotated;
  rotated.keys = rotate(keys);
  rotated.labels = key_labels;
  for (Metric metric : {Metric::kEuclidean, Metric::kCosine}) {
    double base = knn_classify(bank, queries, query_labels, 3, false, metric);
    double rot = knn_classify(rotated, rotate(queries), query_labels, 3, false, metric);
    EXPECT_DOUBLE_EQ(base, rot);
  }
}

TEST(KnnClassify, ErrorCases) {
  EmbeddingBank empty;
  Tensor q = Tensor::from_data({1, 1}, {0.0});
  EXPECT_THROW(knn_classify(empty, q, {0}, 1), ValueError);

  EmbeddingBank bank = make_bank({{0.0}, {1.0}, {2.0}}, {0, 1, 0});
  EXPECT_THROW(knn_classify(bank, bank.keys, bank.labels, 3, true), ValueError);   // M-1 = 2
  EXPECT_THROW(knn_classify(bank, bank.keys, bank.labels, 4, false), ValueError);  // M = 3
  EXPECT_THROW(knn_classify(bank, bank.keys, bank.labels, 0, false), ValueError);
  EXPECT_THROW(knn_classify(bank, q, {0}, 1, true), ValueError);  // LOO needs the bank itself
  Tensor wide = Tensor::from_data({1, 2}, {0.0, 0.0});
  EXPECT_THROW(knn_classify(bank, wide, {0}, 1), ShapeError);
  EXPECT_THROW(knn_classify(bank, q, {0, 1}, 1), ValueError);
}

TEST(KnnSegment, SingleClassAndNearestNeighbor) {
  EmbeddingBank bank = make_bank({{0.0}, {3.0}}, {2, 2});
  Tensor queries = Tensor::from_data({2, 1}, {0.1, 2.9});
  EXPECT_DOUBLE_EQ(knn_segment(bank, queries, {2, 2}, 2), 1.0);

  EmbeddingBank two = make_bank({{0.0}, {3.0}}, {0, 1});
  EXPECT_DOUBLE_EQ(knn_segment(two, queries, {0, 1}, 1), 1.0);
  EXPECT_DOUBLE_EQ(knn_segment(two, queries, {1, 0}, 1), 0.0);
}

TEST(KnnSegment, RandomInstanceMatchesBruteForce) {
  Rng rng(23);
  const int m = 30, q = 12, d = 4, classes = 3, neighbors = 7;
  std::vector<std::vector<double>> keys(m, std::vector<double>(d));
  std::vector<int> labels(m);
  for (int i = 0; i < m; ++i) {
    for (int j = 0; j < d; ++j) keys[std::size_t(i)][std::size_t(j)] = rng.normal();
    labels[std::size_t(i)] = int(rng.uniform_int(0, classes - 1));
  }
  EmbeddingBank bank = make_bank(keys, labels);
  Tensor queries = Tensor::zeros({q, d});
  fill_normal(queries, rng, 1.0);
  std::vector<int> query_labels(q);
  for (int i = 0; i < q; ++i) query_labels[std::size_t(i)] = int(rng.uniform_int(0, classes - 1));

  long correct = 0;
  for (int i = 0; i < q; ++i) {
    std::vector<std::pair<double, int>> dist;
    for (int b = 0; b < m; ++b) {
      double sum = 0.0;
      for (int j = 0; j < d; ++j) {
        double diff = queries.at(i, j) - keys[std::size_t(b)][std::size_t(j)];
        sum += diff * diff;
      }
      dist.emplace_back(sum, b);
    }
    std::sort(dist.begin(), dist.end());
    std::vector<int> votes(classes, 0);
    for (int t = 0; t < neighbors; ++t) votes[std::size_t(labels[std::size_t(dist[std::size_t(t)].second)])]++;
    int best = 0;
    for (int c = 1; c < classes; ++c)
      if (votes[std::size_t(c)] > votes[std::size_t(best)]) best = c;
    if (best == query_labels[std::size_t(i)]) ++correct;
  }
  double expect = double(correct) / q;
  EXPECT_DOUBLE_EQ(knn_segment(bank, queries, query_labels, neighbors), expect);
}

namespace {

ViTConfig paper_config(int embed_dim) {
  ViTConfig cfg;
  cfg.image_size = 224;
  cfg.patch_size = 14;
  cfg.channels = 3;
  cfg.embed_dim = embed_dim;
  cfg.num_layers = 12;
  cfg.num_heads = embed_dim / 64;
  cfg.num_registers = 0;
  cfg.ffn_ratio = 4.0;
  return cfg;
}

}  // namespace

TEST(CountFlops, FullVitMatchesPublishedScale) {
  // 256 patches + cls through 12 layers.
  ViTConfig vitb = paper_config(768);
  CostReport base = count_flops(vitb, std::vector<int>(12, 257));
  EXPECT_NEAR(base.flops_total, 23.6e9, 0.15 * 23.6e9);

  ViTConfig vits = paper_config(384);
  CostReport small = count_flops(vits, std::vector<int>(12, 257));
  EXPECT_NEAR(small.flops_total, 6.2e9, 0.15 * 6.2e9);
}

TEST(CountFlops, AlgebraicIdentities) {
  ViTConfig cfg = paper_config(384);
  const double d = cfg.embed_dim;

  // Linear in depth.
  CostReport one = count_flops(cfg, {100}, 0);
  CostReport five = count_flops(cfg, std::vector<int>(5, 100), 0);
  EXPECT_DOUBLE_EQ(five.flops_attention, 5.0 * one.flops_attention);
  EXPECT_DOUBLE_EQ(five.flops_ffn, 5.0 * one.flops_ffn);

  // The T^2 attention term scales by exactly 4 when T doubles.
  CostReport twice = count_flops(cfg, {200}, 0);
  const double proj_one = 4.0 * 100 * d * d, proj_two = 4.0 * 200 * d * d;
  EXPECT_DOUBLE_EQ(twice.flops_attention - proj_two, 4.0 * (one.flops_attention - proj_one));

  // Component sum.
  CostReport full = count_flops(cfg, std::vector<int>(12, 257), 256, 10);
  EXPECT_DOUBLE_EQ(full.flops_total,
                   full.flops_attention + full.flops_ffn + full.flops_embed + full.flops_head);
  EXPECT_GT(full.flops_head, 0.0);

  EXPECT_THROW(count_flops(cfg, {0}), ValueError);
}

TEST(CountFlops, LookWhereSplitAndGlobalsOnly) {
  ViTConfig full;
  full.image_size = 64;
  full.patch_size = 8;
  full.embed_dim = 64;
  full.num_layers = 4;
  full.num_heads = 4;
  full.num_registers = 4;
  ViTConfig low = full;
  low.image_size = 32;
  low.num_layers = 2;

  CostReport with_k = lookwhere_cost(low, 2, 64, full, 6);
  // Extractor rows all carry 1+G+k tokens.
  ASSERT_EQ(with_k.tokens_per_layer.size(), 6u);  // 2 selector + 4 extractor layers
  for (int i = 2; i < 6; ++i) EXPECT_EQ(with_k.tokens_per_layer[std::size_t(i)], 1 + 4 + 6);
  EXPECT_DOUBLE_EQ(with_k.flops_total, with_k.flops_attention + with_k.flops_ffn +
                                           with_k.flops_embed + with_k.flops_head);

  // Zero selector stage + k=0 collapses to the low-res patch embedding plus a
  // globals-only extractor forward.
  CostReport zero = lookwhere_cost(low, 0, 0, full, 0);
  CostReport globals = count_flops(full, std::vector<int>(4, 5), 0);
  CostReport low_embed = count_flops(low, {}, 16);
  EXPECT_DOUBLE_EQ(zero.flops_total, globals.flops_total + low_embed.flops_total);
  EXPECT_DOUBLE_EQ(low_embed.flops_total, low_embed.flops_embed);

  // More selected patches never cost less.
  EXPECT_GT(with_k.flops_total, lookwhere_cost(low, 2, 64, full, 3).flops_total);
  EXPECT_THROW(lookwhere_cost(low, 2, 64, full, 65), ValueError);
  EXPECT_THROW(lookwhere_cost(low, 3, 64, full, 6), ValueError);
}

TEST(LinearProbe, SeparableToyReachesPerfect) {
  Rng rng(31);
  const int per_class = 10;
  std::vector<double> flat;
  std::vector<int> labels;
  for (int c = 0; c < 2; ++c)
    for (int i = 0; i < per_class; ++i) {
      double cx = c == 0 ? -2.0 : 2.0;
      flat.push_back(cx + 0.1 * rng.normal());
      flat.push_back(cx + 0.1 * rng.normal());
      labels.push_back(c);
    }
  Tensor features = Tensor::from_data({2 * per_class, 2}, flat);
  EXPECT_DOUBLE_EQ(linear_probe(features, labels), 1.0);
}

TEST(LinearProbe, ShuffledLabelsSitAtChance) {
  Rng rng(32);
  const int m = 1500, d = 4, classes = 3;
  Tensor features = Tensor::zeros({m, d});
  fill_normal(features, rng, 1.0);
  std::vector<int> labels(m);
  for (int i = 0; i < m; ++i) labels[std::size_t(i)] = int(rng.uniform_int(0, classes - 1));
  double acc = linear_probe(features, labels);
  EXPECT_NEAR(acc, 1.0 / classes, 0.05);
}

TEST(LinearProbe, SingleClassIsVacuouslyPerfect) {
  Tensor features = Tensor::from_data({3, 2}, {0.0, 1.0, 2.0, 3.0, 4.0, 5.0});
  EXPECT_DOUBLE_EQ(linear_probe(features, {2, 2, 2}), 1.0);
}

TEST(LinearProbe, EvalSplitAndErrors) {
  Rng rng(33);
  std::vector<double> flat;
  std::vector<int> labels;
  for (int c = 0; c < 2; ++c)
    for (int i = 0; i < 8; ++i) {
      flat.push_back(c == 0 ? -1.0 + 0.05 * rng.normal() : 1.0 + 0.05 * rng.normal());
      labels.push_back(c);
    }
  Tensor train = Tensor::from_data({16, 1}, flat);
  Tensor eval = Tensor::from_data({4, 1}, {-1.1, -0.9, 0.95, 1.2});
  std::vector<int> eval_labels = {0, 0, 1, 1};
  EXPECT_DOUBLE_EQ(linear_probe(train, labels, {}, &eval, &eval_labels), 1.0);

  EXPECT_THROW(linear_probe(train, labels, {}, &eval, nullptr), ValueError);
  EXPECT_THROW(linear_probe(train, {0}, {}), ValueError);
  std::vector<int> neg = labels;
  neg[0] = -1;
  EXPECT_THROW(linear_probe(train, neg, {}), ValueError);
}

TEST(LinearProbe, RankingAgreesWithLeastSquares) {
  // Two feature sets over the same labels: clean clusters vs heavy overlap.
  Rng rng(34);
  const int m = 60, d = 3, classes = 2;
  std::vector<int> labels(m);
  for (int i = 0; i < m; ++i) labels[std::size_t(i)] = i % classes;
  auto build = [&](double sep) {
    Tensor f = Tensor::zeros({m, d});
    for (int i = 0; i < m; ++i)
      for (int j = 0; j < d; ++j)
        f.data_mut()[std::size_t(i) * d + j] =
            sep * (labels[std::size_t(i)] == 0 ? -1.0 : 1.0) + rng.normal();
    return f;
  };
  Tensor good = build(2.0), bad = build(0.05);

  // Closed-form ridge least squares onto +-1 targets (bias via augmentation).
  auto ls_accuracy = [&](const Tensor& f) {
    const int da = d + 1;
    std::vector<double> ata(std::size_t(da) * da, 0.0), atb(da, 0.0);
    auto feat = [&](int i, int j) { return j < d ? f.at(i, j) : 1.0; };
    for (int i = 0; i < m; ++i) {
      double y = labels[std::size_t(i)] == 0 ? -1.0 : 1.0;
      for (int a = 0; a < da; ++a) {
        atb[std::size_t(a)] += feat(i, a) * y;
        for (int b = 0; b < da; ++b) ata[std::size_t(a) * da + b] += feat(i, a) * feat(i, b);
      }
    }
    for (int a = 0; a < da; ++a) ata[std::size_t(a) * da + a] += 1e-6;
    // Gaussian elimination.
    for (int col = 0; col < da; ++col) {
      int pivot = col;
      for (int r = col + 1; r < da; ++r)
        if (std::abs(ata[std::size_t(r) * da + col]) >
            std::abs(ata[std::size_t(pivot) * da + col]))
          pivot = r;
      for (int c = 0; c < da; ++c)
        std::swap(ata[std::size_t(col) * da + c], ata[std::size_t(pivot) * da + c]);
      std::swap(atb[std::size_t(col)], atb[std::size_t(pivot)]);
      for (int r = 0; r < da; ++r) {
        if (r == col) continue;
        double factor = ata[std::size_t(r) * da + col] / ata[std::size_t(col) * da + col];
        for (int c = 0; c < da; ++c)
          ata[std::size_t(r) * da + c] -= factor * ata[std::size_t(col) * da + c];
        atb[std::size_t(r)] -= factor * atb[std::size_t(col)];
      }
    }
    long correct = 0;
    for (int i = 0; i < m; ++i) {
      double score = 0.0;
      for (int a = 0; a < da; ++a)
        score += feat(i, a) * atb[std::size_t(a)] / ata[std::size_t(a) * da + a];
      if ((score > 0.0 ? 1 : 0) == labels[std::size_t(i)]) ++correct;
    }
    return double(correct) / m;
  };

  double probe_good = linear_probe(good, labels), probe_bad = linear_probe(bad, labels);
  double ls_good = ls_accuracy(good), ls_bad = ls_accuracy(bad);
  EXPECT_GT(probe_good, probe_bad);
  EXPECT_GT(ls_good, ls_bad);
  EXPECT_NEAR(probe_good, ls_good, 0.1);
  EXPECT_NEAR(probe_bad, ls_bad, 0.15);
}

TEST(EmbeddingBanks, BuildersProduceConsistentShapes) {
  ViTConfig cfg;
  cfg.image_size = 16;
  cfg.patch_size = 4;
  cfg.embed_dim = 16;
  cfg.num_layers = 2;
  cfg.num_heads = 2;
  cfg.num_registers = 2;
  cfg.ffn_ratio = 2.0;
  Rng rng(41);
  ViTParams teacher = ViTParams::init(cfg, rng);
  StudentInit st = init_from_teacher(teacher, 8, 1, 8, rng);
  SyntheticSpec dspec;
  dspec.image_side = 16;
  dspec.num_classes = 2;
  dspec.glyph_side = 6;
  dspec.noise_std = 0.1;
  dspec.seed = 5;
  dspec.patch_size = 4;
  auto data = gen_synthetic(dspec, 5);

  EmbeddingBank cls = build_class_bank(st.selector, st.extractor, data, 4);
  EXPECT_EQ(cls.keys.shape(), (Shape{5, 16}));
  EXPECT_EQ(cls.labels.size(), 5u);
  EXPECT_EQ(cls.kind, EmbeddingBank::Kind::kClassToken);
  EmbeddingBank again = build_class_bank(st.selector, st.extractor, data, 4);
  EXPECT_EQ(cls.keys.data(), again.keys.data());

  EmbeddingBank pat = build_patch_bank(st.selector, st.extractor, data, 4);
  EXPECT_EQ(pat.keys.shape(), (Shape{20, 16}));
  EXPECT_EQ(pat.labels.size(), 20u);
  EXPECT_EQ(pat.kind, EmbeddingBank::Kind::kPatchToken);

  EmbeddingBank tb = build_teacher_class_bank(teacher, data);
  EXPECT_EQ(tb.keys.shape(), (Shape{5, 16}));

  EXPECT_THROW(build_class_bank(st.selector, st.extractor, data, 4, SelectionMode::kRandom),
               ValueError);
}

TEST(MetricReports, TableAndCsvFormats) {
  MetricReport report;
  report.add("knn_acc", 0.75);
  report.add("probe_acc", 0.5);
  std::string csv = metrics_csv(report);
  EXPECT_EQ(csv.substr(0, 13), "metric,value\n");
  EXPECT_NE(csv.find("knn_acc,0.75\n"), std::string::npos);
  EXPECT_NE(csv.find("probe_acc,0.5\n"), std::string::npos);
  std::string table = metrics_table(report);
  EXPECT_NE(table.find("knn_acc"), std::string::npos);
  EXPECT_NE(table.find("0.75"), std::string::npos);
}
