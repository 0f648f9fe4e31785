// Command-line front end: train-teacher, pretrain, finetune, eval, selectmap.
// One command per process; every run prints the fully resolved config so
// logs are self-describing.

#include <algorithm>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "lookwhere/lookwhere.hpp"

namespace lw = lookwhere;

namespace {

struct CommonArgs {
  std::string config_path;
  std::string out_path;
  std::vector<std::string> sets;
  std::int64_t seed = -1;
  int k = -1;
};

void add_common(CLI::App* cmd, CommonArgs& args) {
  cmd->add_option("--config", args.config_path, "Run configuration file");
  cmd->add_option("--out", args.out_path, "Output path override");
  cmd->add_option("--set", args.sets, "Override one key: section.key=value")
      ->take_all();
  cmd->add_option("--seed", args.seed, "Override train.seed and data.seed");
  cmd->add_option("--k", args.k, "Override the selection budget k");
}

lw::RunConfig resolve_config(const CommonArgs& args) {
  lw::RunConfig cfg;
  if (!args.config_path.empty()) cfg = lw::load_run_config(args.config_path);
  for (const auto& s : args.sets) lw::config_set(cfg, s);
  if (args.seed >= 0) {
    cfg.train_seed = std::uint64_t(args.seed);
    cfg.data_seed = std::uint64_t(args.seed);
  }
  if (args.k >= 1) {
    cfg.train_k = args.k;
    cfg.eval_k = args.k;
  }
  lw::validate_run_config(cfg);
  std::cout << "=== resolved config ===\n"
            << lw::resolved_text(cfg) << "=======================\n";
  return cfg;
}

// Rebuilds model objects with the configured geometry; values are then
// overwritten from a checkpoint.
struct ModelSet {
  lw::ViTParams teacher;
  lw::SelectorParams selector;
  lw::ViTParams extractor;

  static ModelSet build(const lw::RunConfig& cfg) {
    lw::Rng scaffold_rng(0);
    lw::ViTParams teacher = lw::ViTParams::init(lw::model_config(cfg), scaffold_rng);
    lw::StudentInit st = lw::init_from_teacher(teacher, cfg.selector_image_size,
                                               cfg.selector_num_layers,
                                               cfg.selector_map_hidden, scaffold_rng);
    return ModelSet{std::move(teacher), std::move(st.selector), std::move(st.extractor)};
  }
};

int head_classes(const lw::RunConfig& cfg) {
  // Patch heads predict background (0) plus one id per class.
  return lw::head_kind(cfg) == lw::HeadKind::kPatchToken ? cfg.data_num_classes + 1
                                                         : cfg.data_num_classes;
}

lw::Checkpoint new_checkpoint(const lw::RunConfig& cfg) {
  lw::Checkpoint ckpt;
  ckpt.config_text = lw::resolved_text(cfg);
  ckpt.rng_state = lw::Rng(cfg.train_seed).serialize_state();
  return ckpt;
}

std::string resolve_eval_checkpoint(const lw::RunConfig& cfg) {
  return cfg.eval_checkpoint.empty() ? cfg.train_finetune_checkpoint : cfg.eval_checkpoint;
}

int resolve_eval_k(const lw::RunConfig& cfg) {
  return cfg.eval_k == 0 ? cfg.train_k : cfg.eval_k;
}

int cmd_train_teacher(const CommonArgs& args) {
  lw::RunConfig cfg = resolve_config(args);
  auto data = lw::gen_synthetic(lw::data_spec(cfg), cfg.data_train_count);

  lw::Rng rng(cfg.train_seed);
  lw::ViTParams teacher = lw::ViTParams::init(lw::model_config(cfg), rng);
  lw::LinearHead head = lw::LinearHead::init(cfg.model_embed_dim, cfg.data_num_classes, rng);

  lw::TeacherHistory history =
      lw::train_teacher(teacher, head, data, lw::teacher_train_config(cfg), &std::cout);
  double train_acc = lw::evaluate_teacher_accuracy(teacher, head, data);
  std::cout << "teacher final train accuracy " << train_acc << "\n";

  lw::Checkpoint ckpt = new_checkpoint(cfg);
  lw::NamedParams named = teacher.named("teacher.");
  head.collect_named("head.", named);
  lw::checkpoint_put_params(ckpt, named);
  const std::string out = args.out_path.empty() ? cfg.train_teacher_checkpoint : args.out_path;
  lw::save_checkpoint(out, ckpt);
  std::cout << "wrote " << out << "\n";
  return 0;
}

int cmd_pretrain(const CommonArgs& args) {
  lw::RunConfig cfg = resolve_config(args);
  lw::Checkpoint teacher_ckpt = lw::load_checkpoint(cfg.train_teacher_checkpoint);
  ModelSet models = ModelSet::build(cfg);
  lw::NamedParams teacher_named = models.teacher.named("teacher.");
  lw::checkpoint_read_params(teacher_ckpt, teacher_named);

  // Student initialization depends on the trained teacher weights.
  lw::Rng rng(cfg.train_seed);
  lw::StudentInit st =
      lw::init_from_teacher(models.teacher, cfg.selector_image_size, cfg.selector_num_layers,
                            cfg.selector_map_hidden, rng);

  auto data = lw::gen_synthetic(lw::data_spec(cfg), cfg.data_train_count);
  lw::PretrainHistory history = lw::pretrain(st.selector, st.extractor, models.teacher, data,
                                             lw::pretrain_config(cfg), &std::cout);
  for (std::size_t e = 0; e < history.epochs.size(); ++e)
    std::cout << "pretrain epoch " << e + 1 << " loss_total " << history.epochs[e].total
              << " loss_cls " << history.epochs[e].cls << " loss_pat " << history.epochs[e].pat
              << " loss_map " << history.epochs[e].map << "\n";

  lw::Checkpoint ckpt = new_checkpoint(cfg);
  lw::NamedParams named = st.selector.named("selector.");
  st.extractor.collect_named("extractor.", named);
  lw::checkpoint_put_params(ckpt, named);
  const std::string out = args.out_path.empty() ? cfg.train_pretrain_checkpoint : args.out_path;
  lw::save_checkpoint(out, ckpt);
  std::cout << "wrote " << out << "\n";
  return 0;
}

int cmd_finetune(const CommonArgs& args) {
  lw::RunConfig cfg = resolve_config(args);
  lw::Checkpoint pre = lw::load_checkpoint(cfg.train_pretrain_checkpoint);
  ModelSet models = ModelSet::build(cfg);
  lw::NamedParams student_named = models.selector.named("selector.");
  models.extractor.collect_named("extractor.", student_named);
  lw::checkpoint_read_params(pre, student_named);

  lw::Rng rng(cfg.train_seed);
  lw::LinearHead head = lw::LinearHead::init(cfg.model_embed_dim, head_classes(cfg), rng);

  auto data = lw::gen_synthetic(lw::data_spec(cfg), cfg.data_train_count);
  lw::FinetuneHistory history = lw::finetune(models.selector, models.extractor, head, data,
                                             lw::finetune_config(cfg), &std::cout);
  if (!history.epochs.empty())
    std::cout << "finetune final train accuracy " << history.epochs.back().accuracy << "\n";

  lw::Checkpoint ckpt = new_checkpoint(cfg);
  lw::NamedParams named = models.selector.named("selector.");
  models.extractor.collect_named("extractor.", named);
  head.collect_named("head.", named);
  lw::checkpoint_put_params(ckpt, named);
  const std::string out = args.out_path.empty() ? cfg.train_finetune_checkpoint : args.out_path;
  lw::save_checkpoint(out, ckpt);
  std::cout << "wrote " << out << "\n";
  return 0;
}

int cmd_eval(const CommonArgs& args) {
  lw::RunConfig cfg = resolve_config(args);
  const std::string ckpt_path = resolve_eval_checkpoint(cfg);
  lw::Checkpoint ckpt = lw::load_checkpoint(ckpt_path);
  ModelSet models = ModelSet::build(cfg);
  lw::NamedParams student_named = models.selector.named("selector.");
  models.extractor.collect_named("extractor.", student_named);
  lw::checkpoint_read_params(ckpt, student_named);

  lw::SyntheticSpec spec = lw::data_spec(cfg);
  auto train_data = lw::gen_synthetic(spec, cfg.data_train_count);
  lw::SyntheticSpec test_spec = spec;
  test_spec.seed = spec.seed + 1;
  auto test_data = lw::gen_synthetic(test_spec, cfg.data_test_count);

  const int k = resolve_eval_k(cfg);
  const lw::Metric metric = lw::metric_kind(cfg);
  lw::MetricReport report;
  report.add("k", k);

  lw::EmbeddingBank train_cls =
      lw::build_class_bank(models.selector, models.extractor, train_data, k);
  lw::EmbeddingBank test_cls =
      lw::build_class_bank(models.selector, models.extractor, test_data, k);
  // Desk-scale banks can hold fewer keys than the configured neighbor count.
  const int class_neighbors = std::min(cfg.eval_knn_neighbors, int(train_cls.size()));
  report.add("knn_class_acc", lw::knn_classify(train_cls, test_cls.keys, test_cls.labels,
                                               class_neighbors, false, metric));

  lw::EmbeddingBank train_pat =
      lw::build_patch_bank(models.selector, models.extractor, train_data, k);
  lw::EmbeddingBank test_pat =
      lw::build_patch_bank(models.selector, models.extractor, test_data, k);
  const int patch_neighbors = std::min(cfg.eval_patch_neighbors, int(train_pat.size()));
  report.add("knn_patch_acc", lw::knn_segment(train_pat, test_pat.keys, test_pat.labels,
                                              patch_neighbors, metric));

  lw::LinearProbeConfig probe;
  probe.epochs = cfg.eval_probe_epochs;
  probe.lr = cfg.eval_probe_lr;
  report.add("probe_class_acc", lw::linear_probe(train_cls.keys, train_cls.labels, probe,
                                                 &test_cls.keys, &test_cls.labels));

  // Head accuracy only when the checkpoint carries a trained head.
  if (ckpt.tensors.count("head.weight")) {
    lw::Rng rng(cfg.train_seed);
    lw::LinearHead head = lw::LinearHead::init(cfg.model_embed_dim, head_classes(cfg), rng);
    lw::NamedParams head_named;
    head.collect_named("head.", head_named);
    lw::checkpoint_read_params(ckpt, head_named);
    double acc = lw::head_kind(cfg) == lw::HeadKind::kPatchToken
                     ? lw::evaluate_patch_accuracy(models.selector, models.extractor, head,
                                                   test_data, k)
                     : lw::evaluate_accuracy(models.selector, models.extractor, head,
                                             test_data, k);
    report.add("head_acc", acc);
  }

  // Selector-map divergence against the teacher when its checkpoint exists.
  if (std::filesystem::exists(cfg.train_teacher_checkpoint)) {
    lw::Checkpoint tc = lw::load_checkpoint(cfg.train_teacher_checkpoint);
    lw::NamedParams teacher_named = models.teacher.named("teacher.");
    lw::checkpoint_read_params(tc, teacher_named);
    report.add("map_kl", lw::mean_map_divergence(models.selector, models.teacher, test_data,
                                                 lw::aggregation_spec(cfg)));
  }

  lw::CostReport sparse = lw::lookwhere_cost(
      lw::selector_config(cfg), cfg.selector_num_layers, cfg.selector_map_hidden,
      lw::model_config(cfg), k, head_classes(cfg));
  lw::CostReport dense = lw::count_flops(
      lw::model_config(cfg),
      std::vector<int>(std::size_t(cfg.model_num_layers), lw::model_config(cfg).seq_len()),
      -1, head_classes(cfg));
  report.add("flops_sparse", sparse.flops_total);
  report.add("flops_dense", dense.flops_total);
  report.add("flops_ratio", sparse.flops_total / dense.flops_total);

  std::cout << lw::metrics_table(report) << "\n" << lw::metrics_csv(report);
  if (!args.out_path.empty()) {
    std::ofstream os(args.out_path, std::ios::binary);
    if (!os) throw lw::ValueError("eval: cannot write '" + args.out_path + "'");
    os << lw::metrics_csv(report);
    std::cout << "wrote " << args.out_path << "\n";
  }
  return 0;
}

int cmd_selectmap(const CommonArgs& args, const std::string& image_path) {
  lw::RunConfig cfg = resolve_config(args);
  const std::string ckpt_path = resolve_eval_checkpoint(cfg);
  lw::Checkpoint ckpt = lw::load_checkpoint(ckpt_path);
  ModelSet models = ModelSet::build(cfg);
  lw::NamedParams selector_named = models.selector.named("selector.");
  lw::checkpoint_read_params(ckpt, selector_named);

  lw::Tensor image = lw::load_tensor(image_path);
  if (image.ndim() == 2) image = lw::reshape(image, {image.dim(0), image.dim(1), 1});
  const int n_high = cfg.model_image_size / cfg.model_patch_size;
  lw::SelectorOutput sel;
  {
    lw::NoGradGuard guard;
    sel = lw::selector_forward(image, models.selector, n_high);
  }

  const std::string out = args.out_path.empty() ? "selectmap.pgm" : args.out_path;
  lw::write_heatmap_pgm(out, sel.map.detach(), cfg.model_patch_size);

  const int k = resolve_eval_k(cfg);
  std::vector<int> positions = lw::top_k_select(sel.map, k);
  std::stable_sort(positions.begin(), positions.end(), [&](int a, int b) {
    return sel.map.data()[a] > sel.map.data()[b];
  });
  std::cout << "top-" << k << " patches (row col score):\n";
  for (int pos : positions)
    std::cout << pos / n_high << " " << pos % n_high << " " << sel.map.data()[pos] << "\n";
  std::cout << "wrote " << out << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  // Determinism cap; the reference implementation is single-threaded, so any
  // valid value runs one worker.
  if (const char* env = std::getenv("LOOKWHERE_THREADS")) {
    char* end = nullptr;
    long threads = std::strtol(env, &end, 10);
    if (end == env || *end != '\0' || threads < 1) {
      std::cerr << "error: LOOKWHERE_THREADS must be a positive integer\n";
      return 1;
    }
  }

  CLI::App app{"LookWhere: selector-extractor pipelines on a synthetic desk-scale task"};
  app.require_subcommand(1);

  CommonArgs args;
  std::string image_path;
  CLI::App* train_teacher = app.add_subcommand("train-teacher", "Train the dense teacher");
  CLI::App* pretrain = app.add_subcommand("pretrain", "Distill selector and extractor");
  CLI::App* finetune = app.add_subcommand("finetune", "Attach and train a task head");
  CLI::App* eval = app.add_subcommand("eval", "Report metrics as a CSV table");
  CLI::App* selectmap = app.add_subcommand("selectmap", "Export a selector heatmap");
  for (CLI::App* cmd : {train_teacher, pretrain, finetune, eval, selectmap})
    add_common(cmd, args);
  selectmap->add_option("image", image_path, "Input image tensor (.lwt)")->required();

  CLI11_PARSE(app, argc, argv);

  try {
    if (train_teacher->parsed()) return cmd_train_teacher(args);
    if (pretrain->parsed()) return cmd_pretrain(args);
    if (finetune->parsed()) return cmd_finetune(args);
    if (eval->parsed()) return cmd_eval(args);
    if (selectmap->parsed()) return cmd_selectmap(args, image_path);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  std::cerr << "error: no subcommand\n";
  return 1;
}
