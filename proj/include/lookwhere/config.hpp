#pragma once

// Flat key=value run configuration shared by every CLI subcommand. One file
// describes the whole pipeline; commands read the sections they need and the
// resolved text is embedded into checkpoints for provenance.

#include <charconv>
#include <cstdint>
#include <fstream>
#include <sstream>
#include <string>
#include <variant>
#include <vector>

#include "lookwhere/data.hpp"
#include "lookwhere/eval.hpp"
#include "lookwhere/train.hpp"

namespace lookwhere {

struct RunConfig {
  // [model] — teacher and extractor geometry.
  int model_image_size = 64;
  int model_patch_size = 8;
  int model_channels = 1;
  int model_embed_dim = 64;
  int model_num_layers = 4;
  int model_num_heads = 4;
  int model_num_registers = 4;
  double model_ffn_ratio = 4.0;

  // [selector] — truncated low-resolution trunk.
  int selector_image_size = 32;
  int selector_num_layers = 2;
  int selector_map_hidden = 128;

  // [data] — synthetic task.
  int data_num_classes = 4;
  int data_glyph_side = 12;
  double data_noise_std = 0.25;
  int data_noise_block = 2;
  int data_position_stride = 4;
  int data_train_count = 256;
  int data_test_count = 128;
  std::uint64_t data_seed = 7;
  std::string data_task = "classification";

  // [train]
  std::uint64_t train_seed = 1;
  int train_batch_size = 16;
  double train_lr_floor = 1e-5;
  double train_warmup_frac = 0.1;
  double train_weight_decay = 0.01;
  int train_teacher_epochs = 20;
  double train_teacher_lr = 3e-3;
  double train_teacher_early_stop = 0.975;
  int train_pretrain_epochs = 8;
  double train_pretrain_lr = 3e-3;
  int train_finetune_epochs = 8;
  double train_finetune_lr = 1e-3;
  int train_k = 6;
  int train_k_min = 4;
  int train_k_max = 16;
  bool train_varied_k = false;
  int train_finetune_k_min = 1;
  int train_finetune_k_max = 64;
  double train_w_cls = 1.0;
  double train_w_pat = 1.0;
  double train_w_map = 0.1;
  std::string train_map_loss = "kl";
  bool train_reverse_kl = false;
  bool train_agg_cls = false;
  bool train_agg_reg = false;
  bool train_agg_pat = true;
  std::string train_agg_layers = "last_only";
  int train_interp_neighbors = 5;
  double train_interp_pow = 1.0;
  double train_interp_epsilon = 1e-8;
  std::string train_conditioning = "selector";
  std::string train_selection = "selector";
  std::string train_head = "class";
  bool train_augment_flip = false;
  std::string train_teacher_checkpoint = "teacher.ckpt";
  std::string train_pretrain_checkpoint = "pretrain.ckpt";
  std::string train_finetune_checkpoint = "finetune.ckpt";

  // [eval]
  std::string eval_checkpoint = "";  // empty -> train.finetune_checkpoint
  int eval_k = 0;                    // 0 -> train.k
  int eval_knn_neighbors = 3;
  int eval_patch_neighbors = 20;
  std::string eval_metric = "euclidean";
  int eval_probe_epochs = 300;
  double eval_probe_lr = 0.05;
};

namespace detail {

using ConfigSlot = std::variant<int*, double*, bool*, std::string*, std::uint64_t*>;

struct ConfigEntry {
  std::string name;  // "section.key"
  ConfigSlot slot;
};

inline std::vector<ConfigEntry> config_registry(RunConfig& c) {
  return {
      {"model.image_size", &c.model_image_size},
      {"model.patch_size", &c.model_patch_size},
      {"model.channels", &c.model_channels},
      {"model.embed_dim", &c.model_embed_dim},
      {"model.num_layers", &c.model_num_layers},
      {"model.num_heads", &c.model_num_heads},
      {"model.num_registers", &c.model_num_registers},
      {"model.ffn_ratio", &c.model_ffn_ratio},
      {"selector.image_size", &c.selector_image_size},
      {"selector.num_layers", &c.selector_num_layers},
      {"selector.map_hidden", &c.selector_map_hidden},
      {"data.num_classes", &c.data_num_classes},
      {"data.glyph_side", &c.data_glyph_side},
      {"data.noise_std", &c.data_noise_std},
      {"data.noise_block", &c.data_noise_block},
      {"data.position_stride", &c.data_position_stride},
      {"data.train_count", &c.data_train_count},
      {"data.test_count", &c.data_test_count},
      {"data.seed", &c.data_seed},
      {"data.task", &c.data_task},
      {"train.seed", &c.train_seed},
      {"train.batch_size", &c.train_batch_size},
      {"train.lr_floor", &c.train_lr_floor},
      {"train.warmup_frac", &c.train_warmup_frac},
      {"train.weight_decay", &c.train_weight_decay},
      {"train.teacher_epochs", &c.train_teacher_epochs},
      {"train.teacher_lr", &c.train_teacher_lr},
      {"train.teacher_early_stop", &c.train_teacher_early_stop},
      {"train.pretrain_epochs", &c.train_pretrain_epochs},
      {"train.pretrain_lr", &c.train_pretrain_lr},
      {"train.finetune_epochs", &c.train_finetune_epochs},
      {"train.finetune_lr", &c.train_finetune_lr},
      {"train.k", &c.train_k},
      {"train.k_min", &c.train_k_min},
      {"train.k_max", &c.train_k_max},
      {"train.varied_k", &c.train_varied_k},
      {"train.finetune_k_min", &c.train_finetune_k_min},
      {"train.finetune_k_max", &c.train_finetune_k_max},
      {"train.w_cls", &c.train_w_cls},
      {"train.w_pat", &c.train_w_pat},
      {"train.w_map", &c.train_w_map},
      {"train.map_loss", &c.train_map_loss},
      {"train.reverse_kl", &c.train_reverse_kl},
      {"train.agg_cls", &c.train_agg_cls},
      {"train.agg_reg", &c.train_agg_reg},
      {"train.agg_pat", &c.train_agg_pat},
      {"train.agg_layers", &c.train_agg_layers},
      {"train.interp_neighbors", &c.train_interp_neighbors},
      {"train.interp_pow", &c.train_interp_pow},
      {"train.interp_epsilon", &c.train_interp_epsilon},
      {"train.conditioning", &c.train_conditioning},
      {"train.selection", &c.train_selection},
      {"train.head", &c.train_head},
      {"train.augment_flip", &c.train_augment_flip},
      {"train.teacher_checkpoint", &c.train_teacher_checkpoint},
      {"train.pretrain_checkpoint", &c.train_pretrain_checkpoint},
      {"train.finetune_checkpoint", &c.train_finetune_checkpoint},
      {"eval.checkpoint", &c.eval_checkpoint},
      {"eval.k", &c.eval_k},
      {"eval.knn_neighbors", &c.eval_knn_neighbors},
      {"eval.patch_neighbors", &c.eval_patch_neighbors},
      {"eval.metric", &c.eval_metric},
      {"eval.probe_epochs", &c.eval_probe_epochs},
      {"eval.probe_lr", &c.eval_probe_lr},
  };
}

inline std::string config_trim(const std::string& s) {
  std::size_t b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return "";
  std::size_t e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

inline void config_assign(const ConfigEntry& entry, const std::string& raw) {
  const std::string value = config_trim(raw);
  auto fail = [&]() {
    throw ValueError("config: bad value '" + value + "' for " + entry.name);
  };
  if (auto p = std::get_if<std::string*>(&entry.slot)) {
    **p = value;
    return;
  }
  if (value.empty()) fail();
  const char* first = value.data();
  const char* last = first + value.size();
  if (auto p = std::get_if<int*>(&entry.slot)) {
    auto [ptr, ec] = std::from_chars(first, last, **p);
    if (ec != std::errc() || ptr != last) fail();
  } else if (auto p = std::get_if<std::uint64_t*>(&entry.slot)) {
    auto [ptr, ec] = std::from_chars(first, last, **p);
    if (ec != std::errc() || ptr != last) fail();
  } else if (auto p = std::get_if<double*>(&entry.slot)) {
    auto [ptr, ec] = std::from_chars(first, last, **p);
    if (ec != std::errc() || ptr != last) fail();
  } else if (auto p = std::get_if<bool*>(&entry.slot)) {
    if (value == "true" || value == "1")
      **p = true;
    else if (value == "false" || value == "0")
      **p = false;
    else
      fail();
  }
}

inline std::string config_format(const ConfigEntry& entry) {
  std::string out;
  if (auto p = std::get_if<std::string*>(&entry.slot)) return **p;
  if (auto p = std::get_if<bool*>(&entry.slot)) return **p ? "true" : "false";
  char buf[64];
  if (auto p = std::get_if<int*>(&entry.slot)) {
    auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, **p);
    return std::string(buf, ptr);
  }
  if (auto p = std::get_if<std::uint64_t*>(&entry.slot)) {
    auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, **p);
    return std::string(buf, ptr);
  }
  auto p = std::get_if<double*>(&entry.slot);
  auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, **p);
  return std::string(buf, ptr);
}

}  // namespace detail

// Applies one "section.key=value" assignment; throws on unknown keys.
inline void config_set(RunConfig& cfg, const std::string& assignment) {
  std::size_t eq = assignment.find('=');
  if (eq == std::string::npos)
    throw ValueError("config: expected key=value, got '" + assignment + "'");
  const std::string key = detail::config_trim(assignment.substr(0, eq));
  const std::string value = assignment.substr(eq + 1);
  for (const auto& entry : detail::config_registry(cfg)) {
    if (entry.name == key) {
      detail::config_assign(entry, value);
      return;
    }
  }
  throw ValueError("config: unknown key '" + key + "'");
}

// Parses INI-style text ([section] headers, key=value lines, # comments)
// on top of the built-in defaults.
inline RunConfig parse_run_config(const std::string& text) {
  RunConfig cfg;
  std::istringstream is(text);
  std::string line, section;
  int lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    std::string t = detail::config_trim(line);
    if (t.empty() || t[0] == '#' || t[0] == ';') continue;
    if (t.front() == '[') {
      if (t.back() != ']' || t.size() < 3)
        throw ValueError("config: malformed section header at line " + std::to_string(lineno));
      section = t.substr(1, t.size() - 2);
      continue;
    }
    std::size_t eq = t.find('=');
    if (eq == std::string::npos)
      throw ValueError("config: expected key=value at line " + std::to_string(lineno));
    if (section.empty())
      throw ValueError("config: key before any [section] at line " + std::to_string(lineno));
    config_set(cfg, section + "." + t.substr(0, eq) + "=" + t.substr(eq + 1));
  }
  return cfg;
}

inline RunConfig load_run_config(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw ValueError("config: cannot open '" + path + "'");
  std::ostringstream buf;
  buf << is.rdbuf();
  return parse_run_config(buf.str());
}

// Canonical serialization; parsing it back reproduces the config exactly.
inline std::string resolved_text(const RunConfig& cfg) {
  RunConfig copy = cfg;
  std::string out, section;
  for (const auto& entry : detail::config_registry(copy)) {
    std::string sec = entry.name.substr(0, entry.name.find('.'));
    if (sec != section) {
      if (!section.empty()) out += "\n";
      out += "[" + sec + "]\n";
      section = sec;
    }
    out += entry.name.substr(sec.size() + 1) + "=" + detail::config_format(entry) + "\n";
  }
  return out;
}

// --- typed views over the sections ---

inline ViTConfig model_config(const RunConfig& cfg) {
  ViTConfig m;
  m.image_size = cfg.model_image_size;
  m.patch_size = cfg.model_patch_size;
  m.channels = cfg.model_channels;
  m.embed_dim = cfg.model_embed_dim;
  m.num_layers = cfg.model_num_layers;
  m.num_heads = cfg.model_num_heads;
  m.num_registers = cfg.model_num_registers;
  m.ffn_ratio = cfg.model_ffn_ratio;
  return m;
}

// Low-resolution trunk geometry: the model config at the selector's input
// side and truncated depth.
inline ViTConfig selector_config(const RunConfig& cfg) {
  ViTConfig s = model_config(cfg);
  s.image_size = cfg.selector_image_size;
  s.num_layers = cfg.selector_num_layers;
  return s;
}

inline SyntheticSpec data_spec(const RunConfig& cfg) {
  SyntheticSpec spec;
  spec.image_side = cfg.model_image_size;
  spec.num_classes = cfg.data_num_classes;
  spec.glyph_side = cfg.data_glyph_side;
  spec.noise_std = cfg.data_noise_std;
  spec.noise_block = cfg.data_noise_block;
  spec.seed = cfg.data_seed;
  spec.patch_size = cfg.model_patch_size;
  spec.position_stride = cfg.data_position_stride;
  if (cfg.data_task == "classification")
    spec.task = TaskKind::kClassification;
  else if (cfg.data_task == "segmentation")
    spec.task = TaskKind::kSegmentation;
  else
    throw ValueError("config: data.task must be classification or segmentation");
  return spec;
}

inline MapLoss map_loss_kind(const RunConfig& cfg) {
  if (cfg.train_map_loss == "kl") return MapLoss::kKl;
  if (cfg.train_map_loss == "mse") return MapLoss::kMse;
  throw ValueError("config: train.map_loss must be kl or mse");
}

inline LayerSet layer_set_kind(const RunConfig& cfg) {
  const std::string& s = cfg.train_agg_layers;
  if (s == "first_half") return LayerSet::kFirstHalf;
  if (s == "last_half") return LayerSet::kLastHalf;
  if (s == "last_third") return LayerSet::kLastThird;
  if (s == "last_only") return LayerSet::kLastOnly;
  if (s == "all_layers") return LayerSet::kAllLayers;
  throw ValueError("config: train.agg_layers must be one of first_half, last_half, "
                   "last_third, last_only, all_layers");
}

inline Conditioning conditioning_kind(const RunConfig& cfg) {
  if (cfg.train_conditioning == "selector") return Conditioning::kSelectorTokens;
  if (cfg.train_conditioning == "none") return Conditioning::kNone;
  throw ValueError("config: train.conditioning must be selector or none");
}

inline SelectionMode selection_kind(const RunConfig& cfg) {
  if (cfg.train_selection == "selector") return SelectionMode::kSelector;
  if (cfg.train_selection == "random") return SelectionMode::kRandom;
  throw ValueError("config: train.selection must be selector or random");
}

inline HeadKind head_kind(const RunConfig& cfg) {
  if (cfg.train_head == "class") return HeadKind::kClassToken;
  if (cfg.train_head == "patch") return HeadKind::kPatchToken;
  throw ValueError("config: train.head must be class or patch");
}

inline Metric metric_kind(const RunConfig& cfg) {
  if (cfg.eval_metric == "euclidean") return Metric::kEuclidean;
  if (cfg.eval_metric == "cosine") return Metric::kCosine;
  throw ValueError("config: eval.metric must be euclidean or cosine");
}

inline AggregationSpec aggregation_spec(const RunConfig& cfg) {
  AggregationSpec agg;
  agg.use_cls = cfg.train_agg_cls;
  agg.use_reg = cfg.train_agg_reg;
  agg.use_pat = cfg.train_agg_pat;
  agg.layers = layer_set_kind(cfg);
  agg.validate();
  return agg;
}

inline InterpConfig interp_config(const RunConfig& cfg) {
  InterpConfig interp;
  interp.neighbors = cfg.train_interp_neighbors;
  interp.pow = cfg.train_interp_pow;
  interp.epsilon = cfg.train_interp_epsilon;
  return interp;
}

inline TeacherTrainConfig teacher_train_config(const RunConfig& cfg) {
  TeacherTrainConfig t;
  t.epochs = cfg.train_teacher_epochs;
  t.batch_size = cfg.train_batch_size;
  t.lr = cfg.train_teacher_lr;
  t.lr_floor = cfg.train_lr_floor;
  t.warmup_frac = cfg.train_warmup_frac;
  t.weight_decay = cfg.train_weight_decay;
  t.early_stop_acc = cfg.train_teacher_early_stop;
  t.seed = cfg.train_seed;
  t.augment_flip = cfg.train_augment_flip;
  return t;
}

inline PretrainConfig pretrain_config(const RunConfig& cfg) {
  PretrainConfig p;
  p.epochs = cfg.train_pretrain_epochs;
  p.batch_size = cfg.train_batch_size;
  p.k_min = cfg.train_k_min;
  p.k_max = cfg.train_k_max;
  p.weights.cls = cfg.train_w_cls;
  p.weights.pat = cfg.train_w_pat;
  p.weights.map = cfg.train_w_map;
  p.adamw.lr = cfg.train_pretrain_lr;
  p.adamw.weight_decay = cfg.train_weight_decay;
  p.lr_floor = cfg.train_lr_floor;
  p.warmup_frac = cfg.train_warmup_frac;
  p.seed = cfg.train_seed;
  p.aggregation = aggregation_spec(cfg);
  p.interp = interp_config(cfg);
  p.conditioning = conditioning_kind(cfg);
  p.distill.map_loss = map_loss_kind(cfg);
  p.distill.reverse_kl = cfg.train_reverse_kl;
  p.augment_flip = cfg.train_augment_flip;
  return p;
}

inline FinetuneConfig finetune_config(const RunConfig& cfg) {
  FinetuneConfig f;
  f.epochs = cfg.train_finetune_epochs;
  f.batch_size = cfg.train_batch_size;
  f.head = head_kind(cfg);
  f.selection = selection_kind(cfg);
  f.k = cfg.train_k;
  f.varied_k = cfg.train_varied_k;
  f.k_min = cfg.train_finetune_k_min;
  f.k_max = cfg.train_finetune_k_max;
  f.adamw.lr = cfg.train_finetune_lr;
  f.adamw.weight_decay = cfg.train_weight_decay;
  f.lr_floor = cfg.train_lr_floor;
  f.warmup_frac = cfg.train_warmup_frac;
  f.seed = cfg.train_seed;
  f.conditioning = conditioning_kind(cfg);
  f.augment_flip = cfg.train_augment_flip;
  return f;
}

// Full structural validation; throws ValueError with the offending key.
inline void validate_run_config(const RunConfig& cfg) {
  ViTConfig model = model_config(cfg);
  model.validate();
  if (cfg.selector_image_size <= 0 || cfg.selector_image_size % cfg.model_patch_size != 0)
    throw ValueError("config: selector.image_size must be a positive multiple of "
                     "model.patch_size");
  if (cfg.selector_image_size > cfg.model_image_size)
    throw ValueError("config: selector.image_size must not exceed model.image_size");
  if (cfg.selector_num_layers < 1 || cfg.selector_num_layers > cfg.model_num_layers)
    throw ValueError("config: selector.num_layers must lie in [1, model.num_layers]");
  if (cfg.selector_map_hidden < 1) throw ValueError("config: selector.map_hidden must be >= 1");
  data_spec(cfg).validate();
  if (cfg.data_train_count < 1 || cfg.data_test_count < 1)
    throw ValueError("config: data.train_count and data.test_count must be >= 1");
  if (cfg.train_batch_size < 1) throw ValueError("config: train.batch_size must be >= 1");
  const int n2 = model.num_patches();
  if (cfg.train_k < 1 || cfg.train_k > n2)
    throw ValueError("config: train.k must lie in [1, N^2]");
  if (cfg.train_k_min < 1 || cfg.train_k_min > cfg.train_k_max || cfg.train_k_max > n2)
    throw ValueError("config: train.k_min/k_max must satisfy 1 <= k_min <= k_max <= N^2");
  if (cfg.train_finetune_k_min < 1 || cfg.train_finetune_k_min > cfg.train_finetune_k_max ||
      cfg.train_finetune_k_max > n2)
    throw ValueError("config: train.finetune_k_min/k_max must satisfy 1 <= min <= max <= N^2");
  if (cfg.eval_k < 0 || cfg.eval_k > n2)
    throw ValueError("config: eval.k must lie in [0, N^2] (0 means train.k)");
  if (cfg.eval_knn_neighbors < 1 || cfg.eval_patch_neighbors < 1)
    throw ValueError("config: eval neighbor counts must be >= 1");
  if (cfg.train_interp_neighbors < 1)
    throw ValueError("config: train.interp_neighbors must be >= 1");
  LossWeights weights{cfg.train_w_cls, cfg.train_w_pat, cfg.train_w_map};
  weights.validate();
  // Enum-valued strings: constructing the views rejects unknown names.
  (void)map_loss_kind(cfg);
  (void)layer_set_kind(cfg);
  (void)conditioning_kind(cfg);
  (void)selection_kind(cfg);
  (void)head_kind(cfg);
  (void)metric_kind(cfg);
  (void)aggregation_spec(cfg);
  if (cfg.train_teacher_epochs < 1 || cfg.train_pretrain_epochs < 1 ||
      cfg.train_finetune_epochs < 1)
    throw ValueError("config: epoch counts must be >= 1");
  if (cfg.eval_probe_epochs < 1) throw ValueError("config: eval.probe_epochs must be >= 1");
  if (cfg.train_teacher_lr <= 0 || cfg.train_pretrain_lr <= 0 || cfg.train_finetune_lr <= 0 ||
      cfg.eval_probe_lr <= 0)
    throw ValueError("config: learning rates must be positive");
  if (cfg.train_lr_floor < 0 || cfg.train_warmup_frac < 0 || cfg.train_warmup_frac > 1)
    throw ValueError("config: train.lr_floor must be >= 0 and warmup_frac in [0, 1]");
}

}  // namespace lookwhere
