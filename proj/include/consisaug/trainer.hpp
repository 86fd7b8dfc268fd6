#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "consisaug/checkpoint.hpp"
#include "consisaug/data.hpp"
#include "consisaug/eval.hpp"
#include "consisaug/losses.hpp"
#include "consisaug/model.hpp"
#include "consisaug/optim.hpp"

namespace consisaug {

enum class TrainMode { Vanilla, FlipAug, Consis, ConsisFlipAug };

inline const char* mode_name(TrainMode m) {
  switch (m) {
    case TrainMode::Vanilla: return "vanilla";
    case TrainMode::FlipAug: return "flipaug";
    case TrainMode::Consis: return "consis";
    case TrainMode::ConsisFlipAug: return "consis_flipaug";
  }
  return "?";
}

inline TrainMode parse_mode(const std::string& s) {
  if (s == "vanilla") return TrainMode::Vanilla;
  if (s == "flipaug") return TrainMode::FlipAug;
  if (s == "consis") return TrainMode::Consis;
  if (s == "consis_flipaug") return TrainMode::ConsisFlipAug;
  raise(ErrorCode::InvalidConfig, "unknown mode `" + s + "`");
}

inline constexpr std::array<TrainMode, 4> kAllTrainModes{
    TrainMode::Vanilla, TrainMode::FlipAug, TrainMode::Consis, TrainMode::ConsisFlipAug};

struct TrainConfig {
  std::string data_dir;
  std::string out_dir;
  TrainMode mode = TrainMode::Vanilla;
  int epochs = 100;
  int warmup_epochs = 10;
  int batch_size = 16;
  double max_lr = 1e-4;
  double weight_decay = 0.01;
  double tau = 0.01;
  double consistency_weight = 1.0;
  double confidence_mask_threshold = 0.0;
  std::uint64_t seed = 0;
  int eval_every = 10;
  int image_size = 64;
  int num_classes = 1;
  double pos_threshold = 0.5;
  double neg_threshold = 0.4;
  bool resume = false;
  int stop_after_epochs = 0;  // stop this invocation after N epochs (0 = run to completion)

  void validate() const {
    if (epochs < 1) raise(ErrorCode::InvalidConfig, "epochs must be >= 1");
    if (warmup_epochs < 0 || warmup_epochs >= epochs)
      raise(ErrorCode::InvalidConfig, "need 0 <= warmup_epochs < epochs");
    if (batch_size < 1) raise(ErrorCode::InvalidConfig, "batch_size must be >= 1");
    if (max_lr < 0 || weight_decay < 0 || consistency_weight < 0)
      raise(ErrorCode::InvalidConfig, "rates must be >= 0");
    if (tau < 0 || tau > 1) raise(ErrorCode::InvalidConfig, "tau must lie in [0, 1]");
    if (eval_every < 1) raise(ErrorCode::InvalidConfig, "eval_every must be >= 1");
    if (!(0 <= neg_threshold && neg_threshold <= pos_threshold && pos_threshold <= 1))
      raise(ErrorCode::InvalidThresholds, "need 0 <= neg <= pos <= 1");
  }

  bool consistency_enabled() const {
    return mode == TrainMode::Consis || mode == TrainMode::ConsisFlipAug;
  }
  bool flip_aug_enabled() const {
    return mode == TrainMode::FlipAug || mode == TrainMode::ConsisFlipAug;
  }

  ModelSpec model_spec() const {
    ModelSpec spec;
    spec.num_classes = num_classes;
    spec.image_size = image_size;
    return spec;
  }

  /// Canonical `key = value` snapshot; keys match the CLI flag names, so a
  /// run can be reproduced with `train --config <snapshot>`.
  std::string to_config_text() const {
    auto num = [](double v) {
      char buf[40];
      std::snprintf(buf, sizeof(buf), "%.17g", v);
      return std::string(buf);
    };
    std::string s;
    s += "data = " + data_dir + "\n";
    s += "out = " + out_dir + "\n";
    s += "mode = " + std::string(mode_name(mode)) + "\n";
    s += "epochs = " + std::to_string(epochs) + "\n";
    s += "warmup-epochs = " + std::to_string(warmup_epochs) + "\n";
    s += "batch-size = " + std::to_string(batch_size) + "\n";
    s += "max-lr = " + num(max_lr) + "\n";
    s += "weight-decay = " + num(weight_decay) + "\n";
    s += "tau = " + num(tau) + "\n";
    s += "consistency-weight = " + num(consistency_weight) + "\n";
    s += "confidence-mask-threshold = " + num(confidence_mask_threshold) + "\n";
    s += "seed = " + std::to_string(seed) + "\n";
    s += "eval-every = " + std::to_string(eval_every) + "\n";
    s += "image-size = " + std::to_string(image_size) + "\n";
    s += "num-classes = " + std::to_string(num_classes) + "\n";
    s += "pos-threshold = " + num(pos_threshold) + "\n";
    s += "neg-threshold = " + num(neg_threshold) + "\n";
    s += "stop-after-epochs = " + std::to_string(stop_after_epochs) + "\n";
    return s;
  }
};

/// One sample of a batch plus its derived augmentation seeds. Seeds are
/// pure functions of (run seed, epoch, dataset index) so a resumed run
/// draws exactly the same augmentations as an uninterrupted one.
struct StepSample {
  const LabeledSample* sample = nullptr;
  std::uint64_t aug_seed = 0;
  std::uint64_t pair_seed = 0;
};

/// Teacher-confidence mask: with a positive threshold only anchor pairs
/// whose teacher-side foreground probability exceeds it contribute;
/// threshold 0 selects every pair.
inline std::vector<std::uint8_t> consistency_mask(const DetectorOutput& teacher_out,
                                                  const AnchorPermutation& perm,
                                                  double threshold) {
  const int K = teacher_out.cls.shape[0];
  const int C1 = teacher_out.cls.shape[1];
  std::vector<std::uint8_t> mask(static_cast<std::size_t>(K), 1);
  if (threshold <= 0.0) return mask;
  for (int k = 0; k < K; ++k) {
    const int kp = perm[k];
    const double fg = 1.0 - teacher_out.cls.data[static_cast<std::size_t>(kp * C1)];
    mask[static_cast<std::size_t>(k)] = fg > threshold ? 1 : 0;
  }
  return mask;
}

/// One optimizer step over a batch. In the consistency modes the teacher
/// runs on the flipped view and its outputs cross the stop-gradient
/// boundary before entering the losses; the EMA update always runs so
/// checkpoints stay structurally identical across modes.
inline LossBreakdown train_step(const std::vector<StepSample>& batch, StudentTeacher& st,
                                AdamW& opt, const TrainConfig& cfg, const ModelSpec& spec,
                                double lr) {
  if (batch.empty()) raise(ErrorCode::InvalidConfig, "empty batch");
  const AnchorGrid grid = spec.anchor_grid();
  Tape tape;
  st.student.for_each([&](const char*, Tensor& t) { tape.watch(t); });

  double sup_sum = 0, conl_sum = 0, conc_sum = 0;
  Tensor total = Tensor::scalar(0.0);
  bool first = true;
  for (const StepSample& ss : batch) {
    AugmentResult aug = initial_augment(*ss.sample, ss.aug_seed, cfg.flip_aug_enabled());
    const MatchedTargets targets =
        match_targets(grid, aug.sample.boxes, cfg.pos_threshold, cfg.neg_threshold);
    const DetectorOutput student_out = forward(st.student, aug.sample.image, spec);
    Tensor sample_total = supervised_loss(student_out, targets);
    sup_sum += sample_total.value();

    if (cfg.consistency_enabled()) {
      const AugmentedPair pair = make_pair(aug.sample, ss.pair_seed);
      const DetectorOutput teacher_raw = forward(st.teacher, pair.teacher.image, spec);
      const DetectorOutput teacher_out{detach(teacher_raw.cls), detach(teacher_raw.loc)};
      const AnchorPermutation perm = anchor_permutation(grid, pair.kind);
      const auto mask = consistency_mask(teacher_out, perm, cfg.confidence_mask_threshold);
      Tensor con_loc = loc_consistency_total(student_out, teacher_out, perm, pair.kind, mask);
      Tensor con_cls = cls_consistency_total(student_out, teacher_out, perm, mask);
      conl_sum += con_loc.value();
      conc_sum += con_cls.value();
      sample_total = add(sample_total, scale(add(con_loc, con_cls), cfg.consistency_weight));
    }
    total = first ? sample_total : add(total, sample_total);
    first = false;
  }

  const double inv_b = 1.0 / static_cast<double>(batch.size());
  total = scale(total, inv_b);
  LossBreakdown bd = LossBreakdown::make(sup_sum * inv_b, conl_sum * inv_b, conc_sum * inv_b,
                                         cfg.consistency_weight);

  if (total.on_tape()) {
    tape.backward(total);
    std::map<std::string, std::vector<double>> grads;
    st.student.for_each([&](const char* name, Tensor& t) { grads[name] = *t.grad; });
    st.student.release_tape();
    opt.step(st.student, grads, lr);
  } else {
    st.student.release_tape();
  }
  st.student.step += 1;
  ema_update(st);
  return bd;
}

// ---------------------------------------------------------------------------
// Checkpoint assembly / restore
// ---------------------------------------------------------------------------

namespace detail {

inline Checkpoint make_checkpoint(const StudentTeacher& st, const AdamW& opt,
                                  const ModelSpec& spec, double best_map50, double best_epoch,
                                  const std::string& config_text) {
  Checkpoint ck;
  ck.arch_hash = spec.arch_hash();
  ck.step = st.student.step;
  ck.config_text = config_text;
  st.student.for_each([&](const char* name, const Tensor& t) {
    ck.tensors.emplace_back(std::string("student.") + name, detach(t));
  });
  st.teacher.for_each([&](const char* name, const Tensor& t) {
    ck.tensors.emplace_back(std::string("teacher.") + name, detach(t));
  });
  for (const auto& [name, m] : opt.m)
    ck.tensors.emplace_back("opt.m." + name, Tensor({static_cast<int>(m.size())}, m));
  for (const auto& [name, v] : opt.v)
    ck.tensors.emplace_back("opt.v." + name, Tensor({static_cast<int>(v.size())}, v));
  ck.tensors.emplace_back("opt.steps", Tensor::scalar(static_cast<double>(opt.t)));
  ck.tensors.emplace_back("trainer.best_map50", Tensor::scalar(best_map50));
  ck.tensors.emplace_back("trainer.best_epoch", Tensor::scalar(best_epoch));
  return ck;
}

inline void params_from_checkpoint(const Checkpoint& ck, const std::string& prefix,
                                   DetectorParams& out) {
  out.for_each([&](const char* name, Tensor& t) {
    const Tensor* src = ck.find(prefix + name);
    if (!src) raise(ErrorCode::ArchMismatch, "checkpoint lacks tensor " + prefix + name);
    if (src->shape != t.shape)
      raise(ErrorCode::ArchMismatch, "checkpoint tensor shape mismatch for " + prefix + name);
    t.data = src->data;
  });
  out.step = ck.step;
}

inline void restore_training_state(const Checkpoint& ck, StudentTeacher& st, AdamW& opt,
                                   double& best_map50, double& best_epoch) {
  params_from_checkpoint(ck, "student.", st.student);
  params_from_checkpoint(ck, "teacher.", st.teacher);
  st.student.for_each([&](const char* name, Tensor&) {
    const Tensor* m = ck.find("opt.m." + std::string(name));
    const Tensor* v = ck.find("opt.v." + std::string(name));
    if (!m || !v) raise(ErrorCode::ArchMismatch, "checkpoint lacks optimizer state for " +
                                                     std::string(name));
    opt.m[name] = m->data;
    opt.v[name] = v->data;
  });
  const Tensor* steps = ck.find("opt.steps");
  opt.t = steps ? static_cast<std::uint64_t>(steps->value()) : ck.step;
  if (const Tensor* b = ck.find("trainer.best_map50")) best_map50 = b->value();
  if (const Tensor* b = ck.find("trainer.best_epoch")) best_epoch = b->value();
}

}  // namespace detail

struct TrainResult {
  std::filesystem::path last_ckpt;
  std::filesystem::path best_ckpt;
  std::filesystem::path metrics_path;
  double best_map50 = -1.0;
  int best_epoch = -1;
  int metrics_lines = 0;
  LossBreakdown last_losses;
};

/// Full training loop over in-memory datasets. Deterministic given the
/// config: sample order, augmentation draws and evaluation all derive
/// from cfg.seed through fixed-purpose sub-streams.
inline TrainResult train_on(const TrainConfig& cfg, const std::vector<LabeledSample>& train_set,
                            const std::vector<LabeledSample>& val_set) {
  cfg.validate();
  if (train_set.empty()) raise(ErrorCode::InvalidConfig, "training split is empty");
  for (const LabeledSample& s : train_set)
    for (const GtBox& b : s.boxes)
      if (b.class_id >= cfg.num_classes)
        raise(ErrorCode::InvalidConfig, "sample " + s.id + " has class id beyond num-classes");

  const ModelSpec spec = cfg.model_spec();
  spec.validate();
  const std::filesystem::path out(cfg.out_dir);
  std::error_code ec;
  std::filesystem::create_directories(out, ec);
  if (ec) raise(ErrorCode::IoError, "cannot create output directory " + out.string());

  StudentTeacher st = init_params(cfg.seed, spec, cfg.tau);
  AdamW opt;
  opt.weight_decay = cfg.weight_decay;

  const int n = static_cast<int>(train_set.size());
  const int steps_per_epoch = (n + cfg.batch_size - 1) / cfg.batch_size;
  const std::int64_t total_steps = static_cast<std::int64_t>(cfg.epochs) * steps_per_epoch;
  const std::int64_t warmup_steps = static_cast<std::int64_t>(cfg.warmup_epochs) * steps_per_epoch;

  TrainResult result;
  result.last_ckpt = out / "last.ckpt";
  result.best_ckpt = out / "best.ckpt";
  result.metrics_path = out / "metrics.jsonl";

  double best_map50 = -1.0;
  double best_epoch = -1.0;
  int start_epoch = 0;
  std::ofstream metrics;
  if (cfg.resume && std::filesystem::exists(result.last_ckpt)) {
    const Checkpoint ck = load_checkpoint(result.last_ckpt, spec.arch_hash());
    detail::restore_training_state(ck, st, opt, best_map50, best_epoch);
    start_epoch = static_cast<int>(st.student.step / static_cast<std::uint64_t>(steps_per_epoch));
    metrics.open(result.metrics_path, std::ios::app);
  } else {
    metrics.open(result.metrics_path, std::ios::trunc);
  }
  if (!metrics) raise(ErrorCode::IoError, "cannot open metrics file " + result.metrics_path.string());
  const std::string config_text = cfg.to_config_text();

  const int end_epoch = cfg.stop_after_epochs > 0
                            ? std::min(cfg.epochs, start_epoch + cfg.stop_after_epochs)
                            : cfg.epochs;
  for (int epoch = start_epoch; epoch < end_epoch; ++epoch) {
    std::vector<int> order(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) order[static_cast<std::size_t>(i)] = i;
    Rng shuffle_rng(mix_seed(cfg.seed, 0x50FFu, static_cast<std::uint64_t>(epoch)));
    shuffle_rng.shuffle(order);

    double sup = 0, conl = 0, conc = 0;
    double last_lr = 0;
    for (int b = 0; b < steps_per_epoch; ++b) {
      std::vector<StepSample> batch;
      for (int i = b * cfg.batch_size; i < std::min(n, (b + 1) * cfg.batch_size); ++i) {
        const int idx = order[static_cast<std::size_t>(i)];
        batch.push_back(StepSample{
            &train_set[static_cast<std::size_t>(idx)],
            mix_seed(cfg.seed, 0xA06u, static_cast<std::uint64_t>(epoch),
                     static_cast<std::uint64_t>(idx)),
            mix_seed(cfg.seed, 0xFA12u, static_cast<std::uint64_t>(epoch),
                     static_cast<std::uint64_t>(idx))});
      }
      last_lr = lr_schedule(static_cast<std::int64_t>(st.student.step), total_steps, warmup_steps,
                            cfg.max_lr);
      const LossBreakdown bd = train_step(batch, st, opt, cfg, spec, last_lr);
      if (!bd.finite()) {
        std::string ids;
        for (const StepSample& ss : batch) ids += ss.sample->id + " ";
        raise(ErrorCode::NonFiniteLoss, "non-finite loss at epoch " + std::to_string(epoch) +
                                            " batch " + std::to_string(b) + " (samples: " + ids +
                                            ")");
      }
      sup += bd.sup;
      conl += bd.con_loc;
      conc += bd.con_cls;
      result.last_losses = bd;
    }
    sup /= steps_per_epoch;
    conl /= steps_per_epoch;
    conc /= steps_per_epoch;

    const bool do_eval = ((epoch + 1) % cfg.eval_every == 0) || epoch == cfg.epochs - 1;
    if (do_eval && !val_set.empty()) {
      const MetricsReport rep = evaluate(st.student, val_set, spec);
      nlohmann::ordered_json line{
          {"epoch", epoch},          {"split", "val"},
          {"precision", rep.precision}, {"recall", rep.recall},
          {"map50", rep.map50},      {"f1", rep.f1},
          {"f2", rep.f2},            {"loss_sup", sup},
          {"loss_con_loc", conl},    {"loss_con_cls", conc},
          {"lr", last_lr},           {"mode", mode_name(cfg.mode)},
          {"seed", cfg.seed}};
      metrics << line.dump() << "\n";
      metrics.flush();
      ++result.metrics_lines;
      if (rep.map50 > best_map50) {
        best_map50 = rep.map50;
        best_epoch = epoch;
        save_checkpoint(
            detail::make_checkpoint(st, opt, spec, best_map50, best_epoch, config_text),
            result.best_ckpt);
      }
    }
    save_checkpoint(detail::make_checkpoint(st, opt, spec, best_map50, best_epoch, config_text),
                    result.last_ckpt);
  }

  result.best_map50 = best_map50;
  result.best_epoch = static_cast<int>(best_epoch);
  return result;
}

/// Disk-backed entry point: loads `<data>/train` and `<data>/val`.
inline TrainResult train(const TrainConfig& cfg) {
  const std::filesystem::path data(cfg.data_dir);
  const auto train_set = load_dataset(data / "train");
  std::vector<LabeledSample> val_set;
  if (std::filesystem::exists(data / "val")) val_set = load_dataset(data / "val");
  return train_on(cfg, train_set, val_set);
}

}  // namespace consisaug
