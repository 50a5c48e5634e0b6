#pragma once

#include "rtta/evaluation.hpp"
#include "rtta/objectives.hpp"

namespace rtta {

// SGD-with-momentum state. Update rule, per parameter:
//   v <- momentum * v + g + weight_decay * theta
//   theta <- theta - lr * v
struct OptimizerState {
  std::map<std::string, std::vector<double>> velocity;
  double momentum = 0.9;
  double weight_decay = 0.0;
};

inline void sgd_momentum_step(ParamMap& params, const NamedGrads& grads, OptimizerState& opt, double lr) {
  for (auto& [name, theta] : params) {
    const auto git = grads.find(name);
    if (git == grads.end()) throw Error("sgd_momentum_step: missing gradient for " + name);
    const auto& g = git->second;
    if (g.size() != theta.values.size())
      throw ShapeError("sgd_momentum_step: gradient size mismatch for " + name);
    auto& v = opt.velocity[name];
    if (v.empty()) v.assign(theta.values.size(), 0.0);
    for (std::size_t i = 0; i < theta.values.size(); ++i) {
      v[i] = opt.momentum * v[i] + g[i] + opt.weight_decay * theta.values[i];
      theta.values[i] -= lr * v[i];
    }
  }
}

// Step decay: lr(e) = initial * factor^(number of decay epochs <= e).
struct LrSchedule {
  double initial_lr = 1e-3;
  std::vector<int> decay_epochs = {10, 25, 30};
  double decay_factor = 0.1;

  void validate() const {
    if (!(initial_lr > 0.0)) throw ConfigError("schedule: initial_lr must be positive");
    if (!(decay_factor > 0.0 && decay_factor < 1.0))
      throw ConfigError("schedule: decay factor must be in (0,1)");
    if (!std::is_sorted(decay_epochs.begin(), decay_epochs.end()))
      throw ConfigError("schedule: decay epochs must be sorted");
  }
};

inline double lr_at_epoch(const LrSchedule& s, int epoch) {
  if (epoch < 0) throw Error("lr_at_epoch: epoch must be nonnegative");
  int decays = 0;
  for (int d : s.decay_epochs)
    if (d <= epoch) ++decays;
  return s.initial_lr * std::pow(s.decay_factor, decays);
}

// ---------------------------------------------------------------------------
// Source pretraining (desk scale)
// ---------------------------------------------------------------------------

struct PretrainConfig {
  int epochs = 30;
  int batch_size = 32;
  LrSchedule schedule{0.05, {20, 27}, 0.2};
  double momentum = 0.9;
  double weight_decay = 5e-4;
  std::uint64_t seed = 0;
};

namespace detail {

// Shuffled batch index lists; trailing batches of size < 2 are dropped so
// batch-statistic BN always sees at least two samples.
inline std::vector<std::vector<std::size_t>> epoch_batches(std::size_t n, int batch_size,
                                                           std::uint64_t seed) {
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  Rng rng(seed);
  rng.shuffle(order);
  std::vector<std::vector<std::size_t>> batches;
  for (std::size_t start = 0; start < n; start += batch_size) {
    const std::size_t end = std::min(n, start + batch_size);
    if (end - start < 2) continue;
    batches.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(start),
                         order.begin() + static_cast<std::ptrdiff_t>(end));
  }
  return batches;
}

}  // namespace detail

// Standard cross-entropy training with train-mode BN, producing the
// non-robust checkpoint both the teacher and the student start from.
inline Checkpoint pretrain_source(const ModelSpec& spec, const Dataset& source,
                                  const PretrainConfig& cfg) {
  spec.validate();
  source.validate();
  cfg.schedule.validate();
  Checkpoint model = build_model(spec, derive_seed(cfg.seed, 0xB0075));
  OptimizerState opt{{}, cfg.momentum, cfg.weight_decay};

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    const double lr = lr_at_epoch(cfg.schedule, epoch);
    const auto batches = detail::epoch_batches(source.size(), cfg.batch_size,
                                               derive_seed(cfg.seed, 0xB5u + static_cast<std::uint64_t>(epoch)));
    for (const auto& idx : batches) {
      const Tensor x = make_batch(source, idx);
      const std::vector<int> y = labels_for(source, idx);
      Tape tape;
      const ParamMap vars = place_parameters(tape, model);
      const Tensor logits = model_forward(tape, model, vars, x, BnMode::train, &model.bn_states);
      const Tensor loss = mean_cross_entropy(tape, logits, y);
      const NamedGrads grads = detail::collect(tape.backprop(loss), vars);
      sgd_momentum_step(model.parameters, grads, opt, lr);
    }
  }
  model.provenance = "pretrain(seed=" + std::to_string(cfg.seed) + ", epochs=" + std::to_string(cfg.epochs) +
                     ", n=" + std::to_string(source.size()) + ")";
  return model;
}

inline Checkpoint pretrain_source(const ModelSpec& spec, const Dataset& source, int epochs,
                                  std::uint64_t seed) {
  PretrainConfig cfg;
  cfg.epochs = epochs;
  cfg.seed = seed;
  return pretrain_source(spec, source, cfg);
}

// ---------------------------------------------------------------------------
// Teacher BN test-time adaptation
// ---------------------------------------------------------------------------

enum class TeacherPolicy { frozen, bn_parallel, bn_before };

inline std::string to_string(TeacherPolicy p) {
  switch (p) {
    case TeacherPolicy::frozen: return "frozen";
    case TeacherPolicy::bn_parallel: return "bn_parallel";
    case TeacherPolicy::bn_before: return "bn_before";
  }
  throw Error("unknown teacher policy");
}

inline TeacherPolicy teacher_policy_from_string(const std::string& s) {
  if (s == "frozen") return TeacherPolicy::frozen;
  if (s == "bn_parallel") return TeacherPolicy::bn_parallel;
  if (s == "bn_before") return TeacherPolicy::bn_before;
  throw ConfigError("unknown teacher policy '" + s + "'");
}

// Forwards clean target batches in tta_adaptive BN mode: running statistics
// move toward the target batches, weights stay bit-identical. The frozen
// policy returns the teacher unchanged.
inline Checkpoint adapt_teacher(const Checkpoint& teacher, const std::vector<Tensor>& clean_batches,
                                TeacherPolicy policy) {
  Checkpoint adapted = teacher;
  if (policy == TeacherPolicy::frozen) return adapted;
  for (const Tensor& batch : clean_batches) {
    if (batch.shape.empty() || batch.shape[0] < 2)
      throw Error("adapt_teacher: BN adaptation needs batches of at least 2 samples");
    forward(adapted, batch, BnMode::tta_adaptive);
  }
  return adapted;
}

// ---------------------------------------------------------------------------
// Student adversarial fine-tuning
// ---------------------------------------------------------------------------

struct AdaptationConfig {
  MethodConfig method;
  ThreatModel threat;  // training inner maximization (5-step by default)
  int eval_attack_steps = 20;
  ThreatModel::Init eval_attack_init = ThreatModel::Init::uniform_ball;
  int epochs = 30;
  int batch_size = 32;
  LrSchedule schedule{2e-4, {10, 25, 30}, 0.1};
  double momentum = 0.9;
  double weight_decay = 0.0;
  TeacherPolicy teacher_policy = TeacherPolicy::bn_parallel;
  double teacher_bn_momentum = 0.1;
  // BN mode of the student's loss forwards. Conventional fine-tuning runs
  // train mode; frozen_eval keeps the pretrained statistics fixed.
  BnMode student_bn = BnMode::train;
  int eval_subset = 512;         // per-epoch dynamics eval subset (fixed, seeded)
  int robust_eval_subset = 512;  // per-epoch robust eval subset (first part of the above)
  int eval_threads = 1;
  std::uint64_t seed = 0;

  void validate() const {
    method.validate();
    threat.validate();
    schedule.validate();
    if (epochs < 0) throw ConfigError("adaptation: epochs must be nonnegative");
    if (batch_size < 2) throw ConfigError("adaptation: batch_size must be >= 2");
    if (!(momentum >= 0.0 && momentum < 1.0)) throw ConfigError("adaptation: momentum must be in [0,1)");
    if (!(weight_decay >= 0.0)) throw ConfigError("adaptation: weight_decay must be nonnegative");
    if (!(teacher_bn_momentum > 0.0 && teacher_bn_momentum <= 1.0))
      throw ConfigError("adaptation: teacher_bn_momentum must be in (0,1]");
    if (student_bn == BnMode::tta_adaptive)
      throw ConfigError("adaptation: student_bn must be train or frozen_eval");
    if (eval_subset < 1 || robust_eval_subset < 1)
      throw ConfigError("adaptation: eval subsets must be positive");
    if (eval_attack_steps < 0) throw ConfigError("adaptation: eval_attack_steps must be nonnegative");
  }

  ThreatModel eval_threat() const { return threat.with_eval_profile(eval_attack_steps, eval_attack_init); }
};

struct EpochLosses {
  double acc_term = 0.0;
  double rob_term = 0.0;
  double total = 0.0;
};

struct DynamicsRecord {
  int epoch = 0;
  double lr = 0.0;
  double loss_acc_term = 0.0;
  double loss_rob_term = 0.0;
  double clean_acc = 0.0;
  double robust_acc = 0.0;
  double teacher_clean_acc = 0.0;
};

// One record per completed epoch; `diverged` marks a run cut short by a
// non-finite loss, with the student rolled back to the last good epoch.
struct DynamicsLog {
  std::vector<DynamicsRecord> records;
  bool diverged = false;
};

namespace detail {

template <class InputAt>
inline EpochLosses run_student_epoch(Checkpoint& teacher, Checkpoint& student, std::size_t n,
                                     InputAt&& input_at, const std::vector<int>* all_labels,
                                     const AdaptationConfig& cfg, OptimizerState& opt, int epoch) {
  const double lr = lr_at_epoch(cfg.schedule, epoch);
  const auto batches = epoch_batches(n, cfg.batch_size,
                                     derive_seed(cfg.seed, 0xE70C4 + static_cast<std::uint64_t>(epoch)));
  EpochLosses sums;
  std::size_t batch_count = 0;
  for (std::size_t b = 0; b < batches.size(); ++b) {
    const auto& idx = batches[b];
    struct Adapter {
      const InputAt* f;
      const Tensor& input(std::size_t i) const { return (*f)(i); }
    } adapter{&input_at};
    const Tensor x = make_batch<Adapter>(adapter, idx);

    std::vector<int> batch_labels;
    const std::vector<int>* labels_ptr = nullptr;
    if (all_labels != nullptr) {
      for (auto i : idx) batch_labels.push_back((*all_labels)[i]);
      labels_ptr = &batch_labels;
    }

    // Teacher BN update on the clean batch happens before attack crafting,
    // so both loss terms see one consistent teacher state per batch.
    if (cfg.teacher_policy == TeacherPolicy::bn_parallel)
      forward(teacher, x, BnMode::tta_adaptive);

    const std::uint64_t attack_seed =
        derive_seed(cfg.seed, 0xA77AC0 + static_cast<std::uint64_t>(epoch) * 1000003ull + b);
    const Tensor x_hat = craft_inner_max(cfg.method, teacher, student, x, labels_ptr, cfg.threat, attack_seed);

    Tape tape;
    const ParamMap vars = place_parameters(tape, student);
    const LossTerms terms = composite_loss_graph(tape, cfg.method, teacher, student, vars, x, x_hat,
                                                 labels_ptr, cfg.student_bn, &student.bn_states);
    const NamedGrads grads = collect(tape.backprop(terms.total), vars);
    sgd_momentum_step(student.parameters, grads, opt, lr);

    sums.acc_term += terms.acc_term.values[0];
    sums.rob_term += terms.rob_term.values[0];
    sums.total += terms.total.values[0];
    ++batch_count;
  }
  if (batch_count > 0) {
    sums.acc_term /= static_cast<double>(batch_count);
    sums.rob_term /= static_cast<double>(batch_count);
    sums.total /= static_cast<double>(batch_count);
  }
  return sums;
}

}  // namespace detail

// One unsupervised epoch; the data arrives through the label-free view.
inline EpochLosses adapt_student_epoch(Checkpoint& teacher, Checkpoint& student, const UnlabeledView& data,
                                       const AdaptationConfig& cfg, OptimizerState& opt, int epoch) {
  if (method_requires_labels(cfg.method.method))
    throw Error("adapt_student_epoch: supervised method " + to_string(cfg.method.method) +
                " cannot run on an unlabeled view");
  return detail::run_student_epoch(
      teacher, student, data.size(), [&](std::size_t i) -> const Tensor& { return data.input(i); },
      nullptr, cfg, opt, epoch);
}

// One supervised epoch (pgd_at / trades baselines).
inline EpochLosses adapt_student_epoch(Checkpoint& teacher, Checkpoint& student, const Dataset& data,
                                       const AdaptationConfig& cfg, OptimizerState& opt, int epoch) {
  if (!method_requires_labels(cfg.method.method))
    throw Error("adapt_student_epoch: unsupervised method " + to_string(cfg.method.method) +
                " must receive the label-withheld view");
  return detail::run_student_epoch(
      teacher, student, data.size(), [&](std::size_t i) -> const Tensor& { return data.inputs[i]; },
      &data.labels, cfg, opt, epoch);
}

struct AdaptationResult {
  Checkpoint student;
  Checkpoint teacher;
  DynamicsLog log;
};

namespace detail {

inline Dataset fixed_subset(const Dataset& d, int subset, std::uint64_t seed) {
  if (subset >= static_cast<int>(d.size())) return d;
  std::vector<std::size_t> order(d.size());
  std::iota(order.begin(), order.end(), 0);
  Rng rng(seed);
  rng.shuffle(order);
  order.resize(subset);
  std::sort(order.begin(), order.end());
  Dataset out;
  out.domain = d.domain;
  out.num_classes = d.num_classes;
  for (auto i : order) {
    out.inputs.push_back(d.inputs[i]);
    out.labels.push_back(d.labels[i]);
  }
  return out;
}

}  // namespace detail

// The full test-time adaptation run: forks teacher/student from the
// pretrained checkpoint, optionally pre-adapts the teacher's BN statistics,
// then runs the student's adversarial fine-tuning with per-epoch dynamics
// logging. A non-finite loss stops the run, keeps the log, and rolls the
// student back to the end of the last completed epoch.
inline AdaptationResult run_adaptation(const Checkpoint& pretrained, const Dataset& target,
                                       const Dataset& eval_set, const AdaptationConfig& cfg) {
  cfg.validate();
  target.validate();
  eval_set.validate();

  auto [teacher, student] = fork_teacher_student(pretrained);
  for (auto& [name, bn] : teacher.bn_states) bn.momentum = cfg.teacher_bn_momentum;

  if (cfg.teacher_policy == TeacherPolicy::bn_before) {
    std::vector<Tensor> batches;
    const auto idx_batches =
        detail::epoch_batches(target.size(), cfg.batch_size, derive_seed(cfg.seed, 0xBEF0));
    for (const auto& idx : idx_batches) batches.push_back(make_batch(target, idx));
    teacher = adapt_teacher(teacher, batches, TeacherPolicy::bn_before);
  }

  const Dataset eval_clean = detail::fixed_subset(eval_set, cfg.eval_subset, derive_seed(cfg.seed, 0xE5E7));
  const Dataset eval_robust =
      detail::fixed_subset(eval_clean, cfg.robust_eval_subset, derive_seed(cfg.seed, 0xE5E8));
  const ThreatModel eval_tm = cfg.eval_threat();
  const bool unsupervised = !method_requires_labels(cfg.method.method);
  const UnlabeledView view(target);

  OptimizerState opt{{}, cfg.momentum, cfg.weight_decay};
  AdaptationResult result;
  result.log = DynamicsLog{};

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    const Checkpoint last_good = student;
    EpochLosses losses;
    try {
      losses = unsupervised ? adapt_student_epoch(teacher, student, view, cfg, opt, epoch)
                            : adapt_student_epoch(teacher, student, target, cfg, opt, epoch);
    } catch (const NumericError&) {
      student = last_good;
      result.log.diverged = true;
      break;
    }

    DynamicsRecord rec;
    rec.epoch = epoch;
    rec.lr = lr_at_epoch(cfg.schedule, epoch);
    rec.loss_acc_term = losses.acc_term;
    rec.loss_rob_term = losses.rob_term;
    rec.clean_acc = clean_accuracy(student, eval_clean);
    rec.robust_acc = robust_accuracy(student, eval_robust, EvalAttack{}, eval_tm,
                                     derive_seed(cfg.seed, 0x90B57 + static_cast<std::uint64_t>(epoch)),
                                     cfg.eval_threads);
    rec.teacher_clean_acc = clean_accuracy(teacher, eval_clean);
    result.log.records.push_back(rec);
  }

  result.student = std::move(student);
  result.teacher = std::move(teacher);
  return result;
}

}  // namespace rtta
