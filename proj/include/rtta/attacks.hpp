#pragma once

#include "rtta/objectives.hpp"

namespace rtta {

// L-infinity threat model: perturbations live in the epsilon-ball around the
// input intersected with the valid value box.
struct ThreatModel {
  enum class Init { none, uniform_ball };

  double epsilon = 8.0 / 255.0;
  double alpha = 2.0 / 255.0;
  int steps = 5;
  Init init = Init::none;
  double box_low = 0.0;
  double box_high = 1.0;

  void validate() const {
    if (!(epsilon >= 0.0)) throw ConfigError("threat: epsilon must be nonnegative");
    if (!(alpha >= 0.0) || alpha > 2.0 * epsilon + 1e-15)
      throw ConfigError("threat: alpha must satisfy 0 <= alpha <= 2*epsilon");
    if (steps < 0) throw ConfigError("threat: steps must be nonnegative");
    if (!(box_low < box_high)) throw ConfigError("threat: value box must satisfy low < high");
  }

  ThreatModel with_eval_profile(int eval_steps, Init eval_init) const {
    ThreatModel tm = *this;
    tm.steps = eval_steps;
    tm.init = eval_init;
    return tm;
  }
};

inline std::string to_string(ThreatModel::Init i) {
  return i == ThreatModel::Init::none ? "none" : "uniform_ball";
}

inline ThreatModel::Init threat_init_from_string(const std::string& s) {
  if (s == "none") return ThreatModel::Init::none;
  if (s == "uniform_ball") return ThreatModel::Init::uniform_ball;
  throw ConfigError("unknown attack init '" + s + "' (expected none|uniform_ball)");
}

// Elementwise clamp of x_hat into [x-eps, x+eps] intersected with the box.
inline Tensor project_linf_box(const Tensor& x_hat, const Tensor& x, const ThreatModel& tm) {
  if (x_hat.shape != x.shape)
    throw ShapeError("project_linf_box: shape mismatch " + shape_str(x_hat.shape) + " vs " +
                     shape_str(x.shape));
  Tensor out = Tape::detach(x_hat);
  for (std::size_t i = 0; i < out.values.size(); ++i) {
    const double lo = std::max(x.values[i] - tm.epsilon, tm.box_low);
    const double hi = std::min(x.values[i] + tm.epsilon, tm.box_high);
    out.values[i] = std::clamp(out.values[i], lo, hi);
  }
  return out;
}

// What the attacker maximizes. KL objectives carry the clean reference
// distribution, captured once before the attack loop and never recomputed.
struct AttackObjective {
  enum class Kind { ce_true_label, kl_from_student_clean, kl_from_teacher_clean };

  Kind kind = Kind::ce_true_label;
  std::vector<int> labels;  // ce_true_label only
  Tensor reference_probs;   // [n,k], kl kinds only

  static AttackObjective ce(std::vector<int> y) {
    AttackObjective o;
    o.kind = Kind::ce_true_label;
    o.labels = std::move(y);
    return o;
  }

  static AttackObjective kl_reference(Kind kind, Tensor probs) {
    if (kind == Kind::ce_true_label) throw Error("kl_reference: wrong objective kind");
    AttackObjective o;
    o.kind = kind;
    o.reference_probs = std::move(probs);
    return o;
  }
};

// Softmax rows of a logits batch, as a constant reference tensor.
inline Tensor softmax_rows(const Tensor& logits) {
  if (logits.shape.size() != 2) throw ShapeError("softmax_rows: expected [n,k]");
  const int n = logits.shape[0], k = logits.shape[1];
  Tensor out = Tensor::zeros(logits.shape);
  for (int r = 0; r < n; ++r) {
    LogitVector z{std::vector<double>(logits.values.begin() + static_cast<std::ptrdiff_t>(r) * k,
                                      logits.values.begin() + static_cast<std::ptrdiff_t>(r + 1) * k)};
    const ProbVector p = softmax(z);
    std::copy(p.probs.begin(), p.probs.end(), out.values.begin() + static_cast<std::ptrdiff_t>(r) * k);
  }
  return out;
}

namespace detail {

// Summed (not averaged) attack loss, so per-sample gradients are independent
// of the batch size.
inline Tensor attack_loss(Tape& tape, const Tensor& logits, const AttackObjective& obj) {
  if (obj.kind == AttackObjective::Kind::ce_true_label) {
    const auto picked = tape.pick_class(tape.log_softmax(logits), obj.labels);
    return tape.scale(tape.sum_all(picked), -1.0);
  }
  if (obj.reference_probs.shape != logits.shape)
    throw ShapeError("attack_loss: reference shape " + shape_str(obj.reference_probs.shape) +
                     " does not match logits " + shape_str(logits.shape));
  Tensor ref_log = Tape::detach(obj.reference_probs);
  for (auto& v : ref_log.values) v = std::log(std::max(v, kKlProbFloor));
  const auto lsm = tape.log_softmax(logits);
  const auto per_entry = tape.mul(Tape::detach(obj.reference_probs), tape.sub(ref_log, lsm));
  return tape.sum_all(per_entry);
}

inline void check_finite_grad(const std::vector<double>& g, const char* who) {
  for (double v : g)
    if (!std::isfinite(v)) throw NumericError(std::string(who) + ": non-finite gradient");
}

}  // namespace detail

// Sign-gradient L-infinity PGD with per-step projection. The model runs in
// frozen_eval BN mode throughout; parameters and running statistics are never
// touched. Deterministic given (inputs, objective, threat model, seed).
inline Tensor pgd_attack(const Checkpoint& model, const Tensor& x, const AttackObjective& obj,
                         const ThreatModel& tm, std::uint64_t seed) {
  tm.validate();
  Tensor x_hat = Tape::detach(x);
  if (tm.init == ThreatModel::Init::uniform_ball && tm.epsilon > 0.0) {
    Rng rng(derive_seed(seed, 0x50D1));
    for (auto& v : x_hat.values) v += rng.uniform(-tm.epsilon, tm.epsilon);
    x_hat = project_linf_box(x_hat, x, tm);
  }
  const ParamMap consts = constant_parameters(model);
  for (int step = 0; step < tm.steps; ++step) {
    Tape tape;
    const Tensor xv = tape.variable(x_hat.shape, x_hat.values);
    const Tensor logits = model_forward(tape, model, consts, xv, BnMode::frozen_eval);
    const Tensor loss = detail::attack_loss(tape, logits, obj);
    const auto grad = tape.backprop(loss).at(xv);
    detail::check_finite_grad(grad, "pgd_attack");
    for (std::size_t i = 0; i < x_hat.values.size(); ++i) {
      const double s = grad[i] > 0.0 ? 1.0 : (grad[i] < 0.0 ? -1.0 : 0.0);
      x_hat.values[i] += tm.alpha * s;
    }
    x_hat = project_linf_box(x_hat, x, tm);
  }
  return x_hat;
}

// Black-box score-based square search on a single image [c,h,w]: proposes
// axis-aligned square patches at +-epsilon and keeps those that increase the
// margin loss max_{k != y} z_k - z_y. Consumes forward passes only; the query
// count never exceeds the budget. The square side shrinks with the fraction
// p of perturbed area going 0.1 -> 0.01 linearly over the budget.
inline Tensor square_attack(const Checkpoint& model, const Tensor& x, int y, const ThreatModel& tm,
                            int query_budget, std::uint64_t seed) {
  tm.validate();
  if (x.shape.size() != 3) throw ShapeError("square_attack: expected a single image [c,h,w]");
  if (query_budget < 0) throw ConfigError("square_attack: query budget must be nonnegative");
  Tensor best = Tape::detach(x);
  if (query_budget == 0 || tm.epsilon == 0.0) return best;

  const int c = x.shape[0], h = x.shape[1], w = x.shape[2];
  Rng rng(derive_seed(seed, 0x5A5A));
  const auto margin = [&](const Tensor& candidate) {
    Tape tape;
    Tensor batch = Tape::constant({1, c, h, w}, candidate.values);
    const Tensor logits = model_forward(tape, model, constant_parameters(model), batch,
                                        BnMode::frozen_eval);
    double zy = logits.values[y];
    double other = -std::numeric_limits<double>::infinity();
    for (int j = 0; j < model.spec.num_classes; ++j)
      if (j != y) other = std::max(other, logits.values[j]);
    return other - zy;
  };

  int queries = 0;
  double best_margin = margin(best);
  ++queries;

  std::vector<double> delta(x.values.size(), 0.0);
  while (queries < query_budget && best_margin <= 0.0) {
    const double frac = query_budget > 1 ? static_cast<double>(queries - 1) / (query_budget - 1) : 0.0;
    const double p = 0.1 + (0.01 - 0.1) * frac;
    const int side = std::clamp(static_cast<int>(std::lround(std::sqrt(p * h * w))), 1, std::min(h, w));
    const int top = static_cast<int>(rng.uniform_int(static_cast<std::uint64_t>(h - side + 1)));
    const int left = static_cast<int>(rng.uniform_int(static_cast<std::uint64_t>(w - side + 1)));

    std::vector<double> proposal = delta;
    for (int ch = 0; ch < c; ++ch) {
      const double sgn = rng.coin() ? tm.epsilon : -tm.epsilon;
      for (int dy = 0; dy < side; ++dy)
        for (int dx = 0; dx < side; ++dx)
          proposal[(static_cast<std::size_t>(ch) * h + top + dy) * w + left + dx] = sgn;
    }
    Tensor candidate = Tape::detach(x);
    for (std::size_t i = 0; i < candidate.values.size(); ++i) candidate.values[i] += proposal[i];
    candidate = project_linf_box(candidate, x, tm);

    const double m = margin(candidate);
    ++queries;
    if (m > best_margin) {
      best_margin = m;
      best = candidate;
      delta = std::move(proposal);
    }
  }
  return best;
}

// Method-matched inner maximization:
//   pgd_at         -> CE on the true label (supervised),
//   trades/trades_u -> KL from the student's frozen clean distribution,
//   tgra           -> KL from the teacher's frozen clean distribution.
inline Tensor craft_inner_max(const MethodConfig& cfg, const Checkpoint& teacher,
                              const Checkpoint& student, const Tensor& x,
                              const std::vector<int>* labels, const ThreatModel& tm,
                              std::uint64_t seed) {
  const bool supervised = method_requires_labels(cfg.method);
  if (supervised && labels == nullptr)
    throw Error("craft_inner_max: method " + to_string(cfg.method) + " requires labels");
  if (!supervised && labels != nullptr)
    throw Error("craft_inner_max: labels supplied to unsupervised method " + to_string(cfg.method));

  AttackObjective obj;
  switch (cfg.method) {
    case Method::pgd_at:
      obj = AttackObjective::ce(*labels);
      break;
    case Method::trades:
    case Method::trades_u:
      obj = AttackObjective::kl_reference(AttackObjective::Kind::kl_from_student_clean,
                                          softmax_rows(forward_eval(student, x)));
      break;
    case Method::tgra:
      obj = AttackObjective::kl_reference(AttackObjective::Kind::kl_from_teacher_clean,
                                          softmax_rows(forward_eval(teacher, x)));
      break;
  }
  return pgd_attack(student, x, obj, tm, seed);
}

}  // namespace rtta
