#pragma once

#include "rtta/model.hpp"

namespace rtta {

// Raw classifier outputs for one sample.
struct LogitVector {
  std::vector<double> logits;
};

// A point on the probability simplex. Produced by softmax; the checked
// factory exists for hand-built distributions in oracles and references.
struct ProbVector {
  std::vector<double> probs;

  static ProbVector from_probabilities(std::vector<double> p) {
    double sum = 0.0;
    for (double v : p) {
      if (!(v >= 0.0 && v <= 1.0)) throw Error("ProbVector: entry outside [0,1]");
      sum += v;
    }
    if (std::abs(sum - 1.0) > 1e-9) throw Error("ProbVector: entries sum to " + std::to_string(sum));
    return ProbVector{std::move(p)};
  }
};

// Numerically stable (max-subtracted) softmax.
inline ProbVector softmax(const LogitVector& z) {
  if (z.logits.empty()) throw Error("softmax: empty logits");
  for (double v : z.logits)
    if (!std::isfinite(v)) throw NumericError("softmax: non-finite logit");
  const double m = *std::max_element(z.logits.begin(), z.logits.end());
  std::vector<double> p(z.logits.size());
  double sum = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    p[i] = std::exp(z.logits[i] - m);
    sum += p[i];
  }
  for (auto& v : p) v /= sum;
  return ProbVector{std::move(p)};
}

// Probability floor inside KL logs; keeps zero-probability classes finite
// while perturbing values far below test tolerances.
inline constexpr double kKlProbFloor = 1e-12;

// KL(p || q) = sum_i p_i ln(p_i / q_i), with 0 * ln(0/.) := 0 and q floored
// at kKlProbFloor before the log.
inline double kl_divergence(const ProbVector& p, const ProbVector& q) {
  if (p.probs.size() != q.probs.size()) throw Error("kl_divergence: dimension mismatch");
  double kl = 0.0;
  for (std::size_t i = 0; i < p.probs.size(); ++i) {
    if (p.probs[i] <= 0.0) continue;
    const double qi = std::max(q.probs[i], kKlProbFloor);
    kl += p.probs[i] * std::log(p.probs[i] / qi);
  }
  return kl;
}

// -log softmax(z)[y].
inline double cross_entropy(const LogitVector& z, int y) {
  const int k = static_cast<int>(z.logits.size());
  if (y < 0 || y >= k)
    throw Error("cross_entropy: label " + std::to_string(y) + " out of range [0," + std::to_string(k) + ")");
  const double m = *std::max_element(z.logits.begin(), z.logits.end());
  double sum = 0.0;
  for (double v : z.logits) sum += std::exp(v - m);
  return m + std::log(sum) - z.logits[y];
}

enum class Method { pgd_at, trades, trades_u, tgra };

inline std::string to_string(Method m) {
  switch (m) {
    case Method::pgd_at: return "pgd_at";
    case Method::trades: return "trades";
    case Method::trades_u: return "trades_u";
    case Method::tgra: return "tgra";
  }
  throw Error("unknown method");
}

inline Method method_from_string(const std::string& s) {
  if (s == "pgd_at") return Method::pgd_at;
  if (s == "trades") return Method::trades;
  if (s == "trades_u") return Method::trades_u;
  if (s == "tgra") return Method::tgra;
  throw ConfigError("unknown method '" + s + "' (expected pgd_at|trades|trades_u|tgra)");
}

inline bool method_requires_labels(Method m) { return m == Method::pgd_at || m == Method::trades; }

struct MethodConfig {
  Method method = Method::tgra;
  double beta = 6.0;

  void validate() const {
    if (!(beta >= 0.0)) throw ConfigError("method: beta must be nonnegative");
  }
};

// ---------------------------------------------------------------------------
// Tape-level losses (batch means). Adversarial inputs always enter as
// constants: the inner maximizer is treated as fixed data when the outer
// objective is differentiated.
// ---------------------------------------------------------------------------

// Mean over rows of KL(softmax(za) || softmax(zb)). Either side may be a
// constant; detaching a side at the logits removes that branch from the
// gradient.
inline Tensor mean_kl_logits(Tape& tape, const Tensor& za, const Tensor& zb) {
  if (za.shape != zb.shape || za.shape.size() != 2)
    throw ShapeError("mean_kl_logits: expected matching [n,k] logits, got " + shape_str(za.shape) +
                     " vs " + shape_str(zb.shape));
  const auto lsa = tape.log_softmax(za);
  const auto lsb = tape.log_softmax(zb);
  const auto p = tape.exp(lsa);
  const auto per_entry = tape.mul(p, tape.sub(lsa, lsb));
  return tape.scale(tape.sum_all(per_entry), 1.0 / za.shape[0]);
}

// Mean over rows of -log softmax(z)[y].
inline Tensor mean_cross_entropy(Tape& tape, const Tensor& z, const std::vector<int>& labels) {
  const auto picked = tape.pick_class(tape.log_softmax(z), labels);
  return tape.scale(tape.sum_all(picked), -1.0 / z.shape[0]);
}

// Student forward in frozen_eval BN mode: losses are pure functions of the
// parameters, and batch statistics never leak between loss evaluations.
inline Tensor student_logits(Tape& tape, const Checkpoint& student, const ParamMap& vars, const Tensor& x) {
  return model_forward(tape, student, vars, x, BnMode::frozen_eval);
}

// Worst-case self-consistency regularizer KL(p(x) || p(x_hat)), both branches
// differentiable with respect to the student parameters.
inline Tensor r_self_graph(Tape& tape, const Checkpoint& student, const ParamMap& vars, const Tensor& x,
                           const Tensor& x_hat) {
  const auto z_clean = student_logits(tape, student, vars, x);
  const auto z_adv = student_logits(tape, student, vars, x_hat);
  return mean_kl_logits(tape, z_clean, z_adv);
}

// Teacher-anchored regularizer KL(q(x) || p(x_hat)); the teacher distribution
// is fixed, so only the adversarial branch carries gradient.
inline Tensor r_teach_graph(Tape& tape, const Tensor& teacher_clean_logits, const Checkpoint& student,
                            const ParamMap& vars, const Tensor& x_hat) {
  const auto z_adv = student_logits(tape, student, vars, x_hat);
  return mean_kl_logits(tape, Tape::detach(teacher_clean_logits), z_adv);
}

inline double r_self(const Checkpoint& student, const Tensor& x, const Tensor& x_hat) {
  Tape tape;
  return r_self_graph(tape, student, constant_parameters(student), x, x_hat).values[0];
}

inline double r_teach(const Checkpoint& teacher, const Checkpoint& student, const Tensor& x,
                      const Tensor& x_hat) {
  Tape tape;
  const Tensor q = forward_eval(teacher, x);
  return r_teach_graph(tape, q, student, constant_parameters(student), x_hat).values[0];
}

struct LossTerms {
  Tensor total;     // acc_term + beta * rob_term, on the tape
  Tensor acc_term;  // clean-anchor term
  Tensor rob_term;  // robustness regularizer (unweighted)
};

// The four composite objectives. x_hat is the precomputed inner maximizer.
//   pgd_at   : CE(f(x),y)      + beta * CE(f(x_hat),y)
//   trades   : CE(f(x),y)      + beta * KL(f(x) || f(x_hat))
//   trades_u : KL(q(x)||f(x))  + beta * KL(f(x) || f(x_hat))
//   tgra     : KL(q(x)||f(x))  + beta * KL(q(x) || f(x_hat))
// Supervised methods require labels; unsupervised methods reject them so a
// label can never leak into a test-time path.
//
// student_bn chooses the student's BN mode for the two loss forwards. The
// standalone value op uses frozen_eval (a pure function of the parameters);
// the fine-tuning loop passes train, the conventional fine-tuning mode, which
// normalizes with batch statistics (clean forward first, then adversarial)
// and updates the student's running stats through `student_bn_states`.
inline LossTerms composite_loss_graph(Tape& tape, const MethodConfig& cfg, const Checkpoint& teacher,
                                      const Checkpoint& student, const ParamMap& student_vars,
                                      const Tensor& x, const Tensor& x_hat,
                                      const std::vector<int>* labels,
                                      BnMode student_bn = BnMode::frozen_eval,
                                      std::map<std::string, BatchNormState>* student_bn_states = nullptr) {
  cfg.validate();
  const bool supervised = method_requires_labels(cfg.method);
  if (supervised && labels == nullptr)
    throw Error("composite_loss: method " + to_string(cfg.method) + " requires labels");
  if (!supervised && labels != nullptr)
    throw Error("composite_loss: labels supplied to unsupervised method " + to_string(cfg.method));

  LossTerms terms;
  const auto z_clean = model_forward(tape, student, student_vars, x, student_bn, student_bn_states);
  const auto z_adv = model_forward(tape, student, student_vars, x_hat, student_bn, student_bn_states);

  switch (cfg.method) {
    case Method::pgd_at:
      terms.acc_term = mean_cross_entropy(tape, z_clean, *labels);
      terms.rob_term = mean_cross_entropy(tape, z_adv, *labels);
      break;
    case Method::trades:
      terms.acc_term = mean_cross_entropy(tape, z_clean, *labels);
      terms.rob_term = mean_kl_logits(tape, z_clean, z_adv);
      break;
    case Method::trades_u: {
      const Tensor q = forward_eval(teacher, x);
      terms.acc_term = mean_kl_logits(tape, q, z_clean);
      terms.rob_term = mean_kl_logits(tape, z_clean, z_adv);
      break;
    }
    case Method::tgra: {
      const Tensor q = forward_eval(teacher, x);
      terms.acc_term = mean_kl_logits(tape, q, z_clean);
      terms.rob_term = mean_kl_logits(tape, q, z_adv);
      break;
    }
  }
  terms.total = tape.add(terms.acc_term, tape.scale(terms.rob_term, cfg.beta));
  return terms;
}

inline double composite_loss(const MethodConfig& cfg, const Checkpoint& teacher, const Checkpoint& student,
                             const Tensor& x, const Tensor& x_hat, const std::vector<int>* labels = nullptr) {
  Tape tape;
  return composite_loss_graph(tape, cfg, teacher, student, constant_parameters(student), x, x_hat, labels)
      .total.values[0];
}

// ---------------------------------------------------------------------------
// Gradient decomposition of the regularizers
// ---------------------------------------------------------------------------

inline constexpr double kDecompositionTolerance = 1e-6;

using NamedGrads = std::map<std::string, std::vector<double>>;

// The regularizer gradient split into the branch through the clean reference
// and the branch through the adversarial prediction. For the self-consistency
// regularizer the two sides must add up to the total; for the
// teacher-anchored one the reference side is identically zero.
struct GradDecomposition {
  NamedGrads reference_side;
  NamedGrads adversarial_side;
  NamedGrads total;
  double max_residual = 0.0;       // max-abs of total - (reference + adversarial)
  double reference_max_abs = 0.0;  // largest reference-side coordinate
  bool additive = false;           // max_residual <= kDecompositionTolerance
};

namespace detail {

inline NamedGrads collect(const GradientMap& gm, const ParamMap& vars) {
  NamedGrads out;
  for (const auto& [name, var] : vars) out[name] = gm.at(var);
  return out;
}

inline double max_abs(const NamedGrads& g) {
  double m = 0.0;
  for (const auto& [name, v] : g)
    for (double x : v) m = std::max(m, std::abs(x));
  return m;
}

inline void finish_decomposition(GradDecomposition& d) {
  double resid = 0.0;
  for (const auto& [name, tot] : d.total) {
    const auto& r = d.reference_side.at(name);
    const auto& a = d.adversarial_side.at(name);
    for (std::size_t i = 0; i < tot.size(); ++i)
      resid = std::max(resid, std::abs(tot[i] - (r[i] + a[i])));
  }
  d.max_residual = resid;
  d.reference_max_abs = max_abs(d.reference_side);
  d.additive = resid <= kDecompositionTolerance;
}

}  // namespace detail

// Splits grad R_self by detaching one branch at a time on a shared forward
// graph: the reference side keeps the clean branch live, the adversarial side
// keeps the perturbed branch live, and the total keeps both.
inline GradDecomposition grad_decompose_self(const Checkpoint& student, const Tensor& x,
                                             const Tensor& x_hat) {
  Tape tape;
  const ParamMap vars = place_parameters(tape, student);
  const auto z_clean = student_logits(tape, student, vars, x);
  const auto z_adv = student_logits(tape, student, vars, x_hat);

  const auto total_loss = mean_kl_logits(tape, z_clean, z_adv);
  const auto ref_loss = mean_kl_logits(tape, z_clean, Tape::detach(z_adv));
  const auto adv_loss = mean_kl_logits(tape, Tape::detach(z_clean), z_adv);

  GradDecomposition d;
  d.total = detail::collect(tape.backprop(total_loss), vars);
  d.reference_side = detail::collect(tape.backprop(ref_loss), vars);
  d.adversarial_side = detail::collect(tape.backprop(adv_loss), vars);
  detail::finish_decomposition(d);
  return d;
}

// Same split for grad R_teach. The clean reference is the teacher's, which
// carries no student parameters, so the reference side is exactly zero and
// the adversarial side is the whole gradient.
inline GradDecomposition grad_decompose_teach(const Checkpoint& teacher, const Checkpoint& student,
                                              const Tensor& x, const Tensor& x_hat) {
  Tape tape;
  const ParamMap vars = place_parameters(tape, student);
  const Tensor q = forward_eval(teacher, x);
  const auto z_adv = student_logits(tape, student, vars, x_hat);

  const auto total_loss = mean_kl_logits(tape, Tape::detach(q), z_adv);
  const auto ref_loss = mean_kl_logits(tape, Tape::detach(q), Tape::detach(z_adv));
  // Rebuilt rather than aliased, so the additivity check compares two
  // independently traversed graphs.
  const auto adv_loss = mean_kl_logits(tape, Tape::detach(q), z_adv);

  GradDecomposition d;
  d.total = detail::collect(tape.backprop(total_loss), vars);
  d.reference_side = detail::collect(tape.backprop(ref_loss), vars);
  d.adversarial_side = detail::collect(tape.backprop(adv_loss), vars);
  detail::finish_decomposition(d);
  return d;
}

}  // namespace rtta
