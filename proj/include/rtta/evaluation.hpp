#pragma once

#include <future>

#include "rtta/attacks.hpp"
#include "rtta/data.hpp"

namespace rtta {

// Clean and per-attack robust accuracy on one eval set at one severity.
struct EvalReport {
  int severity = 0;
  double clean_acc = 0.0;
  std::map<std::string, double> robust_acc;
  int n_samples = 0;
  std::uint64_t seed = 0;
};

// Argmax with ties broken toward the lowest class index.
inline int argmax_lowest(std::span<const double> row) {
  int best = 0;
  for (int j = 1; j < static_cast<int>(row.size()); ++j)
    if (row[j] > row[best]) best = j;
  return best;
}

inline std::vector<int> predict(const Checkpoint& model, const std::vector<Tensor>& images,
                                int batch_size = 64) {
  std::vector<int> preds;
  preds.reserve(images.size());
  const int k = model.spec.num_classes;
  std::vector<std::size_t> idx;
  for (std::size_t start = 0; start < images.size(); start += batch_size) {
    idx.clear();
    for (std::size_t i = start; i < std::min(images.size(), start + batch_size); ++i) idx.push_back(i);
    struct Adapter {
      const std::vector<Tensor>* v;
      const Tensor& input(std::size_t i) const { return (*v)[i]; }
    } a{&images};
    const Tensor logits = forward_eval(model, make_batch<Adapter>(a, idx));
    for (std::size_t r = 0; r < idx.size(); ++r)
      preds.push_back(argmax_lowest(std::span<const double>(&logits.values[r * k], k)));
  }
  return preds;
}

// Fraction of clean samples classified correctly.
inline double clean_accuracy(const Checkpoint& model, const Dataset& eval_set) {
  if (eval_set.size() == 0) throw Error("clean_accuracy: empty eval set");
  eval_set.validate();
  const auto preds = predict(model, eval_set.inputs);
  std::size_t correct = 0;
  for (std::size_t i = 0; i < preds.size(); ++i)
    if (preds[i] == eval_set.labels[i]) ++correct;
  return static_cast<double>(correct) / static_cast<double>(eval_set.size());
}

struct EvalAttack {
  enum class Kind { pgd, square };
  Kind kind = Kind::pgd;
  int square_budget = 300;

  std::string name() const {
    if (kind == Kind::pgd) return "pgd";
    return "square";
  }
};

// Fraction of samples still classified correctly after a per-sample attack.
// Samples the clean model already misclassifies count as failures: the
// fraction is over all eval samples. Each sample's attack is seeded with
// derive_seed(run_seed, sample_index), so the result is independent of
// batching and of the thread count.
inline double robust_accuracy(const Checkpoint& model, const Dataset& eval_set, const EvalAttack& attack,
                              const ThreatModel& tm, std::uint64_t run_seed, int threads = 1) {
  if (eval_set.size() == 0) throw Error("robust_accuracy: empty eval set");
  eval_set.validate();
  tm.validate();
  const std::size_t n = eval_set.size();
  std::vector<Tensor> attacked(n);

  const auto craft_range = [&](std::size_t lo, std::size_t hi) {
    for (std::size_t i = lo; i < hi; ++i) {
      const std::uint64_t seed = derive_seed(run_seed, i);
      const Tensor& img = eval_set.inputs[i];
      if (attack.kind == EvalAttack::Kind::pgd) {
        Shape batch_shape = {1};
        batch_shape.insert(batch_shape.end(), img.shape.begin(), img.shape.end());
        const Tensor x = Tape::constant(batch_shape, img.values);
        const Tensor adv = pgd_attack(model, x, AttackObjective::ce({eval_set.labels[i]}), tm, seed);
        attacked[i] = Tensor(img.shape, adv.values);
      } else {
        attacked[i] = square_attack(model, img, eval_set.labels[i], tm, attack.square_budget, seed);
      }
    }
  };

  if (threads <= 1 || n < 8) {
    craft_range(0, n);
  } else {
    const std::size_t workers = std::min<std::size_t>(threads, n);
    std::vector<std::future<void>> futs;
    for (std::size_t w = 0; w < workers; ++w) {
      const std::size_t lo = n * w / workers, hi = n * (w + 1) / workers;
      futs.push_back(std::async(std::launch::async, craft_range, lo, hi));
    }
    for (auto& f : futs) f.get();
  }

  const auto preds = predict(model, attacked);
  std::size_t correct = 0;
  for (std::size_t i = 0; i < n; ++i)
    if (preds[i] == eval_set.labels[i]) ++correct;
  return static_cast<double>(correct) / static_cast<double>(n);
}

}  // namespace rtta
