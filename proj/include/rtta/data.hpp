#pragma once

#include "rtta/corruptions.hpp"

namespace rtta {

struct DomainTag {
  enum class Kind { source, target };
  Kind kind = Kind::source;
  int severity = 0;

  bool operator==(const DomainTag&) const = default;
};

inline std::string to_string(const DomainTag& d) {
  return d.kind == DomainTag::Kind::source ? "source" : "target(" + std::to_string(d.severity) + ")";
}

// Image classification set. Labels are stored even for unsupervised use;
// test-time paths receive an UnlabeledView that cannot reach them.
struct Dataset {
  std::vector<Tensor> inputs;  // each [c,h,w], values in [0,1]
  std::vector<int> labels;
  DomainTag domain;
  int num_classes = 0;

  std::size_t size() const { return inputs.size(); }

  void validate() const {
    if (inputs.size() != labels.size())
      throw Error("dataset: " + std::to_string(inputs.size()) + " inputs vs " +
                  std::to_string(labels.size()) + " labels");
    for (int y : labels)
      if (y < 0 || y >= num_classes) throw Error("dataset: label " + std::to_string(y) + " out of range");
  }

  Shape image_shape() const {
    if (inputs.empty()) throw Error("dataset: empty");
    return inputs[0].shape;
  }
};

// Inputs-only view handed to unsupervised adaptation paths. There is no
// label accessor on purpose: the compiler enforces label withholding.
class UnlabeledView {
 public:
  explicit UnlabeledView(const Dataset& d) : ds_(&d) {}

  std::size_t size() const { return ds_->size(); }
  const Tensor& input(std::size_t i) const { return ds_->inputs.at(i); }
  int num_classes() const { return ds_->num_classes; }
  Shape image_shape() const { return ds_->image_shape(); }

 private:
  const Dataset* ds_;
};

// Stacks the selected images into one [n,c,h,w] batch tensor.
template <class Source>
inline Tensor make_batch(const Source& src, std::span<const std::size_t> indices) {
  if (indices.empty()) throw Error("make_batch: empty index list");
  const Shape img = src.input(indices[0]).shape;
  Shape bs = {static_cast<int>(indices.size())};
  bs.insert(bs.end(), img.begin(), img.end());
  Tensor batch = Tensor::zeros(bs);
  const std::size_t stride = numel(img);
  for (std::size_t r = 0; r < indices.size(); ++r) {
    const Tensor& im = src.input(indices[r]);
    if (im.shape != img) throw ShapeError("make_batch: ragged image shapes");
    std::copy(im.values.begin(), im.values.end(), batch.values.begin() + static_cast<std::ptrdiff_t>(r * stride));
  }
  return batch;
}

inline Tensor make_batch(const Dataset& d, std::span<const std::size_t> indices) {
  struct Adapter {
    const Dataset* d;
    const Tensor& input(std::size_t i) const { return d->inputs.at(i); }
  } a{&d};
  return make_batch<Adapter>(a, indices);
}

inline std::vector<int> labels_for(const Dataset& d, std::span<const std::size_t> indices) {
  std::vector<int> out;
  out.reserve(indices.size());
  for (auto i : indices) out.push_back(d.labels.at(i));
  return out;
}

// ---------------------------------------------------------------------------
// Synthetic source data
// ---------------------------------------------------------------------------

// Class-conditional oriented gratings with a class color tint plus per-sample
// phase and texture noise. Classes differ in orientation, spatial frequency,
// and tint, so both the texture path (hurt by blur/noise) and the color path
// (hurt by jitter) carry label evidence.
inline Dataset generate_synthetic(int num_classes, int samples_per_class, int image_extent,
                                  std::uint64_t seed) {
  if (num_classes < 2) throw ConfigError("generate_synthetic: need at least 2 classes");
  if (samples_per_class < 1) throw ConfigError("generate_synthetic: samples_per_class must be >= 1");
  if (image_extent < 4 || image_extent > 32)
    throw ConfigError("generate_synthetic: image extent must be in [4,32]");

  const int channels = 3;
  const int e = image_extent;

  // Class identity is a fixed function of the class index, independent of the
  // dataset seed: two draws with different seeds are fresh samples from the
  // same class-conditional distribution, which is what source/target pools
  // need. The seed only drives per-sample phase and texture noise.
  struct ClassTemplate {
    double theta, freq;
    double base[3], tint[3];
  };
  std::vector<ClassTemplate> templates(num_classes);
  for (int k = 0; k < num_classes; ++k) {
    auto& t = templates[k];
    t.theta = 3.14159265358979323846 * k / num_classes;
    t.freq = 0.75 + 0.25 * (k % 3);
    Rng class_rng(derive_seed(0xC1A55FACE, static_cast<std::uint64_t>(k)));
    for (int c = 0; c < 3; ++c) {
      t.base[c] = class_rng.uniform(0.42, 0.58);
      t.tint[c] = class_rng.uniform(0.4, 1.0);
    }
  }

  // Two evidence channels per class, deliberately split along robustness.
  // The grating + tint are wide-margin evidence (per-pixel amplitude well
  // above an 8/255 ball) but unreliable per sample (amplitude jitter, texture
  // noise), so robust classification is possible yet imperfect. The pixel-
  // parity cue is the opposite: amplitude inside the attack budget, but
  // noise-free and always present, so it has the highest SNR and plain CE
  // training leans on it. PGD flips it at will, and blur erases it in
  // corrupted target domains; adversarial adaptation has to shift reliance
  // onto the gratings.
  constexpr double kWaveAmp = 0.14;
  constexpr double kWaveJitterLo = 0.5;
  constexpr double kWaveJitterHi = 1.5;
  constexpr double kTextureStd = 0.14;
  constexpr double kColorShiftStd = 0.05;
  constexpr double kShortcutAmp = 0.02;

  Dataset ds;
  ds.num_classes = num_classes;
  ds.domain = {DomainTag::Kind::source, 0};
  ds.inputs.reserve(static_cast<std::size_t>(num_classes) * samples_per_class);
  for (int k = 0; k < num_classes; ++k) {
    const auto& t = templates[k];
    for (int s = 0; s < samples_per_class; ++s) {
      Rng rng(derive_seed(seed, 0x5A3E1 + static_cast<std::uint64_t>(k) * samples_per_class + s));
      const double phase = rng.uniform(0.0, 2.0 * 3.14159265358979323846);
      const double wave_gain = rng.uniform(kWaveJitterLo, kWaveJitterHi);
      double shift[3];
      for (auto& sh : shift) sh = kColorShiftStd * rng.normal();
      // Class signature of the parity cue: a distinct per-channel sign
      // pattern for up to 8 classes.
      double cue_sign[3];
      for (int c = 0; c < 3; ++c) cue_sign[c] = ((k >> c) & 1) ? 1.0 : -1.0;

      Tensor img = Tensor::zeros({channels, e, e});
      for (int y = 0; y < e; ++y)
        for (int x = 0; x < e; ++x) {
          const double u = static_cast<double>(x) / (e - 1);
          const double v = static_cast<double>(y) / (e - 1);
          const double wave =
              std::sin(2.0 * 3.14159265358979323846 * t.freq * (u * std::cos(t.theta) + v * std::sin(t.theta)) +
                       phase);
          const double parity = ((y + x) & 1) ? 1.0 : -1.0;
          for (int c = 0; c < channels; ++c) {
            const double val = t.base[c] + shift[c] + wave_gain * kWaveAmp * t.tint[c] * wave +
                               kShortcutAmp * cue_sign[c] * parity + kTextureStd * rng.normal();
            img.values[(static_cast<std::size_t>(c) * e + y) * e + x] = std::clamp(val, 0.0, 1.0);
          }
        }
      ds.inputs.push_back(std::move(img));
      ds.labels.push_back(k);
    }
  }
  return ds;
}

// Applies the severity's compound corruption per image with per-image seeds;
// labels ride along untouched.
inline Dataset make_target_domain(const Dataset& src, int severity, std::uint64_t seed) {
  Dataset out;
  out.labels = src.labels;
  out.num_classes = src.num_classes;
  out.domain = {DomainTag::Kind::target, severity};
  out.inputs.reserve(src.size());
  for (std::size_t i = 0; i < src.size(); ++i) {
    const auto spec = CorruptionSpec::for_severity(severity, derive_seed(seed, i));
    out.inputs.push_back(apply_corruption(src.inputs[i], spec));
  }
  return out;
}

struct SplitSpec {
  std::vector<double> fractions;
  std::uint64_t seed = 0;
  bool stratified = true;

  void validate() const {
    if (fractions.empty()) throw ConfigError("split: need at least one fraction");
    double sum = 0.0;
    for (double f : fractions) {
      if (!(f > 0.0)) throw ConfigError("split: fractions must be positive");
      sum += f;
    }
    if (std::abs(sum - 1.0) > 1e-9)
      throw ConfigError("split: fractions sum to " + std::to_string(sum) + ", expected 1");
  }
};

namespace detail {

// Largest-remainder allocation of n items to the fractions; deterministic
// tie-break by split index.
inline std::vector<std::size_t> allocate_counts(std::size_t n, const std::vector<double>& fractions) {
  std::vector<std::size_t> counts(fractions.size());
  std::vector<std::pair<double, std::size_t>> remainders;
  std::size_t assigned = 0;
  for (std::size_t j = 0; j < fractions.size(); ++j) {
    const double exact = fractions[j] * static_cast<double>(n);
    counts[j] = static_cast<std::size_t>(exact);
    assigned += counts[j];
    remainders.push_back({exact - static_cast<double>(counts[j]), j});
  }
  std::stable_sort(remainders.begin(), remainders.end(),
                   [](const auto& a, const auto& b) { return a.first > b.first; });
  for (std::size_t r = 0; assigned < n; ++r, ++assigned) counts[remainders[r % remainders.size()].second]++;
  return counts;
}

}  // namespace detail

// Disjoint, exhaustive, seed-deterministic partition; stratified splitting
// shuffles and allocates within each class.
inline std::vector<Dataset> split_dataset(const Dataset& d, const SplitSpec& spec) {
  spec.validate();
  d.validate();
  std::vector<std::vector<std::size_t>> split_indices(spec.fractions.size());

  const auto allocate = [&](std::vector<std::size_t>& pool, std::uint64_t salt) {
    Rng rng(derive_seed(spec.seed, salt));
    rng.shuffle(pool);
    const auto counts = detail::allocate_counts(pool.size(), spec.fractions);
    std::size_t cursor = 0;
    for (std::size_t j = 0; j < counts.size(); ++j) {
      if (spec.stratified && counts[j] == 0)
        throw ConfigError("split: fraction " + std::to_string(spec.fractions[j]) +
                          " leaves a class without samples");
      for (std::size_t c = 0; c < counts[j]; ++c) split_indices[j].push_back(pool[cursor++]);
    }
  };

  if (spec.stratified) {
    for (int k = 0; k < d.num_classes; ++k) {
      std::vector<std::size_t> pool;
      for (std::size_t i = 0; i < d.size(); ++i)
        if (d.labels[i] == k) pool.push_back(i);
      allocate(pool, 0x57A7 + static_cast<std::uint64_t>(k));
    }
  } else {
    std::vector<std::size_t> pool(d.size());
    std::iota(pool.begin(), pool.end(), 0);
    allocate(pool, 0x57A7);
  }

  std::vector<Dataset> out;
  for (auto& idx : split_indices) {
    std::sort(idx.begin(), idx.end());
    Dataset part;
    part.domain = d.domain;
    part.num_classes = d.num_classes;
    for (auto i : idx) {
      part.inputs.push_back(d.inputs[i]);
      part.labels.push_back(d.labels[i]);
    }
    out.push_back(std::move(part));
  }
  return out;
}

}  // namespace rtta
