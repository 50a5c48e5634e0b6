#pragma once

#include "rtta/tensor.hpp"

namespace rtta {

// Compound target-domain shift: Gaussian noise, then Gaussian blur, then
// color jitter. Severity indexes the fixed parameter table below; severity 0
// is the exact identity.
struct CorruptionSpec {
  int severity = 0;
  double noise_sigma = 0.0;
  int blur_kernel = 1;
  double jitter_strength = 0.0;
  double hue = 0.0;  // fixed at 0
  std::uint64_t seed = 0;

  static CorruptionSpec for_severity(int severity, std::uint64_t seed) {
    CorruptionSpec s;
    s.severity = severity;
    s.seed = seed;
    switch (severity) {
      case 0: break;
      case 1:
        s.noise_sigma = 0.03;
        s.blur_kernel = 3;
        s.jitter_strength = 0.1;
        break;
      case 2:
        s.noise_sigma = 0.06;
        s.blur_kernel = 5;
        s.jitter_strength = 0.2;
        break;
      default:
        throw ConfigError("corruption: severity must be 0, 1, or 2; got " + std::to_string(severity));
    }
    return s;
  }

  void validate() const {
    const CorruptionSpec want = for_severity(severity, seed);
    if (noise_sigma != want.noise_sigma || blur_kernel != want.blur_kernel ||
        jitter_strength != want.jitter_strength || hue != 0.0)
      throw ConfigError("corruption: parameters do not match the severity-" + std::to_string(severity) +
                        " table");
  }
};

namespace detail {

inline void check_image(const Tensor& x, const char* who) {
  if (x.shape.size() != 3) throw ShapeError(std::string(who) + ": expected an image [c,h,w]");
  if (x.shape[0] != 1 && x.shape[0] != 3)
    throw ShapeError(std::string(who) + ": expected 1 or 3 channels, got " + std::to_string(x.shape[0]));
}

inline double clamp01(double v) { return std::clamp(v, 0.0, 1.0); }

// Rec.601 luminance; for grayscale the single channel is its own luminance.
inline double luminance(const Tensor& x, int y, int xx) {
  const int h = x.shape[1], w = x.shape[2];
  if (x.shape[0] == 1) return x.values[static_cast<std::size_t>(y) * w + xx];
  const std::size_t plane = static_cast<std::size_t>(h) * w;
  const std::size_t i = static_cast<std::size_t>(y) * w + xx;
  return 0.299 * x.values[i] + 0.587 * x.values[plane + i] + 0.114 * x.values[2 * plane + i];
}

}  // namespace detail

// x + N(0, sigma^2) per element, clamped to [0,1].
inline Tensor gaussian_noise(const Tensor& x, double sigma, std::uint64_t seed) {
  detail::check_image(x, "gaussian_noise");
  if (!(sigma >= 0.0)) throw ConfigError("gaussian_noise: sigma must be nonnegative");
  if (sigma == 0.0) return Tape::detach(x);
  Rng rng(derive_seed(seed, 0x4015E));
  Tensor out = Tape::detach(x);
  for (auto& v : out.values) v = detail::clamp01(v + sigma * rng.normal());
  return out;
}

// Per-channel 2-D convolution with a normalized Gaussian kernel, reflect
// padded (mirror without repeating the edge sample). The kernel sigma follows
// the usual size heuristic sigma = 0.3*((k-1)/2 - 1) + 0.8; taps are the 1-D
// exp(-(i-c)^2 / (2 sigma^2)) profile normalized to unit sum, and the 2-D
// kernel is their outer product.
inline Tensor gaussian_blur(const Tensor& x, int kernel_size) {
  detail::check_image(x, "gaussian_blur");
  if (kernel_size < 1 || kernel_size % 2 == 0)
    throw ConfigError("gaussian_blur: kernel size must be odd and >= 1, got " + std::to_string(kernel_size));
  if (kernel_size == 1) return Tape::detach(x);

  const int k = kernel_size, c = x.shape[0], h = x.shape[1], w = x.shape[2];
  const int half = k / 2;
  const double sigma = 0.3 * ((k - 1) * 0.5 - 1.0) + 0.8;
  std::vector<double> taps(k);
  double sum = 0.0;
  for (int i = 0; i < k; ++i) {
    taps[i] = std::exp(-0.5 * (i - half) * (i - half) / (sigma * sigma));
    sum += taps[i];
  }
  for (auto& t : taps) t /= sum;

  const auto reflect = [](int i, int n) {
    if (i < 0) i = -i;
    if (i >= n) i = 2 * n - 2 - i;
    return i;
  };

  Tensor out = Tensor::zeros(x.shape);
  for (int ch = 0; ch < c; ++ch) {
    const std::size_t plane = static_cast<std::size_t>(ch) * h * w;
    for (int y = 0; y < h; ++y)
      for (int xx = 0; xx < w; ++xx) {
        double acc = 0.0;
        for (int dy = -half; dy <= half; ++dy) {
          const int sy = reflect(y + dy, h);
          for (int dx = -half; dx <= half; ++dx) {
            const int sx = reflect(xx + dx, w);
            acc += taps[dy + half] * taps[dx + half] *
                   x.values[plane + static_cast<std::size_t>(sy) * w + sx];
          }
        }
        out.values[plane + static_cast<std::size_t>(y) * w + xx] = acc;
      }
  }
  return out;
}

// Deterministic jitter building blocks; each clamps back to [0,1].
inline Tensor adjust_brightness(const Tensor& x, double factor) {
  detail::check_image(x, "adjust_brightness");
  Tensor out = Tape::detach(x);
  for (auto& v : out.values) v = detail::clamp01(factor * v);
  return out;
}

// Pivot is the per-image mean luminance of the current image.
inline Tensor adjust_contrast(const Tensor& x, double factor) {
  detail::check_image(x, "adjust_contrast");
  const int h = x.shape[1], w = x.shape[2];
  double pivot = 0.0;
  for (int y = 0; y < h; ++y)
    for (int xx = 0; xx < w; ++xx) pivot += detail::luminance(x, y, xx);
  pivot /= static_cast<double>(h) * w;
  Tensor out = Tape::detach(x);
  for (auto& v : out.values) v = detail::clamp01(pivot + factor * (v - pivot));
  return out;
}

// Blends each pixel toward its own Rec.601 luminance; identity on grayscale.
inline Tensor adjust_saturation(const Tensor& x, double factor) {
  detail::check_image(x, "adjust_saturation");
  const int c = x.shape[0], h = x.shape[1], w = x.shape[2];
  Tensor out = Tape::detach(x);
  const std::size_t plane = static_cast<std::size_t>(h) * w;
  for (int y = 0; y < h; ++y)
    for (int xx = 0; xx < w; ++xx) {
      const double lum = detail::luminance(x, y, xx);
      const std::size_t i = static_cast<std::size_t>(y) * w + xx;
      for (int ch = 0; ch < c; ++ch)
        out.values[ch * plane + i] = detail::clamp01(lum + factor * (x.values[ch * plane + i] - lum));
    }
  return out;
}

// Brightness, contrast, and saturation factors drawn uniformly from
// [1-a, 1+a], applied in that seeded order; hue is fixed to 0.
inline Tensor color_jitter(const Tensor& x, double strength, std::uint64_t seed) {
  detail::check_image(x, "color_jitter");
  if (!(strength >= 0.0 && strength < 1.0))
    throw ConfigError("color_jitter: strength must be in [0,1), got " + std::to_string(strength));
  if (strength == 0.0) return Tape::detach(x);
  Rng rng(derive_seed(seed, 0x1177E2));
  const double b = rng.uniform(1.0 - strength, 1.0 + strength);
  const double c = rng.uniform(1.0 - strength, 1.0 + strength);
  const double s = rng.uniform(1.0 - strength, 1.0 + strength);
  return adjust_saturation(adjust_contrast(adjust_brightness(x, b), c), s);
}

// jitter(blur(noise(x))); severity 0 returns the input bit-identically.
inline Tensor apply_corruption(const Tensor& x, const CorruptionSpec& spec) {
  spec.validate();
  if (spec.severity == 0) return Tape::detach(x);
  Tensor out = gaussian_noise(x, spec.noise_sigma, derive_seed(spec.seed, 1));
  out = gaussian_blur(out, spec.blur_kernel);
  return color_jitter(out, spec.jitter_strength, derive_seed(spec.seed, 2));
}

}  // namespace rtta
