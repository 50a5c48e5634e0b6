#pragma once

#include <map>
#include <string>

#include "rtta/tensor.hpp"

namespace rtta {

enum class Architecture { mlp, cnn };

inline std::string to_string(Architecture a) { return a == Architecture::mlp ? "mlp" : "cnn"; }

// Desk-scale classifier description. MLP layers run affine -> BN -> ReLU with
// a bare affine head; the CNN runs 3x3 conv -> BN -> ReLU blocks followed by
// global average pooling and an affine head.
struct ModelSpec {
  Architecture architecture = Architecture::cnn;
  std::vector<int> mlp_widths;    // per-layer output widths, last == num_classes
  std::vector<int> cnn_channels;  // conv block output channels
  int num_classes = 0;
  Shape input_shape;  // {d} for mlp, {c,h,w} for either

  void validate() const {
    if (num_classes < 1) throw ConfigError("model: num_classes must be >= 1");
    if (input_shape.empty()) throw ConfigError("model: input_shape must be set");
    for (int d : input_shape)
      if (d < 1) throw ConfigError("model: input extents must be positive");
    if (architecture == Architecture::mlp) {
      if (mlp_widths.empty()) throw ConfigError("model: mlp needs at least one layer width");
      for (int w : mlp_widths)
        if (w < 1) throw ConfigError("model: mlp widths must be >= 1");
      if (mlp_widths.back() != num_classes)
        throw ConfigError("model: final mlp width " + std::to_string(mlp_widths.back()) +
                          " must equal num_classes " + std::to_string(num_classes));
    } else {
      if (cnn_channels.empty()) throw ConfigError("model: cnn needs at least one conv block");
      for (int c : cnn_channels)
        if (c < 1) throw ConfigError("model: cnn channels must be >= 1");
      if (input_shape.size() != 3) throw ConfigError("model: cnn input_shape must be {c,h,w}");
    }
  }

  bool operator==(const ModelSpec&) const = default;
};

enum class BnMode { frozen_eval, train, tta_adaptive };

inline std::string to_string(BnMode m) {
  switch (m) {
    case BnMode::frozen_eval: return "frozen_eval";
    case BnMode::train: return "train";
    case BnMode::tta_adaptive: return "tta_adaptive";
  }
  throw Error("unknown bn mode");
}

inline BnMode bn_mode_from_string(const std::string& s) {
  if (s == "frozen_eval") return BnMode::frozen_eval;
  if (s == "train") return BnMode::train;
  if (s == "tta_adaptive") return BnMode::tta_adaptive;
  throw ConfigError("unknown BN mode '" + s + "' (expected frozen_eval|train|tta_adaptive)");
}

// Per-layer batch-normalization running statistics. The normalization mode is
// chosen per forward pass; frozen_eval never touches these, the other modes
// update them as m <- (1-momentum)*m + momentum*batch_stat with the biased
// batch variance.
struct BatchNormState {
  std::vector<double> running_mean;
  std::vector<double> running_var;
  double momentum = 0.1;

  static BatchNormState fresh(int channels, double momentum = 0.1) {
    BatchNormState s;
    s.running_mean.assign(channels, 0.0);
    s.running_var.assign(channels, 1.0);
    s.momentum = momentum;
    return s;
  }

  void ema_update(const std::vector<double>& batch_mean, const std::vector<double>& batch_var) {
    for (std::size_t i = 0; i < running_mean.size(); ++i) {
      running_mean[i] = (1.0 - momentum) * running_mean[i] + momentum * batch_mean[i];
      running_var[i] = (1.0 - momentum) * running_var[i] + momentum * batch_var[i];
    }
  }

  bool operator==(const BatchNormState&) const = default;
};

using ParamMap = std::map<std::string, Tensor>;

// Model weights plus BN statistics. Plain value type: copies are deep, so a
// fork is just a copy.
struct Checkpoint {
  ModelSpec spec;
  ParamMap parameters;
  std::map<std::string, BatchNormState> bn_states;
  std::string provenance;
};

inline bool same_parameters(const Checkpoint& a, const Checkpoint& b) {
  if (a.parameters.size() != b.parameters.size()) return false;
  for (const auto& [name, t] : a.parameters) {
    auto it = b.parameters.find(name);
    if (it == b.parameters.end() || it->second.values != t.values || it->second.shape != t.shape) return false;
  }
  return true;
}

namespace detail {

inline int flat_input_dim(const ModelSpec& spec) {
  return static_cast<int>(numel(spec.input_shape));
}

inline Tensor init_uniform_fan_in(Shape shape, int fan_in, Rng& rng) {
  Tensor t = Tensor::zeros(std::move(shape));
  const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
  for (auto& v : t.values) v = rng.uniform(-bound, bound);
  return t;
}

}  // namespace detail

// Deterministic initialization: weights uniform in +-1/sqrt(fan_in), zero
// biases, BN at gamma=1, beta=0, running stats (0, 1).
inline Checkpoint build_model(const ModelSpec& spec, std::uint64_t seed, double bn_momentum = 0.1) {
  spec.validate();
  Rng rng(splitmix64(seed));
  Checkpoint ckpt;
  ckpt.spec = spec;
  if (spec.architecture == Architecture::mlp) {
    int prev = detail::flat_input_dim(spec);
    for (std::size_t i = 0; i < spec.mlp_widths.size(); ++i) {
      const int width = spec.mlp_widths[i];
      const std::string tag = "fc" + std::to_string(i);
      ckpt.parameters[tag + ".weight"] = detail::init_uniform_fan_in({prev, width}, prev, rng);
      ckpt.parameters[tag + ".bias"] = Tensor::zeros({width});
      const bool hidden = i + 1 < spec.mlp_widths.size();
      if (hidden) {
        const std::string bn = "bn" + std::to_string(i);
        ckpt.parameters[bn + ".gamma"] = Tensor::full({width}, 1.0);
        ckpt.parameters[bn + ".beta"] = Tensor::zeros({width});
        ckpt.bn_states[bn] = BatchNormState::fresh(width, bn_momentum);
      }
      prev = width;
    }
  } else {
    int prev = spec.input_shape[0];
    for (std::size_t i = 0; i < spec.cnn_channels.size(); ++i) {
      const int ch = spec.cnn_channels[i];
      const std::string tag = "conv" + std::to_string(i);
      ckpt.parameters[tag + ".weight"] = detail::init_uniform_fan_in({ch, prev, 3, 3}, prev * 9, rng);
      ckpt.parameters[tag + ".bias"] = Tensor::zeros({ch});
      const std::string bn = "bn" + std::to_string(i);
      ckpt.parameters[bn + ".gamma"] = Tensor::full({ch}, 1.0);
      ckpt.parameters[bn + ".beta"] = Tensor::zeros({ch});
      ckpt.bn_states[bn] = BatchNormState::fresh(ch, bn_momentum);
      prev = ch;
    }
    ckpt.parameters["head.weight"] = detail::init_uniform_fan_in({prev, spec.num_classes}, prev, rng);
    ckpt.parameters["head.bias"] = Tensor::zeros({spec.num_classes});
  }
  return ckpt;
}

// Parameters as differentiable tape leaves, for training paths.
inline ParamMap place_parameters(Tape& tape, const Checkpoint& ckpt) {
  ParamMap vars;
  for (const auto& [name, t] : ckpt.parameters) vars[name] = tape.variable(t.shape, t.values);
  return vars;
}

// Parameters as constants, for attack and evaluation paths.
inline ParamMap constant_parameters(const Checkpoint& ckpt) {
  ParamMap consts;
  for (const auto& [name, t] : ckpt.parameters) consts[name] = Tape::constant(t.shape, t.values);
  return consts;
}

// Runs the architecture on the tape. `params` may be tape variables or
// constants. In frozen_eval mode BN uses the checkpoint's running statistics
// and nothing is mutated; in train / tta_adaptive modes BN normalizes with
// batch statistics and the EMA update is written through `mutable_bn`
// (normally &ckpt.bn_states).
inline Tensor model_forward(Tape& tape, const Checkpoint& ckpt, const ParamMap& params,
                            const Tensor& batch, BnMode mode,
                            std::map<std::string, BatchNormState>* mutable_bn = nullptr) {
  const ModelSpec& spec = ckpt.spec;
  if (batch.shape.empty() || batch.shape[0] < 1)
    throw ShapeError("forward: batch must have a leading sample dimension");
  const Shape sample_shape(batch.shape.begin() + 1, batch.shape.end());
  if (numel(sample_shape) != numel(spec.input_shape))
    throw ShapeError("forward: batch sample shape " + shape_str(sample_shape) +
                     " does not match model input " + shape_str(spec.input_shape));
  if (mode != BnMode::frozen_eval && mutable_bn == nullptr)
    throw Error("forward: train/tta_adaptive modes need a mutable BN state map");

  const auto param = [&](const std::string& name) -> const Tensor& {
    auto it = params.find(name);
    if (it == params.end()) throw Error("forward: missing parameter " + name);
    return it->second;
  };

  const auto apply_bn = [&](const Tensor& x, const std::string& bn) -> Tensor {
    const Tensor& gamma = param(bn + ".gamma");
    const Tensor& beta = param(bn + ".beta");
    if (mode == BnMode::frozen_eval) {
      const auto& state = ckpt.bn_states.at(bn);
      return tape.batch_norm_eval(x, gamma, beta, state.running_mean, state.running_var);
    }
    std::vector<double> bmean, bvar;
    Tensor out = tape.batch_norm_batch(x, gamma, beta, &bmean, &bvar);
    mutable_bn->at(bn).ema_update(bmean, bvar);
    return out;
  };

  const int n = batch.shape[0];
  if (spec.architecture == Architecture::mlp) {
    Tensor h = tape.reshape(batch, {n, detail::flat_input_dim(spec)});
    for (std::size_t i = 0; i < spec.mlp_widths.size(); ++i) {
      const std::string tag = "fc" + std::to_string(i);
      h = tape.affine(h, param(tag + ".weight"), param(tag + ".bias"));
      if (i + 1 < spec.mlp_widths.size()) {
        h = apply_bn(h, "bn" + std::to_string(i));
        h = tape.relu(h);
      }
    }
    return h;
  }

  Tensor h = tape.reshape(batch, {n, spec.input_shape[0], spec.input_shape[1], spec.input_shape[2]});
  for (std::size_t i = 0; i < spec.cnn_channels.size(); ++i) {
    const std::string tag = "conv" + std::to_string(i);
    h = tape.conv2d(h, param(tag + ".weight"), param(tag + ".bias"));
    h = apply_bn(h, "bn" + std::to_string(i));
    h = tape.relu(h);
  }
  h = tape.global_avg_pool(h);
  return tape.affine(h, param("head.weight"), param("head.bias"));
}

// Logits for a batch; BN statistics are mutated only in train/tta modes.
inline Tensor forward(Checkpoint& ckpt, const Tensor& batch, BnMode mode) {
  Tape tape;
  return model_forward(tape, ckpt, constant_parameters(ckpt), batch, mode, &ckpt.bn_states);
}

// Pure evaluation forward: a function of (parameters, input) only.
inline Tensor forward_eval(const Checkpoint& ckpt, const Tensor& batch) {
  Tape tape;
  return model_forward(tape, ckpt, constant_parameters(ckpt), batch, BnMode::frozen_eval);
}

// Two independent deep copies of the same pretrained model; right after the
// fork their outputs agree on any input.
inline std::pair<Checkpoint, Checkpoint> fork_teacher_student(const Checkpoint& ckpt) {
  return {ckpt, ckpt};
}

}  // namespace rtta
