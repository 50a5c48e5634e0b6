#pragma once

#include <iostream>

#include "rtta/config.hpp"
#include "rtta/version.hpp"

namespace rtta {

// Exit codes: 0 success, 1 config error, 2 runtime/numerical failure,
// 3 verification failure.
enum ExitCode : int {
  kExitOk = 0,
  kExitConfigError = 1,
  kExitRuntimeError = 2,
  kExitVerificationFailure = 3,
};

namespace clidetail {

// Every run directory is self-describing: effective config plus version.
inline void echo_run_metadata(const ExperimentConfig& cfg) {
  const std::filesystem::path dir(cfg.run.out_dir);
  write_file_atomic(dir / "config.effective.ini", emit_config(cfg));
  write_file_atomic(dir / "VERSION", std::string(kVersion) + "\n");
}

inline Dataset build_source_dataset(const ExperimentConfig& cfg) {
  return generate_synthetic(cfg.model.num_classes, cfg.data.samples_per_class, cfg.image_extent,
                            derive_seed(cfg.run.seed, 0x50BCE));
}

// Fresh clean draws, distinct from the source set, corrupted to the
// configured severity.
inline Dataset build_target_pool(const ExperimentConfig& cfg) {
  const Dataset clean = generate_synthetic(cfg.model.num_classes, cfg.data.target_samples_per_class,
                                           cfg.image_extent, derive_seed(cfg.run.seed, 0x7A26E7));
  return make_target_domain(clean, cfg.data.severity, derive_seed(cfg.run.seed, 0xC0226));
}

inline std::pair<Dataset, Dataset> build_adapt_eval_split(const ExperimentConfig& cfg) {
  const Dataset pool = build_target_pool(cfg);
  SplitSpec spec{cfg.data.split, derive_seed(cfg.run.seed, 0x5B117), cfg.data.stratified};
  auto parts = split_dataset(pool, spec);
  if (parts.size() < 2) throw ConfigError("data.split must produce at least two parts");
  return {std::move(parts[0]), std::move(parts[1])};
}

inline Checkpoint require_checkpoint(const ExperimentConfig& cfg) {
  if (cfg.io.checkpoint_in.empty())
    throw ConfigError("this command needs io.checkpoint_in (a pretrained or adapted checkpoint)");
  return load_checkpoint(cfg.io.checkpoint_in);
}

inline int cmd_pretrain(const ExperimentConfig& cfg) {
  const Dataset source = build_source_dataset(cfg);
  const Checkpoint model = pretrain_source(cfg.model, source, cfg.pretrain);
  const auto path = std::filesystem::path(cfg.run.out_dir) / "pretrained.ckpt";
  save_checkpoint(path, model);
  const double acc = clean_accuracy(model, source);
  std::cout << "pretrained " << to_string(cfg.model.architecture) << " on " << source.size()
            << " source samples; train accuracy " << format_double(acc) << "\n"
            << "checkpoint: " << path.string() << "\n";
  return kExitOk;
}

inline int cmd_adapt(const ExperimentConfig& cfg) {
  const Checkpoint pretrained = require_checkpoint(cfg);
  auto [target, eval_set] = build_adapt_eval_split(cfg);
  const AdaptationResult res = run_adaptation(pretrained, target, eval_set, cfg.adaptation);

  const std::filesystem::path dir(cfg.run.out_dir);
  save_checkpoint(dir / "student.ckpt", res.student);
  save_checkpoint(dir / "teacher.ckpt", res.teacher);
  if (!res.log.records.empty())
    dynamics_emit(res.log, dir / "dynamics.csv", dir / "dynamics.jsonl");

  std::cout << "adapted with " << to_string(cfg.adaptation.method.method)
            << " (beta=" << format_double(cfg.adaptation.method.beta) << ") for "
            << res.log.records.size() << " epochs";
  if (res.log.diverged) std::cout << " [diverged; rolled back to last good epoch]";
  if (!res.log.records.empty()) {
    const auto& last = res.log.records.back();
    std::cout << "; final clean " << format_double(last.clean_acc) << ", robust "
              << format_double(last.robust_acc);
  }
  std::cout << "\ncheckpoint: " << (dir / "student.ckpt").string() << "\n";
  return kExitOk;
}

inline int cmd_eval(const ExperimentConfig& cfg) {
  const Checkpoint model = require_checkpoint(cfg);
  Dataset eval_set;
  if (!cfg.io.dataset_in.empty()) {
    eval_set = load_dataset(cfg.io.dataset_in);
  } else {
    eval_set = build_adapt_eval_split(cfg).second;
  }
  const EvalReport report = evaluate_model(model, eval_set, cfg.eval_attacks(), cfg.adaptation.eval_threat(),
                                           derive_seed(cfg.run.seed, 0xE7A1), cfg.run.threads);
  const ReportRow row{to_string(cfg.adaptation.method.method), cfg.adaptation.method.beta, report};
  const std::filesystem::path dir(cfg.run.out_dir);
  write_file_atomic(dir / "report.csv", reports_to_csv(std::span<const ReportRow>(&row, 1)));
  write_file_atomic(dir / "report.jsonl", reports_to_jsonl(std::span<const ReportRow>(&row, 1)));
  std::cout << "clean accuracy " << format_double(report.clean_acc) << " on " << report.n_samples
            << " samples (severity " << report.severity << ")\n";
  for (const auto& [attack, acc] : report.robust_acc)
    std::cout << "robust accuracy [" << attack << "] " << format_double(acc) << "\n";
  return kExitOk;
}

inline int cmd_sweep(const ExperimentConfig& cfg) {
  const Checkpoint pretrained = require_checkpoint(cfg);
  SweepTable table;
  switch (cfg.sweep.axis) {
    case SweepAxis::beta: {
      auto [target, eval_set] = build_adapt_eval_split(cfg);
      table = beta_sweep(pretrained, target, eval_set, cfg.sweep.methods, cfg.sweep.betas, cfg.adaptation);
      break;
    }
    case SweepAxis::severity: {
      ExperimentConfig clean_cfg = cfg;
      clean_cfg.data.severity = 0;
      auto [target, eval_set] = build_adapt_eval_split(clean_cfg);
      table = severity_sweep(pretrained, target, eval_set, cfg.sweep.methods, cfg.sweep.severities,
                             cfg.adaptation, derive_seed(cfg.run.seed, 0xC0226));
      break;
    }
    case SweepAxis::split_fraction: {
      ExperimentConfig clean_cfg = cfg;
      clean_cfg.data.severity = 0;
      const Dataset pool = build_target_pool(clean_cfg);
      table = split_sweep(pretrained, pool, cfg.sweep.methods, cfg.sweep.split_fractions,
                          cfg.data.severity, cfg.adaptation, derive_seed(cfg.run.seed, 0xC0226));
      break;
    }
  }
  const std::filesystem::path dir(cfg.run.out_dir);
  write_file_atomic(dir / "sweep.csv", sweep_to_csv(table));
  std::cout << "sweep over " << to_string(table.axis) << ": " << table.cells.size() << " cells\n";
  for (const auto& cell : table.cells)
    std::cout << "  " << to_string(cell.method) << " @ " << format_double(cell.axis_value) << ": clean "
              << format_double(cell.report.clean_acc) << ", robust(pgd) "
              << format_double(cell.report.robust_acc.at("pgd")) << (cell.diverged ? " [diverged]" : "")
              << "\n";
  return kExitOk;
}

inline int cmd_dynamics(const ExperimentConfig& cfg) {
  if (cfg.io.log_in.empty()) throw ConfigError("dynamics needs io.log_in (a dynamics .jsonl or .csv file)");
  const std::string text = read_file(cfg.io.log_in);
  const DynamicsLog log = cfg.io.log_in.ends_with(".csv") ? dynamics_from_csv(text)
                                                          : dynamics_from_jsonl(text);
  const std::filesystem::path dir(cfg.run.out_dir);
  dynamics_emit(log, dir / "dynamics.csv", dir / "dynamics.jsonl");
  std::cout << "dynamics: " << log.records.size() << " epochs";
  if (!log.records.empty()) {
    const auto& last = log.records.back();
    std::cout << "; final clean " << format_double(last.clean_acc) << ", robust "
              << format_double(last.robust_acc);
  }
  std::cout << "\n";
  return kExitOk;
}

// Numerically verifies the gradient decomposition of both regularizers over
// seeded random (model, x, x_hat) triples, and cross-checks the totals
// against finite differences on a subset.
inline int cmd_verify_prop(const ExperimentConfig& cfg) {
  const int trials = 120;
  const int fd_trials = 6;
  const double eps = std::max(cfg.adaptation.threat.epsilon, 1e-3);

  double worst_self_residual = 0.0;
  double worst_teach_reference = 0.0;
  double worst_teach_residual = 0.0;
  double worst_fd_rel = 0.0;
  int failures = 0;

  for (int t = 0; t < trials; ++t) {
    const std::uint64_t seed = derive_seed(cfg.run.seed, 0xBE21F + static_cast<std::uint64_t>(t));
    Rng rng(seed);

    ModelSpec spec;
    if (t % 2 == 0) {
      spec.architecture = Architecture::mlp;
      spec.num_classes = 3;
      spec.input_shape = {3, 4, 4};
      spec.mlp_widths = {8, 3};
    } else {
      spec.architecture = Architecture::cnn;
      spec.num_classes = 3;
      spec.input_shape = {3, 4, 4};
      spec.cnn_channels = {4};
    }
    const Checkpoint student = build_model(spec, derive_seed(seed, 1));
    const Checkpoint teacher = build_model(spec, derive_seed(seed, 2));

    Tensor x = Tensor::zeros({2, 3, 4, 4});
    for (auto& v : x.values) v = rng.uniform();
    Tensor x_hat = Tape::detach(x);
    for (auto& v : x_hat.values) v = std::clamp(v + rng.uniform(-eps, eps), 0.0, 1.0);

    const GradDecomposition self = grad_decompose_self(student, x, x_hat);
    const GradDecomposition teach = grad_decompose_teach(teacher, student, x, x_hat);
    worst_self_residual = std::max(worst_self_residual, self.max_residual);
    worst_teach_residual = std::max(worst_teach_residual, teach.max_residual);
    worst_teach_reference = std::max(worst_teach_reference, teach.reference_max_abs);
    if (!self.additive || !teach.additive || teach.reference_max_abs != 0.0) ++failures;

    if (t < fd_trials) {
      // Totals against the central-difference oracle, parameter by parameter.
      for (const auto& [name, grad] : self.total) {
        const Tensor& base = student.parameters.at(name);
        const auto fd = finite_difference_grad(
            [&](std::span<const double> v) {
              Checkpoint mod = student;
              mod.parameters[name].values.assign(v.begin(), v.end());
              return r_self(mod, x, x_hat);
            },
            base.values, 1e-5);
        worst_fd_rel = std::max(worst_fd_rel, max_rel_error(grad, fd));
      }
      for (const auto& [name, grad] : teach.total) {
        const Tensor& base = student.parameters.at(name);
        const auto fd = finite_difference_grad(
            [&](std::span<const double> v) {
              Checkpoint mod = student;
              mod.parameters[name].values.assign(v.begin(), v.end());
              return r_teach(teacher, mod, x, x_hat);
            },
            base.values, 1e-5);
        worst_fd_rel = std::max(worst_fd_rel, max_rel_error(grad, fd));
      }
      if (worst_fd_rel >= 1e-4) ++failures;
    }
  }

  std::string report;
  report += "gradient decomposition check over " + std::to_string(trials) + " seeded triples\n";
  report += "self-consistency: max additivity residual " + format_double(worst_self_residual) +
            " (tolerance " + format_double(kDecompositionTolerance) + ")\n";
  report += "teacher-anchored: max reference-side magnitude " + format_double(worst_teach_reference) +
            " (must be exactly 0)\n";
  report += "teacher-anchored: max additivity residual " + format_double(worst_teach_residual) + "\n";
  report += "finite-difference cross-check (" + std::to_string(fd_trials) + " triples): max rel error " +
            format_double(worst_fd_rel) + " (tolerance 0.0001)\n";
  report += failures == 0 ? "PASS\n" : "FAIL (" + std::to_string(failures) + " trials out of tolerance)\n";
  std::cout << report;
  write_file_atomic(std::filesystem::path(cfg.run.out_dir) / "verify_prop.txt", report);
  return failures == 0 ? kExitOk : kExitVerificationFailure;
}

}  // namespace clidetail

// Dispatches one subcommand. Throws ConfigError for config problems; other
// rtta::Error subclasses indicate runtime failures.
inline int run_command(const std::string& cmd, const ExperimentConfig& cfg) {
  cfg.validate();
  clidetail::echo_run_metadata(cfg);
  if (cmd == "pretrain") return clidetail::cmd_pretrain(cfg);
  if (cmd == "adapt") return clidetail::cmd_adapt(cfg);
  if (cmd == "eval") return clidetail::cmd_eval(cfg);
  if (cmd == "sweep") return clidetail::cmd_sweep(cfg);
  if (cmd == "dynamics") return clidetail::cmd_dynamics(cfg);
  if (cmd == "verify-prop") return clidetail::cmd_verify_prop(cfg);
  throw ConfigError("unknown command '" + cmd +
                    "' (expected pretrain|adapt|eval|sweep|dynamics|verify-prop)");
}

}  // namespace rtta
