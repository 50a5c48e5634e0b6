#pragma once

#include <cstdio>

#include <json.hpp>

#include "rtta/adaptation.hpp"
#include "rtta/serialize.hpp"

namespace rtta {

// Shortest exact decimal form; doubles survive the text round trip bit-exactly.
inline std::string format_double(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

// ---------------------------------------------------------------------------
// Dynamics log files
// ---------------------------------------------------------------------------

inline constexpr const char* kDynamicsCsvHeader =
    "epoch,lr,loss_acc_term,loss_rob_term,clean_acc,robust_acc,teacher_clean_acc";

inline std::string dynamics_to_csv(const DynamicsLog& log) {
  std::string out = std::string(kDynamicsCsvHeader) + "\n";
  for (const auto& r : log.records) {
    out += std::to_string(r.epoch) + "," + format_double(r.lr) + "," + format_double(r.loss_acc_term) +
           "," + format_double(r.loss_rob_term) + "," + format_double(r.clean_acc) + "," +
           format_double(r.robust_acc) + "," + format_double(r.teacher_clean_acc) + "\n";
  }
  return out;
}

inline std::string dynamics_to_jsonl(const DynamicsLog& log) {
  std::string out;
  for (const auto& r : log.records) {
    nlohmann::json j{{"epoch", r.epoch},
                     {"lr", r.lr},
                     {"loss_acc_term", r.loss_acc_term},
                     {"loss_rob_term", r.loss_rob_term},
                     {"clean_acc", r.clean_acc},
                     {"robust_acc", r.robust_acc},
                     {"teacher_clean_acc", r.teacher_clean_acc}};
    out += j.dump() + "\n";
  }
  return out;
}

inline DynamicsLog dynamics_from_csv(const std::string& text) {
  DynamicsLog log;
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line) || line != kDynamicsCsvHeader)
    throw IoError("dynamics csv: bad header '" + line + "'");
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    DynamicsRecord r;
    std::istringstream ls(line);
    std::string field;
    const auto next = [&]() {
      if (!std::getline(ls, field, ',')) throw IoError("dynamics csv: short row '" + line + "'");
      return field;
    };
    r.epoch = std::stoi(next());
    r.lr = std::stod(next());
    r.loss_acc_term = std::stod(next());
    r.loss_rob_term = std::stod(next());
    r.clean_acc = std::stod(next());
    r.robust_acc = std::stod(next());
    r.teacher_clean_acc = std::stod(next());
    log.records.push_back(r);
  }
  return log;
}

inline DynamicsLog dynamics_from_jsonl(const std::string& text) {
  DynamicsLog log;
  std::istringstream in(text);
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto j = nlohmann::json::parse(line);
    DynamicsRecord r;
    r.epoch = j.at("epoch").get<int>();
    r.lr = j.at("lr").get<double>();
    r.loss_acc_term = j.at("loss_acc_term").get<double>();
    r.loss_rob_term = j.at("loss_rob_term").get<double>();
    r.clean_acc = j.at("clean_acc").get<double>();
    r.robust_acc = j.at("robust_acc").get<double>();
    r.teacher_clean_acc = j.at("teacher_clean_acc").get<double>();
    log.records.push_back(r);
  }
  return log;
}

// Writes the plot-ready CSV and JSONL forms of a dynamics log.
inline void dynamics_emit(const DynamicsLog& log, const std::filesystem::path& csv_path,
                          const std::filesystem::path& jsonl_path) {
  if (log.records.empty()) throw Error("dynamics_emit: empty log");
  for (std::size_t i = 1; i < log.records.size(); ++i)
    if (log.records[i].epoch <= log.records[i - 1].epoch)
      throw Error("dynamics_emit: epoch column must be strictly increasing");
  write_file_atomic(csv_path, dynamics_to_csv(log));
  write_file_atomic(jsonl_path, dynamics_to_jsonl(log));
}

// ---------------------------------------------------------------------------
// Evaluation report files
// ---------------------------------------------------------------------------

inline constexpr const char* kReportCsvHeader = "method,beta,severity,clean_acc,attack,robust_acc,n,seed";

struct ReportRow {
  std::string method;
  double beta = 0.0;
  EvalReport report;
};

inline std::string reports_to_csv(std::span<const ReportRow> rows) {
  std::string out = std::string(kReportCsvHeader) + "\n";
  for (const auto& row : rows)
    for (const auto& [attack, acc] : row.report.robust_acc)
      out += row.method + "," + format_double(row.beta) + "," + std::to_string(row.report.severity) + "," +
             format_double(row.report.clean_acc) + "," + attack + "," + format_double(acc) + "," +
             std::to_string(row.report.n_samples) + "," + std::to_string(row.report.seed) + "\n";
  return out;
}

inline std::string reports_to_jsonl(std::span<const ReportRow> rows) {
  std::string out;
  for (const auto& row : rows)
    for (const auto& [attack, acc] : row.report.robust_acc) {
      nlohmann::json j{{"method", row.method},   {"beta", row.beta},
                       {"severity", row.report.severity}, {"clean_acc", row.report.clean_acc},
                       {"attack", attack},       {"robust_acc", acc},
                       {"n", row.report.n_samples},       {"seed", row.report.seed}};
      out += j.dump() + "\n";
    }
  return out;
}

// ---------------------------------------------------------------------------
// Experiment grids
// ---------------------------------------------------------------------------

// Final-checkpoint evaluation: clean accuracy plus robust accuracy per attack.
inline EvalReport evaluate_model(const Checkpoint& model, const Dataset& eval_set,
                                 const std::vector<EvalAttack>& attacks, const ThreatModel& tm,
                                 std::uint64_t seed, int threads = 1) {
  EvalReport report;
  report.severity = eval_set.domain.severity;
  report.n_samples = static_cast<int>(eval_set.size());
  report.seed = seed;
  report.clean_acc = clean_accuracy(model, eval_set);
  for (const auto& attack : attacks)
    report.robust_acc[attack.name()] = robust_accuracy(model, eval_set, attack, tm, seed, threads);
  return report;
}

enum class SweepAxis { beta, severity, split_fraction };

inline std::string to_string(SweepAxis a) {
  switch (a) {
    case SweepAxis::beta: return "beta";
    case SweepAxis::severity: return "severity";
    case SweepAxis::split_fraction: return "split_fraction";
  }
  throw Error("unknown sweep axis");
}

inline SweepAxis sweep_axis_from_string(const std::string& s) {
  if (s == "beta") return SweepAxis::beta;
  if (s == "severity") return SweepAxis::severity;
  if (s == "split_fraction") return SweepAxis::split_fraction;
  throw ConfigError("unknown sweep axis '" + s + "' (expected beta|severity|split_fraction)");
}

struct SweepCell {
  Method method = Method::tgra;
  double axis_value = 0.0;
  double beta = 0.0;
  EvalReport report;
  std::uint64_t eval_checksum = 0;
  bool diverged = false;
};

struct SweepTable {
  SweepAxis axis = SweepAxis::beta;
  std::vector<SweepCell> cells;
};

inline std::uint64_t dataset_checksum(const Dataset& d) {
  const std::string bytes = serialize_dataset(d);
  return fnv1a(std::span<const char>(bytes.data(), bytes.size()));
}

// Cells at the same axis value must have evaluated on the identical set.
inline void check_cell_identity(const SweepTable& table) {
  for (const auto& a : table.cells)
    for (const auto& b : table.cells)
      if (a.axis_value == b.axis_value && a.eval_checksum != b.eval_checksum)
        throw Error("sweep: cells at axis value " + format_double(a.axis_value) +
                    " evaluated on different sets");
}

inline std::string sweep_to_csv(const SweepTable& table) {
  std::string out = "axis,axis_value," + std::string(kReportCsvHeader) + "\n";
  for (const auto& cell : table.cells)
    for (const auto& [attack, acc] : cell.report.robust_acc)
      out += to_string(table.axis) + "," + format_double(cell.axis_value) + "," + to_string(cell.method) +
             "," + format_double(cell.beta) + "," + std::to_string(cell.report.severity) + "," +
             format_double(cell.report.clean_acc) + "," + attack + "," + format_double(acc) + "," +
             std::to_string(cell.report.n_samples) + "," + std::to_string(cell.report.seed) + "\n";
  return out;
}

namespace detail {

inline SweepCell run_cell(const Checkpoint& pretrained, const Dataset& target, const Dataset& eval_set,
                          Method method, double axis_value, const AdaptationConfig& cfg,
                          std::uint64_t eval_seed) {
  SweepCell cell;
  cell.method = method;
  cell.axis_value = axis_value;
  cell.beta = cfg.method.beta;
  const AdaptationResult res = run_adaptation(pretrained, target, eval_set, cfg);
  cell.diverged = res.log.diverged;
  cell.report = evaluate_model(res.student, eval_set, {EvalAttack{}}, cfg.eval_threat(), eval_seed,
                               cfg.eval_threads);
  cell.eval_checksum = dataset_checksum(eval_set);
  return cell;
}

}  // namespace detail

// One full adaptation run per (method, beta) cell; identical eval set and
// evaluation seed across cells.
inline SweepTable beta_sweep(const Checkpoint& pretrained, const Dataset& target, const Dataset& eval_set,
                             const std::vector<Method>& methods, const std::vector<double>& betas,
                             const AdaptationConfig& base) {
  SweepTable table;
  table.axis = SweepAxis::beta;
  const std::uint64_t eval_seed = derive_seed(base.seed, 0xE7A1);
  for (const Method m : methods)
    for (const double beta : betas) {
      AdaptationConfig cfg = base;
      cfg.method.method = m;
      cfg.method.beta = beta;
      table.cells.push_back(detail::run_cell(pretrained, target, eval_set, m, beta, cfg, eval_seed));
    }
  check_cell_identity(table);
  return table;
}

// Corrupts the clean pools per severity level, then runs every method on each.
inline SweepTable severity_sweep(const Checkpoint& pretrained, const Dataset& clean_target,
                                 const Dataset& clean_eval, const std::vector<Method>& methods,
                                 const std::vector<int>& severities, const AdaptationConfig& base,
                                 std::uint64_t corruption_seed) {
  SweepTable table;
  table.axis = SweepAxis::severity;
  const std::uint64_t eval_seed = derive_seed(base.seed, 0xE7A1);
  for (const int s : severities) {
    const Dataset target = make_target_domain(clean_target, s, derive_seed(corruption_seed, 2 * s));
    const Dataset eval_set = make_target_domain(clean_eval, s, derive_seed(corruption_seed, 2 * s + 1));
    for (const Method m : methods) {
      AdaptationConfig cfg = base;
      cfg.method.method = m;
      table.cells.push_back(detail::run_cell(pretrained, target, eval_set, m, s, cfg, eval_seed));
    }
  }
  check_cell_identity(table);
  return table;
}

// Data-availability study: a fixed stratified 10% of the pool is held out for
// evaluation; each cell adapts on the given fraction of the pool (so 0.5
// mirrors a 50/10 split), at the configured corruption severity.
inline SweepTable split_sweep(const Checkpoint& pretrained, const Dataset& clean_pool,
                              const std::vector<Method>& methods, const std::vector<double>& fractions,
                              int severity, const AdaptationConfig& base, std::uint64_t corruption_seed) {
  SweepTable table;
  table.axis = SweepAxis::split_fraction;
  const std::uint64_t eval_seed = derive_seed(base.seed, 0xE7A1);

  SplitSpec holdout{{0.1, 0.9}, derive_seed(base.seed, 0x5B117), true};
  auto parts = split_dataset(clean_pool, holdout);
  const Dataset eval_set = make_target_domain(parts[0], severity, derive_seed(corruption_seed, 1));
  const Dataset rest = std::move(parts[1]);

  for (const double frac : fractions) {
    if (!(frac > 0.0 && frac <= 0.9 + 1e-12))
      throw ConfigError("split_sweep: fraction " + format_double(frac) + " must be in (0, 0.9]");
    Dataset adapt_pool;
    const double g = frac / 0.9;
    if (g >= 1.0 - 1e-12) {
      adapt_pool = rest;
    } else {
      SplitSpec sub{{g, 1.0 - g}, derive_seed(base.seed, 0x5B118), true};
      adapt_pool = split_dataset(rest, sub)[0];
    }
    const Dataset target = make_target_domain(adapt_pool, severity, derive_seed(corruption_seed, 2));
    for (const Method m : methods) {
      AdaptationConfig cfg = base;
      cfg.method.method = m;
      table.cells.push_back(detail::run_cell(pretrained, target, eval_set, m, frac, cfg, eval_seed));
    }
  }
  check_cell_identity(table);
  return table;
}

// Max minus min clean accuracy over a method's cells: the beta-sensitivity
// statistic.
inline double clean_accuracy_spread(const SweepTable& table, Method method) {
  double lo = 1.0, hi = 0.0;
  bool any = false;
  for (const auto& cell : table.cells)
    if (cell.method == method) {
      lo = std::min(lo, cell.report.clean_acc);
      hi = std::max(hi, cell.report.clean_acc);
      any = true;
    }
  if (!any) throw Error("clean_accuracy_spread: no cells for method " + to_string(method));
  return hi - lo;
}

}  // namespace rtta
