#pragma once

#include <set>

#include "rtta/experiments.hpp"

namespace rtta {

// ---------------------------------------------------------------------------
// Flat sectioned key=value config. Diff-friendly; sweeps override single
// keys with --set section.key=value. Unknown keys are rejected with their
// line number, and every run echoes its effective config next to its outputs.
// ---------------------------------------------------------------------------

namespace cfgdetail {

struct Entry {
  std::string value;
  int line = 0;
  mutable bool consumed = false;
};

using EntryMap = std::map<std::string, Entry>;  // key "section.key"

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

inline EntryMap tokenize(const std::string& text) {
  EntryMap entries;
  std::istringstream in(text);
  std::string raw;
  std::string section;
  int line_no = 0;
  while (std::getline(in, raw)) {
    ++line_no;
    std::string line = raw;
    if (const auto hash = line.find('#'); hash != std::string::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    if (line.front() == '[') {
      if (line.back() != ']') throw ConfigError("config line " + std::to_string(line_no) + ": unterminated section header");
      section = trim(line.substr(1, line.size() - 2));
      if (section.empty()) throw ConfigError("config line " + std::to_string(line_no) + ": empty section name");
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw ConfigError("config line " + std::to_string(line_no) + ": expected key = value");
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    if (key.empty()) throw ConfigError("config line " + std::to_string(line_no) + ": empty key");
    if (section.empty()) throw ConfigError("config line " + std::to_string(line_no) + ": key before any [section]");
    entries[section + "." + key] = Entry{value, line_no};
  }
  return entries;
}

inline double parse_double(const std::string& s, const std::string& key, int line) {
  try {
    if (const auto slash = s.find('/'); slash != std::string::npos) {
      const double num = std::stod(s.substr(0, slash));
      const double den = std::stod(s.substr(slash + 1));
      if (den == 0.0) throw std::invalid_argument("zero denominator");
      return num / den;
    }
    std::size_t used = 0;
    const double v = std::stod(s, &used);
    if (used != s.size()) throw std::invalid_argument("trailing characters");
    return v;
  } catch (const std::exception&) {
    throw ConfigError("config line " + std::to_string(line) + ": " + key + ": cannot parse '" + s +
                      "' as a number");
  }
}

inline long long parse_int(const std::string& s, const std::string& key, int line) {
  try {
    std::size_t used = 0;
    const long long v = std::stoll(s, &used, 10);
    if (used != s.size()) throw std::invalid_argument("trailing characters");
    return v;
  } catch (const std::exception&) {
    throw ConfigError("config line " + std::to_string(line) + ": " + key + ": cannot parse '" + s +
                      "' as an integer");
  }
}

inline std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::string cur;
  std::istringstream in(s);
  while (std::getline(in, cur, ',')) {
    cur = trim(cur);
    if (!cur.empty()) out.push_back(cur);
  }
  return out;
}

// Typed getters. Each access marks the entry consumed; anything left
// unconsumed at the end is an unknown key.
class Reader {
 public:
  explicit Reader(const EntryMap& entries) : entries_(&entries) {}

  std::string get_string(const std::string& key, const std::string& def) const {
    const Entry* e = find(key);
    return e ? e->value : def;
  }

  double get_double(const std::string& key, double def) const {
    const Entry* e = find(key);
    return e ? parse_double(e->value, key, e->line) : def;
  }

  long long get_int(const std::string& key, long long def) const {
    const Entry* e = find(key);
    return e ? parse_int(e->value, key, e->line) : def;
  }

  bool get_bool(const std::string& key, bool def) const {
    const Entry* e = find(key);
    if (!e) return def;
    if (e->value == "true") return true;
    if (e->value == "false") return false;
    throw ConfigError("config line " + std::to_string(e->line) + ": " + key + ": expected true|false");
  }

  std::vector<double> get_doubles(const std::string& key, std::vector<double> def) const {
    const Entry* e = find(key);
    if (!e) return def;
    std::vector<double> out;
    for (const auto& tok : split_list(e->value)) out.push_back(parse_double(tok, key, e->line));
    return out;
  }

  std::vector<int> get_ints(const std::string& key, std::vector<int> def) const {
    const Entry* e = find(key);
    if (!e) return def;
    std::vector<int> out;
    for (const auto& tok : split_list(e->value)) out.push_back(static_cast<int>(parse_int(tok, key, e->line)));
    return out;
  }

  std::vector<std::string> get_strings(const std::string& key, std::vector<std::string> def) const {
    const Entry* e = find(key);
    return e ? split_list(e->value) : def;
  }

  int line_of(const std::string& key) const {
    const Entry* e = find(key);
    return e ? e->line : 0;
  }

  void reject_unconsumed() const {
    for (const auto& [key, entry] : *entries_)
      if (!entry.consumed)
        throw ConfigError("config line " + std::to_string(entry.line) + ": unknown key '" + key + "'");
  }

 private:
  const Entry* find(const std::string& key) const {
    const auto it = entries_->find(key);
    if (it == entries_->end()) return nullptr;
    it->second.consumed = true;
    return &it->second;
  }

  const EntryMap* entries_;
};

}  // namespace cfgdetail

struct DataConfig {
  int samples_per_class = 96;
  int target_samples_per_class = 96;
  int severity = 2;
  std::vector<double> split = {0.5, 0.5};
  bool stratified = true;

  bool operator==(const DataConfig&) const = default;
};

struct EvalConfig {
  std::vector<std::string> attacks = {"pgd"};
  int square_budget = 300;

  bool operator==(const EvalConfig&) const = default;
};

struct SweepConfig {
  SweepAxis axis = SweepAxis::beta;
  std::vector<Method> methods = {Method::tgra, Method::trades_u};
  std::vector<double> betas = {6, 8, 10, 12};
  std::vector<int> severities = {0, 1, 2};
  std::vector<double> split_fractions = {0.5, 0.7, 0.8, 0.9};

  bool operator==(const SweepConfig&) const = default;
};

struct RunConfig {
  std::uint64_t seed = 0;
  std::string out_dir = "runs/out";
  int threads = 1;

  bool operator==(const RunConfig&) const = default;
};

struct IoConfig {
  std::string checkpoint_in;
  std::string dataset_in;
  std::string log_in;

  bool operator==(const IoConfig&) const = default;
};

// One declarative document holding every module's knobs. Defaults follow the
// reference experiment: beta 6, epsilon 8/255 with 2/255 steps, 5 training /
// 20 evaluation attack steps, 30 adaptation epochs.
struct ExperimentConfig {
  ModelSpec model;
  int image_extent = 8;
  DataConfig data;
  PretrainConfig pretrain;
  AdaptationConfig adaptation;
  EvalConfig eval;
  SweepConfig sweep;
  RunConfig run;
  IoConfig io;

  void validate() const {
    model.validate();
    adaptation.validate();
    pretrain.schedule.validate();
    if (data.severity < 0 || data.severity > 2)
      throw ConfigError("data.severity must be in {0,1,2}, got " + std::to_string(data.severity));
    SplitSpec probe{data.split, 0, data.stratified};
    probe.validate();
    if (data.samples_per_class < 1 || data.target_samples_per_class < 1)
      throw ConfigError("data: samples_per_class values must be positive");
    if (run.threads < 1) throw ConfigError("run.threads must be >= 1");
    if (eval.square_budget < 0) throw ConfigError("eval.square_budget must be nonnegative");
    for (const auto& a : eval.attacks)
      if (a != "pgd" && a != "square") throw ConfigError("eval.attacks: unknown attack '" + a + "'");
  }

  std::vector<EvalAttack> eval_attacks() const {
    std::vector<EvalAttack> out;
    for (const auto& a : eval.attacks) {
      EvalAttack e;
      e.kind = a == "pgd" ? EvalAttack::Kind::pgd : EvalAttack::Kind::square;
      e.square_budget = eval.square_budget;
      out.push_back(e);
    }
    return out;
  }
};

inline ExperimentConfig parse_config(const std::string& text,
                                     const std::vector<std::pair<std::string, std::string>>& overrides = {}) {
  cfgdetail::EntryMap entries = cfgdetail::tokenize(text);
  for (const auto& [key, value] : overrides) {
    if (key.find('.') == std::string::npos)
      throw ConfigError("--set " + key + ": expected section.key=value");
    entries[key] = cfgdetail::Entry{cfgdetail::trim(value), 0};
  }
  const cfgdetail::Reader r(entries);
  ExperimentConfig cfg;

  const std::string arch = r.get_string("model.architecture", "cnn");
  if (arch != "mlp" && arch != "cnn")
    throw ConfigError("config line " + std::to_string(r.line_of("model.architecture")) +
                      ": model.architecture must be mlp|cnn");
  cfg.model.architecture = arch == "mlp" ? Architecture::mlp : Architecture::cnn;
  cfg.model.num_classes = static_cast<int>(r.get_int("model.num_classes", 4));
  cfg.image_extent = static_cast<int>(r.get_int("model.image_extent", 8));
  cfg.model.input_shape = {3, cfg.image_extent, cfg.image_extent};
  cfg.model.mlp_widths = r.get_ints("model.mlp_widths", {24, 24, cfg.model.num_classes});
  cfg.model.cnn_channels = r.get_ints("model.cnn_channels", {8, 16});

  cfg.data.samples_per_class = static_cast<int>(r.get_int("data.samples_per_class", 160));
  cfg.data.target_samples_per_class = static_cast<int>(r.get_int("data.target_samples_per_class", 96));
  cfg.data.severity = static_cast<int>(r.get_int("data.severity", 2));
  cfg.data.split = r.get_doubles("data.split", {0.5, 0.5});
  cfg.data.stratified = r.get_bool("data.stratified", true);

  cfg.pretrain.epochs = static_cast<int>(r.get_int("pretrain.epochs", 40));
  cfg.pretrain.batch_size = static_cast<int>(r.get_int("pretrain.batch_size", 32));
  cfg.pretrain.schedule.initial_lr = r.get_double("pretrain.lr", 0.05);
  cfg.pretrain.schedule.decay_epochs = r.get_ints("pretrain.decay_epochs", {20, 27});
  cfg.pretrain.schedule.decay_factor = r.get_double("pretrain.decay_factor", 0.2);
  cfg.pretrain.momentum = r.get_double("pretrain.momentum", 0.9);
  cfg.pretrain.weight_decay = r.get_double("pretrain.weight_decay", 5e-4);

  cfg.adaptation.threat.epsilon = r.get_double("threat.epsilon", 8.0 / 255.0);
  cfg.adaptation.threat.alpha = r.get_double("threat.alpha", 2.0 / 255.0);
  cfg.adaptation.threat.steps = static_cast<int>(r.get_int("threat.steps", 5));
  cfg.adaptation.threat.init = threat_init_from_string(r.get_string("threat.init", "none"));
  cfg.adaptation.eval_attack_steps = static_cast<int>(r.get_int("threat.eval_steps", 20));
  cfg.adaptation.eval_attack_init =
      threat_init_from_string(r.get_string("threat.eval_init", "uniform_ball"));

  cfg.adaptation.method.method = method_from_string(r.get_string("adaptation.method", "tgra"));
  cfg.adaptation.method.beta = r.get_double("adaptation.beta", 6.0);
  cfg.adaptation.epochs = static_cast<int>(r.get_int("adaptation.epochs", 30));
  cfg.adaptation.batch_size = static_cast<int>(r.get_int("adaptation.batch_size", 32));
  cfg.adaptation.schedule.initial_lr = r.get_double("adaptation.lr", 2e-4);
  cfg.adaptation.schedule.decay_epochs = r.get_ints("adaptation.decay_epochs", {10, 25, 30});
  cfg.adaptation.schedule.decay_factor = r.get_double("adaptation.decay_factor", 0.1);
  cfg.adaptation.momentum = r.get_double("adaptation.momentum", 0.9);
  cfg.adaptation.weight_decay = r.get_double("adaptation.weight_decay", 0.0);
  cfg.adaptation.teacher_policy =
      teacher_policy_from_string(r.get_string("adaptation.teacher_policy", "bn_parallel"));
  cfg.adaptation.teacher_bn_momentum = r.get_double("adaptation.teacher_bn_momentum", 0.1);
  cfg.adaptation.student_bn = bn_mode_from_string(r.get_string("adaptation.student_bn", "train"));
  cfg.adaptation.eval_subset = static_cast<int>(r.get_int("adaptation.eval_subset", 512));
  cfg.adaptation.robust_eval_subset = static_cast<int>(r.get_int("adaptation.robust_eval_subset", 512));

  cfg.eval.attacks = r.get_strings("eval.attacks", {"pgd"});
  cfg.eval.square_budget = static_cast<int>(r.get_int("eval.square_budget", 300));

  cfg.sweep.axis = sweep_axis_from_string(r.get_string("sweep.axis", "beta"));
  cfg.sweep.methods.clear();
  for (const auto& m : r.get_strings("sweep.methods", {"tgra", "trades_u"}))
    cfg.sweep.methods.push_back(method_from_string(m));
  cfg.sweep.betas = r.get_doubles("sweep.betas", {6, 8, 10, 12});
  cfg.sweep.severities = r.get_ints("sweep.severities", {0, 1, 2});
  cfg.sweep.split_fractions = r.get_doubles("sweep.split_fractions", {0.5, 0.7, 0.8, 0.9});

  cfg.run.seed = static_cast<std::uint64_t>(r.get_int("run.seed", 0));
  cfg.run.out_dir = r.get_string("run.out_dir", "runs/out");
  cfg.run.threads = static_cast<int>(r.get_int("run.threads", 1));

  cfg.io.checkpoint_in = r.get_string("io.checkpoint_in", "");
  cfg.io.dataset_in = r.get_string("io.dataset_in", "");
  cfg.io.log_in = r.get_string("io.log_in", "");

  r.reject_unconsumed();

  cfg.pretrain.seed = cfg.run.seed;
  cfg.adaptation.seed = cfg.run.seed;
  cfg.adaptation.eval_threads = cfg.run.threads;
  cfg.validate();
  return cfg;
}

inline std::string emit_config(const ExperimentConfig& cfg) {
  std::string out;
  const auto kv = [&](const std::string& k, const std::string& v) { out += k + " = " + v + "\n"; };
  const auto num = [&](const std::string& k, double v) { kv(k, format_double(v)); };
  const auto integer = [&](const std::string& k, long long v) { kv(k, std::to_string(v)); };
  const auto ints = [&](const std::string& k, const std::vector<int>& v) {
    std::string s;
    for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + std::to_string(v[i]);
    kv(k, s);
  };
  const auto doubles = [&](const std::string& k, const std::vector<double>& v) {
    std::string s;
    for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + format_double(v[i]);
    kv(k, s);
  };

  out += "[model]\n";
  kv("architecture", to_string(cfg.model.architecture));
  integer("num_classes", cfg.model.num_classes);
  integer("image_extent", cfg.image_extent);
  ints("mlp_widths", cfg.model.mlp_widths);
  ints("cnn_channels", cfg.model.cnn_channels);

  out += "\n[data]\n";
  integer("samples_per_class", cfg.data.samples_per_class);
  integer("target_samples_per_class", cfg.data.target_samples_per_class);
  integer("severity", cfg.data.severity);
  doubles("split", cfg.data.split);
  kv("stratified", cfg.data.stratified ? "true" : "false");

  out += "\n[pretrain]\n";
  integer("epochs", cfg.pretrain.epochs);
  integer("batch_size", cfg.pretrain.batch_size);
  num("lr", cfg.pretrain.schedule.initial_lr);
  ints("decay_epochs", cfg.pretrain.schedule.decay_epochs);
  num("decay_factor", cfg.pretrain.schedule.decay_factor);
  num("momentum", cfg.pretrain.momentum);
  num("weight_decay", cfg.pretrain.weight_decay);

  out += "\n[threat]\n";
  num("epsilon", cfg.adaptation.threat.epsilon);
  num("alpha", cfg.adaptation.threat.alpha);
  integer("steps", cfg.adaptation.threat.steps);
  kv("init", to_string(cfg.adaptation.threat.init));
  integer("eval_steps", cfg.adaptation.eval_attack_steps);
  kv("eval_init", to_string(cfg.adaptation.eval_attack_init));

  out += "\n[adaptation]\n";
  kv("method", to_string(cfg.adaptation.method.method));
  num("beta", cfg.adaptation.method.beta);
  integer("epochs", cfg.adaptation.epochs);
  integer("batch_size", cfg.adaptation.batch_size);
  num("lr", cfg.adaptation.schedule.initial_lr);
  ints("decay_epochs", cfg.adaptation.schedule.decay_epochs);
  num("decay_factor", cfg.adaptation.schedule.decay_factor);
  num("momentum", cfg.adaptation.momentum);
  num("weight_decay", cfg.adaptation.weight_decay);
  kv("teacher_policy", to_string(cfg.adaptation.teacher_policy));
  num("teacher_bn_momentum", cfg.adaptation.teacher_bn_momentum);
  kv("student_bn", to_string(cfg.adaptation.student_bn));
  integer("eval_subset", cfg.adaptation.eval_subset);
  integer("robust_eval_subset", cfg.adaptation.robust_eval_subset);

  out += "\n[eval]\n";
  {
    std::string s;
    for (std::size_t i = 0; i < cfg.eval.attacks.size(); ++i) s += (i ? "," : "") + cfg.eval.attacks[i];
    kv("attacks", s);
  }
  integer("square_budget", cfg.eval.square_budget);

  out += "\n[sweep]\n";
  kv("axis", to_string(cfg.sweep.axis));
  {
    std::string s;
    for (std::size_t i = 0; i < cfg.sweep.methods.size(); ++i)
      s += (i ? "," : "") + to_string(cfg.sweep.methods[i]);
    kv("methods", s);
  }
  doubles("betas", cfg.sweep.betas);
  ints("severities", cfg.sweep.severities);
  doubles("split_fractions", cfg.sweep.split_fractions);

  out += "\n[run]\n";
  integer("seed", static_cast<long long>(cfg.run.seed));
  kv("out_dir", cfg.run.out_dir);
  integer("threads", cfg.run.threads);

  out += "\n[io]\n";
  kv("checkpoint_in", cfg.io.checkpoint_in);
  kv("dataset_in", cfg.io.dataset_in);
  kv("log_in", cfg.io.log_in);
  return out;
}

}  // namespace rtta
