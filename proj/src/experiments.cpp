#include "svmu/experiments.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include "svmu/kernels.hpp"

namespace svmu {

namespace fs = std::filesystem;

namespace {

std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string tok;
  while (std::getline(ss, tok, sep)) {
    tok.erase(std::remove_if(tok.begin(), tok.end(), [](unsigned char c) { return std::isspace(c); }), tok.end());
    if (!tok.empty()) out.push_back(tok);
  }
  return out;
}

std::vector<double> parse_doubles(const std::string& key, const std::string& s) {
  std::vector<double> out;
  for (const auto& t : split(s, ',')) {
    try {
      out.push_back(std::stod(t));
    } catch (const std::exception&) {
      throw ConfigError("key " + key + ": not a number list: " + s);
    }
  }
  return out;
}

Shape parse_shape(const std::string& s) {
  const auto p = split(s, 'x');
  if (p.size() != 3) throw ConfigError("shape must look like HxWxC: " + s);
  return {std::stoi(p[0]), std::stoi(p[1]), std::stoi(p[2])};
}

NegativePolicy parse_negatives(const std::string& s, std::uint64_t seed) {
  if (s == "all") return NegativePolicy::all();
  if (s == "active") return NegativePolicy::active_only();
  if (s.rfind("random:", 0) == 0) return NegativePolicy::random(std::stoi(s.substr(7)), seed);
  throw ConfigError("trainer.negatives must be all, active or random:q, got " + s);
}

bool is_preset(const std::string& s) { return s == "mnist" || s == "mnist-small" || s == "cifar" || s == "linear"; }

NetworkSpec build_network(const std::string& text, Shape input, int K) {
  if (is_preset(text)) return parse_network(text, input, K);
  const auto toks = split(text, ',');
  if (!toks.empty() && toks.back() == "dense:" + std::to_string(K)) return parse_network(text, input, K);
  return parse_network(text.empty() ? "dense:" + std::to_string(K) : text + ",dense:" + std::to_string(K), input, K);
}

std::string rate_name(double lr) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%g", lr);
  return buf;
}

std::string opt_double(const std::optional<double>& v) { return v ? format_double(*v) : "nan"; }

double parse_cell(const std::string& s, const std::string& column) {
  char* end = nullptr;
  const double v = std::strtod(s.c_str(), &end);
  if (s.empty() || end != s.c_str() + s.size()) throw std::runtime_error("csv: bad number in column " + column + ": " + s);
  return v;
}

void put_u64(std::ofstream& f, std::uint64_t v) {
  unsigned char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
  f.write(reinterpret_cast<const char*>(b), 8);
}

std::uint64_t get_u64(const std::vector<unsigned char>& buf, std::size_t pos) {
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(buf[pos + static_cast<std::size_t>(i)]) << (8 * i);
  return v;
}

constexpr char kParamMagic[8] = {'S', 'V', 'M', 'U', 'P', 'R', 'M', '1'};
constexpr std::uint64_t kParamVersion = 1;

}  // namespace

ExperimentKind parse_experiment_kind(const std::string& name) {
  if (name == "convergence") return ExperimentKind::convergence;
  if (name == "adversarial") return ExperimentKind::adversarial;
  if (name == "random_labels" || name == "random-labels") return ExperimentKind::random_labels;
  if (name == "gradcheck") return ExperimentKind::gradcheck;
  throw ConfigError("unknown experiment: " + name);
}

void ExperimentConfig::override_seed(std::uint64_t seed) {
  trainer.seed = seed;
  sgd.seed = seed;
  gradcheck.seed = seed;
  if (trainer.negative_policy.kind == NegativePolicy::Kind::random_subset) trainer.negative_policy.seed = seed;
}

ExperimentConfig experiment_config_from(const Config& c) {
  ExperimentConfig e;
  e.experiment = parse_experiment_kind(c.get_string("experiment", "convergence"));
  e.dataset = c.get_string("dataset", e.dataset);
  e.network = c.get_string("network", e.network);
  e.train_subset = static_cast<std::size_t>(c.get_int("train_subset", 0));
  e.test_subset = static_cast<std::size_t>(c.get_int("test_subset", 0));
  e.validation_fraction = c.get_double("validation_fraction", e.validation_fraction);
  e.output_dir = c.get_string("output_dir", e.output_dir.string());
  const bool wall = c.get_bool("record_wall_time", true);
  const auto exec = c.get_bool("parallel", true) ? kernels::Exec::parallel : kernels::Exec::serial;

  TrainerConfig& t = e.trainer;
  t.step_size = c.get_double("trainer.step_size", t.step_size);
  t.r_init = c.get_double("trainer.r_init", t.r_init);
  t.r_decay = c.get_double("trainer.r_decay", t.r_decay);
  t.epsilon = c.get_double("trainer.epsilon", t.epsilon);
  t.batch_size_init = static_cast<std::size_t>(c.get_int("trainer.batch_size", static_cast<long>(t.batch_size_init)));
  t.bound_threshold = c.get_double("trainer.bound_threshold", t.bound_threshold);
  t.confidence_delta = c.get_double("trainer.confidence_delta", t.confidence_delta);
  const std::string sampler = c.get_string("trainer.sampler", "uniform");
  if (sampler == "uniform") t.sampler = SamplerKind::uniform;
  else if (sampler == "loss_weighted") t.sampler = SamplerKind::loss_weighted;
  else throw ConfigError("trainer.sampler must be uniform or loss_weighted");
  t.probe_factor = static_cast<std::size_t>(c.get_int("trainer.probe_factor", static_cast<long>(t.probe_factor)));
  t.num_iter = static_cast<int>(c.get_int("trainer.num_iter", t.num_iter));
  t.max_epochs = c.get_double("trainer.max_epochs", t.max_epochs);
  t.seed = static_cast<std::uint64_t>(c.get_int("trainer.seed", static_cast<long>(t.seed)));
  t.negative_policy = parse_negatives(c.get_string("trainer.negatives", "all"), t.seed);
  t.solver_tol = c.get_double("trainer.solver_tol", t.solver_tol);
  t.max_sweeps = static_cast<int>(c.get_int("trainer.max_sweeps", t.max_sweeps));
  t.dense_gram_limit =
      static_cast<std::size_t>(c.get_int("trainer.dense_gram_limit", static_cast<long>(t.dense_gram_limit)));
  t.apply_gated_updates = c.get_bool("trainer.apply_gated_updates", t.apply_gated_updates);
  t.max_gated_at_cap = static_cast<int>(c.get_int("trainer.max_gated_at_cap", t.max_gated_at_cap));
  t.eval_every = static_cast<int>(c.get_int("trainer.eval_every", t.eval_every));
  t.track_train_loss = c.get_bool("trainer.track_train_loss", t.track_train_loss);
  t.record_wall_time = wall;
  t.exec = exec;

  SgdConfig& s = e.sgd;
  if (c.has("sgd.grid")) e.sgd_grid = parse_doubles("sgd.grid", c.get_string("sgd.grid", ""));
  if (e.sgd_grid.empty()) throw ConfigError("sgd.grid must not be empty");
  s.learning_rate = e.sgd_grid.front();
  s.batch_size = static_cast<std::size_t>(c.get_int("sgd.batch_size", static_cast<long>(s.batch_size)));
  s.seed = static_cast<std::uint64_t>(c.get_int("sgd.seed", static_cast<long>(s.seed)));
  s.eval_every = static_cast<int>(c.get_int("sgd.eval_every", s.eval_every));
  s.record_wall_time = wall;
  s.exec = exec;
  e.sgd_epochs = c.get_double("sgd.epochs", e.sgd_epochs);
  if (c.has("convergence.targets")) e.targets = parse_doubles("convergence.targets", c.get_string("convergence.targets", ""));

  e.adversarial_samples = static_cast<std::size_t>(c.get_int("adversarial.samples", static_cast<long>(e.adversarial_samples)));
  if (c.has("adversarial.norms")) {
    e.adversarial_norms.clear();
    for (const auto& n : split(c.get_string("adversarial.norms", ""), ',')) e.adversarial_norms.push_back(parse_norm_kind(n));
  }
  AttackOptions& a = e.attack;
  a.pgd_steps = static_cast<int>(c.get_int("adversarial.pgd_steps", a.pgd_steps));
  a.step_factor = c.get_double("adversarial.step_factor", a.step_factor);
  a.initial_budget = c.get_double("adversarial.initial_budget", a.initial_budget);
  a.max_budget = c.get_double("adversarial.max_budget", a.max_budget);
  a.rel_tol = c.get_double("adversarial.rel_tol", a.rel_tol);
  a.clip_to_unit = c.get_bool("adversarial.clip", a.clip_to_unit);

  GradcheckOptions& g = e.gradcheck;
  g.pairs = static_cast<int>(c.get_int("gradcheck.pairs", g.pairs));
  g.step = c.get_double("gradcheck.step", g.step);
  g.tolerance = c.get_double("gradcheck.tolerance", g.tolerance);
  g.richardson_min_ratio = c.get_double("gradcheck.richardson_min_ratio", g.richardson_min_ratio);
  g.seed = static_cast<std::uint64_t>(c.get_int("gradcheck.seed", static_cast<long>(g.seed)));
  g.network = c.get_string("gradcheck.network", g.network);
  if (c.has("gradcheck.input")) g.input = parse_shape(c.get_string("gradcheck.input", ""));
  g.num_classes = static_cast<int>(c.get_int("gradcheck.classes", g.num_classes));

  if (c.has("seed")) e.override_seed(static_cast<std::uint64_t>(c.get_int("seed", 1)));

  if (const auto unused = c.unused_keys(); !unused.empty()) {
    std::string msg = "unknown config keys:";
    for (const auto& k : unused) msg += " " + k;
    throw ConfigError(msg);
  }
  if (!(e.validation_fraction >= 0.0 && e.validation_fraction < 1.0))
    throw ConfigError("validation_fraction must lie in [0,1)");
  if (!(e.sgd_epochs >= 0.0)) throw ConfigError("sgd.epochs must be nonnegative");
  t.validate();
  return e;
}

ExperimentConfig load_experiment_config(const fs::path& path) { return experiment_config_from(Config::load(path)); }

PreparedData prepare_data(const ExperimentConfig& cfg) {
  TrainTest tt = load_dataset(cfg.dataset);
  if (cfg.train_subset > tt.train.size())
    throw std::invalid_argument("train_subset " + std::to_string(cfg.train_subset) + " exceeds the " +
                                std::to_string(tt.train.size()) + " training samples");
  if (cfg.test_subset > tt.test.size())
    throw std::invalid_argument("test_subset " + std::to_string(cfg.test_subset) + " exceeds the " +
                                std::to_string(tt.test.size()) + " test samples");
  const std::size_t n_train = cfg.train_subset ? cfg.train_subset : tt.train.size();
  const auto n_val = static_cast<std::size_t>(std::floor(cfg.validation_fraction * static_cast<double>(n_train)));
  Dataset train, validation;
  if (n_val > 0 && tt.train.size() >= n_train + n_val) {
    train = head(tt.train, n_train);
    validation = tt.train;
    validation.samples.assign(tt.train.samples.begin() + static_cast<std::ptrdiff_t>(n_train),
                              tt.train.samples.begin() + static_cast<std::ptrdiff_t>(n_train + n_val));
  } else if (n_val > 0) {
    std::tie(train, validation) = split_validation(head(tt.train, n_train), cfg.validation_fraction, cfg.trainer.seed);
  } else {
    train = head(tt.train, n_train);
    validation = train;
    validation.samples.clear();
  }
  Dataset test = cfg.test_subset ? head(tt.test, cfg.test_subset) : std::move(tt.test);
  NetworkSpec spec = build_network(cfg.network, train.shape, train.num_classes);
  return {std::move(train), std::move(validation), std::move(test), std::move(spec)};
}

// ---- CSV ----

std::string format_double(double v) {
  if (std::isnan(v)) return "nan";
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

void write_csv(const fs::path& path, const CsvTable& table) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  const fs::path tmp = path.string() + ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    if (!f) throw std::runtime_error("cannot write " + tmp.string());
    f << kSchemaLine << '\n';
    for (std::size_t i = 0; i < table.columns.size(); ++i) f << (i ? "," : "") << table.columns[i];
    f << '\n';
    for (const auto& row : table.rows) {
      if (row.size() != table.columns.size()) throw std::logic_error("csv row does not match the header");
      for (std::size_t i = 0; i < row.size(); ++i) f << (i ? "," : "") << row[i];
      f << '\n';
    }
    if (!f) throw std::runtime_error("write failed for " + tmp.string());
  }
  fs::rename(tmp, path);
}

CsvTable read_csv(const fs::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open " + path.string());
  std::string line;
  if (!std::getline(f, line) || line != kSchemaLine) throw std::runtime_error("csv: missing schema line in " + path.string());
  if (!std::getline(f, line)) throw std::runtime_error("csv: missing header in " + path.string());
  CsvTable t;
  std::stringstream hs(line);
  std::string cell;
  while (std::getline(hs, cell, ',')) t.columns.push_back(cell);
  std::size_t lineno = 2;
  while (std::getline(f, line)) {
    ++lineno;
    std::vector<std::string> row;
    std::size_t start = 0;
    while (true) {
      const auto comma = line.find(',', start);
      row.push_back(line.substr(start, comma == std::string::npos ? std::string::npos : comma - start));
      if (comma == std::string::npos) break;
      start = comma + 1;
    }
    if (row.size() != t.columns.size())
      throw std::runtime_error("csv: line " + std::to_string(lineno) + " has " + std::to_string(row.size()) +
                               " fields, expected " + std::to_string(t.columns.size()));
    for (const auto& v : row)
      if (v.empty()) throw std::runtime_error("csv: empty field on line " + std::to_string(lineno));
    t.rows.push_back(std::move(row));
  }
  return t;
}

CsvTable metrics_table(const std::vector<MetricsRow>& rows) {
  CsvTable t;
  t.columns = {"epoch",    "updates",    "train_hinge", "train_acc",    "test_hinge", "test_acc", "schedule_term",
               "full_rhs", "batch_size", "r",           "delta_w_norm", "h_residual", "gated",    "wall_seconds"};
  for (const auto& m : rows) {
    t.rows.push_back({format_double(m.epoch), std::to_string(m.updates), format_double(m.train_hinge),
                      format_double(m.train_acc), format_double(m.test_hinge), format_double(m.test_acc),
                      format_double(m.schedule_term), format_double(m.full_rhs), format_double(m.batch_size),
                      format_double(m.r), format_double(m.delta_w_norm), format_double(m.h_residual),
                      std::to_string(m.gated), format_double(m.wall_seconds)});
  }
  return t;
}

std::vector<MetricsRow> metrics_from_table(const CsvTable& t) {
  const CsvTable ref = metrics_table({});
  if (t.columns != ref.columns) throw std::runtime_error("csv: not a metrics table");
  std::vector<MetricsRow> out;
  for (const auto& r : t.rows) {
    auto v = [&](std::size_t i) { return parse_cell(r[i], t.columns[i]); };
    MetricsRow m;
    m.epoch = v(0);
    m.updates = static_cast<long>(v(1));
    m.train_hinge = v(2);
    m.train_acc = v(3);
    m.test_hinge = v(4);
    m.test_acc = v(5);
    m.schedule_term = v(6);
    m.full_rhs = v(7);
    m.batch_size = v(8);
    m.r = v(9);
    m.delta_w_norm = v(10);
    m.h_residual = v(11);
    m.gated = static_cast<int>(v(12));
    m.wall_seconds = v(13);
    out.push_back(m);
  }
  return out;
}

// ---- parameters ----

void save_params(const fs::path& path, const NetworkSpec& spec, const ParamVector& params) {
  if (params.size() != spec.param_count()) throw ShapeError("save_params: parameters do not match the spec");
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  const fs::path tmp = path.string() + ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    if (!f) throw std::runtime_error("cannot write " + tmp.string());
    f.write(kParamMagic, 8);
    put_u64(f, kParamVersion);
    put_u64(f, spec.digest());
    put_u64(f, params.size());
    for (double d : params) {
      std::uint64_t bits;
      std::memcpy(&bits, &d, 8);
      put_u64(f, bits);
    }
    if (!f) throw std::runtime_error("write failed for " + tmp.string());
  }
  fs::rename(tmp, path);
}

ParamVector load_params(const fs::path& path, const NetworkSpec& spec) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open " + path.string());
  std::vector<unsigned char> buf((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  if (buf.size() < 32 || std::memcmp(buf.data(), kParamMagic, 8) != 0)
    throw std::runtime_error(path.string() + ": not a parameter file");
  if (get_u64(buf, 8) != kParamVersion) throw std::runtime_error(path.string() + ": unsupported version");
  if (get_u64(buf, 16) != spec.digest())
    throw std::runtime_error(path.string() + ": written for a different network (" + spec.describe() + " expected)");
  const std::uint64_t n = get_u64(buf, 24);
  if (n != spec.param_count() || buf.size() != 32 + 8 * n)
    throw std::runtime_error(path.string() + ": parameter count does not match");
  ParamVector p(n);
  for (std::size_t i = 0; i < n; ++i) {
    const std::uint64_t bits = get_u64(buf, 32 + 8 * i);
    std::memcpy(&p[i], &bits, 8);
  }
  return p;
}

// ---- convergence ----

std::optional<double> epochs_to_target(const std::vector<MetricsRow>& rows, double target) {
  for (const auto& r : rows)
    if (r.train_hinge <= target) return r.epoch;
  return std::nullopt;
}

ConvergenceResult run_convergence(const ExperimentConfig& cfg) {
  ConvergenceResult res{prepare_data(cfg), {}, {}, 0, {}};
  const PreparedData& d = res.data;
  const ParamVector init = init_params(d.spec, cfg.trainer.seed);

  res.svm = train(d.train, &d.test, d.spec, cfg.trainer, init);

  const auto N = static_cast<double>(d.train.size());
  for (double lr : cfg.sgd_grid) {
    SgdConfig s = cfg.sgd;
    s.learning_rate = lr;
    // Each epoch ends with a partial batch, so an epoch is ceil(N / batch) iterations.
    s.num_iter = static_cast<int>(std::ceil(cfg.sgd_epochs * std::ceil(N / static_cast<double>(s.batch_size))));
    SgdRun run;
    run.learning_rate = lr;
    run.result = sgd_train(d.train, &d.test, d.spec, s, init);
    run.validation_hinge = d.validation.empty() ? run.result.metrics.back().train_hinge
                                                : evaluate(d.spec, run.result.params, d.validation, s.exec).hinge;
    res.sgd_runs.push_back(std::move(run));
  }
  for (std::size_t i = 1; i < res.sgd_runs.size(); ++i) {
    const double v = res.sgd_runs[i].validation_hinge;
    const double best = res.sgd_runs[res.sgd_best].validation_hinge;
    if (v < best || (std::isnan(best) && !std::isnan(v))) res.sgd_best = i;
  }

  CsvTable& sum = res.summary;
  sum.columns = {"method", "learning_rate", "target", "epochs_to_target", "final_epoch", "final_train_hinge",
                 "final_train_acc", "final_test_hinge", "final_test_acc", "validation_hinge", "chosen", "status"};
  auto add_rows = [&](const std::string& method, double lr, const TrainResult& tr, double val, bool chosen,
                      const std::string& status) {
    const MetricsRow& last = tr.metrics.back();
    for (double target : cfg.targets) {
      sum.rows.push_back({method, format_double(lr), format_double(target), opt_double(epochs_to_target(tr.metrics, target)),
                          format_double(last.epoch), format_double(last.train_hinge), format_double(last.train_acc),
                          format_double(last.test_hinge), format_double(last.test_acc), format_double(val),
                          chosen ? "1" : "0", status});
    }
  };
  const double svm_val = d.validation.empty() ? res.svm.metrics.back().train_hinge
                                              : evaluate(d.spec, res.svm.params, d.validation, cfg.trainer.exec).hinge;
  std::string status = to_string(res.svm.status);
  std::replace(status.begin(), status.end(), ' ', '_');
  add_rows("svm", cfg.trainer.step_size, res.svm, svm_val, true, status);
  for (std::size_t i = 0; i < res.sgd_runs.size(); ++i)
    add_rows("sgd", res.sgd_runs[i].learning_rate, res.sgd_runs[i].result, res.sgd_runs[i].validation_hinge,
             i == res.sgd_best, "completed");

  const fs::path& out = cfg.output_dir;
  write_csv(out / "svm_metrics.csv", metrics_table(res.svm.metrics));
  write_csv(out / "sgd_metrics.csv", metrics_table(res.sgd_runs[res.sgd_best].result.metrics));
  for (const auto& run : res.sgd_runs)
    write_csv(out / ("sgd_lr_" + rate_name(run.learning_rate) + ".csv"), metrics_table(run.result.metrics));
  write_csv(out / "summary.csv", sum);
  save_params(out / "svm.params", d.spec, res.svm.params);
  save_params(out / "sgd.params", d.spec, res.sgd_runs[res.sgd_best].result.params);
  return res;
}

// ---- adversarial ----

AdversarialSummary run_adversarial(const ExperimentConfig& cfg, const NetworkSpec& spec, const Dataset& test,
                                   const ParamVector& params_a, const ParamVector& params_b,
                                   const std::string& name_a, const std::string& name_b) {
  AdversarialSummary res;
  std::vector<std::size_t> chosen;
  if (cfg.adversarial_samples > 0) {
    const auto ptrs = test.pointers();
    const auto out_a = kernels::batch_forward(spec, params_a, ptrs, cfg.trainer.exec);
    const auto out_b = kernels::batch_forward(spec, params_b, ptrs, cfg.trainer.exec);
    for (std::size_t i = 0; i < test.size() && chosen.size() < cfg.adversarial_samples; ++i)
      if (predict(out_a[i]) == test.samples[i].label && predict(out_b[i]) == test.samples[i].label) chosen.push_back(i);
  }
  res.evaluated = chosen.size();

  const std::size_t per_method = chosen.size() * cfg.adversarial_norms.size();
  res.samples.resize(2 * per_method);
  kernels::for_each_index(
      res.samples.size(),
      [&](std::size_t job) {
        const bool first = job < per_method;
        const std::size_t rest = job % std::max<std::size_t>(per_method, 1);
        const std::size_t si = rest / cfg.adversarial_norms.size();
        const NormKind norm = cfg.adversarial_norms[rest % cfg.adversarial_norms.size()];
        AttackOptions opt = cfg.attack;
        opt.norm = norm;
        AdversarialSample& s = res.samples[job];
        s.test_index = chosen[si];
        s.method = first ? name_a : name_b;
        s.norm = norm;
        s.result = minimal_adversarial_noise(spec, first ? params_a : params_b, test.samples[chosen[si]], opt);
      },
      cfg.trainer.exec);

  CsvTable& t = res.table;
  t.columns = {"method", "samples", "frobenius", "infinity", "nuclear", "one", "success_rate"};
  std::vector<double> fro_a, fro_b;
  for (int m = 0; m < 2; ++m) {
    const std::string& name = m == 0 ? name_a : name_b;
    std::vector<std::string> row{name, std::to_string(chosen.size())};
    double succ = 0.0, total = 0.0;
    for (NormKind k : {NormKind::frobenius, NormKind::infinity, NormKind::nuclear, NormKind::one}) {
      const bool attacked = std::find(cfg.adversarial_norms.begin(), cfg.adversarial_norms.end(), k) !=
                            cfg.adversarial_norms.end();
      std::vector<double> vals;
      for (std::size_t j = static_cast<std::size_t>(m) * per_method; j < (static_cast<std::size_t>(m) + 1) * per_method; ++j) {
        const auto& s = res.samples[j];
        if (s.norm != k) continue;
        total += 1.0;
        if (!s.result.success) continue;
        succ += 1.0;
        vals.push_back(s.result.norms.get(k));
        if (k == NormKind::frobenius) (m == 0 ? fro_a : fro_b).push_back(s.result.norms.frobenius);
      }
      row.push_back(attacked && !vals.empty() ? format_double(stats::mean(vals)) : "nan");
    }
    row.push_back(total > 0 ? format_double(succ / total) : "nan");
    t.rows.push_back(std::move(row));
  }
  if (chosen.empty()) t.rows.clear();
  // Pair only samples where both attacks succeeded.
  {
    std::vector<double> a, b;
    for (std::size_t j = 0; j < per_method; ++j) {
      const auto& sa = res.samples[j];
      const auto& sb = res.samples[per_method + j];
      if (sa.norm == NormKind::frobenius && sa.result.success && sb.result.success) {
        a.push_back(sa.result.norms.frobenius);
        b.push_back(sb.result.norms.frobenius);
      }
    }
    res.frobenius_test = stats::paired_t_greater(a, b);
  }

  CsvTable per;
  per.columns = {"test_index", "method",    "norm",     "success", "budget", "lower_budget",
                 "iterations", "frobenius", "infinity", "nuclear", "one",    "adversarial_label"};
  for (const auto& s : res.samples)
    per.rows.push_back({std::to_string(s.test_index), s.method, to_string(s.norm), s.result.success ? "1" : "0",
                        format_double(s.result.budget), format_double(s.result.lower_budget),
                        std::to_string(s.result.iterations), format_double(s.result.norms.frobenius),
                        format_double(s.result.norms.infinity), format_double(s.result.norms.nuclear),
                        format_double(s.result.norms.one), std::to_string(s.result.adversarial_label)});
  write_csv(cfg.output_dir / "adversarial.csv", t);
  write_csv(cfg.output_dir / "adversarial_samples.csv", per);
  CsvTable test_row;
  test_row.columns = {"samples", "mean_difference", "t", "df", "p_value"};
  test_row.rows.push_back({std::to_string(res.evaluated), format_double(res.frobenius_test.mean_diff),
                           format_double(res.frobenius_test.t), format_double(res.frobenius_test.df),
                           format_double(res.frobenius_test.p_value)});
  write_csv(cfg.output_dir / "adversarial_test.csv", test_row);
  return res;
}

// ---- random labels ----

RandomLabelResult run_random_labels(const ExperimentConfig& cfg) {
  const PreparedData d = prepare_data(cfg);
  const Dataset shuffled = shuffle_labels(d.train, cfg.trainer.seed ^ 0xa0761d6478bd642fULL);
  const ParamVector init = init_params(d.spec, cfg.trainer.seed);
  TrainerConfig tc = cfg.trainer;
  tc.track_train_loss = true;

  RandomLabelResult res;
  res.true_run = train(d.train, &d.test, d.spec, tc, init);
  res.shuffled_run = train(shuffled, &d.test, d.spec, tc, init);

  std::vector<double> sched_true, sched_shuf, ratios, bounds;
  auto collect = [&](const std::string& name, const TrainResult& tr, std::vector<double>& sched) {
    for (const auto& r : tr.diagnostics) {
      TrajectoryPoint p;
      p.run = name;
      p.record = r;
      p.ratio = std::nan("");
      if (!std::isnan(r.train_before)) {
        p.train_decrease = r.train_before - r.train_after;
        p.minibatch_decrease = r.minibatch_before - r.minibatch_after;
        if (p.minibatch_decrease != 0.0) p.ratio = p.train_decrease / p.minibatch_decrease;
      }
      if (r.epoch > 1.0) sched.push_back(r.schedule_term);
      if (!std::isnan(p.ratio)) {
        ratios.push_back(p.ratio);
        bounds.push_back(r.epsilon_bound);
      }
      if (name == "shuffled") res.shuffled_max_batch = std::max(res.shuffled_max_batch, r.batch_size);
      res.trajectory.push_back(p);
    }
  };
  collect("true", res.true_run, sched_true);
  collect("shuffled", res.shuffled_run, sched_shuf);
  res.median_schedule_true = stats::median(sched_true);
  res.median_schedule_shuffled = stats::median(sched_shuf);
  res.applied_updates = ratios.size();
  res.ratio_vs_bound = stats::spearman(ratios, bounds);

  const fs::path& out = cfg.output_dir;
  write_csv(out / "random_labels_true.csv", metrics_table(res.true_run.metrics));
  write_csv(out / "random_labels_shuffled.csv", metrics_table(res.shuffled_run.metrics));
  CsvTable traj;
  traj.columns = {"run",           "iteration", "epoch",           "gated",
                  "batch_size",    "r",         "schedule_term",   "full_rhs",
                  "delta_w_norm",  "train_decrease", "minibatch_decrease", "ratio"};
  for (const auto& p : res.trajectory)
    traj.rows.push_back({p.run, std::to_string(p.record.iteration), format_double(p.record.epoch),
                         p.record.gated ? "1" : "0", std::to_string(p.record.batch_size), format_double(p.record.r),
                         format_double(p.record.schedule_term), format_double(p.record.epsilon_bound),
                         format_double(p.record.delta_w_norm), format_double(p.train_decrease),
                         format_double(p.minibatch_decrease), format_double(p.ratio)});
  write_csv(out / "bound_trajectory.csv", traj);
  CsvTable sum;
  sum.columns = {"median_schedule_true", "median_schedule_shuffled", "spearman_rho", "spearman_p",
                 "applied_updates",      "shuffled_max_batch",       "train_size"};
  sum.rows.push_back({format_double(res.median_schedule_true), format_double(res.median_schedule_shuffled),
                      format_double(res.ratio_vs_bound.rho), format_double(res.ratio_vs_bound.p_value),
                      std::to_string(res.applied_updates), std::to_string(res.shuffled_max_batch),
                      std::to_string(d.train.size())});
  write_csv(out / "random_labels_summary.csv", sum);
  return res;
}

// ---- gradient check ----

GradcheckReport gradient_check(const GradcheckOptions& opt, const GradientFn& grad) {
  struct Family {
    std::string layers;
    Shape input;
    int K;
  };
  std::vector<Family> family;
  if (!opt.network.empty()) {
    family.push_back({opt.network, opt.input, opt.num_classes});
  } else {
    family = {{"conv:3:3,relu,pool,conv:2:3:same,relu,flatten,dense:5,relu,dense:4", {8, 8, 2}, 4},
              {"conv:2:3:same,relu,pool:2:1,dense:3", {5, 5, 1}, 3},
              {"dense:6,relu,dense:5,relu,dense:4", {1, 1, 7}, 4},
              {"conv:4:2,pool:3:2,relu,dense:2", {7, 6, 3}, 2}};
  }
  std::vector<NetworkSpec> specs;
  for (const auto& f : family) specs.push_back(build_network(f.layers, f.input, f.K));

  GradcheckReport rep;
  std::mt19937_64 rng(opt.seed);
  std::uniform_real_distribution<double> unif(-1.0, 1.0);
  std::vector<double> ratios;
  for (int t = 0; t < opt.pairs; ++t) {
    const NetworkSpec& spec = specs[static_cast<std::size_t>(t) % specs.size()];
    ++rep.pairs;
    if (spec.param_count() == 0) continue;
    ParamVector w = init_params(spec, rng());
    for (double& v : w) v += 0.1 * unif(rng);
    Sample x;
    x.input.resize(spec.input_shape().size());
    for (double& v : x.input) v = unif(rng);
    const int K = spec.num_classes();
    const int j = 1 + static_cast<int>(rng() % static_cast<std::uint64_t>(K));
    x.label = j;

    const ParamVector a = grad(spec, w, x, j);
    if (a.size() != w.size()) {
      rep.passed = false;
      rep.failures.push_back("pair " + std::to_string(t) + ": gradient has the wrong length");
      continue;
    }
    const auto pattern = activation_pattern(spec, w, x.input);
    std::vector<double> num(w.size(), 0.0);
    std::vector<bool> keep(w.size(), true);
    for (std::size_t i = 0; i < w.size(); ++i) {
      ParamVector wp = w, wm = w;
      wp[i] += opt.step;
      wm[i] -= opt.step;
      if (activation_pattern(spec, wp, x.input) != pattern || activation_pattern(spec, wm, x.input) != pattern) {
        keep[i] = false;
        ++rep.excluded;
        continue;
      }
      const double fp = forward(spec, wp, x)[static_cast<std::size_t>(j - 1)];
      const double fm = forward(spec, wm, x)[static_cast<std::size_t>(j - 1)];
      num[i] = (fp - fm) / (2.0 * opt.step);
    }
    double scale = 0.0;
    for (std::size_t i = 0; i < w.size(); ++i)
      if (keep[i]) scale = std::max({scale, std::abs(a[i]), std::abs(num[i])});
    double worst = 0.0;
    std::size_t worst_i = 0;
    for (std::size_t i = 0; i < w.size(); ++i) {
      if (!keep[i]) continue;
      ++rep.coordinates;
      const double e = scale > 0.0 ? std::abs(a[i] - num[i]) / scale : 0.0;
      if (e > worst) {
        worst = e;
        worst_i = i;
      }
    }
    rep.max_relative_error = std::max(rep.max_relative_error, worst);
    if (worst > opt.tolerance) {
      rep.passed = false;
      rep.failures.push_back("pair " + std::to_string(t) + " (" + spec.describe() + ", node " + std::to_string(j) +
                             "): relative error " + format_double(worst) + " at parameter " + std::to_string(worst_i));
    }

    // Second-order residual along a random direction inside the current linear region.
    std::vector<double> dir(w.size());
    for (double& v : dir) v = unif(rng);
    double dn = 0.0;
    for (double v : dir) dn += v * v;
    dn = std::sqrt(dn);
    for (double& v : dir) v /= dn;
    double slope = 0.0;
    for (std::size_t i = 0; i < w.size(); ++i) slope += a[i] * dir[i];
    const double f0 = forward(spec, w, x)[static_cast<std::size_t>(j - 1)];
    auto residual = [&](double s) {
      ParamVector ws = w;
      for (std::size_t i = 0; i < w.size(); ++i) ws[i] += s * dir[i];
      if (activation_pattern(spec, ws, x.input) != pattern) return std::nan("");
      return forward(spec, ws, x)[static_cast<std::size_t>(j - 1)] - f0 - s * slope;
    };
    double s = 0.1;
    for (int h = 0; h < 30; ++h, s *= 0.5) {
      const double r1 = residual(s);
      const double r2 = residual(0.5 * s);
      if (std::isnan(r1) || std::isnan(r2)) continue;
      if (std::abs(r1) < 1e-10 || std::abs(r2) == 0.0) break;  // locally linear in this direction
      ratios.push_back(std::abs(r1) / std::abs(r2));
      break;
    }
  }
  rep.richardson_samples = static_cast<int>(ratios.size());
  if (!ratios.empty()) {
    rep.richardson_median_ratio = stats::median(ratios);
    if (rep.richardson_median_ratio < opt.richardson_min_ratio) {
      rep.passed = false;
      rep.failures.push_back("second-order residual ratio " + format_double(rep.richardson_median_ratio) +
                             " below " + format_double(opt.richardson_min_ratio));
    }
  }
  return rep;
}

GradcheckReport run_gradcheck(const ExperimentConfig& cfg) {
  const GradcheckReport rep = gradient_check(cfg.gradcheck);
  CsvTable t;
  t.columns = {"pairs", "coordinates", "excluded", "max_relative_error", "tolerance",
               "richardson_median_ratio", "richardson_samples", "passed"};
  t.rows.push_back({std::to_string(rep.pairs), std::to_string(rep.coordinates), std::to_string(rep.excluded),
                    format_double(rep.max_relative_error), format_double(cfg.gradcheck.tolerance),
                    format_double(rep.richardson_median_ratio), std::to_string(rep.richardson_samples),
                    rep.passed ? "1" : "0"});
  write_csv(cfg.output_dir / "gradcheck.csv", t);
  return rep;
}

}  // namespace svmu
