#include "fdseg/experiments.hpp"

#include <atomic>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <exception>
#include <fstream>
#include <iostream>
#include <map>
#include <mutex>
#include <optional>
#include <random>
#include <sstream>
#include <thread>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "fdseg/report.hpp"

namespace fdseg {

using nlohmann::json;

// ---------------------------------------------------------------------------
// Configuration

void ExperimentConfig::resolve() {
  base.validate();
  novel.validate();
  if (novel.image_height != base.image_height || novel.image_width != base.image_width) {
    throw ConfigError("base and novel sites must share one image size");
  }
  model.input_height = base.image_height;
  model.input_width = base.image_width;
  model.validate();
  train.validate();
  if (site != "base" && site != "novel") throw ConfigError("site must be 'base' or 'novel', got '" + site + "'");
  if (seeds.empty()) throw ConfigError("seeds must not be empty");
  if (modes.empty()) throw ConfigError("modes must not be empty");
  for (double f : fractions)
    if (f < 0.0 || f > 1.0) throw ConfigError("fractions must lie in [0, 1]");
  for (double s : sigmas)
    if (s < 0.0) throw ConfigError("noise sigmas must be >= 0");
  if (base_samples < 10 || novel_samples < 10) throw ConfigError("sites need at least 10 samples each");
  if (lemma1_samples < 1) throw ConfigError("lemma1-samples must be >= 1");
  if (mediation_n < 10000) throw ConfigError("mediation-n must be >= 10000");
}

namespace {

json site_json(const SiteConfig& s) { return json::parse(site_to_json(s)); }

json config_json(const ExperimentConfig& c) {
  json modes = json::array();
  for (auto m : c.modes) modes.push_back(to_string(m));
  json inputs = json::array();
  for (const auto& p : c.inputs) inputs.push_back(p.generic_string());
  return {
      {"command", c.command},
      {"out", c.out.generic_string()},
      {"seed", c.seed},
      {"seeds", c.seeds},
      {"site", c.site},
      {"base", site_json(c.base)},
      {"novel", site_json(c.novel)},
      {"base_samples", c.base_samples},
      {"novel_samples", c.novel_samples},
      {"data_dir", c.data_dir.generic_string()},
      {"model", json::parse(config_to_json(c.model))},
      {"train",
       {{"phase1_epochs", c.train.phase1_epochs},
        {"phase2_epochs", c.train.phase2_epochs},
        {"batch_size", c.train.batch_size},
        {"lr", c.train.lr},
        {"momentum", c.train.momentum},
        {"loss_mode", to_string(c.train.loss_mode)},
        {"tau", c.train.tau},
        {"eta_alpha", c.train.eta_alpha},
        {"alpha_max", c.train.alpha_max},
        {"augment", c.train.augment}}},
      {"modes", modes},
      {"fractions", c.fractions},
      {"sigmas", c.sigmas},
      {"cap_novel_at_base", c.cap_novel_at_base},
      {"lemma1_samples", c.lemma1_samples},
      {"mediation_a", c.mediation_a},
      {"mediation_b", c.mediation_b},
      {"mediation_n", c.mediation_n},
      {"weight_norm_d", c.weight_norm_d},
      {"weight_norm_steps", c.weight_norm_steps},
      {"weight_norm_lr", c.weight_norm_lr},
      {"inputs", inputs},
  };
}

}  // namespace

std::string config_to_json(const ExperimentConfig& config) { return config_json(config).dump(2); }

ExperimentConfig experiment_config_from_json(const std::string& text, ExperimentConfig c) {
  try {
    json j = json::parse(text);
    if (j.contains("config") && j["config"].is_object()) j = j["config"];
    if (!j.is_object()) throw ConfigError("config file must hold a JSON object");
    c.command = j.value("command", c.command);
    if (j.contains("out")) c.out = j["out"].get<std::string>();
    c.seed = j.value("seed", c.seed);
    c.seeds = j.value("seeds", c.seeds);
    c.site = j.value("site", c.site);
    if (j.contains("base")) c.base = site_from_json(j["base"].dump());
    if (j.contains("novel")) c.novel = site_from_json(j["novel"].dump());
    c.base_samples = j.value("base_samples", c.base_samples);
    c.novel_samples = j.value("novel_samples", c.novel_samples);
    if (j.contains("data_dir")) c.data_dir = j["data_dir"].get<std::string>();
    if (j.contains("model")) c.model = config_from_json(j["model"].dump());
    if (j.contains("train")) {
      const json& t = j["train"];
      c.train.phase1_epochs = t.value("phase1_epochs", c.train.phase1_epochs);
      c.train.phase2_epochs = t.value("phase2_epochs", c.train.phase2_epochs);
      c.train.batch_size = t.value("batch_size", c.train.batch_size);
      c.train.lr = t.value("lr", c.train.lr);
      c.train.momentum = t.value("momentum", c.train.momentum);
      if (t.contains("loss_mode")) c.train.loss_mode = parse_loss_mode(t["loss_mode"].get<std::string>());
      c.train.tau = t.value("tau", c.train.tau);
      c.train.eta_alpha = t.value("eta_alpha", c.train.eta_alpha);
      c.train.alpha_max = t.value("alpha_max", c.train.alpha_max);
      c.train.augment = t.value("augment", c.train.augment);
    }
    if (j.contains("modes")) {
      c.modes.clear();
      for (const auto& m : j["modes"]) c.modes.push_back(parse_loss_mode(m.get<std::string>()));
    }
    c.fractions = j.value("fractions", c.fractions);
    c.sigmas = j.value("sigmas", c.sigmas);
    c.cap_novel_at_base = j.value("cap_novel_at_base", c.cap_novel_at_base);
    c.lemma1_samples = j.value("lemma1_samples", c.lemma1_samples);
    c.mediation_a = j.value("mediation_a", c.mediation_a);
    c.mediation_b = j.value("mediation_b", c.mediation_b);
    c.mediation_n = j.value("mediation_n", c.mediation_n);
    c.weight_norm_d = j.value("weight_norm_d", c.weight_norm_d);
    c.weight_norm_steps = j.value("weight_norm_steps", c.weight_norm_steps);
    c.weight_norm_lr = j.value("weight_norm_lr", c.weight_norm_lr);
    if (j.contains("inputs")) {
      c.inputs.clear();
      for (const auto& p : j["inputs"]) c.inputs.emplace_back(p.get<std::string>());
    }
  } catch (const json::exception& e) {
    throw ConfigError(std::string("config JSON: ") + e.what());
  }
  return c;
}

std::string manifest_json(const ExperimentConfig& config) {
  const json j = {{"command", config.command}, {"config", config_json(config)}, {"version", FDSEG_VERSION}};
  return j.dump(2) + "\n";
}

// ---------------------------------------------------------------------------
// Worker pool

int worker_count() {
  if (const char* env = std::getenv("FDSEG_WORKERS"); env && *env) {
    char* end = nullptr;
    const long v = std::strtol(env, &end, 10);
    if (*end != '\0' || v < 1) throw ConfigError(std::string("FDSEG_WORKERS must be a positive integer, got '") + env + "'");
    return static_cast<int>(v);
  }
  return std::max(1u, std::thread::hardware_concurrency());
}

void parallel_for(std::size_t n, int workers, const std::function<void(std::size_t)>& task) {
  if (n == 0) return;
  const std::size_t width = std::min<std::size_t>(n, static_cast<std::size_t>(std::max(1, workers)));
  if (width == 1) {
    for (std::size_t i = 0; i < n; ++i) task(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr failure;
  std::mutex failure_mutex;
  std::vector<std::thread> pool;
  for (std::size_t w = 0; w < width; ++w) {
    pool.emplace_back([&] {
      for (std::size_t i = next++; i < n; i = next++) {
        try {
          task(i);
        } catch (...) {
          std::lock_guard lock(failure_mutex);
          if (!failure) failure = std::current_exception();
        }
      }
    });
  }
  for (auto& t : pool) t.join();
  if (failure) std::rethrow_exception(failure);
}

// ---------------------------------------------------------------------------
// Cells

DatasetSplit make_site_split(const SiteConfig& site, int n, std::uint64_t seed, Source source) {
  const std::uint64_t tag = source == Source::Base ? 0xBA5E : 0x40E1;
  auto samples = generate_site(site, n, mix_seed(seed, tag), source);
  return split_dataset(std::move(samples), {0.7, 0.2, 0.1}, mix_seed(seed, tag + 1));
}

CellResult run_cell(const UNetConfig& model, TrainConfig train_cfg, const DatasetSplit& data, std::uint64_t seed,
                    LossMode mode, std::string condition) {
  CellResult cell;
  cell.condition = std::move(condition);
  cell.seed = seed;
  cell.mode = mode;
  train_cfg.seed = seed;
  train_cfg.loss_mode = mode;
  try {
    const TrainResult r = train(train_cfg, init_params(model, seed), data);
    cell.records = evaluate(r.best_model, data.test);
    double iou = 0.0;
    for (const auto& rec : cell.records) iou += rec.iou;
    cell.test_dice = mean_dice(cell.records);
    cell.test_iou = iou / static_cast<double>(cell.records.size());
  } catch (const TrainingAborted& e) {
    cell.status = "aborted";
    cell.test_dice = cell.test_iou = std::nan("");
    std::fprintf(stderr, "cell %s/%s/seed %llu aborted: %s\n", cell.condition.c_str(), to_string(mode).c_str(),
                 static_cast<unsigned long long>(seed), e.what());
  } catch (const Error& e) {
    cell.status = "error";
    cell.test_dice = cell.test_iou = std::nan("");
    std::fprintf(stderr, "cell %s/%s/seed %llu failed: %s\n", cell.condition.c_str(), to_string(mode).c_str(),
                 static_cast<unsigned long long>(seed), e.what());
  }
  return cell;
}

DatasetSplit data_addition_split(const DatasetSplit& base, const DatasetSplit& novel, double fraction,
                                 bool cap_novel_at_base) {
  if (fraction < 0.0 || fraction > 1.0) throw ContractError("data_addition_split: fraction must lie in [0, 1]");
  std::size_t k = static_cast<std::size_t>(std::llround(fraction * static_cast<double>(novel.train.size())));
  if (cap_novel_at_base) k = std::min(k, base.train.size());
  DatasetSplit out = base;
  out.train.insert(out.train.end(), novel.train.begin(), novel.train.begin() + static_cast<std::ptrdiff_t>(k));
  return out;
}

DatasetSplit noisy_split(const DatasetSplit& data, double sigma, std::uint64_t seed) {
  DatasetSplit out;
  auto apply = [&](const std::vector<SiteSample>& in, std::vector<SiteSample>& dst, std::uint64_t tag) {
    for (const auto& s : in) dst.push_back(add_gaussian_noise(s, sigma, mix_seed(mix_seed(seed, tag), s.id)));
  };
  apply(data.train, out.train, 1);
  apply(data.test, out.test, 2);
  apply(data.val, out.val, 3);
  return out;
}

std::string condition_label(double value) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.6g", value);
  return buf;
}

namespace {

struct CellSpec {
  std::size_t data_index;
  std::string condition;
  std::uint64_t seed;
  LossMode mode;
};

std::vector<CellResult> run_cells(const ExperimentConfig& config, const std::vector<DatasetSplit>& datasets,
                                  const std::vector<CellSpec>& specs) {
  std::vector<CellResult> results(specs.size());
  std::mutex log_mutex;
  std::size_t done = 0;
  parallel_for(specs.size(), worker_count(), [&](std::size_t i) {
    const auto& s = specs[i];
    results[i] = run_cell(config.model, config.train, datasets[s.data_index], s.seed, s.mode, s.condition);
    std::lock_guard lock(log_mutex);
    ++done;
    std::fprintf(stderr, "[%zu/%zu] condition=%s mode=%s seed=%llu dice=%.4f %s\n", done, specs.size(),
                 s.condition.c_str(), to_string(s.mode).c_str(), static_cast<unsigned long long>(s.seed),
                 results[i].test_dice, results[i].status.c_str());
  });
  return results;
}

std::pair<DatasetSplit, DatasetSplit> site_pair(const ExperimentConfig& c, std::uint64_t seed) {
  if (!c.data_dir.empty()) {
    auto [bs, bsamples] = load_site_dataset(c.data_dir / c.base.name, Source::Base);
    auto [ns, nsamples] = load_site_dataset(c.data_dir / c.novel.name, Source::Novel);
    return {split_dataset(std::move(bsamples), {0.7, 0.2, 0.1}, mix_seed(seed, 0xBA5F)),
            split_dataset(std::move(nsamples), {0.7, 0.2, 0.1}, mix_seed(seed, 0x40E2))};
  }
  return {make_site_split(c.base, c.base_samples, seed, Source::Base),
          make_site_split(c.novel, c.novel_samples, seed, Source::Novel)};
}

}  // namespace

std::vector<CellResult> data_addition_sweep(const ExperimentConfig& config) {
  std::vector<DatasetSplit> datasets;
  std::vector<CellSpec> specs;
  std::map<std::pair<std::size_t, std::size_t>, std::size_t> index;
  for (std::size_t si = 0; si < config.seeds.size(); ++si) {
    const auto [base, novel] = site_pair(config, config.seeds[si]);
    for (std::size_t fi = 0; fi < config.fractions.size(); ++fi) {
      index[{fi, si}] = datasets.size();
      datasets.push_back(data_addition_split(base, novel, config.fractions[fi], config.cap_novel_at_base));
    }
  }
  for (std::size_t fi = 0; fi < config.fractions.size(); ++fi)
    for (LossMode m : config.modes)
      for (std::size_t si = 0; si < config.seeds.size(); ++si)
        specs.push_back({index[{fi, si}], condition_label(config.fractions[fi]), config.seeds[si], m});
  return run_cells(config, datasets, specs);
}

std::vector<CellResult> noise_sweep(const ExperimentConfig& config) {
  std::vector<DatasetSplit> datasets;
  std::vector<CellSpec> specs;
  std::map<std::pair<std::size_t, std::size_t>, std::size_t> index;
  for (std::size_t si = 0; si < config.seeds.size(); ++si) {
    const std::uint64_t seed = config.seeds[si];
    const DatasetSplit base = site_pair(config, seed).first;
    for (std::size_t ni = 0; ni < config.sigmas.size(); ++ni) {
      index[{ni, si}] = datasets.size();
      datasets.push_back(noisy_split(base, config.sigmas[ni], mix_seed(seed, 0x4015E)));
    }
  }
  for (std::size_t ni = 0; ni < config.sigmas.size(); ++ni)
    for (LossMode m : config.modes)
      for (std::size_t si = 0; si < config.seeds.size(); ++si)
        specs.push_back({index[{ni, si}], condition_label(config.sigmas[ni]), config.seeds[si], m});
  return run_cells(config, datasets, specs);
}

std::string sweep_csv(const std::vector<CellResult>& cells) {
  std::ostringstream os;
  os << "condition,seed,loss_mode,test_dice_base,test_iou_base,status\n";
  for (const auto& c : cells) {
    os << c.condition << "," << c.seed << "," << to_string(c.mode) << ","
       << (c.status == "ok" ? format_number(c.test_dice) : "nan") << ","
       << (c.status == "ok" ? format_number(c.test_iou) : "nan") << "," << c.status << "\n";
  }
  return os.str();
}

std::string sweep_summary_csv(const std::vector<CellResult>& cells) {
  std::vector<std::pair<std::string, std::string>> keys;
  std::map<std::pair<std::string, std::string>, std::pair<std::vector<double>, std::vector<double>>> groups;
  for (const auto& c : cells) {
    const std::pair key{c.condition, to_string(c.mode)};
    if (!groups.contains(key)) keys.push_back(key);
    auto& g = groups[key];
    if (c.status == "ok") {
      g.first.push_back(c.test_dice);
      g.second.push_back(c.test_iou);
    }
  }
  auto mean_sd = [](const std::vector<double>& v) -> std::pair<double, double> {
    if (v.empty()) return {std::nan(""), std::nan("")};
    double m = 0.0;
    for (double x : v) m += x;
    m /= static_cast<double>(v.size());
    double ss = 0.0;
    for (double x : v) ss += (x - m) * (x - m);
    return {m, v.size() > 1 ? std::sqrt(ss / static_cast<double>(v.size() - 1)) : 0.0};
  };
  std::ostringstream os;
  os << "condition,loss_mode,n,mean_dice,std_dice,mean_iou,std_iou\n";
  for (const auto& key : keys) {
    const auto& g = groups[key];
    const auto [md, sd] = mean_sd(g.first);
    const auto [mi, si] = mean_sd(g.second);
    os << key.first << "," << key.second << "," << g.first.size() << "," << format_number(md) << ","
       << format_number(sd) << "," << format_number(mi) << "," << format_number(si) << "\n";
  }
  return os.str();
}

// ---------------------------------------------------------------------------
// Theory checks

namespace {

double mediation_tolerance(double base_tol, double b, int n) {
  return base_tol * std::sqrt(1e5 / n) * std::sqrt((1.0 + b * b) / 2.0);
}

}  // namespace

std::vector<CheckReport> lemma_checks(const ExperimentConfig& config) {
  std::vector<CheckReport> out;

  {
    const auto sweep = lemma1_sweep(config.lemma1_samples, config.seed);
    std::vector<double> y = {1, 1, 0, 0, 1, 0};
    const auto exact = lemma1_check(y, 1, y, y);
    CheckReport r;
    r.check = "lemma1";
    r.params = json{{"instances", config.lemma1_samples}, {"seed", config.seed}}.dump();
    r.result = json{{"instances", sweep.instances},
                    {"violations", sweep.violations},
                    {"violation_rate", sweep.violation_rate},
                    {"min_gap", sweep.min_gap},
                    {"identity_instance", {{"lhs", exact.lhs}, {"rhs", exact.rhs}, {"holds", exact.holds}}}}
                   .dump();
    r.holds = sweep.violations == 0;
    r.asserted = false;
    out.push_back(r);
  }

  {
    std::mt19937_64 rng(mix_seed(config.seed, 0x1E2));
    std::normal_distribution<double> normal(0.0, 1.0);
    std::uniform_real_distribution<double> scale(0.1, 10.0);
    const int d = config.weight_norm_d;
    double grad_err = 0.0, dx_err = 0.0, w_err = 0.0;
    const int triples = 20;
    for (int t = 0; t < triples; ++t) {
      std::vector<double> w(d * d), dx(d * d);
      for (double& v : w) v = normal(rng);
      for (double& v : dx) v = normal(rng);
      const auto rep = lemma2_gradient(w, dx, d, scale(rng));
      grad_err = std::max(grad_err, rep.max_rel_error);
      dx_err = std::max(dx_err, rep.scale_dx_invariance_error);
      w_err = std::max(w_err, rep.scale_w_ratio_error);
    }
    CheckReport r;
    r.check = "lemma2_gradient";
    r.params = json{{"d", d}, {"triples", triples}, {"seed", config.seed}}.dump();
    r.result = json{{"max_rel_error", grad_err}, {"scale_dx_invariance_error", dx_err}, {"scale_w_ratio_error", w_err}}
                   .dump();
    r.holds = grad_err < 1e-5 && dx_err < 1e-10 && w_err < 1e-10;
    out.push_back(r);
  }

  {
    std::vector<std::uint64_t> seeds = config.seeds;
    for (std::uint64_t s = 0; seeds.size() < 5; ++s)
      if (std::find(seeds.begin(), seeds.end(), s) == seeds.end()) seeds.push_back(s);
    const auto wn = weight_norm_experiment(config.weight_norm_d, config.weight_norm_steps, config.weight_norm_lr, seeds);
    json runs = json::array();
    for (const auto& run : wn.runs) {
      runs.push_back({{"seed", run.seed},
                      {"init_norm", run.init_norm},
                      {"norm_log", run.norm_log},
                      {"norm_linear", run.norm_linear},
                      {"log_diverged", run.log_diverged},
                      {"linear_diverged", run.linear_diverged}});
    }
    CheckReport r;
    r.check = "lemma2_weight_norm";
    r.params = json{{"d", config.weight_norm_d},
                    {"steps", config.weight_norm_steps},
                    {"lr", config.weight_norm_lr},
                    {"seeds", seeds}}
                   .dump();
    r.result = json{{"runs", runs}, {"ordered", wn.ordered}, {"total", wn.runs.size()}}.dump();
    r.holds = wn.ordered == static_cast<int>(wn.runs.size());
    out.push_back(r);
  }

  {
    const double a = config.mediation_a, b = config.mediation_b;
    const auto m = mediation_mc(a, b, config.mediation_n, config.seed);
    const double slope_tol = mediation_tolerance(0.03, b, config.mediation_n);
    const double var_tol = mediation_tolerance(0.05, b, config.mediation_n) * std::sqrt((1.0 + b * b) / 2.0);
    CheckReport r;
    r.check = "mediation";
    r.params = json{{"a", a}, {"b", b}, {"n", config.mediation_n}, {"seed", config.seed}}.dump();
    r.result = json{{"slope_hat", m.slope},
                    {"var_hat", m.residual_variance},
                    {"slope_expected", a * b},
                    {"var_expected", 1.0 + b * b},
                    {"slope_tolerance", slope_tol},
                    {"var_tolerance", var_tol}}
                   .dump();
    r.holds = std::abs(m.slope - a * b) <= slope_tol && std::abs(m.residual_variance - (1.0 + b * b)) <= var_tol;
    out.push_back(r);
  }
  return out;
}

std::string check_report_json(const CheckReport& report) {
  const json j = {{"check", report.check},
                  {"params", json::parse(report.params)},
                  {"result", json::parse(report.result)},
                  {"holds", report.holds},
                  {"asserted", report.asserted}};
  return j.dump(2) + "\n";
}

// ---------------------------------------------------------------------------
// CLI

namespace {

void write_text(const std::filesystem::path& p, const std::string& text) {
  std::ofstream os(p, std::ios::binary);
  if (!os) throw Error("cannot write " + p.string());
  os << text;
}

void prepare_out(const ExperimentConfig& c, bool force) {
  if (c.out.empty()) throw ConfigError("--out is required");
  if (std::filesystem::exists(c.out) && !std::filesystem::is_empty(c.out) && !force) {
    throw ConfigError("output directory " + c.out.string() + " is not empty; pass --force to overwrite");
  }
  std::filesystem::create_directories(c.out);
}

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::string cur;
  for (char ch : s) {
    if (ch == ',') {
      out.push_back(cur);
      cur.clear();
    } else if (ch != ' ') {
      cur.push_back(ch);
    }
  }
  if (!cur.empty()) out.push_back(cur);
  return out;
}

double parse_fraction(const std::string& s) {
  try {
    const auto slash = s.find('/');
    if (slash != std::string::npos) return std::stod(s.substr(0, slash)) / std::stod(s.substr(slash + 1));
    std::size_t used = 0;
    const double v = std::stod(s, &used);
    if (used != s.size()) throw std::invalid_argument(s);
    return v;
  } catch (const std::exception&) {
    throw ConfigError("not a number: '" + s + "'");
  }
}

struct Flags {
  std::string config_file;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> seeds;
  std::optional<std::string> out;
  bool force = false;
  std::optional<std::string> site, loss, modes, fractions, sigmas, data_dir;
  std::optional<int> phase1, phase2, batch, samples, novel_samples, image_size, depth, base_channels;
  std::optional<double> lr, momentum, tau, eta_alpha, alpha_max;
  std::optional<bool> augment;
  bool cap_novel = false;
  std::optional<int> lemma1_samples, mediation_n, wn_d, wn_steps;
  std::optional<double> mediation_a, mediation_b, wn_lr;
  std::vector<std::string> inputs;
};

void add_common(CLI::App* sub, Flags& f) {
  sub->add_option("--config", f.config_file, "JSON config or manifest.json; flags override it");
  sub->add_option("--seed", f.seed, "Seed for a single run");
  sub->add_option("--seeds", f.seeds, "Comma-separated seeds for sweeps");
  sub->add_option("--out", f.out, "Output directory");
  sub->add_flag("--force", f.force, "Allow writing into a non-empty output directory");
}

void add_data(CLI::App* sub, Flags& f) {
  sub->add_option("--samples", f.samples, "Samples generated for the base site");
  sub->add_option("--novel-samples", f.novel_samples, "Samples generated for the novel site");
  sub->add_option("--image-size", f.image_size, "Square image size of both sites");
  sub->add_option("--data-dir", f.data_dir, "Load sites from a gen-data directory instead of generating");
}

void add_training(CLI::App* sub, Flags& f) {
  add_data(sub, f);
  sub->add_option("--phase1-epochs", f.phase1);
  sub->add_option("--phase2-epochs", f.phase2);
  sub->add_option("--batch-size", f.batch);
  sub->add_option("--lr", f.lr);
  sub->add_option("--momentum", f.momentum);
  sub->add_option("--tau", f.tau);
  sub->add_option("--eta-alpha", f.eta_alpha);
  sub->add_option("--alpha-max", f.alpha_max);
  sub->add_option("--augment", f.augment, "flip/rotate the training split (true/false)");
  sub->add_option("--depth", f.depth);
  sub->add_option("--base-channels", f.base_channels);
}

ExperimentConfig resolve_flags(const std::string& command, const Flags& f) {
  ExperimentConfig c;
  if (!f.config_file.empty()) {
    std::ifstream is(f.config_file, std::ios::binary);
    if (!is) throw ConfigError("cannot open config file " + f.config_file);
    std::ostringstream ss;
    ss << is.rdbuf();
    c = experiment_config_from_json(ss.str());
  }
  c.command = command;
  if (f.seed) c.seed = *f.seed;
  if (f.seeds) {
    c.seeds.clear();
    for (const auto& s : split_list(*f.seeds)) {
      try {
        c.seeds.push_back(std::stoull(s));
      } catch (const std::exception&) {
        throw ConfigError("bad seed '" + s + "'");
      }
    }
  }
  if (f.out) c.out = *f.out;
  if (f.site) c.site = *f.site;
  if (f.loss) c.train.loss_mode = parse_loss_mode(*f.loss);
  if (f.modes) {
    c.modes.clear();
    for (const auto& m : split_list(*f.modes)) c.modes.push_back(parse_loss_mode(m));
  }
  if (f.fractions) {
    c.fractions.clear();
    for (const auto& s : split_list(*f.fractions)) c.fractions.push_back(parse_fraction(s));
  }
  if (f.sigmas) {
    c.sigmas.clear();
    for (const auto& s : split_list(*f.sigmas)) c.sigmas.push_back(parse_fraction(s));
  }
  if (f.data_dir) c.data_dir = *f.data_dir;
  if (f.samples) c.base_samples = *f.samples;
  if (f.novel_samples) c.novel_samples = *f.novel_samples;
  if (f.image_size) {
    c.base.image_height = c.base.image_width = *f.image_size;
    c.novel.image_height = c.novel.image_width = *f.image_size;
  }
  if (f.depth) c.model.depth = *f.depth;
  if (f.base_channels) c.model.base_channels = *f.base_channels;
  if (f.phase1) c.train.phase1_epochs = *f.phase1;
  if (f.phase2) c.train.phase2_epochs = *f.phase2;
  if (f.batch) c.train.batch_size = *f.batch;
  if (f.lr) c.train.lr = *f.lr;
  if (f.momentum) c.train.momentum = *f.momentum;
  if (f.tau) c.train.tau = *f.tau;
  if (f.eta_alpha) c.train.eta_alpha = *f.eta_alpha;
  if (f.alpha_max) c.train.alpha_max = *f.alpha_max;
  if (f.augment) c.train.augment = *f.augment;
  if (f.cap_novel) c.cap_novel_at_base = true;
  if (f.lemma1_samples) c.lemma1_samples = *f.lemma1_samples;
  if (f.mediation_a) c.mediation_a = *f.mediation_a;
  if (f.mediation_b) c.mediation_b = *f.mediation_b;
  if (f.mediation_n) c.mediation_n = *f.mediation_n;
  if (f.wn_d) c.weight_norm_d = *f.wn_d;
  if (f.wn_steps) c.weight_norm_steps = *f.wn_steps;
  if (f.wn_lr) c.weight_norm_lr = *f.wn_lr;
  if (!f.inputs.empty()) {
    c.inputs.clear();
    for (const auto& p : f.inputs) c.inputs.emplace_back(p);
  }
  c.resolve();
  return c;
}

int cmd_train(const ExperimentConfig& c, bool force) {
  prepare_out(c, force);
  const bool novel = c.site == "novel";
  DatasetSplit data;
  if (!c.data_dir.empty()) {
    const SiteConfig& sc = novel ? c.novel : c.base;
    auto [site, samples] = load_site_dataset(c.data_dir / sc.name, novel ? Source::Novel : Source::Base);
    data = split_dataset(std::move(samples), {0.7, 0.2, 0.1}, mix_seed(c.seed, novel ? 0x40E2 : 0xBA5F));
  } else {
    data = make_site_split(novel ? c.novel : c.base, novel ? c.novel_samples : c.base_samples, c.seed,
                           novel ? Source::Novel : Source::Base);
  }
  write_text(c.out / "manifest.json", manifest_json(c));
  TrainConfig tc = c.train;
  tc.seed = c.seed;
  try {
    const TrainResult r = train(tc, init_params(c.model, c.seed), data);
    save_checkpoint(r.best_model, c.out / "model.ckpt");
    std::ostringstream history, evals;
    write_history_csv(history, r);
    const auto records = evaluate(r.best_model, data.test, 0.5, r.best_step);
    write_eval_csv(evals, records);
    write_text(c.out / "history.csv", history.str());
    write_text(c.out / "eval.csv", evals.str());
    std::printf("best epoch %d, val dice %.4f, test dice %.4f\n", r.best_epoch, r.best_val_dice, mean_dice(records));
  } catch (const TrainingAborted& e) {
    save_checkpoint(e.last_good(), c.out / "last_good.ckpt");
    std::fprintf(stderr, "training aborted (tap %s): %s\n", e.tap().c_str(), e.what());
    return 3;
  }
  return 0;
}

int cmd_gen_data(const ExperimentConfig& c, bool force) {
  prepare_out(c, force);
  const auto base = generate_site(c.base, c.base_samples, mix_seed(c.seed, 0xBA5E), Source::Base);
  const auto novel = generate_site(c.novel, c.novel_samples, mix_seed(c.seed, 0x40E1), Source::Novel);
  save_site_dataset(c.out, c.base, base);
  save_site_dataset(c.out, c.novel, novel);
  write_text(c.out / "manifest.json", manifest_json(c));
  return 0;
}

void write_sweep(const ExperimentConfig& c, const std::vector<CellResult>& cells) {
  write_text(c.out / "sweep.csv", sweep_csv(cells));
  write_text(c.out / "summary.csv", sweep_summary_csv(cells));
  try {
    write_report(c.out / "sweep.csv", c.out);
  } catch (const ValidationError& e) {
    std::fprintf(stderr, "no plot written: %s\n", e.what());
  }
}

int cmd_data_addition(const ExperimentConfig& c, bool force) {
  prepare_out(c, force);
  write_text(c.out / "manifest.json", manifest_json(c));
  write_sweep(c, data_addition_sweep(c));
  return 0;
}

int cmd_noise_sweep(const ExperimentConfig& c, bool force) {
  prepare_out(c, force);
  write_text(c.out / "manifest.json", manifest_json(c));
  const auto cells = noise_sweep(c);
  write_sweep(c, cells);

  // Dice dip from the cleanest to the noisiest condition, per mode and seed.
  const auto [lo, hi] = std::minmax_element(c.sigmas.begin(), c.sigmas.end());
  const std::string clean = condition_label(*lo), noisy = condition_label(*hi);
  std::ostringstream os;
  os << "loss_mode,seed,dice_clean,dice_noisy,dip\n";
  for (LossMode m : c.modes) {
    for (std::uint64_t s : c.seeds) {
      double d0 = std::nan(""), d1 = std::nan("");
      for (const auto& cell : cells) {
        if (cell.mode != m || cell.seed != s || cell.status != "ok") continue;
        if (cell.condition == clean) d0 = cell.test_dice;
        if (cell.condition == noisy) d1 = cell.test_dice;
      }
      os << to_string(m) << "," << s << "," << format_number(d0) << "," << format_number(d1) << ","
         << format_number(d0 - d1) << "\n";
    }
  }
  write_text(c.out / "dip.csv", os.str());
  return 0;
}

int cmd_lemma_checks(const ExperimentConfig& c, bool force) {
  prepare_out(c, force);
  write_text(c.out / "manifest.json", manifest_json(c));
  int failed = 0;
  for (const auto& r : lemma_checks(c)) {
    write_text(c.out / (r.check + ".json"), check_report_json(r));
    std::printf("%-20s %s%s\n", r.check.c_str(), r.holds ? "holds" : "does not hold",
                r.asserted ? "" : " (reported only)");
    if (r.asserted && !r.holds) ++failed;
  }
  return failed == 0 ? 0 : 1;
}

int cmd_report(const ExperimentConfig& c) {
  if (c.inputs.empty()) throw ConfigError("report needs at least one CSV path");
  for (const auto& csv : c.inputs) {
    const auto out = c.out.empty() ? csv.parent_path() : c.out;
    for (const auto& p : write_report(csv, out)) std::printf("%s\n", p.string().c_str());
  }
  return 0;
}

}  // namespace

int run_cli(int argc, const char* const* argv) {
  CLI::App app{"Feature-discrepancy segmentation experiments on synthetic sites", "fdseg"};
  app.require_subcommand(1);
  Flags f;

  auto* train_cmd = app.add_subcommand("train", "Train one model and evaluate it on the test split");
  add_common(train_cmd, f);
  add_training(train_cmd, f);
  train_cmd->add_option("--site", f.site, "base or novel");
  train_cmd->add_option("--loss", f.loss, "seg_only, seg+fd, seg+fd+exch, seg+con_stub, seg+deeps_stub");

  auto* gen_cmd = app.add_subcommand("gen-data", "Write the base and novel synthetic sites as PGM files");
  add_common(gen_cmd, f);
  add_data(gen_cmd, f);

  auto* add_cmd = app.add_subcommand("data-addition", "Add fractions of the novel site to base training");
  add_common(add_cmd, f);
  add_training(add_cmd, f);
  add_cmd->add_option("--modes", f.modes, "Comma-separated loss modes");
  add_cmd->add_option("--fractions", f.fractions, "Comma-separated fractions, e.g. 0,1/16,1");
  add_cmd->add_flag("--cap-novel-at-base", f.cap_novel, "Never add more novel samples than base train samples");

  auto* noise_cmd = app.add_subcommand("noise-sweep", "Train with Gaussian noise at several sigmas");
  add_common(noise_cmd, f);
  add_training(noise_cmd, f);
  noise_cmd->add_option("--modes", f.modes, "Comma-separated loss modes");
  noise_cmd->add_option("--sigmas", f.sigmas, "Comma-separated noise levels");

  auto* lemma_cmd = app.add_subcommand("lemma-checks", "Run the theory checks and write JSON reports");
  add_common(lemma_cmd, f);
  lemma_cmd->add_option("--lemma1-samples", f.lemma1_samples);
  lemma_cmd->add_option("--mediation-a", f.mediation_a);
  lemma_cmd->add_option("--mediation-b", f.mediation_b);
  lemma_cmd->add_option("--mediation-n", f.mediation_n);
  lemma_cmd->add_option("--weight-norm-d", f.wn_d);
  lemma_cmd->add_option("--weight-norm-steps", f.wn_steps);
  lemma_cmd->add_option("--weight-norm-lr", f.wn_lr);

  auto* report_cmd = app.add_subcommand("report", "Render sweep CSVs as SVG charts");
  add_common(report_cmd, f);
  report_cmd->add_option("csv", f.inputs, "Sweep CSV files")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }

  const std::string command = app.get_subcommands().front()->get_name();
  try {
    const ExperimentConfig c = resolve_flags(command, f);
    if (command == "train") return cmd_train(c, f.force);
    if (command == "gen-data") return cmd_gen_data(c, f.force);
    if (command == "data-addition") return cmd_data_addition(c, f.force);
    if (command == "noise-sweep") return cmd_noise_sweep(c, f.force);
    if (command == "lemma-checks") return cmd_lemma_checks(c, f.force);
    return cmd_report(c);
  } catch (const ConfigError& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return 2;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
}

}  // namespace fdseg
