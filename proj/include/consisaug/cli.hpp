#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <exception>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <mutex>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "consisaug/checkpoint.hpp"
#include "consisaug/data.hpp"
#include "consisaug/eval.hpp"
#include "consisaug/gradcheck_suite.hpp"
#include "consisaug/trainer.hpp"

namespace consisaug::cli {

namespace fs = std::filesystem;

// Exit-code contract: 0 success, 2 usage, 3 I/O, 4 numeric failure,
// 5 verification failure.
inline int exit_code_for(const Error& e) {
  switch (e.code()) {
    case ErrorCode::InvalidConfig:
    case ErrorCode::InvalidThresholds:
    case ErrorCode::InvalidImageSize:
      return 2;
    case ErrorCode::IoError:
    case ErrorCode::MissingLabel:
    case ErrorCode::CorruptImage:
    case ErrorCode::ParseError:
    case ErrorCode::BadMagic:
    case ErrorCode::VersionMismatch:
    case ErrorCode::ArchMismatch:
    case ErrorCode::Truncated:
    case ErrorCode::ChecksumMismatch:
      return 3;
    case ErrorCode::NonFiniteLoss:
      return 4;
    default:
      return 1;
  }
}

/// `key = value` file, one pair per line, '#' comments.
inline std::vector<std::pair<std::string, std::string>> parse_config_file(const fs::path& path) {
  std::ifstream f(path);
  if (!f) raise(ErrorCode::IoError, "cannot open config file " + path.string());
  std::vector<std::pair<std::string, std::string>> pairs;
  std::string line;
  int line_no = 0;
  auto trim = [](std::string s) {
    const auto b = s.find_first_not_of(" \t\r");
    const auto e = s.find_last_not_of(" \t\r");
    return b == std::string::npos ? std::string() : s.substr(b, e - b + 1);
  };
  while (std::getline(f, line)) {
    ++line_no;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      raise(ErrorCode::ParseError,
            path.string() + ":" + std::to_string(line_no) + ": expected `key = value`");
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    if (key.empty())
      raise(ErrorCode::ParseError, path.string() + ":" + std::to_string(line_no) + ": empty key");
    pairs.emplace_back(key, value);
  }
  return pairs;
}

inline std::map<std::string, std::string> config_file_map(const fs::path& path) {
  std::map<std::string, std::string> m;
  for (auto& [k, v] : parse_config_file(path)) m[k] = v;
  return m;
}

inline void write_text(const fs::path& path, const std::string& text) {
  write_file(path, std::vector<std::uint8_t>(text.begin(), text.end()));
}

namespace detail {

/// Expands `--config FILE` into `--key=value` tokens placed before the
/// explicit flags, so precedence is defaults < config file < command line
/// (later occurrences win; every option uses TakeLast).
inline std::vector<std::string> expand_config(const std::vector<std::string>& args) {
  std::string config_path;
  for (std::size_t i = 0; i < args.size(); ++i) {
    if (args[i] == "--config" && i + 1 < args.size()) config_path = args[i + 1];
    else if (args[i].rfind("--config=", 0) == 0) config_path = args[i].substr(9);
  }
  if (config_path.empty()) return args;
  std::vector<std::string> out;
  out.push_back(args[0]);  // subcommand name stays first
  for (auto& [k, v] : parse_config_file(config_path)) out.push_back("--" + k + "=" + v);
  out.insert(out.end(), args.begin() + 1, args.end());
  return out;
}

inline void take_last_all(CLI::App* app) {
  for (CLI::Option* opt : app->get_options())
    opt->multi_option_policy(CLI::MultiOptionPolicy::TakeLast);
}

}  // namespace detail

// ---------------------------------------------------------------------------
// gen-data
// ---------------------------------------------------------------------------

struct GenFlags {
  std::string out;
  int n_train = 500, n_val = 50, n_test = 50;
  int image_size = 64;
  std::uint64_t seed = 0;
  std::string domain = "a";

  std::string to_config_text() const {
    std::string s;
    s += "out = " + out + "\n";
    s += "n-train = " + std::to_string(n_train) + "\n";
    s += "n-val = " + std::to_string(n_val) + "\n";
    s += "n-test = " + std::to_string(n_test) + "\n";
    s += "image-size = " + std::to_string(image_size) + "\n";
    s += "seed = " + std::to_string(seed) + "\n";
    s += "domain = " + domain + "\n";
    return s;
  }
};

inline int run_gen_data(const GenFlags& flags) {
  if (flags.n_train < 1 || flags.n_val < 1 || flags.n_test < 1)
    raise(ErrorCode::InvalidConfig, "split sizes must be >= 1");
  if (flags.domain != "a" && flags.domain != "b")
    raise(ErrorCode::InvalidConfig, "domain must be `a` or `b`");
  const DomainConfig cfg =
      flags.domain == "a" ? DomainConfig::domain_a() : DomainConfig::domain_b();
  const fs::path out(flags.out);
  const std::array<std::pair<std::string, int>, 3> splits{
      std::pair<std::string, int>{"train", flags.n_train},
      {"val", flags.n_val},
      {"test", flags.n_test}};
  std::vector<ManifestEntry> all;
  for (std::size_t i = 0; i < splits.size(); ++i) {
    const auto& [name, n] = splits[i];
    const auto manifest = generate_synthetic(cfg, n, mix_seed(flags.seed, 0x5EED, i), out / name,
                                             flags.image_size);
    for (const auto& e : manifest) all.push_back({name + "/" + e.path, e.sha256});
  }
  std::sort(all.begin(), all.end(),
            [](const ManifestEntry& a, const ManifestEntry& b) { return a.path < b.path; });
  std::string mtext;
  for (const auto& e : all) mtext += e.path + " " + e.sha256 + "\n";
  write_text(out / "manifest.txt", mtext);
  write_text(out / "config.snapshot.cfg", flags.to_config_text());
  std::cout << "wrote " << all.size() << " files under " << out.string() << "\n";
  return 0;
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

inline int run_train(const TrainConfig& cfg) {
  cfg.validate();
  std::error_code ec;
  fs::create_directories(cfg.out_dir, ec);
  if (ec) raise(ErrorCode::IoError, "cannot create output directory " + cfg.out_dir);
  write_text(fs::path(cfg.out_dir) / "config.snapshot.cfg", cfg.to_config_text());
  const TrainResult r = train(cfg);
  std::cout << "trained " << mode_name(cfg.mode) << " seed " << cfg.seed << ": best val map50 "
            << r.best_map50 << " (epoch " << r.best_epoch << ")\n";
  return 0;
}

// ---------------------------------------------------------------------------
// eval
// ---------------------------------------------------------------------------

struct EvalFlags {
  std::string data;
  std::string split = "test";
  std::string ckpt;
  bool use_teacher = false;
  double conf = 0.25;
  double nms_iou = 0.45;
  int image_size = 0;   // 0: take from the checkpoint sidecar
  int num_classes = 0;  // 0: take from the checkpoint sidecar
  std::string out;

  std::string to_config_text() const {
    char buf[64];
    std::string s;
    s += "data = " + data + "\n";
    s += "split = " + split + "\n";
    s += "ckpt = " + ckpt + "\n";
    s += "use-teacher = " + std::string(use_teacher ? "true" : "false") + "\n";
    std::snprintf(buf, sizeof(buf), "conf = %.17g\n", conf);
    s += buf;
    std::snprintf(buf, sizeof(buf), "nms = %.17g\n", nms_iou);
    s += buf;
    s += "image-size = " + std::to_string(image_size) + "\n";
    s += "num-classes = " + std::to_string(num_classes) + "\n";
    if (!out.empty()) s += "out = " + out + "\n";
    return s;
  }
};

/// Produces the same JSON schema as the training metrics lines; loss and
/// lr fields are zero because no training step is involved.
inline nlohmann::ordered_json eval_report_json(const MetricsReport& rep, const std::string& split,
                                               const std::string& mode, std::uint64_t seed) {
  return nlohmann::ordered_json{
      {"epoch", -1},       {"split", split},   {"precision", rep.precision},
      {"recall", rep.recall}, {"map50", rep.map50}, {"f1", rep.f1},
      {"f2", rep.f2},      {"loss_sup", 0.0},  {"loss_con_loc", 0.0},
      {"loss_con_cls", 0.0}, {"lr", 0.0},      {"mode", mode},
      {"seed", seed}};
}

inline void load_params_from(const Checkpoint& ck, bool use_teacher, DetectorParams& params) {
  consisaug::detail::params_from_checkpoint(ck, use_teacher ? "teacher." : "student.", params);
}

inline MetricsReport evaluate_checkpoint(const fs::path& ckpt_path, const fs::path& dataset_dir,
                                         bool use_teacher, double conf, double nms_iou,
                                         int image_size_override = 0, int num_classes_override = 0,
                                         std::string* mode_out = nullptr,
                                         std::uint64_t* seed_out = nullptr) {
  if (!fs::exists(ckpt_path)) raise(ErrorCode::IoError, "checkpoint missing: " + ckpt_path.string());
  const Checkpoint ck = load_checkpoint(ckpt_path);

  ModelSpec spec;
  std::uint64_t seed = 0;
  std::string mode = "unknown";
  if (!ck.config_text.empty()) {
    std::map<std::string, std::string> kv;
    std::istringstream in(ck.config_text);
    std::string line;
    while (std::getline(in, line)) {
      const auto eq = line.find('=');
      if (eq == std::string::npos) continue;
      auto trim = [](std::string s) {
        const auto b = s.find_first_not_of(" \t\r");
        const auto e = s.find_last_not_of(" \t\r");
        return b == std::string::npos ? std::string() : s.substr(b, e - b + 1);
      };
      kv[trim(line.substr(0, eq))] = trim(line.substr(eq + 1));
    }
    if (kv.count("image-size")) spec.image_size = std::stoi(kv["image-size"]);
    if (kv.count("num-classes")) spec.num_classes = std::stoi(kv["num-classes"]);
    if (kv.count("seed")) seed = std::stoull(kv["seed"]);
    if (kv.count("mode")) mode = kv["mode"];
  }
  if (image_size_override > 0) spec.image_size = image_size_override;
  if (num_classes_override > 0) spec.num_classes = num_classes_override;
  spec.validate();
  if (ck.arch_hash != spec.arch_hash())
    raise(ErrorCode::ArchMismatch, "checkpoint architecture differs from the requested model");

  DetectorParams params = init_params(0, spec).student;
  load_params_from(ck, use_teacher, params);
  const auto dataset = load_dataset(dataset_dir);
  if (dataset.empty()) raise(ErrorCode::IoError, "no samples in " + dataset_dir.string());
  EvalConfig ecfg;
  ecfg.conf_threshold = conf;
  ecfg.nms_iou = nms_iou;
  ecfg.use_teacher = use_teacher;
  const MetricsReport rep = evaluate(params, dataset, spec, ecfg);
  if (mode_out) *mode_out = mode;
  if (seed_out) *seed_out = seed;
  return rep;
}

inline int run_eval(const EvalFlags& flags) {
  std::string mode;
  std::uint64_t seed = 0;
  const MetricsReport rep =
      evaluate_checkpoint(flags.ckpt, fs::path(flags.data) / flags.split, flags.use_teacher,
                          flags.conf, flags.nms_iou, flags.image_size, flags.num_classes, &mode,
                          &seed);
  const auto j = eval_report_json(rep, flags.split, mode, seed);
  std::cout << j.dump() << "\n";
  if (!flags.out.empty()) {
    std::error_code ec;
    fs::create_directories(flags.out, ec);
    if (ec) raise(ErrorCode::IoError, "cannot create output directory " + flags.out);
    write_text(fs::path(flags.out) / "report.json", j.dump() + "\n");
    write_text(fs::path(flags.out) / "config.snapshot.cfg", flags.to_config_text());
  }
  return 0;
}

// ---------------------------------------------------------------------------
// ablate
// ---------------------------------------------------------------------------

struct AblateFlags {
  std::string data;
  std::string out;
  std::vector<std::uint64_t> seeds{1, 2, 3};
  int jobs = 0;  // 0: hardware concurrency
  TrainConfig base;  // data_dir/out_dir/mode/seed are filled per cell

  std::string to_config_text() const {
    std::string s;
    s += "data = " + data + "\n";
    s += "out = " + out + "\n";
    s += "seeds = ";
    for (std::size_t i = 0; i < seeds.size(); ++i)
      s += (i ? "," : "") + std::to_string(seeds[i]);
    s += "\n";
    s += "jobs = " + std::to_string(jobs) + "\n";
    std::string base_text = base.to_config_text();
    // cell-specific keys are owned by the ablation driver
    std::istringstream in(base_text);
    std::string line;
    while (std::getline(in, line)) {
      if (line.rfind("data =", 0) == 0 || line.rfind("out =", 0) == 0 ||
          line.rfind("mode =", 0) == 0 || line.rfind("seed =", 0) == 0)
        continue;
      s += line + "\n";
    }
    return s;
  }
};

struct AblationCell {
  TrainMode mode;
  std::uint64_t seed;
  MetricsReport test_metrics;
  fs::path run_dir;
};

struct MeanStd {
  double mean = 0, std = 0;
};

inline MeanStd mean_std(const std::vector<double>& xs) {
  MeanStd r;
  if (xs.empty()) return r;
  for (double x : xs) r.mean += x;
  r.mean /= static_cast<double>(xs.size());
  if (xs.size() > 1) {
    double acc = 0;
    for (double x : xs) acc += (x - r.mean) * (x - r.mean);
    r.std = std::sqrt(acc / static_cast<double>(xs.size() - 1));
  }
  return r;
}

inline fs::path ablation_cell_dir(const fs::path& out, TrainMode mode, std::uint64_t seed) {
  return out / (std::string(mode_name(mode)) + "-seed" + std::to_string(seed));
}

/// Trains the four ablation modes for every seed (same data and per-seed
/// identical initialization across modes) and evaluates each best
/// checkpoint on the test split. Cells are independent and may run in
/// parallel threads; results are aggregated in a fixed order.
inline std::vector<AblationCell> run_ablation_cells(const AblateFlags& flags) {
  if (flags.seeds.empty()) raise(ErrorCode::InvalidConfig, "need at least one seed");
  std::vector<AblationCell> cells;
  for (const std::uint64_t seed : flags.seeds)
    for (const TrainMode mode : kAllTrainModes)
      cells.push_back(AblationCell{mode, seed, {}, ablation_cell_dir(flags.out, mode, seed)});

  std::atomic<std::size_t> next{0};
  std::mutex err_mutex;
  std::exception_ptr first_error;
  auto worker = [&] {
    for (;;) {
      const std::size_t i = next.fetch_add(1);
      if (i >= cells.size()) return;
      try {
        AblationCell& cell = cells[i];
        TrainConfig cfg = flags.base;
        cfg.data_dir = flags.data;
        cfg.out_dir = cell.run_dir.string();
        cfg.mode = cell.mode;
        cfg.seed = cell.seed;
        cfg.validate();
        std::error_code ec;
        fs::create_directories(cell.run_dir, ec);
        write_text(cell.run_dir / "config.snapshot.cfg", cfg.to_config_text());
        const TrainResult r = train(cfg);
        const fs::path ckpt = fs::exists(r.best_ckpt) ? r.best_ckpt : r.last_ckpt;
        cell.test_metrics = evaluate_checkpoint(ckpt, fs::path(flags.data) / "test", false, 0.25,
                                                0.45, cfg.image_size, cfg.num_classes);
      } catch (...) {
        std::lock_guard<std::mutex> lock(err_mutex);
        if (!first_error) first_error = std::current_exception();
        return;
      }
    }
  };

  int jobs = flags.jobs > 0 ? flags.jobs
                            : static_cast<int>(std::max(1u, std::thread::hardware_concurrency()));
  jobs = std::min<int>(jobs, static_cast<int>(cells.size()));
  std::vector<std::thread> pool;
  for (int j = 0; j < jobs; ++j) pool.emplace_back(worker);
  for (auto& t : pool) t.join();
  if (first_error) std::rethrow_exception(first_error);
  return cells;
}

inline int run_ablate(const AblateFlags& flags) {
  const fs::path out(flags.out);
  std::error_code ec;
  fs::create_directories(out, ec);
  if (ec) raise(ErrorCode::IoError, "cannot create output directory " + out.string());
  write_text(out / "config.snapshot.cfg", flags.to_config_text());
  const auto cells = run_ablation_cells(flags);

  const char* metric_names[5] = {"precision", "recall", "map50", "f1", "f2"};
  nlohmann::ordered_json report;
  report["cells"] = nlohmann::ordered_json::array();
  for (const auto& c : cells) {
    report["cells"].push_back(nlohmann::ordered_json{{"mode", mode_name(c.mode)},
                                                     {"seed", c.seed},
                                                     {"precision", c.test_metrics.precision},
                                                     {"recall", c.test_metrics.recall},
                                                     {"map50", c.test_metrics.map50},
                                                     {"f1", c.test_metrics.f1},
                                                     {"f2", c.test_metrics.f2}});
  }
  report["summary"] = nlohmann::ordered_json::object();
  std::ostringstream table;
  table << "mode             ";
  for (const char* m : metric_names) {
    table << "  " << m << " (mean+-std)";
  }
  table << "\n";
  for (const TrainMode mode : kAllTrainModes) {
    nlohmann::ordered_json entry;
    char row[256];
    std::snprintf(row, sizeof(row), "%-16s", mode_name(mode));
    table << row;
    for (const char* metric : metric_names) {
      std::vector<double> vals;
      for (const auto& c : cells)
        if (c.mode == mode) {
          if (std::string(metric) == "precision") vals.push_back(c.test_metrics.precision);
          if (std::string(metric) == "recall") vals.push_back(c.test_metrics.recall);
          if (std::string(metric) == "map50") vals.push_back(c.test_metrics.map50);
          if (std::string(metric) == "f1") vals.push_back(c.test_metrics.f1);
          if (std::string(metric) == "f2") vals.push_back(c.test_metrics.f2);
        }
      const MeanStd ms = mean_std(vals);
      entry[metric] = nlohmann::ordered_json{{"mean", ms.mean}, {"std", ms.std}};
      std::snprintf(row, sizeof(row), "  %7.3f+-%.3f", ms.mean, ms.std);
      table << row;
    }
    table << "\n";
    report["summary"][mode_name(mode)] = entry;
  }
  write_text(out / "ablation.json", report.dump(2) + "\n");
  write_text(out / "ablation.txt", table.str());
  std::cout << table.str();
  return 0;
}

// ---------------------------------------------------------------------------
// cross-domain
// ---------------------------------------------------------------------------

struct CrossDomainFlags {
  std::string runs;    // ablation output directory with per-cell checkpoints
  std::string data_a;  // training-domain dataset root
  std::string data_b;  // shifted-domain dataset root
  std::vector<std::uint64_t> seeds{1, 2, 3};
  std::string out;

  std::string to_config_text() const {
    std::string s;
    s += "runs = " + runs + "\n";
    s += "data-a = " + data_a + "\n";
    s += "data-b = " + data_b + "\n";
    s += "seeds = ";
    for (std::size_t i = 0; i < seeds.size(); ++i)
      s += (i ? "," : "") + std::to_string(seeds[i]);
    s += "\n";
    s += "out = " + out + "\n";
    return s;
  }
};

inline int run_cross_domain(const CrossDomainFlags& flags) {
  if (flags.seeds.empty()) raise(ErrorCode::InvalidConfig, "need at least one seed");
  const fs::path out(flags.out);
  std::error_code ec;
  fs::create_directories(out, ec);
  if (ec) raise(ErrorCode::IoError, "cannot create output directory " + out.string());
  write_text(out / "config.snapshot.cfg", flags.to_config_text());

  const std::array<TrainMode, 2> models{TrainMode::Vanilla, TrainMode::ConsisFlipAug};
  const std::array<std::pair<std::string, fs::path>, 2> domains{
      std::pair<std::string, fs::path>{"a", fs::path(flags.data_a) / "test"},
      {"b", fs::path(flags.data_b) / "test"}};

  nlohmann::ordered_json report;
  report["entries"] = nlohmann::ordered_json::array();
  std::ostringstream table;
  table << "model            domain  map50 (mean+-std)  f1 (mean+-std)  f2 (mean+-std)\n";
  for (const TrainMode model : models)
    for (const auto& [domain, dir] : domains) {
      std::vector<double> map50s, f1s, f2s, ps, rs;
      for (const std::uint64_t seed : flags.seeds) {
        const fs::path run = ablation_cell_dir(flags.runs, model, seed);
        const fs::path ckpt =
            fs::exists(run / "best.ckpt") ? run / "best.ckpt" : run / "last.ckpt";
        const MetricsReport rep = evaluate_checkpoint(ckpt, dir, false, 0.25, 0.45);
        map50s.push_back(rep.map50);
        f1s.push_back(rep.f1);
        f2s.push_back(rep.f2);
        ps.push_back(rep.precision);
        rs.push_back(rep.recall);
      }
      const MeanStd m = mean_std(map50s), f1m = mean_std(f1s), f2m = mean_std(f2s),
                    pm = mean_std(ps), rm = mean_std(rs);
      report["entries"].push_back(nlohmann::ordered_json{
          {"model", mode_name(model)},
          {"domain", domain},
          {"precision", {{"mean", pm.mean}, {"std", pm.std}}},
          {"recall", {{"mean", rm.mean}, {"std", rm.std}}},
          {"map50", {{"mean", m.mean}, {"std", m.std}}},
          {"f1", {{"mean", f1m.mean}, {"std", f1m.std}}},
          {"f2", {{"mean", f2m.mean}, {"std", f2m.std}}}});
      char row[256];
      std::snprintf(row, sizeof(row), "%-16s %-6s  %7.3f+-%.3f     %7.3f+-%.3f   %7.3f+-%.3f\n",
                    mode_name(model), domain.c_str(), m.mean, m.std, f1m.mean, f1m.std, f2m.mean,
                    f2m.std);
      table << row;
    }
  write_text(out / "cross_domain.json", report.dump(2) + "\n");
  write_text(out / "cross_domain.txt", table.str());
  std::cout << table.str();
  return 0;
}

// ---------------------------------------------------------------------------
// grad-check
// ---------------------------------------------------------------------------

inline int run_grad_check(std::uint64_t seed, int n_seeds, const std::string& inject_fault) {
  const auto cases = run_gradcheck_suite(seed, n_seeds, inject_fault);
  bool ok = true;
  for (const auto& c : cases) {
    std::printf("%-28s max_rel_err=%.3e %s\n", c.name.c_str(), c.max_rel_err,
                c.pass ? "PASS" : "FAIL");
    ok = ok && c.pass;
  }
  if (!ok) {
    std::printf("grad-check: FAILURES detected\n");
    return 5;
  }
  std::printf("grad-check: all %zu checks passed\n", cases.size());
  return 0;
}

// ---------------------------------------------------------------------------
// argument wiring
// ---------------------------------------------------------------------------

inline int run(std::vector<std::string> args);

inline int run(int argc, const char* const* argv) {
  std::vector<std::string> args;
  for (int i = 1; i < argc; ++i) args.emplace_back(argv[i]);
  return run(std::move(args));
}

inline int run(std::vector<std::string> args) {
  CLI::App app{"student-teacher flip-consistency detector workbench"};
  app.require_subcommand(1);

  GenFlags gen;
  CLI::App* gen_cmd = app.add_subcommand("gen-data", "generate a synthetic dataset");
  gen_cmd->add_option("--out", gen.out, "output dataset root")->required();
  gen_cmd->add_option("--n-train", gen.n_train, "training images");
  gen_cmd->add_option("--n-val", gen.n_val, "validation images");
  gen_cmd->add_option("--n-test", gen.n_test, "test images");
  gen_cmd->add_option("--image-size", gen.image_size, "square image size in px");
  gen_cmd->add_option("--seed", gen.seed, "generation seed");
  gen_cmd->add_option("--domain", gen.domain, "synthetic domain, `a` or `b`");
  gen_cmd->add_option("--config", "config file (key = value lines)");

  TrainConfig train_cfg;
  CLI::App* train_cmd = app.add_subcommand("train", "train one configuration");
  std::string train_mode = "vanilla";
  train_cmd->add_option("--data", train_cfg.data_dir, "dataset root (train/ + val/)")->required();
  train_cmd->add_option("--out", train_cfg.out_dir, "run output directory")->required();
  train_cmd->add_option("--mode", train_mode, "vanilla|flipaug|consis|consis_flipaug");
  train_cmd->add_option("--epochs", train_cfg.epochs, "training epochs");
  train_cmd->add_option("--warmup-epochs", train_cfg.warmup_epochs, "linear warmup epochs");
  train_cmd->add_option("--batch-size", train_cfg.batch_size, "batch size");
  train_cmd->add_option("--max-lr", train_cfg.max_lr, "peak learning rate");
  train_cmd->add_option("--weight-decay", train_cfg.weight_decay, "decoupled weight decay");
  train_cmd->add_option("--tau", train_cfg.tau, "EMA temperature (1 copies the student)");
  train_cmd->add_option("--consistency-weight", train_cfg.consistency_weight,
                        "weight on the consistency loss");
  train_cmd->add_option("--confidence-mask-threshold", train_cfg.confidence_mask_threshold,
                        "teacher foreground threshold for the consistency mask");
  train_cmd->add_option("--seed", train_cfg.seed, "run seed");
  train_cmd->add_option("--eval-every", train_cfg.eval_every, "validation cadence in epochs");
  train_cmd->add_option("--image-size", train_cfg.image_size, "square image size in px");
  train_cmd->add_option("--num-classes", train_cfg.num_classes, "foreground class count");
  train_cmd->add_option("--pos-threshold", train_cfg.pos_threshold, "positive IoU threshold");
  train_cmd->add_option("--neg-threshold", train_cfg.neg_threshold, "negative IoU threshold");
  train_cmd->add_flag("--resume", train_cfg.resume, "resume from <out>/last.ckpt if present");
  train_cmd->add_option("--stop-after-epochs", train_cfg.stop_after_epochs,
                        "stop this invocation after N epochs (0 = run to completion)");
  train_cmd->add_option("--config", "config file (key = value lines)");

  EvalFlags eval_flags;
  CLI::App* eval_cmd = app.add_subcommand("eval", "evaluate a checkpoint");
  eval_cmd->add_option("--data", eval_flags.data, "dataset root")->required();
  eval_cmd->add_option("--split", eval_flags.split, "split to evaluate");
  eval_cmd->add_option("--ckpt", eval_flags.ckpt, "checkpoint path")->required();
  eval_cmd->add_flag("--use-teacher", eval_flags.use_teacher, "evaluate the teacher weights");
  eval_cmd->add_option("--conf", eval_flags.conf, "confidence threshold");
  eval_cmd->add_option("--nms", eval_flags.nms_iou, "NMS IoU threshold");
  eval_cmd->add_option("--image-size", eval_flags.image_size,
                       "override image size (default: checkpoint sidecar)");
  eval_cmd->add_option("--num-classes", eval_flags.num_classes,
                       "override class count (default: checkpoint sidecar)");
  eval_cmd->add_option("--out", eval_flags.out, "optional directory for report.json");
  eval_cmd->add_option("--config", "config file (key = value lines)");

  AblateFlags ablate;
  CLI::App* ablate_cmd = app.add_subcommand("ablate", "run the four-mode ablation matrix");
  std::string ablate_seeds = "1,2,3";
  ablate_cmd->add_option("--data", ablate.data, "dataset root")->required();
  ablate_cmd->add_option("--out", ablate.out, "output directory")->required();
  ablate_cmd->add_option("--seeds", ablate_seeds, "comma-separated seeds");
  ablate_cmd->add_option("--jobs", ablate.jobs, "parallel cells (0 = hardware)");
  ablate_cmd->add_option("--epochs", ablate.base.epochs, "training epochs");
  ablate_cmd->add_option("--warmup-epochs", ablate.base.warmup_epochs, "linear warmup epochs");
  ablate_cmd->add_option("--batch-size", ablate.base.batch_size, "batch size");
  ablate_cmd->add_option("--max-lr", ablate.base.max_lr, "peak learning rate");
  ablate_cmd->add_option("--weight-decay", ablate.base.weight_decay, "decoupled weight decay");
  ablate_cmd->add_option("--tau", ablate.base.tau, "EMA temperature");
  ablate_cmd->add_option("--consistency-weight", ablate.base.consistency_weight,
                         "weight on the consistency loss");
  ablate_cmd->add_option("--confidence-mask-threshold", ablate.base.confidence_mask_threshold,
                         "teacher foreground threshold for the consistency mask");
  ablate_cmd->add_option("--eval-every", ablate.base.eval_every, "validation cadence in epochs");
  ablate_cmd->add_option("--image-size", ablate.base.image_size, "square image size in px");
  ablate_cmd->add_option("--num-classes", ablate.base.num_classes, "foreground class count");
  ablate_cmd->add_option("--config", "config file (key = value lines)");

  CrossDomainFlags cross;
  CLI::App* cross_cmd = app.add_subcommand("cross-domain",
                                           "evaluate ablation checkpoints across domains");
  std::string cross_seeds = "1,2,3";
  cross_cmd->add_option("--runs", cross.runs, "ablation output directory")->required();
  cross_cmd->add_option("--data-a", cross.data_a, "training-domain dataset root")->required();
  cross_cmd->add_option("--data-b", cross.data_b, "shifted-domain dataset root")->required();
  cross_cmd->add_option("--seeds", cross_seeds, "comma-separated seeds");
  cross_cmd->add_option("--out", cross.out, "output directory")->required();
  cross_cmd->add_option("--config", "config file (key = value lines)");

  std::uint64_t gc_seed = 0;
  int gc_nseeds = 5;
  std::string gc_fault;
  CLI::App* gc_cmd = app.add_subcommand("grad-check", "run the gradient verification suite");
  gc_cmd->add_option("--seed", gc_seed, "probe seed");
  gc_cmd->add_option("--n-seeds", gc_nseeds, "number of probe seeds");
  gc_cmd->add_option("--inject-fault", gc_fault,
                     "corrupt one check's analytic gradient (self-test of the checker)");
  gc_cmd->add_option("--config", "config file (key = value lines)");

  for (CLI::App* sub : app.get_subcommands({})) detail::take_last_all(sub);
  detail::take_last_all(&app);

  try {
    if (!args.empty()) args = detail::expand_config(args);
    std::vector<const char*> argv;
    argv.push_back("consisaug");
    for (const auto& a : args) argv.push_back(a.c_str());
    app.parse(static_cast<int>(argv.size()), argv.data());
  } catch (const CLI::CallForHelp& e) {
    std::cout << app.help();
    return 0;
  } catch (const CLI::ParseError& e) {
    std::cerr << e.what() << "\n";
    return 2;
  } catch (const Error& e) {
    std::cerr << e.what() << "\n";
    return exit_code_for(e);
  }

  try {
    if (gen_cmd->parsed()) return run_gen_data(gen);
    if (train_cmd->parsed()) {
      train_cfg.mode = parse_mode(train_mode);
      return run_train(train_cfg);
    }
    if (eval_cmd->parsed()) return run_eval(eval_flags);
    if (ablate_cmd->parsed()) {
      ablate.seeds.clear();
      std::istringstream in(ablate_seeds);
      std::string tok;
      while (std::getline(in, tok, ','))
        if (!tok.empty()) ablate.seeds.push_back(std::stoull(tok));
      return run_ablate(ablate);
    }
    if (cross_cmd->parsed()) {
      cross.seeds.clear();
      std::istringstream in(cross_seeds);
      std::string tok;
      while (std::getline(in, tok, ','))
        if (!tok.empty()) cross.seeds.push_back(std::stoull(tok));
      return run_cross_domain(cross);
    }
    if (gc_cmd->parsed()) return run_grad_check(gc_seed, gc_nseeds, gc_fault);
  } catch (const Error& e) {
    std::cerr << e.what() << "\n";
    return exit_code_for(e);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  std::cerr << "no subcommand given\n";
  return 2;
}

}  // namespace consisaug::cli
