#pragma once

#include <chrono>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "crdiff/checkpoint.hpp"
#include "crdiff/config.hpp"

namespace crdiff {

namespace fs = std::filesystem;

namespace detail {

inline void ensure_parent(const fs::path& p) {
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
}

inline std::ofstream open_out(const fs::path& p) {
  ensure_parent(p);
  std::ofstream out(p, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + p.string());
  return out;
}

// Records the resolved config and its hash next to a command's outputs.
inline void log_config(const RunConfig& c, const std::string& command) {
  nlohmann::ordered_json j;
  j["command"] = command;
  j["config_hash"] = config_hash(c);
  j["config"] = config_to_json(c);
  auto out = open_out(fs::path(c.paths.reports) / (command + ".config.json"));
  out << j.dump(2) << '\n';
}

inline NoiseSchedule schedule_of(const RunConfig& c) {
  return make_schedule(c.schedule.T, c.schedule.beta_start, c.schedule.beta_end);
}

inline EvalOptions eval_options(const RunConfig& c) {
  EvalOptions o;
  o.n_per_class = c.eval.n;
  o.ref_per_class = std::max<int>(16, (c.eval.ref_n + static_cast<int>(c.eval.classes.size()) - 1) /
                                          static_cast<int>(c.eval.classes.size()));
  o.seed = c.eval.seed;
  o.jitter = c.train.jitter;
  return o;
}

class Stopwatch {
 public:
  double seconds() const {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
  }

 private:
  std::chrono::steady_clock::time_point start_ = std::chrono::steady_clock::now();
};

inline ParameterStore load_model(const RunConfig& c) {
  ParameterStore p = load_checkpoint(c.paths.checkpoint);
  return p;
}

}  // namespace detail

// ---------------------------------------------------------------------------

struct TrainOptions {
  bool resume = false;
};

inline nlohmann::json cmd_train(const RunConfig& c, const TrainOptions& opt = {}, std::ostream& log = std::cerr) {
  detail::log_config(c, "train");
  detail::Stopwatch sw;
  const auto sched = detail::schedule_of(c);
  ParameterStore params = opt.resume && fs::exists(c.paths.checkpoint)
                              ? load_checkpoint(c.paths.checkpoint)
                              : build_unet<float>(c.model.width, c.model.seed, c.model.train_h, c.model.train_w);
  if (params.arch().width != c.model.width || params.arch().train_h != c.model.train_h ||
      params.arch().train_w != c.model.train_w)
    throw ConfigError("checkpoint architecture does not match the model section");
  const int start_epoch = params.epochs_done;
  const auto data = make_dataset(all_standard_classes(), c.train.n_per_class, c.model.train_h, c.model.train_w,
                                 c.train.data_seed, c.train.jitter);
  TrainConfig tc{c.train.epochs, c.train.batch, c.train.lr, c.train.seed, c.train.grad_clip};

  const fs::path loss_path = fs::path(c.paths.reports) / "loss.csv";
  detail::ensure_parent(loss_path);
  const bool append = opt.resume && start_epoch > 0 && fs::exists(loss_path);
  std::ofstream loss(loss_path, append ? std::ios::app : std::ios::trunc);
  if (!append) loss << "epoch,step,loss\n";
  double epoch_sum = 0, last_epoch_mean = std::nan("");
  int epoch_steps = 0, cur_epoch = start_epoch;
  train(params, data, sched, tc, [&](const LossRow& r) {
    if (r.epoch != cur_epoch) {
      last_epoch_mean = epoch_sum / epoch_steps;
      log << "epoch " << cur_epoch << " mean loss " << last_epoch_mean << " (" << sw.seconds() << " s)\n";
      epoch_sum = 0;
      epoch_steps = 0;
      cur_epoch = r.epoch;
    }
    epoch_sum += r.loss;
    ++epoch_steps;
    loss << r.epoch << ',' << r.step << ',' << fmt_num(r.loss) << '\n';
  });
  if (epoch_steps > 0) {
    last_epoch_mean = epoch_sum / epoch_steps;
    log << "epoch " << cur_epoch << " mean loss " << last_epoch_mean << " (" << sw.seconds() << " s)\n";
  }
  detail::ensure_parent(c.paths.checkpoint);
  save_checkpoint(c.paths.checkpoint, params);
  nlohmann::json out = {{"checkpoint", c.paths.checkpoint}, {"epochs_done", params.epochs_done},
                        {"parameters", params.total_count()}};
  if (std::isfinite(last_epoch_mean)) out["final_epoch_loss"] = last_epoch_mean;
  return out;
}

// ---------------------------------------------------------------------------

inline RatioConfig read_ratio_file(const fs::path& p) {
  std::ifstream in(p);
  if (!in) throw ConfigError("cannot open ratio file " + p.string());
  try {
    RatioConfig r = nlohmann::json::parse(in).get<RatioConfig>();
    validate(r);
    return r;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("ratio file " + p.string() + ": " + e.what());
  } catch (const InputError& e) {
    throw ConfigError("ratio file " + p.string() + ": " + e.what());
  }
}

inline nlohmann::json cmd_prune(const RunConfig& c, std::optional<RatioConfig> ratios = std::nullopt) {
  detail::log_config(c, "prune");
  const ParameterStore params = detail::load_model(c);
  const RatioConfig r = ratios.value_or(c.prune.effective());
  const PruneMask mask = build_mask(params, r, c.prune.scope);
  detail::ensure_parent(c.paths.mask);
  write_mask(c.paths.mask, mask);
  const auto s = mask.achieved_sparsity();
  nlohmann::json out = {{"mask", c.paths.mask},
                        {"config", r},
                        {"scope", std::string(to_string(c.prune.scope))},
                        {"achieved", {{"down", s[0]}, {"mid", s[1]}, {"up", s[2]}}}};
  auto f = detail::open_out(fs::path(c.paths.reports) / "mask_summary.json");
  f << out.dump(2) << '\n';
  return out;
}

// ---------------------------------------------------------------------------

/// -mean pattern score of amplified samples at sa.size, with fixed noise seeds for every candidate.
inline EnergyFn pattern_energy(const RunConfig& c, const ParameterStore& params, const NoiseSchedule& sched,
                               std::ostream* log = nullptr) {
  std::vector<PatternClass> classes =
      c.sa.class_filter ? std::vector<PatternClass>{PatternClass::standard(parse_pattern(*c.sa.class_filter))}
                        : eval_classes(c);
  const auto labels = class_major_labels(classes, c.sa.n_per_class);
  const std::uint64_t seed = mix_seed(c.sa.params.seed, 0xE7E7);
  return [&c, &params, &sched, labels, seed, log](const RatioConfig& r) {
    const PruneMask mask = build_mask(params, r, c.prune.scope);
    Predictor pred{"candidate", &mask, c.poa};
    const Tensor imgs = generate(pred, params, sched, labels, c.sa.size, seed);
    const auto scores = score_batch(imgs, labels);
    double s = 0;
    for (double v : scores) s += v;
    const double e = -s / static_cast<double>(scores.size());
    if (log) *log << "  energy(" << r.r_down << ", " << r.r_mid << ", " << r.r_up << ") = " << e << '\n';
    return e;
  };
}

/// Lowest energy among the seeds whose three ratios are equal; NaN if none is uniform.
inline double best_uniform_seed_energy(const SAState& st) {
  double best = std::nan("");
  for (const auto& row : st.trace)
    if (row.iter == 0 && row.r.r_down == row.r.r_mid && row.r.r_mid == row.r.r_up)
      if (!(row.E >= best)) best = row.E;
  return best;
}

inline nlohmann::json cmd_search(const RunConfig& c, std::ostream& log = std::cerr) {
  detail::log_config(c, "search");
  detail::Stopwatch sw;
  const fs::path trace_path = fs::path(c.paths.reports) / "trace.csv";
  auto trace = detail::open_out(trace_path);
  write_trace_header(trace);
  auto sink = [&](const SATraceRow& r) {
    write_trace_row(trace, r);
    trace.flush();
  };
  SAState st;
  std::optional<ParameterStore> params;
  NoiseSchedule sched = detail::schedule_of(c);
  EnergyFn energy;
  if (c.sa.objective == "synthetic") {
    energy = synthetic_energy;
  } else {
    params = detail::load_model(c);
    energy = pattern_energy(c, *params, sched);
  }
  auto counted = [&, n = 0](const RatioConfig& r) mutable {
    const double e = energy(r);
    ++n;
    if (n % 10 == 0 && c.sa.objective != "synthetic") log << "search: " << n << " evaluations (" << sw.seconds() << " s)\n";
    return e;
  };
  st = anneal(c.sa.params, counted, sink);
  trace.close();
  nlohmann::json best = st.S_best;
  auto f = detail::open_out(fs::path(c.paths.reports) / "best.json");
  f << best.dump(2) << '\n';
  nlohmann::json out = {{"best", st.S_best},          {"E_best", st.E_best},       {"evaluations", st.evaluations},
                        {"iterations", st.iterations}, {"restarts", st.C_restart}, {"trace", trace_path.string()}};
  const double u = best_uniform_seed_energy(st);
  if (std::isfinite(u)) out["best_uniform_seed_E"] = u;
  auto g = detail::open_out(fs::path(c.paths.reports) / "search_summary.json");
  g << out.dump(2) << '\n';
  return out;
}

// ---------------------------------------------------------------------------

struct SampleOptions {
  std::optional<std::string> mask_path;  // amplified (or pruned-only) sampling when set
  std::optional<double> k;               // defaults to poa.k
  bool pruned_only = false;              // masked model alone, no dense path
  GridSize size{16, 16};
  int n = 8;
  std::uint64_t seed = 0;
  std::optional<std::string> class_name;  // otherwise cycles through eval.classes
  std::string out_dir = "samples";
};

inline nlohmann::json cmd_sample(const RunConfig& c, const SampleOptions& o) {
  if (o.n < 1) throw ConfigError("--n must be >= 1");
  if (o.pruned_only && !o.mask_path) throw ConfigError("--pruned-only needs --mask");
  const ParameterStore params = detail::load_model(c);
  const fs::path dir = o.out_dir;
  fs::create_directories(dir);
  const auto sched = detail::schedule_of(c);
  std::vector<int> labels;
  const auto classes = eval_classes(c);
  for (int i = 0; i < o.n; ++i)
    labels.push_back(o.class_name ? static_cast<int>(parse_pattern(*o.class_name))
                                  : static_cast<int>(classes[static_cast<std::size_t>(i) % classes.size()].id));
  std::optional<PruneMask> mask;
  if (o.mask_path) mask = read_mask(*o.mask_path);
  PoaConfig poa = c.poa;
  if (o.k) poa.k = *o.k;
  Predictor pred;
  if (mask) {
    pred.id = o.pruned_only ? "pruned" : "crdiff";
    pred.mask = &*mask;
    if (!o.pruned_only) pred.poa = poa;
  }
  PoaStats stats;
  const Tensor imgs = generate(pred, params, sched, labels, o.size, o.seed, &stats);

  nlohmann::ordered_json manifest;
  manifest["config_hash"] = config_hash(c);
  manifest["predictor"] = pred.id;
  manifest["size"] = to_string(o.size);
  manifest["seed"] = o.seed;
  if (mask) manifest["mask"] = *o.mask_path;
  if (pred.poa) manifest["k"] = poa.k;
  auto& list = manifest["images"] = nlohmann::ordered_json::array();
  for (int i = 0; i < o.n; ++i) {
    char name[32];
    std::snprintf(name, sizeof name, "sample_%03d.pgm", i);
    write_pgm(dir / name, image_of(imgs, i));
    list.push_back({{"file", name},
                    {"class", std::string(to_string(pattern_from_int(labels[static_cast<std::size_t>(i)])))},
                    {"index", i}});
  }
  auto m = detail::open_out(dir / "manifest.json");
  m << manifest.dump(2) << '\n';
  nlohmann::json out = {{"out_dir", dir.string()}, {"images", o.n}, {"predictor", pred.id}};
  if (pred.poa) {
    auto d = detail::open_out(dir / "divergence.csv");
    write_divergence_csv(d, stats.divergence);
    out["forwards"] = stats.forwards.load();
    out["steps"] = stats.steps.load();
  }
  return out;
}

// ---------------------------------------------------------------------------

inline nlohmann::json cmd_sweep(const RunConfig& c, std::ostream& log = std::cerr) {
  detail::log_config(c, "sweep");
  detail::Stopwatch sw;
  const ParameterStore params = detail::load_model(c);
  const auto rows = sweep(params, detail::schedule_of(c), c.eval.sweep_grid, c.eval.sweep_size, eval_classes(c),
                          detail::eval_options(c), c.prune.scope);
  auto s = detail::open_out(fs::path(c.paths.reports) / "sweep.csv");
  write_metrics_csv(s, rows);
  auto cv = detail::open_out(fs::path(c.paths.reports) / "curve.csv");
  write_curve_csv(cv, curve_of(rows, c.eval.sweep_grid));
  log << "sweep: " << rows.size() << " points (" << sw.seconds() << " s)\n";
  return {{"rows", rows.size()}, {"size", to_string(c.eval.sweep_size)}};
}

inline std::string preview_name(const std::string& id, GridSize s) { return "preview_" + id + "_" + to_string(s) + ".pgm"; }

inline nlohmann::json cmd_eval(const RunConfig& c, std::ostream& log = std::cerr) {
  detail::log_config(c, "eval");
  detail::Stopwatch sw;
  const ParameterStore params = detail::load_model(c);
  const PruneMask mask = read_mask(c.paths.mask);
  const auto sched = detail::schedule_of(c);
  const auto classes = eval_classes(c);
  const auto opt = detail::eval_options(c);
  MetricsReport rows = evaluate(Predictor{"dense", nullptr, std::nullopt}, params, sched, c.eval.sizes, classes, opt);
  log << "eval: dense done (" << sw.seconds() << " s)\n";
  auto cr = evaluate(Predictor{"crdiff", &mask, c.poa}, params, sched, c.eval.sizes, classes, opt);
  log << "eval: crdiff done (" << sw.seconds() << " s)\n";
  for (auto& r : cr) rows.push_back(std::move(r));
  auto f = detail::open_out(fs::path(c.paths.reports) / "eval.csv");
  write_metrics_csv(f, rows);
  for (const auto& r : rows) write_pgm(fs::path(c.paths.reports) / preview_name(r.config_id, r.size), r.preview);
  return {{"rows", rows.size()}, {"eval_csv", (fs::path(c.paths.reports) / "eval.csv").string()}};
}

inline nlohmann::json cmd_report(const RunConfig& c) {
  detail::log_config(c, "report");
  const fs::path dir = c.paths.reports;
  std::ifstream in(dir / "eval.csv");
  if (!in) throw ConfigError("report: " + (dir / "eval.csv").string() + " not found (run eval first)");
  const MetricsReport rows = read_metrics_csv(in);
  const auto joined = join_report(rows);
  auto f = detail::open_out(dir / "report.csv");
  write_report_csv(f, joined);

  auto md = detail::open_out(dir / "report.md");
  write_report_markdown(md, joined, GridSize{c.model.train_h, c.model.train_w});
  if (fs::exists(dir / "search_summary.json")) {
    std::ifstream s(dir / "search_summary.json");
    const auto j = nlohmann::json::parse(s);
    md << "\nSearched ratios: " << j.at("best").dump() << ", energy " << fmt_num(j.at("E_best").get<double>());
    if (j.contains("best_uniform_seed_E"))
      md << " (best uniform seed " << fmt_num(j.at("best_uniform_seed_E").get<double>()) << ")";
    md << ".\n";
  }
  if (fs::exists(dir / "curve.csv")) {
    std::ifstream s(dir / "curve.csv");
    md << "\nUniform sparsity sweep at " << to_string(c.eval.sweep_size) << ":\n\n```\n" << s.rdbuf() << "```\n";
  }

  std::vector<std::array<Gray8, 2>> cells;
  for (const auto& r : joined)
    cells.push_back({read_pgm(dir / preview_name(r.dense->config_id, r.size)),
                     read_pgm(dir / preview_name(r.crdiff->config_id, r.size))});
  const Gray8 grid = tile_grid(cells);
  write_pgm(dir / "grid.pgm", grid);
  return {{"sizes", joined.size()}, {"grid", {grid.height, grid.width}}};
}

// ---------------------------------------------------------------------------

struct DumpOptions {
  std::string out_dir = "dataset";
  int n_per_class = 4;
  GridSize size{16, 16};
  std::uint64_t seed = 7;
  double jitter = 0.25;
  std::vector<std::string> classes{"checkerboard", "stripes", "radial-blob", "ring"};
};

inline nlohmann::json cmd_dataset_dump(const DumpOptions& o) {
  std::vector<PatternClass> classes;
  try {
    for (const auto& n : o.classes) classes.push_back(PatternClass::standard(parse_pattern(n)));
    unet::check_extents(o.size.h, o.size.w);
  } catch (const InputError& e) {
    throw ConfigError(e.what());
  }
  const auto data = make_dataset(classes, o.n_per_class, o.size.h, o.size.w, o.seed, o.jitter);
  const fs::path dir = o.out_dir;
  fs::create_directories(dir);
  nlohmann::ordered_json index = nlohmann::ordered_json::array();
  for (std::size_t i = 0; i < data.size(); ++i) {
    char name[48];
    std::snprintf(name, sizeof name, "%s_%04zu.pgm", std::string(to_string(pattern_from_int(data[i].label))).c_str(), i);
    write_pgm(dir / name, data[i].image);
    index.push_back({{"file", name},
                     {"class", std::string(to_string(pattern_from_int(data[i].label)))},
                     {"seed", data[i].seed},
                     {"H", o.size.h},
                     {"W", o.size.w}});
  }
  auto f = detail::open_out(dir / "index.json");
  f << index.dump(2) << '\n';
  return {{"out_dir", dir.string()}, {"samples", data.size()}};
}

}  // namespace crdiff
