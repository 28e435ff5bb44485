#pragma once

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "crdiff/image_io.hpp"
#include "crdiff/metrics.hpp"
#include "crdiff/parallel.hpp"
#include "crdiff/poa.hpp"

namespace crdiff {

struct GridSize {
  int h = 16;
  int w = 16;
  bool operator==(const GridSize&) const = default;
};

inline std::string to_string(GridSize s) { return std::to_string(s.h) + "x" + std::to_string(s.w); }

inline GridSize parse_size(const std::string& s) {
  const auto x = s.find('x');
  GridSize g;
  try {
    if (x == std::string::npos) throw std::invalid_argument(s);
    std::size_t a = 0, b = 0;
    g.h = std::stoi(s.substr(0, x), &a);
    g.w = std::stoi(s.substr(x + 1), &b);
    if (a != x || b != s.size() - x - 1) throw std::invalid_argument(s);
  } catch (const std::exception&) {
    throw InputError("bad size '" + s + "' (expected HxW)");
  }
  unet::check_extents(g.h, g.w);
  return g;
}

/// How images are generated: dense, pruned only (mask, no poa), or pruned output amplification (mask + poa).
struct Predictor {
  std::string id = "dense";
  const PruneMask* mask = nullptr;
  std::optional<PoaConfig> poa;
};

struct MetricsRow {
  std::string config_id;
  GridSize size;
  double ffd = 0;
  double mean_score = 0;
  std::vector<std::pair<std::string, double>> per_class;  // class name -> mean score, in class order
  int n = 0;                                              // generated images
  std::uint64_t seed = 0;
  Tensor preview;  // first generated image, (1,H,W)
};

using MetricsReport = std::vector<MetricsRow>;

struct EvalOptions {
  int n_per_class = 16;
  int ref_per_class = 64;  // reference renders per class for the Frechet distance
  std::uint64_t seed = 0;
  double jitter = 0.25;
};

/// Class id of every image when n_per_class images of each class are generated class-major.
inline std::vector<int> class_major_labels(const std::vector<PatternClass>& classes, int n_per_class) {
  std::vector<int> out;
  for (const auto& c : classes)
    for (int i = 0; i < n_per_class; ++i) out.push_back(static_cast<int>(c.id));
  return out;
}

inline Tensor generate(const Predictor& pred, const ParameterStore& params, const NoiseSchedule& sched,
                       std::span<const int> labels, GridSize size, std::uint64_t seed, PoaStats* stats = nullptr) {
  const int n = static_cast<int>(labels.size());
  if (pred.poa) {
    if (!pred.mask) throw InputError("predictor '" + pred.id + "': amplification needs a mask");
    return poa_sample(params, sched, *pred.mask, *pred.poa, n, labels, size.h, size.w, seed, stats);
  }
  return sample(sched, n, labels, size.h, size.w, seed, model_eps(params, pred.mask));
}

inline Tensor image_of(const Tensor& batch, int i) {
  const int H = batch.dim(2), W = batch.dim(3);
  const std::size_t hw = static_cast<std::size_t>(H) * W;
  Tensor out({1, H, W});
  std::copy_n(batch.data().begin() + static_cast<std::ptrdiff_t>(i * hw), hw, out.data().begin());
  return out;
}

/// Per-image pattern scores of a class-major batch.
inline std::vector<double> score_batch(const Tensor& batch, std::span<const int> labels) {
  std::vector<double> s(labels.size());
  parallel_for(labels.size(), [&](std::size_t i) {
    s[i] = pattern_score(image_of(batch, static_cast<int>(i)), PatternClass::standard(labels[i]));
  });
  return s;
}

inline std::vector<FeatureVector> batch_features(const Tensor& batch) {
  std::vector<FeatureVector> f(static_cast<std::size_t>(batch.dim(0)));
  parallel_for(f.size(), [&](std::size_t i) { f[i] = features(image_of(batch, static_cast<int>(i))); });
  return f;
}

/// Reference features at one size: fresh renders, independent of the generation seed stream.
inline std::vector<FeatureVector> reference_features(const std::vector<PatternClass>& classes, GridSize size,
                                                     const EvalOptions& opt) {
  auto data = make_dataset(classes, opt.ref_per_class, size.h, size.w, mix_seed(opt.seed, 0xF00D), opt.jitter);
  std::vector<FeatureVector> f(data.size());
  parallel_for(data.size(), [&](std::size_t i) { f[i] = features(data[i].image); });
  return f;
}

inline MetricsReport evaluate(const Predictor& pred, const ParameterStore& params, const NoiseSchedule& sched,
                              const std::vector<GridSize>& sizes, const std::vector<PatternClass>& classes,
                              const EvalOptions& opt) {
  if (opt.n_per_class < 16) throw InputError("evaluate: need at least 16 images per (size, class)");
  if (classes.empty()) throw InputError("evaluate: no classes");
  if (pred.mask) check_mask_matches(params, *pred.mask);
  MetricsReport rows;
  const auto labels = class_major_labels(classes, opt.n_per_class);
  for (GridSize size : sizes) {
    unet::check_extents(size.h, size.w);
    const Tensor imgs = generate(pred, params, sched, labels, size, opt.seed);
    const auto scores = score_batch(imgs, labels);
    MetricsRow row;
    row.config_id = pred.id;
    row.size = size;
    row.ffd = frechet_distance(batch_features(imgs), reference_features(classes, size, opt));
    double total = 0;
    for (std::size_t c = 0; c < classes.size(); ++c) {
      double s = 0;
      for (int i = 0; i < opt.n_per_class; ++i) s += scores[c * opt.n_per_class + i];
      row.per_class.emplace_back(std::string(to_string(classes[c].id)), s / opt.n_per_class);
      total += s;
    }
    row.mean_score = total / static_cast<double>(scores.size());
    row.n = static_cast<int>(labels.size());
    row.seed = opt.seed;
    row.preview = image_of(imgs, 0);
    rows.push_back(std::move(row));
  }
  return rows;
}

struct CurvePoint {
  double sparsity = 0;
  double ffd = 0;
  double score = 0;
};

/// Uniform-ratio pruning (no amplification) at one size; one row per grid point in ascending sparsity.
inline MetricsReport sweep(const ParameterStore& params, const NoiseSchedule& sched, std::vector<double> grid,
                           GridSize size, const std::vector<PatternClass>& classes, const EvalOptions& opt,
                           RankingScope scope = RankingScope::per_tensor) {
  if (grid.empty()) throw InputError("sweep: empty sparsity grid");
  for (double r : grid) validate_ratio(r, "sparsity");
  std::sort(grid.begin(), grid.end());
  grid.erase(std::unique(grid.begin(), grid.end()), grid.end());
  MetricsReport rows;
  for (double r : grid) {
    char id[32];
    std::snprintf(id, sizeof id, "uniform-%.4g", r);
    Predictor pred;
    pred.id = id;
    PruneMask mask;
    if (r > 0) {
      mask = build_mask(params, uniform_config(r), scope);
      pred.mask = &mask;
    }
    auto part = evaluate(pred, params, sched, {size}, classes, opt);
    rows.push_back(std::move(part.front()));
  }
  return rows;
}

inline std::vector<CurvePoint> curve_of(const MetricsReport& rows, const std::vector<double>& grid) {
  std::vector<double> g = grid;
  std::sort(g.begin(), g.end());
  g.erase(std::unique(g.begin(), g.end()), g.end());
  if (g.size() != rows.size()) throw InputError("curve_of: grid and rows differ in length");
  std::vector<CurvePoint> out;
  for (std::size_t i = 0; i < g.size(); ++i) out.push_back({g[i], rows[i].ffd, rows[i].mean_score});
  return out;
}

// ---------------------------------------------------------------------------
// CSV

inline std::string fmt_num(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.9g", v);
  return buf;
}

inline std::string csv_quote(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c;
  }
  return out + '"';
}

inline constexpr const char* kMetricsHeader = "config_id,resolution,ffd,mean_score,per_class_scores_json,n,seed";

inline std::string per_class_json(const MetricsRow& r) {
  nlohmann::ordered_json j = nlohmann::ordered_json::object();
  for (const auto& [name, v] : r.per_class) j[name] = std::stod(fmt_num(v));
  return j.dump();
}

inline void write_metrics_csv(std::ostream& out, const MetricsReport& rows) {
  out << kMetricsHeader << '\n';
  for (const auto& r : rows)
    out << csv_quote(r.config_id) << ',' << to_string(r.size) << ',' << fmt_num(r.ffd) << ',' << fmt_num(r.mean_score)
        << ',' << csv_quote(per_class_json(r)) << ',' << r.n << ',' << r.seed << '\n';
}

inline void write_curve_csv(std::ostream& out, const std::vector<CurvePoint>& pts) {
  out << "sparsity,ffd,score\n";
  for (const auto& p : pts) out << fmt_num(p.sparsity) << ',' << fmt_num(p.ffd) << ',' << fmt_num(p.score) << '\n';
}

inline void write_divergence_csv(std::ostream& out, const std::vector<DivergenceRow>& rows) {
  out << "t,mean_abs_diff,max_abs_diff\n";
  for (const auto& r : rows) out << r.t << ',' << fmt_num(r.mean_abs) << ',' << fmt_num(r.max_abs) << '\n';
}

/// Splits one CSV line, honouring double-quoted fields.
inline std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out(1);
  bool quoted = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    const char c = line[i];
    if (quoted) {
      if (c == '"' && i + 1 < line.size() && line[i + 1] == '"') {
        out.back() += '"';
        ++i;
      } else if (c == '"') {
        quoted = false;
      } else {
        out.back() += c;
      }
    } else if (c == '"') {
      quoted = true;
    } else if (c == ',') {
      out.emplace_back();
    } else {
      out.back() += c;
    }
  }
  return out;
}

/// Reads rows written by write_metrics_csv (previews are left empty).
inline MetricsReport read_metrics_csv(std::istream& in) {
  std::string line;
  if (!std::getline(in, line) || line != kMetricsHeader) throw InputError("not a metrics CSV (bad header)");
  MetricsReport rows;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto f = split_csv_line(line);
    if (f.size() != 7) throw InputError("metrics CSV: expected 7 fields, got " + std::to_string(f.size()));
    MetricsRow r;
    r.config_id = f[0];
    r.size = parse_size(f[1]);
    r.ffd = std::stod(f[2]);
    r.mean_score = std::stod(f[3]);
    const auto scores = nlohmann::ordered_json::parse(f[4]);
    for (const auto& [k, v] : scores.items()) r.per_class.emplace_back(k, v.get<double>());
    r.n = std::stoi(f[5]);
    r.seed = std::stoull(f[6]);
    rows.push_back(std::move(r));
  }
  return rows;
}

// ---------------------------------------------------------------------------
// Dense vs CR-Diff report

struct ReportRow {
  GridSize size;
  const MetricsRow* dense = nullptr;
  const MetricsRow* crdiff = nullptr;
};

/// Pairs the dense and amplified rows of every size (sizes in first-seen order). Throws if either is missing.
inline std::vector<ReportRow> join_report(const MetricsReport& rows, const std::string& dense_id = "dense",
                                          const std::string& crdiff_id = "crdiff") {
  std::vector<ReportRow> out;
  for (const auto& r : rows) {
    if (r.config_id != dense_id && r.config_id != crdiff_id) continue;
    auto it = std::find_if(out.begin(), out.end(), [&](const ReportRow& x) { return x.size == r.size; });
    if (it == out.end()) {
      out.push_back({r.size});
      it = out.end() - 1;
    }
    (r.config_id == dense_id ? it->dense : it->crdiff) = &r;
  }
  for (const auto& r : out)
    if (!r.dense || !r.crdiff) throw InputError("report: size " + to_string(r.size) + " lacks a dense or crdiff row");
  if (out.empty()) throw InputError("report: no dense/crdiff rows");
  return out;
}

inline void write_report_csv(std::ostream& out, const std::vector<ReportRow>& rows) {
  out << "resolution,dense_ffd,crdiff_ffd,dense_score,crdiff_score\n";
  for (const auto& r : rows)
    out << to_string(r.size) << ',' << fmt_num(r.dense->ffd) << ',' << fmt_num(r.crdiff->ffd) << ','
        << fmt_num(r.dense->mean_score) << ',' << fmt_num(r.crdiff->mean_score) << '\n';
}

inline void write_report_markdown(std::ostream& out, const std::vector<ReportRow>& rows, GridSize train_size) {
  out << "| Resolution | Dense FFD | CR-Diff FFD | Dense score | CR-Diff score |\n";
  out << "|---|---|---|---|---|\n";
  for (const auto& r : rows)
    out << "| " << to_string(r.size) << (r.size == train_size ? " (train)" : "") << " | " << fmt_num(r.dense->ffd)
        << " | " << fmt_num(r.crdiff->ffd) << " | " << fmt_num(r.dense->mean_score) << " | "
        << fmt_num(r.crdiff->mean_score) << " |\n";
  out << "\nObservations:\n";
  for (const auto& r : rows) {
    if (r.size == train_size) continue;
    out << "- " << to_string(r.size) << ": CR-Diff FFD " << (r.crdiff->ffd < r.dense->ffd ? "lower" : "not lower")
        << " than dense, score " << (r.crdiff->mean_score > r.dense->mean_score ? "higher" : "not higher") << ".\n";
  }
}

/// Tiles one image per (size, column): rows are sizes, columns are the given image lists.
inline Gray8 tile_grid(const std::vector<std::array<Gray8, 2>>& cells) {
  int hmax = 0, wmax = 0;
  for (const auto& row : cells)
    for (const auto& g : row) {
      hmax = std::max(hmax, g.height);
      wmax = std::max(wmax, g.width);
    }
  Gray8 canvas{static_cast<int>(cells.size()) * hmax, 2 * wmax,
               std::vector<std::uint8_t>(static_cast<std::size_t>(cells.size()) * hmax * 2 * wmax, 0)};
  for (std::size_t i = 0; i < cells.size(); ++i)
    for (int c = 0; c < 2; ++c) blit(canvas, cells[i][c], static_cast<int>(i) * hmax, c * wmax);
  return canvas;
}

}  // namespace crdiff
