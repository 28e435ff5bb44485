// crdiff: train, prune, search, sample and evaluate the toy pattern diffusion model.

#include <cstdio>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>

#if defined(__GLIBC__)
#include <malloc.h>
#endif

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "crdiff/crdiff.hpp"

using namespace crdiff;
using nlohmann::json;

namespace {

std::vector<double> parse_grid(const std::string& s) {
  std::vector<double> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    try {
      std::size_t used = 0;
      out.push_back(std::stod(item, &used));
      if (used != item.size()) throw std::invalid_argument(item);
    } catch (const std::exception&) {
      throw ConfigError("bad sparsity grid entry '" + item + "'");
    }
  }
  return out;
}

void final_record(const std::string& command, int code, const json& extra) {
  json rec = {{"command", command}, {"status", code == 0 ? "ok" : "error"}, {"exit_code", code}};
  rec.update(extra);
  std::cout << rec.dump() << std::endl;
}

}  // namespace

int main(int argc, char** argv) {
#if defined(__GLIBC__)
  // activation buffers are large and short-lived; keep them off mmap
  mallopt(M_MMAP_THRESHOLD, 256 << 20);
  mallopt(M_TRIM_THRESHOLD, 512 << 20);
#endif
  apply_thread_cap();
  CLI::App app{"Block-wise pruning, annealing search and pruned output amplification for a toy diffusion UNet"};
  app.require_subcommand(1);
  app.fallthrough();

  std::string config_path;
  std::optional<std::string> reports, checkpoint, mask_path;
  app.add_option("--config", config_path, "RunConfig JSON file (defaults used when omitted)");
  app.add_option("--reports", reports, "output directory (paths.reports)");
  app.add_option("--checkpoint", checkpoint, "checkpoint path (paths.checkpoint)");
  app.add_option("--mask", mask_path, "mask path (paths.mask)");

  // train
  auto* train = app.add_subcommand("train", "train the UNet on rendered patterns");
  std::optional<int> epochs;
  std::optional<double> lr;
  bool resume = false;
  train->add_option("--epochs", epochs, "total epochs");
  train->add_option("--lr", lr, "learning rate");
  train->add_flag("--resume", resume, "continue from an existing checkpoint");

  // prune
  auto* prune = app.add_subcommand("prune", "build a block-wise magnitude mask");
  std::optional<std::string> ratios_file, scope;
  std::optional<double> uniform;
  prune->add_option("--ratios", ratios_file, "RatioConfig JSON (e.g. best.json from search)");
  prune->add_option("--uniform", uniform, "same ratio for every block");
  prune->add_option("--scope", scope, "per_tensor or per_group");

  // search
  auto* search = app.add_subcommand("search", "simulated annealing over block ratios");
  std::optional<std::string> objective, class_filter;
  std::optional<int> n_iter;
  std::optional<std::uint64_t> sa_seed;
  search->add_option("--objective", objective, "pattern or synthetic");
  search->add_option("--n-iter", n_iter, "annealing iterations after the seeds");
  search->add_option("--class", class_filter, "restrict the energy to one pattern class");
  search->add_option("--seed", sa_seed, "annealing rng seed");

  // sample
  auto* samp = app.add_subcommand("sample", "generate images (dense, pruned, or amplified)");
  SampleOptions so;
  std::string size_str = "16x16";
  std::optional<double> k;
  std::optional<std::string> sample_class;
  samp->add_option("--k", k, "amplification coefficient");
  samp->add_flag("--pruned-only", so.pruned_only, "sample the masked model alone");
  samp->add_option("--size", size_str, "HxW");
  samp->add_option("--n", so.n, "number of images");
  samp->add_option("--seed", so.seed, "sampling seed");
  samp->add_option("--class", sample_class, "pattern class (default: cycle through eval.classes)");
  samp->add_option("--out", so.out_dir, "output directory");
  bool use_mask = false;
  samp->add_flag("--masked", use_mask, "use paths.mask (implied by --mask)");

  // sweep / eval / report
  auto* sweep_cmd = app.add_subcommand("sweep", "uniform sparsity sweep at one size");
  std::optional<std::string> grid, sweep_size;
  sweep_cmd->add_option("--grid", grid, "comma-separated sparsities");
  sweep_cmd->add_option("--size", sweep_size, "HxW");
  auto* eval_cmd = app.add_subcommand("eval", "dense vs amplified metrics over eval.sizes");
  std::optional<double> eval_k;
  std::optional<int> eval_n;
  eval_cmd->add_option("--k", eval_k, "amplification coefficient");
  eval_cmd->add_option("--n", eval_n, "images per size and class");
  app.add_subcommand("report", "join eval rows into the dense vs CR-Diff table and grid image");

  // dataset dump
  auto* dataset = app.add_subcommand("dataset", "dataset utilities");
  auto* dump = dataset->add_subcommand("dump", "write rendered samples as PGM plus index.json");
  dataset->require_subcommand(1);
  dataset->fallthrough();
  DumpOptions dopt;
  std::string dump_size = "16x16";
  dump->add_option("--out", dopt.out_dir, "output directory");
  dump->add_option("--n", dopt.n_per_class, "samples per class");
  dump->add_option("--size", dump_size, "HxW");
  dump->add_option("--seed", dopt.seed, "dataset seed");
  dump->add_option("--jitter", dopt.jitter, "geometric jitter in [0, 0.5]");

  std::string command = "?";
  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) return app.exit(e);
    app.exit(e);
    final_record(command, 2, {{"error", e.what()}});
    return 2;
  }
  for (auto* sub : app.get_subcommands()) command = sub->get_name();
  if (command == "dataset") command = "dataset dump";

  try {
    json doc = json::object();
    if (!config_path.empty()) {
      std::ifstream in(config_path);
      if (!in) throw ConfigError("cannot open config " + config_path);
      try {
        doc = json::parse(in);
      } catch (const json::exception& e) {
        throw ConfigError("config " + config_path + ": " + e.what());
      }
    }
    if (reports) doc["paths"]["reports"] = *reports;
    if (checkpoint) doc["paths"]["checkpoint"] = *checkpoint;
    if (mask_path) doc["paths"]["mask"] = *mask_path;
    if (epochs) doc["train"]["epochs"] = *epochs;
    if (lr) doc["train"]["lr"] = *lr;
    if (scope) doc["prune"]["scope"] = *scope;
    if (uniform) {
      for (const char* key : {"r_down", "r_mid", "r_up"})
        if (doc.contains("prune")) doc["prune"].erase(key);
      doc["prune"]["uniform"] = *uniform;
    }
    if (objective) doc["sa"]["objective"] = *objective;
    if (n_iter) doc["sa"]["n_iter"] = *n_iter;
    if (class_filter) doc["sa"]["class_filter"] = *class_filter;
    if (sa_seed) doc["sa"]["seed"] = *sa_seed;
    if (k) doc["poa"]["k"] = *k;
    if (eval_k) doc["poa"]["k"] = *eval_k;
    if (eval_n) doc["eval"]["n"] = *eval_n;
    if (grid) doc["eval"]["sweep_grid"] = parse_grid(*grid);
    if (sweep_size) doc["eval"]["sweep_size"] = *sweep_size;
    const RunConfig cfg = config_from_json(doc);

    json result;
    if (command == "train") {
      result = cmd_train(cfg, TrainOptions{resume});
    } else if (command == "prune") {
      std::optional<RatioConfig> r;
      if (ratios_file) r = read_ratio_file(*ratios_file);
      result = cmd_prune(cfg, r);
    } else if (command == "search") {
      result = cmd_search(cfg);
    } else if (command == "sample") {
      try {
        so.size = parse_size(size_str);
      } catch (const InputError& e) {
        throw ConfigError(e.what());
      }
      if (mask_path || use_mask) so.mask_path = cfg.paths.mask;
      so.k = k;
      so.class_name = sample_class;
      result = cmd_sample(cfg, so);
    } else if (command == "sweep") {
      result = cmd_sweep(cfg);
    } else if (command == "eval") {
      result = cmd_eval(cfg);
    } else if (command == "report") {
      result = cmd_report(cfg);
    } else {
      try {
        dopt.size = parse_size(dump_size);
      } catch (const InputError& e) {
        throw ConfigError(e.what());
      }
      result = cmd_dataset_dump(dopt);
    }
    final_record(command, 0, {{"result", result}});
    return 0;
  } catch (const NumericalError& e) {
    std::cerr << "error: " << e.what() << '\n';
    final_record(command, 3, {{"error", e.what()}});
    return 3;
  } catch (const InputError& e) {
    std::cerr << "error: " << e.what() << '\n';
    final_record(command, 2, {{"error", e.what()}});
    return 2;
  } catch (const json::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    final_record(command, 2, {{"error", e.what()}});
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    final_record(command, 1, {{"error", e.what()}});
    return 1;
  }
}
