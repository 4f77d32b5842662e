// Command-line surface of the supervised dictionary learning toolkit:
// training, evaluation, cross-validated grid search, the dictionary
// discriminativity probe, and one-off sparse coding.  Batch-oriented; all
// output is files plus plain text on stdout/stderr.
//
// Exit codes: 0 success, 2 usage or argument errors, 3 data errors
// (unreadable or inconsistent inputs), 4 training aborts and other runtime
// failures.

#include <sdl/sdl.hpp>

#include <CLI11.hpp>
#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

namespace {

using nlohmann::json;

int default_workers() {
  const unsigned hw = std::thread::hardware_concurrency();
  return hw == 0 ? 1 : static_cast<int>(hw);
}

// ---------------------------------------------------------------------------
// Dataset input plumbing shared by the commands
// ---------------------------------------------------------------------------

struct DataOptions {
  std::string cache_path;
  std::string images_path;
  std::string labels_path;
  std::vector<std::string> texture_paths;
  int patch = 12;
  int stride = 1;
  std::string region = "full";
  bool subtract_mean = false;
  bool no_normalize = false;
  int cap_per_class = 0;
};

void add_data_options(CLI::App* cmd, DataOptions& d) {
  auto* cache = cmd->add_option("--data", d.cache_path,
                                "Dataset cache file (SDLDATA1 format)");
  auto* images = cmd->add_option("--images", d.images_path,
                                 "IDX image file (big-endian, magic 0x803)");
  auto* labels = cmd->add_option("--labels", d.labels_path,
                                 "IDX label file (magic 0x801)");
  auto* texture = cmd->add_option(
      "--texture", d.texture_paths,
      "Binary PGM (P5) image; repeat once per class, patches of the i-th "
      "image are labeled class i");
  images->needs(labels);
  labels->needs(images);
  cache->excludes(images)->excludes(texture);
  images->excludes(texture);

  cmd->add_option("--patch", d.patch,
                  "Texture patch side length in pixels")
      ->capture_default_str()
      ->check(CLI::PositiveNumber);
  cmd->add_option("--patch-stride", d.stride, "Texture patch stride in pixels")
      ->capture_default_str()
      ->check(CLI::PositiveNumber);
  cmd->add_option("--patch-region", d.region,
                  "Image region to tile with patches")
      ->capture_default_str()
      ->check(CLI::IsMember({"full", "left", "right"}));
  cmd->add_flag("--subtract-patch-mean", d.subtract_mean,
                "Subtract the mean intensity from every patch");
  cmd->add_flag("--no-normalize", d.no_normalize,
                "Skip unit l2 normalization (the default kappa assumes "
                "unit-norm signals)");
  cmd->add_option("--cap-per-class", d.cap_per_class,
                  "Keep at most this many samples per class (seeded uniform "
                  "subsample; 0 keeps everything)")
      ->capture_default_str()
      ->check(CLI::NonNegativeNumber);
}

sdl::LabeledDataset load_input(const DataOptions& d, std::uint64_t seed,
                               bool verbose) {
  sdl::LabeledDataset ds;
  if (!d.cache_path.empty()) {
    ds = sdl::load_dataset_cache(d.cache_path);
  } else if (!d.images_path.empty()) {
    ds = sdl::load_idx(d.images_path, d.labels_path);
  } else if (!d.texture_paths.empty()) {
    sdl::PatchSpec spec;
    spec.patch = d.patch;
    spec.stride = d.stride;
    spec.region = d.region == "left"
                      ? sdl::Region::Left
                      : d.region == "right" ? sdl::Region::Right
                                            : sdl::Region::Full;
    spec.subtract_mean = d.subtract_mean;
    for (std::size_t i = 0; i < d.texture_paths.size(); ++i) {
      const sdl::Mat image = sdl::load_pgm(d.texture_paths[i]);
      const sdl::LabeledDataset part =
          sdl::extract_patches(image, spec, static_cast<int>(i) + 1);
      ds = i == 0 ? part : sdl::merge_datasets(ds, part);
    }
  } else {
    throw std::invalid_argument(
        "no dataset given: use --data, --images/--labels or --texture");
  }

  if (d.no_normalize) {
    std::cerr << "warning: --no-normalize set; the default sparsity setting "
                 "kappa = 0.15 assumes unit l2 norm signals\n";
  } else {
    int dropped = 0;
    ds = sdl::normalize_unit(ds, true, &dropped);
    if (dropped > 0) {
      std::cerr << "warning: dropped " << dropped
                << " all-zero signal(s) during normalization\n";
    }
  }
  if (d.cap_per_class > 0) {
    ds = sdl::cap_per_class(ds, d.cap_per_class, seed);
  }
  if (verbose) {
    std::cerr << "dataset: " << ds.m() << " signals of length " << ds.n()
              << " in " << ds.p() << " classes\n";
  }
  return ds;
}

json data_options_json(const DataOptions& d) {
  json j;
  j["data"] = d.cache_path;
  j["images"] = d.images_path;
  j["labels"] = d.labels_path;
  j["textures"] = d.texture_paths;
  j["patch"] = d.patch;
  j["patch_stride"] = d.stride;
  j["patch_region"] = d.region;
  j["subtract_patch_mean"] = d.subtract_mean;
  j["no_normalize"] = d.no_normalize;
  j["cap_per_class"] = d.cap_per_class;
  return j;
}

// ---------------------------------------------------------------------------
// Hyperparameter flags
// ---------------------------------------------------------------------------

struct HyperOptions {
  int k = 32;
  double kappa = 0.15;
  double lambda0 = 1.0;
  double lambda1 = -1.0;  // derived from kappa unless set explicitly
  double lambda2 = 1e-4;
  double solver_tol = 1e-6;
  int solver_max_iter = 2000;
  CLI::Option* kappa_opt = nullptr;
  CLI::Option* lambda1_opt = nullptr;
};

void add_hyper_options(CLI::App* cmd, HyperOptions& h) {
  cmd->add_option("--k", h.k, "Number of dictionary atoms")
      ->capture_default_str()
      ->check(CLI::PositiveNumber);
  h.kappa_opt =
      cmd->add_option("--kappa", h.kappa,
                      "Sparsity ratio lambda1/lambda0 (canonical knob; 0.15 "
                      "suits unit-norm signals)")
          ->capture_default_str()
          ->check(CLI::NonNegativeNumber);
  cmd->add_option("--lambda0", h.lambda0,
                  "Reconstruction weight (scaled jointly with lambda1 by the "
                  "early-iteration calibration)")
      ->capture_default_str()
      ->check(CLI::PositiveNumber);
  h.lambda1_opt = cmd->add_option(
      "--lambda1", h.lambda1,
      "l1 penalty weight; must equal kappa * lambda0 when --kappa is also "
      "given");
  cmd->add_option("--lambda2", h.lambda2,
                  "Ridge penalty on the decision parameters")
      ->capture_default_str()
      ->check(CLI::NonNegativeNumber);
  cmd->add_option("--tol", h.solver_tol,
                  "Sparse solver optimality tolerance")
      ->capture_default_str()
      ->check(CLI::PositiveNumber);
  cmd->add_option("--solver-iters", h.solver_max_iter,
                  "Sparse solver total iteration cap")
      ->capture_default_str()
      ->check(CLI::PositiveNumber);
}

/// Resolve (kappa, lambda0, lambda1) per the documented precedence; throws
/// invalid_argument on an inconsistent triple.
void apply_hyper_options(const HyperOptions& h, sdl::Hyperparams& hyper) {
  hyper.k = h.k;
  hyper.lambda0 = h.lambda0;
  hyper.lambda2 = h.lambda2;
  hyper.solver.tol = h.solver_tol;
  hyper.solver.max_iter = h.solver_max_iter;
  const bool kappa_given = h.kappa_opt != nullptr && h.kappa_opt->count() > 0;
  const bool l1_given = h.lambda1_opt != nullptr && h.lambda1_opt->count() > 0;
  if (l1_given) {
    if (h.lambda1 < 0.0) {
      throw std::invalid_argument("--lambda1 must be nonnegative");
    }
    if (kappa_given &&
        std::abs(h.lambda1 - h.kappa * h.lambda0) >
            1e-12 * std::max(1.0, h.lambda1)) {
      throw std::invalid_argument(
          "--lambda1 disagrees with --kappa * --lambda0; kappa is the "
          "canonical knob, drop one of the flags");
    }
    hyper.lambda1 = h.lambda1;
    hyper.kappa = h.lambda1 / h.lambda0;
  } else {
    hyper.set_kappa(h.kappa);
  }
}

json hyper_options_json(const sdl::Hyperparams& h) {
  json j;
  j["k"] = h.k;
  j["kappa"] = h.kappa;
  j["lambda0"] = h.lambda0;
  j["lambda1"] = h.lambda1;
  j["lambda2"] = h.lambda2;
  j["solver_tol"] = h.solver.tol;
  j["solver_iters"] = h.solver.max_iter;
  return j;
}

// ---------------------------------------------------------------------------
// Ensemble persistence: a JSON manifest next to one model file per member
// ---------------------------------------------------------------------------

std::string member_file_name(const std::string& manifest_path, std::size_t i) {
  return std::filesystem::path(manifest_path).filename().string() + ".member" +
         std::to_string(i);
}

void save_ensemble(const sdl::EnsembleModel& ens, const std::string& path) {
  ens.validate();
  const std::filesystem::path dir =
      std::filesystem::path(path).parent_path();
  json manifest;
  manifest["format"] = "SDLENSB1";
  manifest["scheme"] = sdl::to_string(ens.scheme);
  manifest["class_labels"] = ens.class_labels;
  manifest["members"] = json::array();
  for (std::size_t i = 0; i < ens.members.size(); ++i) {
    const std::string name = member_file_name(path, i);
    sdl::save_model(ens.members[i].model, (dir / name).string());
    manifest["members"].push_back(
        {{"file", name}, {"classes", ens.members[i].classes}});
  }
  std::ofstream out(path, std::ios::binary);
  if (!out) throw sdl::data_error("cannot open file for writing: " + path);
  out << manifest.dump(2) << "\n";
  if (!out) throw sdl::data_error("ensemble manifest: write failed");
}

sdl::EnsembleModel load_ensemble(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw sdl::data_error("cannot open file: " + path);
  json manifest;
  try {
    in >> manifest;
  } catch (const json::exception& e) {
    throw sdl::data_error(std::string("ensemble manifest: not valid JSON: ") +
                          e.what());
  }
  sdl::EnsembleModel ens;
  try {
    if (manifest.at("format").get<std::string>() != "SDLENSB1") {
      throw sdl::data_error("ensemble manifest: unsupported format \"" +
                            manifest.at("format").get<std::string>() + "\"");
    }
    const std::string scheme = manifest.at("scheme").get<std::string>();
    if (scheme == "multiclass") {
      ens.scheme = sdl::EnsembleScheme::Multiclass;
    } else if (scheme == "pairwise") {
      ens.scheme = sdl::EnsembleScheme::Pairwise;
    } else if (scheme == "one_vs_all") {
      ens.scheme = sdl::EnsembleScheme::OneVsAll;
    } else {
      throw sdl::data_error("ensemble manifest: unknown scheme \"" + scheme +
                            "\"");
    }
    ens.class_labels =
        manifest.at("class_labels").get<std::vector<std::string>>();
    const std::filesystem::path dir =
        std::filesystem::path(path).parent_path();
    for (const json& entry : manifest.at("members")) {
      sdl::EnsembleMember member;
      member.classes = entry.at("classes").get<std::vector<int>>();
      member.model =
          sdl::load_model((dir / entry.at("file").get<std::string>())
                              .string());
      ens.members.push_back(std::move(member));
    }
  } catch (const json::exception& e) {
    throw sdl::data_error(
        std::string("ensemble manifest: missing or malformed field: ") +
        e.what());
  }
  ens.validate();
  return ens;
}

bool is_single_model_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw sdl::data_error("cannot open file: " + path);
  char magic[8] = {};
  in.read(magic, 8);
  return in.gcount() == 8 && std::string_view(magic, 8) == "SDLMODL1";
}

// ---------------------------------------------------------------------------
// Trace files: one JSON object per line, NaN-valued fields omitted
// ---------------------------------------------------------------------------

void append_trace_records(std::ostream& out, const sdl::TrainTrace& trace,
                          int member = -1) {
  for (const sdl::TraceRecord& rec : trace.records) {
    json j;
    if (member >= 0) j["member"] = member;
    j["mu_index"] = rec.mu_index;
    j["mu"] = rec.mu;
    j["iteration"] = rec.iteration;
    j["mixed_objective"] = rec.mixed_objective;
    j["generative_term"] = rec.generative_term;
    j["discriminative_term"] = rec.discriminative_term;
    j["mean_sparsity"] = rec.mean_sparsity;
    if (!std::isnan(rec.validation_error)) {
      j["validation_error"] = rec.validation_error;
    }
    if (!std::isnan(rec.gamma)) j["gamma"] = rec.gamma;
    out << j.dump() << "\n";
  }
}

void print_train_summary(const std::string& prefix,
                         const sdl::TrainTrace& trace) {
  const double final_objective =
      trace.records.empty() ? std::numeric_limits<double>::quiet_NaN()
                            : trace.records.back().mixed_objective;
  std::printf("%sfinal objective: %.6g\n", prefix.c_str(), final_objective);
  std::printf("%schosen mu: %.3g\n", prefix.c_str(), trace.chosen_mu);
  if (std::isnan(trace.chosen_validation_error)) {
    std::printf("%svalidation error: n/a\n", prefix.c_str());
  } else {
    std::printf("%svalidation error: %.4f\n", prefix.c_str(),
                trace.chosen_validation_error);
  }
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

struct TrainCli {
  DataOptions data;
  HyperOptions hyper;
  std::string mode = "sdl-d";
  std::string variant = "linear";
  std::string scheme = "multiclass";
  int mu_steps = 11;
  int iters = 10;
  double rel_tol = 1e-5;
  int gamma_iters = 10;
  bool validate_each_iteration = false;
  std::vector<double> split_fracs;
  long budget = 200000;
  std::string model_path;
  std::string trace_path;
  std::string save_test_path;
  std::string dump_config_path;
};

std::vector<double> mu_schedule_from_steps(int steps) {
  std::vector<double> s;
  if (steps <= 1) {
    s.push_back(0.0);
  } else {
    for (int i = 0; i < steps; ++i) s.push_back(double(i) / (steps - 1));
  }
  return s;
}

long supervised_solves_per_iteration(const sdl::LabeledDataset& ds,
                                     const std::string& scheme) {
  const auto counts = ds.class_counts();
  const int p = ds.p();
  if (scheme == "pairwise") {
    long total = 0;
    for (int a = 0; a < p; ++a) {
      for (int b = a + 1; b < p; ++b) total += 2L * (counts[a] + counts[b]);
    }
    return total;
  }
  if (scheme == "one-vs-all") return 2L * p * ds.m();
  return static_cast<long>(ds.m()) * p;
}

int run_train(const TrainCli& cli, std::uint64_t seed, int workers,
              bool verbose) {
  sdl::TrainConfig config;
  apply_hyper_options(cli.hyper, config.hyper);
  config.hyper.mu_schedule = mu_schedule_from_steps(cli.mu_steps);
  config.variant = cli.variant == "bilinear" ? sdl::DecisionVariant::Bilinear
                                             : sdl::DecisionVariant::Linear;
  config.mode = cli.mode == "rec"
                    ? sdl::TrainMode::Rec
                    : cli.mode == "sdl-g" ? sdl::TrainMode::SdlG
                                          : sdl::TrainMode::Sdl;
  config.seed = seed;
  config.workers = workers;
  config.outer_iterations_per_mu = cli.iters;
  config.objective_rel_tol = cli.rel_tol;
  config.gamma_rescale_iterations = cli.gamma_iters;
  config.validate_each_iteration = cli.validate_each_iteration;

  if (!cli.dump_config_path.empty() || verbose) {
    json run;
    run["command"] = "train";
    run["seed"] = seed;
    run["workers"] = workers;
    run["input"] = data_options_json(cli.data);
    run["hyper"] = hyper_options_json(config.hyper);
    run["mode"] = cli.mode;
    run["variant"] = cli.variant;
    run["scheme"] = cli.scheme;
    run["mu_steps"] = cli.mu_steps;
    run["iters"] = cli.iters;
    run["rel_tol"] = cli.rel_tol;
    run["gamma_iters"] = cli.gamma_iters;
    run["validate_each_iteration"] = cli.validate_each_iteration;
    run["split"] = cli.split_fracs;
    run["model"] = cli.model_path;
    run["trace"] = cli.trace_path;
    if (verbose) std::cerr << "run config: " << run.dump() << "\n";
    if (!cli.dump_config_path.empty()) {
      std::ofstream out(cli.dump_config_path);
      if (!out) {
        throw sdl::data_error("cannot open file for writing: " +
                              cli.dump_config_path);
      }
      out << run.dump(2) << "\n";
    }
  }

  const sdl::LabeledDataset full = load_input(cli.data, seed, verbose);
  sdl::LabeledDataset train = full;
  sdl::LabeledDataset validation;
  validation.class_labels = full.class_labels;
  validation.signals.resize(0, full.n());
  if (!cli.split_fracs.empty()) {
    if (cli.split_fracs.size() > 3) {
      throw std::invalid_argument(
          "--split takes at most three fractions: train,val[,test]");
    }
    const double tf = cli.split_fracs[0];
    const double vf = cli.split_fracs.size() > 1 ? cli.split_fracs[1] : 0.0;
    const double ef = cli.split_fracs.size() > 2 ? cli.split_fracs[2] : 0.0;
    const sdl::SplitResult parts =
        sdl::split_dataset(full, tf, vf, ef, seed);
    train = parts.train;
    validation = parts.validation;
    if (!cli.save_test_path.empty()) {
      sdl::save_dataset_cache(parts.test, cli.save_test_path);
    } else if (parts.test.m() > 0) {
      std::cerr << "warning: the test fraction ("
                << parts.test.m()
                << " samples) is unused; pass --save-test to keep it\n";
    }
  } else if (!cli.save_test_path.empty()) {
    throw std::invalid_argument("--save-test requires --split");
  }

  const long solves = supervised_solves_per_iteration(train, cli.scheme);
  if (config.mode != sdl::TrainMode::Rec && solves > cli.budget) {
    std::cerr << "warning: each outer iteration needs " << solves
              << " supervised solves, over the --budget of " << cli.budget
              << "; consider --cap-per-class or a pairwise scheme on fewer "
                 "classes\n";
  }

  if (cli.scheme == "multiclass") {
    const sdl::TrainResult result =
        validation.m() > 0 ? sdl::train_sdl(train, validation, config)
                           : sdl::train_sdl(train, config);
    sdl::save_model(result.model, cli.model_path);
    if (!cli.trace_path.empty()) {
      std::ofstream out(cli.trace_path);
      if (!out) {
        throw sdl::data_error("cannot open file for writing: " +
                              cli.trace_path);
      }
      append_trace_records(out, result.trace);
    }
    print_train_summary("", result.trace);
    std::printf("model written to %s\n", cli.model_path.c_str());
    return 0;
  }

  // Ensemble schemes train one model per pair / per class; train_ensemble
  // derives member seeds from config.seed, so the result is reproducible.
  const sdl::EnsembleScheme scheme = cli.scheme == "pairwise"
                                         ? sdl::EnsembleScheme::Pairwise
                                         : sdl::EnsembleScheme::OneVsAll;
  const sdl::EnsembleModel ens =
      validation.m() > 0
          ? sdl::train_ensemble(train, validation, scheme, config)
          : sdl::train_ensemble(train, scheme, config);
  save_ensemble(ens, cli.model_path);
  std::printf("trained %zu %s members\n", ens.members.size(),
              cli.scheme.c_str());
  for (std::size_t i = 0; i < ens.members.size(); ++i) {
    const auto& trace = ens.members[i].model.trace;
    std::printf("member %zu: final objective %.6g, chosen mu %.3g\n", i,
                trace.objective.empty() ? std::nan("") :
                                          trace.objective.back(),
                trace.chosen_mu);
  }
  std::printf("ensemble written to %s\n", cli.model_path.c_str());
  if (!cli.trace_path.empty()) {
    std::cerr << "warning: --trace is only written for the multiclass "
                 "scheme\n";
  }
  return 0;
}

// ---------------------------------------------------------------------------
// eval
// ---------------------------------------------------------------------------

struct EvalCli {
  DataOptions data;
  std::string model_path;
  std::string report_path;
};

int run_eval(const EvalCli& cli, std::uint64_t seed, int workers,
             bool verbose) {
  const sdl::LabeledDataset ds = load_input(cli.data, seed, verbose);
  sdl::EvalReport report;
  if (is_single_model_file(cli.model_path)) {
    report = sdl::evaluate(ds, sdl::load_model(cli.model_path), workers);
  } else {
    report = sdl::evaluate(ds, load_ensemble(cli.model_path), workers);
  }
  std::printf("error rate: %.2f%% (%d of %d)\n", 100.0 * report.error_rate,
              report.errors, report.samples);
  if (!cli.report_path.empty()) {
    std::ofstream out(cli.report_path);
    if (!out) {
      throw sdl::data_error("cannot open file for writing: " +
                            cli.report_path);
    }
    out << sdl::to_json(report).dump(2) << "\n";
  }
  return 0;
}

// ---------------------------------------------------------------------------
// gridsearch
// ---------------------------------------------------------------------------

struct GridCli {
  DataOptions data;
  std::vector<int> k_grid = {24, 32, 48};
  std::vector<double> kappa_grid = {0.13, 0.15, 0.17};
  std::vector<double> lambda2_grid = {1e-4};
  int folds = 5;
  int iters = 10;
  double solver_tol = 1e-6;
  int solver_max_iter = 2000;
  std::string out_path;
};

sdl::LabeledDataset rows_subset(const sdl::LabeledDataset& ds,
                                const std::vector<int>& rows) {
  sdl::LabeledDataset out;
  out.class_labels = ds.class_labels;
  out.normalized = ds.normalized;
  out.signals.resize(static_cast<Eigen::Index>(rows.size()), ds.n());
  out.labels.resize(rows.size());
  for (std::size_t r = 0; r < rows.size(); ++r) {
    out.signals.row(static_cast<Eigen::Index>(r)) = ds.signals.row(rows[r]);
    out.labels[r] = ds.labels[rows[r]];
  }
  return out;
}

int run_gridsearch(const GridCli& cli, std::uint64_t seed, int workers,
                   bool verbose) {
  if (cli.folds < 2) {
    throw std::invalid_argument("--folds must be at least 2");
  }
  const sdl::LabeledDataset ds = load_input(cli.data, seed, verbose);
  const auto counts = ds.class_counts();
  for (int c = 1; c <= ds.p(); ++c) {
    if (counts[c - 1] < cli.folds) {
      throw sdl::data_error(
          "gridsearch: class " + std::to_string(c) + " (\"" +
          ds.class_labels[c - 1] + "\") has only " +
          std::to_string(counts[c - 1]) + " samples for " +
          std::to_string(cli.folds) + " folds");
    }
  }

  // Seeded stratified fold assignment: shuffle each class, deal round-robin.
  std::vector<int> fold_of(ds.m(), 0);
  for (int c = 1; c <= ds.p(); ++c) {
    std::vector<int> rows;
    for (int j = 0; j < ds.m(); ++j) {
      if (ds.labels[j] == c) rows.push_back(j);
    }
    sdl::Rng rng(seed + static_cast<std::uint64_t>(c));
    rng.shuffle(rows);
    for (std::size_t i = 0; i < rows.size(); ++i) {
      fold_of[rows[i]] = static_cast<int>(i) % cli.folds;
    }
  }

  struct GridPoint {
    int k = 0;
    double kappa = 0.0;
    double lambda2 = 0.0;
    double mean_error = 0.0;
    std::vector<double> fold_errors;
  };
  std::vector<GridPoint> results;
  for (int k : cli.k_grid) {
    for (double kappa : cli.kappa_grid) {
      for (double lambda2 : cli.lambda2_grid) {
        GridPoint point;
        point.k = k;
        point.kappa = kappa;
        point.lambda2 = lambda2;
        for (int f = 0; f < cli.folds; ++f) {
          std::vector<int> train_rows, held_rows;
          for (int j = 0; j < ds.m(); ++j) {
            (fold_of[j] == f ? held_rows : train_rows).push_back(j);
          }
          sdl::TrainConfig config;
          config.mode = sdl::TrainMode::Rec;
          config.hyper.k = k;
          config.hyper.lambda2 = lambda2;
          config.hyper.set_kappa(kappa);
          config.hyper.solver.tol = cli.solver_tol;
          config.hyper.solver.max_iter = cli.solver_max_iter;
          config.seed = seed + static_cast<std::uint64_t>(f);
          config.workers = workers;
          config.outer_iterations_per_mu = cli.iters;
          const sdl::SdlModel model =
              sdl::train_sdl(rows_subset(ds, train_rows), config).model;
          point.fold_errors.push_back(
              sdl::evaluate(rows_subset(ds, held_rows), model, workers)
                  .error_rate);
        }
        point.mean_error = 0.0;
        for (double e : point.fold_errors) point.mean_error += e;
        point.mean_error /= cli.folds;
        if (verbose) {
          std::cerr << "grid point k=" << k << " kappa=" << kappa
                    << " lambda2=" << lambda2
                    << " mean_cv_error=" << point.mean_error << "\n";
        }
        results.push_back(std::move(point));
      }
    }
  }

  std::sort(results.begin(), results.end(),
            [](const GridPoint& a, const GridPoint& b) {
              if (a.mean_error != b.mean_error) {
                return a.mean_error < b.mean_error;
              }
              if (a.k != b.k) return a.k < b.k;
              if (a.kappa != b.kappa) return a.kappa < b.kappa;
              return a.lambda2 < b.lambda2;
            });

  const std::size_t keep = std::min<std::size_t>(3, results.size());
  if (results.size() < 3) {
    std::cerr << "warning: grid has only " << results.size()
              << " point(s); keeping all of them\n";
  }

  json out;
  out["folds"] = cli.folds;
  out["seed"] = seed;
  out["ranking"] = json::array();
  for (const GridPoint& point : results) {
    out["ranking"].push_back({{"k", point.k},
                              {"kappa", point.kappa},
                              {"lambda2", point.lambda2},
                              {"mean_cv_error", point.mean_error},
                              {"fold_errors", point.fold_errors}});
  }
  out["kept"] = json::array();
  for (std::size_t i = 0; i < keep; ++i) out["kept"].push_back(out["ranking"][i]);

  for (std::size_t i = 0; i < results.size(); ++i) {
    std::printf("%s k=%d kappa=%.4g lambda2=%.4g mean_cv_error=%.4f\n",
                i < keep ? "kept" : "    ", results[i].k, results[i].kappa,
                results[i].lambda2, results[i].mean_error);
  }
  if (!cli.out_path.empty()) {
    std::ofstream file(cli.out_path);
    if (!file) {
      throw sdl::data_error("cannot open file for writing: " + cli.out_path);
    }
    file << out.dump(2) << "\n";
  }
  return 0;
}

// ---------------------------------------------------------------------------
// probe
// ---------------------------------------------------------------------------

struct ProbeCli {
  DataOptions data;
  std::vector<double> mu_values;
  std::vector<double> split_fracs = {0.7, 0.0, 0.3};
  int k = 32;
  double kappa = 0.15;
  double lambda2 = 1e-4;
  std::string variant = "linear";
  int iters = 10;
  std::string out_path;
};

/// Continuation prefix in 0.1 increments up to and including the target.
std::vector<double> probe_schedule(double mu) {
  std::vector<double> s;
  for (int i = 0; i * 0.1 < mu - 1e-9; ++i) s.push_back(0.1 * i);
  s.push_back(mu);
  return s;
}

int run_probe(const ProbeCli& cli, std::uint64_t seed, int workers,
              bool verbose) {
  for (double mu : cli.mu_values) {
    if (mu < 0.0 || mu > 1.0) {
      throw std::invalid_argument("--mu values must lie in [0, 1]");
    }
  }
  if (cli.split_fracs.size() != 3) {
    throw std::invalid_argument(
        "--split needs three fractions: train,val,test");
  }
  const sdl::LabeledDataset full = load_input(cli.data, seed, verbose);
  const sdl::SplitResult parts =
      sdl::split_dataset(full, cli.split_fracs[0], cli.split_fracs[1],
                         cli.split_fracs[2], seed);
  if (parts.test.m() == 0) {
    throw std::invalid_argument(
        "probe needs a positive test fraction in --split");
  }

  std::ofstream file;
  if (!cli.out_path.empty()) {
    file.open(cli.out_path);
    if (!file) {
      throw sdl::data_error("cannot open file for writing: " + cli.out_path);
    }
  }

  for (double mu : cli.mu_values) {
    sdl::TrainConfig config;
    config.mode = sdl::TrainMode::Sdl;
    config.variant = cli.variant == "bilinear"
                         ? sdl::DecisionVariant::Bilinear
                         : sdl::DecisionVariant::Linear;
    config.hyper.k = cli.k;
    config.hyper.lambda2 = cli.lambda2;
    config.hyper.set_kappa(cli.kappa);
    config.hyper.mu_schedule = probe_schedule(mu);
    config.seed = seed;
    config.workers = workers;
    config.outer_iterations_per_mu = cli.iters;

    const sdl::TrainResult result = sdl::train_sdl(parts.train, config);
    // The probe codes with unit reconstruction weight, so the matching l1
    // penalty is the ratio lambda1 / lambda0, which the early-iteration
    // rescaling keeps fixed at kappa.
    const double error = sdl::rec_dictionary_probe(
        parts.train, parts.test, result.model.dictionary,
        result.model.hyper.kappa, cli.lambda2, workers);
    std::printf("%.6g %.6g\n", mu, error);
    if (file.is_open()) {
      char line[64];
      std::snprintf(line, sizeof(line), "%.6g %.6g\n", mu, error);
      file << line;
    }
  }
  return 0;
}

// ---------------------------------------------------------------------------
// code
// ---------------------------------------------------------------------------

struct CodeCli {
  std::string model_path;
  std::string signal_path;
  int class_index = 0;  // 0 = reconstructive coding
  std::string out_path;
};

int run_code(const CodeCli& cli) {
  if (!is_single_model_file(cli.model_path)) {
    throw sdl::data_error(
        "code expects a single model file, not an ensemble manifest");
  }
  const sdl::SdlModel model = sdl::load_model(cli.model_path);

  std::ifstream in(cli.signal_path);
  if (!in) throw sdl::data_error("cannot open file: " + cli.signal_path);
  std::vector<double> values;
  double v = 0.0;
  while (in >> v) values.push_back(v);
  if (!in.eof()) {
    throw sdl::data_error("signal file: non-numeric content in " +
                          cli.signal_path);
  }
  if (static_cast<int>(values.size()) != model.n()) {
    throw sdl::data_error("signal file: read " +
                          std::to_string(values.size()) +
                          " values but the model expects " +
                          std::to_string(model.n()));
  }
  sdl::Vec x(model.n());
  for (int i = 0; i < model.n(); ++i) x[i] = values[i];

  sdl::CodeResult res;
  json out;
  if (cli.class_index > 0) {
    if (cli.class_index > model.p()) {
      throw std::invalid_argument("--class " +
                                  std::to_string(cli.class_index) +
                                  " is out of range; the model has " +
                                  std::to_string(model.p()) + " classes");
    }
    res = sdl::supervised_code(x, cli.class_index, model.dictionary,
                               model.params, model.hyper);
    out["mode"] = "supervised";
    out["class"] = cli.class_index;
  } else {
    res = sdl::reconstructive_code(x, model.dictionary, model.hyper.lambda1,
                                   model.hyper.solver);
    out["mode"] = "reconstructive";
  }
  out["alpha"] = std::vector<double>(res.alpha.data(),
                                     res.alpha.data() + res.alpha.size());
  out["objective"] = res.objective;
  out["nonzeros"] = sdl::count_nonzeros(res.alpha);
  out["iterations"] = res.iterations;
  out["converged"] = res.converged;
  out["kkt_residual"] = res.kkt_residual;

  if (cli.out_path.empty()) {
    std::cout << out.dump(2) << "\n";
  } else {
    std::ofstream file(cli.out_path);
    if (!file) {
      throw sdl::data_error("cannot open file for writing: " + cli.out_path);
    }
    file << out.dump(2) << "\n";
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Supervised dictionary learning toolkit"};
  app.require_subcommand(1);

  std::uint64_t seed = 0;
  int workers = default_workers();
  bool verbose = false;
  app.add_option("--seed", seed, "Seed for every random choice in the run")
      ->capture_default_str();
  app.add_option("--workers", workers, "Worker threads for sample-parallel "
                                       "loops")
      ->capture_default_str()
      ->check(CLI::PositiveNumber);
  app.add_flag("--verbose", verbose, "Trace configuration and progress to "
                                     "stderr");

  TrainCli train_cli;
  CLI::App* train = app.add_subcommand(
      "train", "Train a model (or ensemble) and write it to --model");
  train->fallthrough();
  add_data_options(train, train_cli.data);
  add_hyper_options(train, train_cli.hyper);
  train->add_option("--mode", train_cli.mode,
                    "sdl-d: mixed objective over the full mu path; sdl-g: "
                    "generative only (mu = 0); rec: reconstructive "
                    "dictionary plus a posterior classifier")
      ->capture_default_str()
      ->check(CLI::IsMember({"sdl-d", "sdl-g", "rec"}));
  train->add_option("--variant", train_cli.variant,
                    "Decision function family")
      ->capture_default_str()
      ->check(CLI::IsMember({"linear", "bilinear"}));
  train->add_option("--scheme", train_cli.scheme,
                    "multiclass: one shared model; pairwise / one-vs-all: "
                    "binary ensembles with voting")
      ->capture_default_str()
      ->check(CLI::IsMember({"multiclass", "pairwise", "one-vs-all"}));
  train->add_option("--mu-steps", train_cli.mu_steps,
                    "Evenly spaced mu values from 0 to 1 on the "
                    "continuation path")
      ->capture_default_str()
      ->check(CLI::PositiveNumber);
  train->add_option("--iters", train_cli.iters,
                    "Outer iterations per mu value")
      ->capture_default_str()
      ->check(CLI::PositiveNumber);
  train->add_option("--rel-tol", train_cli.rel_tol,
                    "Relative objective change that ends a mu stage early")
      ->capture_default_str()
      ->check(CLI::PositiveNumber);
  train->add_option("--gamma-iters", train_cli.gamma_iters,
                    "First-stage iterations allowed to rescale "
                    "(lambda0, lambda1)")
      ->capture_default_str()
      ->check(CLI::NonNegativeNumber);
  train->add_flag("--validate-each-iteration",
                  train_cli.validate_each_iteration,
                  "Measure validation error every iteration instead of once "
                  "per mu stage");
  train->add_option("--split", train_cli.split_fracs,
                    "Per-class fractions train,val[,test]; unsplit data "
                    "trains without validation")
      ->delimiter(',');
  train->add_option("--budget", train_cli.budget,
                    "Warn when supervised solves per outer iteration exceed "
                    "this count")
      ->capture_default_str()
      ->check(CLI::PositiveNumber);
  train->add_option("--model", train_cli.model_path,
                    "Output model file (ensemble schemes write a JSON "
                    "manifest plus one file per member)")
      ->required();
  train->add_option("--trace", train_cli.trace_path,
                    "Output trace file, one JSON record per outer iteration");
  train->add_option("--save-test", train_cli.save_test_path,
                    "Write the test fraction of --split as a dataset cache");
  train->add_option("--dump-config", train_cli.dump_config_path,
                    "Write the resolved run configuration as JSON");

  EvalCli eval_cli;
  CLI::App* eval = app.add_subcommand(
      "eval", "Evaluate a model on a labeled dataset");
  eval->fallthrough();
  add_data_options(eval, eval_cli.data);
  eval->add_option("--model", eval_cli.model_path,
                   "Model file or ensemble manifest")
      ->required();
  eval->add_option("--report", eval_cli.report_path,
                   "Output JSON report with the confusion matrix");

  GridCli grid_cli;
  CLI::App* grid = app.add_subcommand(
      "gridsearch",
      "Cross-validate (k, kappa[, lambda2]) with reconstructive training");
  grid->fallthrough();
  add_data_options(grid, grid_cli.data);
  grid->add_option("--k-grid", grid_cli.k_grid, "Dictionary sizes to try")
      ->delimiter(',')
      ->capture_default_str();
  grid->add_option("--kappa-grid", grid_cli.kappa_grid,
                   "Sparsity ratios to try")
      ->delimiter(',')
      ->capture_default_str();
  grid->add_option("--lambda2-grid", grid_cli.lambda2_grid,
                   "Ridge weights to try")
      ->delimiter(',')
      ->capture_default_str();
  grid->add_option("--folds", grid_cli.folds, "Cross-validation folds")
      ->capture_default_str()
      ->check(CLI::PositiveNumber);
  grid->add_option("--iters", grid_cli.iters,
                   "Reconstructive outer iterations per fold")
      ->capture_default_str()
      ->check(CLI::PositiveNumber);
  grid->add_option("--tol", grid_cli.solver_tol,
                   "Sparse solver optimality tolerance")
      ->capture_default_str()
      ->check(CLI::PositiveNumber);
  grid->add_option("--solver-iters", grid_cli.solver_max_iter,
                   "Sparse solver total iteration cap")
      ->capture_default_str()
      ->check(CLI::PositiveNumber);
  grid->add_option("--out", grid_cli.out_path,
                   "Output JSON ranking (sorted by mean CV error, top 3 "
                   "kept)");

  ProbeCli probe_cli;
  CLI::App* probe = app.add_subcommand(
      "probe",
      "Train along the mu path and measure how informative reconstructive "
      "codes of each dictionary are");
  probe->fallthrough();
  add_data_options(probe, probe_cli.data);
  probe->add_option("--mu", probe_cli.mu_values,
                    "Mixing values to probe; each trains with a 0.1-step "
                    "continuation prefix ending at the value")
      ->delimiter(',')
      ->required();
  probe->add_option("--split", probe_cli.split_fracs,
                    "Fractions train,val,test (the probe fits on train and "
                    "scores on test)")
      ->delimiter(',')
      ->capture_default_str();
  probe->add_option("--k", probe_cli.k, "Number of dictionary atoms")
      ->capture_default_str()
      ->check(CLI::PositiveNumber);
  probe->add_option("--kappa", probe_cli.kappa, "Sparsity ratio")
      ->capture_default_str()
      ->check(CLI::NonNegativeNumber);
  probe->add_option("--lambda2", probe_cli.lambda2,
                    "Ridge weight for training and the probe readout")
      ->capture_default_str()
      ->check(CLI::NonNegativeNumber);
  probe->add_option("--variant", probe_cli.variant,
                    "Decision function family used during training")
      ->capture_default_str()
      ->check(CLI::IsMember({"linear", "bilinear"}));
  probe->add_option("--iters", probe_cli.iters,
                    "Outer iterations per mu value")
      ->capture_default_str()
      ->check(CLI::PositiveNumber);
  probe->add_option("--out", probe_cli.out_path,
                    "Output file, one \"mu error\" line per value");

  CodeCli code_cli;
  CLI::App* code = app.add_subcommand(
      "code", "Sparse-code one signal with a trained model, emitting JSON");
  code->fallthrough();
  code->add_option("--model", code_cli.model_path, "Model file")->required();
  code->add_option("--signal", code_cli.signal_path,
                   "Text file of whitespace-separated signal values")
      ->required();
  code->add_option("--class", code_cli.class_index,
                   "1-based class whose supervised code to compute; omit "
                   "for reconstructive coding")
      ->check(CLI::PositiveNumber);
  code->add_option("--out", code_cli.out_path,
                   "Output JSON file (default: stdout)");

  int rc = 0;
  train->callback(
      [&] { rc = run_train(train_cli, seed, workers, verbose); });
  eval->callback([&] { rc = run_eval(eval_cli, seed, workers, verbose); });
  grid->callback(
      [&] { rc = run_gridsearch(grid_cli, seed, workers, verbose); });
  probe->callback(
      [&] { rc = run_probe(probe_cli, seed, workers, verbose); });
  code->callback([&] { rc = run_code(code_cli); });

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code_ = app.exit(e);
    return code_ == 0 ? 0 : 2;
  } catch (const sdl::data_error& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return 3;
  } catch (const sdl::train_abort& e) {
    std::cerr << "training aborted: " << e.what() << "\n";
    return 4;
  } catch (const std::invalid_argument& e) {
    std::cerr << "invalid argument: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 4;
  }
  return rc;
}
