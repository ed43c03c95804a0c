#include "abus/cli.hpp"

#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <optional>
#include <random>
#include <set>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>
#include <omp.h>

#include "abus/checkpoint.hpp"
#include "abus/denoise.hpp"
#include "abus/errors.hpp"
#include "abus/inference.hpp"
#include "abus/metrics.hpp"
#include "abus/patches.hpp"
#include "abus/phantom.hpp"
#include "abus/report.hpp"
#include "abus/training.hpp"
#include "abus/volume_io.hpp"

namespace abus {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct Common {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out = "out";
  bool serial = false;
};

json load_config(const Common& c) {
  if (c.config.empty()) return json::object();
  if (!fs::exists(c.config)) throw ConfigError("config file " + c.config + " does not exist");
  try {
    json j = json::parse(read_text(c.config));
    if (!j.is_object()) throw ConfigError(c.config + ": config must be a JSON object");
    return j;
  } catch (const json::parse_error& e) {
    throw ConfigError(c.config + ": " + e.what());
  }
}

void check_keys(const json& j, const std::set<std::string>& allowed, const std::string& command) {
  for (const auto& [key, value] : j.items())
    if (!allowed.contains(key)) throw ConfigError("unknown key '" + key + "' in " + command + " config");
}

std::uint64_t resolve_seed(const Common& c, const json& j) {
  if (c.seed) return *c.seed;
  return j.value("seed", std::uint64_t{0});
}

fs::path required_path(const json& j, const std::string& key, const std::string& command) {
  if (!j.contains(key) || !j.at(key).is_string()) throw ConfigError(command + " config needs a '" + key + "' path");
  return j.at(key).get<std::string>();
}

fs::path existing_manifest(const json& j, const std::string& command) {
  fs::path p = required_path(j, "manifest", command);
  if (!fs::is_regular_file(p)) throw ConfigError("manifest " + p.string() + " does not exist");
  return p;
}

void write_json(const fs::path& p, const json& j) { write_text(p, j.dump(2) + "\n"); }

void write_snapshot(const Common& c, const std::string& command, json resolved) {
  resolved["command"] = command;
  resolved["serial"] = c.serial;
  write_json(fs::path(c.out) / "config.resolved.json", resolved);
}

std::string case_name(const std::string& prefix, int i, int count) {
  const int width = std::max(3, static_cast<int>(std::to_string(std::max(count - 1, 0)).size()));
  std::string n = std::to_string(i);
  return prefix + std::string(static_cast<std::size_t>(std::max(0, width - static_cast<int>(n.size()))), '0') + n;
}

// ---------------------------------------------------------------- phantom

int cmd_phantom(const Common& c) {
  const json j = load_config(c);
  check_keys(j, {"count", "seed", "phantom", "prefix"}, "phantom");
  const int count = j.value("count", 10);
  if (count < 0) throw ConfigError("count must be >= 0");
  const std::uint64_t seed = resolve_seed(c, j);
  const std::string prefix = j.value("prefix", std::string("case"));
  const PhantomSpec spec = j.value("phantom", json::object()).get<PhantomSpec>();
  spec.validate();
  const fs::path out = c.out;
  write_snapshot(c, "phantom", {{"count", count}, {"seed", seed}, {"prefix", prefix}, {"phantom", spec}});

  std::mt19937_64 seeds(seed);
  Manifest manifest;
  for (int i = 0; i < count; ++i) {
    const std::string id = case_name(prefix, i, count);
    const Phantom p = generate_phantom(spec, seeds(), id);
    write_volume(p.image, out / "images" / (id + ".vraw"));
    write_volume(p.mask, out / "masks" / (id + ".vraw"));
    manifest.cases.push_back({id, "images/" + id + ".vraw", "masks/" + id + ".vraw", p.lesions});
  }
  write_manifest(manifest, out / "manifest.json");
  std::cout << "wrote " << count << " phantom cases to " << out.string() << "\n";
  return kExitOk;
}

// ---------------------------------------------------------------- denoise

int cmd_denoise(const Common& c) {
  const json j = load_config(c);
  check_keys(j, {"manifest", "volume", "obnlm"}, "denoise");
  const ObnlmParams params = j.value("obnlm", json::object()).get<ObnlmParams>();
  params.validate();
  if (j.contains("manifest") == j.contains("volume")) throw ConfigError("denoise config needs exactly one of 'manifest' or 'volume'");
  const fs::path out = c.out;
  json resolved{{"obnlm", params}};
  json summary = json::array();
  auto run = [&](const std::string& id, const Volume& v, const fs::path& dst) {
    const double h = obnlm_smoothing(v, params);
    write_volume(obnlm_denoise(v, params), dst);
    summary.push_back({{"case_id", id}, {"h", h}});
  };
  if (j.contains("volume")) {
    const fs::path src = required_path(j, "volume", "denoise");
    resolved["volume"] = src.string();
    write_snapshot(c, "denoise", resolved);
    run(src.stem().string(), read_volume(src), out / src.filename());
  } else {
    const fs::path src = existing_manifest(j, "denoise");
    resolved["manifest"] = src.string();
    write_snapshot(c, "denoise", resolved);
    const Manifest in = read_manifest(src);
    Manifest m;
    for (const ManifestEntry& e : in.cases) {
      const Case k = load_case(e, src.parent_path());
      run(e.case_id, k.image, out / "images" / (e.case_id + ".vraw"));
      write_volume(k.mask, out / "masks" / (e.case_id + ".vraw"));
      m.cases.push_back({e.case_id, "images/" + e.case_id + ".vraw", "masks/" + e.case_id + ".vraw", e.lesions});
    }
    write_manifest(m, out / "manifest.json");
  }
  write_json(out / "summary.json", {{"volumes", summary}});
  std::cout << "denoised " << summary.size() << " volume(s) into " << out.string() << "\n";
  return kExitOk;
}

// ---------------------------------------------------------------- train / crossval

struct TrainingSetup {
  fs::path manifest;
  std::uint64_t seed = 0;
  ModelConfig model;
  PatchOptions patches;
  TrainConfig train;
};

// Model, patch and training settings; patch paths and dimensionality follow the model.
TrainingSetup training_setup(const Common& c, const json& j, const std::string& command) {
  check_keys(j, {"manifest", "seed", "model", "patches", "train"}, command);
  TrainingSetup s;
  s.manifest = existing_manifest(j, command);
  s.seed = resolve_seed(c, j);
  s.model = j.value("model", json::object()).get<ModelConfig>();
  s.model.validate();
  s.patches = j.value("patches", json::object()).get<PatchOptions>();
  s.patches.dimensionality = s.model.dimensionality;
  s.patches.paths = s.model.dual_path ? 2 : 1;
  s.patches.second_path_scale = s.model.second_path_scale;
  const Index div = s.model.divisor();
  if ((s.model.dimensionality == 3 && s.patches.extents.d % div) || s.patches.extents.h % div ||
      s.patches.extents.w % div)
    throw ConfigError("patch extents " + to_string(s.patches.extents) + " must be divisible by " + std::to_string(div));
  s.train = j.value("train", json::object()).get<TrainConfig>();
  s.train.seed = s.seed;
  s.train.validate();
  return s;
}

json setup_json(const TrainingSetup& s) {
  return {{"manifest", s.manifest.string()}, {"seed", s.seed}, {"model", s.model}, {"patches", s.patches},
          {"train", s.train}};
}

int cmd_train(const Common& c) {
  const TrainingSetup s = training_setup(c, load_config(c), "train");
  const fs::path out = c.out;
  write_snapshot(c, "train", setup_json(s));
  const std::vector<Case> cases = load_cases(s.manifest);
  const std::vector<Sample> samples = make_samples(cases, s.patches);
  Model model(s.model, s.seed);
  const TrainResult r = train(model, samples, {}, s.train);
  save_checkpoint(model, out / "model.ckpt");
  write_text(out / "history.csv", history_csv(r.history));
  write_json(out / "summary.json", {{"cases", cases.size()},
                                    {"samples", samples.size()},
                                    {"best_epoch", r.best_epoch},
                                    {"best_val_dsc", r.best_val_dsc},
                                    {"final_train_dsc", r.final_train_dsc},
                                    {"last_epoch_val_dsc", r.history.empty() ? 0.0 : r.history.back().val_dsc}});
  std::cout << "final training DSC " << format_number(r.final_train_dsc) << "\n";
  return kExitOk;
}

int cmd_crossval(const Common& c) {
  const TrainingSetup s = training_setup(c, load_config(c), "crossval");
  const fs::path out = c.out;
  write_snapshot(c, "crossval", setup_json(s));
  const std::vector<Case> cases = load_cases(s.manifest);
  json folds = json::array();
  const CrossValidation cv = cross_validate(cases, s.patches, s.train, s.model, [&](const FoldResult& f, const Model& m) {
    const fs::path dir = out / ("fold" + std::to_string(f.fold));
    save_checkpoint(m, dir / "model.ckpt");
    write_text(dir / "history.csv", history_csv(f.result.history));
    std::cout << "fold " << f.fold << ": validation DSC " << format_number(f.result.best_val_dsc) << "\n";
  });
  for (const FoldResult& f : cv.folds)
    folds.push_back({{"fold", f.fold},
                     {"checkpoint", "fold" + std::to_string(f.fold) + "/model.ckpt"},
                     {"validation_cases", f.validation_cases},
                     {"best_epoch", f.result.best_epoch},
                     {"best_val_dsc", f.result.best_val_dsc},
                     {"final_train_dsc", f.result.final_train_dsc}});
  write_json(out / "folds.json", {{"assignment", cv.assignment}, {"folds", folds}});
  write_json(out / "summary.json", {{"cases", cases.size()}, {"folds", s.train.folds}, {"mean_dsc", cv.mean_dsc}});
  std::cout << "mean validation DSC " << format_number(cv.mean_dsc) << "\n";
  return kExitOk;
}

// ---------------------------------------------------------------- segment

Segmenter stub_segmenter(const std::string& kind, int dims) {
  if (kind != "background" && kind != "foreground") throw ConfigError("stub must be 'background' or 'foreground'");
  Segmenter s;
  s.dimensionality = dims;
  const float fg = kind == "foreground" ? 1.0f : -1.0f;
  s.predict = [fg](std::span<const TensorF> in) {
    Shape shape = in[0].shape();
    shape[1] = 2;
    TensorF logits(shape);
    const Index plane = in[0].spatial().volume();
    for (Index i = 0; i < plane; ++i) logits[plane + i] = fg;
    return logits;
  };
  return s;
}

// Lesion slices of the ground truth within the lesion's own depth range.
std::vector<Index> prior_slices(const Case& k, const LesionAnnotation& l) {
  const Index reach = static_cast<Index>(std::ceil(l.diameter_mm / 2.0 / k.mask.spacing[0])) + 1;
  std::vector<Index> out;
  for (Index z : lesion_slice_indices(k.mask))
    if (std::abs(z - l.center.z) <= reach) out.push_back(z);
  return out;
}

int cmd_segment(const Common& c, const std::string& stub) {
  const json j = load_config(c);
  check_keys(j, {"manifest", "crossval", "checkpoint", "schedule", "patches", "model"}, "segment");
  const fs::path manifest = existing_manifest(j, "segment");
  const fs::path out = c.out;
  ScaleSchedule schedule{0.9, 0.8, 0.7, 0.6, 0.5};
  if (j.contains("schedule"))
    schedule = j.at("schedule").is_string() ? parse_schedule(j.at("schedule").get<std::string>())
                                            : j.at("schedule").get<ScaleSchedule>();
  validate_schedule(schedule);

  std::optional<fs::path> cv_dir, checkpoint;
  if (j.contains("crossval")) cv_dir = required_path(j, "crossval", "segment");
  if (j.contains("checkpoint")) checkpoint = required_path(j, "checkpoint", "segment");
  if (stub.empty() && cv_dir.has_value() == checkpoint.has_value())
    throw ConfigError("segment config needs exactly one of 'crossval' or 'checkpoint' (or --stub)");

  // Patch settings default to those the models were trained with.
  json patches_json = json::object();
  const std::optional<fs::path> source_dir = cv_dir ? cv_dir : checkpoint ? std::optional(checkpoint->parent_path()) : std::nullopt;
  if (source_dir && fs::exists(*source_dir / "config.resolved.json")) {
    const json snap = json::parse(read_text(*source_dir / "config.resolved.json"));
    if (snap.contains("patches")) patches_json = snap.at("patches");
  }
  if (j.contains("patches")) patches_json.update(j.at("patches"));
  const PatchOptions patches = patches_json.get<PatchOptions>();

  std::map<std::string, int> assignment;
  std::map<int, fs::path> fold_checkpoints;
  if (cv_dir && stub.empty()) {
    const json folds = json::parse(read_text(*cv_dir / "folds.json"));
    assignment = folds.at("assignment").get<std::map<std::string, int>>();
    for (const json& f : folds.at("folds"))
      fold_checkpoints[f.at("fold").get<int>()] = *cv_dir / f.at("checkpoint").get<std::string>();
  }

  json resolved{{"manifest", manifest.string()}, {"schedule", schedule}, {"patches", patches}, {"stub", stub}};
  if (cv_dir) resolved["crossval"] = cv_dir->string();
  if (checkpoint) resolved["checkpoint"] = checkpoint->string();
  std::optional<ModelConfig> expected;
  if (j.contains("model")) {
    expected = j.at("model").get<ModelConfig>();
    resolved["model"] = *expected;
  }
  write_snapshot(c, "segment", resolved);

  std::map<fs::path, std::unique_ptr<Model>> models;
  auto model_for = [&](const fs::path& p) -> Model& {
    auto& slot = models[p];
    if (!slot) {
      slot = std::make_unique<Model>(load_checkpoint(p));
      const ModelConfig& mc = slot->config();
      if (expected && !(*expected == mc)) throw ConfigError("checkpoint " + p.string() + " does not match the configured model");
      if (mc.dimensionality != patches.dimensionality)
        throw ConfigError("checkpoint " + p.string() + " is " + std::to_string(mc.dimensionality) +
                          "-D but patches are " + std::to_string(patches.dimensionality) + "-D");
    }
    return *slot;
  };

  const Manifest m = read_manifest(manifest);
  json entries = json::array();
  std::int64_t lesions = 0, warnings = 0, calls = 0;
  for (const ManifestEntry& e : m.cases) {
    const Case k = load_case(e, manifest.parent_path());
    Segmenter seg;
    int fold = -1;
    if (!stub.empty()) {
      seg = stub_segmenter(stub, patches.dimensionality);
    } else if (cv_dir) {
      const auto it = assignment.find(e.case_id);
      if (it == assignment.end()) throw ConfigError("case '" + e.case_id + "' is not part of the cross-validation run");
      fold = it->second;
      seg = model_segmenter(model_for(fold_checkpoints.at(fold)));
    } else {
      seg = model_segmenter(model_for(*checkpoint));
    }
    for (std::size_t li = 0; li < e.lesions.size(); ++li) {
      const LesionAnnotation& l = e.lesions[li];
      SegmentationResult r;
      if (patches.dimensionality == 2) {
        std::vector<Index> slices = prior_slices(k, l);
        if (slices.empty()) slices.push_back(l.center.z);
        r = segment_2d(seg, k.image, slices, patches.extents.h, patches.extents.w, l.center);
      } else {
        r = segment_with_rescaling(seg, k.image, l.center, patches.extents, schedule);
      }
      const std::string stem = e.case_id + "_lesion" + std::to_string(li);
      write_volume(r.mask, out / "masks" / (stem + ".vraw"));
      json trace = json::array();
      for (const TraceEntry& t : r.trace)
        trace.push_back({{"scale", t.scale}, {"boundary_positive", t.boundary_positive}, {"accepted", t.accepted}});
      write_json(out / "traces" / (stem + ".json"), {{"case_id", e.case_id},
                                                     {"lesion", li},
                                                     {"fold", fold},
                                                     {"model_calls", r.model_calls},
                                                     {"trace", trace},
                                                     {"warnings", r.warnings}});
      entries.push_back({{"case_id", e.case_id},
                         {"lesion", li},
                         {"mask", "masks/" + stem + ".vraw"},
                         {"trace", "traces/" + stem + ".json"}});
      ++lesions;
      warnings += static_cast<std::int64_t>(r.warnings.size());
      calls += r.model_calls;
      for (const std::string& w : r.warnings) std::cerr << "warning: " << stem << ": " << w << "\n";
    }
  }
  write_json(out / "summary.json", {{"cases", m.cases.size()},
                                    {"lesions", lesions},
                                    {"warnings", warnings},
                                    {"model_calls", calls},
                                    {"entries", entries}});
  std::cout << "segmented " << lesions << " lesion(s), " << warnings << " warning(s)\n";
  return kExitOk;
}

// ---------------------------------------------------------------- report

void write_plot(const fs::path& out, const std::string& stem, const std::vector<ScatterRow>& rows,
                const std::string& x_name, const std::string& y_name, PlotOptions options) {
  write_text(out / (stem + ".csv"), scatter_csv(rows, x_name, y_name));
  PlotSeries s;
  for (const ScatterRow& r : rows) {
    s.x.push_back(r.x);
    s.y.push_back(r.y);
  }
  write_text(out / (stem + ".svg"), svg_plot(s, options));
}

int cmd_report(const Common& c) {
  const json j = load_config(c);
  check_keys(j, {"manifest", "segmentation", "predictions", "smoothing_radius"}, "report");
  const fs::path manifest = existing_manifest(j, "report");
  const fs::path out = c.out;
  std::optional<fs::path> seg_dir;
  if (j.contains("segmentation")) seg_dir = required_path(j, "segmentation", "report");
  const std::string predictions = j.value("predictions", std::string(seg_dir ? "segmentation" : "none"));
  static const std::set<std::string> kinds{"none", "segmentation", "ground_truth", "empty", "smoothed_ground_truth"};
  if (!kinds.contains(predictions)) throw ConfigError("unknown predictions source '" + predictions + "'");
  if (predictions == "segmentation" && !seg_dir) throw ConfigError("predictions 'segmentation' need a 'segmentation' directory");
  const int radius = j.value("smoothing_radius", 2);
  json resolved{{"manifest", manifest.string()}, {"predictions", predictions}, {"smoothing_radius", radius}};
  if (seg_dir) resolved["segmentation"] = seg_dir->string();
  write_snapshot(c, "report", resolved);

  const Manifest m = read_manifest(manifest);
  json summary{{"cases", m.cases.size()}};

  std::vector<double> diameters;
  for (const ManifestEntry& e : m.cases)
    for (const LesionAnnotation& l : e.lesions) diameters.push_back(l.diameter_mm);
  summary["lesions"] = diameters.size();
  if (!diameters.empty()) {
    const DiameterCdf cdf = cumulative_diameter_histogram(diameters);
    write_text(out / "diameter_cdf.csv", cdf_csv(cdf));
    write_text(out / "diameter_cdf.svg", svg_plot({cdf.diameters, cdf.fraction},
                                                  {"Cumulative histogram of lesion diameters", "diameter (mm)",
                                                   "fraction of lesions", true, false, {7.0, 15.0}}));
    double sum = 0;
    for (double d : diameters) sum += d;
    summary["mean_diameter_mm"] = sum / static_cast<double>(diameters.size());
    summary["cdf_at_7mm"] = cdf.at(7.0);
    summary["cdf_at_15mm"] = cdf.at(15.0);
  }

  int exit_code = kExitOk;
  if (predictions != "none") {
    std::map<std::string, std::vector<fs::path>> predicted;
    if (predictions == "segmentation") {
      const json seg = json::parse(read_text(*seg_dir / "summary.json"));
      for (const json& e : seg.at("entries"))
        predicted[e.at("case_id").get<std::string>()].push_back(*seg_dir / e.at("mask").get<std::string>());
    }
    std::vector<EvalRecord> records;
    std::string errors = "case_id,error\n";
    int failed = 0;
    for (const ManifestEntry& e : m.cases) {
      try {
        const Volume gt = read_volume(manifest.parent_path() / e.mask);
        Volume pred(gt.extents, gt.spacing, VoxelType::u8);
        pred.origin = gt.origin;
        if (predictions == "ground_truth") {
          pred = gt;
        } else if (predictions == "smoothed_ground_truth") {
          pred = morphological_smooth(gt, radius);
        } else if (predictions == "segmentation") {
          const auto it = predicted.find(e.case_id);
          if (it == predicted.end()) throw ConfigError("no segmentation for case '" + e.case_id + "'");
          for (const fs::path& p : it->second) {
            const Volume part = read_volume(p);
            if (!same_grid(part, gt)) throw ContractViolation("prediction grid differs from ground truth");
            for (std::size_t i = 0; i < pred.data.size(); ++i) pred.data[i] = std::max(pred.data[i], part.data[i]);
          }
        }
        EvalRecord r;
        r.case_id = e.case_id;
        r.dsc = dice(pred, gt);
        if (count_positive(gt) > 0) {
          r.gt_compactness = compactness(gt, true);
          r.gt_diameter_mm = equivalent_diameter(gt);
          r.gt_volume_mm3 = mask_volume_mm3(gt);
        }
        if (count_positive(pred) > 0) r.predicted_compactness = compactness(pred, true);
        records.push_back(r);
      } catch (const std::exception& ex) {
        ++failed;
        errors += e.case_id + ",\"" + ex.what() + "\"\n";
        std::cerr << "error: " << e.case_id << ": " << ex.what() << "\n";
      }
    }
    if (failed > 0) write_text(out / "errors.csv", errors);
    write_text(out / "eval.csv", eval_csv(records));
    double mean = 0;
    for (const EvalRecord& r : records) mean += r.dsc;
    mean = records.empty() ? 0.0 : mean / static_cast<double>(records.size());
    std::vector<EvalRecord> with_gt, with_both;
    for (const EvalRecord& r : records) {
      if (r.gt_volume_mm3 > 0) with_gt.push_back(r);
      if (r.gt_volume_mm3 > 0 && r.predicted_compactness > 0) with_both.push_back(r);
    }
    write_plot(out, "dsc_vs_compactness", dsc_vs_property(with_gt, EvalProperty::compactness), "gt_compactness", "dsc",
               {"DSC against ground-truth compactness", "ground-truth compactness", "DSC", false, false, {}});
    write_plot(out, "dsc_vs_size", dsc_vs_property(with_gt, EvalProperty::size), "gt_diameter_mm", "dsc",
               {"DSC against ground-truth size", "equivalent diameter (mm)", "DSC", false, false, {}});
    write_plot(out, "compactness_gt_vs_predicted", compactness_pairs(with_both), "gt_compactness",
               "predicted_compactness",
               {"Predicted against ground-truth compactness", "ground-truth compactness", "predicted compactness",
                false, true, {}});
    summary["predictions"] = predictions;
    summary["evaluated"] = records.size();
    summary["failed"] = failed;
    summary["mean_dsc"] = mean;
    if (!m.cases.empty() && records.empty()) exit_code = kExitRuntime;
    std::cout << "mean DSC " << format_number(mean) << " over " << records.size() << " case(s)\n";
  }
  write_json(out / "summary.json", summary);
  return exit_code;
}

void apply_threads(bool serial) {
  if (serial) {
    omp_set_num_threads(1);
    return;
  }
  if (const char* env = std::getenv(kThreadsEnv)) {
    char* end = nullptr;
    const long n = std::strtol(env, &end, 10);
    if (end == env || *end != '\0' || n < 1) throw ConfigError(std::string(kThreadsEnv) + " must be a positive integer");
    omp_set_num_threads(static_cast<int>(n));
  }
}

}  // namespace

int run_cli(int argc, char** argv) {
  CLI::App app{"Lesion segmentation on automated breast ultrasound volumes", "abusseg"};
  app.require_subcommand(1);
  Common common;
  std::string stub;
  auto add_common = [&common](CLI::App* sub) {
    sub->add_option("--config", common.config, "JSON config file");
    sub->add_option("--seed", common.seed, "Seed overriding the config");
    sub->add_option("--out", common.out, "Output directory")->capture_default_str();
    sub->add_flag("--serial", common.serial, "Run single-threaded (byte-identical reruns)");
  };
  CLI::App* phantom = app.add_subcommand("phantom", "Generate a synthetic phantom dataset");
  CLI::App* denoise = app.add_subcommand("denoise", "Despeckle volumes with OBNLM");
  CLI::App* train_cmd = app.add_subcommand("train", "Train one model on every case of a manifest");
  CLI::App* crossval = app.add_subcommand("crossval", "Case-level k-fold cross-validation");
  CLI::App* segment = app.add_subcommand("segment", "Segment every annotated lesion");
  CLI::App* report = app.add_subcommand("report", "Evaluation tables and plots");
  for (CLI::App* sub : {phantom, denoise, train_cmd, crossval, segment, report}) add_common(sub);
  segment->add_option("--stub", stub, "Replace the model by a constant stub: background | foreground");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitConfig;
  }

  try {
    apply_threads(common.serial);
    if (phantom->parsed()) return cmd_phantom(common);
    if (denoise->parsed()) return cmd_denoise(common);
    if (train_cmd->parsed()) return cmd_train(common);
    if (crossval->parsed()) return cmd_crossval(common);
    if (segment->parsed()) return cmd_segment(common, stub);
    if (report->parsed()) return cmd_report(common);
  } catch (const ConfigError& e) {
    std::cerr << "abusseg: configuration error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const ContractViolation& e) {
    std::cerr << "abusseg: contract violation: " << e.what() << "\n";
    return kExitConfig;
  } catch (const json::exception& e) {
    std::cerr << "abusseg: configuration error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const std::exception& e) {
    std::cerr << "abusseg: error: " << e.what() << "\n";
    return kExitRuntime;
  }
  return kExitConfig;
}

int run_cli(const std::vector<std::string>& args) {
  std::vector<std::string> copy = args;
  std::vector<char*> argv;
  for (std::string& a : copy) argv.push_back(a.data());
  return run_cli(static_cast<int>(argv.size()), argv.data());
}

}  // namespace abus
