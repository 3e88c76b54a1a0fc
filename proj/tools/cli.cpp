#include "cli.hpp"

#include <CLI11.hpp>

#include <algorithm>
#include <fstream>
#include <iomanip>
#include <map>
#include <ostream>

#include "bitr/binary_io.hpp"
#include "bitr/config.hpp"
#include "bitr/gradient_suite.hpp"
#include "bitr/inference.hpp"
#include "bitr/metrics.hpp"
#include "bitr/nifti.hpp"
#include "bitr/selftest.hpp"
#include "bitr/training.hpp"

namespace bitr {

namespace fs = std::filesystem;

namespace {

/// Failed numerical check; reported like a data error.
class CheckFailed : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

bool is_nifti(const fs::path& p) {
  const auto name = p.filename().string();
  return name.ends_with(".nii") || name.ends_with(".nii.gz");
}

std::string nifti_stem(const fs::path& p) {
  auto name = p.filename().string();
  for (const char* ext : {".nii.gz", ".nii"})
    if (name.ends_with(ext)) return name.substr(0, name.size() - std::string(ext).size());
  return name;
}

bool has_modalities(const fs::path& dir) {
  try {
    find_case_files(dir);
    return true;
  } catch (const IoError&) {
    return false;
  }
}

/// Postprocessing flags; each one given on the command line overrides the
/// corresponding value from --config.
struct PostprocOptions {
  Index thresholds[3] = {0, 0, 50};
  std::string strategy = "remove-component";
  std::string scope = "component";
  int fallback = 1;
  bool disabled = false;
  std::filesystem::path config;
  CLI::Option* given[6] = {};

  void add_to(CLI::App& cmd) {
    given[2] = cmd.add_option("--postproc-threshold", thresholds[2],
                              "Minimum enhancing-tumor (label 4) volume in voxels")
                   ->check(CLI::NonNegativeNumber)
                   ->capture_default_str();
    given[0] = cmd.add_option("--postproc-threshold-1", thresholds[0], "Minimum label-1 volume in voxels")
                   ->check(CLI::NonNegativeNumber);
    given[1] = cmd.add_option("--postproc-threshold-2", thresholds[1], "Minimum label-2 volume in voxels")
                   ->check(CLI::NonNegativeNumber);
    given[3] = cmd.add_option("--postproc-strategy", strategy, "What happens to small volumes")
                   ->check(CLI::IsMember({"remove-component", "relabel-class"}))
                   ->capture_default_str();
    given[4] = cmd.add_option("--postproc-scope", scope,
                              "Threshold each connected component or a class's total volume")
                   ->check(CLI::IsMember({"component", "class"}))
                   ->capture_default_str();
    given[5] = cmd.add_option("--postproc-fallback", fallback, "Label receiving relabeled voxels")
                   ->check(CLI::IsMember({0, 1, 2, 4}))
                   ->capture_default_str();
    cmd.add_flag("--no-postproc", disabled, "Skip volume-threshold postprocessing");
    cmd.add_option("--config", config, "key=value file supplying postproc.* defaults")->check(CLI::ExistingFile);
  }

  PostprocConfig resolve() const {
    PostprocConfig c = config.empty() ? PostprocConfig{} : load_config(config).postproc;
    for (int k = 0; k < 3; ++k)
      if (given[k]->count()) c.thresholds[static_cast<std::size_t>(k + 1)] = thresholds[k];
    if (given[3]->count()) c.strategy = parse_strategy(strategy);
    if (given[4]->count()) c.scope = parse_scope(scope);
    if (given[5]->count()) c.fallback = internal_label(fallback);
    c.validate();
    return c;
  }
};

// ---------------------------------------------------------------------------

int preprocess(const fs::path& input, const fs::path& out_dir, std::ostream& out) {
  std::vector<fs::path> cases;
  if (has_modalities(input)) {
    cases.push_back(input);
  } else {
    if (!fs::is_directory(input)) throw IoError("input directory not found: " + input.string());
    for (const auto& e : fs::directory_iterator(input))
      if (e.is_directory() && has_modalities(e.path())) cases.push_back(e.path());
    std::sort(cases.begin(), cases.end());
  }
  if (cases.empty()) throw IoError("no case directories with t1, t1ce, t2 and flair volumes under " + input.string());
  fs::create_directories(out_dir);
  for (const auto& dir : cases) {
    const auto record = load_case_directory(dir);
    const auto path = out_dir / (record.id + ".btrc");
    cache_case(record, path);
    out << record.id << '\t' << path.string() << '\t' << (record.label ? "labelled" : "unlabelled") << '\n';
  }
  return 0;
}

int train(const fs::path& cache_dir, const fs::path& config_path, const std::vector<std::string>& settings,
          const fs::path& out_dir, std::ostream& out) {
  RunConfig cfg = config_path.empty() ? RunConfig{} : load_config(config_path);
  for (const auto& s : settings) {
    const auto eq = s.find('=');
    if (eq == std::string::npos) throw ConfigError("--set expects key=value, got '" + s + "'");
    apply_setting(cfg, s.substr(0, eq), s.substr(eq + 1));
  }
  cfg.model.validate();
  if (!fs::is_directory(cache_dir)) throw IoError("cache directory not found: " + cache_dir.string());
  std::vector<fs::path> files;
  for (const auto& e : fs::directory_iterator(cache_dir))
    if (e.path().extension() == ".btrc") files.push_back(e.path());
  std::sort(files.begin(), files.end());
  if (files.empty()) throw IoError("no .btrc files in " + cache_dir.string());
  std::vector<CaseRecord> cases;
  for (const auto& f : files) cases.push_back(load_case(f));

  cfg.train.out_dir = out_dir;
  fs::create_directories(out_dir);
  {
    std::ofstream resolved(out_dir / "config.txt");
    resolved << describe(cfg);
  }
  BiTrUnet<float> model(cfg.model, cfg.train.seed);
  const auto records = train_loop(model, cases, cfg.train);
  out << "cases\t" << cases.size() << "\niterations\t" << records.size() << '\n';
  if (!records.empty()) out << "final_loss\t" << records.back().total << '\n';
  out << "log\t" << (out_dir / "loss.tsv").string() << '\n';
  return 0;
}

struct PredictInput {
  CaseRecord record;
  NiftiHeader header;
};

PredictInput load_predict_input(const fs::path& input) {
  PredictInput in;
  if (fs::is_directory(input)) {
    in.record = load_case_directory(input);
    in.header = read_nifti(find_case_files(input).modalities[0]).header;
  } else {
    in.record = load_case(input);
    const auto& s = in.record.image.spacing;
    in.header = make_nifti(in.record.image.grid, {}, NiftiType::uint8, s).header;
  }
  return in;
}

int predict(const std::vector<fs::path>& model_paths, const fs::path& input, const fs::path& out_path, bool tta,
            const PostprocOptions& post, const fs::path& dump, std::ostream& out) {
  std::vector<BiTrUnet<float>> models;
  for (const auto& p : model_paths) models.push_back(load_checkpoint<float>(p));
  const auto in = load_predict_input(input);
  for (std::size_t i = 0; i < models.size(); ++i)
    if (models[i].config().in_channels != in.record.image.channels)
      throw ShapeError(model_paths[i].string() + " expects " + std::to_string(models[i].config().in_channels) +
                       " channels, the case has " + std::to_string(in.record.image.channels));
  std::vector<ProbabilityFn> fns;
  for (const auto& m : models) fns.push_back(probability_fn(m));
  PredictConfig cfg;
  cfg.tta = tta;
  cfg.postprocess = !post.disabled;
  cfg.postproc = post.resolve();
  const auto pred = predict_case(fns, in.record.image, cfg);
  if (out_path.has_parent_path()) fs::create_directories(out_path.parent_path());
  write_label(out_path, pred.mask, in.header);
  if (!dump.empty()) {
    ProbabilityMap mean = pred.probabilities[0];
    for (std::size_t i = 1; i < pred.probabilities.size(); ++i)
      for (std::size_t k = 0; k < mean.values.size(); ++k) mean.values[k] += pred.probabilities[i].values[k];
    for (auto& v : mean.values) v /= static_cast<double>(pred.probabilities.size());
    write_probability_map(dump, mean);
  }
  std::array<Index, 5> counts{};
  for (auto l : pred.mask.to_external()) ++counts[l];
  out << in.record.id << "\tlabel1=" << counts[1] << "\tlabel2=" << counts[2] << "\tlabel4=" << counts[4] << '\t'
      << out_path.string() << '\n';
  return 0;
}

int ensemble(const std::vector<fs::path>& prob_paths, const fs::path& like, const fs::path& out_path,
             const PostprocOptions& post, std::ostream& out) {
  std::vector<ProbabilityMap> probs;
  std::vector<SegmentationMask> masks;
  for (const auto& p : prob_paths) {
    probs.push_back(read_probability_map(p));
    if (probs.back().classes != kNumClasses)
      throw ShapeError(p.string() + " holds " + std::to_string(probs.back().classes) + " classes, expected 4");
    masks.push_back(argmax(probs.back()));
  }
  auto mask = majority_vote(masks, probs);
  if (!post.disabled) mask = volume_threshold_postprocess(mask, post.resolve());
  NiftiHeader header = like.empty() ? make_nifti(mask.grid, {}, NiftiType::uint8).header : read_nifti(like).header;
  if (!(header.grid() == mask.grid)) throw ShapeError("reference volume " + like.string() + " has a different grid");
  if (out_path.has_parent_path()) fs::create_directories(out_path.parent_path());
  write_label(out_path, mask, header);
  out << "models\t" << probs.size() << '\t' << out_path.string() << '\n';
  return 0;
}

/// Label volumes under a directory keyed by case id (file name without
/// extension and a trailing "_seg"); modality volumes are skipped.
std::map<std::string, fs::path> collect_labels(const fs::path& dir) {
  if (!fs::is_directory(dir)) throw IoError("directory not found: " + dir.string());
  std::map<std::string, fs::path> out;
  for (const auto& e : fs::recursive_directory_iterator(dir)) {
    if (!e.is_regular_file() || !is_nifti(e.path())) continue;
    auto stem = nifti_stem(e.path());
    bool modality = false;
    for (const char* m : kModalities) modality = modality || stem.ends_with(std::string("_") + m);
    if (modality) continue;
    if (stem.ends_with("_seg")) stem.resize(stem.size() - 4);
    if (!out.emplace(stem, e.path()).second)
      throw IoError("case '" + stem + "' appears twice under " + dir.string());
  }
  return out;
}

int evaluate(const fs::path& pred_dir, const fs::path& truth_dir, const fs::path& out_path,
             const std::string& pooling, double sentinel, std::ostream& out) {
  const auto preds = collect_labels(pred_dir), truths = collect_labels(truth_dir);
  if (preds.empty()) throw IoError("no label volumes under " + pred_dir.string());
  HdConfig hd;
  hd.empty_sentinel = sentinel;
  hd.pooling = pooling == "pooled" ? HdPooling::pooled : HdPooling::max_directed;
  std::vector<CaseMetrics> cases;
  for (const auto& [id, path] : preds) {
    const auto it = truths.find(id);
    if (it == truths.end()) throw IoError("no ground truth for case '" + id + "' under " + truth_dir.string());
    const auto truth_nii = read_nifti(it->second);
    cases.push_back(evaluate_case(id, read_label(path), read_label(it->second), truth_nii.header.spacing(), hd));
  }
  if (out_path.empty()) {
    write_report(out, cases);
  } else {
    if (out_path.has_parent_path()) fs::create_directories(out_path.parent_path());
    std::ofstream f(out_path, std::ios::trunc);
    if (!f) throw IoError("cannot open '" + out_path.string() + "' for writing");
    write_report(f, cases);
    if (!f) throw IoError("write to '" + out_path.string() + "' failed");
    out << "cases\t" << cases.size() << '\t' << out_path.string() << '\n';
  }
  return 0;
}

int gradcheck(int instances, int samples, std::uint64_t seed, std::ostream& out) {
  GradcheckOptions ops;
  ops.instances = instances;
  ops.seed = seed;
  ModelGradcheckOptions model;
  model.samples = samples;
  model.seed = seed + 1;
  auto results = run_op_gradchecks(ops);
  results.push_back(run_model_gradcheck(model));
  bool ok = true;
  double worst_ops = 0;
  out << std::left << std::setw(30) << "check" << "instances\tmax_rel_error\ttolerance\tstatus\n";
  for (const auto& r : results) {
    out << std::setw(30) << r.name << r.instances << '\t' << std::scientific << std::setprecision(3) << r.max_error
        << '\t' << r.tolerance << '\t' << (r.passed() ? "ok" : "FAIL") << std::defaultfloat << '\n';
    ok = ok && r.passed();
    if (r.name != "full_model") worst_ops = std::max(worst_ops, r.max_error);
  }
  out << std::scientific << std::setprecision(3) << "max relative error (ops): " << worst_ops
      << "\nmax relative error (model): " << results.back().max_error << std::defaultfloat << '\n';
  if (!results.back().detail.empty()) out << "worst model element: " << results.back().detail << '\n';
  if (!ok) throw CheckFailed("gradient check failed");
  return 0;
}

int selftest(std::uint64_t seed, std::ostream& out) {
  bool ok = true;
  for (const auto& c : run_oracle_checks(seed)) {
    out << c.name << '\t' << c.instances << " instances\t" << c.mismatches << " mismatches\t"
        << (c.passed() ? "ok" : "FAIL");
    if (!c.detail.empty()) out << '\t' << c.detail;
    out << '\n';
    ok = ok && c.passed();
  }
  if (!ok) throw CheckFailed("oracle self-test failed");
  return 0;
}

}  // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"3D CNN-transformer brain tumor segmentation", "bitrunet"};
  app.require_subcommand(1);

  fs::path input, out_dir, out_path, cache_dir, config_path, dump, like, pred_dir, truth_dir;
  std::vector<std::string> settings;
  std::vector<fs::path> models, probs;
  bool tta = false;
  PostprocOptions post;
  std::string pooling = "pooled";
  double sentinel = HdConfig{}.empty_sentinel;
  int instances = 20, samples = 200;
  std::uint64_t seed = 2024;

  auto* pre = app.add_subcommand("preprocess", "Stack and normalize NIfTI modalities into case caches");
  pre->add_option("--input", input, "Case directory, or a directory of case directories")->required();
  pre->add_option("--out", out_dir, "Output directory for .btrc files")->required();

  auto* tr = app.add_subcommand("train", "Train a model on cached cases");
  tr->add_option("--cache", cache_dir, "Directory of .btrc files")->required();
  tr->add_option("--config", config_path, "key=value configuration file")->check(CLI::ExistingFile);
  tr->add_option("--set", settings, "Override one configuration key (key=value); repeatable");
  tr->add_option("--out", out_dir, "Output directory for checkpoints and loss.tsv")->required();

  auto* pr = app.add_subcommand("predict", "Segment one case with one or more checkpoints");
  pr->add_option("--models", models, "Checkpoint files (.btru)")->required()->check(CLI::ExistingFile);
  pr->add_option("--input", input, "Case directory or .btrc cache file")->required()->check(CLI::ExistingPath);
  pr->add_option("--out", out_path, "Output label volume (.nii or .nii.gz)")->required();
  pr->add_flag("--tta", tta, "Average over the 8 axis-flip combinations");
  pr->add_option("--dump-probs", dump, "Write the mean class probabilities as raw float32 plus a .txt sidecar");
  post.add_to(*pr);

  auto* en = app.add_subcommand("ensemble", "Majority-vote several dumped probability maps");
  en->add_option("--probs", probs, "Probability dumps from predict --dump-probs")->required()->check(CLI::ExistingFile);
  en->add_option("--like", like, "Reference NIfTI whose header (spacing, orientation) is copied")
      ->check(CLI::ExistingFile);
  en->add_option("--out", out_path, "Output label volume")->required();
  post.add_to(*en);

  auto* ev = app.add_subcommand("evaluate", "Dice, HD95, sensitivity and specificity over WT, TC, ET");
  ev->add_option("--pred", pred_dir, "Directory of predicted label volumes")->required();
  ev->add_option("--truth", truth_dir, "Directory of ground-truth label volumes")->required();
  ev->add_option("--out", out_path, "Report file (tab-separated); stdout when omitted");
  ev->add_option("--hd-pooling", pooling, "pooled or max-directed")
      ->check(CLI::IsMember({"pooled", "max-directed"}))
      ->capture_default_str();
  ev->add_option("--empty-sentinel", sentinel, "HD95 when exactly one side is empty")->capture_default_str();

  auto* gc = app.add_subcommand("gradcheck", "Finite-difference check of every kernel and the full model");
  gc->add_option("--instances", instances, "Random instances per kernel")->check(CLI::PositiveNumber)->capture_default_str();
  gc->add_option("--samples", samples, "Sampled elements in the model check")->check(CLI::PositiveNumber)->capture_default_str();
  gc->add_option("--seed", seed)->capture_default_str();

  auto* st = app.add_subcommand("selftest", "Compare kernels against brute-force oracles");
  st->add_option("--seed", seed)->capture_default_str();

  try {
    std::vector<std::string> reversed(args.rbegin(), args.rend());
    app.parse(reversed);
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return 0;
  } catch (const CLI::Success&) {
    const auto subs = app.get_subcommands();
    out << (subs.empty() ? app.help() : subs[0]->help());
    return 0;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n\n" << app.help();
    return 1;
  }

  try {
    if (pre->parsed()) return preprocess(input, out_dir, out);
    if (tr->parsed()) return train(cache_dir, config_path, settings, out_dir, out);
    if (pr->parsed()) return predict(models, input, out_path, tta, post, dump, out);
    if (en->parsed()) return ensemble(probs, like, out_path, post, out);
    if (ev->parsed()) return evaluate(pred_dir, truth_dir, out_path, pooling, sentinel, out);
    if (gc->parsed()) return gradcheck(instances, samples, seed, out);
    if (st->parsed()) return selftest(seed, out);
  } catch (const ConfigError& e) {
    err << "error: " << e.what() << '\n';
    return 1;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return 2;
  }
  return 1;
}

}  // namespace bitr
