// cfx: conformal sufficient-explanation pipeline.
//
//   cfx simulate --write-dataset 200 --out data       synthetic witness dataset
//   cfx --config data/config.json segment --out run
//   cfx --config data/config.json scores --kind superpixel --out run
//   cfx --config data/config.json calibrate --kind superpixel -e 0.05 --out run
//   cfx --config data/config.json explain --kind superpixel -e 0.05 --out run
//   cfx --config data/config.json evaluate --kind superpixel -e 0.05 --out run
//   cfx --config data/config.json evaluate --sweep --out run
//   cfx simulate --out run                              coverage table
//   cfx render --image x.cfxt --mask m.cfxt --png fig.png
//   cfx render --sweep-csv run/sweep.csv --png chart.png
//
// Output layout under --out:
//   segments/<slic digest>/<id>.cfxt   scores/<kind>.jsonl (+ .meta.json)
//   calibration/<kind>_eps<e>.json     masks/<kind>_eps<e>.jsonl, masks/<kind>_eps<e>/<id>.cfxt
//   report.csv  sweep.csv  coverage.csv
//
// Exit codes: 0 ok, 1 usage/config, 2 predictor transport, 3 data integrity.

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "cfx/conformal.hpp"
#include "cfx/dataset.hpp"
#include "cfx/evaluation.hpp"
#include "cfx/render.hpp"
#include "cfx/subprocess_predictor.hpp"

namespace fs = std::filesystem;

namespace {

// JSON config files: top-level keys are global option names (without the
// leading dashes); nested objects address subcommand options.
class JsonConfig : public CLI::Config {
 public:
  std::string to_config(const CLI::App*, bool, bool, std::string) const override { return {}; }

  std::vector<CLI::ConfigItem> from_config(std::istream& in) const override {
    nlohmann::json doc;
    try {
      in >> doc;
    } catch (const nlohmann::json::exception& e) {
      throw CLI::ConfigError(std::string("config is not valid JSON: ") + e.what());
    }
    if (!doc.is_object()) throw CLI::ConfigError("config must be a JSON object");
    std::vector<CLI::ConfigItem> items;
    collect(doc, {}, items);
    return items;
  }

 private:
  static std::string scalar(const nlohmann::json& v) {
    if (v.is_string()) return v.get<std::string>();
    if (v.is_boolean()) return v.get<bool>() ? "true" : "false";
    return v.dump();
  }

  static void collect(const nlohmann::json& obj, const std::vector<std::string>& parents,
                      std::vector<CLI::ConfigItem>& out) {
    for (const auto& [key, value] : obj.items()) {
      if (value.is_object()) {
        auto p = parents;
        p.push_back(key);
        collect(value, p, out);
        continue;
      }
      CLI::ConfigItem item;
      item.parents = parents;
      item.name = key;
      if (value.is_array()) {
        for (const auto& v : value) item.inputs.push_back(scalar(v));
      } else {
        item.inputs.push_back(scalar(value));
      }
      out.push_back(std::move(item));
    }
  }
};

struct Options {
  std::string manifest;
  std::string predictor;
  std::vector<std::string> kinds{"pixelwise"};
  double rho = 0.5;
  std::vector<double> epsilons{0.05};
  std::size_t tau_quantiles = 100;
  bool tau_linspace = false;
  bool tau_all_distinct = false;
  std::size_t slic_k = 100;
  double slic_compactness = 10.0;
  std::uint64_t seed = 1;
  double cal_fraction = 0.5;
  std::size_t jobs = cfx::default_jobs();
  std::string out = "cfx_out";

  bool kinds_given = false;
  bool epsilons_given = false;
  bool slic_k_given = false;

  cfx::SlicParams slic() const {
    cfx::SlicParams p;
    p.target_segments = slic_k;
    p.compactness = slic_compactness;
    return p;
  }

  cfx::TauGridMode tau() const {
    if (tau_all_distinct) return cfx::TauGridMode::all_distinct();
    if (tau_linspace) return cfx::TauGridMode::linspace(tau_quantiles);
    return cfx::TauGridMode::quantiles(tau_quantiles);
  }

  std::vector<cfx::ConformityKind> conformity_kinds() const {
    std::vector<cfx::ConformityKind> out;
    for (const auto& k : kinds) out.push_back(cfx::ConformityKind::parse(k, rho));
    return out;
  }

  fs::path out_dir() const { return fs::path(out); }
};

std::string slic_digest(const cfx::SlicParams& p) {
  char buf[160];
  std::snprintf(buf, sizeof buf, "slic;k=%zu;m=%.17g;iters=%zu;min=%.17g;perturb=%d",
                p.target_segments, p.compactness, p.max_iters, p.min_size_factor,
                p.perturb_seeds ? 1 : 0);
  return cfx::digest_hex(buf);
}

std::string kind_tag(const cfx::ConformityKind& k) {
  if (!k.uses_segmentation()) return k.name();
  char buf[64];
  std::snprintf(buf, sizeof buf, "%s_rho%g", k.name().c_str(), k.rho);
  return buf;
}

std::string eps_tag(double eps) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "eps%g", eps);
  return buf;
}

std::string file_safe(const std::string& id) {
  std::string s = id;
  for (auto& c : s) {
    const bool ok = std::isalnum(static_cast<unsigned char>(c)) || c == '.' || c == '_' || c == '-';
    if (!ok) c = '_';
  }
  return s;
}

void ensure_dir(const fs::path& p) {
  std::error_code ec;
  fs::create_directories(p, ec);
  if (ec) throw cfx::DataError("cannot create directory " + p.string() + ": " + ec.message());
}

void write_text(const fs::path& p, const std::string& text) {
  ensure_dir(p.parent_path().empty() ? fs::path(".") : p.parent_path());
  std::ofstream out(p, std::ios::trunc | std::ios::binary);
  if (!out) throw cfx::DataError("cannot write " + p.string());
  out << text;
}

cfx::PredictorPtr make_predictor(const std::string& spec) {
  if (spec.empty()) throw cfx::UsageError("no predictor given (--predictor synthetic:<spec>|subprocess:<cmd>)");
  if (spec.rfind("synthetic:", 0) == 0) {
    const std::string arg = spec.substr(10);
    if (!arg.empty() && arg.front() == '{') {
      try {
        return cfx::make_synthetic_predictor(nlohmann::json::parse(arg));
      } catch (const nlohmann::json::parse_error& e) {
        throw cfx::UsageError(std::string("synthetic predictor spec: ") + e.what());
      }
    }
    std::ifstream in(arg);
    if (!in) throw cfx::UsageError("cannot open predictor spec " + arg);
    try {
      return cfx::make_synthetic_predictor(nlohmann::json::parse(in), fs::path(arg).parent_path());
    } catch (const nlohmann::json::parse_error& e) {
      throw cfx::UsageError(arg + ": " + e.what());
    }
  }
  if (spec.rfind("subprocess:", 0) == 0) {
    return std::make_shared<cfx::SubprocessPredictor>(
        cfx::SubprocessPredictor::split_command(spec.substr(11)));
  }
  throw cfx::UsageError("predictor must be synthetic:<spec> or subprocess:<cmd>");
}

// --- dataset access -----------------------------------------------------------

struct Dataset {
  fs::path manifest_path;
  cfx::DatasetManifest manifest;
  cfx::DataSplit split;
  std::string digest;
  cfx::Baseline baseline;
};

Dataset open_dataset(const Options& o) {
  if (o.manifest.empty()) throw cfx::UsageError("no manifest given (--manifest)");
  Dataset d;
  d.manifest_path = o.manifest;
  d.manifest = cfx::load_manifest(d.manifest_path);
  if (d.manifest.items.empty()) throw cfx::UsageError("no instances in " + o.manifest);
  d.split = cfx::seeded_split(d.manifest.items.size(), o.cal_fraction, o.seed);
  d.digest = cfx::manifest_digest(d.manifest_path, o.seed, o.cal_fraction);
  d.baseline = cfx::load_baseline(d.manifest);
  return d;
}

fs::path segment_dir(const Options& o) { return o.out_dir() / "segments" / slic_digest(o.slic()); }

// Segmentations written by `cfx segment` take precedence over paths in the
// manifest; the returned digest names whichever source was used.
std::string attach_segmentations(std::vector<cfx::Instance>& inst, const Options& o) {
  const auto dir = segment_dir(o);
  bool computed = false, from_manifest = false;
  for (std::size_t i = 0; i < inst.size(); ++i) {
    const auto p = dir / (file_safe(inst[i].instance_id) + ".cfxt");
    if (fs::exists(p)) {
      inst[i].segmentation = cfx::read_segmentation(p);
      computed = true;
    } else if (inst[i].segmentation) {
      from_manifest = true;
    } else {
      throw cfx::UsageError("no segmentation for instance '" + inst[i].instance_id +
                            "'; run `cfx segment` with the same SLIC flags first");
    }
    if (inst[i].segmentation->extent() != inst[i].image.extent()) {
      throw cfx::DataError("segmentation for '" + inst[i].instance_id + "' has the wrong size");
    }
  }
  if (computed && from_manifest) {
    throw cfx::UsageError("segmentations come partly from `cfx segment` and partly from the manifest");
  }
  return computed ? slic_digest(o.slic()) : "manifest";
}

std::vector<cfx::Instance> load_split(const Dataset& d, const std::vector<std::size_t>& idx) {
  std::vector<cfx::Instance> out;
  out.reserve(idx.size());
  for (std::size_t i : idx) out.push_back(cfx::load_instance(d.manifest.items[i]));
  return out;
}

cfx::ScoringOptions scoring(const Options& o, const Dataset& d) {
  cfx::ScoringOptions opt;
  opt.grid = o.tau();
  opt.baseline = d.baseline;
  return opt;
}

fs::path scores_path(const Options& o, const cfx::ConformityKind& k) {
  return o.out_dir() / "scores" / (kind_tag(k) + ".jsonl");
}
fs::path artifact_path(const Options& o, const cfx::ConformityKind& k, double eps) {
  return o.out_dir() / "calibration" / (kind_tag(k) + "_" + eps_tag(eps) + ".json");
}
fs::path masks_stem(const Options& o, const cfx::ConformityKind& k, double eps) {
  return o.out_dir() / "masks" / (kind_tag(k) + "_" + eps_tag(eps));
}

// --- subcommands --------------------------------------------------------------

int cmd_segment(const Options& o) {
  const auto d = open_dataset(o);
  const auto params = o.slic();
  const auto digest = slic_digest(params);
  const auto dir = segment_dir(o);
  ensure_dir(dir);
  write_text(dir / "params.json",
             nlohmann::ordered_json{{"slic_digest", digest},
                                    {"target_segments", params.target_segments},
                                    {"compactness", params.compactness},
                                    {"max_iters", params.max_iters},
                                    {"min_size_factor", params.min_size_factor},
                                    {"perturb_seeds", params.perturb_seeds}}
                     .dump(2) + "\n");
  const auto& items = d.manifest.items;
  std::vector<char> wrote(items.size(), 0);
  cfx::parallel_for(items.size(), o.jobs, [&](std::size_t i) {
    const auto p = dir / (file_safe(items[i].instance_id) + ".cfxt");
    if (fs::exists(p) && fs::exists(cfx::segmentation_sidecar(p))) return;
    const auto img = cfx::read_image(items[i].image_path);
    cfx::write_segmentation(cfx::slic_segment(img, params), p, digest);
    wrote[i] = 1;
  });
  const auto n = std::count(wrote.begin(), wrote.end(), 1);
  std::cout << "segment: " << n << " written, " << items.size() - std::size_t(n)
            << " up to date in " << dir.string() << '\n';
  return 0;
}

int cmd_scores(const Options& o) {
  const auto d = open_dataset(o);
  auto inst = load_split(d, d.split.calibration);
  const auto h = make_predictor(o.predictor);
  cfx::prepare_instances(inst, *h, nullptr);
  const auto opt = scoring(o, d);
  for (const auto& kind : o.conformity_kinds()) {
    std::string seg_digest;
    if (kind.uses_segmentation()) seg_digest = attach_segmentations(inst, o);
    const auto scores = cfx::score_all(inst, *h, kind, opt, o.jobs);
    const auto path = scores_path(o, kind);
    ensure_dir(path.parent_path());
    cfx::write_scores_jsonl(scores, path);
    auto meta = path;
    meta.replace_extension(".meta.json");
    write_text(meta, nlohmann::ordered_json{{"kind", kind.name()},
                                            {"rho", kind.rho},
                                            {"tau_mode", opt.grid.name()},
                                            {"q", opt.grid.levels},
                                            {"slic_digest", seg_digest},
                                            {"manifest_digest", d.digest},
                                            {"k", scores.size()}}
                         .dump(2) + "\n");
    const auto valid = std::count_if(scores.begin(), scores.end(), [](const auto& s) { return s.valid; });
    std::cout << "scores: " << kind_tag(kind) << " k=" << scores.size() << " valid=" << valid
              << " -> " << path.string() << '\n';
  }
  return 0;
}

int calibrate_file(const Options& o, const fs::path& path) {
  const auto scores = cfx::read_scores_jsonl(path);
  if (scores.empty()) throw cfx::UsageError(path.string() + ": no scores");
  const auto kind = scores.front().kind;
  for (const auto& s : scores) {
    if (!(s.kind == kind)) {
      throw cfx::UsageError(path.string() + ": mixed conformity kinds (" + kind_tag(kind) + ", " +
                            kind_tag(s.kind) + ")");
    }
  }
  nlohmann::json meta = nlohmann::json::object();
  auto meta_path = path;
  meta_path.replace_extension(".meta.json");
  if (std::ifstream in(meta_path); in) {
    try {
      meta = nlohmann::json::parse(in);
    } catch (const nlohmann::json::exception& e) {
      throw cfx::DataError(meta_path.string() + ": " + e.what());
    }
  }
  for (double eps : o.epsilons) {
    auto art = cfx::calibrate_threshold(scores, eps);
    art.tau_mode = cfx::TauGridMode::parse(meta.value("tau_mode", o.tau().name()),
                                           meta.value("q", o.tau_quantiles));
    art.slic_digest = meta.value("slic_digest", std::string{});
    art.manifest_digest = meta.value("manifest_digest", std::string{});
    const auto out = artifact_path(o, kind, eps);
    ensure_dir(out.parent_path());
    cfx::write_artifact(art, out);
    if (art.sentinel) {
      std::cerr << "warning: " << kind_tag(kind) << " at epsilon " << eps
                << ": threshold is the invalid-score sentinel; explanations will keep every pixel\n";
    }
    std::cout << "calibrate: " << kind_tag(kind) << " epsilon=" << eps << " k=" << art.k
              << " threshold=" << cfx::format_number(art.threshold) << " -> " << out.string() << '\n';
  }
  return 0;
}

int cmd_calibrate(const Options& o, const std::vector<std::string>& files) {
  if (!files.empty()) {
    for (const auto& f : files) calibrate_file(o, f);
    return 0;
  }
  for (const auto& kind : o.conformity_kinds()) calibrate_file(o, scores_path(o, kind));
  return 0;
}

int cmd_explain(const Options& o) {
  const auto d = open_dataset(o);
  auto inst = load_split(d, d.split.test);
  if (inst.empty()) throw cfx::UsageError("no instances in the test split");
  const auto h = make_predictor(o.predictor);
  cfx::prepare_instances(inst, *h, nullptr);
  for (const auto& kind : o.conformity_kinds()) {
    std::string seg_digest;
    if (kind.uses_segmentation()) seg_digest = attach_segmentations(inst, o);
    for (double eps : o.epsilons) {
      const auto art = cfx::read_artifact(artifact_path(o, kind, eps));
      cfx::check_artifact_matches(art, seg_digest, d.digest);
      const auto masks = cfx::explain_all(inst, art, *h, d.baseline, o.jobs);
      const auto stem = masks_stem(o, kind, eps);
      ensure_dir(stem);
      std::ostringstream jsonl;
      for (const auto& m : masks) {
        jsonl << cfx::mask_record(m).dump() << '\n';
        cfx::write_mask_tensor(m.keep, stem / (file_safe(m.instance_id) + ".cfxt"));
      }
      write_text(fs::path(stem.string() + ".jsonl"), jsonl.str());
      const auto r = cfx::evaluate(masks, art);
      std::cout << "explain: " << kind_tag(kind) << " epsilon=" << eps << " n=" << r.n_test
                << " size=" << cfx::format_mean_std(r.mean_size, r.std_size)
                << " fidelity=" << cfx::format_number(r.fidelity) << '\n';
    }
  }
  return 0;
}

int cmd_evaluate(const Options& o) {
  std::ostringstream csv;
  csv << cfx::kReportCsvHeader << '\n';
  for (const auto& kind : o.conformity_kinds()) {
    for (double eps : o.epsilons) {
      const auto art = cfx::read_artifact(artifact_path(o, kind, eps));
      const auto records = cfx::read_mask_records(fs::path(masks_stem(o, kind, eps).string() + ".jsonl"));
      const auto r = cfx::evaluate(records, art);
      csv << cfx::report_csv_row(r) << '\n';
      std::cout << "evaluate: " << kind_tag(kind) << " epsilon=" << eps << " n=" << r.n_test
                << " size=" << cfx::format_mean_std(r.mean_size, r.std_size)
                << " fidelity=" << cfx::format_number(r.fidelity) << '\n';
    }
  }
  write_text(o.out_dir() / "report.csv", csv.str());
  return 0;
}

// Scores, calibrates and explains in memory for every kind and epsilon.
int cmd_sweep(Options o) {
  if (!o.kinds_given) o.kinds = {"pixelwise", "superpixel", "scaled", "summed"};
  if (!o.epsilons_given) o.epsilons = {0.15, 0.10, 0.05, 0.01};
  const auto d = open_dataset(o);
  auto cal = load_split(d, d.split.calibration);
  auto test = load_split(d, d.split.test);
  if (test.empty()) throw cfx::UsageError("no instances in the test split");
  const auto h = make_predictor(o.predictor);
  const auto kinds = o.conformity_kinds();
  cfx::prepare_instances(cal, *h, nullptr);
  cfx::prepare_instances(test, *h, nullptr);
  if (std::any_of(kinds.begin(), kinds.end(), [](const auto& k) { return k.uses_segmentation(); })) {
    attach_segmentations(cal, o);
    attach_segmentations(test, o);
  }
  const auto table = cfx::confidence_sweep(cal, test, *h, kinds, o.epsilons, scoring(o, d), o.jobs);
  write_text(o.out_dir() / "sweep.csv", table.to_csv());
  for (const auto& r : table.rows) {
    std::cout << "sweep: " << kind_tag(r.kind) << " epsilon=" << r.epsilon
              << " size=" << cfx::format_mean_std(r.mean_size, r.std_size)
              << " fidelity=" << cfx::format_number(r.fidelity) << '\n';
  }
  std::cout << "wrote " << (o.out_dir() / "sweep.csv").string() << '\n';
  return 0;
}

struct SimulateArgs {
  std::size_t seeds = 20;
  std::size_t k_cal = 500;
  std::size_t n_test = 1000;
  std::optional<double> speckle_limit;
  bool shuffled = false;
  std::size_t write_dataset = 0;
};

// Writes N witness instances as CFXT tensors with a manifest, the matching
// predictor spec and a config file pointing at both.
int write_witness_dataset(const Options& o, const SimulateArgs& a) {
  cfx::WitnessGeneratorConfig gen;
  gen.speckle_limit = a.speckle_limit;
  gen.shuffled = a.shuffled;
  const auto inst = cfx::sample_witness_instances(gen, a.write_dataset, o.seed);
  const auto dir = o.out_dir();
  ensure_dir(dir / "tensors");
  cfx::DatasetManifest m;
  m.num_classes = 2;
  for (const auto& x : inst) {
    cfx::ManifestItem item;
    item.instance_id = x.instance_id;
    item.image_path = fs::absolute(dir / "tensors" / (x.instance_id + ".cfxt"));
    item.attribution_path = fs::absolute(dir / "tensors" / (x.instance_id + "_phi.cfxt"));
    cfx::write_tensor(x.image, item.image_path);
    cfx::write_tensor(x.attribution, item.attribution_path);
    m.items.push_back(std::move(item));
  }
  cfx::write_manifest(m, fs::absolute(dir / "manifest.json"));
  nlohmann::ordered_json spec{{"kind", "region_witness"},
                              {"height", gen.height},
                              {"width", gen.width},
                              {"theta", gen.theta},
                              {"region",
                               {{"rows", {gen.region_top, gen.region_top + gen.region_size}},
                                {"cols", {gen.region_left, gen.region_left + gen.region_size}}}}};
  if (gen.speckle_limit) spec["speckle_limit"] = *gen.speckle_limit;
  write_text(dir / "predictor.json", spec.dump(2) + "\n");
  const nlohmann::ordered_json config{
      {"manifest", fs::absolute(dir / "manifest.json").string()},
      {"predictor", "synthetic:" + fs::absolute(dir / "predictor.json").string()},
      {"slic-k", 16}};
  write_text(dir / "config.json", config.dump(2) + "\n");
  std::cout << "simulate: wrote " << inst.size() << " instances to " << dir.string() << '\n';
  return 0;
}

int cmd_simulate(const Options& o, const SimulateArgs& a) {
  if (a.write_dataset > 0) return write_witness_dataset(o, a);
  cfx::CoverageTrialConfig cfg;
  cfg.k_calibration = a.k_cal;
  cfg.n_test = a.n_test;
  cfg.generator.speckle_limit = a.speckle_limit;
  cfg.generator.shuffled = a.shuffled;
  cfg.seeds.clear();
  for (std::size_t i = 0; i < a.seeds; ++i) cfg.seeds.push_back(o.seed + i);
  if (o.epsilons_given) cfg.epsilons = o.epsilons;
  if (o.kinds_given) {
    cfg.kinds = o.conformity_kinds();
  } else {
    cfg.kinds = {cfx::ConformityKind::pixelwise(), cfx::ConformityKind::super_pixels(o.rho),
                 cfx::ConformityKind::scaled_values(o.rho), cfx::ConformityKind::summed_values()};
  }
  cfg.scoring.grid = o.tau();
  cfg.slic.target_segments = o.slic_k_given ? o.slic_k : 16;  // 16x16 generator images
  cfg.slic.compactness = o.slic_compactness;
  cfg.jobs = o.jobs;
  const auto t0 = std::chrono::steady_clock::now();
  const auto table = cfx::run_coverage_trial(cfg);
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  write_text(o.out_dir() / "coverage.csv", table.to_csv());
  std::printf("simulate: %zu cells, %.1f%% within eps + 3*sqrt(eps(1-eps)/n), %.1f s -> %s\n",
              table.cells.size(), 100.0 * table.pass_fraction(), secs,
              (o.out_dir() / "coverage.csv").string().c_str());
  return 0;
}

struct RenderArgs {
  std::string image;
  std::string mask;
  std::string sweep_csv;
  std::string png;
};

int cmd_render(const Options& o, const RenderArgs& a) {
  const fs::path png = a.png.empty() ? o.out_dir() / "figure.png" : fs::path(a.png);
  if (!png.parent_path().empty()) ensure_dir(png.parent_path());
  if (!a.sweep_csv.empty()) {
    const auto chart = cfx::render::sweep_chart(cfx::render::read_sweep_csv(a.sweep_csv));
    cfx::render::write_png(chart, png, {{"Title", "size and fidelity vs confidence"}});
    std::cout << "render: " << png.string() << '\n';
    return 0;
  }
  if (a.image.empty() || a.mask.empty()) {
    throw cfx::UsageError("render needs --image and --mask, or --sweep-csv");
  }
  const auto img = cfx::read_image(a.image);
  const auto keep = cfx::read_mask_tensor(a.mask);
  const auto caption = cfx::render::size_caption(keep.fraction());
  cfx::render::write_png(cfx::render::mask_overlay(img, keep, caption), png, {{"Caption", caption}});
  std::cout << caption << '\n' << "render: " << png.string() << '\n';
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"cfx: conformal sufficient explanations for image classifiers"};
  app.require_subcommand(1);
  app.fallthrough();
  app.config_formatter(std::make_shared<JsonConfig>());
  app.set_config("--config", "", "JSON config file; flags override its values");

  Options o;
  app.add_option("--manifest", o.manifest, "Dataset manifest (JSON)");
  app.add_option("--predictor", o.predictor, "synthetic:<json|path> or subprocess:<cmd>");
  auto* kind_opt = app.add_option("--kind", o.kinds, "pixelwise, superpixel, scaled, summed (repeatable)")
                       ->check(CLI::IsMember({"pixelwise", "superpixel", "scaled", "summed"}));
  app.add_option("--rho", o.rho, "Fraction of a super-pixel that must be selected")
      ->check(CLI::Range(0.0, 1.0));
  auto* eps_opt = app.add_option("-e,--epsilon", o.epsilons, "Error level(s) in (0,1) (repeatable)")
                      ->check(CLI::Range(0.0, 1.0));
  app.add_option("--tau-quantiles", o.tau_quantiles, "Number of tau grid levels")->check(CLI::PositiveNumber);
  app.add_flag("--tau-linspace", o.tau_linspace, "Evenly spaced tau grid instead of quantiles");
  app.add_flag("--tau-all-distinct", o.tau_all_distinct, "Every distinct attribution value as tau");
  auto* slic_k_opt = app.add_option("--slic-k", o.slic_k, "Target number of SLIC super-pixels")->check(CLI::PositiveNumber);
  app.add_option("--slic-compactness", o.slic_compactness, "SLIC compactness m")->check(CLI::PositiveNumber);
  app.add_option("--seed", o.seed, "Split / simulation seed");
  app.add_option("--cal-fraction", o.cal_fraction, "Calibration share of the manifest")
      ->check(CLI::Range(0.0, 1.0));
  app.add_option("--jobs", o.jobs, "Worker threads")->check(CLI::PositiveNumber);
  app.add_option("--out", o.out, "Output directory");

  auto* segment = app.add_subcommand("segment", "SLIC super-pixels for every manifest image");
  auto* scores = app.add_subcommand("scores", "Conformity scores on the calibration split");
  auto* calibrate = app.add_subcommand("calibrate", "Threshold per epsilon from a scores file");
  std::vector<std::string> score_files;
  calibrate->add_option("--scores", score_files, "Scores JSONL file(s) instead of <out>/scores")
      ->check(CLI::ExistingFile);
  auto* explain = app.add_subcommand("explain", "Explanation masks for the test split");
  auto* evaluate = app.add_subcommand("evaluate", "Size and fidelity report");
  bool sweep = false;
  evaluate->add_flag("--sweep", sweep, "Score, calibrate and explain in memory across kinds and epsilons");
  auto* simulate = app.add_subcommand("simulate", "Coverage trial on the synthetic witness generator");
  SimulateArgs sim;
  simulate->add_option("--seeds", sim.seeds, "Number of seeds, starting at --seed")->check(CLI::PositiveNumber);
  simulate->add_option("--k-cal", sim.k_cal, "Calibration instances per seed");
  simulate->add_option("--n-test", sim.n_test, "Test instances per seed");
  simulate->add_option("--speckle-limit", sim.speckle_limit, "Witness predictor speckle limit");
  simulate->add_flag("--shuffled", sim.shuffled, "Shuffled (uninformative) attributions");
  simulate->add_option("--write-dataset", sim.write_dataset,
                       "Write N witness instances, a predictor spec and a config to --out instead");
  auto* render = app.add_subcommand("render", "PNG figures");
  RenderArgs ra;
  render->add_option("--image", ra.image, "Image tensor")->check(CLI::ExistingFile);
  render->add_option("--mask", ra.mask, "Mask tensor written by explain")->check(CLI::ExistingFile);
  render->add_option("--sweep-csv", ra.sweep_csv, "Sweep CSV written by evaluate --sweep")
      ->check(CLI::ExistingFile);
  render->add_option("--png", ra.png, "Output PNG (default <out>/figure.png)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? 0 : 1;  // every parse failure is a usage error
  }
  o.kinds_given = kind_opt->count() > 0;
  o.epsilons_given = eps_opt->count() > 0;
  o.slic_k_given = slic_k_opt->count() > 0;

  try {
    for (double e : o.epsilons) {
      if (!(e > 0.0 && e < 1.0)) throw cfx::UsageError("epsilon must be in (0,1)");
    }
    if (!(o.cal_fraction > 0.0 && o.cal_fraction < 1.0)) {
      throw cfx::UsageError("calibration fraction must be in (0,1)");
    }
    if (segment->parsed()) return cmd_segment(o);
    if (scores->parsed()) return cmd_scores(o);
    if (calibrate->parsed()) return cmd_calibrate(o, score_files);
    if (explain->parsed()) return cmd_explain(o);
    if (evaluate->parsed()) return sweep ? cmd_sweep(o) : cmd_evaluate(o);
    if (simulate->parsed()) return cmd_simulate(o, sim);
    if (render->parsed()) return cmd_render(o, ra);
  } catch (const cfx::Error& e) {
    std::cerr << "cfx: " << e.what() << '\n';
    return static_cast<int>(e.code());
  } catch (const std::exception& e) {
    std::cerr << "cfx: " << e.what() << '\n';
    return 1;
  }
  return 1;
}
