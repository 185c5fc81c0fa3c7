#include "clickseg/experiments.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <fstream>
#include <mutex>
#include <regex>
#include <set>
#include <sstream>
#include <thread>

#include <spdlog/spdlog.h>

#include "clickseg/digest.hpp"
#include "clickseg/report.hpp"

namespace clickseg {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr const char* kResultFormat = "clickseg.run/v1";

void reject_unknown(const json& j, std::initializer_list<const char*> known, const std::string& where) {
  if (!j.is_object()) throw ConfigError(where + " must be a mapping");
  for (const auto& [key, _] : j.items()) {
    if (std::none_of(known.begin(), known.end(), [&](const char* k) { return key == k; })) {
      throw ConfigError("unknown key '" + key + "' in " + where);
    }
  }
}

EvaluationProtocol parse_protocol(const json& j, EvaluationProtocol p) {
  reject_unknown(j, {"clicker", "budget", "seed", "subset"}, "evaluation");
  if (j.contains("clicker")) p.clicker = clicker_kind_from_string(j["clicker"].get<std::string>());
  p.budget = j.value("budget", p.budget);
  p.seed = j.value("seed", p.seed);
  p.subset = j.value("subset", p.subset);
  if (p.budget < 0) throw ConfigError("evaluation budget must be >= 0");
  if (p.subset != "val" && p.subset != "train" && p.subset != "all") {
    throw ConfigError("evaluation subset must be val, train or all");
  }
  return p;
}

json protocol_json(const EvaluationProtocol& p) {
  return {{"clicker", to_string(p.clicker)}, {"budget", p.budget}, {"seed", p.seed}, {"subset", p.subset}};
}

DatasetSpec parse_dataset(const json& j, const fs::path& base_dir) {
  reject_unknown(j, {"manifest", "synthetic", "digest", "split"}, "dataset");
  DatasetSpec d;
  if (j.contains("manifest") == j.contains("synthetic")) {
    throw ConfigError("dataset needs exactly one of 'manifest' or 'synthetic'");
  }
  if (j.contains("manifest")) {
    fs::path p = j["manifest"].get<std::string>();
    d.manifest = p.is_absolute() ? p : fs::weakly_canonical(base_dir / p);
  } else {
    const auto& s = j["synthetic"];
    reject_unknown(s, {"tiles", "size", "classes", "seed", "camouflage", "decoys", "noise"}, "dataset.synthetic");
    SyntheticParams sp;
    sp.tiles = s.value("tiles", sp.tiles);
    sp.size = s.value("size", sp.size);
    sp.classes = s.value("classes", sp.classes);
    sp.seed = s.value("seed", sp.seed);
    sp.style.camouflage_probability = s.value("camouflage", sp.style.camouflage_probability);
    sp.style.decoy_fraction = s.value("decoys", sp.style.decoy_fraction);
    sp.style.pixel_noise = s.value("noise", sp.style.pixel_noise);
    d.synthetic = sp;
  }
  if (j.contains("digest")) d.digest = j["digest"].get<std::string>();
  if (j.contains("split")) {
    reject_unknown(j["split"], {"ratio", "seed"}, "dataset.split");
    d.split_ratio = j["split"].value("ratio", d.split_ratio);
    d.split_seed = j["split"].value("seed", d.split_seed);
  }
  return d;
}

void check_cell_name(const std::string& name) {
  static const std::regex ok("[A-Za-z0-9_=,.+-]+");
  if (!std::regex_match(name, ok)) {
    throw ConfigError("cell name '" + name + "' may only use letters, digits and _ = , . + -");
  }
}

// Nested object for a dotted key: "encoding.mode" -> {"encoding": {"mode": v}}.
json nest(const std::string& dotted, const json& value) {
  json out = value;
  std::string rest = dotted;
  std::vector<std::string> parts;
  std::stringstream ss(dotted);
  for (std::string p; std::getline(ss, p, '.');) parts.push_back(p);
  for (auto it = parts.rbegin(); it != parts.rend(); ++it) out = json{{*it, out}};
  return out;
}

std::string scalar_text(const json& v) { return v.is_string() ? v.get<std::string>() : v.dump(); }

std::vector<CellSpec> expand_matrix(const json& m, const std::vector<std::uint64_t>& seeds) {
  if (!m.is_object() || m.empty()) throw ConfigError("matrix must be a non-empty mapping of key -> list");
  std::vector<std::pair<std::string, std::vector<json>>> axes;
  for (const auto& [key, values] : m.items()) {
    if (!values.is_array() || values.empty()) throw ConfigError("matrix axis '" + key + "' needs a non-empty list");
    axes.emplace_back(key, std::vector<json>(values.begin(), values.end()));
  }
  std::vector<CellSpec> cells(1);
  cells[0].seeds = seeds;
  for (const auto& [key, values] : axes) {
    const auto leaf = key.substr(key.find_last_of('.') + 1);
    std::vector<CellSpec> next;
    for (const auto& cell : cells) {
      for (const auto& v : values) {
        CellSpec c = cell;
        c.name += (c.name.empty() ? "" : ",") + leaf + "=" + scalar_text(v);
        if (key == "train_fraction") {
          c.train_fraction = v.get<double>();
        } else {
          c.overrides.merge_patch(nest(key, v));
        }
        next.push_back(std::move(c));
      }
    }
    cells = std::move(next);
  }
  return cells;
}

std::string read_text(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

// Leaves the file (and its mtime) alone when the content is unchanged.
void write_if_changed(const fs::path& p, const std::string& content) {
  if (fs::exists(p) && read_text(p) == content) return;
  fs::create_directories(p.parent_path());
  std::ofstream out(p, std::ios::binary);
  if (!out) throw LoadError("cannot write " + p.string());
  out << content;
}

void replace_if_changed(const fs::path& tmp, const fs::path& target) {
  if (fs::exists(target) && read_text(tmp) == read_text(target)) {
    fs::remove(tmp);
  } else {
    fs::rename(tmp, target);
  }
}

std::string csv_text(const std::vector<std::string>& header, const std::vector<std::vector<std::string>>& rows,
                     const fs::path& scratch) {
  write_csv(scratch, header, rows);
  auto text = read_text(scratch);
  fs::remove(scratch);
  return text;
}

struct MaterialisedData {
  Dataset dataset;
  std::string digest;
};

MaterialisedData materialise(const DatasetSpec& spec, const fs::path& out) {
  Dataset ds;
  if (spec.manifest) {
    ds = load_dataset(*spec.manifest);
  } else {
    const auto& p = *spec.synthetic;
    const json params{{"tiles", p.tiles},
                      {"size", p.size},
                      {"classes", p.classes},
                      {"seed", p.seed},
                      {"camouflage", p.style.camouflage_probability},
                      {"decoys", p.style.decoy_fraction},
                      {"noise", p.style.pixel_noise}};
    const auto dir = out / "dataset";
    const auto stamp = dir / "params.json";
    if (fs::exists(stamp) && json::parse(read_text(stamp)) == params && fs::exists(dir / "manifest.json")) {
      ds = load_dataset(dir / "manifest.json");
    } else {
      spdlog::info("generating synthetic dataset ({} tiles of {}x{}, {} classes)", p.tiles, p.size, p.size, p.classes);
      ds = generate_synthetic_dataset(p.tiles, p.size, p.classes, p.seed, p.style);
      write_dataset(ds, dir);
      write_if_changed(stamp, params.dump(2) + "\n");
    }
  }
  auto digest = dataset_digest(ds.tiles);
  if (spec.digest && *spec.digest != digest) {
    throw IntegrityError("dataset digest " + digest + " does not match the pinned " + *spec.digest);
  }
  return {std::move(ds), std::move(digest)};
}

struct RunContext {
  const ExperimentSuite& suite;
  const Dataset& dataset;
  const std::string& dataset_digest;
  std::vector<RasterTile> train_tiles;
  std::vector<RasterTile> val_tiles;
  fs::path out;
  std::mutex train_locks_mutex;
  std::map<std::string, std::unique_ptr<std::mutex>> train_locks;

  std::mutex& lock_for(const std::string& digest) {
    std::lock_guard g(train_locks_mutex);
    auto& m = train_locks[digest];
    if (!m) m = std::make_unique<std::mutex>();
    return *m;
  }
};

std::vector<RasterTile> subset_of(const RunContext& ctx, const std::string& which) {
  if (which == "train") return ctx.train_tiles;
  if (which == "val") return ctx.val_tiles;
  auto all = ctx.train_tiles;
  all.insert(all.end(), ctx.val_tiles.begin(), ctx.val_tiles.end());
  return all;
}

RunResult run_one(RunContext& ctx, const CellSpec& cell, std::uint64_t seed) {
  RunResult result;
  result.cell = cell.name;
  result.seed = seed;
  const auto job = ctx.suite.resolve(cell, seed);
  const auto& protocol = ctx.suite.protocol(cell);

  // The first round(f * n) tiles of the shuffled training split.
  const auto n = ctx.train_tiles.size();
  const auto keep = std::clamp<std::size_t>(static_cast<std::size_t>(std::lround(cell.train_fraction * n)), 1, n);
  std::vector<RasterTile> train_tiles(ctx.train_tiles.begin(), ctx.train_tiles.begin() + static_cast<long>(keep));
  ClassSchema schema = ctx.dataset.schema;
  compute_class_frequencies(train_tiles, schema);
  const auto spec = job.backbone(schema, train_tiles.front().image.channels());
  const auto train_digest = training_digest(job.train, spec, schema, train_tiles);

  const auto train_dir = ctx.out / "train" / train_digest.substr(0, 16);
  const auto ckpt_path = train_dir / "checkpoint.ckpt";
  const auto marker = train_dir / "done.json";
  double val_miou = 0.0;
  {
    std::lock_guard lock(ctx.lock_for(train_digest));
    json done = json::object();
    if (fs::exists(marker)) done = json::parse(read_text(marker));
    if (done.value("train_digest", "") == train_digest && fs::exists(ckpt_path)) {
      val_miou = done.at("val_miou").get<double>();
    } else {
      spdlog::info("[{} seed {}] training {} on {} tiles", cell.name, seed, to_string(spec.architecture), keep);
      auto model = Model::build(spec, job.train.seed);
      auto trained = train(std::move(model), schema, train_tiles, ctx.val_tiles, job.train,
                           [&](const EpochStats& s) {
                             spdlog::info("[{} seed {}] epoch {:3d}  lr {:.4g}  loss {:.4f}  val mIoU {:.4f}",
                                          cell.name, seed, s.epoch, s.lr, s.mean_loss, s.val_miou);
                           });
      fs::create_directories(train_dir);
      save_checkpoint(trained.checkpoint, ckpt_path);
      json report = trained.report;
      report["job"] = job;
      write_if_changed(train_dir / "train_report.json", report.dump(2) + "\n");
      val_miou = trained.report.epoch_val_miou.empty() ? std::nan("") : trained.report.epoch_val_miou.back();
      write_if_changed(marker, json{{"train_digest", train_digest}, {"val_miou", val_miou}}.dump(2) + "\n");
    }
  }

  const auto run_dir = ctx.out / "cells" / cell.name / ("seed_" + std::to_string(seed));
  const auto result_path = run_dir / "result.json";
  const auto eval_digest = sha256_hex(
      json{{"train", train_digest}, {"protocol", protocol_json(protocol)}, {"data", ctx.dataset_digest}}.dump());
  if (fs::exists(result_path)) {
    const auto cached = json::parse(read_text(result_path));
    if (cached.value("format", "") == kResultFormat && cached.value("digest", "") == eval_digest) {
      result.status = "cached";
      result.metrics = cached.at("metrics").get<std::map<std::string, double>>();
      for (const auto& v : cached.at("curve")) result.curve.push_back(v.is_null() ? std::nan("") : v.get<double>());
      return result;
    }
  }

  const auto checkpoint = load_checkpoint(ckpt_path, schema);
  const auto tiles = subset_of(ctx, protocol.subset);
  std::vector<RefinementTrajectory> trajectories;
  for (std::size_t i = 0; i < tiles.size(); ++i) {
    if (!tiles[i].ground_truth) continue;
    Rng rng(protocol.seed + i);
    trajectories.push_back(run_refinement_loop(checkpoint, tiles[i], protocol.clicker, protocol.budget, rng));
  }
  const auto summary = summarize(trajectories, schema.size(), protocol.budget);
  write_evaluation_bundle(run_dir / "eval", trajectories, summary, schema);
  result.status = "ok";
  result.metrics = run_metrics(summary, schema, val_miou);
  result.curve = summary.curve;
  json curve = json::array();
  for (double v : result.curve) curve.push_back(std::isnan(v) ? json(nullptr) : json(v));
  write_if_changed(result_path, json{{"format", kResultFormat},
                                     {"digest", eval_digest},
                                     {"train_digest", train_digest},
                                     {"cell", cell.name},
                                     {"seed", seed},
                                     {"protocol", protocol_json(protocol)},
                                     {"metrics", result.metrics},
                                     {"curve", curve}}
                                    .dump(2) + "\n");
  spdlog::info("[{} seed {}] baseline {:.4f}  gain {:+.4f}  improved {:.0f}%", cell.name, seed,
               result.metrics["baseline_miou"], result.metrics["mean_gain"],
               100.0 * result.metrics["improved_fraction"]);
  return result;
}

CellResult aggregate(const std::string& name, std::vector<RunResult> runs) {
  CellResult c;
  c.name = name;
  c.runs = std::move(runs);
  std::map<std::string, std::vector<double>> values;
  std::vector<std::vector<double>> curves;
  for (const auto& r : c.runs) {
    if (r.status == "failed") continue;
    for (const auto& [k, v] : r.metrics) values[k].push_back(v);
    curves.push_back(r.curve);
  }
  for (const auto& [k, vs] : values) {
    double sum = 0.0;
    for (double v : vs) sum += v;
    const double mean = sum / static_cast<double>(vs.size());
    double sq = 0.0;
    for (double v : vs) sq += (v - mean) * (v - mean);
    c.mean[k] = mean;
    c.stddev[k] = vs.size() > 1 ? std::sqrt(sq / static_cast<double>(vs.size() - 1)) : 0.0;
  }
  std::size_t len = 0;
  for (const auto& cv : curves) len = std::max(len, cv.size());
  for (std::size_t k = 0; k < len; ++k) {
    double s = 0.0;
    int cnt = 0;
    for (const auto& cv : curves) {
      if (k < cv.size() && !std::isnan(cv[k])) {
        s += cv[k];
        ++cnt;
      }
    }
    c.curve.push_back(cnt ? s / cnt : std::nan(""));
  }
  return c;
}

std::optional<double> as_number(const std::string& token) {
  try {
    std::size_t used = 0;
    const double v = std::stod(token, &used);
    if (used == token.size()) return v;
  } catch (const std::exception&) {
  }
  return std::nullopt;
}

// Cell names may contain dots, so the longest matching cell name wins.
double operand_value(const std::string& token, std::span<const CellResult> cells) {
  if (const auto v = as_number(token)) return *v;
  const CellResult* best = nullptr;
  for (const auto& c : cells) {
    if (token.size() > c.name.size() + 1 && token.compare(0, c.name.size(), c.name) == 0 &&
        token[c.name.size()] == '.' && (!best || c.name.size() > best->name.size())) {
      best = &c;
    }
  }
  if (!best) throw ConfigError("operand '" + token + "' is neither a number nor <cell>.<metric> of a known cell");
  if (!best->ok()) throw Error("cell '" + best->name + "' has failed runs");
  const auto metric = token.substr(best->name.size() + 1);
  const auto m = best->mean.find(metric);
  if (m == best->mean.end()) throw ConfigError("cell '" + best->name + "' has no metric '" + metric + "'");
  return m->second;
}

std::string write_report(const ExperimentSuite& suite, const SuiteReport& report, const std::string& data_digest,
                         const fs::path& dir) {
  fs::create_directories(dir);
  std::set<std::string> metric_names;
  for (const auto& c : report.cells) {
    for (const auto& r : c.runs) {
      for (const auto& [k, _] : r.metrics) metric_names.insert(k);
    }
  }

  std::vector<std::string> header{"cell", "runs_ok", "runs_failed"};
  for (const auto& m : metric_names) {
    header.push_back(m + "_mean");
    header.push_back(m + "_std");
  }
  std::vector<std::vector<std::string>> rows;
  for (const auto& c : report.cells) {
    const auto failed = std::count_if(c.runs.begin(), c.runs.end(), [](const RunResult& r) { return r.status == "failed"; });
    std::vector<std::string> row{c.name, std::to_string(c.runs.size() - static_cast<std::size_t>(failed)),
                                 std::to_string(failed)};
    for (const auto& m : metric_names) {
      row.push_back(c.mean.count(m) ? format_number(c.mean.at(m), 6) : "");
      row.push_back(c.stddev.count(m) ? format_number(c.stddev.at(m), 6) : "");
    }
    rows.push_back(std::move(row));
  }
  write_if_changed(dir / "cells.csv", csv_text(header, rows, dir / ".cells.tmp"));

  std::vector<std::string> run_header{"cell", "seed", "status", "error"};
  run_header.insert(run_header.end(), metric_names.begin(), metric_names.end());
  std::vector<std::vector<std::string>> run_rows;
  for (const auto& c : report.cells) {
    for (const auto& r : c.runs) {
      std::vector<std::string> row{c.name, std::to_string(r.seed), r.status == "failed" ? "failed" : "ok", r.error};
      for (const auto& m : metric_names) row.push_back(r.metrics.count(m) ? format_number(r.metrics.at(m), 6) : "");
      run_rows.push_back(std::move(row));
    }
  }
  write_if_changed(dir / "runs.csv", csv_text(run_header, run_rows, dir / ".runs.tmp"));

  std::vector<std::vector<std::string>> check_rows;
  for (const auto& k : report.checks) {
    check_rows.push_back({k.name, k.expression, format_number(k.lhs, 6), format_number(k.rhs, 6),
                          k.passed ? "pass" : "fail", k.detail});
  }
  write_if_changed(dir / "acceptance.csv", csv_text({"name", "check", "lhs", "rhs", "verdict", "detail"}, check_rows,
                                                    dir / ".acceptance.tmp"));

  static const std::vector<Rgb> palette{{31, 119, 180}, {255, 127, 14}, {44, 160, 44}, {214, 39, 40},
                                        {148, 103, 189}, {140, 86, 75}, {227, 119, 194}, {127, 127, 127},
                                        {188, 189, 34},  {23, 190, 207}};
  std::vector<Series> series;
  for (std::size_t i = 0; i < report.cells.size(); ++i) {
    series.push_back({report.cells[i].name, report.cells[i].curve, palette[i % palette.size()]});
  }
  if (!series.empty()) {
    const auto tmp = dir / ".curves.tmp.png";
    plot_series_png(tmp, suite.name + ": mean IoU vs. clicks", "clicks", "mean IoU", series);
    replace_if_changed(tmp, dir / "curves.png");
  }

  std::ostringstream md;
  md << "# " << suite.name << "\n\n";
  md << "Dataset digest `" << data_digest << "`";
  if (suite.dataset.digest) md << " (pinned)";
  md << ".\n\n";
  md << "| cell | runs | zero-click val mIoU | baseline mIoU | final mIoU | gain | improved tiles | px/click |\n";
  md << "|---|---|---|---|---|---|---|---|\n";
  auto cellv = [](const CellResult& c, const std::string& m, int digits) {
    if (!c.mean.count(m)) return std::string("n/a");
    auto s = format_number(c.mean.at(m), digits);
    if (c.runs.size() > 1 && c.stddev.count(m)) s += " ± " + format_number(c.stddev.at(m), digits);
    return s;
  };
  for (const auto& c : report.cells) {
    md << "| " << c.name << " | " << c.runs.size() << " | " << cellv(c, "val_miou", 4) << " | "
       << cellv(c, "baseline_miou", 4) << " | " << cellv(c, "final_miou", 4) << " | " << cellv(c, "mean_gain", 4)
       << " | " << cellv(c, "improved_fraction", 3) << " | " << cellv(c, "corrected_per_click", 2) << " |\n";
  }
  if (report.cells.empty()) md << "\nNo cells.\n";
  if (!report.checks.empty()) {
    md << "\n## Acceptance\n\n| check | lhs | rhs | verdict |\n|---|---|---|---|\n";
    for (const auto& k : report.checks) {
      md << "| " << k.name << ": `" << k.expression << "` | " << format_number(k.lhs, 4) << " | "
         << format_number(k.rhs, 4) << " | " << (k.passed ? "PASS" : "FAIL") << (k.detail.empty() ? "" : " (" + k.detail + ")")
         << " |\n";
    }
  }
  bool any_failed = false;
  for (const auto& c : report.cells) {
    for (const auto& r : c.runs) {
      if (r.status != "failed") continue;
      if (!any_failed) md << "\n## Failed runs\n\n";
      any_failed = true;
      md << "- " << c.name << " seed " << r.seed << ": " << r.error << "\n";
    }
  }
  md << "\nCurves: `curves.png`. Tables: `cells.csv`, `runs.csv`, `acceptance.csv`.\n";
  write_if_changed(dir / "summary.md", md.str());

  json j{{"suite", suite.name}, {"dataset_digest", data_digest}, {"passed", report.all_passed()}};
  j["cells"] = json::array();
  for (const auto& c : report.cells) j["cells"].push_back({{"name", c.name}, {"mean", c.mean}, {"std", c.stddev}});
  j["checks"] = json::array();
  for (const auto& k : report.checks) {
    j["checks"].push_back({{"name", k.name}, {"check", k.expression}, {"lhs", k.lhs}, {"rhs", k.rhs},
                           {"passed", k.passed}, {"detail", k.detail}});
  }
  write_if_changed(dir / "report.json", j.dump(2) + "\n");
  return md.str();
}

}  // namespace

bool CellResult::ok() const {
  return !runs.empty() && std::none_of(runs.begin(), runs.end(), [](const RunResult& r) { return r.status == "failed"; });
}

bool SuiteReport::all_passed() const {
  return std::all_of(checks.begin(), checks.end(), [](const CheckResult& c) { return c.passed; });
}

ExperimentSuite ExperimentSuite::from_json(const json& doc, const fs::path& base_dir) {
  reject_unknown(doc, {"name", "output", "workers", "dataset", "base", "evaluation", "seeds", "cells", "matrix",
                       "acceptance"},
                 "suite");
  ExperimentSuite s;
  s.name = doc.value("name", std::string());
  if (s.name.empty()) throw ConfigError("suite needs a name");
  s.output = doc.value("output", "runs/" + s.name);
  s.workers = doc.value("workers", 1);
  if (s.workers < 1) throw ConfigError("workers must be >= 1");
  if (!doc.contains("dataset")) throw ConfigError("suite needs a dataset");
  s.dataset = parse_dataset(doc["dataset"], base_dir);
  if (doc.contains("base")) {
    s.base = doc["base"];
    if (!s.base.is_object()) throw ConfigError("base must be a mapping");
    if (s.base.contains("split")) throw ConfigError("put the split under dataset, not base");
  }
  if (doc.contains("evaluation")) s.evaluation = parse_protocol(doc["evaluation"], {});
  const auto seeds = doc.value("seeds", std::vector<std::uint64_t>{0});

  if (doc.contains("cells")) {
    for (const auto& c : doc["cells"]) {
      reject_unknown(c, {"name", "overrides", "seeds", "train_fraction", "evaluation"}, "cell");
      CellSpec cell;
      cell.name = c.at("name").get<std::string>();
      if (c.contains("overrides")) cell.overrides = c["overrides"];
      cell.seeds = c.value("seeds", seeds);
      cell.train_fraction = c.value("train_fraction", 1.0);
      if (c.contains("evaluation")) cell.evaluation = parse_protocol(c["evaluation"], s.evaluation);
      s.cells.push_back(std::move(cell));
    }
  }
  if (doc.contains("matrix")) {
    for (auto& c : expand_matrix(doc["matrix"], seeds)) s.cells.push_back(std::move(c));
  }
  std::set<std::string> names;
  for (const auto& c : s.cells) {
    check_cell_name(c.name);
    if (!names.insert(c.name).second) throw ConfigError("duplicate cell name '" + c.name + "'");
    if (c.seeds.empty()) throw ConfigError("cell '" + c.name + "' has no seeds");
    if (!(c.train_fraction > 0.0 && c.train_fraction <= 1.0)) {
      throw ConfigError("cell '" + c.name + "' train_fraction must lie in (0, 1]");
    }
    try {
      (void)s.resolve(c, c.seeds.front());
    } catch (const ConfigError& e) {
      throw ConfigError("cell '" + c.name + "': " + e.what());
    }
  }

  if (doc.contains("acceptance")) {
    for (const auto& a : doc["acceptance"]) {
      reject_unknown(a, {"name", "check", "tolerance"}, "acceptance entry");
      AcceptanceCheck check{a.at("name").get<std::string>(), a.at("check").get<std::string>(),
                            a.value("tolerance", 0.0)};
      s.acceptance.push_back(std::move(check));
    }
  }
  return s;
}

ExperimentSuite ExperimentSuite::load(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw LoadError("suite file not found: " + path.string());
  std::stringstream text;
  text << in.rdbuf();
  const auto doc = yaml_to_json(text.str());
  try {
    return from_json(doc, fs::absolute(path).parent_path());
  } catch (const json::exception& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
}

TrainJob ExperimentSuite::resolve(const CellSpec& cell, std::uint64_t seed) const {
  json doc = base;
  doc.merge_patch(cell.overrides);
  doc["seed"] = seed;
  doc["split"] = {{"ratio", dataset.split_ratio}, {"seed", dataset.split_seed}};
  TrainJob job;
  try {
    job = doc.get<TrainJob>();
  } catch (const json::exception& e) {
    throw ConfigError(e.what());
  }
  job.train.validate();
  return job;
}

std::map<std::string, double> run_metrics(const EvaluationSummary& summary, const ClassSchema& schema,
                                          double val_miou) {
  std::map<std::string, double> m{{"baseline_miou", summary.baseline_miou},
                                  {"final_miou", summary.final_miou},
                                  {"mean_gain", summary.mean_gain},
                                  {"improved_fraction", summary.improved_fraction},
                                  {"corrected_per_click", summary.corrected_per_click},
                                  {"val_miou", val_miou}};
  for (int k = 0; k < schema.size() && k < static_cast<int>(summary.class_gain.size()); ++k) {
    m["class_gain." + schema[k].name] = summary.class_gain[static_cast<std::size_t>(k)];
  }
  return m;
}

std::vector<CheckResult> evaluate_checks(std::span<const AcceptanceCheck> checks, std::span<const CellResult> cells) {
  std::vector<CheckResult> out;
  for (const auto& check : checks) {
    CheckResult r;
    r.name = check.name;
    r.expression = check.expression;
    r.lhs = r.rhs = std::nan("");
    try {
      std::istringstream in(check.expression);
      std::string a, op, b, extra;
      if (!(in >> a >> op >> b) || (in >> extra)) throw ConfigError("expected '<lhs> <op> <rhs>'");
      r.lhs = operand_value(a, cells);
      r.rhs = operand_value(b, cells);
      const double l = r.lhs;
      const double t = check.tolerance;
      if (op == ">=") {
        r.passed = l + t >= r.rhs;
      } else if (op == ">") {
        r.passed = l + t > r.rhs;
      } else if (op == "<=") {
        r.passed = l - t <= r.rhs;
      } else if (op == "<") {
        r.passed = l - t < r.rhs;
      } else {
        throw ConfigError("unknown comparison '" + op + "'");
      }
      if (std::isnan(r.lhs) || std::isnan(r.rhs)) {
        r.passed = false;
        r.detail = "undefined value";
      }
    } catch (const Error& e) {
      r.passed = false;
      r.detail = e.what();
    }
    out.push_back(std::move(r));
  }
  return out;
}

SuiteReport run_suite(const ExperimentSuite& suite, const SuiteOptions& options) {
  const fs::path out = options.output ? *options.output : suite.output;
  const int workers = options.workers ? *options.workers : suite.workers;
  fs::create_directories(out);
  SuiteReport report;
  report.name = suite.name;

  const auto data = materialise(suite.dataset, out);
  auto tiles = data.dataset.tiles;
  if (suite.cells.empty()) {
    write_report(suite, report, data.digest, out / "report");
    return report;
  }
  auto [train_tiles, val_tiles] = split_train_val(std::move(tiles), suite.dataset.split_ratio, suite.dataset.split_seed);
  RunContext ctx{suite, data.dataset, data.digest, std::move(train_tiles), std::move(val_tiles), out, {}, {}};

  std::vector<std::pair<std::size_t, std::uint64_t>> jobs;
  for (std::size_t c = 0; c < suite.cells.size(); ++c) {
    for (auto seed : suite.cells[c].seeds) jobs.emplace_back(c, seed);
  }
  std::vector<RunResult> results(jobs.size());
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t i = next++; i < jobs.size(); i = next++) {
      const auto& cell = suite.cells[jobs[i].first];
      try {
        results[i] = run_one(ctx, cell, jobs[i].second);
      } catch (const std::exception& e) {
        spdlog::error("[{} seed {}] failed: {}", cell.name, jobs[i].second, e.what());
        results[i].cell = cell.name;
        results[i].seed = jobs[i].second;
        results[i].status = "failed";
        results[i].error = e.what();
      }
    }
  };
  std::vector<std::thread> pool;
  for (int w = 1; w < std::min<int>(workers, static_cast<int>(jobs.size())); ++w) pool.emplace_back(worker);
  worker();
  for (auto& t : pool) t.join();

  for (std::size_t c = 0; c < suite.cells.size(); ++c) {
    std::vector<RunResult> runs;
    for (std::size_t i = 0; i < jobs.size(); ++i) {
      if (jobs[i].first == c) runs.push_back(results[i]);
    }
    report.cells.push_back(aggregate(suite.cells[c].name, std::move(runs)));
  }
  report.checks = evaluate_checks(suite.acceptance, report.cells);
  write_report(suite, report, data.digest, out / "report");
  return report;
}

}  // namespace clickseg
