// onh: command-line driver for the ONH pipeline.

#include "onh/cloud.hpp"
#include "onh/criticals.hpp"
#include "onh/csv.hpp"
#include "onh/parallel.hpp"
#include "onh/parameters.hpp"
#include "onh/phantom.hpp"
#include "onh/pointnet.hpp"
#include "onh/stats.hpp"
#include "onh/volume_io.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <chrono>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <set>
#include <sstream>

namespace fs = std::filesystem;
using nlohmann::json;
using namespace onh;

namespace {

[[noreturn]] void fail(const std::string& code, const std::string& msg) { throw Error("cli", code, msg); }

int exit_code(const Error& e) {
  static const std::set<std::string> usage_or_io = {
      "IO_FAILURE",       "FILE_NOT_FOUND",     "MALFORMED_HEADER", "SIZE_MISMATCH",      "LABEL_OUT_OF_RANGE",
      "BAD_CLOUD_FILE",   "BAD_MODEL_FILE",     "BAD_CONFIG",       "BAD_TRAIN_CONFIG",   "BAD_AUGMENT_CONFIG",
      "BAD_ARCHITECTURE", "USAGE",              "UNKNOWN_TASK",     "UNKNOWN_GROUP",      "BAD_PARAMS_FILE",
      "NO_INPUTS",        "BAD_REPORT",         "UNKNOWN_COHORT"};
  return usage_or_io.count(e.code()) ? 2 : 1;
}

void report_error(const std::string& module, const std::string& code, const std::string& message, int exit) {
  json j;
  j["error"] = {{"module", module}, {"code", module + "." + code}, {"message", message}, {"exit_code", exit}};
  std::cerr << j.dump() << '\n';
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) fail("IO_FAILURE", "cannot write '" + path.string() + "'");
  out << text;
  if (!out) fail("IO_FAILURE", "write failed for '" + path.string() + "'");
}

void make_dir(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec || !fs::is_directory(dir)) fail("IO_FAILURE", "cannot create directory '" + dir.string() + "'");
}

void require_exists(const fs::path& p) {
  if (!fs::exists(p)) fail("FILE_NOT_FOUND", "no such file or directory: '" + p.string() + "'");
}

json read_json(const fs::path& p) {
  require_exists(p);
  std::ifstream in(p);
  if (!in) fail("IO_FAILURE", "cannot open '" + p.string() + "'");
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    fail("BAD_CONFIG", "'" + p.string() + "' is not valid JSON: " + e.what());
  }
}

std::vector<fs::path> files_with(const fs::path& dir, const std::string& ext) {
  std::vector<fs::path> out;
  for (const auto& e : fs::directory_iterator(dir))
    if (e.is_regular_file() && e.path().extension() == ext) out.push_back(e.path());
  std::sort(out.begin(), out.end());
  return out;
}

std::string iso_now() {
  const std::time_t t = std::time(nullptr);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", std::gmtime(&t));
  return buf;
}

// ---------------------------------------------------------------- options

/// Options shared by every subcommand plus a key -> variable table so a JSON config
/// file can fill anything not given on the command line.
struct Command {
  CLI::App* app = nullptr;
  std::uint64_t seed = 0;
  std::string out;
  std::string config;
  unsigned threads = 1;
  json file;  // parsed --config
  std::vector<std::string> reserved;  // config keys handled by the subcommand itself

  struct Binding {
    std::string key;
    std::function<void(const json&)> from_file;
    std::function<json()> value;
  };
  std::vector<Binding> bindings;

  std::vector<std::string> required;  // string options that must end up non-empty

  template <class T>
  CLI::Option* bind(const std::string& key, T& var, const std::string& help, bool is_required = false) {
    CLI::Option* opt = app->add_option("--" + key, var, is_required ? help + " (required)" : help);
    if (is_required) required.push_back(key);
    bindings.push_back({key,
                        [opt, &var](const json& j) {
                          if (opt->count() == 0) var = j.get<T>();
                        },
                        [&var] { return json(var); }});
    return opt;
  }

  CLI::Option* flag(const std::string& key, bool& var, const std::string& help) {
    CLI::Option* opt = app->add_flag("--" + key, var, help);
    bindings.push_back({key,
                        [opt, &var](const json& j) {
                          if (opt->count() == 0) var = j.get<bool>();
                        },
                        [&var] { return json(var); }});
    return opt;
  }

  void add_common() {
    bind("seed", seed, "global random seed");
    bind("out", out, "output path");
    app->add_option("--config", config, "JSON file supplying option defaults");
    app->add_option("--threads", threads, "worker threads")->check(CLI::Range(1u, 1024u));
  }

  /// Applies the config file; command-line flags win.
  void resolve() {
    if (config.empty()) return;
    file = read_json(config);
    if (!file.is_object()) fail("BAD_CONFIG", "config file must hold a JSON object");
    for (const auto& [key, v] : file.items()) {
      auto it = std::find_if(bindings.begin(), bindings.end(), [&](const Binding& b) { return b.key == key; });
      if (it != bindings.end()) {
        try {
          it->from_file(v);
        } catch (const json::exception& e) {
          fail("BAD_CONFIG", "config key '" + key + "': " + e.what());
        }
      } else if (key == "threads") {
        if (app->get_option("--threads")->count() == 0) threads = v.get<unsigned>();
      } else if (std::find(reserved.begin(), reserved.end(), key) == reserved.end()) {
        fail("BAD_CONFIG", "unknown config key '" + key + "' for " + app->get_name());
      }
    }
  }

  json effective() const {
    json j = json::object();
    for (const Binding& b : bindings) j[b.key] = b.value();
    return j;
  }

  void check_required() const {
    for (const std::string& key : required)
      for (const Binding& b : bindings)
        if (b.key == key && b.value() == json(std::string())) fail("USAGE", "--" + key + " is required");
  }

  void require_out() const {
    if (out.empty()) fail("USAGE", "--out is required");
  }
};

struct RunLog {
  fs::path path;
  std::vector<std::string> lines;
  std::chrono::steady_clock::time_point start = std::chrono::steady_clock::now();
  std::string started = iso_now();
  void add(const std::string& s) { lines.push_back(s); }
  void flush(const std::string& status) {
    if (path.empty()) return;
    std::ostringstream o;
    o << "started " << started << '\n';
    o << "finished " << iso_now() << '\n';
    for (const auto& l : lines) o << l << '\n';
    o << "elapsed_s " << std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count() << '\n';
    o << "status " << status << '\n';
    std::ofstream out(path, std::ios::binary);
    out << o.str();
  }
};

/// Writes the effective config and points the run log at the output location.
void finish_setup(const Command& cmd, const fs::path& dir, const std::string& stem, const json& extra, RunLog& log) {
  make_dir(dir);
  json eff = cmd.effective();
  for (const auto& [k, v] : extra.items()) eff[k] = v;
  write_text(dir / (stem + "config.json"), eff.dump(2) + "\n");
  log.path = dir / (stem + "run.log");
  log.add("threads " + std::to_string(cmd.threads));
}

/// Side files of a single-file output go next to it as <name>.config.json / <name>.run.log.
std::pair<fs::path, std::string> side_location(const fs::path& out) {
  fs::path dir = out.parent_path();
  if (dir.empty()) dir = ".";
  return {dir, out.filename().string() + "."};
}

std::pair<SeverityGroup, SeverityGroup> parse_task(const std::string& task) {
  if (task == "normal-mild") return {SeverityGroup::Normal, SeverityGroup::Mild};
  if (task == "mild-moderate") return {SeverityGroup::Mild, SeverityGroup::Moderate};
  if (task == "moderate-advanced") return {SeverityGroup::Moderate, SeverityGroup::Advanced};
  fail("UNKNOWN_TASK", "task must be normal-mild, mild-moderate or moderate-advanced, got '" + task + "'");
}

std::string group_of(const LabelVolume& v) { return v.meta ? std::string(severity_name(severity_of(*v.meta))) : ""; }

// ---------------------------------------------------------------- datasets

struct Eye {
  std::string id;
  PointCloud cloud;
  std::optional<CellMeans> geometry;
};

/// Eyes of a data directory (.onhv volumes and/or .onhpc clouds) whose group is in
/// `groups`, ordered by eye id. Volumes are reduced to clouds (and grid means when
/// asked) as they load.
std::vector<Eye> load_eyes(const fs::path& dir, const std::set<SeverityGroup>& groups, bool need_geometry,
                           double pitch_um, unsigned threads) {
  require_exists(dir);
  if (!fs::is_directory(dir)) fail("USAGE", "'" + dir.string() + "' is not a directory");
  const auto volumes = files_with(dir, ".onhv");
  const auto clouds = files_with(dir, ".onhpc");
  std::set<std::string> volume_stems;
  for (const auto& p : volumes) volume_stems.insert(p.stem().string());
  if (need_geometry && volumes.empty()) fail("NO_INPUTS", "critical-point maps need .onhv volumes in '" + dir.string() + "'");
  if (volumes.empty() && clouds.empty()) fail("NO_INPUTS", "no .onhv or .onhpc files in '" + dir.string() + "'");

  std::vector<std::optional<Eye>> slots(volumes.size() + clouds.size());
  parallel_for(volumes.size(), threads, [&](std::size_t i) {
    const LabelVolume v = load_volume(volumes[i]);
    if (!v.meta) fail("NO_INPUTS", "'" + volumes[i].string() + "' carries no subject record, group unknown");
    if (!groups.count(severity_of(*v.meta))) return;
    Eye e;
    const fs::path cloud_file = fs::path(volumes[i]).replace_extension(".onhpc");
    if (fs::exists(cloud_file)) e.cloud = load_cloud(cloud_file);
    else {
      CloudOptions opt;
      opt.lateral_pitch_um = pitch_um;
      e.cloud = build_cloud(v, opt);
    }
    if (e.cloud.eye_id.empty()) e.cloud.eye_id = volumes[i].stem().string();
    e.id = e.cloud.eye_id;
    if (need_geometry) e.geometry = cell_means(eye_surfaces(v));
    slots[i] = std::move(e);
  });
  parallel_for(clouds.size(), threads, [&](std::size_t i) {
    if (volume_stems.count(clouds[i].stem().string())) return;
    Eye e;
    e.cloud = load_cloud(clouds[i]);
    if (!groups.count(e.cloud.label)) return;
    e.id = e.cloud.eye_id.empty() ? clouds[i].stem().string() : e.cloud.eye_id;
    slots[volumes.size() + i] = std::move(e);
  });
  std::vector<Eye> out;
  for (auto& s : slots)
    if (s) out.push_back(std::move(*s));
  std::sort(out.begin(), out.end(), [](const Eye& a, const Eye& b) { return a.id < b.id; });
  for (std::size_t i = 1; i < out.size(); ++i)
    if (out[i].id == out[i - 1].id) fail("BAD_INPUT", "duplicate eye id '" + out[i].id + "'");
  return out;
}

/// Restricts eyes to one split of a training report ("all" keeps everything).
void select_split(std::vector<Eye>& eyes, const std::string& report_path, const std::string& split) {
  if (split == "all") return;
  if (report_path.empty()) fail("USAGE", "--split " + split + " needs --report");
  const json rep = read_json(report_path);
  const std::string key = split + "_ids";
  if (!rep.contains(key)) fail("BAD_REPORT", "report has no '" + key + "'");
  std::set<std::string> keep;
  for (const auto& id : rep.at(key)) keep.insert(id.get<std::string>());
  std::erase_if(eyes, [&](const Eye& e) { return !keep.count(e.id); });
  if (eyes.empty()) fail("NO_INPUTS", "no eye of the " + split + " split found in the data directory");
}

// ---------------------------------------------------------------- subcommands

int cmd_phantom(Command& cmd, const std::string& cohort_name, std::size_t n, RunLog& log) {
  cmd.require_out();
  const fs::path dir = cmd.out;
  PhantomConfig base;
  json phantom_json = cmd.file.contains("phantom") ? cmd.file.at("phantom") : json::object();
  base = config_from_json(phantom_json, base);
  json extra;
  extra["phantom"] = to_json(base);

  if (cohort_name == "none") {
    base.seed = cmd.seed;
    extra["phantom"] = to_json(base);
    finish_setup(cmd, dir, "", extra, log);
    const Phantom ph = generate(base);
    save_volume(ph.volume, dir / "phantom.onhv");
    json truth = json::object();
    for (const auto& [name, v] : ph.truth.fields()) truth[name] = std::isnan(v) ? json(nullptr) : json(v);
    write_text(dir / "truth.json", truth.dump(2) + "\n");
    std::ostringstream csv;
    write_parameters_csv_header(csv);
    write_parameters_csv_row(csv, "phantom", group_of(ph.volume), ph.truth);
    write_text(dir / "truth.csv", csv.str());
    log.add("wrote phantom.onhv");
    return 0;
  }

  std::vector<GroupSpec> specs;
  if (cohort_name == "reference") {
    for (SeverityGroup g : {SeverityGroup::Normal, SeverityGroup::Mild, SeverityGroup::Moderate, SeverityGroup::Advanced})
      specs.push_back(reference_group(g));
  } else if (cohort_name == "lc-rnfl") {
    specs = lc_rnfl_experiment();
  } else {
    fail("UNKNOWN_COHORT", "cohort must be none, reference or lc-rnfl, got '" + cohort_name + "'");
  }
  for (GroupSpec& s : specs) s.base = config_from_json(phantom_json, s.base);
  if (n == 0) fail("USAGE", "--n must be positive");
  finish_setup(cmd, dir, "", extra, log);
  const auto eyes = cohort(specs, n, cmd.seed);
  write_cohort(dir, eyes, cmd.threads);
  log.add("wrote " + std::to_string(eyes.size()) + " eyes");
  return 0;
}

int cmd_params(Command& cmd, const std::string& in, const std::string& diagnostics_path, RunLog& log) {
  cmd.require_out();
  require_exists(in);
  std::vector<fs::path> inputs;
  if (fs::is_directory(in)) inputs = files_with(in, ".onhv");
  else inputs.push_back(in);
  if (inputs.empty()) fail("NO_INPUTS", "no .onhv files in '" + in + "'");
  const auto [dir, stem] = side_location(cmd.out);
  finish_setup(cmd, dir, stem, {{"in", in}}, log);

  struct Row {
    std::string id, group;
    OnhParameters p;
  };
  std::vector<Row> rows(inputs.size());
  parallel_for(inputs.size(), cmd.threads, [&](std::size_t i) {
    const LabelVolume v = load_volume(inputs[i]);
    rows[i].id = v.meta && !v.meta->id.empty() ? v.meta->id : inputs[i].stem().string();
    rows[i].group = group_of(v);
    rows[i].p = extract_all(v);
  });
  std::ostringstream csv;
  write_parameters_csv_header(csv);
  json diag = json::object();
  for (const Row& r : rows) {
    write_parameters_csv_row(csv, r.id, r.group, r.p);
    json list = json::array();
    for (const Diagnostic& d : r.p.diagnostics)
      list.push_back({{"parameter", d.parameter}, {"code", d.code}, {"message", d.message}});
    diag[r.id] = list;
  }
  write_text(cmd.out, csv.str());
  if (!diagnostics_path.empty()) write_text(diagnostics_path, diag.dump(2) + "\n");
  log.add("eyes " + std::to_string(rows.size()));
  return 0;
}

int cmd_cloud(Command& cmd, const std::string& in, double pitch, std::size_t sample_n, RunLog& log) {
  cmd.require_out();
  require_exists(in);
  CloudOptions opt;
  opt.lateral_pitch_um = pitch;
  auto convert = [&](const fs::path& src, const fs::path& dst) {
    const LabelVolume v = load_volume(src);
    PointCloud c = build_cloud(v, opt);
    if (c.eye_id.empty()) c.eye_id = src.stem().string();
    if (sample_n > 0) c = sample(c, sample_n, eye_seed(cmd.seed, c.eye_id));
    save_cloud(c, dst);
  };
  if (fs::is_directory(in)) {
    const auto inputs = files_with(in, ".onhv");
    if (inputs.empty()) fail("NO_INPUTS", "no .onhv files in '" + in + "'");
    finish_setup(cmd, cmd.out, "", {{"in", in}}, log);
    parallel_for(inputs.size(), cmd.threads, [&](std::size_t i) {
      convert(inputs[i], fs::path(cmd.out) / (inputs[i].stem().string() + ".onhpc"));
    });
    log.add("clouds " + std::to_string(inputs.size()));
  } else {
    const auto [dir, stem] = side_location(cmd.out);
    finish_setup(cmd, dir, stem, {{"in", in}}, log);
    convert(in, cmd.out);
  }
  return 0;
}

std::vector<LabeledCloud> labeled(const std::vector<Eye>& eyes, SeverityGroup positive) {
  std::vector<LabeledCloud> out;
  for (const Eye& e : eyes) out.push_back({&e.cloud, e.cloud.label == positive ? 1 : 0});
  return out;
}

int cmd_train(Command& cmd, const std::string& task, const std::string& data, double pitch, bool shuffle_labels,
              RunLog& log) {
  cmd.require_out();
  const auto [neg, pos] = parse_task(task);
  TrainConfig tc;
  if (cmd.file.contains("train")) tc = train_config_from_json(cmd.file.at("train"), tc);
  tc.seed = cmd.seed;
  tc.threads = cmd.threads;
  tc.validate();
  json extra;
  extra["train"] = to_json(tc);
  finish_setup(cmd, cmd.out, "", extra, log);

  auto eyes = load_eyes(data, {neg, pos}, false, pitch, cmd.threads);
  auto set = labeled(eyes, pos);
  if (shuffle_labels) {
    std::mt19937_64 rng(eye_seed(cmd.seed, "shuffle-labels"));
    for (std::size_t i = set.size(); i > 1; --i) {
      std::uniform_int_distribution<std::size_t> pick(0, i - 1);
      std::swap(set[i - 1].label, set[pick(rng)].label);
    }
  }
  log.add("eyes " + std::to_string(set.size()));
  TrainResult r = train(set, tc);
  r.model.metadata["task"] = task;
  r.model.metadata["shuffled_labels"] = shuffle_labels;
  save_model(r.model, fs::path(cmd.out) / "model.onhpn");
  json rep = to_json(r.report);
  rep["task"] = task;
  rep["shuffled_labels"] = shuffle_labels;
  write_text(fs::path(cmd.out) / "report.json", rep.dump(2) + "\n");
  std::ostringstream curve;
  curve << "epoch,train_loss,val_auc\n";
  for (std::size_t e = 0; e < r.report.epoch_loss.size(); ++e)
    curve << e << ',' << csv::number(r.report.epoch_loss[e]) << ','
          << (e < r.report.epoch_val_auc.size() ? csv::number(r.report.epoch_val_auc[e]) : "") << '\n';
  write_text(fs::path(cmd.out) / "learning_curve.csv", curve.str());
  return 0;
}

struct ModelInputs {
  PointNetModel model;
  std::size_t eval_points = 0;
  std::uint64_t eval_seed = 0;
};

ModelInputs open_model(const std::string& path) {
  require_exists(path);
  ModelInputs m{load_model(path)};
  m.eval_points = m.model.metadata.value("eval_points", std::size_t(0));
  m.eval_seed = m.model.metadata.value("eval_seed", std::uint64_t(0));
  return m;
}

int cmd_eval(Command& cmd, const std::string& model_path, const std::string& task, const std::string& data,
             const std::string& report, const std::string& split, double pitch, RunLog& log) {
  cmd.require_out();
  const auto [neg, pos] = parse_task(task);
  const ModelInputs m = open_model(model_path);
  finish_setup(cmd, cmd.out, "", {{"model", model_path}}, log);
  auto eyes = load_eyes(data, {neg, pos}, false, pitch, cmd.threads);
  select_split(eyes, report, split);
  std::vector<const PointCloud*> clouds;
  std::vector<int> labels;
  for (const Eye& e : eyes) {
    clouds.push_back(&e.cloud);
    labels.push_back(e.cloud.label == pos ? 1 : 0);
  }
  const auto scores = score_all(m.model, clouds, m.eval_points, m.eval_seed, cmd.threads);
  std::ostringstream csv;
  csv << "eye_id,group,label,score\n";
  Confusion c;
  for (std::size_t i = 0; i < eyes.size(); ++i) {
    csv << eyes[i].id << ',' << severity_name(eyes[i].cloud.label) << ',' << labels[i] << ','
        << csv::number(scores[i]) << '\n';
    const bool p = scores[i] >= 0.5;
    if (labels[i] == 1) (p ? c.tp : c.fn)++;
    else (p ? c.fp : c.tn)++;
  }
  json out;
  out["task"] = task;
  out["split"] = split;
  out["n"] = eyes.size();
  try {
    out["auc"] = auc(scores, labels);
  } catch (const Error& e) {
    out["auc"] = nullptr;
    out["auc_error"] = e.module() + "." + e.code();
  }
  out["confusion"] = {{"tp", c.tp}, {"fp", c.fp}, {"tn", c.tn}, {"fn", c.fn}};
  write_text(fs::path(cmd.out) / "scores.csv", csv.str());
  write_text(fs::path(cmd.out) / "eval.json", out.dump(2) + "\n");
  return 0;
}

int cmd_criticals(Command& cmd, const std::string& model_path, const std::string& task, const std::string& data,
                  const std::string& report, const std::string& split, double pitch, double radius, double grid,
                  RunLog& log) {
  cmd.require_out();
  const auto [neg, pos] = parse_task(task);
  const ModelInputs m = open_model(model_path);
  finish_setup(cmd, cmd.out, "", {{"model", model_path}}, log);
  auto eyes = load_eyes(data, {neg, pos}, true, pitch, cmd.threads);
  select_split(eyes, report, split);

  std::vector<CriticalPointSet> sets(eyes.size());
  std::vector<char> sufficient(eyes.size());
  parallel_for(eyes.size(), cmd.threads, [&](std::size_t i) {
    const PointCloud fed = evaluation_cloud(eyes[i].cloud, m.eval_points, m.eval_seed);
    const Inference full = m.model.infer(features(fed));
    sets[i] = critical_points(full.argmax, fed);
    sufficient[i] = m.model.infer(features(critical_subset(fed, sets[i]))).logits == full.logits;
  });
  std::vector<CellMeans> means;
  for (const Eye& e : eyes) means.push_back(*e.geometry);
  const AverageGeometry geo = average_geometry(means, grid);
  auto projected = project_criticals(sets, geo);
  compute_density(projected, radius, cmd.threads);

  std::ostringstream crit;
  crit << "eye_id,group,index,tissue,x_um,y_um,z_um,dims_won\n";
  std::size_t max_set = 0;
  for (const CriticalPointSet& s : sets) {
    max_set = std::max(max_set, s.entries.size());
    for (const CriticalEntry& e : s.entries)
      crit << s.eye_id << ',' << severity_name(s.label) << ',' << e.index << ',' << tissue_name(e.tissue) << ','
           << csv::number(e.x) << ',' << csv::number(e.y) << ',' << csv::number(e.z) << ',' << e.dims.size() << '\n';
  }
  std::ostringstream dens;
  write_density_csv(dens, projected);
  std::ostringstream surf;
  surf << "tissue,x_um,y_um,z_um,eyes\n";
  for (const auto& [t, verts] : geo.surfaces)
    for (const GridVertex& v : verts)
      surf << tissue_name(t) << ',' << csv::number(v.i * geo.pitch_um) << ',' << csv::number(v.j * geo.pitch_um) << ','
           << csv::number(v.z) << ',' << v.count << '\n';

  json b = to_json(tissue_breakdown(sets));
  b["task"] = task;
  b["split"] = split;
  b["eyes"] = eyes.size();
  b["max_critical_points"] = max_set;
  b["sufficient_eyes"] = std::count(sufficient.begin(), sufficient.end(), 1);
  b["density_radius_um"] = radius;
  b["grid_pitch_um"] = grid;
  write_text(fs::path(cmd.out) / "criticals.csv", crit.str());
  write_text(fs::path(cmd.out) / "density.csv", dens.str());
  write_text(fs::path(cmd.out) / "average_geometry.csv", surf.str());
  write_text(fs::path(cmd.out) / "breakdown.json", b.dump(2) + "\n");
  return 0;
}

std::vector<stats::EyeRow> read_params_csv(const fs::path& path) {
  require_exists(path);
  std::ifstream in(path);
  if (!in) fail("IO_FAILURE", "cannot open '" + path.string() + "'");
  const auto names = OnhParameters::field_names();
  std::string line;
  if (!std::getline(in, line)) fail("BAD_PARAMS_FILE", "'" + path.string() + "' is empty");
  const auto header = csv::split(line);
  if (header.size() != names.size() + 2 || header[0] != "id" || header[1] != "group")
    fail("BAD_PARAMS_FILE", "unexpected header in '" + path.string() + "'");
  for (std::size_t k = 0; k < names.size(); ++k)
    if (header[k + 2] != names[k]) fail("BAD_PARAMS_FILE", "unexpected column '" + std::string(header[k + 2]) + "'");
  std::vector<stats::EyeRow> rows;
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    const auto f = csv::split(line);
    if (f.size() != header.size()) fail("BAD_PARAMS_FILE", "line " + std::to_string(lineno) + ": wrong field count");
    stats::EyeRow r;
    r.id = std::string(f[0]);
    try {
      r.group = parse_severity(f[1]);
      for (std::size_t k = 2; k < f.size(); ++k) r.values.push_back(csv::parse_number(f[k]));
    } catch (const std::invalid_argument&) {
      fail("BAD_PARAMS_FILE", "line " + std::to_string(lineno) + ": not a number");
    } catch (const Error& e) {
      fail("BAD_PARAMS_FILE", "line " + std::to_string(lineno) + ": " + e.detail());
    }
    rows.push_back(std::move(r));
  }
  if (rows.empty()) fail("BAD_PARAMS_FILE", "no data rows in '" + path.string() + "'");
  return rows;
}

int cmd_stats(Command& cmd, const std::string& in, const std::string& data, RunLog& log) {
  cmd.require_out();
  const auto rows = read_params_csv(in);
  finish_setup(cmd, cmd.out, "", {{"in", in}}, log);
  stats::Report rep = stats::summarize(rows, cmd.threads);
  if (!data.empty()) {
    require_exists(data);
    const auto files = files_with(data, ".onhv");
    std::vector<std::pair<SubjectMeta, SeverityGroup>> subjects(files.size());
    std::vector<char> has(files.size());
    parallel_for(files.size(), cmd.threads, [&](std::size_t i) {
      const LabelVolume v = load_volume(files[i]);
      if (!v.meta) return;
      subjects[i] = {*v.meta, severity_of(*v.meta)};
      has[i] = 1;
    });
    std::vector<std::pair<SubjectMeta, SeverityGroup>> present;
    for (std::size_t i = 0; i < files.size(); ++i)
      if (has[i]) present.push_back(subjects[i]);
    rep.demographics = stats::demographics(present, cmd.seed);
  }
  std::ostringstream summary, pairs;
  stats::write_summary_csv(summary, rep);
  stats::write_pairs_csv(pairs, rep);
  write_text(fs::path(cmd.out) / "summary.csv", summary.str());
  write_text(fs::path(cmd.out) / "pairs.csv", pairs.str());
  write_text(fs::path(cmd.out) / "report.json", stats::to_json(rep).dump(2) + "\n");
  log.add("eyes " + std::to_string(rows.size()));
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Optic nerve head structure pipeline"};
  app.require_subcommand(1);
  app.set_help_all_flag("--help-all");

  std::map<std::string, Command> cmds;
  auto sub = [&](const std::string& name, const std::string& help) -> Command& {
    Command& c = cmds[name];
    c.app = app.add_subcommand(name, help);
    c.add_common();
    return c;
  };

  std::string cohort_name = "none";
  std::size_t cohort_n = 50;
  Command& phantom = sub("phantom", "generate a phantom volume or a labeled phantom cohort");
  phantom.bind("cohort", cohort_name, "none | reference | lc-rnfl");
  phantom.bind("n", cohort_n, "eyes per group for cohorts");
  phantom.reserved = {"phantom"};

  std::string in, diagnostics;
  Command& params = sub("params", "extract ONH parameters from .onhv volumes to CSV");
  params.bind("in", in, "volume file or directory", true);
  params.app->add_option("--diagnostics", diagnostics, "write per-eye diagnostics JSON here");

  double pitch = 60;
  std::size_t sample_n = 0;
  Command& cloud = sub("cloud", "convert volumes to point clouds");
  cloud.bind("in", in, "volume file or directory", true);
  cloud.bind("pitch", pitch, "lateral column pitch in um");
  cloud.bind("sample", sample_n, "keep this many points per cloud (0 = all)");

  std::string task = "normal-mild", data, model, report, split = "all";
  bool shuffle_labels = false;
  Command& trn = sub("train", "train the point-cloud classifier with cross-validation");
  trn.bind("task", task, "normal-mild | mild-moderate | moderate-advanced");
  trn.bind("data", data, "directory of .onhv and/or .onhpc files", true);
  trn.bind("pitch", pitch, "lateral column pitch for clouds built from volumes");
  trn.flag("shuffle-labels", shuffle_labels, "permute labels (null-model control)");
  trn.reserved = {"train"};

  Command& ev = sub("eval", "score eyes with a trained model");
  ev.bind("model", model, "model file", true);
  ev.bind("task", task, "classification task");
  ev.bind("data", data, "data directory", true);
  ev.bind("report", report, "training report.json (for --split)");
  ev.bind("split", split, "train | val | test | all");
  ev.bind("pitch", pitch, "lateral column pitch for clouds built from volumes");

  double radius = 75, grid = 50;
  Command& crit = sub("criticals", "critical points, density maps and tissue breakdown");
  crit.bind("model", model, "model file", true);
  crit.bind("task", task, "classification task");
  crit.bind("data", data, "data directory with .onhv volumes", true);
  crit.bind("report", report, "training report.json (for --split)");
  crit.bind("split", split, "train | val | test | all");
  crit.bind("pitch", pitch, "lateral column pitch for clouds built from volumes");
  crit.bind("radius", radius, "density radius in um");
  crit.bind("grid", grid, "average geometry grid pitch in um");

  Command& st = sub("stats", "group statistics over a parameter CSV");
  st.bind("in", in, "parameter CSV from the params subcommand", true);
  st.bind("data", data, "optional directory of .onhv volumes for demographics");

  RunLog log;
  try {
    try {
      app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
      return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
      return app.exit(e);
    } catch (const CLI::ParseError& e) {
      report_error("cli", "USAGE", e.what(), 2);
      return 2;
    }
    std::string name;
    for (auto& [n, c] : cmds)
      if (c.app->parsed()) name = n;
    Command& cmd = cmds.at(name);
    cmd.resolve();
    cmd.check_required();
    std::string cmdline;
    for (int i = 0; i < argc; ++i) cmdline += (i ? " " : "") + std::string(argv[i]);
    log.add("command " + cmdline);

    int rc = 0;
    if (name == "phantom") rc = cmd_phantom(cmd, cohort_name, cohort_n, log);
    else if (name == "params") rc = cmd_params(cmd, in, diagnostics, log);
    else if (name == "cloud") rc = cmd_cloud(cmd, in, pitch, sample_n, log);
    else if (name == "train") rc = cmd_train(cmd, task, data, pitch, shuffle_labels, log);
    else if (name == "eval") rc = cmd_eval(cmd, model, task, data, report, split, pitch, log);
    else if (name == "criticals") rc = cmd_criticals(cmd, model, task, data, report, split, pitch, radius, grid, log);
    else if (name == "stats") rc = cmd_stats(cmd, in, data, log);
    log.flush("ok");
    return rc;
  } catch (const Error& e) {
    const int code = exit_code(e);
    report_error(e.module(), e.code(), e.detail(), code);
    log.add("error " + e.module() + "." + e.code() + " " + e.detail());
    log.flush("failed");
    return code;
  } catch (const fs::filesystem_error& e) {
    report_error("cli", "IO_FAILURE", e.what(), 2);
    log.flush("failed");
    return 2;
  } catch (const std::exception& e) {
    report_error("cli", "INTERNAL", e.what(), 1);
    log.flush("failed");
    return 1;
  }
}
