// tsda command-line front end: generate / adapt / infer / eval / ablate / probe.
#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <spdlog/spdlog.h>

#include "tsda/alignment.hpp"
#include "tsda/config.hpp"
#include "tsda/data.hpp"
#include "tsda/eval.hpp"
#include "tsda/logging.hpp"
#include "tsda/model.hpp"
#include "tsda/pipeline.hpp"

namespace fs = std::filesystem;
using namespace tsda;

namespace {

// Thrown for bad input that the parser can't see (missing run files etc.)
struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

void write_file(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << text;
  if (!out) throw std::runtime_error("write failed: " + path.string());
}

std::vector<std::vector<std::string>> read_csv(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot read " + path.string());
  std::vector<std::vector<std::string>> rows;
  std::string line;
  bool header = true;
  while (std::getline(in, line)) {
    if (header) {
      header = false;
      continue;
    }
    if (line.empty()) continue;
    std::vector<std::string> cells;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) cells.push_back(cell);
    rows.push_back(std::move(cells));
  }
  return rows;
}

double to_double(const std::string& s, const fs::path& where) {
  try {
    std::size_t used = 0;
    double v = std::stod(s, &used);
    if (used == s.size()) return v;
  } catch (const std::exception&) {
  }
  throw std::runtime_error(where.string() + ": bad number '" + s + "'");
}

// Training flags shared by adapt and ablate. Unset flags leave the config
// file (or the defaults) alone.
struct TrainFlags {
  std::string config;
  std::optional<std::string> mode, divergence;
  std::optional<std::size_t> epochs_align, epochs_correct, batch, modes;
  std::optional<double> lr, eta;
  std::optional<std::uint64_t> seed;
  bool no_frequency = false, no_correction = false;

  void attach(CLI::App* app) {
    app->add_option("--config", config, "key=value training settings")->check(CLI::ExistingFile);
    app->add_option("--mode", mode, "closed_set or universal")->check(CLI::IsMember({"closed_set", "universal"}));
    app->add_option("--epochs-align", epochs_align, "stage 1 epochs");
    app->add_option("--epochs-correct", epochs_correct, "stage 2 epochs");
    app->add_option("--batch", batch, "batch size");
    app->add_option("--lr", lr, "Adam learning rate");
    app->add_option("--eta", eta, "Sinkhorn entropic regularizer");
    app->add_option("--modes", modes, "retained Fourier modes (0 = default)");
    app->add_option("--divergence", divergence, "sinkhorn or mmd")->check(CLI::IsMember({"sinkhorn", "mmd"}));
    app->add_flag("--no-frequency", no_frequency, "drop the frequency branch");
    app->add_flag("--no-correction", no_correction, "skip the correction stage");
    app->add_option("--seed", seed, "random seed");
  }

  KeyValues settings() const {
    KeyValues kv;
    if (!config.empty()) kv = KeyValues::load(config);
    if (mode) kv.set("mode", *mode);
    if (divergence) kv.set("divergence", *divergence);
    if (epochs_align) kv.set("epochs_align", std::to_string(*epochs_align));
    if (epochs_correct) kv.set("epochs_correct", std::to_string(*epochs_correct));
    if (batch) kv.set("batch", std::to_string(*batch));
    if (modes) kv.set("modes", std::to_string(*modes));
    if (lr) kv.set("lr", format_double(*lr));
    if (eta) kv.set("eta", format_double(*eta));
    if (seed) kv.set("seed", std::to_string(*seed));
    if (no_frequency) kv.set("frequency_branch", "false");
    if (no_correction) kv.set("correction", "false");
    return kv;
  }
};

std::string trace_csv(const std::vector<pipeline::EpochLoss>& trace) {
  std::ostringstream os;
  os << "stage,epoch,classification,alignment,reconstruction,total\n";
  for (const auto& e : trace)
    os << e.stage << ',' << e.epoch << ',' << format_double(e.classification) << ',' << format_double(e.alignment)
       << ',' << format_double(e.reconstruction) << ',' << format_double(e.total) << '\n';
  return os.str();
}

std::string drift_csv(const pipeline::Stage2Output& s2) {
  std::ostringstream os;
  os << "sample_id,assigned_class,d_align,d_correct\n";
  for (std::size_t i = 0; i < s2.assigned.size(); ++i)
    os << i << ',' << s2.assigned[i] << ',' << format_double(s2.d_align[i]) << ',' << format_double(s2.d_correct[i])
       << '\n';
  return os.str();
}

pipeline::Stage2Output read_drift(const fs::path& path) {
  pipeline::Stage2Output s2;
  for (const auto& row : read_csv(path)) {
    if (row.size() != 4) throw std::runtime_error(path.string() + ": expected 4 columns");
    s2.assigned.push_back(static_cast<std::size_t>(to_double(row[1], path)));
    s2.d_align.push_back(to_double(row[2], path));
    s2.d_correct.push_back(to_double(row[3], path));
  }
  return s2;
}

std::string predictions_csv(const std::vector<std::int64_t>& preds) {
  std::ostringstream os;
  os << "sample_id,prediction\n";
  for (std::size_t i = 0; i < preds.size(); ++i)
    os << i << ',' << (preds[i] == pipeline::kUnknown ? std::string("unknown") : std::to_string(preds[i])) << '\n';
  return os.str();
}

std::vector<std::int64_t> read_predictions(const fs::path& path) {
  std::vector<std::int64_t> preds;
  for (const auto& row : read_csv(path)) {
    if (row.size() != 2) throw std::runtime_error(path.string() + ": expected 2 columns");
    preds.push_back(row[1] == "unknown" ? pipeline::kUnknown : static_cast<std::int64_t>(to_double(row[1], path)));
  }
  return preds;
}

std::string verdicts_csv(const std::vector<detection::DriftRecord>& drift) {
  std::ostringstream os;
  os << "sample_id,assigned_class,d_align,d_correct,drift,verdict\n";
  for (const auto& r : drift)
    os << r.sample_id << ',' << r.assigned_class << ',' << format_double(r.d_align) << ','
       << format_double(r.d_correct) << ',' << format_double(r.drift) << ',' << detection::to_string(r.verdict)
       << '\n';
  return os.str();
}

std::string decisions_csv(const std::vector<detection::BimodalDecision>& ds) {
  std::ostringstream os;
  os << "class,count,tested,dip,p_value,bimodal,mu1,mu2\n";
  for (const auto& d : ds)
    os << d.cls << ',' << d.count << ',' << (d.tested ? 1 : 0) << ',' << format_double(d.dip) << ','
       << format_double(d.p_value) << ',' << (d.bimodal ? 1 : 0) << ',' << format_double(d.mu1) << ','
       << format_double(d.mu2) << '\n';
  return os.str();
}

fs::path ensure_dir(const std::string& dir) {
  fs::path p(dir);
  fs::create_directories(p);
  return p;
}

// --- subcommands -----------------------------------------------------------

int cmd_generate(const std::string& spec_path, const std::string& out, std::optional<std::uint64_t> seed) {
  auto kv = KeyValues::load(spec_path);
  if (seed) kv.set("seed", std::to_string(*seed));
  auto [s, t] = data::pair_specs(kv);
  const auto dir = ensure_dir(out);
  const auto source = data::generate(s);
  const auto target = data::generate(t);
  data::save(source, (dir / "source.bin").string());
  data::save(target, (dir / "target.bin").string());
  write_file(dir / "spec.txt", kv.to_text());
  spdlog::info("wrote {} source and {} target series to {}", source.size(), target.size(), dir.string());
  return 0;
}

int cmd_adapt(const TrainFlags& flags, const std::string& source_path, const std::string& target_path,
              const std::string& out) {
  auto kv = flags.settings();
  const auto cfg = pipeline::TrainConfig::from_keyvalues(kv);
  cfg.validate();
  const auto source = data::load_any(source_path);
  const auto target = data::load_any(target_path);
  const auto dir = ensure_dir(out);

  auto echo = cfg.to_keyvalues();
  echo.set("source", fs::absolute(source_path).string());
  echo.set("target", fs::absolute(target_path).string());
  write_file(dir / "config.txt", echo.to_text());

  std::vector<pipeline::EpochLoss> trace;
  auto model = pipeline::stage1_align(source, target, cfg, &trace);
  model::save_checkpoint(model, (dir / "stage1.ckpt").string());
  // a stale stage 2 from an earlier run in the same directory would be picked up by infer
  fs::remove(dir / "stage2.ckpt");
  fs::remove(dir / "drift.csv");
  if (cfg.mode == pipeline::Mode::universal || cfg.correction) {
    const auto s2 = pipeline::stage2_correct(target, model, cfg, &trace);
    model::save_checkpoint(model, (dir / "stage2.ckpt").string());
    write_file(dir / "drift.csv", drift_csv(s2));
  }
  write_file(dir / "loss_trace.csv", trace_csv(trace));
  spdlog::info("adapted in {} epochs; run directory {}", trace.size(), dir.string());
  return 0;
}

int cmd_infer(const std::string& run, const std::string& target_path, const std::string& out_opt) {
  const fs::path dir(run);
  if (!fs::exists(dir / "config.txt")) throw UsageError(run + " is not a run directory (no config.txt)");
  const auto cfg = pipeline::TrainConfig::from_keyvalues(KeyValues::load((dir / "config.txt").string()));
  const auto target = data::load_any(target_path);
  const bool corrected = fs::exists(dir / "stage2.ckpt");
  auto model = model::load_checkpoint((dir / (corrected ? "stage2.ckpt" : "stage1.ckpt")).string());
  std::optional<pipeline::Stage2Output> s2;
  if (fs::exists(dir / "drift.csv")) s2 = read_drift(dir / "drift.csv");
  if (cfg.mode == pipeline::Mode::universal && !s2)
    throw UsageError("universal inference needs drift.csv from adapt");

  const auto result = pipeline::stage3_infer(target, std::move(model), s2, cfg);
  const auto out = ensure_dir(out_opt.empty() ? run : out_opt);
  write_file(out / "predictions.csv", predictions_csv(result.predictions));
  if (cfg.mode == pipeline::Mode::universal) {
    write_file(out / "verdicts.csv", verdicts_csv(result.drift));
    write_file(out / "decisions.csv", decisions_csv(result.decisions));
    std::size_t unknown = 0;
    for (auto p : result.predictions) unknown += p == pipeline::kUnknown;
    spdlog::info("{} of {} target samples rejected as unknown", unknown, result.predictions.size());
  }
  return 0;
}

int cmd_eval(const std::string& predictions_path, const std::string& target_path, const std::string& source_path,
             std::optional<std::string> mode, const std::string& run, const std::string& out) {
  std::string preds_file = predictions_path;
  bool universal = false;
  if (!run.empty()) {
    const fs::path dir(run);
    if (preds_file.empty()) preds_file = (dir / "predictions.csv").string();
    if (fs::exists(dir / "config.txt"))
      universal = pipeline::parse_mode(KeyValues::load((dir / "config.txt").string()).get_string("mode", "closed_set")) ==
                  pipeline::Mode::universal;
  }
  if (preds_file.empty()) throw UsageError("eval needs --predictions or --run");
  if (mode) universal = pipeline::parse_mode(*mode) == pipeline::Mode::universal;

  const auto target = data::load_any(target_path);
  if (!target.has_labels()) throw UsageError(target_path + " has no labels");
  std::set<std::size_t> known;
  if (!source_path.empty())
    known = data::load_any(source_path).label_inventory();
  else
    known = target.label_inventory();
  const auto preds = read_predictions(preds_file);
  const auto report = eval::evaluate(preds, target.labels, target.classes, known, universal);
  const std::string text = report.to_keyvalues().to_text();
  std::cout << text;
  const std::string out_dir = !out.empty() ? out : run;
  if (!out_dir.empty()) {
    const auto dir = ensure_dir(out_dir);
    write_file(dir / "metrics.txt", text);
    write_file(dir / "confusion.csv", report.confusion_csv());
  }
  return 0;
}

int cmd_ablate(const TrainFlags& flags, const std::string& source_path, const std::string& target_path,
               const std::string& out, const std::vector<std::uint64_t>& seeds, std::vector<std::size_t> rows,
               std::size_t jobs) {
  const auto base = pipeline::TrainConfig::from_keyvalues(flags.settings());
  base.validate();
  const auto source = data::load_any(source_path);
  const auto target = data::load_any(target_path);
  std::vector<eval::GridRow> grid;
  for (const auto& r : eval::ablation_rows())
    if (rows.empty() || std::find(rows.begin(), rows.end(), r.index) != rows.end()) grid.push_back(r);
  if (grid.empty()) throw UsageError("no ablation row selected (valid rows are 1-6)");

  const auto result = eval::run_grid(source, target, base, grid, seeds, jobs);
  std::cout << result.summary_csv();
  if (!out.empty()) {
    const auto dir = ensure_dir(out);
    auto echo = base.to_keyvalues();
    echo.set("source", fs::absolute(source_path).string());
    echo.set("target", fs::absolute(target_path).string());
    write_file(dir / "config.txt", echo.to_text());
    write_file(dir / "grid.csv", result.cells_csv());
    write_file(dir / "summary.csv", result.summary_csv());
  }
  for (const auto& c : result.cells)
    if (!c.error.empty()) return 2;
  return 0;
}

int cmd_probe(const std::vector<double>& shifts, std::size_t points, std::size_t dim, std::uint64_t seed,
              const std::string& out) {
  alignment::ProbeOptions opt;
  opt.points = points;
  opt.dimension = dim;
  opt.seed = seed;
  std::ostringstream os;
  os << "shift,divergence,loss,gradient_norm\n";
  for (double s : shifts)
    for (auto d : {alignment::ProbeDivergence::sinkhorn, alignment::ProbeDivergence::mmd,
                   alignment::ProbeDivergence::kl_on_histograms}) {
      const auto r = alignment::gradient_probe(s, d, opt);
      os << format_double(s) << ',' << alignment::to_string(d) << ',' << format_double(r.loss) << ','
         << format_double(r.gradient_norm) << '\n';
    }
  std::cout << os.str();
  if (!out.empty()) write_file(out, os.str());
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  try {
    configure_logging();
  } catch (const std::exception& e) {
    std::cerr << "tsda: " << e.what() << '\n';
    return 1;
  }

  CLI::App app{"Time-series domain adaptation with time-frequency features and Sinkhorn alignment"};
  app.failure_message(CLI::FailureMessage::help);
  app.require_subcommand(1);

  // generate
  auto* gen = app.add_subcommand("generate", "write a synthetic source/target pair");
  std::string gen_spec, gen_out;
  std::optional<std::uint64_t> gen_seed;
  gen->add_option("--spec", gen_spec, "pair specification (key=value)")->required()->check(CLI::ExistingFile);
  gen->add_option("--out", gen_out, "output directory")->required();
  gen->add_option("--seed", gen_seed, "overrides the spec seed");

  // adapt
  auto* ad = app.add_subcommand("adapt", "stages 1-2: align, then correct; writes checkpoints");
  TrainFlags ad_flags;
  std::string ad_source, ad_target, ad_out;
  ad->add_option("--source", ad_source, "labelled source series")->required()->check(CLI::ExistingFile);
  ad->add_option("--target", ad_target, "unlabelled target series")->required()->check(CLI::ExistingFile);
  ad->add_option("--out", ad_out, "run directory")->required();
  ad_flags.attach(ad);

  // infer
  auto* inf = app.add_subcommand("infer", "stage 3: predictions and unknown verdicts");
  std::string inf_run, inf_target, inf_out;
  inf->add_option("--run", inf_run, "run directory written by adapt")->required()->check(CLI::ExistingDirectory);
  inf->add_option("--target", inf_target, "target series")->required()->check(CLI::ExistingFile);
  inf->add_option("--out", inf_out, "output directory (default: the run directory)");

  // eval
  auto* ev = app.add_subcommand("eval", "metrics from predictions and target labels");
  std::string ev_preds, ev_target, ev_source, ev_run, ev_out;
  std::optional<std::string> ev_mode;
  ev->add_option("--predictions", ev_preds, "predictions.csv")->check(CLI::ExistingFile);
  ev->add_option("--run", ev_run, "run directory (reads predictions.csv and the mode)")->check(CLI::ExistingDirectory);
  ev->add_option("--target", ev_target, "labelled target series")->required()->check(CLI::ExistingFile);
  ev->add_option("--source", ev_source, "source series; its labels define the known classes")
      ->check(CLI::ExistingFile);
  ev->add_option("--mode", ev_mode, "closed_set or universal")->check(CLI::IsMember({"closed_set", "universal"}));
  ev->add_option("--out", ev_out, "where metrics.txt and confusion.csv go (default: the run directory)");

  // ablate
  auto* ab = app.add_subcommand("ablate", "ablation grid over the three toggles");
  TrainFlags ab_flags;
  std::string ab_source, ab_target, ab_out;
  std::vector<std::uint64_t> ab_seeds{0};
  std::vector<std::size_t> ab_rows;
  std::size_t ab_jobs = 1;
  ab->add_option("--source", ab_source, "labelled source series")->required()->check(CLI::ExistingFile);
  ab->add_option("--target", ab_target, "labelled target series")->required()->check(CLI::ExistingFile);
  ab->add_option("--out", ab_out, "output directory");
  ab->add_option("--seeds", ab_seeds, "seeds, comma separated")->delimiter(',');
  ab->add_option("--rows", ab_rows, "rows 1-6, comma separated (default all)")->delimiter(',');
  ab->add_option("--jobs", ab_jobs, "parallel runs")->check(CLI::PositiveNumber);
  ab_flags.attach(ab);

  // probe
  auto* pr = app.add_subcommand("probe", "divergence gradient norm versus translation");
  std::vector<double> pr_shifts{0.5, 1, 2, 5, 10, 20, 50};
  std::size_t pr_points = 32, pr_dim = 2;
  std::uint64_t pr_seed = 0;
  std::string pr_out;
  pr->add_option("--shifts", pr_shifts, "shifts in units of the cloud sigma")->delimiter(',');
  pr->add_option("--points", pr_points, "points per cloud")->check(CLI::PositiveNumber);
  pr->add_option("--dim", pr_dim, "dimension")->check(CLI::PositiveNumber);
  pr->add_option("--seed", pr_seed, "random seed");
  pr->add_option("--out", pr_out, "also write the table here");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  try {
    if (gen->parsed()) return cmd_generate(gen_spec, gen_out, gen_seed);
    if (ad->parsed()) return cmd_adapt(ad_flags, ad_source, ad_target, ad_out);
    if (inf->parsed()) return cmd_infer(inf_run, inf_target, inf_out);
    if (ev->parsed()) return cmd_eval(ev_preds, ev_target, ev_source, ev_mode, ev_run, ev_out);
    if (ab->parsed()) return cmd_ablate(ab_flags, ab_source, ab_target, ab_out, ab_seeds, ab_rows, ab_jobs);
    if (pr->parsed()) return cmd_probe(pr_shifts, pr_points, pr_dim, pr_seed, pr_out);
  } catch (const UsageError& e) {
    std::cerr << "tsda: " << e.what() << '\n';
    return 1;
  } catch (const std::exception& e) {
    spdlog::error("{}", e.what());
    return 2;
  }
  return 1;
}
