#include "tsda/eval.hpp"

#include <atomic>
#include <cmath>
#include <limits>
#include <mutex>
#include <sstream>
#include <stdexcept>
#include <thread>

#include <spdlog/spdlog.h>

namespace tsda::eval {
namespace {

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

void check_pair(std::size_t np, std::size_t nl) {
  if (np == 0 || nl == 0) throw std::invalid_argument("metrics: empty prediction list");
  if (np != nl)
    throw std::invalid_argument("metrics: " + std::to_string(np) + " predictions for " + std::to_string(nl) +
                                " labels");
}

void mean_std(const std::vector<double>& v, double& mean, double& sd) {
  mean = kNaN;
  sd = kNaN;
  if (v.empty()) return;
  double s = 0.0;
  for (double x : v) s += x;
  mean = s / static_cast<double>(v.size());
  if (v.size() < 2) {
    sd = 0.0;
    return;
  }
  double q = 0.0;
  for (double x : v) q += (x - mean) * (x - mean);
  sd = std::sqrt(q / static_cast<double>(v.size() - 1));
}

}  // namespace

double accuracy(std::span<const std::int64_t> preds, std::span<const std::int64_t> labels) {
  check_pair(preds.size(), labels.size());
  std::size_t ok = 0;
  for (std::size_t i = 0; i < preds.size(); ++i) ok += preds[i] == labels[i];
  return static_cast<double>(ok) / static_cast<double>(preds.size());
}

std::vector<double> per_class_f1(std::span<const std::int64_t> preds, std::span<const std::int64_t> labels,
                                 std::size_t classes) {
  check_pair(preds.size(), labels.size());
  std::vector<double> tp(classes, 0.0), fp(classes, 0.0), fn(classes, 0.0);
  auto in_range = [&](std::int64_t c) { return c >= 0 && static_cast<std::size_t>(c) < classes; };
  for (std::size_t i = 0; i < preds.size(); ++i) {
    if (!in_range(labels[i])) throw std::invalid_argument("macro_f1: label " + std::to_string(labels[i]) + " out of range");
    const auto y = static_cast<std::size_t>(labels[i]);
    if (preds[i] == labels[i]) {
      tp[y] += 1;
      continue;
    }
    fn[y] += 1;
    // predictions outside the label space (unknown) only cost recall
    if (in_range(preds[i])) fp[static_cast<std::size_t>(preds[i])] += 1;
  }
  std::vector<double> f1(classes, kNaN);
  for (std::size_t c = 0; c < classes; ++c) {
    if (tp[c] + fn[c] == 0) continue;
    const double denom = 2 * tp[c] + fp[c] + fn[c];
    f1[c] = denom > 0 ? 2 * tp[c] / denom : 0.0;
  }
  return f1;
}

double macro_f1(std::span<const std::int64_t> preds, std::span<const std::int64_t> labels, std::size_t classes) {
  const auto f1 = per_class_f1(preds, labels, classes);
  double s = 0.0;
  std::size_t n = 0;
  for (double v : f1)
    if (!std::isnan(v)) {
      s += v;
      ++n;
    }
  return n ? s / static_cast<double>(n) : 0.0;
}

double h_score(double ca_c, double ca_u) {
  if (ca_c + ca_u <= 0.0) return 0.0;
  return 2.0 * ca_c * ca_u / (ca_c + ca_u);
}

MetricsReport evaluate(std::span<const std::int64_t> preds, std::span<const std::size_t> labels, std::size_t classes,
                       const std::set<std::size_t>& known, bool universal) {
  check_pair(preds.size(), labels.size());
  MetricsReport r;
  r.samples = preds.size();
  r.universal = universal;
  r.classes = classes;

  // Indices into the report's label space; unknown is the extra last slot.
  const std::size_t width = classes + (universal ? 1 : 0);
  const auto unknown_slot = static_cast<std::int64_t>(classes);
  std::vector<std::int64_t> truth(labels.size()), guess(preds.size());
  std::size_t nk = 0, okk = 0, nu = 0, oku = 0, rejected = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] >= classes) throw std::invalid_argument("metrics: label " + std::to_string(labels[i]) + " out of range");
    const bool is_known = known.count(labels[i]) != 0;
    const bool said_unknown = preds[i] == pipeline::kUnknown;
    rejected += said_unknown;
    truth[i] = universal && !is_known ? unknown_slot : static_cast<std::int64_t>(labels[i]);
    if (said_unknown)
      guess[i] = universal ? unknown_slot : -1;
    else
      guess[i] = preds[i];
    if (is_known) {
      ++nk;
      okk += preds[i] == static_cast<std::int64_t>(labels[i]);
    } else {
      ++nu;
      oku += said_unknown;
    }
  }

  // a closed-set report only grows an unknown column if something was rejected
  const bool stray = !universal && rejected > 0;
  r.confusion.assign(width, std::vector<std::size_t>(width + (stray ? 1 : 0), 0));
  for (std::size_t i = 0; i < truth.size(); ++i) {
    const auto row = static_cast<std::size_t>(truth[i]);
    const std::size_t col =
        guess[i] < 0 || static_cast<std::size_t>(guess[i]) >= width ? width : static_cast<std::size_t>(guess[i]);
    if (col >= r.confusion[row].size()) throw std::invalid_argument("metrics: prediction " + std::to_string(preds[i]) + " out of range");
    ++r.confusion[row][col];
  }

  r.accuracy = accuracy(guess, truth);
  r.per_class_f1 = per_class_f1(guess, truth, width);
  r.macro_f1 = macro_f1(guess, truth, width);
  r.ca_c = nk ? static_cast<double>(okk) / static_cast<double>(nk) : kNaN;
  r.ca_u = nu ? static_cast<double>(oku) / static_cast<double>(nu) : kNaN;
  r.h_score = std::isnan(r.ca_c) || std::isnan(r.ca_u) ? kNaN : h_score(r.ca_c, r.ca_u);
  r.unknown_rate = static_cast<double>(rejected) / static_cast<double>(r.samples);
  return r;
}

KeyValues MetricsReport::to_keyvalues() const {
  KeyValues kv;
  kv.set("samples", std::to_string(samples));
  kv.set("mode", universal ? "universal" : "closed_set");
  kv.set("accuracy", format_double(accuracy));
  kv.set("macro_f1", format_double(macro_f1));
  kv.set("ca_c", format_double(ca_c));
  kv.set("ca_u", format_double(ca_u));
  kv.set("h_score", format_double(h_score));
  kv.set("unknown_rate", format_double(unknown_rate));
  for (std::size_t c = 0; c < per_class_f1.size(); ++c) {
    const std::string name = universal && c == classes ? "unknown" : std::to_string(c);
    kv.set("f1." + name, format_double(per_class_f1[c]));
  }
  return kv;
}

std::string MetricsReport::confusion_csv() const {
  std::ostringstream os;
  os << "truth";
  const std::size_t cols = confusion.empty() ? 0 : confusion.front().size();
  for (std::size_t c = 0; c < cols; ++c) os << ',' << (c >= classes ? std::string("unknown") : std::to_string(c));
  os << '\n';
  for (std::size_t r = 0; r < confusion.size(); ++r) {
    os << (r >= classes ? std::string("unknown") : std::to_string(r));
    for (auto v : confusion[r]) os << ',' << v;
    os << '\n';
  }
  return os.str();
}

RunOutcome run_once(const data::Dataset& source, const data::Dataset& target, const pipeline::TrainConfig& cfg) {
  if (!target.has_labels()) throw std::invalid_argument("evaluation needs target labels");
  auto result = pipeline::adapt(source, target, cfg);
  const auto inv = source.label_inventory();
  auto metrics = evaluate(result.predictions, target.labels, target.classes, inv, cfg.mode == pipeline::Mode::universal);
  return {std::move(result), std::move(metrics)};
}

std::vector<GridRow> ablation_rows() {
  using pipeline::Divergence;
  return {
      {1, false, Divergence::mmd, false},      {2, true, Divergence::mmd, false},
      {3, false, Divergence::sinkhorn, false}, {4, true, Divergence::sinkhorn, false},
      {5, true, Divergence::mmd, true},        {6, true, Divergence::sinkhorn, true},
  };
}

pipeline::TrainConfig apply(const pipeline::TrainConfig& base, const GridRow& row) {
  auto cfg = base;
  cfg.frequency_branch = row.frequency_branch;
  cfg.divergence = row.divergence;
  cfg.correction = row.correction;
  return cfg;
}

GridResult run_grid(const data::Dataset& source, const data::Dataset& target, const pipeline::TrainConfig& base,
                    const std::vector<GridRow>& rows, const std::vector<std::uint64_t>& seeds, std::size_t jobs) {
  GridResult out;
  for (const auto& row : rows)
    for (auto seed : seeds) out.cells.push_back({row, seed, std::nullopt, {}});

  std::atomic<std::size_t> next{0};
  std::mutex log_mutex;
  auto worker = [&] {
    for (std::size_t i = next++; i < out.cells.size(); i = next++) {
      auto& cell = out.cells[i];
      auto cfg = apply(base, cell.row);
      cfg.seed = cell.seed;
      try {
        cell.metrics = run_once(source, target, cfg).metrics;
      } catch (const std::exception& e) {
        cell.error = e.what();
        std::lock_guard lock(log_mutex);
        spdlog::warn("row {} seed {} failed: {}", cell.row.index, cell.seed, e.what());
      }
    }
  };
  jobs = std::max<std::size_t>(1, std::min(jobs, out.cells.size()));
  if (jobs == 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (std::size_t j = 0; j < jobs; ++j) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }

  for (const auto& row : rows) {
    GridSummary s;
    s.row = row;
    std::vector<double> acc, f1, h;
    for (const auto& cell : out.cells) {
      if (cell.row.index != row.index) continue;
      ++s.runs;
      if (!cell.metrics) {
        ++s.failures;
        continue;
      }
      acc.push_back(cell.metrics->accuracy);
      f1.push_back(cell.metrics->macro_f1);
      if (!std::isnan(cell.metrics->h_score)) h.push_back(cell.metrics->h_score);
    }
    mean_std(acc, s.accuracy_mean, s.accuracy_std);
    mean_std(f1, s.macro_f1_mean, s.macro_f1_std);
    mean_std(h, s.h_mean, s.h_std);
    out.summary.push_back(s);
  }
  return out;
}

namespace {
std::string toggles(const GridRow& r) {
  return std::to_string(r.index) + ',' + (r.frequency_branch ? "on" : "off") + ',' + pipeline::to_string(r.divergence) +
         ',' + (r.correction ? "on" : "off");
}
}  // namespace

std::string GridResult::cells_csv() const {
  std::ostringstream os;
  os << "row,frequency,divergence,correction,seed,accuracy,macro_f1,ca_c,ca_u,h_score,error\n";
  for (const auto& c : cells) {
    os << toggles(c.row) << ',' << c.seed << ',';
    if (c.metrics)
      os << format_double(c.metrics->accuracy) << ',' << format_double(c.metrics->macro_f1) << ','
         << format_double(c.metrics->ca_c) << ',' << format_double(c.metrics->ca_u) << ','
         << format_double(c.metrics->h_score) << ',';
    else
      os << ",,,,,";
    // errors are free text; keep the table one line per run
    std::string e = c.error;
    for (auto& ch : e)
      if (ch == ',' || ch == '\n') ch = ' ';
    os << e << '\n';
  }
  return os.str();
}

std::string GridResult::summary_csv() const {
  std::ostringstream os;
  os << "row,frequency,divergence,correction,runs,failures,accuracy_mean,accuracy_std,macro_f1_mean,macro_f1_std,"
        "h_mean,h_std\n";
  for (const auto& s : summary)
    os << toggles(s.row) << ',' << s.runs << ',' << s.failures << ',' << format_double(s.accuracy_mean) << ','
       << format_double(s.accuracy_std) << ',' << format_double(s.macro_f1_mean) << ','
       << format_double(s.macro_f1_std) << ',' << format_double(s.h_mean) << ',' << format_double(s.h_std) << '\n';
  return os.str();
}

}  // namespace tsda::eval
