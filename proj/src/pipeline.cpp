#include "tsda/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <stdexcept>

#include <spdlog/spdlog.h>

#include "tsda/nn.hpp"

namespace tsda::pipeline {

std::string to_string(Mode m) { return m == Mode::universal ? "universal" : "closed_set"; }
std::string to_string(Divergence d) { return d == Divergence::mmd ? "mmd" : "sinkhorn"; }

Mode parse_mode(const std::string& s) {
  if (s == "closed_set" || s == "closed-set" || s == "closed") return Mode::closed_set;
  if (s == "universal") return Mode::universal;
  throw std::invalid_argument("mode must be closed_set or universal, got '" + s + "'");
}

Divergence parse_divergence(const std::string& s) {
  if (s == "sinkhorn") return Divergence::sinkhorn;
  if (s == "mmd") return Divergence::mmd;
  throw std::invalid_argument("divergence must be sinkhorn or mmd, got '" + s + "'");
}

std::array<double, 3> TrainConfig::normalized_weights() const {
  const double s = weight_classification + weight_alignment + weight_reconstruction;
  return {weight_classification / s, weight_alignment / s, weight_reconstruction / s};
}

void TrainConfig::validate() const {
  if (epochs_align < 1) throw std::invalid_argument("epochs_align must be >= 1");
  if (batch < 2) throw std::invalid_argument("batch must be >= 2");
  if (!(learning_rate > 0.0)) throw std::invalid_argument("learning rate must be positive");
  if (weight_classification < 0.0 || weight_alignment < 0.0 || weight_reconstruction < 0.0)
    throw std::invalid_argument("loss weights must be >= 0");
  if (!(weight_classification + weight_alignment + weight_reconstruction > 0.0))
    throw std::invalid_argument("loss weights must not all be zero");
  if (!(eta > 0.0)) throw std::invalid_argument("eta must be positive");
  if (sinkhorn_iterations < 1) throw std::invalid_argument("sinkhorn_iterations must be >= 1");
  if (!(cost_exponent > 0.0)) throw std::invalid_argument("cost_exponent must be positive");
  if (mmd_sigma < 0.0) throw std::invalid_argument("mmd_sigma must be >= 0");
  if (!(alpha > 0.0 && alpha < 1.0)) throw std::invalid_argument("alpha must be in (0, 1)");
  if (bootstrap < 1) throw std::invalid_argument("bootstrap must be >= 1");
}

model::ModelConfig TrainConfig::model_config(const data::Dataset& source) const {
  model::ModelConfig mc;
  mc.channels = source.channels;
  mc.length = source.length;
  mc.modes = modes;
  mc.classes = source.classes;
  mc.frequency_branch = frequency_branch;
  mc.time_channels = {time_channels[0], time_channels[1], time_channels[2]};
  mc.time_out_length = time_out_length;
  mc.random_spectral_init = random_spectral_init;
  return mc;
}

KeyValues TrainConfig::to_keyvalues() const {
  KeyValues kv;
  kv.set("mode", to_string(mode));
  kv.set("epochs_align", std::to_string(epochs_align));
  kv.set("epochs_correct", std::to_string(epochs_correct));
  kv.set("batch", std::to_string(batch));
  kv.set("lr", format_double(learning_rate));
  kv.set("weight_classification", format_double(weight_classification));
  kv.set("weight_alignment", format_double(weight_alignment));
  kv.set("weight_reconstruction", format_double(weight_reconstruction));
  kv.set("eta", format_double(eta));
  kv.set("sinkhorn_iterations", std::to_string(sinkhorn_iterations));
  kv.set("cost_exponent", format_double(cost_exponent));
  kv.set("mmd_sigma", format_double(mmd_sigma));
  kv.set("modes", std::to_string(modes));
  kv.set("seed", std::to_string(seed));
  kv.set("divergence", to_string(divergence));
  kv.set("frequency_branch", frequency_branch ? "true" : "false");
  kv.set("correction", correction ? "true" : "false");
  kv.set("correction_updates_norm", correction_updates_norm ? "true" : "false");
  kv.set("time_channels", std::to_string(time_channels[0]) + "," + std::to_string(time_channels[1]) + "," +
                              std::to_string(time_channels[2]));
  kv.set("time_out_length", std::to_string(time_out_length));
  kv.set("random_spectral_init", random_spectral_init ? "true" : "false");
  kv.set("bootstrap", std::to_string(bootstrap));
  kv.set("alpha", format_double(alpha));
  return kv;
}

TrainConfig TrainConfig::from_keyvalues(const KeyValues& kv) {
  TrainConfig c;
  auto size = [&](const char* key, std::size_t fallback) {
    const auto v = kv.get_int(key, static_cast<std::int64_t>(fallback));
    if (v < 0) throw std::invalid_argument(std::string(key) + " must be >= 0");
    return static_cast<std::size_t>(v);
  };
  c.mode = parse_mode(kv.get_string("mode", to_string(c.mode)));
  c.epochs_align = size("epochs_align", c.epochs_align);
  c.epochs_correct = size("epochs_correct", c.epochs_correct);
  c.batch = size("batch", c.batch);
  c.learning_rate = kv.get_double("lr", c.learning_rate);
  c.weight_classification = kv.get_double("weight_classification", c.weight_classification);
  c.weight_alignment = kv.get_double("weight_alignment", c.weight_alignment);
  c.weight_reconstruction = kv.get_double("weight_reconstruction", c.weight_reconstruction);
  c.eta = kv.get_double("eta", c.eta);
  c.sinkhorn_iterations = size("sinkhorn_iterations", c.sinkhorn_iterations);
  c.cost_exponent = kv.get_double("cost_exponent", c.cost_exponent);
  c.mmd_sigma = kv.get_double("mmd_sigma", c.mmd_sigma);
  c.modes = size("modes", c.modes);
  c.seed = static_cast<std::uint64_t>(kv.get_int("seed", static_cast<std::int64_t>(c.seed)));
  c.divergence = parse_divergence(kv.get_string("divergence", to_string(c.divergence)));
  c.frequency_branch = kv.get_bool("frequency_branch", c.frequency_branch);
  c.correction = kv.get_bool("correction", c.correction);
  c.correction_updates_norm = kv.get_bool("correction_updates_norm", c.correction_updates_norm);
  if (kv.contains("time_channels")) {
    const auto v = kv.get_doubles("time_channels", {});
    if (v.size() != 3) throw std::invalid_argument("time_channels needs three comma-separated sizes");
    for (std::size_t i = 0; i < 3; ++i) c.time_channels[i] = static_cast<std::size_t>(v[i]);
  }
  c.time_out_length = size("time_out_length", c.time_out_length);
  c.random_spectral_init = kv.get_bool("random_spectral_init", c.random_spectral_init);
  c.bootstrap = size("bootstrap", c.bootstrap);
  c.alpha = kv.get_double("alpha", c.alpha);
  return c;
}

namespace {

/// Shuffled index stream that reshuffles whenever it runs dry.
class Stream {
 public:
  Stream(std::size_t n, std::mt19937_64& rng) : order_(n), rng_(rng) {
    std::iota(order_.begin(), order_.end(), 0);
    std::shuffle(order_.begin(), order_.end(), rng_);
  }
  std::vector<std::size_t> next(std::size_t k) {
    std::vector<std::size_t> out;
    out.reserve(k);
    while (out.size() < k) {
      if (pos_ == order_.size()) {
        std::shuffle(order_.begin(), order_.end(), rng_);
        pos_ = 0;
      }
      out.push_back(order_[pos_++]);
    }
    return out;
  }

 private:
  std::vector<std::size_t> order_;
  std::size_t pos_ = 0;
  std::mt19937_64& rng_;
};

Tensor stack(const Tensor& a, const Tensor& b) {
  Shape s = a.shape();
  s[0] += b.dim(0);
  Tensor out(s);
  std::copy(a.values().begin(), a.values().end(), out.values().begin());
  std::copy(b.values().begin(), b.values().end(), out.values().begin() + static_cast<std::ptrdiff_t>(a.size()));
  return out;
}

void check_finite(double v, const char* stage, std::size_t epoch, std::size_t batch) {
  if (!std::isfinite(v))
    throw std::runtime_error(std::string(stage) + ": non-finite loss at epoch " + std::to_string(epoch + 1) +
                             ", batch " + std::to_string(batch + 1));
}

// Inference in chunks; running statistics make the result chunk-independent.
template <typename F>
void for_chunks(const data::Dataset& ds, F&& f) {
  constexpr std::size_t kChunk = 256;
  for (std::size_t begin = 0; begin < ds.size(); begin += kChunk) {
    std::vector<std::size_t> idx(std::min(kChunk, ds.size() - begin));
    std::iota(idx.begin(), idx.end(), begin);
    f(begin, ds.batch(idx));
  }
}

Tensor embed_all(model::Model& m, const data::Dataset& ds) {
  Tensor out({ds.size(), m.config().latent_dim()});
  for_chunks(ds, [&](std::size_t begin, const Tensor& x) {
    const Tensor z = m.embed(x);
    std::copy(z.values().begin(), z.values().end(), out.values().begin() + static_cast<std::ptrdiff_t>(begin * z.dim(1)));
  });
  return out;
}

std::vector<std::size_t> predict_all(model::Model& m, const data::Dataset& ds) {
  std::vector<std::size_t> out;
  for_chunks(ds, [&](std::size_t, const Tensor& x) {
    const auto p = m.predict(x);
    out.insert(out.end(), p.begin(), p.end());
  });
  return out;
}

std::vector<double> distances(const Tensor& z, const Tensor& w, const std::vector<std::size_t>& assigned) {
  std::vector<double> out(z.dim(0));
  const std::size_t D = z.dim(1);
  for (std::size_t n = 0; n < out.size(); ++n)
    out[n] = detection::prototype_distance({&z.at(n, 0), D}, {&w.at(assigned[n], 0), D});
  return out;
}

void require_compatible(const data::Dataset& source, const data::Dataset& target) {
  if (source.size() == 0 || target.size() == 0) throw std::invalid_argument("adaptation needs non-empty domains");
  if (!source.has_labels()) throw std::invalid_argument("source domain must be labelled");
  if (source.channels != target.channels || source.length != target.length)
    throw std::invalid_argument("source [" + std::to_string(source.channels) + " x " + std::to_string(source.length) +
                                "] and target [" + std::to_string(target.channels) + " x " +
                                std::to_string(target.length) + "] series differ in shape");
}

constexpr std::uint64_t kStage1Stream = 0x5851f42d4c957f2dULL;
constexpr std::uint64_t kStage2Stream = 0x14057b7ef767814fULL;

}  // namespace

Var alignment_loss(Var zs, Var zt, const TrainConfig& cfg) {
  if (cfg.divergence == Divergence::mmd) {
    const double sigma =
        cfg.mmd_sigma > 0.0 ? cfg.mmd_sigma : alignment::median_pairwise_distance(zs.value(), zt.value());
    return alignment::mmd_loss(zs, zt, sigma);
  }
  alignment::SinkhornOptions opt;
  opt.eta = cfg.eta;
  opt.max_iterations = cfg.sinkhorn_iterations;
  opt.p = cfg.cost_exponent;
  return alignment::sinkhorn_loss(zs, zt, opt);
}

Var composite_loss(Tape& tape, model::Model& model, const Tensor& xs, const std::vector<std::size_t>& ys,
                   const Tensor& xt, const TrainConfig& cfg, EpochLoss* parts) {
  const auto w = cfg.normalized_weights();
  const std::size_t ns = xs.dim(0), n = ns + xt.dim(0);
  // One normalization pass over the union of both batches.
  model::Encoded enc = model.encode(tape, stack(xs, xt), true);
  Var zs = nn::slice_rows(enc.z, 0, ns);
  Var zt = nn::slice_rows(enc.z, ns, n);
  std::vector<std::pair<double, Var>> terms;
  EpochLoss local;
  if (w[0] > 0.0) {
    Var lc = model::cross_entropy(model.logits(tape, zs), ys);
    local.classification = lc.value()[0];
    terms.emplace_back(w[0], lc);
  }
  if (w[1] > 0.0) {
    Var la = alignment_loss(zs, zt, cfg);
    local.alignment = la.value()[0];
    terms.emplace_back(w[1], la);
  }
  if (w[2] > 0.0) {
    model::Encoded src{zs, {}, nn::slice_rows(enc.e_t, 0, ns), enc.has_frequency};
    if (enc.has_frequency) src.e_f = nn::slice_rows(enc.e_f, 0, ns);
    Var lr = model::reconstruction_loss(model.decode(tape, src), xs);
    local.reconstruction = lr.value()[0];
    terms.emplace_back(w[2], lr);
  }
  Var total = nn::weighted_sum(terms);
  local.total = total.value()[0];
  if (parts) *parts = local;
  return total;
}

model::Model stage1_align(const data::Dataset& source, const data::Dataset& target, const TrainConfig& cfg,
                          std::vector<EpochLoss>* trace) {
  cfg.validate();
  require_compatible(source, target);
  model::Model model(cfg.model_config(source), cfg.seed);
  OptimizerState opt;
  opt.config.learning_rate = cfg.learning_rate;
  std::mt19937_64 rng(cfg.seed ^ kStage1Stream);
  Stream src(source.size(), rng), tgt(target.size(), rng);
  const std::size_t bs = std::min(cfg.batch, source.size()), bt = std::min(cfg.batch, target.size());
  const std::size_t steps = std::max<std::size_t>({1, source.size() / bs, target.size() / bt});

  for (std::size_t epoch = 0; epoch < cfg.epochs_align; ++epoch) {
    EpochLoss sum;
    for (std::size_t step = 0; step < steps; ++step) {
      const auto is = src.next(bs);
      const auto it = tgt.next(bt);
      Tape tape;
      EpochLoss parts;
      Var loss = composite_loss(tape, model, source.batch(is), source.label_batch(is), target.batch(it), cfg, &parts);
      check_finite(parts.total, "stage 1", epoch, step);
      model.parameters().zero_grad();
      tape.backward(loss);
      adam_step(model.parameters(), opt);
      sum.classification += parts.classification;
      sum.alignment += parts.alignment;
      sum.reconstruction += parts.reconstruction;
      sum.total += parts.total;
    }
    const double k = static_cast<double>(steps);
    EpochLoss row{1, epoch + 1, sum.classification / k, sum.alignment / k, sum.reconstruction / k, sum.total / k};
    spdlog::debug("stage 1 epoch {}: total {:.6f} (C {:.6f}, A {:.6f}, R {:.6f})", row.epoch, row.total,
                  row.classification, row.alignment, row.reconstruction);
    if (trace) trace->push_back(row);
  }
  return model;
}

Stage2Output stage2_correct(const data::Dataset& target, model::Model& model, const TrainConfig& cfg,
                            std::vector<EpochLoss>* trace) {
  cfg.validate();
  if (target.size() == 0) throw std::invalid_argument("stage 2: empty target domain");
  Stage2Output out;
  const Tensor w = model.prototypes();
  {
    const Tensor z = embed_all(model, target);
    out.assigned = predict_all(model, target);
    out.d_align = distances(z, w, out.assigned);
  }
  if (!cfg.correction || cfg.epochs_correct == 0) {
    out.d_correct = out.d_align;
    return out;
  }
  OptimizerState opt;
  opt.config.learning_rate = cfg.learning_rate;
  std::mt19937_64 rng(cfg.seed ^ kStage2Stream);
  Stream tgt(target.size(), rng);
  const std::size_t bt = std::min(cfg.batch, target.size());
  const std::size_t steps = std::max<std::size_t>(1, target.size() / bt);
  auto not_classifier = [](const std::string& name) { return name.rfind("classifier.", 0) != 0; };
  for (std::size_t epoch = 0; epoch < cfg.epochs_correct; ++epoch) {
    double sum = 0.0;
    for (std::size_t step = 0; step < steps; ++step) {
      const Tensor x = target.batch(tgt.next(bt));
      Tape tape;
      model::Encoded enc = model.encode(tape, x, true, cfg.correction_updates_norm);
      Var loss = model::reconstruction_loss(model.decode(tape, enc), x);
      check_finite(loss.value()[0], "stage 2", epoch, step);
      model.parameters().zero_grad();
      tape.backward(loss);
      adam_step(model.parameters(), opt, not_classifier);
      sum += loss.value()[0];
    }
    const double r = sum / static_cast<double>(steps);
    spdlog::debug("stage 2 epoch {}: reconstruction {:.6f}", epoch + 1, r);
    if (trace) trace->push_back(EpochLoss{2, epoch + 1, 0.0, 0.0, r, r});
  }
  out.d_correct = distances(embed_all(model, target), w, out.assigned);
  return out;
}

AdaptationResult stage3_infer(const data::Dataset& target, model::Model model,
                              const std::optional<Stage2Output>& drift, const TrainConfig& cfg) {
  AdaptationResult result;
  if (cfg.mode == Mode::closed_set) {
    for (auto p : predict_all(model, target)) result.predictions.push_back(static_cast<std::int64_t>(p));
    result.model = std::move(model);
    return result;
  }
  if (!drift) throw std::invalid_argument("stage 3: universal mode needs the stage 2 distances");
  const auto& s2 = *drift;
  if (s2.assigned.size() != target.size() || s2.d_align.size() != target.size() ||
      s2.d_correct.size() != target.size())
    throw std::invalid_argument("stage 3: stage 2 output does not cover the target domain");
  for (std::size_t n = 0; n < target.size(); ++n) {
    detection::DriftRecord r;
    r.sample_id = n;
    r.assigned_class = s2.assigned[n];
    r.d_align = s2.d_align[n];
    r.d_correct = s2.d_correct[n];
    r.drift = detection::drift(r.d_align, r.d_correct);
    result.drift.push_back(r);
  }
  detection::DetectionOptions opt;
  opt.bootstrap = cfg.bootstrap;
  opt.alpha = cfg.alpha;
  opt.seed = cfg.seed;
  result.decisions = detection::decide(result.drift, model.config().classes, opt);
  detection::reject(result.drift, result.decisions);
  for (const auto& r : result.drift)
    result.predictions.push_back(r.verdict == detection::Verdict::unknown ? kUnknown
                                                                          : static_cast<std::int64_t>(r.assigned_class));
  result.model = std::move(model);
  return result;
}

AdaptationResult adapt(const data::Dataset& source, const data::Dataset& target, const TrainConfig& cfg) {
  std::vector<EpochLoss> trace;
  model::Model model = stage1_align(source, target, cfg, &trace);
  std::optional<Stage2Output> s2;
  if (cfg.mode == Mode::universal || cfg.correction) s2 = stage2_correct(target, model, cfg, &trace);
  AdaptationResult result = stage3_infer(target, std::move(model), s2, cfg);
  result.trace = std::move(trace);
  return result;
}

}  // namespace tsda::pipeline
