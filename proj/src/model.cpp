#include "tsda/model.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <random>
#include <sstream>
#include <stdexcept>

#include "tsda/spectral.hpp"

namespace tsda::model {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

namespace {

std::string block_name(std::size_t i, const char* leaf) { return "encoder.block" + std::to_string(i) + "." + leaf; }

std::size_t transpose_stride(const ModelConfig& c) {
  return (c.length + c.time_out_length - 1) / c.time_out_length;
}

std::size_t transpose_kernel(const ModelConfig& c) {
  return c.length - (c.time_out_length - 1) * transpose_stride(c);
}

std::vector<std::size_t> parse_sizes(const std::string& text) {
  std::vector<std::size_t> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (item.empty()) continue;
    out.push_back(static_cast<std::size_t>(std::stoull(item)));
  }
  return out;
}

}  // namespace

std::size_t ModelConfig::resolved_modes() const { return modes == 0 ? spectral::default_modes(length) : modes; }

std::size_t ModelConfig::frequency_dim() const { return frequency_branch ? 2 * channels * resolved_modes() : 0; }

std::size_t ModelConfig::time_dim() const { return time_channels.back() * time_out_length; }

void ModelConfig::validate() const {
  if (channels == 0) throw std::invalid_argument("model: channels must be >= 1");
  if (length < 4) throw std::invalid_argument("model: series length must be >= 4");
  if (classes < 1) throw std::invalid_argument("model: need at least one class");
  if (frequency_branch && resolved_modes() > spectral::one_sided_length(length))
    throw std::invalid_argument("model: " + std::to_string(resolved_modes()) + " modes exceed the " +
                                std::to_string(spectral::one_sided_length(length)) + " one-sided bins of length " +
                                std::to_string(length));
  if (time_channels.size() != 3) throw std::invalid_argument("model: the time encoder has exactly three blocks");
  std::size_t L = length;
  for (std::size_t b = 0; b < 3; ++b) {
    L = nn::conv_output_length(L, kernel, 1, kernel / 2) / pool;
    if (L == 0) throw std::invalid_argument("model: series too short for three pooled blocks");
  }
  if (time_out_length == 0 || time_out_length > L)
    throw std::invalid_argument("model: time_out_length must be in [1, " + std::to_string(L) + "]");
  if (transpose_kernel(*this) == 0) throw std::invalid_argument("model: time_out_length incompatible with length");
}

KeyValues ModelConfig::to_keyvalues() const {
  KeyValues kv;
  kv.set("channels", std::to_string(channels));
  kv.set("length", std::to_string(length));
  kv.set("modes", std::to_string(resolved_modes()));
  kv.set("classes", std::to_string(classes));
  kv.set("frequency_branch", frequency_branch ? "true" : "false");
  kv.set("time_channels", std::to_string(time_channels[0]) + "," + std::to_string(time_channels[1]) + "," +
                              std::to_string(time_channels[2]));
  kv.set("kernel", std::to_string(kernel));
  kv.set("pool", std::to_string(pool));
  kv.set("time_out_length", std::to_string(time_out_length));
  kv.set("random_spectral_init", random_spectral_init ? "true" : "false");
  return kv;
}

ModelConfig ModelConfig::from_keyvalues(const KeyValues& kv) {
  ModelConfig c;
  c.channels = static_cast<std::size_t>(kv.get_int("channels", 3));
  c.length = static_cast<std::size_t>(kv.get_int("length", 128));
  c.modes = static_cast<std::size_t>(kv.get_int("modes", 0));
  c.classes = static_cast<std::size_t>(kv.get_int("classes", 6));
  c.frequency_branch = kv.get_bool("frequency_branch", true);
  if (kv.contains("time_channels")) c.time_channels = parse_sizes(kv.get("time_channels"));
  c.kernel = static_cast<std::size_t>(kv.get_int("kernel", 5));
  c.pool = static_cast<std::size_t>(kv.get_int("pool", 2));
  c.time_out_length = static_cast<std::size_t>(kv.get_int("time_out_length", 1));
  c.random_spectral_init = kv.get_bool("random_spectral_init", true);
  return c;
}

Model::Model(const ModelConfig& config, std::uint64_t seed) : config_(config) {
  config_.validate();
  config_.modes = config_.resolved_modes();
  std::mt19937_64 rng(seed);
  const std::size_t d = config_.channels, M = config_.modes, K = config_.kernel;

  if (config_.frequency_branch) {
    if (config_.random_spectral_init) {
      params_.add("encoder.B_re", uniform_init({d, M}, 1, rng));
      params_.add("encoder.B_im", uniform_init({d, M}, 1, rng));
    } else {
      params_.add("encoder.B_re", Tensor({d, M}, 1.0));
      params_.add("encoder.B_im", Tensor({d, M}, 0.0));
    }
  }
  std::size_t in = d;
  for (std::size_t b = 0; b < 3; ++b) {
    const std::size_t out = config_.time_channels[b];
    params_.add(block_name(b, "kernels"), uniform_init({out, in, K}, in * K, rng));
    params_.add(block_name(b, "gamma"), Tensor({out}, 1.0));
    params_.add(block_name(b, "beta"), Tensor({out}, 0.0));
    norms_.emplace_back(out);
    in = out;
  }
  const std::size_t kt = transpose_kernel(config_);
  params_.add("decoder.weights", uniform_init({in, d, kt}, in * kt, rng));
  params_.add("decoder.bias", uniform_init({d}, in * kt, rng));
  params_.add("classifier.W", uniform_init({config_.classes, config_.latent_dim()}, config_.latent_dim(), rng));
}

Var Model::bound(Tape& tape, const std::string& name) { return tape.parameter(params_.get(name)); }

Encoded Model::encode(Tape& tape, const Tensor& x, bool training, bool update_running) {
  const auto& c = config_;
  if (x.rank() != 3 || x.dim(1) != c.channels || x.dim(2) != c.length)
    throw ShapeError("encode: expected [N x " + std::to_string(c.channels) + " x " + std::to_string(c.length) +
                     "], got " + shape_string(x.shape()));
  if (!x.all_finite()) throw std::invalid_argument("encode: input contains non-finite values");
  Encoded out;
  Var h = tape.constant(x);
  for (std::size_t b = 0; b < 3; ++b) {
    nn::BlockParams bp{bound(tape, block_name(b, "kernels")), bound(tape, block_name(b, "gamma")),
                       bound(tape, block_name(b, "beta"))};
    nn::BlockSpec spec{b == 0 ? c.channels : c.time_channels[b - 1], c.time_channels[b], c.kernel, 1, c.kernel / 2,
                       c.pool};
    if (update_running || !training) {
      h = nn::nn_block(h, bp, spec, norms_[b], training);
    } else {
      nn::BatchNormState scratch = norms_[b];
      h = nn::nn_block(h, bp, spec, scratch, training);
    }
  }
  out.e_t = nn::flatten(nn::adaptive_avg_pool1d(h, c.time_out_length));
  if (c.frequency_branch) {
    auto [re, im] = spectral::batch_spectrum(x, c.modes, true);
    auto [br, bi] = spectral::spectral_convolution(tape.constant(std::move(re)), tape.constant(std::move(im)),
                                                   bound(tape, "encoder.B_re"), bound(tape, "encoder.B_im"));
    out.e_f = spectral::polar_features(br, bi, c.length);
    out.z = nn::concat_columns(out.e_f, out.e_t);
    out.has_frequency = true;
  } else {
    out.z = out.e_t;
  }
  return out;
}

Var Model::decode(Tape& tape, const Encoded& enc) {
  const auto& c = config_;
  const std::size_t N = enc.e_t.value().dim(0);
  Var t = nn::reshape(enc.e_t, {N, c.time_channels.back(), c.time_out_length});
  Var x_time = nn::conv_transpose1d(t, bound(tape, "decoder.weights"), bound(tape, "decoder.bias"),
                                    transpose_stride(c), c.length);
  if (!enc.has_frequency) return x_time;
  Var x_freq = spectral::polar_to_series(enc.e_f, c.channels, c.modes, c.length);
  return nn::add(x_freq, x_time);
}

// A dead feature row (possible when every time channel is clipped and the
// frequency branch is off) scores zero against every prototype.
Var Model::logits(Tape& tape, Var z) {
  return nn::matmul_nt(nn::normalize_rows(z, true), bound(tape, "classifier.W"));
}

Tensor Model::embed(const Tensor& x) {
  Tape tape;
  return encode(tape, x, false).z.value();
}

Tensor Model::reconstruct(const Tensor& x) {
  Tape tape;
  Encoded enc = encode(tape, x, false);
  return decode(tape, enc).value();
}

std::vector<std::size_t> Model::predict(const Tensor& x) {
  Tape tape;
  const Tensor lg = logits(tape, encode(tape, x, false).z).value();
  std::vector<std::size_t> out(lg.dim(0));
  for (std::size_t n = 0; n < out.size(); ++n) {
    const double* row = &lg.at(n, 0);
    out[n] = static_cast<std::size_t>(std::max_element(row, row + lg.dim(1)) - row);
  }
  return out;
}

Var cross_entropy(Var logits, const std::vector<std::size_t>& labels) {
  Tape& tape = *logits.tape;
  const Tensor& lv = logits.value();
  if (lv.rank() != 2 || lv.dim(0) != labels.size() || labels.empty())
    throw ShapeError("cross_entropy: logits " + shape_string(lv.shape()) + " do not match " +
                     std::to_string(labels.size()) + " labels");
  const std::size_t N = lv.dim(0), C = lv.dim(1);
  Tensor probs({N, C});
  double total = 0.0;
  for (std::size_t n = 0; n < N; ++n) {
    if (labels[n] >= C)
      throw std::out_of_range("cross_entropy: label " + std::to_string(labels[n]) + " outside [0, " +
                              std::to_string(C) + ")");
    const double* row = &lv.at(n, 0);
    const double mx = *std::max_element(row, row + C);
    double s = 0.0;
    for (std::size_t c = 0; c < C; ++c) s += std::exp(row[c] - mx);
    const double lse = mx + std::log(s);
    for (std::size_t c = 0; c < C; ++c) probs.at(n, c) = std::exp(row[c] - lse);
    total += lse - row[labels[n]];
  }
  return tape.record(Tensor({1}, total / static_cast<double>(N)), tape.requires_grad(logits),
                     [logits, labels, probs](Tape& t, const Tensor& g) {
                       Tensor& gl = t.grad(logits);
                       const std::size_t N = probs.dim(0), C = probs.dim(1);
                       const double scale = g[0] / static_cast<double>(N);
                       for (std::size_t n = 0; n < N; ++n)
                         for (std::size_t c = 0; c < C; ++c)
                           gl.at(n, c) += scale * (probs.at(n, c) - (c == labels[n] ? 1.0 : 0.0));
                     });
}

double cross_entropy(const Tensor& logits, std::size_t label) {
  Tape tape;
  Var lg = tape.constant(logits.reshaped({1, logits.size()}));
  return cross_entropy(lg, {label}).value()[0];
}

Var reconstruction_loss(Var prediction, const Tensor& target) {
  Tape& tape = *prediction.tape;
  const Tensor& pv = prediction.value();
  if (pv.shape() != target.shape())
    throw ShapeError("reconstruction_loss: shapes " + shape_string(pv.shape()) + " and " +
                     shape_string(target.shape()) + " differ");
  if (pv.size() == 0) throw std::invalid_argument("reconstruction_loss: empty input");
  double s = 0.0;
  for (std::size_t i = 0; i < pv.size(); ++i) s += std::abs(pv[i] - target[i]);
  const double n = static_cast<double>(pv.size());
  return tape.record(Tensor({1}, s / n), tape.requires_grad(prediction), [prediction, target, n](Tape& t, const Tensor& g) {
    const Tensor& pv = t.value(prediction);
    Tensor& gp = t.grad(prediction);
    for (std::size_t i = 0; i < pv.size(); ++i) {
      const double d = pv[i] - target[i];
      gp[i] += g[0] * (d > 0.0 ? 1.0 : d < 0.0 ? -1.0 : 0.0) / n;
    }
  });
}

double reconstruction_loss(const Tensor& x, const Tensor& x_hat) {
  Tape tape;
  return reconstruction_loss(tape.constant(x_hat), x).value()[0];
}

Tensor classify(const Tensor& z, const Tensor& prototypes) {
  if (prototypes.rank() != 2 || prototypes.dim(1) != z.size())
    throw ShapeError("classify: prototypes " + shape_string(prototypes.shape()) + " do not match feature of size " +
                     std::to_string(z.size()));
  Tape tape;
  Var zn = nn::normalize_rows(tape.constant(z.reshaped({1, z.size()})));
  const Tensor lg = nn::matmul_nt(zn, tape.constant(prototypes)).value();
  return lg.reshaped({prototypes.dim(0)});
}

// Checkpoint container:
//   "TSDACKPT" | u32 version | u64 text length | config text | u32 tensor count |
//   per tensor: u32 name length | name | u32 rank | u64 dims... | f64 values...
namespace {

constexpr char kMagic[8] = {'T', 'S', 'D', 'A', 'C', 'K', 'P', 'T'};
constexpr std::uint32_t kVersion = 1;

template <typename T>
void put(std::ostream& out, T v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof v);
}

class Reader {
 public:
  Reader(std::istream& in, std::string path) : in_(in), path_(std::move(path)) {}

  template <typename T>
  T get(const char* what) {
    T v{};
    read(reinterpret_cast<char*>(&v), sizeof v, what);
    return v;
  }

  void read(char* dst, std::size_t n, const char* what) {
    const auto offset = static_cast<long long>(in_.tellg());
    if (!in_.read(dst, static_cast<std::streamsize>(n)))
      throw std::runtime_error(path_ + ": truncated checkpoint while reading " + what + " at offset " +
                               std::to_string(offset));
  }

 private:
  std::istream& in_;
  std::string path_;
};

}  // namespace

void save_checkpoint(const Model& model, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write checkpoint " + path);
  out.write(kMagic, sizeof kMagic);
  put<std::uint32_t>(out, kVersion);
  const std::string text = model.config().to_keyvalues().to_text();
  put<std::uint64_t>(out, text.size());
  out.write(text.data(), static_cast<std::streamsize>(text.size()));

  std::vector<std::pair<std::string, const Tensor*>> tensors;
  for (const auto& [name, p] : model.parameters()) tensors.emplace_back(name, &p.value);
  for (std::size_t b = 0; b < model.norm_states().size(); ++b) {
    tensors.emplace_back(block_name(b, "running_mean"), &model.norm_states()[b].running_mean);
    tensors.emplace_back(block_name(b, "running_var"), &model.norm_states()[b].running_var);
  }
  put<std::uint32_t>(out, static_cast<std::uint32_t>(tensors.size()));
  for (const auto& [name, t] : tensors) {
    put<std::uint32_t>(out, static_cast<std::uint32_t>(name.size()));
    out.write(name.data(), static_cast<std::streamsize>(name.size()));
    put<std::uint32_t>(out, static_cast<std::uint32_t>(t->rank()));
    for (std::size_t k = 0; k < t->rank(); ++k) put<std::uint64_t>(out, t->dim(k));
    out.write(reinterpret_cast<const char*>(t->data()), static_cast<std::streamsize>(t->size() * sizeof(double)));
  }
  if (!out) throw std::runtime_error("failed writing checkpoint " + path);
}

Model load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open checkpoint " + path);
  Reader r(in, path);
  char magic[8];
  r.read(magic, sizeof magic, "magic");
  if (std::memcmp(magic, kMagic, sizeof magic) != 0) throw std::runtime_error(path + ": not a checkpoint file");
  const auto version = r.get<std::uint32_t>("version");
  if (version != kVersion)
    throw std::runtime_error(path + ": unsupported checkpoint version " + std::to_string(version));
  const auto text_len = r.get<std::uint64_t>("config length");
  if (text_len > (1u << 20)) throw std::runtime_error(path + ": implausible config block length");
  std::string text(text_len, '\0');
  r.read(text.data(), text_len, "config text");
  Model model(ModelConfig::from_keyvalues(KeyValues::parse(text, path)), 0);

  const auto count = r.get<std::uint32_t>("tensor count");
  std::size_t seen = 0;
  for (std::uint32_t i = 0; i < count; ++i) {
    const auto name_len = r.get<std::uint32_t>("name length");
    if (name_len > 4096) throw std::runtime_error(path + ": implausible tensor name length");
    std::string name(name_len, '\0');
    r.read(name.data(), name_len, "tensor name");
    const auto rank = r.get<std::uint32_t>("rank");
    Shape shape(rank);
    for (auto& s : shape) s = static_cast<std::size_t>(r.get<std::uint64_t>("dimension"));
    Tensor* dst = nullptr;
    if (model.parameters().contains(name)) {
      dst = &model.parameters().get(name).value;
    } else {
      for (std::size_t b = 0; b < model.norm_states().size(); ++b) {
        if (name == block_name(b, "running_mean")) dst = &model.norm_states()[b].running_mean;
        if (name == block_name(b, "running_var")) dst = &model.norm_states()[b].running_var;
      }
    }
    if (!dst) throw std::runtime_error(path + ": unexpected tensor '" + name + "'");
    if (dst->shape() != shape)
      throw std::runtime_error(path + ": tensor '" + name + "' has shape " + shape_string(shape) + ", expected " +
                               shape_string(dst->shape()));
    r.read(reinterpret_cast<char*>(dst->data()), dst->size() * sizeof(double), name.c_str());
    ++seen;
  }
  const std::size_t expected = model.parameters().size() + 2 * model.norm_states().size();
  if (seen != expected)
    throw std::runtime_error(path + ": checkpoint holds " + std::to_string(seen) + " tensors, expected " +
                             std::to_string(expected));
  return model;
}

}  // namespace tsda::model
