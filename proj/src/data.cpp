#include "tsda/data.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numbers>
#include <numeric>
#include <random>
#include <sstream>
#include <stdexcept>

#include <spdlog/spdlog.h>

namespace tsda::data {

static_assert(std::endian::native == std::endian::little, "dataset I/O assumes a little-endian host");

Tensor Dataset::batch(const std::vector<std::size_t>& indices) const {
  const std::size_t stride = channels * length;
  Tensor out({indices.size(), channels, length});
  for (std::size_t k = 0; k < indices.size(); ++k) {
    if (indices[k] >= size()) throw std::out_of_range("batch: index " + std::to_string(indices[k]) + " out of range");
    std::copy_n(values.data() + indices[k] * stride, stride, out.data() + k * stride);
  }
  return out;
}

std::vector<std::size_t> Dataset::label_batch(const std::vector<std::size_t>& indices) const {
  if (!has_labels()) throw std::logic_error("label_batch: dataset '" + domain + "' has no labels");
  std::vector<std::size_t> out;
  out.reserve(indices.size());
  for (auto i : indices) out.push_back(labels.at(i));
  return out;
}

Dataset Dataset::subset(const std::vector<std::size_t>& indices) const {
  Dataset out{domain, channels, length, classes, batch(indices), {}};
  if (has_labels()) out.labels = label_batch(indices);
  return out;
}

std::set<std::size_t> Dataset::label_inventory() const { return {labels.begin(), labels.end()}; }

void Dataset::validate() const {
  if (values.rank() != 3 || values.dim(1) != channels || values.dim(2) != length)
    throw std::invalid_argument("dataset '" + domain + "': values " + shape_string(values.shape()) +
                                " do not match d=" + std::to_string(channels) + ", T=" + std::to_string(length));
  if (has_labels()) {
    if (labels.size() != size())
      throw std::invalid_argument("dataset '" + domain + "': " + std::to_string(labels.size()) + " labels for " +
                                  std::to_string(size()) + " samples");
    for (auto l : labels)
      if (l >= classes)
        throw std::invalid_argument("dataset '" + domain + "': label " + std::to_string(l) + " outside [0, " +
                                    std::to_string(classes) + ")");
  }
  if (!values.all_finite()) throw std::invalid_argument("dataset '" + domain + "': non-finite values");
}

void SyntheticSpec::validate() const {
  if (channels == 0 || length < 4) throw std::invalid_argument("synthetic: need channels >= 1 and length >= 4");
  if (recipes.empty()) throw std::invalid_argument("synthetic: no class recipes");
  const double nyquist = static_cast<double>(length / 2 + 1);
  for (std::size_t c = 0; c < recipes.size(); ++c)
    for (const auto& m : recipes[c])
      if (m.mode < 0.0 || m.mode >= nyquist)
        throw std::invalid_argument("synthetic: class " + std::to_string(c) + " mode " + std::to_string(m.mode) +
                                    " outside [0, " + std::to_string(length / 2 + 1) + ")");
  if (!proportions.empty()) {
    if (proportions.size() != recipes.size())
      throw std::invalid_argument("synthetic: " + std::to_string(proportions.size()) + " proportions for " +
                                  std::to_string(recipes.size()) + " classes");
    double s = 0.0;
    for (double p : proportions) {
      if (p < 0.0) throw std::invalid_argument("synthetic: negative class proportion");
      s += p;
    }
    if (std::abs(s - 1.0) > 1e-6)
      throw std::invalid_argument("synthetic: proportions sum to " + std::to_string(s) + ", expected 1");
  }
  for (auto c : excluded_classes)
    if (c >= recipes.size()) throw std::invalid_argument("synthetic: excluded class " + std::to_string(c) + " unknown");
  if (excluded_classes.size() >= recipes.size()) throw std::invalid_argument("synthetic: every class excluded");
  if (noise < 0.0) throw std::invalid_argument("synthetic: noise must be >= 0");
}

std::vector<std::vector<ModeComponent>> default_recipes(std::size_t classes) {
  std::vector<std::vector<ModeComponent>> out(classes);
  for (std::size_t c = 0; c < classes; ++c) {
    const double f = 2.0 + 3.0 * static_cast<double>(c);
    out[c] = {{f, 1.0, 0.0}, {f + 2.0, 0.5, 0.0}};
  }
  return out;
}

namespace {

std::vector<std::size_t> class_counts(const SyntheticSpec& spec) {
  const std::size_t C = spec.recipes.size();
  std::vector<double> p = spec.proportions.empty() ? std::vector<double>(C, 1.0) : spec.proportions;
  for (auto c : spec.excluded_classes) p[c] = 0.0;
  const double total = std::accumulate(p.begin(), p.end(), 0.0);
  if (!(total > 0.0)) throw std::invalid_argument("synthetic: proportions of the included classes are all zero");
  std::vector<std::size_t> counts(C);
  std::vector<std::pair<double, std::size_t>> remainders;
  std::size_t used = 0;
  for (std::size_t c = 0; c < C; ++c) {
    const double exact = p[c] / total * static_cast<double>(spec.samples);
    counts[c] = static_cast<std::size_t>(std::floor(exact));
    used += counts[c];
    if (p[c] > 0.0) remainders.emplace_back(exact - std::floor(exact), c);
  }
  std::stable_sort(remainders.begin(), remainders.end(), [](auto& a, auto& b) { return a.first > b.first; });
  for (std::size_t k = 0; used < spec.samples; ++k, ++used) ++counts[remainders[k % remainders.size()].second];
  return counts;
}

}  // namespace

Dataset generate(const SyntheticSpec& spec) {
  spec.validate();
  constexpr double kTwoPi = 2.0 * std::numbers::pi;
  const std::size_t d = spec.channels, T = spec.length;
  const auto counts = class_counts(spec);
  std::vector<std::size_t> labels;
  for (std::size_t c = 0; c < counts.size(); ++c) labels.insert(labels.end(), counts[c], c);

  std::mt19937_64 rng(spec.seed);
  std::shuffle(labels.begin(), labels.end(), rng);
  std::normal_distribution<double> normal(0.0, 1.0);
  std::uniform_real_distribution<double> unit(-1.0, 1.0);
  const auto& tf = spec.transform;
  const double band_lo = tf.interference_min_mode > 0.0 ? tf.interference_min_mode : static_cast<double>(T) / 4.0;
  const double band_hi = static_cast<double>(T / 2);

  Dataset ds{spec.domain, d, T, spec.recipes.size(), Tensor({labels.size(), d, T}), labels};
  for (std::size_t n = 0; n < labels.size(); ++n) {
    const auto& recipe = spec.recipes[labels[n]];
    for (std::size_t ch = 0; ch < d; ++ch) {
      double* row = &ds.values.at(n, ch, 0);
      for (const auto& comp : recipe) {
        const double phase = comp.phase + spec.channel_phase * static_cast<double>(ch) + tf.phase_jitter * unit(rng);
        const double w = kTwoPi * (comp.mode + tf.frequency_detune) / static_cast<double>(T);
        for (std::size_t t = 0; t < T; ++t)
          row[t] += tf.time_scale * comp.amplitude * std::cos(w * (static_cast<double>(t) - tf.time_offset) + phase);
      }
      if (tf.interference > 0.0 && band_hi > band_lo) {
        for (int k = 0; k < 2; ++k) {
          const double mode = band_lo + (band_hi - band_lo) * 0.5 * (unit(rng) + 1.0);
          const double phase = std::numbers::pi * unit(rng);
          const double w = kTwoPi * mode / static_cast<double>(T);
          for (std::size_t t = 0; t < T; ++t) row[t] += tf.interference * std::cos(w * static_cast<double>(t) + phase);
        }
      }
      for (std::size_t t = 0; t < T; ++t) {
        row[t] += spec.noise * normal(rng);
        row[t] = static_cast<double>(static_cast<float>(row[t]));
      }
    }
  }
  return ds;
}

namespace {

std::vector<ModeComponent> parse_recipe(const std::string& text, const std::string& key) {
  std::vector<ModeComponent> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (item.find_first_not_of(" \t") == std::string::npos) continue;
    ModeComponent m;
    char c1 = 0, c2 = 0;
    std::istringstream is(item);
    if (!(is >> m.mode >> c1 >> m.amplitude) || c1 != ':')
      throw std::runtime_error("config key '" + key + "': expected mode:amplitude[:phase], got '" + item + "'");
    if (is >> c2) {
      if (c2 != ':' || !(is >> m.phase))
        throw std::runtime_error("config key '" + key + "': expected mode:amplitude[:phase], got '" + item + "'");
    }
    out.push_back(m);
  }
  return out;
}

std::vector<std::size_t> to_indices(const std::vector<double>& v, const std::string& key) {
  std::vector<std::size_t> out;
  for (double x : v) {
    if (x < 0.0 || x != std::floor(x)) throw std::runtime_error("config key '" + key + "': expected class indices");
    out.push_back(static_cast<std::size_t>(x));
  }
  return out;
}

}  // namespace

std::pair<SyntheticSpec, SyntheticSpec> pair_specs(const KeyValues& kv) {
  SyntheticSpec base;
  base.channels = static_cast<std::size_t>(kv.get_int("channels", 3));
  base.length = static_cast<std::size_t>(kv.get_int("length", 128));
  base.samples = static_cast<std::size_t>(kv.get_int("samples", 200));
  base.noise = kv.get_double("noise", 0.1);
  base.channel_phase = kv.get_double("channel_phase", 0.7);
  const auto classes = static_cast<std::size_t>(kv.get_int("classes", 6));
  base.recipes = default_recipes(classes);
  for (std::size_t c = 0; c < classes; ++c) {
    const std::string key = "class." + std::to_string(c);
    if (kv.contains(key)) base.recipes[c] = parse_recipe(kv.get(key), key);
  }
  base.proportions = kv.get_doubles("proportions", {});
  const auto seed = static_cast<std::uint64_t>(kv.get_int("seed", 0));

  auto domain = [&](const std::string& name, std::uint64_t s, const std::string& other) {
    SyntheticSpec spec = base;
    spec.domain = name;
    spec.seed = s;
    const std::string p = name + ".";
    spec.samples = static_cast<std::size_t>(kv.get_int(p + "samples", static_cast<std::int64_t>(base.samples)));
    spec.noise = kv.get_double(p + "noise", base.noise);
    spec.proportions = kv.get_doubles(p + "proportions", base.proportions);
    auto& tf = spec.transform;
    tf.time_scale = kv.get_double(p + "time_scale", 1.0);
    tf.time_offset = kv.get_double(p + "time_offset", 0.0);
    tf.phase_jitter = kv.get_double(p + "phase_jitter", kv.get_double("phase_jitter", 0.0));
    tf.frequency_detune = kv.get_double(p + "frequency_detune", 0.0);
    tf.interference = kv.get_double(p + "interference", 0.0);
    tf.interference_min_mode = kv.get_double(p + "interference_min_mode", 0.0);
    spec.excluded_classes = to_indices(kv.get_doubles(other + ".private", {}), other + ".private");
    return spec;
  };
  // Distinct streams per domain; the constant is the 64-bit golden ratio.
  auto src = domain("source", seed, "target");
  auto tgt = domain("target", seed ^ 0x9e3779b97f4a7c15ULL, "source");
  src.validate();
  tgt.validate();
  return {src, tgt};
}

Tensor window(const Tensor& series, std::size_t length, std::size_t stride) {
  if (length == 0) throw std::invalid_argument("window: length must be >= 1");
  if (stride == 0) throw std::invalid_argument("window: stride must be >= 1");
  Tensor x = series.rank() == 1 ? series.reshaped({1, series.size()}) : series;
  if (x.rank() != 2) throw ShapeError("window: expected [L] or [d x L], got " + shape_string(series.shape()));
  const std::size_t d = x.dim(0), L = x.dim(1);
  if (length > L)
    throw std::invalid_argument("window: length " + std::to_string(length) + " exceeds series length " +
                                std::to_string(L));
  const std::size_t k = (L - length) / stride + 1;
  Tensor out({k, d, length});
  for (std::size_t i = 0; i < k; ++i)
    for (std::size_t c = 0; c < d; ++c) std::copy_n(&x.at(c, i * stride), length, &out.at(i, c, 0));
  return out;
}

// Dataset container:
//   "TSDA" | u8 version | u32 n | u32 d | u32 T | u8 has_labels | u16 C |
//   n*d*T f32 values | n u16 labels (when present)
namespace {

constexpr char kMagic[4] = {'T', 'S', 'D', 'A'};
constexpr std::uint8_t kVersion = 1;

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
      throw std::runtime_error(path_ + ": truncated file while reading " + what + " at offset " +
                               std::to_string(offset));
  }

 private:
  std::istream& in_;
  std::string path_;
};

}  // namespace

void save(const Dataset& ds, const std::string& path) {
  ds.validate();
  if (ds.size() > UINT32_MAX || ds.channels > UINT32_MAX || ds.length > UINT32_MAX || ds.classes > UINT16_MAX)
    throw std::invalid_argument("save: dataset too large for the file format");
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write dataset " + path);
  out.write(kMagic, sizeof kMagic);
  put<std::uint8_t>(out, kVersion);
  put<std::uint32_t>(out, static_cast<std::uint32_t>(ds.size()));
  put<std::uint32_t>(out, static_cast<std::uint32_t>(ds.channels));
  put<std::uint32_t>(out, static_cast<std::uint32_t>(ds.length));
  put<std::uint8_t>(out, ds.has_labels() ? 1 : 0);
  put<std::uint16_t>(out, static_cast<std::uint16_t>(ds.classes));
  std::vector<float> buf(ds.values.size());
  std::transform(ds.values.values().begin(), ds.values.values().end(), buf.begin(),
                 [](double v) { return static_cast<float>(v); });
  out.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size() * sizeof(float)));
  for (auto l : ds.labels) put<std::uint16_t>(out, static_cast<std::uint16_t>(l));
  if (!out) throw std::runtime_error("failed writing dataset " + path);
}

Dataset load(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open dataset " + path);
  Reader r(in, path);
  char magic[4];
  r.read(magic, sizeof magic, "magic");
  if (std::memcmp(magic, kMagic, sizeof magic) != 0) throw std::runtime_error(path + ": bad magic, not a dataset file");
  const auto version = r.get<std::uint8_t>("version");
  if (version != kVersion) throw std::runtime_error(path + ": unsupported format version " + std::to_string(version));
  Dataset ds;
  ds.domain = path;
  const auto n = r.get<std::uint32_t>("sample count");
  ds.channels = r.get<std::uint32_t>("channel count");
  ds.length = r.get<std::uint32_t>("length");
  const auto has_labels = r.get<std::uint8_t>("label flag");
  ds.classes = r.get<std::uint16_t>("class count");
  if (has_labels > 1) throw std::runtime_error(path + ": corrupt label flag");
  const std::size_t count = static_cast<std::size_t>(n) * ds.channels * ds.length;
  std::vector<float> buf(count);
  r.read(reinterpret_cast<char*>(buf.data()), count * sizeof(float), "values");
  ds.values = Tensor({n, ds.channels, ds.length});
  std::copy(buf.begin(), buf.end(), ds.values.values().begin());
  if (has_labels) {
    ds.labels.resize(n);
    for (auto& l : ds.labels) l = r.get<std::uint16_t>("labels");
  }
  ds.validate();
  return ds;
}

Dataset load_text(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path);
  std::size_t d = 1, T = 0;
  std::vector<std::vector<double>> rows;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    if (line[0] == '#') {
      if (rows.empty()) {
        // "# channels=3 length=128"
        std::istringstream is(line.substr(1));
        std::string tok;
        while (is >> tok) {
          const auto eq = tok.find('=');
          if (eq == std::string::npos) continue;
          const std::string key = tok.substr(0, eq), value = tok.substr(eq + 1);
          try {
            if (key == "channels") d = std::stoul(value);
            if (key == "length") T = std::stoul(value);
          } catch (const std::exception&) {
            throw std::runtime_error(path + ":" + std::to_string(lineno) + ": bad header value '" + tok + "'");
          }
        }
      }
      continue;
    }
    for (char& ch : line)
      if (ch == ',' || ch == '\t' || ch == ';' || ch == '\r') ch = ' ';
    std::istringstream is(line);
    std::vector<double> row;
    std::string tok;
    while (is >> tok) {
      try {
        std::size_t used = 0;
        row.push_back(std::stod(tok, &used));
        if (used != tok.size()) throw std::invalid_argument(tok);
      } catch (const std::exception&) {
        throw std::runtime_error(path + ":" + std::to_string(lineno) + ": '" + tok + "' is not a number");
      }
    }
    rows.push_back(std::move(row));
  }
  if (rows.empty()) throw std::runtime_error(path + ": no samples");
  if (d == 0) throw std::runtime_error(path + ": channels must be >= 1");
  if (T == 0) {
    if (rows.front().size() % d != 0)
      throw std::runtime_error(path + ": row of " + std::to_string(rows.front().size()) +
                               " values does not split into " + std::to_string(d) + " channels");
    T = rows.front().size() / d;
  }
  const std::size_t width = d * T;
  const bool labelled = rows.front().size() == width + 1;
  Dataset ds;
  ds.domain = path;
  ds.channels = d;
  ds.length = T;
  ds.values = Tensor({rows.size(), d, T});
  for (std::size_t n = 0; n < rows.size(); ++n) {
    const auto& row = rows[n];
    if (row.size() != width + (labelled ? 1 : 0))
      throw std::runtime_error(path + ": sample " + std::to_string(n) + " has " + std::to_string(row.size()) +
                               " columns, expected " + std::to_string(width + (labelled ? 1 : 0)));
    std::copy_n(row.begin(), width, ds.values.data() + n * width);
    if (labelled) {
      const double l = row.back();
      if (l < 0.0 || l != std::floor(l))
        throw std::runtime_error(path + ": sample " + std::to_string(n) + " has a non-integer label");
      ds.labels.push_back(static_cast<std::size_t>(l));
      ds.classes = std::max(ds.classes, ds.labels.back() + 1);
    }
  }
  ds.validate();
  return ds;
}

Dataset load_any(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open dataset " + path);
  char magic[4] = {};
  in.read(magic, sizeof magic);
  if (in.gcount() == sizeof magic && std::memcmp(magic, kMagic, sizeof magic) == 0) return load(path);
  return load_text(path);
}

std::pair<Dataset, Dataset> split(const Dataset& ds, double fraction, std::uint64_t seed) {
  if (!(fraction > 0.0 && fraction < 1.0)) throw std::invalid_argument("split: fraction must be in (0, 1)");
  std::mt19937_64 rng(seed);
  std::vector<std::vector<std::size_t>> groups;
  if (ds.has_labels()) {
    groups.resize(ds.classes);
    for (std::size_t i = 0; i < ds.size(); ++i) groups[ds.labels[i]].push_back(i);
  } else {
    groups.emplace_back(ds.size());
    std::iota(groups[0].begin(), groups[0].end(), 0);
  }
  std::vector<std::size_t> first, second;
  for (std::size_t g = 0; g < groups.size(); ++g) {
    auto& idx = groups[g];
    if (idx.empty()) continue;
    if (ds.has_labels() && idx.size() == 1) {
      spdlog::warn("split: class {} has a single sample; it goes to the first part", g);
      first.push_back(idx[0]);
      continue;
    }
    std::shuffle(idx.begin(), idx.end(), rng);
    const auto k = static_cast<std::size_t>(std::llround(fraction * static_cast<double>(idx.size())));
    first.insert(first.end(), idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(k));
    second.insert(second.end(), idx.begin() + static_cast<std::ptrdiff_t>(k), idx.end());
  }
  std::sort(first.begin(), first.end());
  std::sort(second.begin(), second.end());
  return {ds.subset(first), ds.subset(second)};
}

}  // namespace tsda::data
