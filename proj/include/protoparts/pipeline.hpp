#ifndef PROTOPARTS_PIPELINE_HPP_
#define PROTOPARTS_PIPELINE_HPP_

#include <algorithm>
#include <array>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <limits>
#include <numeric>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <type_traits>
#include <utility>
#include <vector>

#include "protoparts/binary_io.hpp"
#include "protoparts/classifier_head.hpp"
#include "protoparts/core_types.hpp"
#include "protoparts/feature_io.hpp"
#include "protoparts/metrics.hpp"
#include "protoparts/ot_assignment.hpp"
#include "protoparts/prototype_learner.hpp"
#include "protoparts/synth.hpp"

namespace protoparts {

// ---------------------------------------------------------------------------
// Run configuration

/// Every tunable of a run as one flat record. Each field has a key in the
/// config file and a matching command-line flag (underscores become dashes).
struct RunConfig {
  std::string train, test, bundle, out, ids;
  std::size_t k = 5;
  std::size_t classes = 0, dim = 0;  // 0 = take from the data

  double beta = 0.99;
  int stage1_epochs = 1;
  std::size_t stage1_batch = 128;
  ForegroundMethod fg = ForegroundMethod::PcaThreshold;

  double kappa = 0.05;
  int sinkhorn_iters = 100;
  double sinkhorn_tol = 1e-6;

  double lambda_ppc = 0.8;
  int stage2_epochs = 5;
  double lr_adapter = 1e-4;
  double lr_w = 1e-6;
  std::size_t stage2_batch = 128;
  double w_init = 0.2;

  double box_frac = 0.25;
  double tau = 0.5;
  std::size_t top_k = 0;  // explain: 0 = all K prototypes
  std::uint64_t seed = 0;

  bool no_constraints = false;
  bool no_foreground = false;
  bool no_finetune = false;
  bool no_ppc = false;

  SynthParams synth;

  bool operator==(const RunConfig& o) const;

  /// Settings the synthetic benchmark is calibrated with: a faster momentum
  /// and small batches so one epoch over 250 images converges, and a larger
  /// stage-2 step than the full-size defaults.
  static RunConfig synthetic_benchmark() {
    RunConfig c;
    c.k = 3;
    c.beta = 0.7;
    c.stage1_batch = 16;
    c.stage2_epochs = 60;
    c.lr_adapter = 2.0;
    c.lr_w = 2.0;
    c.stage2_batch = 25;
    return c;
  }

  SinkhornConfig sinkhorn() const { return {kappa, sinkhorn_iters, sinkhorn_tol}; }
  ForegroundMethod foreground() const { return no_foreground ? ForegroundMethod::None : fg; }
  Stage1Config stage1() const;
  Stage2Config stage2() const;
  void validate() const;
};

enum class SeedStream : std::uint64_t { Synth = 1, Init = 2, Stage1 = 3, Stage2 = 4 };

/// Independent seed per consumer so that the data generator, the prototype
/// initializer and the shufflers never share a random stream.
inline std::uint64_t stream_seed(std::uint64_t seed, SeedStream stream) {
  std::uint64_t z = seed + 0x9E3779B97F4A7C15ull * (static_cast<std::uint64_t>(stream) + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
  return z ^ (z >> 31);
}

inline Stage1Config RunConfig::stage1() const {
  Stage1Config s;
  s.beta = beta;
  s.epochs = stage1_epochs;
  s.batch_size = stage1_batch;
  s.seed = stream_seed(seed, SeedStream::Stage1);
  s.fg_method = foreground();
  s.equipartition = !no_constraints;
  return s;
}

inline Stage2Config RunConfig::stage2() const {
  Stage2Config s;
  s.lambda_ppc = no_ppc ? 0.0 : lambda_ppc;
  s.epochs = stage2_epochs;
  s.lr_adapter = lr_adapter;
  s.lr_w = lr_w;
  s.batch_size = stage2_batch;
  s.seed = stream_seed(seed, SeedStream::Stage2);
  s.fg_method = foreground();
  s.equipartition = !no_constraints;
  s.sinkhorn = sinkhorn();
  return s;
}

inline void RunConfig::validate() const {
  if (k < 1) throw Error(ErrorCode::InvalidParams, "k must be >= 1");
  if (!(w_init > 0.0)) throw Error(ErrorCode::InvalidParams, "w_init must be > 0");
  if (!(box_frac > 0.0 && box_frac <= 1.0)) throw Error(ErrorCode::InvalidParams, "box_frac must lie in (0, 1]");
  validate_tau(tau);
  stage1().validate();
  stage2().validate();
}

namespace detail {

inline std::string format_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

inline std::string format_value(const std::string& v) { return v; }
inline std::string format_value(bool v) { return v ? "true" : "false"; }
inline std::string format_value(double v) { return format_double(v); }
inline std::string format_value(ForegroundMethod v) { return to_string(v); }
template <typename I>
  requires std::is_integral_v<I>
inline std::string format_value(I v) {
  return std::to_string(v);
}

inline void parse_value(const std::string& key, const std::string& s, std::string& out) {
  (void)key;
  out = s;
}

inline void parse_value(const std::string& key, const std::string& s, bool& out) {
  if (s == "true" || s == "1" || s == "yes" || s == "on") {
    out = true;
  } else if (s == "false" || s == "0" || s == "no" || s == "off") {
    out = false;
  } else {
    throw Error(ErrorCode::ConfigError, key + ": expected a boolean, got '" + s + "'");
  }
}

inline void parse_value(const std::string& key, const std::string& s, double& out) {
  const auto r = std::from_chars(s.data(), s.data() + s.size(), out);
  if (s.empty() || r.ec != std::errc() || r.ptr != s.data() + s.size()) {
    throw Error(ErrorCode::ConfigError, key + ": expected a number, got '" + s + "'");
  }
}

inline void parse_value(const std::string& key, const std::string& s, ForegroundMethod& out) {
  try {
    out = parse_foreground_method(s);
  } catch (const Error& e) {
    throw Error(ErrorCode::ConfigError, key + ": " + e.what());
  }
}

template <typename I>
  requires std::is_integral_v<I>
inline void parse_value(const std::string& key, const std::string& s, I& out) {
  const auto r = std::from_chars(s.data(), s.data() + s.size(), out);
  if (s.empty() || r.ec != std::errc() || r.ptr != s.data() + s.size()) {
    throw Error(ErrorCode::ConfigError, key + ": expected an integer, got '" + s + "'");
  }
}

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  return s.substr(b, s.find_last_not_of(" \t\r") - b + 1);
}

}  // namespace detail

struct ConfigField {
  std::string key;
  std::string help;
  bool is_flag = false;  // boolean: given on the command line without a value
  std::function<std::string(const RunConfig&)> get;
  std::function<void(RunConfig&, const std::string&)> set;
};

/// The key table, in the order keys are written back out.
inline const std::vector<ConfigField>& config_fields() {
  static const std::vector<ConfigField> fields = [] {
    std::vector<ConfigField> f;
    auto add = [&](std::string key, std::string help, auto access) {
      using V = std::remove_reference_t<decltype(access(std::declval<RunConfig&>()))>;
      ConfigField field;
      field.key = key;
      field.help = std::move(help);
      field.is_flag = std::is_same_v<V, bool>;
      field.get = [access](const RunConfig& c) { return detail::format_value(access(const_cast<RunConfig&>(c))); };
      field.set = [access, key](RunConfig& c, const std::string& s) { detail::parse_value(key, s, access(c)); };
      f.push_back(std::move(field));
    };
#define PROTOPARTS_FIELD(name, help) add(#name, help, [](RunConfig& c) -> auto& { return c.name; })
#define PROTOPARTS_SYNTH(name, help) add("synth_" #name, help, [](RunConfig& c) -> auto& { return c.synth.name; })
    PROTOPARTS_FIELD(train, "training PTFD file");
    PROTOPARTS_FIELD(test, "test PTFD file");
    PROTOPARTS_FIELD(bundle, "input model bundle");
    PROTOPARTS_FIELD(out, "output file or directory");
    PROTOPARTS_FIELD(ids, "comma-separated image ids to explain (empty = all)");
    PROTOPARTS_FIELD(k, "prototypes per class");
    PROTOPARTS_FIELD(classes, "expected class count (0 = from data)");
    PROTOPARTS_FIELD(dim, "expected feature dimension (0 = from data)");
    PROTOPARTS_FIELD(beta, "stage-1 momentum on the old prototype");
    PROTOPARTS_FIELD(stage1_epochs, "stage-1 epochs");
    PROTOPARTS_FIELD(stage1_batch, "stage-1 images per batch");
    PROTOPARTS_FIELD(fg, "foreground method: pca, gt or none");
    PROTOPARTS_FIELD(kappa, "entropic regularization of the assignment");
    PROTOPARTS_FIELD(sinkhorn_iters, "maximum scaling iterations");
    PROTOPARTS_FIELD(sinkhorn_tol, "marginal residual tolerance");
    PROTOPARTS_FIELD(lambda_ppc, "weight of the patch-prototype contrastive loss");
    PROTOPARTS_FIELD(stage2_epochs, "stage-2 epochs");
    PROTOPARTS_FIELD(lr_adapter, "stage-2 learning rate of the feature adapter");
    PROTOPARTS_FIELD(lr_w, "stage-2 learning rate of the prototype weights");
    PROTOPARTS_FIELD(stage2_batch, "stage-2 images per batch");
    PROTOPARTS_FIELD(w_init, "initial prototype weight");
    PROTOPARTS_FIELD(box_frac, "box side as a fraction of the image side");
    PROTOPARTS_FIELD(tau, "mask threshold for comprehensiveness");
    PROTOPARTS_FIELD(top_k, "heatmaps per explained image (0 = K)");
    PROTOPARTS_FIELD(seed, "master random seed");
    PROTOPARTS_FIELD(no_constraints, "greedy assignment instead of balanced transport");
    PROTOPARTS_FIELD(no_foreground, "use every token as foreground");
    PROTOPARTS_FIELD(no_finetune, "skip stage 2");
    PROTOPARTS_FIELD(no_ppc, "drop the contrastive loss from stage 2");
    PROTOPARTS_SYNTH(classes, "synthetic classes");
    PROTOPARTS_SYNTH(parts, "synthetic parts per class");
    PROTOPARTS_SYNTH(dim, "synthetic feature dimension");
    PROTOPARTS_SYNTH(grid, "synthetic token grid side");
    PROTOPARTS_SYNTH(image, "synthetic image side in pixels");
    PROTOPARTS_SYNTH(train_per_class, "synthetic training images per class");
    PROTOPARTS_SYNTH(test_per_class, "synthetic test images per class");
    PROTOPARTS_SYNTH(sigma, "synthetic token noise");
    PROTOPARTS_SYNTH(decoy_rate, "fraction of synthetic images with a decoy");
    PROTOPARTS_SYNTH(decoy_tag, "background component of decoy tokens");
    PROTOPARTS_SYNTH(decoy_noise, "noise on decoy tokens");
    PROTOPARTS_SYNTH(strict_orthogonal, "require orthogonal part centers");
#undef PROTOPARTS_SYNTH
#undef PROTOPARTS_FIELD
    return f;
  }();
  return fields;
}

inline const ConfigField& config_field(const std::string& key) {
  for (const auto& f : config_fields())
    if (f.key == key) return f;
  throw Error(ErrorCode::ConfigError, "unknown config key '" + key + "'");
}

inline bool RunConfig::operator==(const RunConfig& o) const {
  for (const auto& f : config_fields())
    if (f.get(*this) != f.get(o)) return false;
  return true;
}

/// Applies `key = value` lines onto `cfg`. Blank lines and lines starting
/// with '#' are ignored; a key may appear once.
inline void apply_config_text(RunConfig& cfg, const std::string& text) {
  std::istringstream in(text);
  std::string line;
  std::set<std::string> seen;
  for (int n = 1; std::getline(in, line); ++n) {
    const std::string t = detail::trim(line);
    if (t.empty() || t[0] == '#') continue;
    const auto eq = t.find('=');
    if (eq == std::string::npos) {
      throw Error(ErrorCode::ConfigError, "line " + std::to_string(n) + ": expected key = value");
    }
    const std::string key = detail::trim(t.substr(0, eq));
    if (!seen.insert(key).second) throw Error(ErrorCode::ConfigError, "duplicate key '" + key + "'");
    config_field(key).set(cfg, detail::trim(t.substr(eq + 1)));
  }
}

inline RunConfig parse_config_text(const std::string& text, RunConfig base = {}) {
  apply_config_text(base, text);
  return base;
}

inline RunConfig load_config(const std::filesystem::path& path, RunConfig base = {}) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::ConfigError, "cannot read config '" + path.string() + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse_config_text(ss.str(), std::move(base));
}

inline std::string config_to_text(const RunConfig& cfg) {
  std::string out;
  for (const auto& f : config_fields()) out += f.key + " = " + f.get(cfg) + "\n";
  return out;
}

// ---------------------------------------------------------------------------
// Model bundle
//
//   "PTMB", u32 version = 1, u32 C, K, D,
//   f64 prototypes [C, K, D], f64 weights [C, K], f64 adapter [D, D],
//   u32 byte length + UTF-8 config snapshot.
// Little-endian throughout; nothing may follow the snapshot.

inline constexpr std::array<char, 4> kBundleMagic = {'P', 'T', 'M', 'B'};
inline constexpr std::uint32_t kBundleVersion = 1;

struct ModelBundle {
  PrototypeBank bank;
  ClassifierHead head;
  std::string config;

  bool operator==(const ModelBundle&) const = default;
};

inline std::vector<std::uint8_t> encode_bundle(const ModelBundle& m) {
  const std::size_t c = m.bank.num_classes(), k = m.bank.per_class(), d = m.bank.feature_dim();
  if (m.head.w.shape() != std::vector<std::size_t>{c, k} || m.head.adapter.shape() != std::vector<std::size_t>{d, d}) {
    throw Error(ErrorCode::DimMismatch, "head does not match the prototype bank");
  }
  binary::Writer out;
  out.bytes(kBundleMagic.data(), kBundleMagic.size());
  out.u32(kBundleVersion);
  for (std::size_t v : {c, k, d}) out.u32(static_cast<std::uint32_t>(v));
  for (double v : m.bank.prototypes.values()) out.f64(v);
  for (double v : m.head.w.values()) out.f64(v);
  for (double v : m.head.adapter.values()) out.f64(v);
  out.u32(static_cast<std::uint32_t>(m.config.size()));
  out.bytes(m.config.data(), m.config.size());
  return out.buffer();
}

inline ModelBundle decode_bundle(std::vector<std::uint8_t> bytes) {
  binary::Reader in(std::move(bytes));
  const std::uint8_t* magic = in.take(4);
  if (!std::equal(kBundleMagic.begin(), kBundleMagic.end(), magic)) throw Error(ErrorCode::BadMagic, "not a model bundle");
  const std::uint32_t version = in.u32();
  if (version != kBundleVersion) throw Error(ErrorCode::UnsupportedVersion, "bundle version " + std::to_string(version));
  const std::size_t c = in.u32(), k = in.u32(), d = in.u32();
  if (c == 0 || k == 0 || d < 2) throw Error(ErrorCode::DimMismatch, "bundle header has an empty dimension");
  using detail::checked_mul;
  const std::size_t doubles = checked_mul(checked_mul(c, k), d) + checked_mul(c, k) + checked_mul(d, d);
  in.need(checked_mul(doubles, 8));

  auto read = [&](std::vector<std::size_t> shape) {
    Tensor<double> t(std::move(shape));
    for (auto& v : t.values()) {
      v = in.f64();
      if (!std::isfinite(v)) throw Error(ErrorCode::InvariantViolation, "non-finite value in bundle");
    }
    return t;
  };
  ModelBundle m;
  m.bank = PrototypeBank(read({c, k, d}));
  m.head.w = read({c, k});
  m.head.adapter = read({d, d});
  for (std::size_t i = 0; i < c; ++i)
    for (std::size_t j = 0; j < k; ++j)
      if (std::abs(norm(m.bank.prototype(i, j)) - 1.0) > 1e-9) {
        throw Error(ErrorCode::InvariantViolation, "bundle prototype is not unit norm");
      }
  const std::uint32_t len = in.u32();
  const std::uint8_t* text = in.take(len);
  m.config.assign(reinterpret_cast<const char*>(text), len);
  if (in.remaining() != 0) throw Error(ErrorCode::DimMismatch, "trailing bytes after bundle");
  return m;
}

inline void save_bundle(const ModelBundle& m, const std::filesystem::path& path) {
  binary::write_file(path, encode_bundle(m));
}

inline ModelBundle load_bundle(const std::filesystem::path& path) { return decode_bundle(binary::read_file(path)); }

// ---------------------------------------------------------------------------
// Training

inline void check_data_shape(const FeatureBatch& data, const RunConfig& cfg) {
  if (cfg.classes != 0 && data.num_classes != cfg.classes) {
    throw Error(ErrorCode::DimMismatch, "data has " + std::to_string(data.num_classes) + " classes, config expects " +
                                            std::to_string(cfg.classes));
  }
  if (cfg.dim != 0 && data.feature_dim() != cfg.dim) {
    throw Error(ErrorCode::DimMismatch, "data has D = " + std::to_string(data.feature_dim()) + ", config expects " +
                                            std::to_string(cfg.dim));
  }
}

inline void check_bundle_matches(const ModelBundle& m, const FeatureBatch& data) {
  if (m.bank.num_classes() != data.num_classes || m.bank.feature_dim() != data.feature_dim()) {
    throw Error(ErrorCode::DimMismatch, "bundle and data disagree on C or D");
  }
}

/// Seeded random prototypes with the initial head: the untrained baseline.
inline ModelBundle initial_bundle(std::size_t c, std::size_t d, const RunConfig& cfg) {
  return {init_prototypes(c, cfg.k, d, stream_seed(cfg.seed, SeedStream::Init)), ClassifierHead::initial(c, cfg.k, d, cfg.w_init),
          config_to_text(cfg)};
}

/// Stage 1 from a fresh initialization.
inline ModelBundle learn(const FeatureBatch& train, const RunConfig& cfg) {
  cfg.validate();
  train.validate();
  check_data_shape(train, cfg);
  auto m = initial_bundle(train.num_classes, train.feature_dim(), cfg);
  m.bank = learn_stage1(train, std::move(m.bank), cfg.stage1(), cfg.sinkhorn());
  return m;
}

/// Stage 2 on a learned bundle; a no-op under no_finetune apart from the
/// config snapshot.
inline ModelBundle finetune(const FeatureBatch& train, ModelBundle m, const RunConfig& cfg) {
  cfg.validate();
  train.validate();
  check_data_shape(train, cfg);
  check_bundle_matches(m, train);
  if (m.bank.per_class() != cfg.k) throw Error(ErrorCode::DimMismatch, "bundle K differs from config k");
  if (!cfg.no_finetune) m.head = finetune_stage2(train, m.bank, std::move(m.head), cfg.stage2());
  m.config = config_to_text(cfg);
  return m;
}

inline ModelBundle train_model(const FeatureBatch& train, const RunConfig& cfg) {
  return finetune(train, learn(train, cfg), cfg);
}

// ---------------------------------------------------------------------------
// Reports

inline constexpr std::array<double, 3> kBoxSweep = {0.125, 0.25, 0.5};
inline constexpr std::array<double, 4> kTauSweep = {0.2, 0.4, 0.6, 0.8};

struct ImageReport {
  std::string id;
  std::uint32_t label = 0;
  std::optional<std::uint32_t> predicted;
  double overlap = 0.0;
  double iou = std::numeric_limits<double>::quiet_NaN();  // NaN: no ground truth
};

struct MetricReport {
  std::optional<double> accuracy;
  double box_frac = 0.25, tau = 0.5;
  double distinctiveness = 0.0;
  std::optional<double> comprehensiveness;  // absent without ground-truth masks
  std::vector<std::pair<double, double>> box_sweep;
  std::vector<std::pair<double, double>> tau_sweep;
  std::vector<ImageReport> images;

  std::string to_text() const {
    using detail::format_double;
    auto opt = [](const std::optional<double>& v) { return v ? format_double(*v) : std::string("n/a"); };
    std::string s;
    s += "accuracy " + opt(accuracy) + "\n";
    s += "distinctiveness " + format_double(distinctiveness) + " box_frac " + format_double(box_frac) + "\n";
    s += "comprehensiveness " + opt(comprehensiveness) + " tau " + format_double(tau) + "\n";
    for (const auto& [f, v] : box_sweep) s += "distinctiveness_sweep box_frac " + format_double(f) + " " + format_double(v) + "\n";
    for (const auto& [t, v] : tau_sweep) s += "comprehensiveness_sweep tau " + format_double(t) + " " + format_double(v) + "\n";
    s += "images " + std::to_string(images.size()) + "\n";
    s += "id\tlabel\tpredicted\toverlap\tiou\n";
    for (const auto& r : images) {
      s += r.id + "\t" + std::to_string(r.label) + "\t" + (r.predicted ? std::to_string(*r.predicted) : "-") + "\t" +
           format_double(r.overlap) + "\t" + (std::isnan(r.iou) ? std::string("-") : format_double(r.iou)) + "\n";
    }
    return s;
  }
};

/// Scores per-image ground-truth-class maps [K, h, w]. `predicted` may be
/// empty (maps supplied from outside); `gt` is required for
/// comprehensiveness.
inline MetricReport score_maps(const std::vector<std::string>& ids, const std::vector<std::uint32_t>& labels,
                               const std::vector<Tensor<double>>& maps, ImageSize size,
                               const std::optional<Tensor<std::uint8_t>>& gt, const std::vector<std::uint32_t>& predicted,
                               const RunConfig& cfg) {
  validate_tau(cfg.tau);
  MetricReport r;
  r.box_frac = cfg.box_frac;
  r.tau = cfg.tau;
  const std::vector<ImageSize> sizes(maps.size(), size);
  const auto main = distinctiveness(maps, sizes, BoxSpec::fraction(size, cfg.box_frac));
  r.distinctiveness = main.score;
  for (double f : kBoxSweep) r.box_sweep.emplace_back(f, distinctiveness(maps, sizes, BoxSpec::fraction(size, f)).score);

  std::vector<double> iou(maps.size(), std::numeric_limits<double>::quiet_NaN());
  if (gt) {
    std::vector<Tensor<std::uint8_t>> masks;
    for (std::size_t b = 0; b < maps.size(); ++b) {
      auto s = gt->slice(b);
      masks.emplace_back(std::vector<std::size_t>{size.height, size.width}, std::vector<std::uint8_t>(s.begin(), s.end()));
    }
    const auto comp = comprehensiveness(maps, masks, cfg.tau);
    r.comprehensiveness = comp.score;
    iou = comp.iou;
    for (double t : kTauSweep) r.tau_sweep.emplace_back(t, comprehensiveness(maps, masks, t).score);
  }
  if (!predicted.empty()) {
    std::size_t correct = 0;
    for (std::size_t b = 0; b < predicted.size(); ++b) correct += predicted[b] == labels[b];
    r.accuracy = static_cast<double>(correct) / static_cast<double>(predicted.size());
  }
  for (std::size_t b = 0; b < maps.size(); ++b) {
    ImageReport row{ids[b], labels[b], std::nullopt, main.overlap[b], iou[b]};
    if (!predicted.empty()) row.predicted = predicted[b];
    r.images.push_back(std::move(row));
  }
  return r;
}

/// Ground-truth-class similarity maps [K, h, w] of one image.
inline Tensor<double> image_class_maps(const FeatureBatch& data, std::size_t b, const ModelBundle& m, std::uint32_t cls) {
  auto maps = class_activation_maps(image_tokens(data, b), m.bank, m.head, cls);
  return Tensor<double>({maps.dim(0), data.grid_h(), data.grid_w()}, std::move(maps.storage()));
}

inline MetricReport evaluate(const ModelBundle& m, const FeatureBatch& test, const RunConfig& cfg) {
  test.validate();
  check_bundle_matches(m, test);
  std::vector<Tensor<double>> maps;
  std::vector<std::uint32_t> predicted;
  for (std::size_t b = 0; b < test.batch(); ++b) {
    predicted.push_back(predict(image_tokens(test, b), m.bank, m.head).label);
    maps.push_back(image_class_maps(test, b, m, test.labels[b]));
  }
  return score_maps(test.ids, test.labels, maps, test.image_size, test.gt_masks, predicted, cfg);
}

/// Metrics for externally produced maps: a PTFD whose "tokens" [B, h, w, K]
/// hold each image's ground-truth-class activation maps.
inline MetricReport evaluate_maps(const FeatureBatch& maps_file, const RunConfig& cfg) {
  maps_file.validate();
  const std::size_t h = maps_file.grid_h(), w = maps_file.grid_w(), k = maps_file.feature_dim();
  std::vector<Tensor<double>> maps;
  for (std::size_t b = 0; b < maps_file.batch(); ++b) {
    Tensor<double> m({k, h, w});
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t x = 0; x < w; ++x) {
        auto v = maps_file.token(b, y, x);
        for (std::size_t j = 0; j < k; ++j) m(j, y, x) = v[j];
      }
    maps.push_back(std::move(m));
  }
  return score_maps(maps_file.ids, maps_file.labels, maps, maps_file.image_size, maps_file.gt_masks, {}, cfg);
}

// ---------------------------------------------------------------------------
// Explanations

struct ExplanationItem {
  std::string id;
  std::uint32_t predicted = 0;
  std::size_t rank = 0, prototype = 0;
  double activation = 0.0, weight = 0.0, contribution = 0.0;
  std::filesystem::path heatmap;
};

inline std::string safe_file_stem(const std::string& id) {
  std::string s = id;
  for (auto& ch : s) {
    const bool ok = (ch >= 'a' && ch <= 'z') || (ch >= 'A' && ch <= 'Z') || (ch >= '0' && ch <= '9') || ch == '-' ||
                    ch == '_' || ch == '.';
    if (!ok) ch = '_';
  }
  return s.empty() ? "image" : s;
}

inline std::vector<std::string> split_ids(const std::string& list) {
  std::vector<std::string> out;
  std::string cur;
  std::istringstream in(list);
  while (std::getline(in, cur, ',')) {
    cur = detail::trim(cur);
    if (!cur.empty()) out.push_back(cur);
  }
  return out;
}

/// For each requested image (all when `ids` is empty): the predicted class's
/// prototypes ranked by weighted contribution, the top ones rendered as
/// heatmaps at image resolution under `out_dir`, and a summary table
/// `explanations.tsv` listing every rendered prototype.
inline std::vector<ExplanationItem> explain(const ModelBundle& m, const FeatureBatch& test, const std::vector<std::string>& ids,
                                            const std::filesystem::path& out_dir, std::size_t top_k) {
  test.validate();
  check_bundle_matches(m, test);
  std::vector<std::size_t> which;
  if (ids.empty()) {
    for (std::size_t b = 0; b < test.batch(); ++b) which.push_back(b);
  } else {
    for (const auto& id : ids) {
      const auto it = std::find(test.ids.begin(), test.ids.end(), id);
      if (it == test.ids.end()) throw Error(ErrorCode::NotFound, "no image with id '" + id + "'");
      which.push_back(static_cast<std::size_t>(it - test.ids.begin()));
    }
  }
  std::error_code ec;
  std::filesystem::create_directories(out_dir, ec);
  if (ec) throw Error(ErrorCode::IoError, "cannot create " + out_dir.string());

  const std::size_t k = m.bank.per_class();
  const std::size_t shown = top_k == 0 ? k : std::min(top_k, k);
  std::vector<ExplanationItem> items;
  for (std::size_t b : which) {
    const auto pred = predict(image_tokens(test, b), m.bank, m.head);
    const auto maps = image_class_maps(test, b, m, pred.label);
    std::vector<std::size_t> order(k);
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t c) {
      return pred.contribution(pred.label, a) > pred.contribution(pred.label, c);
    });
    for (std::size_t r = 0; r < shown; ++r) {
      const std::size_t j = order[r];
      ExplanationItem it{test.ids[b], pred.label, r, j, pred.activations.score(pred.label, j), m.head.w(pred.label, j),
                         pred.contribution(pred.label, j), {}};
      it.heatmap = out_dir / (safe_file_stem(test.ids[b]) + "_rank" + std::to_string(r) + "_c" + std::to_string(pred.label) +
                              "_p" + std::to_string(j) + ".pgm");
      render_heatmap(upsample_bilinear(detail::map_k(maps, j), test.image_size.height, test.image_size.width), it.heatmap);
      items.push_back(std::move(it));
    }
  }
  std::ofstream tsv(out_dir / "explanations.tsv");
  if (!tsv) throw Error(ErrorCode::IoError, "cannot write explanations.tsv");
  tsv << "id\tpredicted\trank\tprototype\tactivation\tweight\tcontribution\theatmap\n";
  for (const auto& it : items) {
    tsv << it.id << '\t' << it.predicted << '\t' << it.rank << '\t' << it.prototype << '\t'
        << detail::format_double(it.activation) << '\t' << detail::format_double(it.weight) << '\t'
        << detail::format_double(it.contribution) << '\t' << it.heatmap.filename().string() << '\n';
  }
  if (!tsv) throw Error(ErrorCode::IoError, "failed writing explanations.tsv");
  return items;
}

// ---------------------------------------------------------------------------
// Synthetic data

inline SynthData synthesize(const RunConfig& cfg) {
  SynthParams p = cfg.synth;
  p.seed = stream_seed(cfg.seed, SeedStream::Synth);
  return make_synthetic(p);
}

/// Writes train.ptfd, test.ptfd and centers.csv into `out_dir`.
inline SynthData write_synthetic(const RunConfig& cfg, const std::filesystem::path& out_dir) {
  auto data = synthesize(cfg);
  std::error_code ec;
  std::filesystem::create_directories(out_dir, ec);
  if (ec) throw Error(ErrorCode::IoError, "cannot create " + out_dir.string());
  write_ptfd(data.train, out_dir / "train.ptfd");
  write_ptfd(data.test, out_dir / "test.ptfd");
  write_centers_csv(data, out_dir / "centers.csv");
  return data;
}

}  // namespace protoparts

#endif  // PROTOPARTS_PIPELINE_HPP_
