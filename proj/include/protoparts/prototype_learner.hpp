#ifndef PROTOPARTS_PROTOTYPE_LEARNER_HPP_
#define PROTOPARTS_PROTOTYPE_LEARNER_HPP_

#include <Eigen/Dense>

#include <algorithm>
#include <cstdint>
#include <numeric>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "protoparts/core_types.hpp"
#include "protoparts/ot_assignment.hpp"

namespace protoparts {

enum class ForegroundMethod { PcaThreshold, GroundTruthMask, None };

inline std::string to_string(ForegroundMethod m) {
  switch (m) {
    case ForegroundMethod::PcaThreshold: return "pca";
    case ForegroundMethod::GroundTruthMask: return "gt";
    case ForegroundMethod::None: return "none";
  }
  return "?";
}

inline ForegroundMethod parse_foreground_method(const std::string& s) {
  if (s == "pca") return ForegroundMethod::PcaThreshold;
  if (s == "gt") return ForegroundMethod::GroundTruthMask;
  if (s == "none") return ForegroundMethod::None;
  throw Error(ErrorCode::ConfigError, "unknown foreground method '" + s + "' (pca|gt|none)");
}

struct Stage1Config {
  double beta = 0.99;  // EMA coefficient on the previous prototype
  int epochs = 1;
  std::size_t batch_size = 128;
  std::uint64_t seed = 0;
  ForegroundMethod fg_method = ForegroundMethod::PcaThreshold;
  // false = greedy nearest-prototype assignment ("no constraints" ablation).
  bool equipartition = true;

  void validate() const {
    if (!(beta >= 0.0 && beta <= 1.0)) throw Error(ErrorCode::InvalidParams, "beta must lie in [0, 1]");
    if (epochs < 0) throw Error(ErrorCode::InvalidParams, "epochs must be >= 0");
    if (batch_size < 1) throw Error(ErrorCode::InvalidParams, "batch_size must be >= 1");
  }
};

/// Token-resolution foreground mask for a batch.
struct ForegroundMask {
  Tensor<std::uint8_t> mask;     // [B, h, w]
  std::vector<bool> degenerate;  // per image: no foreground token at all

  bool at(std::size_t b, std::size_t t) const { return mask.slice(b)[t] != 0; }
};

namespace detail {

inline void flag_degenerate(ForegroundMask& fg) {
  const std::size_t b = fg.mask.dim(0);
  fg.degenerate.assign(b, false);
  for (std::size_t i = 0; i < b; ++i) {
    auto m = fg.mask.slice(i);
    fg.degenerate[i] = std::none_of(m.begin(), m.end(), [](std::uint8_t v) { return v != 0; });
  }
}

}  // namespace detail

/// Foreground by thresholding the first principal component of all tokens in
/// the batch. The component is oriented so that the central
/// ceil(h/2) x ceil(w/2) windows of the images project to a nonnegative mean;
/// tokens with a nonnegative projection are foreground.
inline ForegroundMask extract_foreground_pca(const Tensor<float>& tokens) {
  const std::size_t b = tokens.dim(0), h = tokens.dim(1), w = tokens.dim(2), d = tokens.dim(3);
  const std::size_t n = b * h * w;
  if (n < 2) throw Error(ErrorCode::DegenerateFeatures, "PCA foreground needs at least two tokens");

  Eigen::Map<const Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>> raw(
      tokens.data(), static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(d));
  Eigen::MatrixXd x = raw.cast<double>();
  const Eigen::RowVectorXd mean = x.colwise().mean();
  x.rowwise() -= mean;
  const Eigen::MatrixXd cov = (x.transpose() * x) / static_cast<double>(n);
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(cov);
  if (eig.info() != Eigen::Success) throw Error(ErrorCode::DegenerateFeatures, "eigensolver failed");
  const double top = eig.eigenvalues()(static_cast<Eigen::Index>(d) - 1);
  if (!(top >= 1e-10)) throw Error(ErrorCode::DegenerateFeatures, "token covariance is numerically rank-0");
  const Eigen::VectorXd axis = eig.eigenvectors().col(static_cast<Eigen::Index>(d) - 1);
  Eigen::VectorXd proj = x * axis;

  const std::size_t wh = (h + 1) / 2, ww = (w + 1) / 2;
  const std::size_t y0 = (h - wh) / 2, x0 = (w - ww) / 2;
  double center = 0.0;
  for (std::size_t i = 0; i < b; ++i)
    for (std::size_t y = y0; y < y0 + wh; ++y)
      for (std::size_t xx = x0; xx < x0 + ww; ++xx) center += proj(static_cast<Eigen::Index>((i * h + y) * w + xx));
  if (center < 0.0) proj = -proj;

  ForegroundMask fg{Tensor<std::uint8_t>({b, h, w}), {}};
  for (std::size_t t = 0; t < n; ++t) fg.mask.data()[t] = proj(static_cast<Eigen::Index>(t)) >= 0.0 ? 1 : 0;
  detail::flag_degenerate(fg);
  return fg;
}

/// Ground-truth pixel masks reduced to token resolution by majority vote over
/// each token's pixel cell (ties count as foreground).
inline ForegroundMask foreground_from_masks(const Tensor<std::uint8_t>& gt, std::size_t h, std::size_t w) {
  const std::size_t b = gt.dim(0), ih = gt.dim(1), iw = gt.dim(2);
  ForegroundMask fg{Tensor<std::uint8_t>({b, h, w}), {}};
  for (std::size_t i = 0; i < b; ++i) {
    for (std::size_t y = 0; y < h; ++y) {
      const std::size_t r0 = y * ih / h, r1 = std::max(r0 + 1, (y + 1) * ih / h);
      for (std::size_t x = 0; x < w; ++x) {
        const std::size_t c0 = x * iw / w, c1 = std::max(c0 + 1, (x + 1) * iw / w);
        std::size_t on = 0, total = 0;
        for (std::size_t r = r0; r < r1; ++r)
          for (std::size_t c = c0; c < c1; ++c) {
            on += gt(i, r, c);
            ++total;
          }
        fg.mask(i, y, x) = 2 * on >= total ? 1 : 0;
      }
    }
  }
  detail::flag_degenerate(fg);
  return fg;
}

inline ForegroundMask foreground_all(std::size_t b, std::size_t h, std::size_t w) {
  ForegroundMask fg{Tensor<std::uint8_t>({b, h, w}, 1), std::vector<bool>(b, false)};
  return fg;
}

inline ForegroundMask compute_foreground(const FeatureBatch& batch, ForegroundMethod method) {
  switch (method) {
    case ForegroundMethod::PcaThreshold:
      return extract_foreground_pca(batch.tokens);
    case ForegroundMethod::GroundTruthMask:
      if (!batch.gt_masks) throw Error(ErrorCode::InvalidParams, "ground-truth foreground requested but batch has no masks");
      return foreground_from_masks(*batch.gt_masks, batch.grid_h(), batch.grid_w());
    case ForegroundMethod::None:
      break;
  }
  return foreground_all(batch.batch(), batch.grid_h(), batch.grid_w());
}

/// Prototypes drawn from N(0, 0.02) and projected to the unit sphere.
inline PrototypeBank init_prototypes(std::size_t c, std::size_t k, std::size_t d, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 0.02);
  Tensor<double> p({c, k, d});
  for (auto& v : p.values()) v = normal(rng);
  PrototypeBank bank(std::move(p));
  for (std::size_t i = 0; i < c; ++i)
    for (std::size_t j = 0; j < k; ++j) {
      auto unit = l2_normalize(bank.prototype(i, j));
      std::copy(unit.begin(), unit.end(), bank.prototype(i, j).begin());
    }
  return bank;
}

/// Momentum update of one class's prototypes towards the mean of the
/// (unit-normalized) patches assigned to each of them. Prototypes without
/// patches keep their value.
inline Tensor<double> update_prototypes(const Tensor<double>& protos, const Tensor<double>& patches,
                                        const HardAssignment& assign, double beta) {
  const std::size_t k = protos.dim(0), d = protos.dim(1);
  if (patches.rank() != 2 || (patches.dim(0) > 0 && patches.dim(1) != d) ||
      assign.assign.size() != patches.dim(0)) {
    throw Error(ErrorCode::DimMismatch, "update_prototypes shape mismatch");
  }
  std::vector<double> sum(k * d, 0.0);
  std::vector<std::size_t> count(k, 0);
  for (std::size_t i = 0; i < assign.assign.size(); ++i) {
    const std::size_t j = assign.assign[i];
    if (j >= k) throw Error(ErrorCode::InvariantViolation, "assignment index out of range");
    auto unit = l2_normalize(patches.slice(i));
    for (std::size_t e = 0; e < d; ++e) sum[j * d + e] += unit[e];
    ++count[j];
  }
  Tensor<double> out = protos;
  for (std::size_t j = 0; j < k; ++j) {
    if (count[j] == 0) continue;
    std::vector<double> blend(d);
    for (std::size_t e = 0; e < d; ++e) {
      blend[e] = beta * protos(j, e) + (1.0 - beta) * sum[j * d + e] / static_cast<double>(count[j]);
    }
    auto unit = l2_normalize(blend);
    std::copy(unit.begin(), unit.end(), out.slice(j).begin());
  }
  return out;
}

/// Foreground tokens of one class gathered from a batch as [N, D].
inline Tensor<double> gather_class_tokens(const FeatureBatch& batch, const ForegroundMask& fg,
                                          std::uint32_t cls) {
  const std::size_t t_per = batch.tokens_per_image(), d = batch.feature_dim();
  std::vector<double> flat;
  std::size_t n = 0;
  for (std::size_t b = 0; b < batch.batch(); ++b) {
    if (batch.labels[b] != cls) continue;
    auto img = batch.tokens.slice(b);
    for (std::size_t t = 0; t < t_per; ++t) {
      if (!fg.at(b, t)) continue;
      flat.insert(flat.end(), img.begin() + static_cast<std::ptrdiff_t>(t * d),
                  img.begin() + static_cast<std::ptrdiff_t>((t + 1) * d));
      ++n;
    }
  }
  return Tensor<double>({n, d}, std::move(flat));
}

/// Patch-to-prototype assignment for one class: balanced OT hardened by row
/// argmax, or the unconstrained nearest prototype.
inline HardAssignment assign_patches(const Tensor<double>& patches, const Tensor<double>& protos,
                                     const SinkhornConfig& sk, bool equipartition) {
  auto sim = cosine_similarity(patches, protos);
  if (!equipartition) return greedy_assignment(sim);
  return harden_assignment(sinkhorn_plan(sim, sk));
}

/// One clustering step over a batch: every class present gets its foreground
/// patches assigned and its prototypes moved by the momentum rule.
inline void stage1_step(const FeatureBatch& batch, PrototypeBank& bank, const Stage1Config& cfg,
                        const SinkhornConfig& sk) {
  if (batch.feature_dim() != bank.feature_dim() || batch.num_classes != bank.num_classes()) {
    throw Error(ErrorCode::DimMismatch, "batch and prototype bank disagree on C or D");
  }
  const auto fg = compute_foreground(batch, cfg.fg_method);
  std::vector<bool> present(bank.num_classes(), false);
  for (auto l : batch.labels) present[l] = true;
  for (std::uint32_t c = 0; c < bank.num_classes(); ++c) {
    if (!present[c]) continue;
    auto patches = gather_class_tokens(batch, fg, c);
    if (patches.dim(0) == 0) continue;
    auto protos = bank.class_block(c);
    auto assign = assign_patches(patches, protos, sk, cfg.equipartition);
    bank.set_class_block(c, update_prototypes(protos, patches, assign, cfg.beta));
  }
}

/// Images selected by index, in the given order.
inline FeatureBatch subset(const FeatureBatch& batch, std::span<const std::size_t> index) {
  FeatureBatch out;
  out.num_classes = batch.num_classes;
  out.image_size = batch.image_size;
  const std::size_t per = batch.tokens_per_image() * batch.feature_dim();
  std::vector<float> tok;
  tok.reserve(index.size() * per);
  std::optional<std::vector<std::uint8_t>> masks;
  if (batch.gt_masks) masks.emplace();
  for (std::size_t i : index) {
    auto s = batch.tokens.slice(i);
    tok.insert(tok.end(), s.begin(), s.end());
    out.labels.push_back(batch.labels.at(i));
    out.ids.push_back(batch.ids.at(i));
    if (masks) {
      auto m = batch.gt_masks->slice(i);
      masks->insert(masks->end(), m.begin(), m.end());
    }
  }
  out.tokens = Tensor<float>({index.size(), batch.grid_h(), batch.grid_w(), batch.feature_dim()}, std::move(tok));
  if (masks) {
    out.gt_masks = Tensor<std::uint8_t>({index.size(), batch.image_size.height, batch.image_size.width},
                                        std::move(*masks));
  }
  return out;
}

/// Splits a dataset into minibatches after a seeded shuffle of its images.
inline std::vector<FeatureBatch> make_minibatches(const FeatureBatch& data, std::size_t batch_size,
                                                  std::mt19937_64& rng) {
  std::vector<std::size_t> order(data.batch());
  std::iota(order.begin(), order.end(), 0);
  std::shuffle(order.begin(), order.end(), rng);
  std::vector<FeatureBatch> out;
  for (std::size_t start = 0; start < order.size(); start += batch_size) {
    const std::size_t end = std::min(order.size(), start + batch_size);
    out.push_back(subset(data, std::span<const std::size_t>(order).subspan(start, end - start)));
  }
  return out;
}

/// Stage-1 training over an ordered sequence of batches, repeated for
/// cfg.epochs. Batches are processed strictly in order.
inline PrototypeBank learn_stage1(std::span<const FeatureBatch> data, PrototypeBank bank,
                                  const Stage1Config& cfg, const SinkhornConfig& sk) {
  cfg.validate();
  sk.validate();
  for (int e = 0; e < cfg.epochs; ++e) {
    for (const auto& batch : data) stage1_step(batch, bank, cfg, sk);
  }
  return bank;
}

/// Stage-1 training over a whole dataset, reshuffled into minibatches each
/// epoch with cfg.seed.
inline PrototypeBank learn_stage1(const FeatureBatch& data, PrototypeBank bank, const Stage1Config& cfg,
                                  const SinkhornConfig& sk) {
  cfg.validate();
  sk.validate();
  std::mt19937_64 rng(cfg.seed);
  for (int e = 0; e < cfg.epochs; ++e) {
    for (const auto& batch : make_minibatches(data, cfg.batch_size, rng)) stage1_step(batch, bank, cfg, sk);
  }
  return bank;
}

}  // namespace protoparts

#endif  // PROTOPARTS_PROTOTYPE_LEARNER_HPP_
