#ifndef PROTOPARTS_CLASSIFIER_HEAD_HPP_
#define PROTOPARTS_CLASSIFIER_HEAD_HPP_

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <random>
#include <vector>

#include "protoparts/core_types.hpp"
#include "protoparts/ot_assignment.hpp"
#include "protoparts/prototype_learner.hpp"

namespace protoparts {

/// Stage-2 trainables: modulation weights and a residual linear adapter
/// f' = f + f W_a that stands in for an identity-initialized expanded block.
struct ClassifierHead {
  Tensor<double> w;        // [C, K]
  Tensor<double> adapter;  // [D, D]

  static ClassifierHead initial(std::size_t c, std::size_t k, std::size_t d, double w0 = 0.2) {
    return {Tensor<double>({c, k}, w0), Tensor<double>({d, d}, 0.0)};
  }

  bool operator==(const ClassifierHead&) const = default;
};

struct Stage2Config {
  double lambda_ppc = 0.8;
  int epochs = 5;
  double lr_adapter = 1e-4;
  double lr_w = 1e-6;
  std::size_t batch_size = 128;
  std::uint64_t seed = 0;
  ForegroundMethod fg_method = ForegroundMethod::PcaThreshold;
  bool equipartition = true;
  SinkhornConfig sinkhorn;

  void validate() const {
    if (!(lambda_ppc >= 0.0)) throw Error(ErrorCode::InvalidParams, "lambda_ppc must be >= 0");
    if (epochs < 0) throw Error(ErrorCode::InvalidParams, "epochs must be >= 0");
    if (!(lr_adapter > 0.0) || !(lr_w > 0.0)) throw Error(ErrorCode::InvalidParams, "learning rates must be > 0");
    if (batch_size < 1) throw Error(ErrorCode::InvalidParams, "batch_size must be >= 1");
    sinkhorn.validate();
  }
};

/// Row-wise f + f W_a.
inline Tensor<double> adapt_features(const Tensor<double>& tokens, const ClassifierHead& head) {
  const std::size_t n = tokens.dim(0), d = tokens.dim(1);
  if (head.adapter.dim(0) != d || head.adapter.dim(1) != d) {
    throw Error(ErrorCode::DimMismatch, "adapter does not match feature dimension");
  }
  Tensor<double> out = tokens;
  for (std::size_t t = 0; t < n; ++t) {
    auto in = tokens.slice(t);
    auto dst = out.slice(t);
    for (std::size_t i = 0; i < d; ++i) {
      const double fi = in[i];
      if (fi == 0.0) continue;
      auto row = head.adapter.slice(i);
      for (std::size_t j = 0; j < d; ++j) dst[j] += fi * row[j];
    }
  }
  return out;
}

/// Per-prototype occurrence scores: max cosine similarity over the image's
/// tokens, with the (lowest) flat token index that attains it.
struct Activations {
  Tensor<double> score;              // [C, K]
  std::vector<std::size_t> location;  // [C * K], flat token index y * w + x
};

inline Activations prototype_activations(const Tensor<double>& tokens, const PrototypeBank& bank) {
  const std::size_t c = bank.num_classes(), k = bank.per_class(), d = bank.feature_dim();
  if (tokens.dim(1) != d) throw Error(ErrorCode::DimMismatch, "token and prototype D differ");
  Tensor<double> flat({c * k, d}, std::vector<double>(bank.prototypes.values().begin(),
                                                      bank.prototypes.values().end()));
  auto sim = cosine_similarity(tokens, flat);  // [T, C*K]
  Activations act{Tensor<double>({c, k}), std::vector<std::size_t>(c * k, 0)};
  for (std::size_t j = 0; j < c * k; ++j) {
    double best = -std::numeric_limits<double>::infinity();
    for (std::size_t t = 0; t < tokens.dim(0); ++t) {
      if (sim(t, j) > best) {
        best = sim(t, j);
        act.location[j] = t;
      }
    }
    act.score.data()[j] = best;
  }
  return act;
}

inline std::vector<double> class_logits(const Tensor<double>& scores, const Tensor<double>& w) {
  if (scores.shape() != w.shape()) throw Error(ErrorCode::DimMismatch, "activation and weight shapes differ");
  const std::size_t c = w.dim(0), k = w.dim(1);
  std::vector<double> logits(c, 0.0);
  for (std::size_t i = 0; i < c; ++i)
    for (std::size_t j = 0; j < k; ++j) logits[i] += w(i, j) * scores(i, j);
  return logits;
}

namespace detail {

inline std::vector<double> softmax(const std::vector<double>& z) {
  const double m = *std::max_element(z.begin(), z.end());
  std::vector<double> p(z.size());
  double s = 0.0;
  for (std::size_t i = 0; i < z.size(); ++i) s += (p[i] = std::exp(z[i] - m));
  for (auto& v : p) v /= s;
  return p;
}

inline double log_sum_exp(const std::vector<double>& z) {
  const double m = *std::max_element(z.begin(), z.end());
  double s = 0.0;
  for (double v : z) s += std::exp(v - m);
  return m + std::log(s);
}

}  // namespace detail

/// In-class patch-prototype contrastive loss: mean over tokens of the
/// softmax cross-entropy across the K prototypes of the token's class, with
/// the assigned prototype as target. Uses raw dot products.
inline double ppc_loss(const Tensor<double>& tokens, std::span<const std::uint32_t> classes,
                       std::span<const std::size_t> assigned, const PrototypeBank& bank) {
  const std::size_t n = tokens.dim(0), k = bank.per_class();
  if (classes.size() != n || assigned.size() != n) throw Error(ErrorCode::DimMismatch, "ppc_loss label count");
  if (n == 0) return 0.0;
  double total = 0.0;
  std::vector<double> z(k);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < k; ++j) z[j] = dot(tokens.slice(i), bank.prototype(classes[i], j));
    total += detail::log_sum_exp(z) - z[assigned[i]];
  }
  return total / static_cast<double>(n);
}

struct LossResult {
  double total = 0.0;
  double ce = 0.0;
  double ppc = 0.0;
  std::size_t foreground_tokens = 0;
  Tensor<double> grad_w;        // [C, K]
  Tensor<double> grad_adapter;  // [D, D]
};

/// L_ce + lambda * L_ppc over a batch with analytic gradients for the
/// modulation weights and the adapter. The max over tokens passes its
/// gradient to the argmax token only. Prototypes are frozen. The patch
/// assignment for the contrastive term is recomputed on the adapted features
/// and treated as a constant.
inline LossResult total_loss(const FeatureBatch& batch, const PrototypeBank& bank, const ClassifierHead& head,
                             const Stage2Config& cfg) {
  const std::size_t nb = batch.batch(), t_per = batch.tokens_per_image(), d = batch.feature_dim();
  const std::size_t c = bank.num_classes(), k = bank.per_class();
  if (d != bank.feature_dim() || batch.num_classes != c) {
    throw Error(ErrorCode::DimMismatch, "batch and prototype bank disagree on C or D");
  }
  LossResult out;
  out.grad_w = Tensor<double>({c, k}, 0.0);
  out.grad_adapter = Tensor<double>({d, d}, 0.0);

  auto accumulate_adapter = [&](std::span<const double> raw, const std::vector<double>& g) {
    for (std::size_t i = 0; i < d; ++i) {
      if (raw[i] == 0.0) continue;
      auto row = out.grad_adapter.slice(i);
      for (std::size_t j = 0; j < d; ++j) row[j] += raw[i] * g[j];
    }
  };

  std::vector<Tensor<double>> raw(nb), adapted(nb);
  for (std::size_t b = 0; b < nb; ++b) {
    raw[b] = image_tokens(batch, b);
    adapted[b] = adapt_features(raw[b], head);
  }

  // Cross-entropy on prototype logits.
  const double inv_b = 1.0 / static_cast<double>(nb);
  for (std::size_t b = 0; b < nb; ++b) {
    const auto act = prototype_activations(adapted[b], bank);
    const auto logits = class_logits(act.score, head.w);
    const auto p = detail::softmax(logits);
    const std::uint32_t y = batch.labels[b];
    out.ce += (detail::log_sum_exp(logits) - logits[y]) * inv_b;

    std::vector<std::vector<double>> grad_tok(t_per);
    for (std::size_t ci = 0; ci < c; ++ci) {
      const double dlogit = (p[ci] - (ci == y ? 1.0 : 0.0)) * inv_b;
      for (std::size_t kj = 0; kj < k; ++kj) {
        out.grad_w(ci, kj) += dlogit * act.score(ci, kj);
        const double dg = dlogit * head.w(ci, kj);
        if (dg == 0.0) continue;
        const std::size_t t = act.location[ci * k + kj];
        auto f = adapted[b].slice(t);
        const double fn = norm(f);
        const double cosv = act.score(ci, kj);
        auto proto = bank.prototype(ci, kj);
        const double pn = norm(proto);
        auto& g = grad_tok[t];
        if (g.empty()) g.assign(d, 0.0);
        for (std::size_t e = 0; e < d; ++e) g[e] += dg * (proto[e] / pn - cosv * f[e] / fn) / fn;
      }
    }
    for (std::size_t t = 0; t < t_per; ++t) {
      if (!grad_tok[t].empty()) accumulate_adapter(raw[b].slice(t), grad_tok[t]);
    }
  }

  // Patch-prototype contrastive term on foreground tokens.
  if (cfg.lambda_ppc > 0.0) {
    const auto fg = compute_foreground(batch, cfg.fg_method);
    struct Ref {
      std::size_t b, t;
    };
    std::vector<std::vector<Ref>> refs(c);
    for (std::size_t b = 0; b < nb; ++b)
      for (std::size_t t = 0; t < t_per; ++t)
        if (fg.at(b, t)) refs[batch.labels[b]].push_back({b, t});

    std::size_t total_n = 0;
    for (const auto& r : refs) total_n += r.size();
    out.foreground_tokens = total_n;
    if (total_n > 0) {
      const double scale = cfg.lambda_ppc / static_cast<double>(total_n);
      double sum = 0.0;
      std::vector<double> z(k), g(d);
      for (std::size_t ci = 0; ci < c; ++ci) {
        if (refs[ci].empty()) continue;
        Tensor<double> patches({refs[ci].size(), d});
        for (std::size_t i = 0; i < refs[ci].size(); ++i) {
          auto src = adapted[refs[ci][i].b].slice(refs[ci][i].t);
          std::copy(src.begin(), src.end(), patches.slice(i).begin());
        }
        const auto protos = bank.class_block(ci);
        const auto assign = assign_patches(patches, protos, cfg.sinkhorn, cfg.equipartition);
        for (std::size_t i = 0; i < refs[ci].size(); ++i) {
          auto f = patches.slice(i);
          for (std::size_t kj = 0; kj < k; ++kj) z[kj] = dot(f, bank.prototype(ci, kj));
          sum += detail::log_sum_exp(z) - z[assign.assign[i]];
          const auto p = detail::softmax(z);
          std::fill(g.begin(), g.end(), 0.0);
          for (std::size_t kj = 0; kj < k; ++kj) {
            const double coef = scale * (p[kj] - (kj == assign.assign[i] ? 1.0 : 0.0));
            auto proto = bank.prototype(ci, kj);
            for (std::size_t e = 0; e < d; ++e) g[e] += coef * proto[e];
          }
          accumulate_adapter(raw[refs[ci][i].b].slice(refs[ci][i].t), g);
        }
      }
      out.ppc = sum / static_cast<double>(total_n);
    }
  }
  out.total = out.ce + cfg.lambda_ppc * out.ppc;
  return out;
}

/// Plain SGD on the adapter and modulation weights with separate learning
/// rates, over seeded shuffles of the training images. When `epoch_loss` is
/// given it receives the mean minibatch loss of every epoch.
inline ClassifierHead finetune_stage2(const FeatureBatch& data, const PrototypeBank& bank, ClassifierHead head,
                                      const Stage2Config& cfg, std::vector<double>* epoch_loss = nullptr) {
  cfg.validate();
  std::mt19937_64 rng(cfg.seed);
  for (int e = 0; e < cfg.epochs; ++e) {
    double sum = 0.0;
    std::size_t steps = 0;
    for (const auto& batch : make_minibatches(data, cfg.batch_size, rng)) {
      const auto r = total_loss(batch, bank, head, cfg);
      if (!std::isfinite(r.total)) throw Error(ErrorCode::NumericalOverflow, "stage-2 loss diverged");
      for (std::size_t i = 0; i < head.adapter.size(); ++i) {
        head.adapter.data()[i] -= cfg.lr_adapter * r.grad_adapter.data()[i];
      }
      for (std::size_t i = 0; i < head.w.size(); ++i) head.w.data()[i] -= cfg.lr_w * r.grad_w.data()[i];
      sum += r.total;
      ++steps;
    }
    if (epoch_loss) epoch_loss->push_back(steps ? sum / static_cast<double>(steps) : 0.0);
  }
  return head;
}

struct Prediction {
  std::uint32_t label = 0;
  std::vector<double> logits;   // [C]
  Activations activations;
  Tensor<double> contribution;  // [C, K], w * g
};

/// Classifies one image given its raw tokens [h*w, D]. Ties in the logits go
/// to the lowest class id.
inline Prediction predict(const Tensor<double>& tokens, const PrototypeBank& bank, const ClassifierHead& head) {
  Prediction out;
  out.activations = prototype_activations(adapt_features(tokens, head), bank);
  out.logits = class_logits(out.activations.score, head.w);
  out.label = static_cast<std::uint32_t>(
      std::distance(out.logits.begin(), std::max_element(out.logits.begin(), out.logits.end())));
  out.contribution = out.activations.score;
  for (std::size_t i = 0; i < out.contribution.size(); ++i) out.contribution.data()[i] *= head.w.data()[i];
  return out;
}

/// Cosine similarity maps [K, T] between one image's adapted tokens and the
/// prototypes of class `cls`.
inline Tensor<double> class_activation_maps(const Tensor<double>& tokens, const PrototypeBank& bank,
                                            const ClassifierHead& head, std::uint32_t cls) {
  auto sim = cosine_similarity(adapt_features(tokens, head), bank.class_block(cls));  // [T, K]
  const std::size_t t = sim.dim(0), k = sim.dim(1);
  Tensor<double> maps({k, t});
  for (std::size_t i = 0; i < t; ++i)
    for (std::size_t j = 0; j < k; ++j) maps(j, i) = sim(i, j);
  return maps;
}

}  // namespace protoparts

#endif  // PROTOPARTS_CLASSIFIER_HEAD_HPP_
