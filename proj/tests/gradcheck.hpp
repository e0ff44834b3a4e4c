#ifndef PROTOPARTS_TESTS_GRADCHECK_HPP_
#define PROTOPARTS_TESTS_GRADCHECK_HPP_

#include <algorithm>
#include <cmath>
#include <random>
#include <vector>

#include "oracles.hpp"
#include "protoparts/classifier_head.hpp"

namespace gradcheck {

using namespace protoparts;

struct Instance {
  FeatureBatch batch;
  PrototypeBank bank;
  ClassifierHead head;
  Stage2Config cfg;
};

inline Instance random_instance(std::uint64_t seed, std::size_t c = 3, std::size_t k = 2, std::size_t d = 4,
                                std::size_t h = 2, std::size_t w = 2, std::size_t images = 4) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n(0.0, 1.0);
  std::uniform_int_distribution<std::uint32_t> label(0, static_cast<std::uint32_t>(c - 1));
  Instance in;
  in.batch.num_classes = static_cast<std::uint32_t>(c);
  in.batch.image_size = {8, 8};
  in.batch.tokens = Tensor<float>({images, h, w, d});
  for (auto& v : in.batch.tokens.values()) v = static_cast<float>(n(rng));
  for (std::size_t i = 0; i < images; ++i) {
    in.batch.labels.push_back(label(rng));
    in.batch.ids.push_back("g" + std::to_string(i));
  }
  Tensor<double> p({c, k, d});
  for (auto& v : p.values()) v = n(rng);
  in.bank = PrototypeBank(std::move(p));
  for (std::size_t i = 0; i < c; ++i)
    for (std::size_t j = 0; j < k; ++j) {
      auto u = l2_normalize(in.bank.prototype(i, j));
      std::copy(u.begin(), u.end(), in.bank.prototype(i, j).begin());
    }
  in.head = ClassifierHead::initial(c, k, d);
  for (auto& v : in.head.w.values()) v = 0.2 + 0.5 * n(rng);
  for (auto& v : in.head.adapter.values()) v = 0.2 * n(rng);
  in.cfg.fg_method = ForegroundMethod::None;
  return in;
}

/// Largest elementwise relative error between the analytic gradients and
/// central differences of the loss, over every w and adapter entry.
inline double max_relative_error(const Instance& in, double step = 1e-5, double floor = 1e-7) {
  const auto analytic = total_loss(in.batch, in.bank, in.head, in.cfg);
  const std::size_t nw = in.head.w.size();
  std::vector<double> params(in.head.w.values().begin(), in.head.w.values().end());
  params.insert(params.end(), in.head.adapter.values().begin(), in.head.adapter.values().end());
  auto loss_at = [&](const std::vector<double>& x) {
    ClassifierHead head = in.head;
    std::copy(x.begin(), x.begin() + static_cast<std::ptrdiff_t>(nw), head.w.values().begin());
    std::copy(x.begin() + static_cast<std::ptrdiff_t>(nw), x.end(), head.adapter.values().begin());
    return total_loss(in.batch, in.bank, head, in.cfg).total;
  };
  double worst = 0.0;
  for (std::size_t i = 0; i < params.size(); ++i) {
    const double a = i < nw ? analytic.grad_w.data()[i] : analytic.grad_adapter.data()[i - nw];
    const double num = oracle::central_difference(loss_at, params, i, step);
    worst = std::max(worst, std::abs(a - num) / std::max({std::abs(a), std::abs(num), floor}));
  }
  return worst;
}

}  // namespace gradcheck

#endif  // PROTOPARTS_TESTS_GRADCHECK_HPP_
