#ifndef PROTOPARTS_SYNTH_HPP_
#define PROTOPARTS_SYNTH_HPP_

#include <Eigen/Dense>

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "protoparts/core_types.hpp"

namespace protoparts {

/// Separable toy benchmark. Each class owns K part directions; an image of
/// class c shows its K parts as 2x2 token patches on a centered lattice over
/// a background direction. Some images also carry a "decoy": one clean token
/// per part of another class, lightly tagged with the background direction,
/// scattered over background cells. Decoys fool a classifier that only sums
/// raw part similarities, but the tag makes them separable after tuning.
struct SynthParams {
  std::size_t classes = 5;
  std::size_t parts = 3;
  std::size_t dim = 16;
  std::size_t grid = 8;    // token grid is grid x grid
  std::size_t image = 64;  // image is image x image pixels
  std::size_t train_per_class = 50;
  std::size_t test_per_class = 20;
  double sigma = 0.05;       // per-coordinate token noise
  double decoy_rate = 0.2;   // fraction of images with a decoy
  double decoy_tag = 0.1;    // background component added to decoy tokens
  double decoy_noise = 0.0;  // per-coordinate noise on decoy tokens
  bool strict_orthogonal = true;
  std::uint64_t seed = 0;

  std::size_t lattice() const {
    std::size_t m = 1;
    while (m * m < parts) ++m;
    return m;
  }

  void validate() const {
    auto bad = [](const std::string& m) { throw Error(ErrorCode::InvalidParams, m); };
    if (classes < 1 || parts < 1) bad("classes and parts must be >= 1");
    if (dim < 2) bad("dim must be >= 2");
    if (strict_orthogonal && classes * parts + 1 > dim) {
      bad("strict orthogonality needs classes * parts + 1 <= dim");
    }
    if (grid < 3 * lattice() + 1) bad("grid too small for the part lattice");
    if (image < grid) bad("image must be at least as large as the token grid");
    if (train_per_class < 1 || test_per_class < 1) bad("need at least one image per class and split");
    if (!(sigma >= 0.0) || !(decoy_noise >= 0.0) || !(decoy_tag >= 0.0)) bad("noise and tag must be >= 0");
    if (!(decoy_rate >= 0.0 && decoy_rate <= 1.0)) bad("decoy_rate must lie in [0, 1]");
  }
};

struct SynthData {
  FeatureBatch train;
  FeatureBatch test;
  Tensor<double> centers;           // [C, K, D], unit
  std::vector<double> background;   // [D], unit
};

/// Top-left token of each part's 2x2 patch: a lattice with pitch 3 centered
/// in the grid, filled row-major.
inline std::vector<std::array<std::size_t, 2>> part_slots(std::size_t parts, std::size_t grid) {
  std::size_t m = 1;
  while (m * m < parts) ++m;
  const std::size_t offset = (grid - (3 * m - 1)) / 2;
  std::vector<std::array<std::size_t, 2>> out;
  for (std::size_t k = 0; k < parts; ++k) out.push_back({offset + 3 * (k / m), offset + 3 * (k % m)});
  return out;
}

namespace detail {

// Random orthonormal directions from the Q factor of a Gaussian matrix; any
// surplus beyond the dimension is plain random unit vectors.
inline std::vector<std::vector<double>> random_directions(std::size_t count, std::size_t dim, std::mt19937_64& rng) {
  std::normal_distribution<double> n(0.0, 1.0);
  Eigen::MatrixXd g(dim, dim);
  for (Eigen::Index i = 0; i < g.rows(); ++i)
    for (Eigen::Index j = 0; j < g.cols(); ++j) g(i, j) = n(rng);
  const Eigen::MatrixXd q = Eigen::HouseholderQR<Eigen::MatrixXd>(g).householderQ();
  std::vector<std::vector<double>> out;
  for (std::size_t i = 0; i < count; ++i) {
    std::vector<double> v(dim);
    if (i < dim) {
      for (std::size_t e = 0; e < dim; ++e) v[e] = q(static_cast<Eigen::Index>(e), static_cast<Eigen::Index>(i));
    } else {
      for (auto& x : v) x = n(rng);
      v = l2_normalize(v);
    }
    out.push_back(std::move(v));
  }
  return out;
}

}  // namespace detail

inline SynthData make_synthetic(const SynthParams& p) {
  p.validate();
  std::mt19937_64 rng(p.seed);
  const std::size_t c = p.classes, k = p.parts, d = p.dim, g = p.grid;
  // The background takes the first direction so it never falls in the surplus.
  auto dirs = detail::random_directions(c * k + 1, d, rng);

  SynthData out;
  out.background = dirs[0];
  out.centers = Tensor<double>({c, k, d});
  for (std::size_t i = 0; i < c * k; ++i) std::copy(dirs[i + 1].begin(), dirs[i + 1].end(), out.centers.slice(i / k, i % k).begin());

  const auto slots = part_slots(k, g);
  std::vector<int> part_at(g * g, -1);
  for (std::size_t j = 0; j < k; ++j)
    for (std::size_t dy = 0; dy < 2; ++dy)
      for (std::size_t dx = 0; dx < 2; ++dx) part_at[(slots[j][0] + dy) * g + slots[j][1] + dx] = static_cast<int>(j);
  std::vector<std::size_t> free_cells;
  for (std::size_t t = 0; t < g * g; ++t)
    if (part_at[t] < 0) free_cells.push_back(t);

  // Pixel -> nearest token node, corner aligned.
  std::vector<std::size_t> node(p.image);
  for (std::size_t i = 0; i < p.image; ++i) {
    node[i] = p.image == 1 ? 0
                           : static_cast<std::size_t>(std::lround(static_cast<double>(i) * static_cast<double>(g - 1) /
                                                                  static_cast<double>(p.image - 1)));
  }

  std::normal_distribution<double> noise(0.0, 1.0);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  auto make_split = [&](std::size_t per_class, const std::string& prefix) {
    const std::size_t b = per_class * c;
    FeatureBatch batch;
    batch.num_classes = static_cast<std::uint32_t>(c);
    batch.image_size = {static_cast<std::uint32_t>(p.image), static_cast<std::uint32_t>(p.image)};
    batch.tokens = Tensor<float>({b, g, g, d});
    Tensor<std::uint8_t> masks({b, p.image, p.image}, 0);
    for (std::size_t img = 0; img < b; ++img) {
      const std::size_t cls = img % c;
      batch.labels.push_back(static_cast<std::uint32_t>(cls));
      batch.ids.push_back(prefix + "_c" + std::to_string(cls) + "_" + std::to_string(img / c));
      for (std::size_t t = 0; t < g * g; ++t) {
        auto dst = batch.tokens.slice(img, t / g, t % g);
        const std::span<const double> base =
            part_at[t] >= 0 ? std::as_const(out.centers).slice(cls, static_cast<std::size_t>(part_at[t]))
                            : std::span<const double>(out.background);
        for (std::size_t e = 0; e < d; ++e) dst[e] = static_cast<float>(base[e] + p.sigma * noise(rng));
      }
      if (c > 1 && unit(rng) < p.decoy_rate) {
        std::size_t other = std::uniform_int_distribution<std::size_t>(0, c - 2)(rng);
        if (other >= cls) ++other;
        auto cells = free_cells;
        std::shuffle(cells.begin(), cells.end(), rng);
        for (std::size_t j = 0; j < k && j < cells.size(); ++j) {
          auto dst = batch.tokens.slice(img, cells[j] / g, cells[j] % g);
          auto center = out.centers.slice(other, j);
          for (std::size_t e = 0; e < d; ++e) {
            dst[e] = static_cast<float>(center[e] + p.decoy_tag * out.background[e] + p.decoy_noise * noise(rng));
          }
        }
      }
      for (std::size_t y = 0; y < p.image; ++y)
        for (std::size_t x = 0; x < p.image; ++x) masks(img, y, x) = part_at[node[y] * g + node[x]] >= 0 ? 1 : 0;
    }
    batch.gt_masks = std::move(masks);
    return batch;
  };
  out.train = make_split(p.train_per_class, "train");
  out.test = make_split(p.test_per_class, "test");
  return out;
}

/// One row per true part center: class, part, then D coordinates. The
/// background direction is written last with class and part set to -1.
inline void write_centers_csv(const SynthData& data, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw Error(ErrorCode::IoError, "cannot open " + path.string());
  out.precision(17);
  const std::size_t c = data.centers.dim(0), k = data.centers.dim(1);
  auto row = [&](const std::string& head, std::span<const double> v) {
    out << head;
    for (double x : v) out << ',' << x;
    out << '\n';
  };
  for (std::size_t i = 0; i < c; ++i)
    for (std::size_t j = 0; j < k; ++j) row(std::to_string(i) + ',' + std::to_string(j), data.centers.slice(i, j));
  row("-1,-1", data.background);
  if (!out) throw Error(ErrorCode::IoError, "failed writing " + path.string());
}

}  // namespace protoparts

#endif  // PROTOPARTS_SYNTH_HPP_
