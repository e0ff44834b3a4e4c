#ifndef PROTOPARTS_CORE_TYPES_HPP_
#define PROTOPARTS_CORE_TYPES_HPP_

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "protoparts/error.hpp"

namespace protoparts {

/// Dense row-major tensor with a runtime shape. Axis order is whatever the
/// owning type documents; nothing here knows about byte order.
template <typename T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;

  explicit Tensor(std::vector<std::size_t> shape, T fill = T{})
      : shape_(std::move(shape)), data_(count(shape_), fill) {}

  Tensor(std::vector<std::size_t> shape, std::vector<T> data)
      : shape_(std::move(shape)), data_(std::move(data)) {
    if (data_.size() != count(shape_)) {
      throw Error(ErrorCode::DimMismatch, "tensor data does not match its shape");
    }
  }

  const std::vector<std::size_t>& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t dim(std::size_t axis) const { return shape_.at(axis); }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  T* data() noexcept { return data_.data(); }
  const T* data() const noexcept { return data_.data(); }
  std::span<T> values() noexcept { return data_; }
  std::span<const T> values() const noexcept { return data_; }
  std::vector<T>& storage() noexcept { return data_; }
  const std::vector<T>& storage() const noexcept { return data_; }

  template <typename... Idx>
  T& operator()(Idx... idx) {
    return data_[offset(idx...)];
  }
  template <typename... Idx>
  const T& operator()(Idx... idx) const {
    return data_[offset(idx...)];
  }

  /// Contiguous block addressed by a prefix of leading indices.
  template <typename... Idx>
  std::span<T> slice(Idx... idx) {
    return std::span<T>(data_).subspan(prefix_offset(idx...), inner_count(sizeof...(Idx)));
  }
  template <typename... Idx>
  std::span<const T> slice(Idx... idx) const {
    return std::span<const T>(data_).subspan(prefix_offset(idx...), inner_count(sizeof...(Idx)));
  }

  bool operator==(const Tensor& other) const = default;

 private:
  static std::size_t count(const std::vector<std::size_t>& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
  }

  std::size_t inner_count(std::size_t leading) const {
    std::size_t n = 1;
    for (std::size_t a = leading; a < shape_.size(); ++a) n *= shape_[a];
    return n;
  }

  template <typename... Idx>
  std::size_t offset(Idx... idx) const {
    static_assert(sizeof...(Idx) > 0);
    return prefix_offset(idx...);
  }

  template <typename... Idx>
  std::size_t prefix_offset(Idx... idx) const {
    const std::size_t index[] = {static_cast<std::size_t>(idx)..., 0};
    std::size_t off = 0;
    for (std::size_t a = 0; a < sizeof...(Idx); ++a) off = off * shape_[a] + index[a];
    return off * inner_count(sizeof...(Idx));
  }

  std::vector<std::size_t> shape_;
  std::vector<T> data_;
};

struct ImageSize {
  std::uint32_t height = 0;
  std::uint32_t width = 0;
  bool operator==(const ImageSize&) const = default;
};

/// Patch tokens for a batch of images plus their labels. Tokens keep the
/// single-precision values of the interchange file; math promotes to double.
struct FeatureBatch {
  Tensor<float> tokens;                         // [B, h, w, D]
  std::vector<std::uint32_t> labels;            // [B], each < num_classes
  std::uint32_t num_classes = 0;                // C
  ImageSize image_size;                         // (H, W) of the source images
  std::optional<Tensor<std::uint8_t>> gt_masks;  // [B, H, W], 1 = foreground
  std::vector<std::string> ids;                 // [B]

  std::size_t batch() const { return tokens.rank() == 4 ? tokens.dim(0) : 0; }
  std::size_t grid_h() const { return tokens.dim(1); }
  std::size_t grid_w() const { return tokens.dim(2); }
  std::size_t feature_dim() const { return tokens.dim(3); }
  std::size_t tokens_per_image() const { return grid_h() * grid_w(); }

  std::span<const float> token(std::size_t b, std::size_t y, std::size_t x) const {
    return tokens.slice(b, y, x);
  }

  bool operator==(const FeatureBatch&) const = default;

  /// Throws InvariantViolation describing the first broken invariant.
  void validate() const {
    auto fail = [](const std::string& msg) { throw Error(ErrorCode::InvariantViolation, msg); };
    if (tokens.rank() != 4) fail("tokens must have rank 4 [B, h, w, D]");
    const std::size_t b = tokens.dim(0);
    if (b < 1 || tokens.dim(1) < 1 || tokens.dim(2) < 1) fail("B, h, w must be >= 1");
    if (tokens.dim(3) < 2) fail("D must be >= 2");
    if (num_classes < 1) fail("C must be >= 1");
    if (image_size.height < 1 || image_size.width < 1) fail("image size must be >= 1");
    if (labels.size() != b) fail("label count differs from B");
    if (ids.size() != b) fail("id count differs from B");
    for (auto l : labels) {
      if (l >= num_classes) fail("label " + std::to_string(l) + " >= C");
    }
    for (const auto& id : ids) {
      if (id.size() > 0xFFFF) fail("image id longer than 65535 bytes");
    }
    for (float v : tokens.values()) {
      if (!std::isfinite(v)) fail("non-finite token value");
    }
    if (gt_masks) {
      const auto& m = *gt_masks;
      if (m.rank() != 3 || m.dim(0) != b || m.dim(1) != image_size.height ||
          m.dim(2) != image_size.width) {
        fail("gt_masks must be [B, H, W]");
      }
      for (auto v : m.values()) {
        if (v > 1) fail("gt_masks must be binary");
      }
    }
  }
};

/// C x K unit-norm part prototypes of dimension D.
struct PrototypeBank {
  Tensor<double> prototypes;  // [C, K, D]

  PrototypeBank() = default;
  explicit PrototypeBank(Tensor<double> p) : prototypes(std::move(p)) {}

  std::size_t num_classes() const { return prototypes.dim(0); }
  std::size_t per_class() const { return prototypes.dim(1); }
  std::size_t feature_dim() const { return prototypes.dim(2); }

  std::span<const double> prototype(std::size_t c, std::size_t k) const {
    return prototypes.slice(c, k);
  }
  std::span<double> prototype(std::size_t c, std::size_t k) { return prototypes.slice(c, k); }

  /// Prototypes of one class as a [K, D] tensor.
  Tensor<double> class_block(std::size_t c) const {
    auto s = prototypes.slice(c);
    return Tensor<double>({per_class(), feature_dim()}, std::vector<double>(s.begin(), s.end()));
  }
  void set_class_block(std::size_t c, const Tensor<double>& block) {
    auto dst = prototypes.slice(c);
    std::copy(block.values().begin(), block.values().end(), dst.begin());
  }

  bool operator==(const PrototypeBank&) const = default;
};

// ---------------------------------------------------------------------------
// Vector kernels

inline double dot(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

inline double norm(std::span<const double> v) { return std::sqrt(dot(v, v)); }

constexpr double kZeroNorm = 1e-12;

inline std::vector<double> l2_normalize(std::span<const double> v) {
  const double n = norm(v);
  if (!(n >= kZeroNorm)) throw Error(ErrorCode::ZeroVector, "cannot normalize a zero-norm vector");
  std::vector<double> out(v.begin(), v.end());
  for (auto& x : out) x /= n;
  return out;
}

inline std::vector<double> to_double(std::span<const float> v) {
  return std::vector<double>(v.begin(), v.end());
}

/// Pairwise cosine similarity between the rows of f [N, D] and p [M, D].
inline Tensor<double> cosine_similarity(const Tensor<double>& f, const Tensor<double>& p) {
  if (f.rank() != 2 || p.rank() != 2 || f.dim(1) != p.dim(1)) {
    throw Error(ErrorCode::DimMismatch, "cosine_similarity expects [N, D] and [M, D]");
  }
  const std::size_t n = f.dim(0), m = p.dim(0);
  std::vector<double> fn(n), pn(m);
  for (std::size_t i = 0; i < n; ++i) {
    fn[i] = norm(f.slice(i));
    if (!(fn[i] >= kZeroNorm)) throw Error(ErrorCode::ZeroVector, "zero-norm row in first argument");
  }
  for (std::size_t j = 0; j < m; ++j) {
    pn[j] = norm(p.slice(j));
    if (!(pn[j] >= kZeroNorm)) throw Error(ErrorCode::ZeroVector, "zero-norm row in second argument");
  }
  Tensor<double> out({n, m});
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < m; ++j) {
      out(i, j) = dot(f.slice(i), p.slice(j)) / (fn[i] * pn[j]);
    }
  }
  return out;
}

/// Tokens of one image flattened to [h*w, D] in double precision.
inline Tensor<double> image_tokens(const FeatureBatch& batch, std::size_t b) {
  auto s = batch.tokens.slice(b);
  return Tensor<double>({batch.tokens_per_image(), batch.feature_dim()},
                        std::vector<double>(s.begin(), s.end()));
}

/// Similarity maps S [B, h, w, C, K] between every token and every prototype.
inline Tensor<double> similarity_maps(const FeatureBatch& batch, const PrototypeBank& bank) {
  const std::size_t c = bank.num_classes(), k = bank.per_class(), d = bank.feature_dim();
  if (batch.feature_dim() != d) throw Error(ErrorCode::DimMismatch, "token and prototype D differ");
  Tensor<double> flat({c * k, d}, std::vector<double>(bank.prototypes.values().begin(),
                                                      bank.prototypes.values().end()));
  Tensor<double> out({batch.batch(), batch.grid_h(), batch.grid_w(), c, k});
  const std::size_t per = batch.tokens_per_image() * c * k;
  for (std::size_t b = 0; b < batch.batch(); ++b) {
    auto sim = cosine_similarity(image_tokens(batch, b), flat);
    std::copy(sim.values().begin(), sim.values().end(), out.data() + b * per);
  }
  return out;
}

}  // namespace protoparts

#endif  // PROTOPARTS_CORE_TYPES_HPP_
