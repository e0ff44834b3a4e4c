#ifndef PROTOPARTS_METRICS_HPP_
#define PROTOPARTS_METRICS_HPP_

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "protoparts/core_types.hpp"

namespace protoparts {

struct Box {
  std::size_t top = 0, left = 0, height = 0, width = 0;
  bool operator==(const Box&) const = default;
};

struct BoxSpec {
  std::size_t height = 1, width = 1;

  /// Box whose sides are `frac` of the image sides, at least one pixel.
  static BoxSpec fraction(ImageSize img, double frac = 0.25) {
    if (!(frac > 0.0 && frac <= 1.0)) throw Error(ErrorCode::InvalidParams, "box fraction must lie in (0, 1]");
    auto side = [&](std::uint32_t n) {
      return std::max<std::size_t>(1, static_cast<std::size_t>(std::floor(frac * n)));
    };
    return {side(img.height), side(img.width)};
  }

  void validate(std::size_t h, std::size_t w) const {
    if (height < 1 || width < 1 || height > h || width > w) {
      throw Error(ErrorCode::InvalidParams, "box must fit inside the image");
    }
  }
};

inline void validate_tau(double tau) {
  if (!(tau > 0.0 && tau < 1.0)) throw Error(ErrorCode::InvalidParams, "mask threshold must lie in (0, 1)");
}

/// Corner-aligned bilinear resize of a [h, w] map to [out_h, out_w]: target
/// pixel y samples source coordinate y * (h - 1) / (out_h - 1).
inline Tensor<double> upsample_bilinear(const Tensor<double>& map, std::size_t out_h, std::size_t out_w) {
  const std::size_t h = map.dim(0), w = map.dim(1);
  if (h < 1 || w < 1 || out_h < 1 || out_w < 1) throw Error(ErrorCode::InvalidParams, "empty map or target");
  auto coord = [](std::size_t i, std::size_t src, std::size_t dst) {
    if (dst == 1 || src == 1) return 0.0;
    return static_cast<double>(i) * static_cast<double>(src - 1) / static_cast<double>(dst - 1);
  };
  Tensor<double> out({out_h, out_w});
  for (std::size_t y = 0; y < out_h; ++y) {
    const double sy = coord(y, h, out_h);
    const std::size_t y0 = std::min(static_cast<std::size_t>(sy), h - 1), y1 = std::min(y0 + 1, h - 1);
    const double fy = sy - static_cast<double>(y0);
    for (std::size_t x = 0; x < out_w; ++x) {
      const double sx = coord(x, w, out_w);
      const std::size_t x0 = std::min(static_cast<std::size_t>(sx), w - 1), x1 = std::min(x0 + 1, w - 1);
      const double fx = sx - static_cast<double>(x0);
      const double top = map(y0, x0) + fx * (map(y0, x1) - map(y0, x0));
      const double bottom = map(y1, x0) + fx * (map(y1, x1) - map(y1, x0));
      out(y, x) = fy == 0.0 ? top : top + fy * (bottom - top);
    }
  }
  return out;
}

/// Fixed-size box centered on the map's maximum (first in row-major order),
/// shifted back inside the image when it would cross a border.
inline Box max_box(const Tensor<double>& map, const BoxSpec& spec) {
  const std::size_t h = map.dim(0), w = map.dim(1);
  spec.validate(h, w);
  const auto vals = map.values();
  const std::size_t at = static_cast<std::size_t>(std::distance(vals.begin(), std::max_element(vals.begin(), vals.end())));
  auto place = [](std::size_t center, std::size_t side, std::size_t extent) {
    const std::ptrdiff_t start = static_cast<std::ptrdiff_t>(center) - static_cast<std::ptrdiff_t>(side / 2);
    return static_cast<std::size_t>(std::clamp<std::ptrdiff_t>(start, 0, static_cast<std::ptrdiff_t>(extent - side)));
  };
  return {place(at / w, spec.height, h), place(at % w, spec.width, w), spec.height, spec.width};
}

inline double box_iou(const Box& a, const Box& b) {
  auto overlap = [](std::size_t s0, std::size_t l0, std::size_t s1, std::size_t l1) {
    const std::size_t lo = std::max(s0, s1), hi = std::min(s0 + l0, s1 + l1);
    return hi > lo ? hi - lo : 0;
  };
  const double inter = static_cast<double>(overlap(a.top, a.height, b.top, b.height) *
                                           overlap(a.left, a.width, b.left, b.width));
  const double uni = static_cast<double>(a.height * a.width + b.height * b.width) - inter;
  return uni > 0.0 ? inter / uni : 0.0;
}

namespace detail {

inline Tensor<double> map_k(const Tensor<double>& maps, std::size_t k) {
  auto s = maps.slice(k);
  return Tensor<double>({maps.dim(1), maps.dim(2)}, std::vector<double>(s.begin(), s.end()));
}

}  // namespace detail

/// Boxes around each of the K upsampled maps [K, h, w] of one image.
inline std::vector<Box> prototype_boxes(const Tensor<double>& maps, ImageSize img, const BoxSpec& spec) {
  std::vector<Box> boxes;
  for (std::size_t k = 0; k < maps.dim(0); ++k) {
    boxes.push_back(max_box(upsample_bilinear(detail::map_k(maps, k), img.height, img.width), spec));
  }
  return boxes;
}

/// Mean IoU over the unordered pairs of one image's prototype boxes.
inline double box_overlap(const std::vector<Box>& boxes) {
  const std::size_t k = boxes.size();
  if (k < 2) throw Error(ErrorCode::KTooSmall, "overlap needs at least two prototypes");
  double sum = 0.0;
  for (std::size_t i = 0; i < k; ++i)
    for (std::size_t j = i + 1; j < k; ++j) sum += box_iou(boxes[i], boxes[j]);
  return sum / static_cast<double>(k * (k - 1) / 2);
}

struct DistinctivenessResult {
  double score = 0.0;
  std::vector<double> overlap;  // per image
};

/// 1 - mean over images of the mean pairwise IoU between the boxes around
/// the ground-truth class's K activation maps.
inline DistinctivenessResult distinctiveness(std::span<const Tensor<double>> maps, std::span<const ImageSize> sizes,
                                             const BoxSpec& spec) {
  if (maps.size() != sizes.size()) throw Error(ErrorCode::DimMismatch, "one image size per map stack");
  if (maps.empty()) throw Error(ErrorCode::InvalidParams, "no images to score");
  DistinctivenessResult out;
  double sum = 0.0;
  for (std::size_t i = 0; i < maps.size(); ++i) {
    if (maps[i].rank() != 3 || maps[i].dim(0) < 2) throw Error(ErrorCode::KTooSmall, "distinctiveness needs K >= 2");
    out.overlap.push_back(box_overlap(prototype_boxes(maps[i], sizes[i], spec)));
    sum += out.overlap.back();
  }
  out.score = 1.0 - sum / static_cast<double>(maps.size());
  return out;
}

/// Min-max normalized map; a constant map normalizes to all ones.
inline Tensor<double> minmax_normalize(const Tensor<double>& map) {
  const auto [lo, hi] = std::minmax_element(map.values().begin(), map.values().end());
  Tensor<double> out = map;
  const double a = *lo, span = *hi - *lo;
  for (auto& v : out.values()) v = span > 0.0 ? (v - a) / span : 1.0;
  return out;
}

inline Tensor<std::uint8_t> threshold_mask(const Tensor<double>& map, double tau) {
  validate_tau(tau);
  const auto norm = minmax_normalize(map);
  Tensor<std::uint8_t> out(map.shape());
  for (std::size_t i = 0; i < map.size(); ++i) out.data()[i] = norm.data()[i] >= tau ? 1 : 0;
  return out;
}

inline double mask_iou(std::span<const std::uint8_t> a, std::span<const std::uint8_t> b) {
  if (a.size() != b.size()) throw Error(ErrorCode::DimMismatch, "mask sizes differ");
  std::size_t inter = 0, uni = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    inter += a[i] && b[i];
    uni += a[i] || b[i];
  }
  return uni ? static_cast<double>(inter) / static_cast<double>(uni) : 0.0;
}

struct ComprehensivenessResult {
  double score = 0.0;
  std::vector<double> iou;           // per image; NaN where skipped
  std::vector<std::size_t> skipped;  // images with empty ground truth
};

/// Mean IoU between each image's ground-truth foreground [H, W] and the union
/// of its K thresholded, upsampled activation maps. Images without any
/// foreground pixel are skipped and listed.
inline ComprehensivenessResult comprehensiveness(std::span<const Tensor<double>> maps,
                                                 std::span<const Tensor<std::uint8_t>> gt, double tau) {
  validate_tau(tau);
  if (maps.size() != gt.size()) throw Error(ErrorCode::DimMismatch, "one ground-truth mask per map stack");
  ComprehensivenessResult out;
  double sum = 0.0;
  std::size_t counted = 0;
  for (std::size_t i = 0; i < maps.size(); ++i) {
    const std::size_t h = gt[i].dim(0), w = gt[i].dim(1);
    if (std::none_of(gt[i].values().begin(), gt[i].values().end(), [](std::uint8_t v) { return v != 0; })) {
      out.skipped.push_back(i);
      out.iou.push_back(std::numeric_limits<double>::quiet_NaN());
      continue;
    }
    std::vector<std::uint8_t> uni(h * w, 0);
    for (std::size_t k = 0; k < maps[i].dim(0); ++k) {
      const auto m = threshold_mask(upsample_bilinear(detail::map_k(maps[i], k), h, w), tau);
      for (std::size_t p = 0; p < uni.size(); ++p) uni[p] |= m.data()[p];
    }
    out.iou.push_back(mask_iou(uni, gt[i].values()));
    sum += out.iou.back();
    ++counted;
  }
  if (counted == 0) throw Error(ErrorCode::EmptyGroundTruth, "every image has an empty ground-truth mask");
  out.score = sum / static_cast<double>(counted);
  return out;
}

/// 8-bit pixels of a min-max normalized map, floor(255 * v).
inline std::vector<std::uint8_t> heatmap_pixels(const Tensor<double>& map) {
  const auto norm = minmax_normalize(map);
  std::vector<std::uint8_t> px(map.size());
  for (std::size_t i = 0; i < px.size(); ++i) {
    px[i] = static_cast<std::uint8_t>(std::clamp(std::floor(255.0 * norm.data()[i]), 0.0, 255.0));
  }
  return px;
}

/// Writes `path` as a binary graymap and the raw values next to it with a
/// .csv extension.
inline void render_heatmap(const Tensor<double>& map, const std::filesystem::path& path) {
  if (path.empty()) throw Error(ErrorCode::IoError, "empty heatmap path");
  const std::size_t h = map.dim(0), w = map.dim(1);
  for (double v : map.values()) {
    if (!std::isfinite(v)) throw Error(ErrorCode::InvariantViolation, "heatmap values must be finite");
  }
  const auto px = heatmap_pixels(map);
  std::ofstream pgm(path, std::ios::binary);
  if (!pgm) throw Error(ErrorCode::IoError, "cannot open " + path.string());
  pgm << "P5\n" << w << ' ' << h << "\n255\n";
  pgm.write(reinterpret_cast<const char*>(px.data()), static_cast<std::streamsize>(px.size()));
  if (!pgm) throw Error(ErrorCode::IoError, "failed writing " + path.string());

  auto csv_path = path;
  csv_path.replace_extension(".csv");
  std::ofstream csv(csv_path);
  if (!csv) throw Error(ErrorCode::IoError, "cannot open " + csv_path.string());
  csv.precision(17);
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < w; ++x) csv << (x ? "," : "") << map(y, x);
    csv << '\n';
  }
  if (!csv) throw Error(ErrorCode::IoError, "failed writing " + csv_path.string());
}

}  // namespace protoparts

#endif  // PROTOPARTS_METRICS_HPP_
