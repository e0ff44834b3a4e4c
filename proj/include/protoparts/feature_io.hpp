#ifndef PROTOPARTS_FEATURE_IO_HPP_
#define PROTOPARTS_FEATURE_IO_HPP_

// PTFD (prototype-training feature dump) interchange format, version 1.
//
// All integers and floats are little-endian.
//
//   offset  size  field
//   0       4     magic "PTFD"
//   4       4     version (u32) = 1
//   8       28    B, h, w, D, C, H, W (u32 each)
//   36      4     flags (u32); bit 0 = ground-truth masks present
//   40      4*B   class labels (u32)
//   ...           B id records: u16 byte length + UTF-8 bytes
//   ...     4*B*h*w*D  tokens, float32, [B, h, w, D] row-major
//   ...     B*ceil(H*W/8)  masks (if flag bit 0): per image, H*W bits
//                 row-major, most significant bit first, zero-padded to a
//                 byte boundary
//
// The file ends exactly after the last section. Concurrent writes to the same
// path are undefined.

#include <array>
#include <cstdint>
#include <filesystem>
#include <limits>
#include <string>
#include <vector>

#include "protoparts/binary_io.hpp"
#include "protoparts/core_types.hpp"

namespace protoparts {

inline constexpr std::array<char, 4> kPtfdMagic = {'P', 'T', 'F', 'D'};
inline constexpr std::uint32_t kPtfdVersion = 1;
inline constexpr std::uint32_t kPtfdFlagMasks = 1u;
inline constexpr std::size_t kPtfdHeaderBytes = 40;

struct PtfdHeader {
  std::uint32_t version = kPtfdVersion;
  std::uint32_t batch = 0, grid_h = 0, grid_w = 0, dim = 0;
  std::uint32_t num_classes = 0, image_h = 0, image_w = 0;
  std::uint32_t flags = 0;
};

namespace detail {

inline std::size_t checked_mul(std::size_t a, std::size_t b) {
  if (a != 0 && b > std::numeric_limits<std::size_t>::max() / a) {
    throw Error(ErrorCode::TruncatedFile, "declared payload size overflows");
  }
  return a * b;
}

inline std::size_t mask_bytes_per_image(std::size_t h, std::size_t w) {
  return (checked_mul(h, w) + 7) / 8;
}

}  // namespace detail

inline std::vector<std::uint8_t> encode_ptfd(const FeatureBatch& batch) {
  batch.validate();
  binary::Writer out;
  out.bytes(kPtfdMagic.data(), kPtfdMagic.size());
  out.u32(kPtfdVersion);
  const std::size_t b = batch.batch();
  for (std::size_t v : {b, batch.grid_h(), batch.grid_w(), batch.feature_dim()}) {
    out.u32(static_cast<std::uint32_t>(v));
  }
  out.u32(batch.num_classes);
  out.u32(batch.image_size.height);
  out.u32(batch.image_size.width);
  out.u32(batch.gt_masks ? kPtfdFlagMasks : 0u);
  for (auto l : batch.labels) out.u32(l);
  for (const auto& id : batch.ids) {
    out.u16(static_cast<std::uint16_t>(id.size()));
    out.bytes(id.data(), id.size());
  }
  for (float v : batch.tokens.values()) out.f32(v);
  if (batch.gt_masks) {
    const std::size_t pixels = std::size_t{batch.image_size.height} * batch.image_size.width;
    const auto& m = *batch.gt_masks;
    for (std::size_t i = 0; i < b; ++i) {
      std::vector<std::uint8_t> packed(detail::mask_bytes_per_image(batch.image_size.height,
                                                                    batch.image_size.width), 0);
      auto px = m.slice(i);
      for (std::size_t p = 0; p < pixels; ++p) {
        if (px[p]) packed[p / 8] |= static_cast<std::uint8_t>(0x80u >> (p % 8));
      }
      out.bytes(packed.data(), packed.size());
    }
  }
  return out.buffer();
}

inline FeatureBatch decode_ptfd(std::vector<std::uint8_t> bytes) {
  binary::Reader in(std::move(bytes));
  const std::uint8_t* magic = in.take(4);
  if (!std::equal(kPtfdMagic.begin(), kPtfdMagic.end(), magic)) {
    throw Error(ErrorCode::BadMagic, "not a PTFD file");
  }
  PtfdHeader h;
  h.version = in.u32();
  if (h.version != kPtfdVersion) {
    throw Error(ErrorCode::UnsupportedVersion, "PTFD version " + std::to_string(h.version));
  }
  h.batch = in.u32();
  h.grid_h = in.u32();
  h.grid_w = in.u32();
  h.dim = in.u32();
  h.num_classes = in.u32();
  h.image_h = in.u32();
  h.image_w = in.u32();
  h.flags = in.u32();
  if (h.batch == 0 || h.grid_h == 0 || h.grid_w == 0 || h.dim == 0 || h.num_classes == 0 ||
      h.image_h == 0 || h.image_w == 0) {
    throw Error(ErrorCode::DimMismatch, "header dimension is zero");
  }
  if (h.dim < 2) throw Error(ErrorCode::DimMismatch, "feature dimension must be >= 2");
  if (h.flags & ~kPtfdFlagMasks) throw Error(ErrorCode::DimMismatch, "unknown header flag bits");
  const bool has_masks = (h.flags & kPtfdFlagMasks) != 0;

  using detail::checked_mul;
  const std::size_t n_tokens =
      checked_mul(checked_mul(checked_mul(h.batch, h.grid_h), h.grid_w), h.dim);
  const std::size_t mask_per_image = has_masks ? detail::mask_bytes_per_image(h.image_h, h.image_w) : 0;
  // Lower bound on the remaining payload (ids at least 2 bytes each).
  std::size_t minimum = checked_mul(h.batch, 6);
  for (std::size_t part : {checked_mul(n_tokens, 4), checked_mul(mask_per_image, h.batch)}) {
    if (minimum > std::numeric_limits<std::size_t>::max() - part) {
      throw Error(ErrorCode::TruncatedFile, "declared payload size overflows");
    }
    minimum += part;
  }
  in.need(minimum);

  FeatureBatch batch;
  batch.num_classes = h.num_classes;
  batch.image_size = {h.image_h, h.image_w};
  batch.labels.resize(h.batch);
  for (auto& l : batch.labels) {
    l = in.u32();
    if (l >= h.num_classes) throw Error(ErrorCode::DimMismatch, "label exceeds class count");
  }
  batch.ids.resize(h.batch);
  for (auto& id : batch.ids) {
    const std::uint16_t len = in.u16();
    const std::uint8_t* p = in.take(len);
    id.assign(reinterpret_cast<const char*>(p), len);
  }
  std::vector<float> tokens(n_tokens);
  for (auto& v : tokens) v = in.f32();
  batch.tokens = Tensor<float>({h.batch, h.grid_h, h.grid_w, h.dim}, std::move(tokens));
  if (has_masks) {
    const std::size_t pixels = std::size_t{h.image_h} * h.image_w;
    Tensor<std::uint8_t> masks({h.batch, h.image_h, h.image_w});
    for (std::size_t i = 0; i < h.batch; ++i) {
      const std::uint8_t* packed = in.take(mask_per_image);
      auto px = masks.slice(i);
      for (std::size_t p = 0; p < pixels; ++p) px[p] = (packed[p / 8] >> (7 - p % 8)) & 1u;
      for (std::size_t p = pixels; p < mask_per_image * 8; ++p) {
        if ((packed[p / 8] >> (7 - p % 8)) & 1u) {
          throw Error(ErrorCode::DimMismatch, "nonzero mask padding bits");
        }
      }
    }
    batch.gt_masks = std::move(masks);
  }
  if (in.remaining() != 0) throw Error(ErrorCode::DimMismatch, "trailing bytes after payload");
  batch.validate();
  return batch;
}

inline void write_ptfd(const FeatureBatch& batch, const std::filesystem::path& path) {
  if (path.empty()) throw Error(ErrorCode::IoError, "empty output path");
  binary::write_file(path, encode_ptfd(batch));
}

inline FeatureBatch read_ptfd(const std::filesystem::path& path) {
  return decode_ptfd(binary::read_file(path));
}

}  // namespace protoparts

#endif  // PROTOPARTS_FEATURE_IO_HPP_
