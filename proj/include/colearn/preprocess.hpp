#pragma once

// Raw HU volume -> network input: isotropic resampling, lung padding,
// window normalization, crop/pad to a cube, paired-channel assembly and the
// on-the-fly rotation/translation augmentation. A threshold-based lung
// segmentation is provided for inputs that ship without a lung mask.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <optional>
#include <vector>

#include "colearn/common.hpp"
#include "colearn/tensor.hpp"
#include "colearn/volume.hpp"

namespace colearn {

inline constexpr double kDefaultWindowLo = -1000.0;
inline constexpr double kDefaultWindowHi = 400.0;
inline constexpr double kDefaultPadHu = 170.0;

inline float normalize_hu_value(double hu, double lo = kDefaultWindowLo,
                                double hi = kDefaultWindowHi) {
  double v = (hu - lo) / (hi - lo);
  return float(std::clamp(v, 0.0, 1.0));
}

// Input tensor: [2, S, S, S], channel 0 normalized CT, channel 1 binary mask.
struct InputTensor {
  Tensor<float> data;

  int64_t side() const { return data.shape.size() == 4 ? data.shape[1] : 0; }
};

inline void validate_input_tensor(const InputTensor& t) {
  require(t.data.shape.size() == 4 && t.data.shape[0] == 2,
          "input tensor must have shape [2,S,S,S], got " + shape_str(t.data.shape));
  const int64_t s = t.data.shape[1];
  require(t.data.shape[2] == s && t.data.shape[3] == s,
          "input tensor must be cubic, got " + shape_str(t.data.shape));
  const int64_t vox = s * s * s;
  const float* ct = t.data.ptr();
  const float* mask = t.data.ptr() + vox;
  for (int64_t i = 0; i < vox; ++i) {
    if (!(ct[i] >= 0.f && ct[i] <= 1.f))
      fail_data("input tensor CT channel out of [0,1] at flat index ", i, ": ", ct[i]);
    if (mask[i] != 0.f && mask[i] != 1.f)
      fail_data("input tensor mask channel non-binary at flat index ", i, ": ", mask[i]);
  }
}

struct AugmentSpec {
  double max_rotation_deg = 10.0;
  int max_shift_voxels = 4;
  uint64_t rng_seed = 0;
  // Fill for CT voxels rotated/shifted in from outside the field of view:
  // the normalized 170 HU pad value under the default window.
  float ct_fill = normalize_hu_value(kDefaultPadHu);
};

// ---------------------------------------------------------------------------

namespace detail {

inline float sample_trilinear(const Volume& v, double z, double y, double x) {
  const int64_t D = v.shape[0], H = v.shape[1], W = v.shape[2];
  z = std::clamp(z, 0.0, double(D - 1));
  y = std::clamp(y, 0.0, double(H - 1));
  x = std::clamp(x, 0.0, double(W - 1));
  const int64_t z0 = int64_t(std::floor(z)), y0 = int64_t(std::floor(y)),
                x0 = int64_t(std::floor(x));
  const int64_t z1 = std::min(z0 + 1, D - 1), y1 = std::min(y0 + 1, H - 1),
                x1 = std::min(x0 + 1, W - 1);
  const double fz = z - double(z0), fy = y - double(y0), fx = x - double(x0);

  const double c00 = v.at(z0, y0, x0) * (1 - fx) + v.at(z0, y0, x1) * fx;
  const double c01 = v.at(z0, y1, x0) * (1 - fx) + v.at(z0, y1, x1) * fx;
  const double c10 = v.at(z1, y0, x0) * (1 - fx) + v.at(z1, y0, x1) * fx;
  const double c11 = v.at(z1, y1, x0) * (1 - fx) + v.at(z1, y1, x1) * fx;
  const double c0 = c00 * (1 - fy) + c01 * fy;
  const double c1 = c10 * (1 - fy) + c11 * fy;
  return float(c0 * (1 - fz) + c1 * fz);
}

}  // namespace detail

// Output dims: round(shape_i * spacing_i / target). Voxel centers sit at
// idx*spacing, so the source coordinate of output index i is i*target/spacing.
// Mask volumes are re-binarized at 0.5 after interpolation.
inline Volume resample_isotropic(const Volume& v, double target_spacing_mm) {
  validate_volume(v);
  require(v.spacing_mm.has_value(), "resample_isotropic: volume has no spacing");
  require(target_spacing_mm > 0.0, "resample_isotropic: target spacing must be > 0");
  const auto sp = *v.spacing_mm;

  std::array<int64_t, 3> out_shape;
  for (int i = 0; i < 3; ++i) {
    out_shape[size_t(i)] =
        int64_t(std::llround(double(v.shape[size_t(i)]) * sp[size_t(i)] / target_spacing_mm));
    if (out_shape[size_t(i)] <= 0)
      fail_data("resample_isotropic: degenerate output dimension ", i, " (",
                out_shape[size_t(i)], ")");
  }

  Volume out = Volume::make(out_shape, v.kind,
                            std::array<double, 3>{target_spacing_mm, target_spacing_mm,
                                                  target_spacing_mm});
  const double rz = target_spacing_mm / sp[0];
  const double ry = target_spacing_mm / sp[1];
  const double rx = target_spacing_mm / sp[2];
  const bool binarize = v.kind == VolumeKind::mask;

  parallel_for(out_shape[0], [&](int64_t z) {
    for (int64_t y = 0; y < out_shape[1]; ++y)
      for (int64_t x = 0; x < out_shape[2]; ++x) {
        float val = detail::sample_trilinear(v, double(z) * rz, double(y) * ry, double(x) * rx);
        if (binarize) val = val >= 0.5f ? 1.f : 0.f;
        out.at(z, y, x) = val;
      }
  });
  return out;
}

inline Volume apply_lung_mask(const Volume& v, const Volume& lung_mask,
                              double pad_hu = kDefaultPadHu) {
  require(v.kind == VolumeKind::hu, "apply_lung_mask: volume must be kind hu");
  require(lung_mask.kind == VolumeKind::mask, "apply_lung_mask: mask must be kind mask");
  if (v.shape != lung_mask.shape)
    fail_data("apply_lung_mask: shape mismatch ", v.shape[0], "x", v.shape[1], "x", v.shape[2],
              " vs ", lung_mask.shape[0], "x", lung_mask.shape[1], "x", lung_mask.shape[2]);
  Volume out = v;
  const float pad = float(pad_hu);
  parallel_for(v.numel(), [&](int64_t i) {
    out.data[size_t(i)] = lung_mask.data[size_t(i)] != 0.f ? v.data[size_t(i)] : pad;
  });
  return out;
}

inline Volume normalize_hu(const Volume& v, double lo = kDefaultWindowLo,
                           double hi = kDefaultWindowHi) {
  require(v.kind == VolumeKind::hu, "normalize_hu: volume must be kind hu");
  require(lo < hi, "normalize_hu: window lo must be < hi");
  Volume out = v;
  out.kind = VolumeKind::normalized;
  for (size_t i = 0; i < v.data.size(); ++i)
    if (!std::isfinite(v.data[i]))
      fail_data("normalize_hu: non-finite HU value at flat index ", i);
  parallel_for(v.numel(), [&](int64_t i) {
    out.data[size_t(i)] = normalize_hu_value(v.data[size_t(i)], lo, hi);
  });
  return out;
}

// Center-crop axes above S, symmetric-pad axes below S. Pad value defaults by
// kind: masks 0, normalized volumes the normalized 170 HU pad, raw HU 170.
inline Volume crop_or_pad(const Volume& v, int64_t side,
                          std::optional<float> pad_value = std::nullopt) {
  validate_volume(v);
  require(side >= 1, "crop_or_pad: side must be >= 1");
  float pad;
  if (pad_value) pad = *pad_value;
  else if (v.kind == VolumeKind::mask) pad = 0.f;
  else if (v.kind == VolumeKind::normalized) pad = normalize_hu_value(kDefaultPadHu);
  else pad = float(kDefaultPadHu);

  // Per axis: source start in input coords, dest start in output coords.
  std::array<int64_t, 3> src0, dst0, count;
  for (int i = 0; i < 3; ++i) {
    const int64_t n = v.shape[size_t(i)];
    if (n >= side) {
      src0[size_t(i)] = (n - side) / 2;
      dst0[size_t(i)] = 0;
      count[size_t(i)] = side;
    } else {
      src0[size_t(i)] = 0;
      dst0[size_t(i)] = (side - n) / 2;
      count[size_t(i)] = n;
    }
  }

  Volume out = Volume::make({side, side, side}, v.kind, v.spacing_mm, pad);
  parallel_for(count[0], [&](int64_t z) {
    for (int64_t y = 0; y < count[1]; ++y)
      for (int64_t x = 0; x < count[2]; ++x)
        out.at(dst0[0] + z, dst0[1] + y, dst0[2] + x) =
            v.at(src0[0] + z, src0[1] + y, src0[2] + x);
  });
  return out;
}

inline InputTensor assemble_input(const Volume& ct, const Volume& nodule_mask) {
  require(ct.kind == VolumeKind::normalized, "assemble_input: CT volume must be normalized");
  require(nodule_mask.kind == VolumeKind::mask, "assemble_input: mask volume must be kind mask");
  validate_volume(ct);
  validate_volume(nodule_mask);
  if (ct.shape != nodule_mask.shape)
    fail_data("assemble_input: shape mismatch between CT and mask");
  require(ct.shape[0] == ct.shape[1] && ct.shape[1] == ct.shape[2],
          "assemble_input: volumes must be cubic");

  const int64_t s = ct.shape[0];
  InputTensor t;
  t.data = Tensor<float>({2, s, s, s});
  std::copy(ct.data.begin(), ct.data.end(), t.data.data.begin());
  std::copy(nodule_mask.data.begin(), nodule_mask.data.end(),
            t.data.data.begin() + ct.numel());
  return t;
}

inline Volume channel_volume(const InputTensor& t, int channel) {
  require(channel == 0 || channel == 1, "channel must be 0 or 1");
  const int64_t s = t.side();
  Volume v = Volume::make({s, s, s},
                          channel == 0 ? VolumeKind::normalized : VolumeKind::mask);
  const int64_t vox = s * s * s;
  std::copy(t.data.data.begin() + channel * vox, t.data.data.begin() + (channel + 1) * vox,
            v.data.begin());
  return v;
}

// Rotation about the z axis by U(-max, +max) degrees, then an integer shift
// per axis in U{-m..m}. Both channels get the identical transform; the CT
// channel is interpolated trilinearly, the mask nearest-neighbor.
inline InputTensor augment(const InputTensor& t, const AugmentSpec& spec) {
  validate_input_tensor(t);
  Rng rng(spec.rng_seed);
  const double angle_deg = spec.max_rotation_deg > 0
                               ? rng.uniform(-spec.max_rotation_deg, spec.max_rotation_deg)
                               : 0.0;
  const int m = spec.max_shift_voxels;
  const int64_t dz = m > 0 ? rng.uniform_int(-m, m) : 0;
  const int64_t dy = m > 0 ? rng.uniform_int(-m, m) : 0;
  const int64_t dx = m > 0 ? rng.uniform_int(-m, m) : 0;

  const int64_t s = t.side();
  const int64_t vox = s * s * s;
  const double theta = angle_deg * 3.14159265358979323846 / 180.0;
  const double c = std::cos(theta), sn = std::sin(theta);
  const double cy = double(s - 1) / 2.0, cx = double(s - 1) / 2.0;

  InputTensor out;
  out.data = Tensor<float>({2, s, s, s});
  const float* ct_in = t.data.ptr();
  const float* mk_in = t.data.ptr() + vox;
  float* ct_out = out.data.ptr();
  float* mk_out = out.data.ptr() + vox;

  parallel_for(s, [&](int64_t z) {
    const int64_t sz = z - dz;
    for (int64_t y = 0; y < s; ++y)
      for (int64_t x = 0; x < s; ++x) {
        const int64_t idx = (z * s + y) * s + x;
        if (sz < 0 || sz >= s) {
          ct_out[idx] = spec.ct_fill;
          mk_out[idx] = 0.f;
          continue;
        }
        // Undo the shift, then rotate the source coordinate by -theta.
        const double ry = double(y - dy) - cy;
        const double rx = double(x - dx) - cx;
        const double src_y = c * ry + sn * rx + cy;
        const double src_x = -sn * ry + c * rx + cx;
        if (src_y < -0.5 || src_y > double(s - 1) + 0.5 || src_x < -0.5 ||
            src_x > double(s - 1) + 0.5) {
          ct_out[idx] = spec.ct_fill;
          mk_out[idx] = 0.f;
          continue;
        }
        // CT: trilinear within the slice (z is integral after the shift).
        {
          const double yc = std::clamp(src_y, 0.0, double(s - 1));
          const double xc = std::clamp(src_x, 0.0, double(s - 1));
          const int64_t y0 = int64_t(std::floor(yc)), x0 = int64_t(std::floor(xc));
          const int64_t y1 = std::min(y0 + 1, s - 1), x1 = std::min(x0 + 1, s - 1);
          const double fy = yc - double(y0), fx = xc - double(x0);
          auto v = [&](int64_t yy, int64_t xx) {
            return double(ct_in[(sz * s + yy) * s + xx]);
          };
          const double c0 = v(y0, x0) * (1 - fx) + v(y0, x1) * fx;
          const double c1 = v(y1, x0) * (1 - fx) + v(y1, x1) * fx;
          ct_out[idx] = float(c0 * (1 - fy) + c1 * fy);
        }
        // Mask: nearest neighbor, re-binarized.
        {
          const int64_t yn = int64_t(std::llround(src_y));
          const int64_t xn = int64_t(std::llround(src_x));
          if (yn < 0 || yn >= s || xn < 0 || xn >= s) mk_out[idx] = 0.f;
          else mk_out[idx] = mk_in[(sz * s + yn) * s + xn] >= 0.5f ? 1.f : 0.f;
        }
      }
  });
  return out;
}

// ---------------------------------------------------------------------------
// Fallback lung segmentation: air threshold at -320 HU, drop 6-connected
// components that touch any x/y border face, then morphological closing with
// a euclidean ball of radius 2.

namespace detail {

inline std::vector<std::array<int64_t, 3>> ball_offsets(double radius) {
  std::vector<std::array<int64_t, 3>> out;
  const int64_t r = int64_t(std::floor(radius));
  for (int64_t z = -r; z <= r; ++z)
    for (int64_t y = -r; y <= r; ++y)
      for (int64_t x = -r; x <= r; ++x)
        if (double(z * z + y * y + x * x) <= radius * radius + 1e-9)
          out.push_back({z, y, x});
  return out;
}

inline std::vector<uint8_t> binary_dilate(const std::vector<uint8_t>& in,
                                          const std::array<int64_t, 3>& sh,
                                          const std::vector<std::array<int64_t, 3>>& offs) {
  std::vector<uint8_t> out(in.size(), 0);
  const int64_t D = sh[0], H = sh[1], W = sh[2];
  parallel_for(D, [&](int64_t z) {
    for (int64_t y = 0; y < H; ++y)
      for (int64_t x = 0; x < W; ++x) {
        uint8_t v = 0;
        for (const auto& o : offs) {
          const int64_t zz = z + o[0], yy = y + o[1], xx = x + o[2];
          if (zz < 0 || zz >= D || yy < 0 || yy >= H || xx < 0 || xx >= W) continue;
          if (in[size_t((zz * H + yy) * W + xx)]) {
            v = 1;
            break;
          }
        }
        out[size_t((z * H + y) * W + x)] = v;
      }
  });
  return out;
}

inline std::vector<uint8_t> binary_erode(const std::vector<uint8_t>& in,
                                         const std::array<int64_t, 3>& sh,
                                         const std::vector<std::array<int64_t, 3>>& offs) {
  std::vector<uint8_t> out(in.size(), 0);
  const int64_t D = sh[0], H = sh[1], W = sh[2];
  parallel_for(D, [&](int64_t z) {
    for (int64_t y = 0; y < H; ++y)
      for (int64_t x = 0; x < W; ++x) {
        uint8_t v = 1;
        for (const auto& o : offs) {
          const int64_t zz = z + o[0], yy = y + o[1], xx = x + o[2];
          if (zz < 0 || zz >= D || yy < 0 || yy >= H || xx < 0 || xx >= W) {
            v = 0;  // treat outside as background
            break;
          }
          if (!in[size_t((zz * H + yy) * W + xx)]) {
            v = 0;
            break;
          }
        }
        out[size_t((z * H + y) * W + x)] = v;
      }
  });
  return out;
}

}  // namespace detail

inline Volume fallback_lung_segment(const Volume& v, double threshold_hu = -320.0,
                                    double closing_radius = 2.0) {
  require(v.kind == VolumeKind::hu, "fallback_lung_segment: volume must be kind hu");
  validate_volume(v);
  const int64_t D = v.shape[0], H = v.shape[1], W = v.shape[2];
  const int64_t n = v.numel();

  std::vector<uint8_t> air(static_cast<size_t>(n));
  for (int64_t i = 0; i < n; ++i) air[size_t(i)] = v.data[size_t(i)] < float(threshold_hu);

  // 6-connected flood fill labeling; components touching an x/y border face
  // are outside-body air and get dropped.
  std::vector<int32_t> label(size_t(n), 0);
  int32_t next = 0;
  std::vector<int64_t> stack;
  std::vector<uint8_t> touches_border;
  touches_border.push_back(0);  // label 0 unused
  for (int64_t start = 0; start < n; ++start) {
    if (!air[size_t(start)] || label[size_t(start)]) continue;
    const int32_t lab = ++next;
    touches_border.push_back(0);
    stack.assign(1, start);
    label[size_t(start)] = lab;
    while (!stack.empty()) {
      const int64_t cur = stack.back();
      stack.pop_back();
      const int64_t z = cur / (H * W), y = (cur / W) % H, x = cur % W;
      if (y == 0 || y == H - 1 || x == 0 || x == W - 1) touches_border[size_t(lab)] = 1;
      const int64_t nb[6] = {cur - H * W, cur + H * W, cur - W, cur + W, cur - 1, cur + 1};
      const bool ok[6] = {z > 0, z < D - 1, y > 0, y < H - 1, x > 0, x < W - 1};
      for (int k = 0; k < 6; ++k) {
        if (!ok[k]) continue;
        const int64_t j = nb[k];
        if (air[size_t(j)] && !label[size_t(j)]) {
          label[size_t(j)] = lab;
          stack.push_back(j);
        }
      }
    }
  }

  std::vector<uint8_t> kept(size_t(n), 0);
  for (int64_t i = 0; i < n; ++i) {
    const int32_t lab = label[size_t(i)];
    if (lab && !touches_border[size_t(lab)]) kept[size_t(i)] = 1;
  }

  const auto offs = detail::ball_offsets(closing_radius);
  auto closed = detail::binary_erode(detail::binary_dilate(kept, v.shape, offs), v.shape, offs);

  Volume mask = Volume::make(v.shape, VolumeKind::mask, v.spacing_mm);
  for (int64_t i = 0; i < n; ++i) mask.data[size_t(i)] = closed[size_t(i)] ? 1.f : 0.f;
  return mask;
}

}  // namespace colearn
