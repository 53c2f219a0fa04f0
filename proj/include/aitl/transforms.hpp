#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

#include "aitl/rng.hpp"
#include "aitl/tensor.hpp"

namespace aitl {

// Stable ids 0..19, used for one-hot encoding everywhere.
enum class TransformKind : int {
  Admix = 0,
  Scale = 1,
  AdmixAndScale = 2,
  Brightness = 3,
  Color = 4,
  Contrast = 5,
  Sharpness = 6,
  Invert = 7,
  Hue = 8,
  Saturation = 9,
  Gamma = 10,
  Crop = 11,
  Resize = 12,
  Rotate = 13,
  ShearX = 14,
  ShearY = 15,
  TranslateX = 16,
  TranslateY = 17,
  Reshape = 18,
  Cutout = 19,
};

constexpr int kNumTransformKinds = 20;
constexpr float kAdmixEta = 0.2f;

inline const char* kind_name(TransformKind k) {
  static const char* names[kNumTransformKinds] = {
      "Admix",  "Scale",      "AdmixAndScale", "Brightness", "Color",      "Contrast",   "Sharpness",
      "Invert", "Hue",        "Saturation",    "Gamma",      "Crop",       "Resize",     "Rotate",
      "ShearX", "ShearY",     "TranslateX",    "TranslateY", "Reshape",    "Cutout"};
  return names[static_cast<int>(k)];
}

inline TransformKind kind_from_id(int id) {
  if (id < 0 || id >= kNumTransformKinds) throw std::invalid_argument("unknown transform kind id " + std::to_string(id));
  return static_cast<TransformKind>(id);
}

inline std::vector<float> kind_onehot(TransformKind k) {
  std::vector<float> v(kNumTransformKinds, 0.0f);
  v[static_cast<size_t>(k)] = 1.0f;
  return v;
}

inline TransformKind onehot_argmax(const std::vector<float>& v) {
  size_t best = 0;
  for (size_t i = 1; i < v.size(); ++i)
    if (v[i] > v[best]) best = i;  // ties keep the lowest id
  return kind_from_id(static_cast<int>(best));
}

/// The reduced 12-op candidate set used by the Random baseline
/// (geometry ops plus the scale/admix family).
inline const std::vector<TransformKind>& random_subset_kinds() {
  static const std::vector<TransformKind> kinds = {
      TransformKind::Admix,      TransformKind::Scale,      TransformKind::AdmixAndScale, TransformKind::Crop,
      TransformKind::Resize,     TransformKind::Rotate,     TransformKind::ShearX,        TransformKind::ShearY,
      TransformKind::TranslateX, TransformKind::TranslateY, TransformKind::Reshape,       TransformKind::Cutout};
  return kinds;
}

/// Pixel-denominated parameters per image size. The desk profile keeps the
/// 299-pixel ratios (330/299, 279/299, 60/299) at 32x32.
struct ScaleProfile {
  std::string name = "desk";
  int image_size = 32;
  int resize_hi = 36;
  int crop_lo = 28;
  int cutout = 6;
  int mix_pool = 0;  // number of aux images available to Admix sampling

  static ScaleProfile desk(int mix_pool = 0) {
    ScaleProfile p;
    p.mix_pool = mix_pool;
    return p;
  }
  static ScaleProfile paper299(int mix_pool = 0) {
    ScaleProfile p;
    p.name = "paper-299";
    p.image_size = 299;
    p.resize_hi = 330;
    p.crop_lo = 279;
    p.cutout = 60;
    p.mix_pool = mix_pool;
    return p;
  }
};

/// Frozen parameters of one transformation application. Self-contained:
/// replay needs only (params, image, mix pool).
struct TransformParams {
  TransformKind kind = TransformKind::Invert;
  std::vector<float> magnitudes;
  int aux_image = -1;  // admix family
  int cut_y = 0, cut_x = 0;
};

struct AffineMatrix {
  float a11 = 1, a12 = 0, a13 = 0;
  float a21 = 0, a22 = 1, a23 = 0;
};

struct MixPool {
  const std::vector<Tensor>* images = nullptr;
  int size() const { return images ? static_cast<int>(images->size()) : 0; }
  const Tensor& get(int i) const {
    if (!images || i < 0 || i >= size()) throw std::invalid_argument("mix pool: missing aux image");
    return (*images)[static_cast<size_t>(i)];
  }
};

using TransformCombo = std::vector<TransformKind>;

// ---------------------------------------------------------------------------
// Parameter sampling
// ---------------------------------------------------------------------------

inline TransformParams sample_params(TransformKind kind, RngStream& rng, const ScaleProfile& prof) {
  TransformParams p;
  p.kind = kind;
  const float S = static_cast<float>(prof.image_size);
  switch (kind) {
    case TransformKind::Admix:
      p.magnitudes = {kAdmixEta};
      p.aux_image = prof.mix_pool > 0 ? static_cast<int>(rng.uniform_int(prof.mix_pool)) : -1;
      break;
    case TransformKind::Scale:
      p.magnitudes = {rng.uniform(0.0f, 4.0f)};
      break;
    case TransformKind::AdmixAndScale:
      p.magnitudes = {kAdmixEta, rng.uniform(0.0f, 4.0f)};
      p.aux_image = prof.mix_pool > 0 ? static_cast<int>(rng.uniform_int(prof.mix_pool)) : -1;
      break;
    case TransformKind::Brightness:
    case TransformKind::Color:
    case TransformKind::Contrast:
    case TransformKind::Sharpness:
    case TransformKind::Saturation:
      p.magnitudes = {rng.uniform(0.5f, 1.5f)};
      break;
    case TransformKind::Invert:
      break;
    case TransformKind::Hue:
      p.magnitudes = {rng.uniform(-0.2f, 0.2f)};
      break;
    case TransformKind::Gamma:
      p.magnitudes = {rng.uniform(0.6f, 1.4f)};
      break;
    case TransformKind::Crop: {
      float lo = static_cast<float>(prof.crop_lo);
      float h = rng.uniform(lo, S);
      float w = rng.uniform(lo, S);
      float y0 = rng.uniform(0.0f, S - h);
      float x0 = rng.uniform(0.0f, S - w);
      p.magnitudes = {h, w, y0, x0};
      break;
    }
    case TransformKind::Resize: {
      float hi = static_cast<float>(prof.resize_hi);
      float h = rng.uniform(S, hi);
      float w = rng.uniform(S, hi);
      float oy = rng.uniform(0.0f, hi - h);
      float ox = rng.uniform(0.0f, hi - w);
      p.magnitudes = {h, w, oy, ox, hi};
      break;
    }
    case TransformKind::Rotate:
      p.magnitudes = {rng.uniform(-30.0f, 30.0f)};
      break;
    case TransformKind::ShearX:
    case TransformKind::ShearY:
      p.magnitudes = {rng.uniform(-0.5f, 0.5f)};
      break;
    case TransformKind::TranslateX:
    case TransformKind::TranslateY:
      p.magnitudes = {rng.uniform(-0.4f, 0.4f)};
      break;
    case TransformKind::Reshape:
      p.magnitudes = {rng.uniform(0.5f, 1.5f),  rng.uniform(-0.5f, 0.5f), rng.uniform(-0.5f, 0.5f),
                      rng.uniform(-0.5f, 0.5f), rng.uniform(0.5f, 1.5f),  rng.uniform(-0.5f, 0.5f)};
      break;
    case TransformKind::Cutout: {
      int k = prof.cutout;
      p.magnitudes = {static_cast<float>(k)};
      p.cut_y = static_cast<int>(rng.uniform_int(std::max(1, prof.image_size - k + 1)));
      p.cut_x = static_cast<int>(rng.uniform_int(std::max(1, prof.image_size - k + 1)));
      break;
    }
  }
  return p;
}

// ---------------------------------------------------------------------------
// Affine matrices (pixel units; translations converted from size fractions)
// ---------------------------------------------------------------------------

inline bool is_affine_kind(TransformKind k) {
  switch (k) {
    case TransformKind::Rotate:
    case TransformKind::ShearX:
    case TransformKind::ShearY:
    case TransformKind::TranslateX:
    case TransformKind::TranslateY:
    case TransformKind::Reshape:
      return true;
    default:
      return false;
  }
}

inline AffineMatrix affine_matrix(const TransformParams& p, int height, int width) {
  AffineMatrix A;
  const float W = static_cast<float>(width), H = static_cast<float>(height);
  switch (p.kind) {
    case TransformKind::Rotate: {
      float th = p.magnitudes.at(0) * 3.14159265358979323846f / 180.0f;
      A.a11 = std::cos(th);
      A.a12 = -std::sin(th);
      A.a21 = std::sin(th);
      A.a22 = std::cos(th);
      break;
    }
    case TransformKind::ShearX:
      A.a12 = p.magnitudes.at(0);
      break;
    case TransformKind::ShearY:
      A.a21 = p.magnitudes.at(0);
      break;
    case TransformKind::TranslateX:
      A.a13 = p.magnitudes.at(0) * W;
      break;
    case TransformKind::TranslateY:
      A.a23 = p.magnitudes.at(0) * H;
      break;
    case TransformKind::Reshape:
      A.a11 = p.magnitudes.at(0);
      A.a12 = p.magnitudes.at(1);
      A.a13 = p.magnitudes.at(2) * W;
      A.a21 = p.magnitudes.at(3);
      A.a22 = p.magnitudes.at(4);
      A.a23 = p.magnitudes.at(5) * H;
      break;
    default:
      throw std::invalid_argument(std::string("affine_matrix: non-affine kind ") + kind_name(p.kind));
  }
  return A;
}

// ---------------------------------------------------------------------------
// Bilinear resampling (zero padding outside the source)
// ---------------------------------------------------------------------------

namespace detail {

// CoordFn: (yo, xo) -> pair of source coords (sy, sx)
template <class CoordFn>
Tensor resample_gather(const Tensor& img, int ho, int wo, CoordFn coord) {
  const int hi = img.shape[0], wi = img.shape[1], C = img.shape[2];
  Tensor out({ho, wo, C});
  for (int yo = 0; yo < ho; ++yo) {
    for (int xo = 0; xo < wo; ++xo) {
      auto [sy, sx] = coord(yo, xo);
      int y0 = static_cast<int>(std::floor(sy)), x0 = static_cast<int>(std::floor(sx));
      float dy = static_cast<float>(sy - y0), dx = static_cast<float>(sx - x0);
      for (int c = 0; c < C; ++c) {
        float acc = 0.0f;
        for (int t = 0; t < 4; ++t) {
          int yy = y0 + (t >> 1), xx = x0 + (t & 1);
          if (yy < 0 || yy >= hi || xx < 0 || xx >= wi) continue;
          float w = ((t >> 1) ? dy : 1.0f - dy) * ((t & 1) ? dx : 1.0f - dx);
          acc += w * img.at(yy, xx, c);
        }
        out.at(yo, xo, c) = acc;
      }
    }
  }
  return out;
}

template <class CoordFn>
Tensor resample_scatter(const Tensor& gout, int hi, int wi, CoordFn coord) {
  const int ho = gout.shape[0], wo = gout.shape[1], C = gout.shape[2];
  Tensor gin({hi, wi, C});
  for (int yo = 0; yo < ho; ++yo) {
    for (int xo = 0; xo < wo; ++xo) {
      auto [sy, sx] = coord(yo, xo);
      int y0 = static_cast<int>(std::floor(sy)), x0 = static_cast<int>(std::floor(sx));
      float dy = static_cast<float>(sy - y0), dx = static_cast<float>(sx - x0);
      for (int c = 0; c < C; ++c) {
        float g = gout.at(yo, xo, c);
        if (g == 0.0f) continue;
        for (int t = 0; t < 4; ++t) {
          int yy = y0 + (t >> 1), xx = x0 + (t & 1);
          if (yy < 0 || yy >= hi || xx < 0 || xx >= wi) continue;
          float w = ((t >> 1) ? dy : 1.0f - dy) * ((t & 1) ? dx : 1.0f - dx);
          gin.at(yy, xx, c) += w * g;
        }
      }
    }
  }
  return gin;
}

struct AffineCoord {
  // inverse map from output pixel to source pixel, both center-origin
  double b11, b12, b21, b22, tx, ty, cx, cy;
  std::pair<double, double> operator()(int yo, int xo) const {
    double ux = xo - cx - tx, uy = yo - cy - ty;
    return {b21 * ux + b22 * uy + cy, b11 * ux + b12 * uy + cx};
  }
};

inline AffineCoord affine_coord(const AffineMatrix& A, int h, int w) {
  double det = static_cast<double>(A.a11) * A.a22 - static_cast<double>(A.a12) * A.a21;
  if (std::fabs(det) < 1e-8) throw std::invalid_argument("warp_bilinear: singular affine matrix");
  AffineCoord f{};
  // 2x2 inverse: rows give source x then source y
  f.b11 = A.a22 / det;
  f.b12 = -A.a12 / det;
  f.b21 = -A.a21 / det;
  f.b22 = A.a11 / det;
  f.tx = A.a13;
  f.ty = A.a23;
  f.cx = (w - 1) * 0.5;
  f.cy = (h - 1) * 0.5;
  return f;
}

struct ScaledCoord {
  // per-axis linear map: s = (o + 0.5) * scale - 0.5 + offset
  double sy_scale, sx_scale, sy_off, sx_off;
  std::pair<double, double> operator()(int yo, int xo) const {
    return {(yo + 0.5) * sy_scale - 0.5 + sy_off, (xo + 0.5) * sx_scale - 0.5 + sx_off};
  }
};

}  // namespace detail

/// Affine warp about the image center. Output pixel (x', y') is the bilinear
/// sample of the input at A^-1 (x', y'); samples outside the input are zero.
inline Tensor warp_bilinear(const Tensor& img, const AffineMatrix& A) {
  auto f = detail::affine_coord(A, img.shape[0], img.shape[1]);
  return detail::resample_gather(img, img.shape[0], img.shape[1], f);
}

inline Tensor warp_bilinear_vjp(const Tensor& img, const AffineMatrix& A, const Tensor& upstream) {
  auto f = detail::affine_coord(A, img.shape[0], img.shape[1]);
  return detail::resample_scatter(upstream, img.shape[0], img.shape[1], f);
}

// ---------------------------------------------------------------------------
// HSV hue / saturation (per-pixel forward + hand-derived adjoint)
// ---------------------------------------------------------------------------

namespace detail {

struct HsvMode {
  bool hue;  // hue shift if true, saturation scale otherwise
  float alpha;
};

// Per-pixel forward. Stores the intermediates the adjoint needs.
struct HsvPixel {
  int iv, im;        // argmax/argmin channel (first wins on ties)
  float v, c, q, h6;  // value, chroma, pre-wrap hue numerator
  float s, s2, c2;   // saturation path
  float h6b, w, tri, x;
  int sector;
};

inline void hsv_forward_pixel(const float rgb[3], const HsvMode& mode, float out[3], HsvPixel& px) {
  px.iv = 0;
  px.im = 0;
  for (int c = 1; c < 3; ++c) {
    if (rgb[c] > rgb[px.iv]) px.iv = c;
    if (rgb[c] < rgb[px.im]) px.im = c;
  }
  px.v = rgb[px.iv];
  float mn = rgb[px.im];
  px.c = px.v - mn;

  px.q = 0.0f;
  px.h6 = 0.0f;
  if (px.c > 0.0f) {
    if (px.iv == 0) {
      px.q = (rgb[1] - rgb[2]) / px.c;
      px.h6 = px.q < 0.0f ? px.q + 6.0f : px.q;
    } else if (px.iv == 1) {
      px.q = (rgb[2] - rgb[0]) / px.c;
      px.h6 = px.q + 2.0f;
    } else {
      px.q = (rgb[0] - rgb[1]) / px.c;
      px.h6 = px.q + 4.0f;
    }
  }
  float h = px.h6 / 6.0f;

  float h2, v2;
  if (mode.hue) {
    h2 = h + mode.alpha;
    h2 -= std::floor(h2);
    px.c2 = px.c;
    v2 = px.v;
  } else {
    px.s = px.v > 1e-12f ? px.c / px.v : 0.0f;
    px.s2 = std::min(mode.alpha * px.s, 1.0f);
    px.c2 = px.s2 * px.v;
    v2 = px.v;
    h2 = h;
  }

  px.h6b = 6.0f * h2;
  if (px.h6b >= 6.0f) px.h6b = 0.0f;  // frac rounding guard
  px.sector = std::min(static_cast<int>(px.h6b), 5);
  px.w = px.h6b - 2.0f * std::floor(px.h6b * 0.5f);
  px.tri = 1.0f - std::fabs(px.w - 1.0f);
  px.x = px.c2 * px.tri;

  float m2 = v2 - px.c2;
  float base[3] = {0, 0, 0};
  switch (px.sector) {
    case 0: base[0] = px.c2; base[1] = px.x; break;
    case 1: base[0] = px.x; base[1] = px.c2; break;
    case 2: base[1] = px.c2; base[2] = px.x; break;
    case 3: base[1] = px.x; base[2] = px.c2; break;
    case 4: base[0] = px.x; base[2] = px.c2; break;
    default: base[0] = px.c2; base[2] = px.x; break;
  }
  for (int c = 0; c < 3; ++c) out[c] = base[c] + m2;
}

inline void hsv_adjoint_pixel(const float g[3], const HsvMode& mode, const HsvPixel& px, float dx[3]) {
  dx[0] = dx[1] = dx[2] = 0.0f;
  float dm2 = g[0] + g[1] + g[2];
  float dc2 = 0.0f, dX = 0.0f;
  switch (px.sector) {
    case 0: dc2 += g[0]; dX += g[1]; break;
    case 1: dc2 += g[1]; dX += g[0]; break;
    case 2: dc2 += g[1]; dX += g[2]; break;
    case 3: dc2 += g[2]; dX += g[1]; break;
    case 4: dc2 += g[2]; dX += g[0]; break;
    default: dc2 += g[0]; dX += g[2]; break;
  }
  // out = base(c2, X) + (v2 - c2)
  float dv = dm2;
  dc2 += px.tri * dX - dm2;
  float dtri = px.c2 * dX;
  float dw = (px.w > 1.0f ? -1.0f : 1.0f) * dtri;  // tri = 1 - |w-1|
  float dh6b = dw;
  float dh2 = 6.0f * dh6b;

  float dh, dc;
  if (mode.hue) {
    dh = dh2;
    dc = dc2;
  } else {
    dh = dh2;
    float ds2 = px.v * dc2;
    dv += px.s2 * dc2;
    float ds = (mode.alpha * px.s < 1.0f) ? mode.alpha * ds2 : 0.0f;
    if (px.v > 1e-12f) {
      dc = ds / px.v;
      dv -= (px.s / px.v) * ds;
    } else {
      dc = 0.0f;
    }
  }

  // back through h = h6/6 and the per-branch hue numerator
  float dh6 = dh / 6.0f;
  if (px.c > 0.0f) {
    float dq = dh6;
    float inv_c = 1.0f / px.c;
    if (px.iv == 0) {
      dx[1] += dq * inv_c;
      dx[2] -= dq * inv_c;
    } else if (px.iv == 1) {
      dx[2] += dq * inv_c;
      dx[0] -= dq * inv_c;
    } else {
      dx[0] += dq * inv_c;
      dx[1] -= dq * inv_c;
    }
    dc -= px.q * inv_c * dq;
  }

  // c = v - min, v = x[iv], min = x[im]
  dv += dc;
  float dmn = -dc;
  dx[px.iv] += dv;
  dx[px.im] += dmn;
}

inline Tensor hsv_apply(const Tensor& img, const HsvMode& mode) {
  Tensor out(img.shape);
  HsvPixel px;
  const size_t n = img.data.size() / 3;
  for (size_t p = 0; p < n; ++p) {
    float rgb[3] = {img.data[3 * p], img.data[3 * p + 1], img.data[3 * p + 2]};
    float o[3];
    hsv_forward_pixel(rgb, mode, o, px);
    for (int c = 0; c < 3; ++c) out.data[3 * p + c] = o[c];
  }
  return out;
}

inline Tensor hsv_vjp(const Tensor& img, const HsvMode& mode, const Tensor& upstream) {
  Tensor gin(img.shape);
  HsvPixel px;
  const size_t n = img.data.size() / 3;
  for (size_t p = 0; p < n; ++p) {
    float rgb[3] = {img.data[3 * p], img.data[3 * p + 1], img.data[3 * p + 2]};
    float o[3];
    hsv_forward_pixel(rgb, mode, o, px);
    float g[3] = {upstream.data[3 * p], upstream.data[3 * p + 1], upstream.data[3 * p + 2]};
    float d[3];
    hsv_adjoint_pixel(g, mode, px, d);
    for (int c = 0; c < 3; ++c) gin.data[3 * p + c] = d[c];
  }
  return gin;
}

constexpr float kLumR = 0.299f, kLumG = 0.587f, kLumB = 0.114f;

inline Tensor box_smooth(const Tensor& img) {
  const int h = img.shape[0], w = img.shape[1], C = img.shape[2];
  Tensor out(img.shape);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      int y0 = std::max(0, y - 1), y1 = std::min(h - 1, y + 1);
      int x0 = std::max(0, x - 1), x1 = std::min(w - 1, x + 1);
      float inv_n = 1.0f / static_cast<float>((y1 - y0 + 1) * (x1 - x0 + 1));
      for (int c = 0; c < C; ++c) {
        float s = 0.0f;
        for (int yy = y0; yy <= y1; ++yy)
          for (int xx = x0; xx <= x1; ++xx) s += img.at(yy, xx, c);
        out.at(y, x, c) = s * inv_n;
      }
    }
  return out;
}

inline Tensor box_smooth_transpose(const Tensor& g) {
  const int h = g.shape[0], w = g.shape[1], C = g.shape[2];
  Tensor out(g.shape);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      int y0 = std::max(0, y - 1), y1 = std::min(h - 1, y + 1);
      int x0 = std::max(0, x - 1), x1 = std::min(w - 1, x + 1);
      float inv_n = 1.0f / static_cast<float>((y1 - y0 + 1) * (x1 - x0 + 1));
      for (int c = 0; c < C; ++c) {
        float v = g.at(y, x, c) * inv_n;
        if (v == 0.0f) continue;
        for (int yy = y0; yy <= y1; ++yy)
          for (int xx = x0; xx <= x1; ++xx) out.at(yy, xx, c) += v;
      }
    }
  return out;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Forward application and per-op VJP
// ---------------------------------------------------------------------------

namespace detail {

inline bool clamps_output(TransformKind k) {
  switch (k) {
    case TransformKind::Admix:
    case TransformKind::Scale:
    case TransformKind::AdmixAndScale:
      return false;  // gradient-augmentation copies stay unclamped
    default:
      return true;
  }
}

// Pre-clamp result of one op.
inline Tensor apply_raw(const TransformParams& p, const Tensor& img, const MixPool& pool) {
  const int H = img.shape[0], W = img.shape[1];
  switch (p.kind) {
    case TransformKind::Admix: {
      if (p.aux_image < 0) throw std::invalid_argument("Admix: missing aux image");
      const Tensor& aux = pool.get(p.aux_image);
      Tensor out = img;
      float eta = p.magnitudes.at(0);
      for (size_t i = 0; i < out.data.size(); ++i) out.data[i] += eta * aux.data[i];
      return out;
    }
    case TransformKind::Scale: {
      float f = std::pow(2.0f, -p.magnitudes.at(0));
      Tensor out = img;
      for (float& v : out.data) v *= f;
      return out;
    }
    case TransformKind::AdmixAndScale: {
      if (p.aux_image < 0) throw std::invalid_argument("AdmixAndScale: missing aux image");
      const Tensor& aux = pool.get(p.aux_image);
      float eta = p.magnitudes.at(0);
      float f = std::pow(2.0f, -p.magnitudes.at(1));
      Tensor out = img;
      for (size_t i = 0; i < out.data.size(); ++i) out.data[i] = (out.data[i] + eta * aux.data[i]) * f;
      return out;
    }
    case TransformKind::Brightness: {
      float a = p.magnitudes.at(0);
      Tensor out = img;
      for (float& v : out.data) v *= a;
      return out;
    }
    case TransformKind::Color: {
      float a = p.magnitudes.at(0);
      Tensor out(img.shape);
      for (size_t pix = 0; pix < img.data.size(); pix += 3) {
        float L = kLumR * img.data[pix] + kLumG * img.data[pix + 1] + kLumB * img.data[pix + 2];
        for (int c = 0; c < 3; ++c) out.data[pix + c] = L + a * (img.data[pix + c] - L);
      }
      return out;
    }
    case TransformKind::Contrast: {
      float a = p.magnitudes.at(0);
      double mean = 0.0;
      for (size_t pix = 0; pix < img.data.size(); pix += 3)
        mean += kLumR * img.data[pix] + kLumG * img.data[pix + 1] + kLumB * img.data[pix + 2];
      float m = static_cast<float>(mean / (img.data.size() / 3));
      Tensor out = img;
      for (float& v : out.data) v = m + a * (v - m);
      return out;
    }
    case TransformKind::Sharpness: {
      float a = p.magnitudes.at(0);
      Tensor sm = box_smooth(img);
      Tensor out(img.shape);
      for (size_t i = 0; i < img.data.size(); ++i) out.data[i] = sm.data[i] + a * (img.data[i] - sm.data[i]);
      return out;
    }
    case TransformKind::Invert: {
      Tensor out = img;
      for (float& v : out.data) v = 1.0f - v;
      return out;
    }
    case TransformKind::Hue:
      return hsv_apply(img, {true, p.magnitudes.at(0)});
    case TransformKind::Saturation:
      return hsv_apply(img, {false, p.magnitudes.at(0)});
    case TransformKind::Gamma: {
      float a = p.magnitudes.at(0);
      Tensor out = img;
      for (float& v : out.data) v = std::pow(std::max(v, 0.0f), a);
      return out;
    }
    case TransformKind::Crop: {
      float h = p.magnitudes.at(0), w = p.magnitudes.at(1);
      float y0 = p.magnitudes.at(2), x0 = p.magnitudes.at(3);
      ScaledCoord f{h / H, w / W, y0, x0};
      return resample_gather(img, H, W, f);
    }
    case TransformKind::Resize: {
      float h = p.magnitudes.at(0), w = p.magnitudes.at(1);
      float oy = p.magnitudes.at(2), ox = p.magnitudes.at(3);
      int pad = static_cast<int>(p.magnitudes.at(4));
      // canvas pixel maps back to the source through the pad placement
      auto c1 = [&](int yc, int xc) -> std::pair<double, double> {
        return {(yc - oy + 0.5) * (H / h) - 0.5, (xc - ox + 0.5) * (W / w) - 0.5};
      };
      Tensor canvas = resample_gather(img, pad, pad, c1);
      ScaledCoord c2{static_cast<double>(pad) / H, static_cast<double>(pad) / W, 0.0, 0.0};
      return resample_gather(canvas, H, W, c2);
    }
    case TransformKind::Rotate:
    case TransformKind::ShearX:
    case TransformKind::ShearY:
    case TransformKind::TranslateX:
    case TransformKind::TranslateY:
    case TransformKind::Reshape:
      return warp_bilinear(img, affine_matrix(p, H, W));
    case TransformKind::Cutout: {
      int k = static_cast<int>(p.magnitudes.at(0));
      Tensor out = img;
      for (int y = p.cut_y; y < std::min(H, p.cut_y + k); ++y)
        for (int x = p.cut_x; x < std::min(W, p.cut_x + k); ++x)
          for (int c = 0; c < img.shape[2]; ++c) out.at(y, x, c) = 0.0f;
      return out;
    }
  }
  throw std::logic_error("apply_raw: unreachable");
}

// VJP of the pre-clamp op.
inline Tensor vjp_raw(const TransformParams& p, const Tensor& img, const Tensor& g, const MixPool& pool) {
  const int H = img.shape[0], W = img.shape[1];
  switch (p.kind) {
    case TransformKind::Admix:
      return g;
    case TransformKind::Scale: {
      float f = std::pow(2.0f, -p.magnitudes.at(0));
      Tensor out = g;
      for (float& v : out.data) v *= f;
      return out;
    }
    case TransformKind::AdmixAndScale: {
      float f = std::pow(2.0f, -p.magnitudes.at(1));
      Tensor out = g;
      for (float& v : out.data) v *= f;
      return out;
    }
    case TransformKind::Brightness: {
      float a = p.magnitudes.at(0);
      Tensor out = g;
      for (float& v : out.data) v *= a;
      return out;
    }
    case TransformKind::Color: {
      float a = p.magnitudes.at(0);
      Tensor out(img.shape);
      const float lw[3] = {kLumR, kLumG, kLumB};
      for (size_t pix = 0; pix < g.data.size(); pix += 3) {
        float gs = g.data[pix] + g.data[pix + 1] + g.data[pix + 2];
        for (int c = 0; c < 3; ++c) out.data[pix + c] = a * g.data[pix + c] + (1.0f - a) * lw[c] * gs;
      }
      return out;
    }
    case TransformKind::Contrast: {
      float a = p.magnitudes.at(0);
      const float lw[3] = {kLumR, kLumG, kLumB};
      double gs = 0.0;
      for (float v : g.data) gs += v;
      float per = static_cast<float>(gs / (img.data.size() / 3));
      Tensor out(img.shape);
      for (size_t pix = 0; pix < g.data.size(); pix += 3)
        for (int c = 0; c < 3; ++c) out.data[pix + c] = a * g.data[pix + c] + (1.0f - a) * lw[c] * per;
      return out;
    }
    case TransformKind::Sharpness: {
      float a = p.magnitudes.at(0);
      Tensor scaled = g;
      for (float& v : scaled.data) v *= (1.0f - a);
      Tensor sm = box_smooth_transpose(scaled);
      for (size_t i = 0; i < sm.data.size(); ++i) sm.data[i] += a * g.data[i];
      return sm;
    }
    case TransformKind::Invert: {
      Tensor out = g;
      for (float& v : out.data) v = -v;
      return out;
    }
    case TransformKind::Hue:
      return hsv_vjp(img, {true, p.magnitudes.at(0)}, g);
    case TransformKind::Saturation:
      return hsv_vjp(img, {false, p.magnitudes.at(0)}, g);
    case TransformKind::Gamma: {
      float a = p.magnitudes.at(0);
      Tensor out(img.shape);
      for (size_t i = 0; i < img.data.size(); ++i) {
        float base = std::max(img.data[i], 1e-6f);  // keeps the derivative finite at black pixels
        out.data[i] = g.data[i] * a * std::pow(base, a - 1.0f);
      }
      return out;
    }
    case TransformKind::Crop: {
      float h = p.magnitudes.at(0), w = p.magnitudes.at(1);
      float y0 = p.magnitudes.at(2), x0 = p.magnitudes.at(3);
      ScaledCoord f{h / H, w / W, y0, x0};
      return resample_scatter(g, H, W, f);
    }
    case TransformKind::Resize: {
      float h = p.magnitudes.at(0), w = p.magnitudes.at(1);
      float oy = p.magnitudes.at(2), ox = p.magnitudes.at(3);
      int pad = static_cast<int>(p.magnitudes.at(4));
      ScaledCoord c2{static_cast<double>(pad) / H, static_cast<double>(pad) / W, 0.0, 0.0};
      Tensor gcanvas = resample_scatter(g, pad, pad, c2);
      auto c1 = [&](int yc, int xc) -> std::pair<double, double> {
        return {(yc - oy + 0.5) * (H / h) - 0.5, (xc - ox + 0.5) * (W / w) - 0.5};
      };
      return resample_scatter(gcanvas, H, W, c1);
    }
    case TransformKind::Rotate:
    case TransformKind::ShearX:
    case TransformKind::ShearY:
    case TransformKind::TranslateX:
    case TransformKind::TranslateY:
    case TransformKind::Reshape:
      return warp_bilinear_vjp(img, affine_matrix(p, H, W), g);
    case TransformKind::Cutout: {
      int k = static_cast<int>(p.magnitudes.at(0));
      Tensor out = g;
      for (int y = p.cut_y; y < std::min(H, p.cut_y + k); ++y)
        for (int x = p.cut_x; x < std::min(W, p.cut_x + k); ++x)
          for (int c = 0; c < img.shape[2]; ++c) out.at(y, x, c) = 0.0f;
      return out;
    }
  }
  throw std::logic_error("vjp_raw: unreachable");
}

}  // namespace detail

/// Apply one transformation. Clamped kinds clip the result to [0,1];
/// the scale/admix family passes through unclamped.
inline Tensor apply(const TransformParams& p, const Tensor& img, const MixPool& pool = {}) {
  Tensor out = detail::apply_raw(p, img, pool);
  if (detail::clamps_output(p.kind)) clamp01_inplace(out);
  if (!all_finite(out)) throw std::runtime_error(std::string("apply: non-finite output from ") + kind_name(p.kind));
  return out;
}

/// VJP of apply() with respect to the input image.
inline Tensor apply_vjp(const TransformParams& p, const Tensor& img, const Tensor& upstream,
                        const MixPool& pool = {}) {
  if (!upstream.same_shape(img)) throw std::invalid_argument("apply_vjp: upstream shape mismatch");
  if (!detail::clamps_output(p.kind)) return detail::vjp_raw(p, img, upstream, pool);
  Tensor raw = detail::apply_raw(p, img, pool);
  Tensor masked = upstream;
  for (size_t i = 0; i < raw.data.size(); ++i)
    if (raw.data[i] < 0.0f || raw.data[i] > 1.0f) masked.data[i] = 0.0f;
  return detail::vjp_raw(p, img, masked, pool);
}

/// Apply a combo t_1 first .. t_M last with freshly sampled parameters.
/// Returns the transformed image and the recorded parameters for replay.
inline std::pair<Tensor, std::vector<TransformParams>> apply_combo(const TransformCombo& combo, const Tensor& img,
                                                                   RngStream& rng, const ScaleProfile& prof,
                                                                   const MixPool& pool = {}) {
  std::vector<TransformParams> rec;
  rec.reserve(combo.size());
  Tensor cur = img;
  for (TransformKind k : combo) {
    TransformParams p = sample_params(k, rng, prof);
    cur = apply(p, cur, pool);
    rec.push_back(std::move(p));
  }
  return {std::move(cur), std::move(rec)};
}

inline Tensor replay_combo(const std::vector<TransformParams>& rec, const Tensor& img, const MixPool& pool = {}) {
  Tensor cur = img;
  for (const auto& p : rec) cur = apply(p, cur, pool);
  return cur;
}

/// Chain-rule product of per-op VJPs in reverse order.
inline Tensor vjp_combo(const std::vector<TransformParams>& rec, const Tensor& img, const Tensor& upstream,
                        const MixPool& pool = {}) {
  if (!upstream.same_shape(img)) throw std::invalid_argument("vjp_combo: upstream shape mismatch");
  std::vector<Tensor> inputs;
  inputs.reserve(rec.size());
  Tensor cur = img;
  for (const auto& p : rec) {
    inputs.push_back(cur);
    cur = apply(p, cur, pool);
  }
  Tensor g = upstream;
  for (size_t i = rec.size(); i-- > 0;) g = apply_vjp(rec[i], inputs[i], g, pool);
  return g;
}

}  // namespace aitl
