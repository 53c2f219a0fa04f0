#pragma once

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

#include "aitl/rng.hpp"
#include "aitl/tensor.hpp"

namespace aitl {

struct Dataset {
  std::vector<Tensor> images;
  std::vector<int> labels;
  // split tags as index lists; eval is disjoint from train by construction
  std::vector<int> train_idx;
  std::vector<int> eval_idx;
  std::vector<int> mix_idx;

  std::vector<Tensor> subset_images(const std::vector<int>& idx) const {
    std::vector<Tensor> out;
    out.reserve(idx.size());
    for (int i : idx) out.push_back(images[static_cast<size_t>(i)]);
    return out;
  }
  std::vector<int> subset_labels(const std::vector<int>& idx) const {
    std::vector<int> out;
    out.reserve(idx.size());
    for (int i : idx) out.push_back(labels[static_cast<size_t>(i)]);
    return out;
  }
};

namespace detail {

// signed distance-ish membership for the five shape families
inline float shape_distance(int shape, float u, float v, float r) {
  switch (shape) {
    case 0:  // disk
      return std::sqrt(u * u + v * v) - r;
    case 1:  // square
      return std::max(std::fabs(u), std::fabs(v)) - 0.82f * r;
    case 2: {  // triangle (inradius r/2)
      float d = -1e9f;
      for (int i = 0; i < 3; ++i) {
        float ang = 1.5707963f + 2.0943951f * static_cast<float>(i);
        float nx = std::cos(ang), ny = std::sin(ang);
        d = std::max(d, nx * u + ny * v - 0.5f * r);
      }
      return d;
    }
    case 3:  // ring
      return std::fabs(std::sqrt(u * u + v * v) - 0.7f * r) - 0.32f * r;
    default: {  // cross of two bars
      float bar1 = std::max(std::fabs(u) - r, std::fabs(v) - 0.38f * r);
      float bar2 = std::max(std::fabs(u) - 0.38f * r, std::fabs(v) - r);
      return std::min(bar1, bar2);
    }
  }
}

}  // namespace detail

/// 10-class separable colored-shape images: class = shape (5) x palette (2),
/// with jittered colors, random pose and additive noise.
inline Tensor synthetic_image(int label, int hw, RngStream& rng) {
  const int shape = label % 5;
  const int palette = label / 5;
  float base[3];
  if (palette == 0) {
    base[0] = 0.68f + rng.uniform(-0.1f, 0.1f);
    base[1] = 0.36f + rng.uniform(-0.1f, 0.1f);
    base[2] = 0.28f + rng.uniform(-0.1f, 0.1f);
  } else {
    base[0] = 0.3f + rng.uniform(-0.1f, 0.1f);
    base[1] = 0.42f + rng.uniform(-0.1f, 0.1f);
    base[2] = 0.72f + rng.uniform(-0.1f, 0.1f);
  }
  float bg = rng.uniform(0.2f, 0.44f);
  float bg_tint[3] = {bg + rng.uniform(-0.05f, 0.05f), bg + rng.uniform(-0.05f, 0.05f),
                      bg + rng.uniform(-0.05f, 0.05f)};
  float cx = rng.uniform(0.44f, 0.56f) * hw;
  float cy = rng.uniform(0.44f, 0.56f) * hw;
  float r = rng.uniform(0.3f, 0.4f) * hw;
  float phi = rng.uniform(-0.45f, 0.45f);
  float cphi = std::cos(phi), sphi = std::sin(phi);

  Tensor img({hw, hw, 3});
  for (int y = 0; y < hw; ++y)
    for (int x = 0; x < hw; ++x) {
      float dx = x - cx, dy = y - cy;
      float u = cphi * dx + sphi * dy;
      float v = -sphi * dx + cphi * dy;
      float d = detail::shape_distance(shape, u, v, r);
      float cov = std::clamp(0.5f - d, 0.0f, 1.0f);  // ~1px soft edge
      for (int c = 0; c < 3; ++c) {
        float val = bg_tint[c] + cov * (base[c] - bg_tint[c]) + rng.uniform(-0.05f, 0.05f);
        img.at(y, x, c) = std::clamp(val, 0.0f, 1.0f);
      }
    }
  return img;
}

/// Deterministic synthetic dataset: `per_class` images per class, ordered
/// class-major, each image drawn from a forked stream.
inline Dataset make_synthetic(int classes, int per_class, uint64_t seed, int hw = 32) {
  Dataset ds;
  RngStream root(seed, 0);
  for (int k = 0; k < classes; ++k)
    for (int i = 0; i < per_class; ++i) {
      RngStream r = root.fork(static_cast<uint64_t>(k) * 1000003ULL + static_cast<uint64_t>(i));
      ds.images.push_back(synthetic_image(k, hw, r));
      ds.labels.push_back(k);
    }
  return ds;
}

/// Stratified split into train/eval/mix-pool index lists (disjoint).
inline void split_dataset(Dataset& ds, int train_per_class, int eval_per_class, int mix_per_class, int classes) {
  ds.train_idx.clear();
  ds.eval_idx.clear();
  ds.mix_idx.clear();
  std::vector<std::vector<int>> by_class(static_cast<size_t>(classes));
  for (size_t i = 0; i < ds.labels.size(); ++i) by_class[static_cast<size_t>(ds.labels[i])].push_back(static_cast<int>(i));
  for (int k = 0; k < classes; ++k) {
    const auto& idx = by_class[static_cast<size_t>(k)];
    int need = train_per_class + eval_per_class + mix_per_class;
    if (static_cast<int>(idx.size()) < need)
      throw std::invalid_argument("split_dataset: class " + std::to_string(k) + " has too few images");
    int p = 0;
    for (int i = 0; i < train_per_class; ++i) ds.train_idx.push_back(idx[p++]);
    for (int i = 0; i < eval_per_class; ++i) ds.eval_idx.push_back(idx[p++]);
    for (int i = 0; i < mix_per_class; ++i) ds.mix_idx.push_back(idx[p++]);
  }
}

}  // namespace aitl
