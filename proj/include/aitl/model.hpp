#pragma once

#include <algorithm>
#include <cmath>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "aitl/adam.hpp"
#include "aitl/rng.hpp"
#include "aitl/tensor.hpp"
#include "aitl/transforms.hpp"

namespace aitl {

// ---------------------------------------------------------------------------
// Architecture templates
// ---------------------------------------------------------------------------

enum class LayerOp { Standardize, Conv, Relu, AvgPool2, Flatten, Dense, GlobalAvgPool };

struct LayerDef {
  LayerOp op;
  int out_ch = 0;  // conv / dense output size
  int kernel = 0, stride = 1, pad = 0;
};

struct ModelSpec {
  std::string arch = "cnn_a";
  int input_hw = 32;
  int channels = 3;
  int classes = 10;
  uint64_t init_seed = 1;
};

inline const std::vector<std::string>& known_archs() {
  static const std::vector<std::string> a = {"cnn_a", "cnn_b", "cnn_c", "cnn_d", "cnn_e", "mlp_a", "mlp_b"};
  return a;
}

inline std::vector<LayerDef> arch_layers(const std::string& arch, int classes) {
  using L = LayerDef;
  auto conv = [](int ch, int k, int s, int p) { return L{LayerOp::Conv, ch, k, s, p}; };
  auto dense = [](int n) { return L{LayerOp::Dense, n}; };
  const L std_{LayerOp::Standardize}, relu{LayerOp::Relu}, pool{LayerOp::AvgPool2}, flat{LayerOp::Flatten},
      gap{LayerOp::GlobalAvgPool};
  if (arch == "cnn_a")
    return {std_, conv(24, 3, 2, 1), relu, conv(48, 3, 2, 1), relu, conv(64, 3, 1, 1), relu, gap, dense(classes)};
  if (arch == "cnn_b")
    return {std_, conv(20, 5, 2, 2), relu, conv(40, 3, 1, 1), relu, pool, conv(56, 3, 1, 1), relu, gap,
            dense(classes)};
  if (arch == "cnn_c")
    return {std_, conv(24, 3, 2, 1), relu, conv(32, 3, 2, 1), relu, conv(48, 3, 1, 1), relu, pool, gap,
            dense(classes)};
  if (arch == "cnn_d")
    return {std_, conv(16, 3, 2, 1), relu, conv(32, 3, 1, 1), relu, pool, conv(48, 3, 1, 1), relu, gap,
            dense(classes)};
  if (arch == "cnn_e")
    return {std_, conv(20, 5, 2, 2), relu, conv(36, 3, 2, 1), relu, conv(56, 3, 1, 1), relu, gap, dense(classes)};
  if (arch == "mlp_a") return {std_, flat, dense(128), relu, dense(64), relu, dense(classes)};
  if (arch == "mlp_b") return {std_, flat, dense(96), relu, dense(48), relu, dense(classes)};
  throw std::invalid_argument("unknown architecture id: " + arch);
}

// ---------------------------------------------------------------------------
// Classifier
// ---------------------------------------------------------------------------

struct Classifier {
  ModelSpec spec;
  std::vector<LayerDef> layers;
  std::vector<Tensor> params;             // conv/dense weight+bias pairs in layer order
  std::vector<std::string> param_names;
  std::vector<int> layer_param_index;     // first param index per layer, -1 if none
  int feature_layer = -1;                 // layer whose output is h_img
  int feature_dim = 0;
  bool trained = false;

  int param_count() const { return static_cast<int>(params.size()); }
};

namespace detail {

struct Shape3 {
  int h, w, c;
  bool flat = false;
  int flat_dim = 0;
  int numel() const { return flat ? flat_dim : h * w * c; }
};

inline Shape3 layer_out_shape(const LayerDef& l, const Shape3& in) {
  switch (l.op) {
    case LayerOp::Standardize:
      return in;
    case LayerOp::Conv: {
      int h = (in.h + 2 * l.pad - l.kernel) / l.stride + 1;
      int w = (in.w + 2 * l.pad - l.kernel) / l.stride + 1;
      return {h, w, l.out_ch, false, 0};
    }
    case LayerOp::Relu:
      return in;
    case LayerOp::AvgPool2:
      return {in.h / 2, in.w / 2, in.c, false, 0};
    case LayerOp::Flatten:
      return {0, 0, 0, true, in.numel()};
    case LayerOp::Dense:
      return {0, 0, 0, true, l.out_ch};
    case LayerOp::GlobalAvgPool:
      return {0, 0, 0, true, in.c};
  }
  throw std::logic_error("layer_out_shape: unreachable");
}

}  // namespace detail

/// Deterministically initialized classifier (He-normal weights, zero biases).
inline Classifier build(const ModelSpec& spec) {
  Classifier c;
  c.spec = spec;
  c.layers = arch_layers(spec.arch, spec.classes);
  detail::Shape3 cur{spec.input_hw, spec.input_hw, spec.channels, false, 0};
  int last_hidden = -1;
  for (size_t i = 0; i < c.layers.size(); ++i) {
    const LayerDef& l = c.layers[i];
    c.layer_param_index.push_back(-1);
    if (l.op == LayerOp::Conv) {
      int fan_in = cur.c * l.kernel * l.kernel;
      RngStream rng(spec.init_seed, 1000 + i);
      Tensor w({l.out_ch, cur.c, l.kernel, l.kernel});
      float s = std::sqrt(2.0f / static_cast<float>(fan_in));
      for (auto& v : w.data) v = rng.normal() * s;
      c.layer_param_index.back() = c.param_count();
      c.params.push_back(std::move(w));
      c.param_names.push_back("conv" + std::to_string(i) + ".w");
      c.params.push_back(Tensor::zeros({l.out_ch}));
      c.param_names.push_back("conv" + std::to_string(i) + ".b");
    } else if (l.op == LayerOp::Dense) {
      int fan_in = cur.numel();
      RngStream rng(spec.init_seed, 1000 + i);
      Tensor w({l.out_ch, fan_in});
      float s = std::sqrt(2.0f / static_cast<float>(fan_in));
      for (auto& v : w.data) v = rng.normal() * s;
      c.layer_param_index.back() = c.param_count();
      c.params.push_back(std::move(w));
      c.param_names.push_back("dense" + std::to_string(i) + ".w");
      c.params.push_back(Tensor::zeros({l.out_ch}));
      c.param_names.push_back("dense" + std::to_string(i) + ".b");
    }
    if (l.op == LayerOp::GlobalAvgPool) c.feature_layer = static_cast<int>(i);
    if (l.op == LayerOp::Relu && i + 1 < c.layers.size() && c.layers[i + 1].op == LayerOp::Dense)
      last_hidden = static_cast<int>(i);
    cur = detail::layer_out_shape(l, cur);
  }
  // MLPs have no pooling stage; the last hidden activation stands in for it
  if (c.feature_layer < 0) c.feature_layer = last_hidden;
  detail::Shape3 fs{spec.input_hw, spec.input_hw, spec.channels, false, 0};
  for (int i = 0; i <= c.feature_layer; ++i) fs = detail::layer_out_shape(c.layers[i], fs);
  c.feature_dim = fs.numel();
  return c;
}

// ---------------------------------------------------------------------------
// Forward / backward
// ---------------------------------------------------------------------------

struct ForwardTrace {
  std::vector<Tensor> acts;  // acts[0] = input, acts[i+1] = layer i output
};

namespace detail {

inline Tensor conv_forward(const Tensor& in, const Tensor& w, const Tensor& b, int stride, int pad) {
  const int ih = in.shape[0], iw = in.shape[1], ic = in.shape[2];
  const int oc = w.shape[0], k = w.shape[2];
  const int oh = (ih + 2 * pad - k) / stride + 1;
  const int ow = (iw + 2 * pad - k) / stride + 1;
  Tensor out({oh, ow, oc});
  for (int oy = 0; oy < oh; ++oy)
    for (int ox = 0; ox < ow; ++ox) {
      const int iy0 = oy * stride - pad, ix0 = ox * stride - pad;
      for (int o = 0; o < oc; ++o) {
        float acc = b.data[o];
        const float* wbase = &w.data[static_cast<size_t>(o) * ic * k * k];
        for (int ky = 0; ky < k; ++ky) {
          int iy = iy0 + ky;
          if (iy < 0 || iy >= ih) continue;
          for (int kx = 0; kx < k; ++kx) {
            int ix = ix0 + kx;
            if (ix < 0 || ix >= iw) continue;
            const float* px = &in.data[(static_cast<size_t>(iy) * iw + ix) * ic];
            for (int i = 0; i < ic; ++i) acc += wbase[static_cast<size_t>(i) * k * k + ky * k + kx] * px[i];
          }
        }
        out.at(oy, ox, o) = acc;
      }
    }
  return out;
}

// scatters input grads and accumulates weight/bias grads in one pass
inline Tensor conv_backward(const Tensor& in, const Tensor& w, const Tensor& gout, int stride, int pad,
                            Tensor* gw, Tensor* gb, bool want_input_grad) {
  const int ih = in.shape[0], iw = in.shape[1], ic = in.shape[2];
  const int oc = w.shape[0], k = w.shape[2];
  const int oh = gout.shape[0], ow = gout.shape[1];
  Tensor gin;
  if (want_input_grad) gin = Tensor::zeros(in.shape);
  for (int oy = 0; oy < oh; ++oy)
    for (int ox = 0; ox < ow; ++ox) {
      const int iy0 = oy * stride - pad, ix0 = ox * stride - pad;
      for (int o = 0; o < oc; ++o) {
        float g = gout.at(oy, ox, o);
        if (g == 0.0f) continue;
        if (gb) gb->data[o] += g;
        const float* wbase = &w.data[static_cast<size_t>(o) * ic * k * k];
        float* gwbase = gw ? &gw->data[static_cast<size_t>(o) * ic * k * k] : nullptr;
        for (int ky = 0; ky < k; ++ky) {
          int iy = iy0 + ky;
          if (iy < 0 || iy >= ih) continue;
          for (int kx = 0; kx < k; ++kx) {
            int ix = ix0 + kx;
            if (ix < 0 || ix >= iw) continue;
            const size_t pix = (static_cast<size_t>(iy) * iw + ix) * ic;
            for (int i = 0; i < ic; ++i) {
              if (gwbase) gwbase[static_cast<size_t>(i) * k * k + ky * k + kx] += g * in.data[pix + i];
              if (want_input_grad) gin.data[pix + i] += g * wbase[static_cast<size_t>(i) * k * k + ky * k + kx];
            }
          }
        }
      }
    }
  return gin;
}

}  // namespace detail

inline ForwardTrace forward_trace(const Classifier& c, const Tensor& img) {
  ForwardTrace tr;
  tr.acts.reserve(c.layers.size() + 1);
  tr.acts.push_back(img);
  Tensor cur = img;
  for (size_t i = 0; i < c.layers.size(); ++i) {
    const LayerDef& l = c.layers[i];
    switch (l.op) {
      case LayerOp::Standardize: {
        // per-image standardization; makes the model exactly invariant to
        // positive affine rescaling of its input
        double mu = 0.0;
        for (float v : cur.data) mu += v;
        mu /= static_cast<double>(cur.numel());
        double var = 0.0;
        for (float v : cur.data) var += (v - mu) * (v - mu);
        var /= static_cast<double>(cur.numel());
        float s = static_cast<float>(std::sqrt(var + 1e-6));
        Tensor out = cur;
        for (float& v : out.data) v = (v - static_cast<float>(mu)) / s;
        cur = std::move(out);
        break;
      }
      case LayerOp::Conv: {
        int pi = c.layer_param_index[i];
        cur = detail::conv_forward(cur, c.params[pi], c.params[pi + 1], l.stride, l.pad);
        break;
      }
      case LayerOp::Relu: {
        Tensor out = cur;
        for (float& v : out.data) v = v > 0.0f ? v : 0.0f;
        cur = std::move(out);
        break;
      }
      case LayerOp::AvgPool2: {
        const int h = cur.shape[0] / 2, w = cur.shape[1] / 2, ch = cur.shape[2];
        Tensor out({h, w, ch});
        for (int y = 0; y < h; ++y)
          for (int x = 0; x < w; ++x)
            for (int cc = 0; cc < ch; ++cc)
              out.at(y, x, cc) = 0.25f * (cur.at(2 * y, 2 * x, cc) + cur.at(2 * y, 2 * x + 1, cc) +
                                          cur.at(2 * y + 1, 2 * x, cc) + cur.at(2 * y + 1, 2 * x + 1, cc));
        cur = std::move(out);
        break;
      }
      case LayerOp::Flatten: {
        Tensor out({static_cast<int>(cur.numel())}, cur.data);
        cur = std::move(out);
        break;
      }
      case LayerOp::Dense: {
        int pi = c.layer_param_index[i];
        const Tensor& w = c.params[pi];
        const Tensor& b = c.params[pi + 1];
        const int out_n = w.shape[0], in_n = w.shape[1];
        Tensor out({out_n});
        for (int o = 0; o < out_n; ++o) {
          float acc = b.data[o];
          const float* row = &w.data[static_cast<size_t>(o) * in_n];
          for (int ii = 0; ii < in_n; ++ii) acc += row[ii] * cur.data[ii];
          out.data[o] = acc;
        }
        cur = std::move(out);
        break;
      }
      case LayerOp::GlobalAvgPool: {
        const int h = cur.shape[0], w = cur.shape[1], ch = cur.shape[2];
        Tensor out({ch});
        for (int y = 0; y < h; ++y)
          for (int x = 0; x < w; ++x)
            for (int cc = 0; cc < ch; ++cc) out.data[cc] += cur.at(y, x, cc);
        for (float& v : out.data) v /= static_cast<float>(h * w);
        cur = std::move(out);
        break;
      }
    }
    tr.acts.push_back(cur);
  }
  return tr;
}

inline Tensor logits(const Classifier& c, const Tensor& img) { return forward_trace(c, img).acts.back(); }

/// Backprop from an upstream gradient at layer `from_layer`'s output down to
/// the input. Accumulates parameter gradients into `pgrads` when given.
inline Tensor backward_from(const Classifier& c, const ForwardTrace& tr, Tensor grad, int from_layer,
                            std::vector<Tensor>* pgrads, bool want_input_grad) {
  for (int i = from_layer; i >= 0; --i) {
    const LayerDef& l = c.layers[i];
    const Tensor& in = tr.acts[i];
    const bool need_gin = want_input_grad || i > 0;
    switch (l.op) {
      case LayerOp::Standardize: {
        const double n = static_cast<double>(in.numel());
        double mu = 0.0;
        for (float v : in.data) mu += v;
        mu /= n;
        double var = 0.0;
        for (float v : in.data) var += (v - mu) * (v - mu);
        var /= n;
        const double s = std::sqrt(var + 1e-6);
        double gmean = 0.0, gymean = 0.0;
        for (size_t j = 0; j < grad.data.size(); ++j) {
          double y = (in.data[j] - mu) / s;
          gmean += grad.data[j];
          gymean += grad.data[j] * y;
        }
        gmean /= n;
        gymean /= n;
        Tensor gin(in.shape);
        for (size_t j = 0; j < grad.data.size(); ++j) {
          double y = (in.data[j] - mu) / s;
          gin.data[j] = static_cast<float>((grad.data[j] - gmean - y * gymean) / s);
        }
        grad = std::move(gin);
        break;
      }
      case LayerOp::Conv: {
        int pi = c.layer_param_index[i];
        Tensor* gw = pgrads ? &(*pgrads)[pi] : nullptr;
        Tensor* gb = pgrads ? &(*pgrads)[pi + 1] : nullptr;
        grad = detail::conv_backward(in, c.params[pi], grad, l.stride, l.pad, gw, gb, need_gin);
        break;
      }
      case LayerOp::Relu: {
        Tensor gin = grad;
        for (size_t j = 0; j < gin.data.size(); ++j)
          if (in.data[j] <= 0.0f) gin.data[j] = 0.0f;
        grad = std::move(gin);
        break;
      }
      case LayerOp::AvgPool2: {
        Tensor gin = Tensor::zeros(in.shape);
        const int h = grad.shape[0], w = grad.shape[1], ch = grad.shape[2];
        for (int y = 0; y < h; ++y)
          for (int x = 0; x < w; ++x)
            for (int cc = 0; cc < ch; ++cc) {
              float g = 0.25f * grad.at(y, x, cc);
              gin.at(2 * y, 2 * x, cc) = g;
              gin.at(2 * y, 2 * x + 1, cc) = g;
              gin.at(2 * y + 1, 2 * x, cc) = g;
              gin.at(2 * y + 1, 2 * x + 1, cc) = g;
            }
        grad = std::move(gin);
        break;
      }
      case LayerOp::Flatten: {
        Tensor gin(in.shape, grad.data);
        grad = std::move(gin);
        break;
      }
      case LayerOp::Dense: {
        int pi = c.layer_param_index[i];
        const Tensor& w = c.params[pi];
        const int out_n = w.shape[0], in_n = w.shape[1];
        if (pgrads) {
          Tensor& gw = (*pgrads)[pi];
          Tensor& gb = (*pgrads)[pi + 1];
          for (int o = 0; o < out_n; ++o) {
            gb.data[o] += grad.data[o];
            float g = grad.data[o];
            float* grow = &gw.data[static_cast<size_t>(o) * in_n];
            for (int ii = 0; ii < in_n; ++ii) grow[ii] += g * in.data[ii];
          }
        }
        if (need_gin) {
          Tensor gin = Tensor::zeros(in.shape);
          for (int o = 0; o < out_n; ++o) {
            float g = grad.data[o];
            if (g == 0.0f) continue;
            const float* row = &w.data[static_cast<size_t>(o) * in_n];
            for (int ii = 0; ii < in_n; ++ii) gin.data[ii] += g * row[ii];
          }
          grad = std::move(gin);
        } else {
          grad = Tensor::zeros(in.shape);
        }
        break;
      }
      case LayerOp::GlobalAvgPool: {
        const int h = in.shape[0], w = in.shape[1], ch = in.shape[2];
        Tensor gin({h, w, ch});
        const float inv = 1.0f / static_cast<float>(h * w);
        for (int y = 0; y < h; ++y)
          for (int x = 0; x < w; ++x)
            for (int cc = 0; cc < ch; ++cc) gin.at(y, x, cc) = grad.data[cc] * inv;
        grad = std::move(gin);
        break;
      }
    }
  }
  return grad;
}

// ---------------------------------------------------------------------------
// Loss, prediction, features, input gradients
// ---------------------------------------------------------------------------

inline std::vector<float> softmax(const Tensor& logit) {
  float mx = logit.data[0];
  for (float v : logit.data) mx = std::max(mx, v);
  std::vector<float> p(logit.data.size());
  double sum = 0.0;
  for (size_t i = 0; i < p.size(); ++i) {
    p[i] = std::exp(logit.data[i] - mx);
    sum += p[i];
  }
  for (auto& v : p) v = static_cast<float>(v / sum);
  return p;
}

inline float cross_entropy(const Tensor& logit, int label, Tensor* dlogits = nullptr) {
  auto p = softmax(logit);
  float loss = -std::log(std::max(p[static_cast<size_t>(label)], 1e-12f));
  if (dlogits) {
    *dlogits = Tensor({static_cast<int>(p.size())}, std::vector<float>(p.begin(), p.end()));
    dlogits->data[static_cast<size_t>(label)] -= 1.0f;
  }
  return loss;
}

inline int predict(const Classifier& c, const Tensor& img) {
  Tensor lg = logits(c, img);
  int best = 0;
  for (int i = 1; i < lg.shape[0]; ++i)
    if (lg.data[i] > lg.data[best]) best = i;
  return best;
}

inline Tensor features(const Classifier& c, const Tensor& img) {
  ForwardTrace tr = forward_trace(c, img);
  return tr.acts[static_cast<size_t>(c.feature_layer) + 1];
}

/// Gradient of the cross-entropy at `label` w.r.t. the image, optionally
/// chained through a recorded transform combo (Eq. 5 style).
inline Tensor input_grad(const Classifier& c, const Tensor& img, int label,
                         const std::vector<TransformParams>* chain = nullptr, const MixPool& pool = {},
                         float* loss_out = nullptr) {
  Tensor x = chain ? replay_combo(*chain, img, pool) : img;
  ForwardTrace tr = forward_trace(c, x);
  Tensor dlogits;
  float loss = cross_entropy(tr.acts.back(), label, &dlogits);
  if (loss_out) *loss_out = loss;
  Tensor g = backward_from(c, tr, dlogits, static_cast<int>(c.layers.size()) - 1, nullptr, true);
  if (chain) g = vjp_combo(*chain, img, g, pool);
  return g;
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

struct TrainMetrics {
  std::vector<float> train_loss;  // per epoch
  std::vector<float> train_acc;
  std::vector<float> test_acc;
  float final_test_acc = 0.0f;
};

inline float accuracy(const Classifier& c, const std::vector<Tensor>& images, const std::vector<int>& labels) {
  if (images.empty()) return 0.0f;
  int hit = 0;
  for (size_t i = 0; i < images.size(); ++i) hit += predict(c, images[i]) == labels[i];
  return static_cast<float>(hit) / static_cast<float>(images.size());
}

/// Light label-preserving augmentation used when training zoo models, so
/// trained models tolerate the nuisance transforms the attacks rely on.
inline Tensor augment_image(const Tensor& img, RngStream& rng) {
  double r = rng.uniform();
  if (r < 0.30) return img;
  if (r < 0.55) {  // integer shift up to +-3 px, zero fill
    int dy = static_cast<int>(rng.uniform_int(7)) - 3;
    int dx = static_cast<int>(rng.uniform_int(7)) - 3;
    const int h = img.shape[0], w = img.shape[1], C = img.shape[2];
    Tensor out(img.shape);
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) {
        int sy = y - dy, sx = x - dx;
        if (sy < 0 || sy >= h || sx < 0 || sx >= w) continue;
        for (int c = 0; c < C; ++c) out.at(y, x, c) = img.at(sy, sx, c);
      }
    return out;
  }
  if (r < 0.75) {
    TransformParams p;
    p.kind = TransformKind::Rotate;
    p.magnitudes = {rng.uniform(-20.0f, 20.0f)};
    return apply(p, img);
  }
  if (r < 0.90) {
    TransformParams p;
    p.kind = TransformKind::Brightness;
    p.magnitudes = {rng.uniform(0.5f, 1.2f)};
    return apply(p, img);
  }
  TransformParams p;
  p.kind = TransformKind::Crop;
  const float H = static_cast<float>(img.shape[0]), W = static_cast<float>(img.shape[1]);
  float h = rng.uniform(0.82f * H, H), w = rng.uniform(0.82f * W, W);
  float y0 = rng.uniform(0.0f, H - h), x0 = rng.uniform(0.0f, W - w);
  p.magnitudes = {h, w, y0, x0};
  return apply(p, img);
}

namespace detail {

struct BatchGrad {
  std::vector<Tensor> grads;
  explicit BatchGrad(const Classifier& c) {
    grads.reserve(c.params.size());
    for (const auto& p : c.params) grads.push_back(Tensor::zeros(p.shape));
  }
  void clear() {
    for (auto& g : grads)
      for (float& v : g.data) v = 0.0f;
  }
};

}  // namespace detail

/// Cross-entropy training with Adam. When adv_eps > 0 each batch is
/// augmented with single-step sign-gradient examples at that budget.
inline TrainMetrics train(Classifier& c, const std::vector<Tensor>& images, const std::vector<int>& labels,
                          const std::vector<Tensor>& test_images, const std::vector<int>& test_labels, int epochs,
                          float lr, RngStream& rng, float adv_eps = 0.0f, int batch_size = 32,
                          bool augment = false) {
  if (images.empty()) throw std::invalid_argument("train: empty dataset");
  for (int l : labels)
    if (l < 0 || l >= c.spec.classes) throw std::invalid_argument("train: label out of range");

  TrainMetrics metrics;
  std::vector<AdamState> states(c.params.size());
  for (size_t i = 0; i < c.params.size(); ++i) states[i] = AdamState(c.params[i].shape);
  detail::BatchGrad bg(c);

  std::vector<size_t> order(images.size());
  for (size_t i = 0; i < order.size(); ++i) order[i] = i;

  for (int ep = 0; ep < epochs; ++ep) {
    rng.shuffle(order);
    // step decay stabilizes the tail of training across architectures
    float ep_lr = lr;
    if (epochs >= 6 && ep >= (2 * epochs) / 3) ep_lr = 0.3f * lr;
    double ep_loss = 0.0;
    int ep_hit = 0, ep_n = 0;
    for (size_t start = 0; start < order.size(); start += static_cast<size_t>(batch_size)) {
      size_t end = std::min(order.size(), start + static_cast<size_t>(batch_size));
      bg.clear();
      int count = 0;
      for (size_t bi = start; bi < end; ++bi) {
        Tensor x = images[order[bi]];
        if (augment) x = augment_image(x, rng);
        int y = labels[order[bi]];
        auto run_sample = [&](const Tensor& xin) {
          ForwardTrace tr = forward_trace(c, xin);
          Tensor dlogits;
          float loss = cross_entropy(tr.acts.back(), y, &dlogits);
          int pred = 0;
          for (int k = 1; k < c.spec.classes; ++k)
            if (tr.acts.back().data[k] > tr.acts.back().data[pred]) pred = k;
          ep_hit += pred == y;
          ep_n += 1;
          ep_loss += loss;
          backward_from(c, tr, dlogits, static_cast<int>(c.layers.size()) - 1, &bg.grads, false);
          count += 1;
          return loss;
        };
        run_sample(x);
        if (adv_eps > 0.0f) {
          Tensor g = input_grad(c, x, y);
          Tensor xadv = x;
          for (size_t j = 0; j < xadv.data.size(); ++j) {
            float s = g.data[j] > 0.0f ? 1.0f : (g.data[j] < 0.0f ? -1.0f : 0.0f);
            xadv.data[j] = std::clamp(xadv.data[j] + adv_eps * s, 0.0f, 1.0f);
          }
          run_sample(xadv);
        }
      }
      float inv = 1.0f / static_cast<float>(count);
      for (auto& g : bg.grads)
        for (float& v : g.data) v *= inv;
      for (size_t pi = 0; pi < c.params.size(); ++pi)
        adam_update(c.params[pi], bg.grads[pi], states[pi], ep_lr, c.param_names[pi]);
    }
    float mean_loss = static_cast<float>(ep_loss / std::max(1, ep_n));
    if (!std::isfinite(mean_loss)) throw std::runtime_error("train: loss diverged (non-finite) at epoch " +
                                                            std::to_string(ep));
    metrics.train_loss.push_back(mean_loss);
    metrics.train_acc.push_back(static_cast<float>(ep_hit) / static_cast<float>(std::max(1, ep_n)));
    metrics.test_acc.push_back(accuracy(c, test_images, test_labels));
  }
  metrics.final_test_acc = metrics.test_acc.empty() ? 0.0f : metrics.test_acc.back();
  c.trained = epochs > 0 ? true : c.trained;
  return metrics;
}

}  // namespace aitl
