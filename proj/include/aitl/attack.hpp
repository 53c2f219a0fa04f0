#pragma once

#include <algorithm>
#include <cmath>
#include <memory>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "aitl/model.hpp"
#include "aitl/rng.hpp"
#include "aitl/tensor.hpp"
#include "aitl/transforms.hpp"

namespace aitl {

struct AttackConfig {
  float eps = 16.0f / 255.0f;   // L-inf budget in unit-range pixels
  float alpha = 1.6f / 255.0f;  // step size
  int iters = 10;               // T
  float mu = 1.0f;              // momentum decay
  int copies = 5;               // N parallel transformed copies
  int combo_len = 4;            // M ops per combo
  bool nesterov = false;        // NIM lookahead

  void validate() const {
    if (!(eps > 0.0f) || !(alpha > 0.0f) || iters < 1 || copies < 1 || combo_len < 1)
      throw std::invalid_argument("AttackConfig: invalid field");
  }
};

// ---------------------------------------------------------------------------
// White-box loss surface (single model or logits-averaged ensemble)
// ---------------------------------------------------------------------------

class AttackTarget {
 public:
  virtual ~AttackTarget() = default;
  virtual float loss(const Tensor& x, int y) const = 0;
  virtual Tensor loss_input_grad(const Tensor& x, int y) const = 0;
};

class EnsembleTarget : public AttackTarget {
 public:
  explicit EnsembleTarget(std::vector<const Classifier*> models) : models_(std::move(models)) {
    if (models_.empty()) throw std::invalid_argument("EnsembleTarget: no source models");
  }

  float loss(const Tensor& x, int y) const override {
    Tensor avg;
    for (size_t k = 0; k < models_.size(); ++k) {
      Tensor lg = logits(*models_[k], x);
      if (k == 0)
        avg = lg;
      else
        for (size_t i = 0; i < avg.data.size(); ++i) avg.data[i] += lg.data[i];
    }
    for (float& v : avg.data) v /= static_cast<float>(models_.size());
    return cross_entropy(avg, y);
  }

  Tensor loss_input_grad(const Tensor& x, int y) const override {
    std::vector<ForwardTrace> traces;
    traces.reserve(models_.size());
    Tensor avg;
    for (size_t k = 0; k < models_.size(); ++k) {
      traces.push_back(forward_trace(*models_[k], x));
      const Tensor& lg = traces.back().acts.back();
      if (k == 0)
        avg = lg;
      else
        for (size_t i = 0; i < avg.data.size(); ++i) avg.data[i] += lg.data[i];
    }
    const float inv = 1.0f / static_cast<float>(models_.size());
    for (float& v : avg.data) v *= inv;
    Tensor dlogits;
    cross_entropy(avg, y, &dlogits);
    for (float& v : dlogits.data) v *= inv;  // dJ/dL_k = (p - onehot) / K
    Tensor g;
    for (size_t k = 0; k < models_.size(); ++k) {
      Tensor gk = backward_from(*models_[k], traces[k], dlogits,
                                static_cast<int>(models_[k]->layers.size()) - 1, nullptr, true);
      if (k == 0)
        g = std::move(gk);
      else
        for (size_t i = 0; i < g.data.size(); ++i) g.data[i] += gk.data[i];
    }
    return g;
  }

 private:
  std::vector<const Classifier*> models_;
};

// ---------------------------------------------------------------------------
// Gradient providers: z = (1/N) sum of per-copy L1-normalized gradients
// ---------------------------------------------------------------------------

inline void l1_normalize_inplace(Tensor& g) {
  double n = l1_norm(g);
  if (n < 1e-20) return;  // all-zero gradient stays zero
  float inv = static_cast<float>(1.0 / n);
  for (float& v : g.data) v *= inv;
}

/// Per-copy gradient through a frozen transform chain, L1-normalized.
inline Tensor chain_normalized_grad(const AttackTarget& target, const Tensor& x, int y,
                                    const std::vector<TransformParams>& chain, const MixPool& pool = {}) {
  Tensor xt = chain.empty() ? x : replay_combo(chain, x, pool);
  Tensor g = target.loss_input_grad(xt, y);
  if (!chain.empty()) g = vjp_combo(chain, x, g, pool);
  l1_normalize_inplace(g);
  return g;
}

class GradProvider {
 public:
  virtual ~GradProvider() = default;
  virtual Tensor momentum_term(const AttackTarget& target, const Tensor& x, int y, RngStream& rng) = 0;
  virtual std::string id() const = 0;
};

class PlainProvider : public GradProvider {
 public:
  Tensor momentum_term(const AttackTarget& target, const Tensor& x, int y, RngStream&) override {
    return chain_normalized_grad(target, x, y, {});
  }
  std::string id() const override { return "plain"; }
};

/// DIM's random-resize decision; nullopt means the input passes unchanged.
inline std::optional<TransformParams> di_params(float p, RngStream& rng, const ScaleProfile& prof) {
  if (rng.uniform() < static_cast<double>(p)) return sample_params(TransformKind::Resize, rng, prof);
  return std::nullopt;
}

inline Tensor di_transform(const Tensor& img, float p, RngStream& rng, const ScaleProfile& prof) {
  auto params = di_params(p, rng, prof);
  return params ? apply(*params, img) : img;
}

class DimProvider : public GradProvider {
 public:
  DimProvider(float p, const ScaleProfile& prof) : p_(p), prof_(prof) {}
  Tensor momentum_term(const AttackTarget& target, const Tensor& x, int y, RngStream& rng) override {
    auto params = di_params(p_, rng, prof_);
    std::vector<TransformParams> chain;
    if (params) chain.push_back(*params);
    return chain_normalized_grad(target, x, y, chain);
  }
  std::string id() const override { return "dim"; }

 private:
  float p_;
  ScaleProfile prof_;
};

/// Depthwise convolution of a gradient with a normalized Gaussian kernel
/// (sigma = k / sqrt(3)), zero padded.
inline Tensor ti_smooth(const Tensor& grad, int k = 7) {
  if (k % 2 == 0) throw std::invalid_argument("ti_smooth: kernel size must be odd");
  if (k == 1) return grad;
  const int r = k / 2;
  std::vector<double> kern(static_cast<size_t>(k) * k);
  const double sigma = static_cast<double>(k) / std::sqrt(3.0);
  double sum = 0.0;
  for (int y = -r; y <= r; ++y)
    for (int x = -r; x <= r; ++x) {
      double v = std::exp(-(y * y + x * x) / (2.0 * sigma * sigma));
      kern[static_cast<size_t>(y + r) * k + (x + r)] = v;
      sum += v;
    }
  for (double& v : kern) v /= sum;

  const int h = grad.shape[0], w = grad.shape[1], C = grad.shape[2];
  Tensor out(grad.shape);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      for (int c = 0; c < C; ++c) {
        double acc = 0.0;
        for (int dy = -r; dy <= r; ++dy) {
          int yy = y + dy;
          if (yy < 0 || yy >= h) continue;
          for (int dx = -r; dx <= r; ++dx) {
            int xx = x + dx;
            if (xx < 0 || xx >= w) continue;
            acc += kern[static_cast<size_t>(dy + r) * k + (dx + r)] * grad.at(yy, xx, c);
          }
        }
        out.at(y, x, c) = static_cast<float>(acc);
      }
  return out;
}

class TimProvider : public GradProvider {
 public:
  explicit TimProvider(int k = 7) : k_(k) {}
  Tensor momentum_term(const AttackTarget& target, const Tensor& x, int y, RngStream&) override {
    Tensor g = target.loss_input_grad(x, y);
    g = ti_smooth(g, k_);
    l1_normalize_inplace(g);
    return g;
  }
  std::string id() const override { return "tim"; }

 private:
  int k_;
};

class SimProvider : public GradProvider {
 public:
  explicit SimProvider(int m = 5) : m_(m) {
    if (m < 1) throw std::invalid_argument("SimProvider: m must be >= 1");
  }
  Tensor momentum_term(const AttackTarget& target, const Tensor& x, int y, RngStream&) override {
    Tensor z;
    for (int i = 0; i < m_; ++i) {
      TransformParams sc;
      sc.kind = TransformKind::Scale;
      sc.magnitudes = {static_cast<float>(i)};  // integer exponents per the SIM construction
      Tensor g = chain_normalized_grad(target, x, y, {sc});
      if (i == 0)
        z = std::move(g);
      else
        for (size_t j = 0; j < z.data.size(); ++j) z.data[j] += g.data[j];
    }
    for (float& v : z.data) v /= static_cast<float>(m_);
    return z;
  }
  std::string id() const override { return "sim"; }

 private:
  int m_;
};

class CimProvider : public GradProvider {
 public:
  CimProvider(int copies, const ScaleProfile& prof) : copies_(copies), prof_(prof) {}
  Tensor momentum_term(const AttackTarget& target, const Tensor& x, int y, RngStream& rng) override {
    Tensor z;
    for (int i = 0; i < copies_; ++i) {
      TransformParams crop = sample_params(TransformKind::Crop, rng, prof_);
      Tensor g = chain_normalized_grad(target, x, y, {crop});
      if (i == 0)
        z = std::move(g);
      else
        for (size_t j = 0; j < z.data.size(); ++j) z.data[j] += g.data[j];
    }
    for (float& v : z.data) v /= static_cast<float>(copies_);
    return z;
  }
  std::string id() const override { return "cim"; }

 private:
  int copies_;
  ScaleProfile prof_;
};

class AdmixProvider : public GradProvider {
 public:
  AdmixProvider(int m1, int m2, float eta, const MixPool& pool) : m1_(m1), m2_(m2), eta_(eta), pool_(pool) {
    if (m1 < 1 || m2 < 1) throw std::invalid_argument("AdmixProvider: m1 and m2 must be >= 1");
  }
  Tensor momentum_term(const AttackTarget& target, const Tensor& x, int y, RngStream& rng) override {
    Tensor z;
    int n = 0;
    for (int j = 0; j < m2_; ++j) {
      // one fresh pool image per admix copy, shared across its scale copies
      int aux = (eta_ != 0.0f && pool_.size() > 0) ? static_cast<int>(rng.uniform_int(pool_.size())) : -1;
      for (int i = 0; i < m1_; ++i) {
        std::vector<TransformParams> chain;
        if (eta_ != 0.0f) {
          TransformParams ad;
          ad.kind = TransformKind::Admix;
          ad.magnitudes = {eta_};
          ad.aux_image = aux;
          chain.push_back(ad);
        }
        if (i > 0) {
          TransformParams sc;
          sc.kind = TransformKind::Scale;
          sc.magnitudes = {static_cast<float>(i)};
          chain.push_back(sc);
        }
        Tensor g = chain_normalized_grad(target, x, y, chain, pool_);
        if (n == 0)
          z = std::move(g);
        else
          for (size_t k = 0; k < z.data.size(); ++k) z.data[k] += g.data[k];
        ++n;
      }
    }
    for (float& v : z.data) v /= static_cast<float>(n);
    return z;
  }
  std::string id() const override { return "admix"; }

 private:
  int m1_, m2_;
  float eta_;
  MixPool pool_;
};

/// The fixed ADSCM sequence applied before the classifier on every copy.
inline TransformCombo adscm_combo() {
  return {TransformKind::Admix, TransformKind::Resize, TransformKind::Scale, TransformKind::Crop};
}

/// N fixed combos (kinds frozen, magnitudes resampled every iteration).
/// AITL-selected combos, the Random baseline and ADSCM all use this path.
class FixedCombosProvider : public GradProvider {
 public:
  FixedCombosProvider(std::vector<TransformCombo> combos, const ScaleProfile& prof, const MixPool& pool,
                      std::string id = "fixed-combos")
      : combos_(std::move(combos)), prof_(prof), pool_(pool), id_(std::move(id)) {
    if (combos_.empty()) throw std::invalid_argument("FixedCombosProvider: no combos");
  }

  Tensor momentum_term(const AttackTarget& target, const Tensor& x, int y, RngStream& rng) override {
    Tensor z;
    for (size_t c = 0; c < combos_.size(); ++c) {
      std::vector<TransformParams> chain;
      chain.reserve(combos_[c].size());
      for (TransformKind k : combos_[c]) chain.push_back(sample_params(k, rng, prof_));
      Tensor g = chain_normalized_grad(target, x, y, chain, pool_);
      if (c == 0)
        z = std::move(g);
      else
        for (size_t j = 0; j < z.data.size(); ++j) z.data[j] += g.data[j];
    }
    for (float& v : z.data) v /= static_cast<float>(combos_.size());
    return z;
  }
  std::string id() const override { return id_; }
  const std::vector<TransformCombo>& combos() const { return combos_; }

 private:
  std::vector<TransformCombo> combos_;
  ScaleProfile prof_;
  MixPool pool_;
  std::string id_;
};

inline std::unique_ptr<FixedCombosProvider> adscm_provider(int copies, const ScaleProfile& prof,
                                                           const MixPool& pool) {
  return std::make_unique<FixedCombosProvider>(std::vector<TransformCombo>(static_cast<size_t>(copies), adscm_combo()),
                                               prof, pool, "adscm");
}

/// Uniform combos over the reduced 12-op subset, one per parallel copy.
inline std::vector<TransformCombo> sample_random_combos(int n, int combo_len, RngStream& rng) {
  const auto& kinds = random_subset_kinds();
  std::vector<TransformCombo> combos;
  combos.reserve(static_cast<size_t>(n));
  for (int i = 0; i < n; ++i) {
    TransformCombo combo;
    for (int j = 0; j < combo_len; ++j) combo.push_back(kinds[rng.uniform_int(kinds.size())]);
    combos.push_back(std::move(combo));
  }
  return combos;
}

inline std::unique_ptr<FixedCombosProvider> random_combo_provider(const AttackConfig& cfg, RngStream& rng,
                                                                  const ScaleProfile& prof, const MixPool& pool) {
  return std::make_unique<FixedCombosProvider>(sample_random_combos(cfg.copies, cfg.combo_len, rng), prof, pool,
                                               "random");
}

// ---------------------------------------------------------------------------
// Attack loops
// ---------------------------------------------------------------------------

struct AttackTrace {
  std::vector<float> losses;  // source loss J(f(x_t), y) before each step
};

inline float sign0(float v) { return v > 0.0f ? 1.0f : (v < 0.0f ? -1.0f : 0.0f); }

/// MIFGSM (Nesterov lookahead when cfg.nesterov): accumulate z into the
/// momentum buffer, step by alpha * sign(g), project to the eps-ball and
/// clip to [0,1] every iteration.
inline Tensor mifgsm(const Tensor& x0, int y, const AttackTarget& target, const AttackConfig& cfg,
                     GradProvider& gp, RngStream& rng, AttackTrace* trace = nullptr) {
  cfg.validate();
  Tensor x = x0;
  Tensor g = Tensor::zeros(x0.shape);
  for (int t = 0; t < cfg.iters; ++t) {
    if (trace) trace->losses.push_back(target.loss(x, y));
    Tensor x_eval = x;
    if (cfg.nesterov)
      for (size_t i = 0; i < x_eval.data.size(); ++i) x_eval.data[i] += cfg.alpha * cfg.mu * g.data[i];
    Tensor z = gp.momentum_term(target, x_eval, y, rng);
    if (!all_finite(z)) throw std::runtime_error("mifgsm: non-finite gradient term from provider " + gp.id());
    for (size_t i = 0; i < g.data.size(); ++i) g.data[i] = cfg.mu * g.data[i] + z.data[i];
    for (size_t i = 0; i < x.data.size(); ++i) {
      float v = x.data[i] + cfg.alpha * sign0(g.data[i]);
      v = std::clamp(v, x0.data[i] - cfg.eps, x0.data[i] + cfg.eps);
      x.data[i] = std::clamp(v, 0.0f, 1.0f);
    }
  }
  if (trace) trace->losses.push_back(target.loss(x, y));
  return x;
}

/// Plain iterative FGSM, kept as an independent reduction oracle.
inline Tensor ifgsm(const Tensor& x0, int y, const AttackTarget& target, float eps, float alpha, int iters) {
  Tensor x = x0;
  for (int t = 0; t < iters; ++t) {
    Tensor g = target.loss_input_grad(x, y);
    for (size_t i = 0; i < x.data.size(); ++i) {
      float v = x.data[i] + alpha * sign0(g.data[i]);
      v = std::clamp(v, x0.data[i] - eps, x0.data[i] + eps);
      x.data[i] = std::clamp(v, 0.0f, 1.0f);
    }
  }
  return x;
}

// ---------------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------------

struct EvalResult {
  std::vector<std::string> model_ids;
  std::vector<std::vector<uint8_t>> fooled;  // [model][image]
  std::vector<double> rates;                 // per model: fooled / images
  std::vector<double> q_asr;                 // per image: fraction of models fooled
};

inline EvalResult evaluate_asr(const std::vector<Tensor>& adv, const std::vector<int>& labels,
                               const std::vector<const Classifier*>& models,
                               const std::vector<std::string>& model_ids = {}) {
  if (adv.size() != labels.size()) throw std::invalid_argument("evaluate_asr: image/label count mismatch");
  if (models.empty()) throw std::invalid_argument("evaluate_asr: no models");
  for (const Classifier* m : models)
    if (!m->trained) throw std::runtime_error("evaluate_asr: refusing to evaluate on an untrained model");

  EvalResult res;
  for (size_t k = 0; k < models.size(); ++k)
    res.model_ids.push_back(k < model_ids.size() ? model_ids[k] : "model" + std::to_string(k));
  res.fooled.assign(models.size(), std::vector<uint8_t>(adv.size(), 0));
  res.q_asr.assign(adv.size(), 0.0);
  for (size_t k = 0; k < models.size(); ++k) {
    int hits = 0;
    for (size_t i = 0; i < adv.size(); ++i) {
      bool fooled = predict(*models[k], adv[i]) != labels[i];
      res.fooled[k][i] = fooled ? 1 : 0;
      hits += fooled;
      res.q_asr[i] += fooled ? 1.0 : 0.0;
    }
    res.rates.push_back(static_cast<double>(hits) / static_cast<double>(adv.size()));
  }
  for (double& q : res.q_asr) q /= static_cast<double>(models.size());
  return res;
}

}  // namespace aitl
