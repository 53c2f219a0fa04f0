#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <memory>
#include <sstream>
#include <stdexcept>
#include <string>
#include <thread>
#include <unordered_map>
#include <vector>

#include "aitl/adam.hpp"
#include "aitl/attack.hpp"
#include "aitl/checkpoint.hpp"
#include "aitl/fsio.hpp"
#include "aitl/model.hpp"
#include "aitl/rng.hpp"
#include "aitl/transforms.hpp"

namespace aitl {

struct AitlConfig {
  int combo_len = 4;    // M
  int embed_dim = 32;   // d_e
  int enc_hidden = 256;
  int latent_dim = 128;
  int pred_hidden = 256;
};

/// Embedding table + encoder + decoder + per-slot reconstruction heads +
/// ASR predictor, trained jointly with the feature extractor.
struct AITLParams {
  AitlConfig cfg;
  Classifier extractor;

  Tensor embedding;                    // [20, d_e]
  Tensor enc_w1, enc_b1, enc_w2, enc_b2;
  Tensor dec_w1, dec_b1, dec_w2, dec_b2;
  std::vector<Tensor> head_w, head_b;  // M x ([20, d_e], [20])
  Tensor pred_w1, pred_b1, pred_w2, pred_b2;

  int feature_dim() const { return extractor.feature_dim; }

  std::vector<Tensor*> tensors() {
    std::vector<Tensor*> out = {&embedding, &enc_w1, &enc_b1, &enc_w2, &enc_b2,
                                &dec_w1,    &dec_b1, &dec_w2, &dec_b2};
    for (size_t i = 0; i < head_w.size(); ++i) {
      out.push_back(&head_w[i]);
      out.push_back(&head_b[i]);
    }
    out.push_back(&pred_w1);
    out.push_back(&pred_b1);
    out.push_back(&pred_w2);
    out.push_back(&pred_b2);
    return out;
  }
  std::vector<std::string> tensor_names() const {
    std::vector<std::string> out = {"embedding", "enc.w1", "enc.b1", "enc.w2", "enc.b2",
                                    "dec.w1",    "dec.b1", "dec.w2", "dec.b2"};
    for (size_t i = 0; i < head_w.size(); ++i) {
      out.push_back("head" + std::to_string(i) + ".w");
      out.push_back("head" + std::to_string(i) + ".b");
    }
    out.push_back("pred.w1");
    out.push_back("pred.b1");
    out.push_back("pred.w2");
    out.push_back("pred.b2");
    return out;
  }
};

namespace detail {

inline Tensor init_normal(std::vector<int> shape, float scale, RngStream& rng) {
  Tensor t(std::move(shape));
  for (auto& v : t.data) v = rng.normal() * scale;
  return t;
}

inline void dense_fwd(const Tensor& w, const Tensor& b, const float* x, float* y) {
  const int out_n = w.shape[0], in_n = w.shape[1];
  for (int o = 0; o < out_n; ++o) {
    float acc = b.data[o];
    const float* row = &w.data[static_cast<size_t>(o) * in_n];
    for (int i = 0; i < in_n; ++i) acc += row[i] * x[i];
    y[o] = acc;
  }
}

// dy -> dx, accumulating dW/db when sinks given
inline void dense_bwd(const Tensor& w, const float* x, const float* dy, float* dx, Tensor* dw, Tensor* db) {
  const int out_n = w.shape[0], in_n = w.shape[1];
  if (dx)
    for (int i = 0; i < in_n; ++i) dx[i] = 0.0f;
  for (int o = 0; o < out_n; ++o) {
    float g = dy[o];
    const float* row = &w.data[static_cast<size_t>(o) * in_n];
    if (db) db->data[o] += g;
    float* drow = dw ? &dw->data[static_cast<size_t>(o) * in_n] : nullptr;
    for (int i = 0; i < in_n; ++i) {
      if (drow) drow[i] += g * x[i];
      if (dx) dx[i] += g * row[i];
    }
  }
}

}  // namespace detail

/// Deterministic initialization. The decoder starts as the encoder's
/// transpose and the heads as scaled copies of the embedding table, so the
/// autoencoding path begins near a working solution; the predictor output
/// layer starts small so early Adam steps dominate its initial noise.
inline AITLParams build_aitl(const AitlConfig& cfg, const Classifier& extractor, uint64_t seed) {
  AITLParams P;
  P.cfg = cfg;
  P.extractor = extractor;
  const int a_dim = cfg.combo_len * cfg.embed_dim;
  const int mix_dim = cfg.latent_dim + extractor.feature_dim;
  RngStream rng(seed, 71);
  auto he = [&](int out, int in) {
    return detail::init_normal({out, in}, std::sqrt(2.0f / static_cast<float>(in)), rng);
  };
  P.embedding = detail::init_normal({kNumTransformKinds, cfg.embed_dim},
                                    1.0f / std::sqrt(static_cast<float>(cfg.embed_dim)), rng);
  P.enc_w1 = he(cfg.enc_hidden, a_dim);
  P.enc_b1 = Tensor::zeros({cfg.enc_hidden});
  P.enc_w2 = he(cfg.latent_dim, cfg.enc_hidden);
  P.enc_b2 = Tensor::zeros({cfg.latent_dim});
  P.dec_w1 = Tensor({cfg.enc_hidden, cfg.latent_dim});
  for (int o = 0; o < cfg.enc_hidden; ++o)
    for (int i = 0; i < cfg.latent_dim; ++i) P.dec_w1.at(o, i) = P.enc_w2.at(i, o);
  P.dec_b1 = Tensor::zeros({cfg.enc_hidden});
  P.dec_w2 = Tensor({a_dim, cfg.enc_hidden});
  for (int o = 0; o < a_dim; ++o)
    for (int i = 0; i < cfg.enc_hidden; ++i) P.dec_w2.at(o, i) = 2.0f * P.enc_w1.at(i, o);
  P.dec_b2 = Tensor::zeros({a_dim});
  for (int i = 0; i < cfg.combo_len; ++i) {
    Tensor hw = P.embedding;  // rows are the class anchors in embedding space
    for (float& v : hw.data) v *= 2.0f;
    P.head_w.push_back(std::move(hw));
    P.head_b.push_back(Tensor::zeros({kNumTransformKinds}));
  }
  P.pred_w1 = he(cfg.pred_hidden, mix_dim);
  P.pred_b1 = Tensor::zeros({cfg.pred_hidden});
  P.pred_w2 = detail::init_normal({1, cfg.pred_hidden}, 0.01f, rng);
  P.pred_b2 = Tensor::zeros({1});
  return P;
}

// ---------------------------------------------------------------------------
// Forward / losses / backward
// ---------------------------------------------------------------------------

/// Slot-ordered concatenation of embedding rows (Algorithm 1's (c_i) -> a).
inline Tensor encode_combo(const TransformCombo& combo, const AITLParams& P) {
  if (static_cast<int>(combo.size()) != P.cfg.combo_len)
    throw std::invalid_argument("encode_combo: combo length != M");
  Tensor a({P.cfg.combo_len * P.cfg.embed_dim});
  for (int s = 0; s < P.cfg.combo_len; ++s) {
    int id = static_cast<int>(combo[static_cast<size_t>(s)]);
    if (id < 0 || id >= kNumTransformKinds) throw std::invalid_argument("encode_combo: unknown kind id");
    for (int j = 0; j < P.cfg.embed_dim; ++j)
      a.data[static_cast<size_t>(s) * P.cfg.embed_dim + j] = P.embedding.at(id, j);
  }
  return a;
}

struct AitlForward {
  Tensor a;                                   // M*d_e
  Tensor enc_z1, enc_h1;                      // pre/post relu
  Tensor h;                                   // h_trans
  Tensor dec_z1, dec_h1;
  Tensor a_prime;
  std::vector<std::vector<float>> head_probs; // M x 20 softmax rows
  Tensor h_img;
  Tensor pred_z1, pred_h1;
  float pred_u = 0.0f;                        // pre-sigmoid
  float p_asr = 0.5f;
};

inline Tensor encoder_forward(const Tensor& a, const AITLParams& P, Tensor* z1_out = nullptr,
                              Tensor* h1_out = nullptr) {
  Tensor z1({P.cfg.enc_hidden});
  detail::dense_fwd(P.enc_w1, P.enc_b1, a.data.data(), z1.data.data());
  Tensor h1 = z1;
  for (float& v : h1.data) v = v > 0.0f ? v : 0.0f;
  Tensor h({P.cfg.latent_dim});
  detail::dense_fwd(P.enc_w2, P.enc_b2, h1.data.data(), h.data.data());
  if (z1_out) *z1_out = std::move(z1);
  if (h1_out) *h1_out = std::move(h1);
  return h;
}

inline Tensor decoder_forward(const Tensor& h, const AITLParams& P, Tensor* z1_out = nullptr,
                              Tensor* h1_out = nullptr) {
  Tensor z1({P.cfg.enc_hidden});
  detail::dense_fwd(P.dec_w1, P.dec_b1, h.data.data(), z1.data.data());
  Tensor h1 = z1;
  for (float& v : h1.data) v = v > 0.0f ? v : 0.0f;
  Tensor ap({P.cfg.combo_len * P.cfg.embed_dim});
  detail::dense_fwd(P.dec_w2, P.dec_b2, h1.data.data(), ap.data.data());
  if (z1_out) *z1_out = std::move(z1);
  if (h1_out) *h1_out = std::move(h1);
  return ap;
}

inline std::vector<float> head_logits(int slot, const Tensor& a_prime, const AITLParams& P) {
  std::vector<float> lg(kNumTransformKinds);
  const float* x = &a_prime.data[static_cast<size_t>(slot) * P.cfg.embed_dim];
  detail::dense_fwd(P.head_w[static_cast<size_t>(slot)], P.head_b[static_cast<size_t>(slot)], x, lg.data());
  return lg;
}

inline std::vector<float> softmax_vec(const std::vector<float>& lg) {
  float mx = lg[0];
  for (float v : lg) mx = std::max(mx, v);
  std::vector<float> p(lg.size());
  double sum = 0.0;
  for (size_t i = 0; i < lg.size(); ++i) {
    p[i] = std::exp(lg[i] - mx);
    sum += p[i];
  }
  for (auto& v : p) v = static_cast<float>(v / sum);
  return p;
}

/// Predictor on a fixed mix vector; also returns pre-activations for VJPs.
inline float predictor_forward(const Tensor& h, const Tensor& h_img, const AITLParams& P, Tensor* z1_out = nullptr,
                               Tensor* h1_out = nullptr, float* u_out = nullptr) {
  const int mix_dim = P.cfg.latent_dim + P.feature_dim();
  Tensor mix({mix_dim});
  std::copy(h.data.begin(), h.data.end(), mix.data.begin());
  std::copy(h_img.data.begin(), h_img.data.end(), mix.data.begin() + P.cfg.latent_dim);
  Tensor z1({P.cfg.pred_hidden});
  detail::dense_fwd(P.pred_w1, P.pred_b1, mix.data.data(), z1.data.data());
  Tensor h1 = z1;
  for (float& v : h1.data) v = v > 0.0f ? v : 0.0f;
  float u = P.pred_b2.data[0];
  for (int i = 0; i < P.cfg.pred_hidden; ++i) u += P.pred_w2.data[static_cast<size_t>(i)] * h1.data[static_cast<size_t>(i)];
  u = std::clamp(u, -12.0f, 12.0f);  // keeps sigma'(u) above float underflow
  if (z1_out) *z1_out = std::move(z1);
  if (h1_out) *h1_out = std::move(h1);
  if (u_out) *u_out = u;
  return 1.0f / (1.0f + std::exp(-u));
}

/// Full forward pass for one (combo, image-feature) pair.
inline AitlForward aitl_forward(const TransformCombo& combo, const Tensor& h_img, const AITLParams& P) {
  AitlForward f;
  f.a = encode_combo(combo, P);
  f.h = encoder_forward(f.a, P, &f.enc_z1, &f.enc_h1);
  f.a_prime = decoder_forward(f.h, P, &f.dec_z1, &f.dec_h1);
  for (int s = 0; s < P.cfg.combo_len; ++s) f.head_probs.push_back(softmax_vec(head_logits(s, f.a_prime, P)));
  f.h_img = h_img;
  f.p_asr = predictor_forward(f.h, h_img, P, &f.pred_z1, &f.pred_h1, &f.pred_u);
  return f;
}

struct AitlLosses {
  float rec = 0.0f;
  float asr = 0.0f;
  float total = 0.0f;
};

/// L_rec = -sum_i c_i^T log c'_i;  L_asr = |p - q|;  L_total = sum.
inline AitlLosses aitl_losses(const TransformCombo& combo, const std::vector<std::vector<float>>& head_probs,
                              float p_asr, float q_asr) {
  if (combo.size() != head_probs.size()) throw std::invalid_argument("aitl_losses: head count != M");
  AitlLosses L;
  for (size_t s = 0; s < combo.size(); ++s) {
    float p = head_probs[s][static_cast<size_t>(combo[s])];
    L.rec += -std::log(std::max(p, 1e-12f));
  }
  L.asr = std::fabs(p_asr - q_asr);
  L.total = L.rec + L.asr;
  return L;
}

/// Gradient of p_asr w.r.t. h with h_img held constant (inference ascent).
inline Tensor predictor_grad_h(const Tensor& h, const Tensor& h_img, const AITLParams& P, float* p_out = nullptr) {
  Tensor z1, h1;
  float u;
  float p = predictor_forward(h, h_img, P, &z1, &h1, &u);
  if (p_out) *p_out = p;
  float dp = p * (1.0f - p);  // dσ/du
  Tensor dh1({P.cfg.pred_hidden});
  for (int i = 0; i < P.cfg.pred_hidden; ++i)
    dh1.data[static_cast<size_t>(i)] = dp * P.pred_w2.data[static_cast<size_t>(i)] * (z1.data[static_cast<size_t>(i)] > 0.0f ? 1.0f : 0.0f);
  const int mix_dim = P.cfg.latent_dim + P.feature_dim();
  Tensor dmix({mix_dim});
  detail::dense_bwd(P.pred_w1, nullptr, dh1.data.data(), dmix.data.data(), nullptr, nullptr);
  Tensor dh({P.cfg.latent_dim});
  std::copy(dmix.data.begin(), dmix.data.begin() + P.cfg.latent_dim, dh.data.begin());
  return dh;
}

struct AitlGrads {
  std::vector<Tensor> aitl;       // aligned with AITLParams::tensors()
  std::vector<Tensor> extractor;  // aligned with extractor params

  explicit AitlGrads(AITLParams& P) {
    for (Tensor* t : P.tensors()) aitl.push_back(Tensor::zeros(t->shape));
    for (const auto& t : P.extractor.params) extractor.push_back(Tensor::zeros(t.shape));
  }
  void clear() {
    for (auto& g : aitl)
      for (float& v : g.data) v = 0.0f;
    for (auto& g : extractor)
      for (float& v : g.data) v = 0.0f;
  }
};

/// Backward pass of L_total for one sample, accumulating into sinks.
/// The extractor trace must come from the same image that produced h_img.
inline void aitl_backward(const TransformCombo& combo, const AitlForward& f, float q_asr, AITLParams& P,
                          const ForwardTrace& extractor_trace, AitlGrads& grads, float scale = 1.0f) {
  const int M = P.cfg.combo_len, de = P.cfg.embed_dim, L = P.cfg.latent_dim;
  enum {  // indices into AitlGrads::aitl, mirroring tensors()
    G_EMB = 0, G_EW1, G_EB1, G_EW2, G_EB2, G_DW1, G_DB1, G_DW2, G_DB2, G_HEADS
  };
  const int G_PW1 = G_HEADS + 2 * M, G_PB1 = G_PW1 + 1, G_PW2 = G_PW1 + 2, G_PB2 = G_PW1 + 3;

  // --- L_asr: |p - q| through the predictor ---
  float dL_dp = 0.0f;
  if (f.p_asr > q_asr) dL_dp = 1.0f;
  else if (f.p_asr < q_asr) dL_dp = -1.0f;
  dL_dp *= scale;
  float du = dL_dp * f.p_asr * (1.0f - f.p_asr);

  Tensor dpred_h1({P.cfg.pred_hidden});
  for (int i = 0; i < P.cfg.pred_hidden; ++i) {
    grads.aitl[G_PW2].data[static_cast<size_t>(i)] += du * f.pred_h1.data[static_cast<size_t>(i)];
    dpred_h1.data[static_cast<size_t>(i)] =
        du * P.pred_w2.data[static_cast<size_t>(i)] * (f.pred_z1.data[static_cast<size_t>(i)] > 0.0f ? 1.0f : 0.0f);
  }
  grads.aitl[G_PB2].data[0] += du;

  const int mix_dim = L + P.feature_dim();
  Tensor mix({mix_dim});
  std::copy(f.h.data.begin(), f.h.data.end(), mix.data.begin());
  std::copy(f.h_img.data.begin(), f.h_img.data.end(), mix.data.begin() + L);
  Tensor dmix({mix_dim});
  detail::dense_bwd(P.pred_w1, mix.data.data(), dpred_h1.data.data(), dmix.data.data(), &grads.aitl[G_PW1],
                    &grads.aitl[G_PB1]);

  Tensor dh({L});
  std::copy(dmix.data.begin(), dmix.data.begin() + L, dh.data.begin());
  Tensor dh_img({P.feature_dim()});
  std::copy(dmix.data.begin() + L, dmix.data.end(), dh_img.data.begin());

  // --- L_rec: softmax cross-entropy per head, back through the decoder ---
  Tensor da_prime = Tensor::zeros({M * de});
  for (int s = 0; s < M; ++s) {
    std::vector<float> dlogits = f.head_probs[static_cast<size_t>(s)];
    dlogits[static_cast<size_t>(combo[static_cast<size_t>(s)])] -= 1.0f;
    for (auto& v : dlogits) v *= scale;
    const float* slot = &f.a_prime.data[static_cast<size_t>(s) * de];
    Tensor& hw = grads.aitl[static_cast<size_t>(G_HEADS + 2 * s)];
    Tensor& hb = grads.aitl[static_cast<size_t>(G_HEADS + 2 * s + 1)];
    float* dslot = &da_prime.data[static_cast<size_t>(s) * de];
    const Tensor& w = P.head_w[static_cast<size_t>(s)];
    for (int o = 0; o < kNumTransformKinds; ++o) {
      float g = dlogits[static_cast<size_t>(o)];
      hb.data[static_cast<size_t>(o)] += g;
      const float* row = &w.data[static_cast<size_t>(o) * de];
      float* drow = &hw.data[static_cast<size_t>(o) * de];
      for (int j = 0; j < de; ++j) {
        drow[j] += g * slot[j];
        dslot[j] += g * row[j];
      }
    }
  }

  Tensor ddec_h1({P.cfg.enc_hidden});
  detail::dense_bwd(P.dec_w2, f.dec_h1.data.data(), da_prime.data.data(), ddec_h1.data.data(), &grads.aitl[G_DW2],
                    &grads.aitl[G_DB2]);
  for (int i = 0; i < P.cfg.enc_hidden; ++i)
    if (f.dec_z1.data[static_cast<size_t>(i)] <= 0.0f) ddec_h1.data[static_cast<size_t>(i)] = 0.0f;
  Tensor dh_dec({L});
  detail::dense_bwd(P.dec_w1, f.h.data.data(), ddec_h1.data.data(), dh_dec.data.data(), &grads.aitl[G_DW1],
                    &grads.aitl[G_DB1]);
  for (int i = 0; i < L; ++i) dh.data[static_cast<size_t>(i)] += dh_dec.data[static_cast<size_t>(i)];

  // --- encoder and embedding ---
  Tensor denc_h1({P.cfg.enc_hidden});
  detail::dense_bwd(P.enc_w2, f.enc_h1.data.data(), dh.data.data(), denc_h1.data.data(), &grads.aitl[G_EW2],
                    &grads.aitl[G_EB2]);
  for (int i = 0; i < P.cfg.enc_hidden; ++i)
    if (f.enc_z1.data[static_cast<size_t>(i)] <= 0.0f) denc_h1.data[static_cast<size_t>(i)] = 0.0f;
  Tensor da({M * de});
  detail::dense_bwd(P.enc_w1, f.a.data.data(), denc_h1.data.data(), da.data.data(), &grads.aitl[G_EW1],
                    &grads.aitl[G_EB1]);
  for (int s = 0; s < M; ++s) {
    int id = static_cast<int>(combo[static_cast<size_t>(s)]);
    for (int j = 0; j < de; ++j)
      grads.aitl[G_EMB].data[static_cast<size_t>(id) * de + j] += da.data[static_cast<size_t>(s) * de + j];
  }

  // --- feature extractor finetuning via dL/dh_img ---
  backward_from(P.extractor, extractor_trace, dh_img, P.extractor.feature_layer, &grads.extractor, false);
}

// ---------------------------------------------------------------------------
// Training tuples (Algorithm 1 data generation)
// ---------------------------------------------------------------------------

struct TrainingTuple {
  int image_id = 0;
  TransformCombo combo;
  float q_asr = 0.0f;
  uint64_t seed = 0;
};

inline std::string tuple_csv_line(const TrainingTuple& t) {
  std::ostringstream os;
  os << t.image_id;
  for (TransformKind k : t.combo) os << "," << static_cast<int>(k);
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.9g", t.q_asr);
  os << "," << buf << "," << t.seed;
  return os.str();
}

inline std::vector<TrainingTuple> load_tuples_csv(const std::string& path, int combo_len) {
  std::vector<TrainingTuple> out;
  if (!file_exists(path)) return out;
  std::istringstream in(read_file(path));
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty() || line[0] == '#') continue;
    std::istringstream ls(line);
    std::string cell;
    TrainingTuple t;
    if (!std::getline(ls, cell, ',')) continue;
    t.image_id = std::stoi(cell);
    for (int i = 0; i < combo_len; ++i) {
      std::getline(ls, cell, ',');
      t.combo.push_back(kind_from_id(std::stoi(cell)));
    }
    std::getline(ls, cell, ',');
    t.q_asr = std::stof(cell);
    std::getline(ls, cell, ',');
    t.seed = std::stoull(cell);
    out.push_back(std::move(t));
  }
  return out;
}

/// Attack every (image, sampled combo) pair with a single-combo provider
/// (N=1 during data generation) and record the measured q_asr over the
/// training targets. Appends to cache_csv; existing (image, combo, seed)
/// rows are not regenerated.
inline std::vector<TrainingTuple> generate_training_tuples(
    const std::vector<Tensor>& images, const std::vector<int>& labels, const AttackTarget& source,
    const std::vector<const Classifier*>& targets, const AttackConfig& cfg, int combos_per_image, uint64_t seed,
    const ScaleProfile& prof, const MixPool& pool, const std::string& cache_csv = "", int workers = 1,
    int* skipped_out = nullptr) {
  if (images.size() != labels.size()) throw std::invalid_argument("generate_training_tuples: size mismatch");
  for (const Classifier* t : targets)
    if (!t->trained) throw std::runtime_error("generate_training_tuples: untrained target model");

  std::vector<TrainingTuple> existing;
  std::unordered_map<std::string, size_t> cache_index;
  auto key_of = [](int image_id, uint64_t s, const TransformCombo& combo) {
    std::string k = std::to_string(image_id) + "|" + std::to_string(s);
    for (TransformKind kk : combo) k += "," + std::to_string(static_cast<int>(kk));
    return k;
  };
  if (!cache_csv.empty()) {
    existing = load_tuples_csv(cache_csv, cfg.combo_len);
    for (size_t i = 0; i < existing.size(); ++i) cache_index[key_of(existing[i].image_id, existing[i].seed, existing[i].combo)] = i;
  }
  auto cached = [&](int image_id, uint64_t s, const TransformCombo& combo) -> const TrainingTuple* {
    auto it = cache_index.find(key_of(image_id, s, combo));
    return it == cache_index.end() ? nullptr : &existing[it->second];
  };

  RngStream root(seed, 9001);
  const int total = static_cast<int>(images.size()) * combos_per_image;
  std::vector<TrainingTuple> results(static_cast<size_t>(total));
  std::vector<uint8_t> ok(static_cast<size_t>(total), 0), from_cache(static_cast<size_t>(total), 0);

  auto work = [&](int begin, int end) {
    for (int job = begin; job < end; ++job) {
      int img_i = job / combos_per_image;
      RngStream rng = root.fork(static_cast<uint64_t>(job));
      uint64_t tuple_seed = rng.next_u64();
      RngStream trng(seed, tuple_seed);
      TransformCombo combo;
      for (int s = 0; s < cfg.combo_len; ++s)
        combo.push_back(kind_from_id(static_cast<int>(trng.uniform_int(kNumTransformKinds))));
      if (const TrainingTuple* hit = cached(img_i, tuple_seed, combo)) {
        results[static_cast<size_t>(job)] = *hit;
        ok[static_cast<size_t>(job)] = 1;
        from_cache[static_cast<size_t>(job)] = 1;
        continue;
      }
      AttackConfig gen_cfg = cfg;
      gen_cfg.copies = 1;
      FixedCombosProvider gp({combo}, prof, pool);
      try {
        Tensor adv = mifgsm(images[static_cast<size_t>(img_i)], labels[static_cast<size_t>(img_i)], source, gen_cfg,
                            gp, trng);
        int fooled = 0;
        for (const Classifier* t : targets) fooled += predict(*t, adv) != labels[static_cast<size_t>(img_i)];
        TrainingTuple t;
        t.image_id = img_i;
        t.combo = combo;
        t.q_asr = static_cast<float>(fooled) / static_cast<float>(targets.size());
        t.seed = tuple_seed;
        results[static_cast<size_t>(job)] = std::move(t);
        ok[static_cast<size_t>(job)] = 1;
      } catch (const std::exception&) {
        ok[static_cast<size_t>(job)] = 0;  // skipped and reported via skipped_out
      }
    }
  };

  if (workers <= 1) {
    work(0, total);
  } else {
    std::vector<std::thread> ts;
    int chunk = (total + workers - 1) / workers;
    for (int w = 0; w < workers; ++w) {
      int b = w * chunk, e = std::min(total, b + chunk);
      if (b < e) ts.emplace_back(work, b, e);
    }
    for (auto& t : ts) t.join();
  }

  std::vector<TrainingTuple> out;
  for (int j = 0; j < total; ++j) {
    if (!ok[static_cast<size_t>(j)]) continue;
    out.push_back(results[static_cast<size_t>(j)]);
    if (!cache_csv.empty() && !from_cache[static_cast<size_t>(j)])
      append_line(cache_csv, tuple_csv_line(results[static_cast<size_t>(j)]));
  }
  if (skipped_out) *skipped_out = total - static_cast<int>(out.size());
  return out;
}

// ---------------------------------------------------------------------------
// Joint training (Algorithm 1)
// ---------------------------------------------------------------------------

struct AitlTrainCurves {
  std::vector<float> total, rec, asr;  // per-epoch means
};

inline AitlTrainCurves train_aitl(std::vector<TrainingTuple> tuples, const std::vector<Tensor>& images,
                                  AITLParams& P, int epochs = 10, int batch = 64, float lr = 5e-5f,
                                  uint64_t seed = 1) {
  if (tuples.empty()) throw std::invalid_argument("train_aitl: empty tuple store");
  for (const auto& t : tuples)
    if (t.image_id < 0 || t.image_id >= static_cast<int>(images.size()))
      throw std::invalid_argument("train_aitl: tuple image id out of range");

  AitlTrainCurves curves;
  std::vector<Tensor*> tensors = P.tensors();
  std::vector<std::string> names = P.tensor_names();
  std::vector<AdamState> st_aitl(tensors.size());
  for (size_t i = 0; i < tensors.size(); ++i) st_aitl[i] = AdamState(tensors[i]->shape);
  std::vector<AdamState> st_ext(P.extractor.params.size());
  for (size_t i = 0; i < st_ext.size(); ++i) st_ext[i] = AdamState(P.extractor.params[i].shape);
  AitlGrads grads(P);

  RngStream order_rng(seed, 501);
  std::vector<size_t> order(tuples.size());
  for (size_t i = 0; i < order.size(); ++i) order[i] = i;

  AITLParams last_good = P;
  for (int ep = 0; ep < epochs; ++ep) {
    order_rng.shuffle(order);
    double sum_total = 0.0, sum_rec = 0.0, sum_asr = 0.0;
    int n = 0;
    for (size_t start = 0; start < order.size(); start += static_cast<size_t>(batch)) {
      size_t end = std::min(order.size(), start + static_cast<size_t>(batch));
      grads.clear();
      float inv = 1.0f / static_cast<float>(end - start);
      for (size_t bi = start; bi < end; ++bi) {
        const TrainingTuple& t = tuples[order[bi]];
        const Tensor& img = images[static_cast<size_t>(t.image_id)];
        ForwardTrace tr = forward_trace(P.extractor, img);
        Tensor h_img = tr.acts[static_cast<size_t>(P.extractor.feature_layer) + 1];
        AitlForward f = aitl_forward(t.combo, h_img, P);
        AitlLosses L = aitl_losses(t.combo, f.head_probs, f.p_asr, t.q_asr);
        sum_total += L.total;
        sum_rec += L.rec;
        sum_asr += L.asr;
        n += 1;
        aitl_backward(t.combo, f, t.q_asr, P, tr, grads, inv);
      }
      for (size_t i = 0; i < tensors.size(); ++i) adam_update(*tensors[i], grads.aitl[i], st_aitl[i], lr, names[i]);
      for (size_t i = 0; i < P.extractor.params.size(); ++i)
        adam_update(P.extractor.params[i], grads.extractor[i], st_ext[i], lr,
                    "extractor." + P.extractor.param_names[i]);
    }
    float mean_total = static_cast<float>(sum_total / std::max(1, n));
    if (!std::isfinite(mean_total)) {
      P = last_good;
      throw std::runtime_error("train_aitl: loss diverged at epoch " + std::to_string(ep) +
                               "; parameters rolled back to last good epoch");
    }
    curves.total.push_back(mean_total);
    curves.rec.push_back(static_cast<float>(sum_rec / std::max(1, n)));
    curves.asr.push_back(static_cast<float>(sum_asr / std::max(1, n)));
    last_good = P;
  }
  return curves;
}

// ---------------------------------------------------------------------------
// Inference-time combo selection (Algorithm 2)
// ---------------------------------------------------------------------------

struct OptimizerSchedule {
  int steps = 1;       // r
  float gamma = 15.0f;

  void validate() const {
    if (steps < 0 || !(gamma >= 0.0f)) throw std::invalid_argument("OptimizerSchedule: invalid field");
  }
};

struct ComboChoice {
  TransformCombo combo;
  bool warning = false;  // non-finite ascent gradient; initial combo returned
};

inline std::atomic<long>& select_combo_calls() {
  static std::atomic<long> counter{0};
  return counter;
}

inline TransformCombo decode_latent(const Tensor& h, const AITLParams& P) {
  Tensor a_prime = decoder_forward(h, P);
  TransformCombo combo;
  for (int s = 0; s < P.cfg.combo_len; ++s) {
    std::vector<float> lg = head_logits(s, a_prime, P);
    int best = 0;
    for (int k = 1; k < kNumTransformKinds; ++k)
      if (lg[static_cast<size_t>(k)] > lg[static_cast<size_t>(best)]) best = k;  // ties -> lowest id
    combo.push_back(kind_from_id(best));
  }
  return combo;
}

/// Sample a random combo, ascend its latent embedding along grad p_asr for
/// r steps (h_img fixed), and decode the result.
inline ComboChoice optimize_combo_from_features(const Tensor& h_img, const AITLParams& P,
                                                const OptimizerSchedule& sched, RngStream& rng) {
  sched.validate();
  TransformCombo init;
  for (int s = 0; s < P.cfg.combo_len; ++s)
    init.push_back(kind_from_id(static_cast<int>(rng.uniform_int(kNumTransformKinds))));
  Tensor a = encode_combo(init, P);
  Tensor h = encoder_forward(a, P);
  for (int j = 0; j < sched.steps; ++j) {
    Tensor dh = predictor_grad_h(h, h_img, P);
    if (!all_finite(dh)) return {init, true};
    for (int i = 0; i < P.cfg.latent_dim; ++i) h.data[static_cast<size_t>(i)] += sched.gamma * dh.data[static_cast<size_t>(i)];
  }
  return {decode_latent(h, P), false};
}

inline ComboChoice optimize_combo(const Tensor& image, const AITLParams& P, const OptimizerSchedule& sched,
                                  RngStream& rng) {
  return optimize_combo_from_features(features(P.extractor, image), P, sched, rng);
}

/// N independent initializations, each optimized; duplicates permitted.
inline std::vector<TransformCombo> select_combos(const Tensor& image, const AITLParams& P, int n,
                                                 const OptimizerSchedule& sched, RngStream& rng,
                                                 int* warnings_out = nullptr) {
  select_combo_calls().fetch_add(1);
  Tensor h_img = features(P.extractor, image);
  std::vector<TransformCombo> out;
  int warnings = 0;
  for (int i = 0; i < n; ++i) {
    ComboChoice c = optimize_combo_from_features(h_img, P, sched, rng);
    warnings += c.warning;
    out.push_back(std::move(c.combo));
  }
  if (warnings_out) *warnings_out = warnings;
  return out;
}

struct AitlAttackResult {
  Tensor adv;
  std::vector<TransformCombo> combos;  // recorded in attack metadata
};

/// Algorithm 2: select N combos once before iteration 1, then run MIFGSM
/// with the fixed-combo provider (magnitudes resampled every iteration).
inline AitlAttackResult aitl_attack(const Tensor& x, int y, const AttackTarget& source, const AITLParams& P,
                                    const AttackConfig& cfg, const OptimizerSchedule& sched, RngStream& rng,
                                    const ScaleProfile& prof, const MixPool& pool, AttackTrace* trace = nullptr) {
  RngStream sel_rng = rng.fork(0);
  RngStream atk_rng = rng.fork(1);
  AitlAttackResult res;
  res.combos = select_combos(x, P, cfg.copies, sched, sel_rng);
  FixedCombosProvider gp(res.combos, prof, pool, "aitl");
  res.adv = mifgsm(x, y, source, cfg, gp, atk_rng, trace);
  return res;
}

// ---------------------------------------------------------------------------
// Checkpointing (model-zoo container with an extra AITL section)
// ---------------------------------------------------------------------------

inline void save_aitl(AITLParams& P, const std::string& path, nlohmann::json meta = {}) {
  std::vector<std::string> names;
  std::vector<Tensor> tensors;
  for (size_t i = 0; i < P.extractor.params.size(); ++i) {
    names.push_back("extractor." + P.extractor.param_names[i]);
    tensors.push_back(P.extractor.params[i]);
  }
  auto anames = P.tensor_names();
  auto atens = P.tensors();
  for (size_t i = 0; i < anames.size(); ++i) {
    names.push_back("aitl." + anames[i]);
    tensors.push_back(*atens[i]);
  }
  nlohmann::json header = {{"kind", "aitl"},
                           {"extractor_spec", spec_to_json(P.extractor.spec)},
                           {"extractor_trained", P.extractor.trained},
                           {"config",
                            {{"combo_len", P.cfg.combo_len},
                             {"embed_dim", P.cfg.embed_dim},
                             {"enc_hidden", P.cfg.enc_hidden},
                             {"latent_dim", P.cfg.latent_dim},
                             {"pred_hidden", P.cfg.pred_hidden}}}};
  if (!meta.is_null() && !meta.empty()) header["meta"] = meta;
  save_checkpoint(path, header, names, tensors);
}

inline AITLParams load_aitl(const std::string& path) {
  Checkpoint ck = load_checkpoint(path);
  if (ck.header.at("kind").get<std::string>() != "aitl")
    throw std::runtime_error("checkpoint " + path + ": not an aitl checkpoint");
  AitlConfig cfg;
  const auto& j = ck.header.at("config");
  cfg.combo_len = j.at("combo_len").get<int>();
  cfg.embed_dim = j.at("embed_dim").get<int>();
  cfg.enc_hidden = j.at("enc_hidden").get<int>();
  cfg.latent_dim = j.at("latent_dim").get<int>();
  cfg.pred_hidden = j.at("pred_hidden").get<int>();
  Classifier extractor = build(spec_from_json(ck.header.at("extractor_spec")));
  extractor.trained = ck.header.value("extractor_trained", false);
  AITLParams P = build_aitl(cfg, extractor, 0);
  auto want = P.tensor_names();
  auto dst = P.tensors();
  for (size_t i = 0; i < ck.names.size(); ++i) {
    const std::string& name = ck.names[i];
    if (name.rfind("extractor.", 0) == 0) {
      std::string pname = name.substr(10);
      bool found = false;
      for (size_t k = 0; k < P.extractor.param_names.size(); ++k)
        if (P.extractor.param_names[k] == pname) {
          if (ck.tensors[i].shape != P.extractor.params[k].shape)
            throw std::runtime_error("checkpoint " + path + ": extractor tensor shape mismatch at " + pname);
          P.extractor.params[k] = std::move(ck.tensors[i]);
          found = true;
          break;
        }
      if (!found) throw std::runtime_error("checkpoint " + path + ": unknown extractor tensor " + pname);
    } else if (name.rfind("aitl.", 0) == 0) {
      std::string aname = name.substr(5);
      bool found = false;
      for (size_t k = 0; k < want.size(); ++k)
        if (want[k] == aname) {
          if (ck.tensors[i].shape != dst[k]->shape)
            throw std::runtime_error("checkpoint " + path + ": aitl tensor shape mismatch at " + aname);
          *dst[k] = std::move(ck.tensors[i]);
          found = true;
          break;
        }
      if (!found) throw std::runtime_error("checkpoint " + path + ": unknown aitl tensor " + aname);
    }
  }
  return P;
}

/// Pearson correlation, used to report predictor validity.
inline double pearson(const std::vector<double>& a, const std::vector<double>& b) {
  if (a.size() != b.size() || a.size() < 2) return 0.0;
  double ma = 0, mb = 0;
  for (size_t i = 0; i < a.size(); ++i) {
    ma += a[i];
    mb += b[i];
  }
  ma /= static_cast<double>(a.size());
  mb /= static_cast<double>(a.size());
  double num = 0, va = 0, vb = 0;
  for (size_t i = 0; i < a.size(); ++i) {
    num += (a[i] - ma) * (b[i] - mb);
    va += (a[i] - ma) * (a[i] - ma);
    vb += (b[i] - mb) * (b[i] - mb);
  }
  if (va < 1e-15 || vb < 1e-15) return 0.0;
  return num / std::sqrt(va * vb);
}

}  // namespace aitl
