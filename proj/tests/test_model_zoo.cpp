#include <gtest/gtest.h>

#include <cstdio>
#include <filesystem>

#include "aitl/checkpoint.hpp"
#include "aitl/dataset.hpp"
#include "aitl/gradcheck.hpp"
#include "aitl/model.hpp"

using namespace aitl;

namespace {

// one shared quick-trained model + small dataset for the whole suite
struct Fixture {
  Dataset ds;
  Classifier model;
  Fixture() {
    ds = make_synthetic(10, 120, 42);
    split_dataset(ds, 100, 15, 5, 10);
    ModelSpec spec;
    spec.arch = "cnn_a";
    spec.init_seed = 5;
    model = build(spec);
    RngStream rng(17);
    train(model, ds.subset_images(ds.train_idx), ds.subset_labels(ds.train_idx), ds.subset_images(ds.eval_idx),
          ds.subset_labels(ds.eval_idx), 10, 5e-3f, rng, 0.0f, 16);
  }
};

Fixture& fixture() {
  static Fixture f;
  return f;
}

}  // namespace

TEST(Build, SameSpecSameLogits) {
  ModelSpec spec;
  spec.arch = "cnn_b";
  spec.init_seed = 9;
  Classifier a = build(spec), b = build(spec);
  RngStream rng(1);
  Tensor img = synthetic_image(3, 32, rng);
  EXPECT_EQ(max_abs_diff(logits(a, img), logits(b, img)), 0.0);
}

TEST(Build, DistinctArchsHaveDistinctShapeInventories) {
  ModelSpec sa, sb;
  sa.arch = "cnn_a";
  sb.arch = "cnn_b";
  Classifier a = build(sa), b = build(sb);
  std::vector<std::vector<int>> shapes_a, shapes_b;
  for (const auto& t : a.params) shapes_a.push_back(t.shape);
  for (const auto& t : b.params) shapes_b.push_back(t.shape);
  EXPECT_NE(shapes_a, shapes_b);
}

TEST(Build, LogitsLengthEqualsClassCount) {
  for (const auto& arch : known_archs()) {
    ModelSpec spec;
    spec.arch = arch;
    Classifier c = build(spec);
    RngStream rng(2);
    Tensor img = synthetic_image(0, 32, rng);
    EXPECT_EQ(logits(c, img).shape[0], 10) << arch;
  }
}

TEST(Build, UnknownArchRejected) {
  ModelSpec spec;
  spec.arch = "resnet152";
  EXPECT_THROW(build(spec), std::invalid_argument);
}

TEST(Train, ZeroEpochsLeavesParamsUntouched) {
  ModelSpec spec;
  spec.arch = "mlp_b";
  Classifier c = build(spec);
  std::vector<Tensor> before = c.params;
  Dataset ds = make_synthetic(10, 3, 7);
  RngStream rng(5);
  train(c, ds.images, ds.labels, {}, {}, 0, 1e-3f, rng);
  for (size_t i = 0; i < c.params.size(); ++i) EXPECT_EQ(max_abs_diff(before[i], c.params[i]), 0.0);
  EXPECT_FALSE(c.trained);
}

TEST(Train, LabelOutOfRangeRejected) {
  ModelSpec spec;
  Classifier c = build(spec);
  Dataset ds = make_synthetic(10, 2, 7);
  ds.labels[0] = 17;
  RngStream rng(5);
  EXPECT_THROW(train(c, ds.images, ds.labels, {}, {}, 1, 1e-3f, rng), std::invalid_argument);
}

TEST(Train, DeskCnnReachesReferenceAccuracy) {
  // regression bound measured on the reference generator
  EXPECT_GE(accuracy(fixture().model, fixture().ds.subset_images(fixture().ds.eval_idx),
                     fixture().ds.subset_labels(fixture().ds.eval_idx)),
            0.90f);
}

TEST(Train, ShuffledLabelsStayAtChance) {
  Dataset ds = make_synthetic(10, 30, 101);
  split_dataset(ds, 20, 10, 0, 10);
  auto labels = ds.subset_labels(ds.train_idx);
  RngStream shuf(3);
  shuf.shuffle(labels);
  ModelSpec spec;
  spec.arch = "mlp_b";
  spec.init_seed = 8;
  Classifier c = build(spec);
  RngStream rng(4);
  train(c, ds.subset_images(ds.train_idx), labels, {}, {}, 3, 3e-3f, rng, 0.0f, 16);
  float acc = accuracy(c, ds.subset_images(ds.eval_idx), ds.subset_labels(ds.eval_idx));
  EXPECT_GE(acc, 0.01f);
  EXPECT_LE(acc, 0.25f);  // chance is 0.10
}

TEST(AdvTrain, ZeroEpsMatchesPlainTraining) {
  Dataset ds = make_synthetic(10, 20, 55);
  split_dataset(ds, 15, 5, 0, 10);
  auto run = [&](float eps) {
    ModelSpec spec;
    spec.arch = "mlp_b";
    spec.init_seed = 3;
    Classifier c = build(spec);
    RngStream rng(9);
    auto m = train(c, ds.subset_images(ds.train_idx), ds.subset_labels(ds.train_idx), {}, {}, 3, 2e-3f, rng, eps, 16);
    return m.train_loss.back();
  };
  EXPECT_NEAR(run(0.0f), run(0.0f), 0.0f);
  EXPECT_NEAR(run(0.0f), run(-1.0f), 1e-4f);  // negative budget treated as off
}

TEST(AdvTrain, CleanAccuracyDropIsBounded) {
  Dataset ds = make_synthetic(10, 50, 77);
  split_dataset(ds, 35, 15, 0, 10);
  ModelSpec spec;
  spec.arch = "cnn_e";
  spec.init_seed = 21;
  Classifier normal = build(spec), robust = build(spec);
  RngStream r1(6), r2(6);
  auto tri = ds.subset_images(ds.train_idx);
  auto trl = ds.subset_labels(ds.train_idx);
  auto tei = ds.subset_images(ds.eval_idx);
  auto tel = ds.subset_labels(ds.eval_idx);
  train(normal, tri, trl, tei, tel, 8, 5e-3f, r1, 0.0f, 16);
  train(robust, tri, trl, tei, tel, 8, 5e-3f, r2, 8.0f / 255.0f, 16);
  float an = accuracy(normal, tei, tel), ar = accuracy(robust, tei, tel);
  EXPECT_GE(ar, an - 0.15f);  // measured once, pinned
}

TEST(Gradients, InputGradPassesFiniteDifference) {
  const Classifier& c = fixture().model;
  RngStream rng(31);
  // probe at the highest-loss eval image so the gradient is well conditioned
  int pick = fixture().ds.eval_idx[0];
  float worst = -1.0f;
  for (size_t k = 0; k < 20 && k < fixture().ds.eval_idx.size(); ++k) {
    int i = fixture().ds.eval_idx[k];
    float l = cross_entropy(logits(c, fixture().ds.images[static_cast<size_t>(i)]),
                            fixture().ds.labels[static_cast<size_t>(i)]);
    if (l > worst) {
      worst = l;
      pick = i;
    }
  }
  Tensor img = fixture().ds.images[static_cast<size_t>(pick)];
  int label = fixture().ds.labels[static_cast<size_t>(pick)];
  DifferentiableMap ce{[&](const Tensor& x) {
                         Tensor out({1});
                         out.data[0] = cross_entropy(logits(c, x), label);
                         return out;
                       },
                       [&](const Tensor& x, const Tensor& w) {
                         Tensor g = input_grad(c, x, label);
                         for (auto& v : g.data) v *= w.data[0];
                         return g;
                       }};
  auto rep = finite_diff_check(ce, img, 32, 5e-4, rng);
  EXPECT_TRUE(rep.ok) << rep.note;
  EXPECT_LE(rep.max_rel_err, 1e-3);
}

TEST(Gradients, InvertChainEqualsNegatedGradientOfInvertedImage) {
  const Classifier& c = fixture().model;
  RngStream rng(32);
  Tensor img = synthetic_image(2, 32, rng);
  TransformParams inv;
  inv.kind = TransformKind::Invert;
  std::vector<TransformParams> chain = {inv};
  Tensor g_chain = input_grad(c, img, 2, &chain);

  Tensor inverted = apply(inv, img);
  Tensor g_plain = input_grad(c, inverted, 2);
  for (auto& v : g_plain.data) v = -v;
  EXPECT_LT(max_abs_diff(g_chain, g_plain), 1e-6);
}

TEST(Gradients, FiniteOnDegenerateInput) {
  const Classifier& c = fixture().model;
  Tensor img({32, 32, 3});  // all zeros
  Tensor g = input_grad(c, img, 0);
  EXPECT_TRUE(all_finite(g));
}

TEST(Gradients, SoftmaxCrossEntropyGradientMatchesFiniteDifference) {
  RngStream rng(33);
  Tensor lg({10});
  for (auto& v : lg.data) v = rng.normal();
  int label = 4;
  Tensor dl;
  cross_entropy(lg, label, &dl);
  auto p = softmax(lg);
  for (int i = 0; i < 10; ++i) {
    double fd;
    {
      Tensor lp = lg, lm = lg;
      lp.data[i] += 1e-4f;
      lm.data[i] -= 1e-4f;
      fd = (cross_entropy(lp, label) - cross_entropy(lm, label)) / 2e-4;
    }
    double expect = p[static_cast<size_t>(i)] - (i == label ? 1.0 : 0.0);
    EXPECT_NEAR(dl.data[static_cast<size_t>(i)], expect, 1e-6);
    EXPECT_NEAR(fd, expect, 5e-3);
  }
}

TEST(Features, DeterministicAndDocumentedDimension) {
  const std::map<std::string, int> dims = {{"cnn_a", 64}, {"cnn_b", 56}, {"cnn_c", 48}, {"cnn_d", 48},
                                           {"cnn_e", 56}, {"mlp_a", 64}, {"mlp_b", 48}};
  RngStream rng(34);
  Tensor img = synthetic_image(1, 32, rng);
  for (const auto& arch : known_archs()) {
    ModelSpec spec;
    spec.arch = arch;
    Classifier c = build(spec);
    Tensor f1 = features(c, img), f2 = features(c, img);
    EXPECT_EQ(max_abs_diff(f1, f2), 0.0);
    EXPECT_EQ(f1.shape[0], dims.at(arch)) << arch;
    EXPECT_EQ(c.feature_dim, dims.at(arch)) << arch;
  }
}

TEST(Features, ChangeAfterATrainingStep) {
  ModelSpec spec;
  spec.arch = "cnn_c";
  Classifier c = build(spec);
  RngStream rng(35);
  Tensor img = synthetic_image(5, 32, rng);
  Tensor before = features(c, img);
  Dataset ds = make_synthetic(10, 2, 11);
  RngStream trng(1);
  train(c, ds.images, ds.labels, {}, {}, 1, 1e-3f, trng);
  Tensor after = features(c, img);
  EXPECT_GT(max_abs_diff(before, after), 0.0);
}

TEST(Checkpoint, RoundTripReproducesLogitsBitExactly) {
  const Classifier& c = fixture().model;
  std::string path = std::filesystem::temp_directory_path() / "aitl_test_ckpt.bin";
  save_classifier(c, path, {{"note", "fixture"}});
  Classifier loaded = load_classifier(path);
  RngStream rng(36);
  Tensor img = synthetic_image(7, 32, rng);
  Tensor l1 = logits(c, img), l2 = logits(loaded, img);
  EXPECT_EQ(max_abs_diff(l1, l2), 0.0);
  EXPECT_TRUE(loaded.trained);
  std::filesystem::remove(path);
}

TEST(Checkpoint, TruncatedFileRejectedCleanly) {
  const Classifier& c = fixture().model;
  std::string path = std::filesystem::temp_directory_path() / "aitl_test_trunc.bin";
  save_classifier(c, path);
  std::string bytes = read_file(path);
  atomic_write_file(path, bytes.substr(0, bytes.size() / 2));
  EXPECT_THROW(load_classifier(path), std::runtime_error);
  std::filesystem::remove(path);
}

TEST(Checkpoint, BadMagicAndVersionRejected) {
  const Classifier& c = fixture().model;
  std::string path = std::filesystem::temp_directory_path() / "aitl_test_magic.bin";
  save_classifier(c, path);
  std::string bytes = read_file(path);
  std::string corrupt = bytes;
  corrupt[0] = 'X';
  atomic_write_file(path, corrupt);
  EXPECT_THROW(load_classifier(path), std::runtime_error);
  // version bump must reject the current loader
  std::string bumped = bytes;
  bumped[8] = 2;
  atomic_write_file(path, bumped);
  try {
    load_classifier(path);
    FAIL() << "expected version rejection";
  } catch (const std::runtime_error& e) {
    EXPECT_NE(std::string(e.what()).find("version"), std::string::npos);
  }
  std::filesystem::remove(path);
}

TEST(Dataset, SyntheticIsDeterministicAndBalanced) {
  Dataset a = make_synthetic(10, 20, 64), b = make_synthetic(10, 20, 64);
  ASSERT_EQ(a.images.size(), 200u);
  for (size_t i = 0; i < a.images.size(); ++i) ASSERT_EQ(max_abs_diff(a.images[i], b.images[i]), 0.0);
  std::vector<int> hist(10, 0);
  for (int l : a.labels) hist[static_cast<size_t>(l)]++;
  for (int h : hist) EXPECT_EQ(h, 20);
}

TEST(Dataset, SplitsAreDisjoint) {
  Dataset ds = make_synthetic(10, 30, 3);
  split_dataset(ds, 15, 10, 5, 10);
  std::vector<int> all;
  all.insert(all.end(), ds.train_idx.begin(), ds.train_idx.end());
  all.insert(all.end(), ds.eval_idx.begin(), ds.eval_idx.end());
  all.insert(all.end(), ds.mix_idx.begin(), ds.mix_idx.end());
  std::sort(all.begin(), all.end());
  EXPECT_EQ(std::adjacent_find(all.begin(), all.end()), all.end());
}
