#include <gtest/gtest.h>

#include <filesystem>

#include "aitl/catalog.hpp"
#include "aitl/config.hpp"
#include "aitl/pipeline.hpp"
#include "aitl/png.hpp"

using namespace aitl;
namespace fs = std::filesystem;

namespace {

fs::path temp_dir(const std::string& name) {
  fs::path p = fs::temp_directory_path() / name;
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

ExperimentConfig mini_config(const std::string& out_dir, uint64_t seed) {
  ExperimentConfig cfg;
  cfg.seed = seed;
  cfg.seed_set = true;
  cfg.per_class = 30;
  cfg.train_per_class = 16;
  cfg.eval_per_class = 8;
  cfg.mix_per_class = 6;
  cfg.zoo_epochs = 3;
  cfg.aitl_images = 24;
  cfg.combos_per_image = 2;
  cfg.aitl_epochs = 2;
  cfg.aitl_batch = 16;
  cfg.eval_images = 10;
  cfg.iters = 4;
  cfg.copies = 2;
  cfg.attacks = {"mifgsm", "random", "aitl"};
  cfg.out_dir = out_dir;
  cfg.workers = 2;
  return cfg;
}

}  // namespace

TEST(Png, EncodeDecodeRoundTripWithinQuantization) {
  RngStream rng(1);
  Tensor img = synthetic_image(3, 32, rng);
  std::string bytes = png::encode(img);
  Tensor back = png::decode(bytes);
  ASSERT_EQ(back.shape, img.shape);
  EXPECT_LE(max_abs_diff(img, back), 0.5 / 255.0 + 1e-6);
}

TEST(Png, RejectsGarbage) {
  EXPECT_THROW(png::decode("not a png at all"), std::runtime_error);
  RngStream rng(2);
  Tensor img = synthetic_image(1, 16, rng);
  std::string bytes = png::encode(img);
  bytes.resize(bytes.size() / 2);
  EXPECT_THROW(png::decode(bytes), std::runtime_error);
}

TEST(Config, FlatFileParsingAndOverrides) {
  auto kv = parse_flat_config("# comment\nattack.eps = 8\n  attack.iters =  5 \n\nprofile=desk\n");
  EXPECT_EQ(kv.at("attack.eps"), "8");
  EXPECT_EQ(kv.at("attack.iters"), "5");
  ExperimentConfig cfg;
  apply_kv(cfg, kv);
  EXPECT_FLOAT_EQ(cfg.eps_255, 8.0f);
  EXPECT_EQ(cfg.iters, 5);
  EXPECT_EQ(cfg.profile, "desk");
  EXPECT_THROW(parse_flat_config("this line has no equals"), ConfigError);
}

TEST(Config, ValidationCatchesBadInput) {
  ExperimentConfig cfg;
  EXPECT_THROW(validate_config(cfg, true), ConfigError);  // missing seed
  cfg.seed_set = true;
  validate_config(cfg, true);
  cfg.profile = "paper-300";
  EXPECT_THROW(validate_config(cfg, true), ConfigError);
  cfg.profile = "desk";
  cfg.attacks = {"warp-speed"};
  EXPECT_THROW(validate_config(cfg, true), ConfigError);
  cfg.attacks = {"mifgsm"};
  cfg.train_per_class = 1000;
  EXPECT_THROW(validate_config(cfg, true), ConfigError);
}

TEST(Config, JsonRoundTripPreservesEverything) {
  ExperimentConfig cfg = mini_config("x", 5);
  cfg.attacks = {"mifgsm", "aitl"};
  cfg.sweep_eps_255 = {2, 8};
  nlohmann::json j = config_to_json(cfg);
  ExperimentConfig back = config_from_json(j);
  EXPECT_EQ(config_to_json(back), j);
}

TEST(Catalog, TwentyKindsWithStableIds) {
  nlohmann::json cat = transform_catalog_json();
  ASSERT_EQ(cat.at("kinds").size(), 20u);
  int in_subset = 0;
  for (int i = 0; i < 20; ++i) {
    const auto& k = cat.at("kinds").at(i);
    EXPECT_EQ(k.at("id").get<int>(), i);
    EXPECT_EQ(k.at("name").get<std::string>(), kind_name(kind_from_id(i)));
    in_subset += k.at("in_random_subset").get<bool>() ? 1 : 0;
  }
  EXPECT_EQ(in_subset, 12);
  EXPECT_EQ(cat.at("profiles").at("desk").at("image_size").get<int>(), 32);
  EXPECT_EQ(cat.at("profiles").at("paper-299").at("cutout").get<int>(), 60);
}

TEST(Catalog, ShippedFileMatchesGenerated) {
  std::string shipped = "data/transform_catalog.json";
  if (!file_exists(shipped)) shipped = "../data/transform_catalog.json";
  if (!file_exists(shipped)) shipped = "../../data/transform_catalog.json";
  ASSERT_TRUE(file_exists(shipped)) << "shipped catalog not found relative to test cwd";
  EXPECT_EQ(nlohmann::json::parse(read_file(shipped)), transform_catalog_json());
}

TEST(Dataset, IngestsClassFoldersOfPngs) {
  fs::path root = temp_dir("aitl_ds_png");
  Dataset ref = make_synthetic(3, 4, 9);
  for (size_t i = 0; i < ref.images.size(); ++i) {
    fs::path cls = root / ("class_" + std::to_string(ref.labels[i]));
    fs::create_directories(cls);
    png::write_file(ref.images[i], (cls / ("img_" + std::to_string(i) + ".png")).string());
  }
  PipelineState st;
  st.cfg = mini_config((temp_dir("aitl_ds_out")).string(), 1);
  st.cfg.dataset_source = root.string();
  st.cfg.classes = 3;
  st.cfg.per_class = 4;
  st.cfg.train_per_class = 2;
  st.cfg.eval_per_class = 1;
  st.cfg.mix_per_class = 1;
  stage_dataset(st);
  EXPECT_EQ(st.ds.images.size(), 12u);
  EXPECT_EQ(st.cfg.classes, 3);
  // same directory twice -> identical ordering
  PipelineState st2;
  st2.cfg = st.cfg;
  stage_dataset(st2);
  for (size_t i = 0; i < st.ds.images.size(); ++i) {
    ASSERT_EQ(st.ds.labels[i], st2.ds.labels[i]);
    ASSERT_EQ(max_abs_diff(st.ds.images[i], st2.ds.images[i]), 0.0);
  }
  fs::remove_all(root);
}

TEST(Dataset, NonImageFileIsAnExplicitError) {
  fs::path root = temp_dir("aitl_ds_bad");
  Dataset ref = make_synthetic(2, 3, 9);
  for (size_t i = 0; i < ref.images.size(); ++i) {
    fs::path cls = root / ("class_" + std::to_string(ref.labels[i]));
    fs::create_directories(cls);
    png::write_file(ref.images[i], (cls / ("img_" + std::to_string(i) + ".png")).string());
  }
  atomic_write_file((root / "class_0" / "notes.txt").string(), "not an image");
  PipelineState st;
  st.cfg = mini_config((temp_dir("aitl_ds_bad_out")).string(), 1);
  st.cfg.dataset_source = root.string();
  st.cfg.train_per_class = 1;
  st.cfg.eval_per_class = 1;
  st.cfg.mix_per_class = 1;
  try {
    stage_dataset(st);
    FAIL() << "expected ingestion error";
  } catch (const StageError& e) {
    EXPECT_NE(std::string(e.what()).find("notes.txt"), std::string::npos);
  }
  fs::remove_all(root);
}

TEST(Dataset, EmptyClassIsAnExplicitError) {
  fs::path root = temp_dir("aitl_ds_empty");
  fs::create_directories(root / "class_0");
  fs::create_directories(root / "class_1");
  RngStream rng(3);
  png::write_file(synthetic_image(0, 32, rng), (root / "class_0" / "a.png").string());
  PipelineState st;
  st.cfg = mini_config((temp_dir("aitl_ds_empty_out")).string(), 1);
  st.cfg.dataset_source = root.string();
  EXPECT_THROW(stage_dataset(st), StageError);
  fs::remove_all(root);
}

TEST(Report, CsvRenderingIsStable) {
  CsvTable t;
  t.header = {"a", "b"};
  t.rows.push_back({"x", CsvTable::cell(0.125)});
  EXPECT_EQ(t.render(), "a,b\nx,0.125000\n");
}

TEST(Pipeline, MiniRunProducesBundleAndIsByteDeterministic) {
  std::string dir1 = temp_dir("aitl_pipe_run1").string();
  std::string dir2 = temp_dir("aitl_pipe_run2").string();
  ExperimentConfig c1 = mini_config(dir1, 33);
  ExperimentConfig c2 = mini_config(dir2, 33);
  run_pipeline(c1);
  run_pipeline(c2);

  for (const char* rel : {"/results/asr.csv", "/results/frequency.csv", "/tuples.csv"}) {
    ASSERT_TRUE(file_exists(dir1 + rel)) << rel;
    EXPECT_EQ(read_file(dir1 + rel), read_file(dir2 + rel)) << rel;
  }
  ASSERT_TRUE(file_exists(dir1 + "/manifest.json"));
  nlohmann::json manifest = nlohmann::json::parse(read_file(dir1 + "/manifest.json"));
  EXPECT_EQ(manifest.at("status").get<std::string>(), "complete");

  // rerun against the cache must not change the outputs
  std::string before = read_file(dir1 + "/results/asr.csv");
  run_pipeline(c1);
  EXPECT_EQ(read_file(dir1 + "/results/asr.csv"), before);

  // the manifest alone suffices to reproduce the run
  ExperimentConfig from_manifest = load_config_file(dir1 + "/manifest.json");
  std::string dir3 = temp_dir("aitl_pipe_run3").string();
  from_manifest.out_dir = dir3;
  run_pipeline(from_manifest);
  EXPECT_EQ(read_file(dir3 + "/results/asr.csv"), before);

  // frequency bookkeeping: total slots = images * N * M
  nlohmann::json meta = nlohmann::json::parse(read_file(dir1 + "/results/asr_meta.json"));
  long total = 0;
  {
    std::istringstream in(read_file(dir1 + "/results/frequency.csv"));
    std::string line;
    std::getline(in, line);
    while (std::getline(in, line)) {
      if (line.empty()) continue;
      total += std::stol(line.substr(line.rfind(',') + 1));
    }
  }
  EXPECT_EQ(total, 10L * c1.copies * c1.combo_len);

  fs::remove_all(dir1);
  fs::remove_all(dir2);
  fs::remove_all(dir3);
}

TEST(Pipeline, ConfigLockRefusesDriftedReuse) {
  std::string dir = temp_dir("aitl_pipe_lock").string();
  ExperimentConfig cfg = mini_config(dir, 7);
  PipelineState st;
  prepare(st, cfg);
  ExperimentConfig drifted = cfg;
  drifted.eps_255 = 8.0f;
  PipelineState st2;
  EXPECT_THROW(prepare(st2, drifted), ConfigError);
  fs::remove_all(dir);
}

TEST(Pipeline, UntrainedAitlAttackIsAStageFailure) {
  std::string dir = temp_dir("aitl_pipe_noaitl").string();
  ExperimentConfig cfg = mini_config(dir, 8);
  cfg.attacks = {"aitl"};
  PipelineState st;
  prepare(st, cfg);
  stage_zoo(st);
  select_attack_images(st, st.cfg.eval_images);
  EXPECT_THROW(run_attack(st, "aitl", st.cfg.attack_config()), StageError);
  fs::remove_all(dir);
}
