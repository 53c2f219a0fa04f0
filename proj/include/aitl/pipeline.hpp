#pragma once

#include <algorithm>
#include <filesystem>
#include <map>
#include <memory>
#include <set>
#include <string>
#include <thread>
#include <vector>

#include "aitl/attack.hpp"
#include "aitl/catalog.hpp"
#include "aitl/checkpoint.hpp"
#include "aitl/config.hpp"
#include "aitl/dataset.hpp"
#include "aitl/learner.hpp"
#include "aitl/model.hpp"
#include "aitl/png.hpp"
#include "aitl/report.hpp"

namespace aitl {

struct StageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

constexpr const char* kToolVersion = "aitl-lab 0.1.0";

// ---------------------------------------------------------------------------
// Pipeline state and artifact paths
// ---------------------------------------------------------------------------

struct PipelineState {
  ExperimentConfig cfg;
  Dataset ds;
  std::vector<Classifier> models;  // roster order
  std::vector<Tensor> pool;
  AITLParams aitl;
  bool aitl_ready = false;

  // attack image set (indices into ds, correctly classified by the source)
  std::vector<int> attack_idx;
  std::vector<Tensor> attack_images;
  std::vector<int> attack_labels;

  const Classifier& source() const { return models[0]; }
  std::vector<const Classifier*> targets() const {
    std::vector<const Classifier*> out;
    auto roster = cfg.roster();
    for (size_t i = 0; i < roster.size(); ++i)
      if (roster[i].role == "target") out.push_back(&models[i]);
    return out;
  }
  std::vector<const Classifier*> eval_models() const {
    std::vector<const Classifier*> out;
    auto roster = cfg.roster();
    for (size_t i = 0; i < roster.size(); ++i)
      if (roster[i].role == "eval") out.push_back(&models[i]);
    return out;
  }
  const Classifier* adv_target() const {
    auto roster = cfg.roster();
    for (size_t i = 0; i < roster.size(); ++i)
      if (roster[i].role == "target" && roster[i].adv_eps > 0.0f) return &models[i];
    return nullptr;
  }
  std::vector<const Classifier*> ensemble_sources() const {
    // white-box ensemble analog: the source plus the first three targets
    std::vector<const Classifier*> out = {&models[0]};
    auto t = targets();
    for (size_t i = 0; i < t.size() && out.size() < 4; ++i)
      if (t[i]->spec.init_seed != 0) out.push_back(t[i]);
    return out;
  }
  ScaleProfile profile() const {
    ScaleProfile p = cfg.profile == "desk" ? ScaleProfile::desk(static_cast<int>(pool.size()))
                                           : ScaleProfile::paper299(static_cast<int>(pool.size()));
    return p;
  }
  MixPool mixpool() const { return MixPool{&pool}; }

  std::string dir(const std::string& sub = "") const {
    return sub.empty() ? cfg.out_dir : cfg.out_dir + "/" + sub;
  }
  std::string model_path(const ZooEntry& e) const {
    return dir("models") + "/" + e.role + "_" + e.arch + "_" + std::to_string(cfg.model_seed(e.seed_base)) + ".ckpt";
  }
};

namespace detail {

inline uint64_t fnv1a(const std::string& s) {
  uint64_t h = 1469598103934665603ULL;
  for (char c : s) {
    h ^= static_cast<unsigned char>(c);
    h *= 1099511628211ULL;
  }
  return h;
}

inline std::string model_label(const Classifier& c) {
  return c.spec.arch + "/" + std::to_string(c.spec.init_seed);
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Stages
// ---------------------------------------------------------------------------

/// Loads PNG class folders or synthesizes the reference dataset, then splits.
inline void stage_dataset(PipelineState& st) {
  const ExperimentConfig& cfg = st.cfg;
  if (cfg.dataset_source == "synthetic") {
    st.ds = make_synthetic(cfg.classes, cfg.per_class, cfg.seed * 31 + 7);
  } else {
    namespace fs = std::filesystem;
    if (!fs::is_directory(cfg.dataset_source)) throw StageError("dataset directory not found: " + cfg.dataset_source);
    std::vector<std::string> class_dirs;
    for (const auto& e : fs::directory_iterator(cfg.dataset_source))
      if (e.is_directory()) class_dirs.push_back(e.path().string());
    std::sort(class_dirs.begin(), class_dirs.end());
    if (class_dirs.empty()) throw StageError("dataset directory has no class subfolders");
    std::vector<std::string> offenders;
    int label = 0;
    const int hw = st.profile().image_size;
    for (const auto& cdir : class_dirs) {
      std::vector<std::string> files;
      for (const auto& e : fs::directory_iterator(cdir))
        if (e.is_regular_file()) files.push_back(e.path().string());
      std::sort(files.begin(), files.end());
      if (files.empty()) offenders.push_back(cdir + " (empty class)");
      for (const auto& f : files) {
        try {
          Tensor img = png::read_file(f);
          if (img.shape[0] != hw || img.shape[1] != hw) {
            aitl::detail::ScaledCoord sc{static_cast<double>(img.shape[0]) / hw,
                                         static_cast<double>(img.shape[1]) / hw, 0.0, 0.0};
            img = aitl::detail::resample_gather(img, hw, hw, sc);
          }
          st.ds.images.push_back(std::move(img));
          st.ds.labels.push_back(label);
        } catch (const std::exception& e) {
          offenders.push_back(std::string(e.what()));
        }
      }
      ++label;
    }
    if (!offenders.empty()) {
      std::string msg = "dataset ingestion failed:";
      for (const auto& o : offenders) msg += "\n  " + o;
      throw StageError(msg);
    }
    st.cfg.classes = label;
    int min_count = 1 << 30;
    std::vector<int> counts(static_cast<size_t>(label), 0);
    for (int l : st.ds.labels) counts[static_cast<size_t>(l)]++;
    for (int c : counts) min_count = std::min(min_count, c);
    st.cfg.per_class = min_count;
  }
  split_dataset(st.ds, cfg.train_per_class, cfg.eval_per_class, cfg.mix_per_class, st.cfg.classes);
  st.pool = st.ds.subset_images(st.ds.mix_idx);

  // train/eval disjointness is structural; keep the guard loud anyway
  std::set<int> train_set(st.ds.train_idx.begin(), st.ds.train_idx.end());
  for (int i : st.ds.eval_idx)
    if (train_set.count(i)) throw StageError("dataset invariant violated: eval image in train split");
}

/// Trains or loads the full roster. Models are independent, so they train
/// on the worker pool; each model's own training stays single threaded.
inline void stage_zoo(PipelineState& st) {
  auto roster = st.cfg.roster();
  std::set<std::pair<std::string, uint64_t>> seen;
  for (const auto& e : roster) {
    auto key = std::make_pair(e.arch, st.cfg.model_seed(e.seed_base));
    if (!seen.insert(key).second)
      throw StageError("zoo roster leaks a model across roles: " + e.arch + "/" + std::to_string(key.second));
  }
  st.models.assign(roster.size(), Classifier{});
  make_dirs(st.dir("models"));

  auto tri = st.ds.subset_images(st.ds.train_idx);
  auto trl = st.ds.subset_labels(st.ds.train_idx);
  auto tei = st.ds.subset_images(st.ds.eval_idx);
  auto tel = st.ds.subset_labels(st.ds.eval_idx);

  std::vector<std::string> failures(roster.size());
  auto work = [&](size_t begin, size_t end) {
    for (size_t i = begin; i < end; ++i) {
      const ZooEntry& e = roster[i];
      std::string path = st.model_path(e);
      try {
        if (file_exists(path)) {
          st.models[i] = load_classifier(path);
          continue;
        }
        ModelSpec spec{e.arch, st.profile().image_size, 3, st.cfg.classes, st.cfg.model_seed(e.seed_base)};
        Classifier c = build(spec);
        RngStream rng(st.cfg.model_seed(e.seed_base), 17);
        TrainMetrics m = train(c, tri, trl, tei, tel, st.cfg.zoo_epochs, st.cfg.zoo_lr, rng, e.adv_eps,
                               st.cfg.zoo_batch, true);
        save_classifier(c, path, {{"role", e.role}, {"final_test_acc", m.final_test_acc}});
        st.models[i] = load_classifier(path);  // round-trip so cached and fresh runs agree bit-for-bit
      } catch (const std::exception& ex) {
        failures[i] = ex.what();
      }
    }
  };
  int workers = std::max(1, st.cfg.workers);
  if (workers == 1) {
    work(0, roster.size());
  } else {
    std::vector<std::thread> ts;
    size_t chunk = (roster.size() + workers - 1) / static_cast<size_t>(workers);
    for (int w = 0; w < workers; ++w) {
      size_t b = static_cast<size_t>(w) * chunk, e = std::min(roster.size(), b + chunk);
      if (b < e) ts.emplace_back(work, b, e);
    }
    for (auto& t : ts) t.join();
  }
  for (size_t i = 0; i < failures.size(); ++i)
    if (!failures[i].empty()) throw StageError("zoo training failed for " + roster[i].arch + ": " + failures[i]);
}

inline std::string tuples_path(const PipelineState& st) { return st.dir("tuples.csv"); }

inline std::vector<TrainingTuple> stage_tuples(PipelineState& st) {
  const ExperimentConfig& cfg = st.cfg;
  int n = std::min<int>(cfg.aitl_images, static_cast<int>(st.ds.train_idx.size()));
  std::vector<Tensor> imgs;
  std::vector<int> labels;
  for (int i = 0; i < n; ++i) {
    imgs.push_back(st.ds.images[static_cast<size_t>(st.ds.train_idx[i])]);
    labels.push_back(st.ds.labels[static_cast<size_t>(st.ds.train_idx[i])]);
  }
  EnsembleTarget src({&st.source()});
  int skipped = 0;
  auto tuples = generate_training_tuples(imgs, labels, src, st.targets(), cfg.attack_config(), cfg.combos_per_image,
                                         cfg.seed * 77 + 3, st.profile(), st.mixpool(), tuples_path(st), cfg.workers,
                                         &skipped);
  if (tuples.empty()) throw StageError("tuple generation produced no tuples");
  return tuples;
}

inline std::string aitl_path(const PipelineState& st) { return st.dir("aitl.ckpt"); }

inline void stage_aitl(PipelineState& st, const std::vector<TrainingTuple>& tuples) {
  if (file_exists(aitl_path(st))) {
    st.aitl = load_aitl(aitl_path(st));
    st.aitl_ready = true;
    return;
  }
  AitlConfig acfg;
  acfg.combo_len = st.cfg.combo_len;
  st.aitl = build_aitl(acfg, st.source(), st.cfg.seed * 13 + 1);
  int n = std::min<int>(st.cfg.aitl_images, static_cast<int>(st.ds.train_idx.size()));
  std::vector<Tensor> imgs;
  for (int i = 0; i < n; ++i) imgs.push_back(st.ds.images[static_cast<size_t>(st.ds.train_idx[i])]);
  AitlTrainCurves curves =
      train_aitl(tuples, imgs, st.aitl, st.cfg.aitl_epochs, st.cfg.aitl_batch, st.cfg.aitl_lr, st.cfg.seed * 5 + 9);
  CsvTable curve_csv;
  curve_csv.header = {"epoch", "total", "rec", "asr"};
  for (size_t e = 0; e < curves.total.size(); ++e)
    curve_csv.rows.push_back({std::to_string(e + 1), CsvTable::cell(curves.total[e]), CsvTable::cell(curves.rec[e]),
                              CsvTable::cell(curves.asr[e])});
  make_dirs(st.dir("results"));
  curve_csv.write(st.dir("results") + "/aitl_curves.csv");
  save_aitl(st.aitl, aitl_path(st), {{"epochs", st.cfg.aitl_epochs}});
  st.aitl = load_aitl(aitl_path(st));
  st.aitl_ready = true;
}

// ---------------------------------------------------------------------------
// Attacks
// ---------------------------------------------------------------------------

/// Picks the first eval-split images that the source classifies correctly.
inline void select_attack_images(PipelineState& st, int count) {
  st.attack_idx.clear();
  st.attack_images.clear();
  st.attack_labels.clear();
  const Classifier& src = st.source();
  for (int idx : st.ds.eval_idx) {
    if (static_cast<int>(st.attack_idx.size()) >= count) break;
    const Tensor& img = st.ds.images[static_cast<size_t>(idx)];
    int label = st.ds.labels[static_cast<size_t>(idx)];
    if (predict(src, img) == label) {
      st.attack_idx.push_back(idx);
      st.attack_images.push_back(img);
      st.attack_labels.push_back(label);
    }
  }
  if (static_cast<int>(st.attack_idx.size()) < count)
    throw StageError("not enough correctly-classified eval images: have " + std::to_string(st.attack_idx.size()) +
                     ", need " + std::to_string(count));
}

struct AttackRun {
  std::string id;
  std::vector<Tensor> adv;
  std::vector<std::vector<TransformCombo>> combos;  // aitl/random selection logs
};

/// One attack over the selected image set; image-level parallelism with a
/// per-image forked stream keeps results independent of the worker count.
inline AttackRun run_attack(PipelineState& st, const std::string& id, const AttackConfig& acfg_in) {
  AttackRun run;
  run.id = id;
  const size_t n = st.attack_images.size();
  run.adv.assign(n, Tensor());
  run.combos.assign(n, {});

  std::string base = id;
  bool ensemble = false;
  if (base.rfind("ens-", 0) == 0) {
    ensemble = true;
    base = base.substr(4);
  }
  std::vector<const Classifier*> sources =
      ensemble ? st.ensemble_sources() : std::vector<const Classifier*>{&st.source()};
  if (base == "aitl" && !st.aitl_ready) throw StageError("attack " + id + " requires a trained AITL checkpoint");

  ScaleProfile prof = st.profile();
  MixPool pool = st.mixpool();
  AttackConfig acfg = acfg_in;
  RngStream attack_root(st.cfg.seed, detail::fnv1a("attack:" + id));

  auto work = [&](size_t begin, size_t end) {
    EnsembleTarget target(sources);
    for (size_t k = begin; k < end; ++k) {
      RngStream rng = attack_root.fork(k);
      const Tensor& x = st.attack_images[k];
      int y = st.attack_labels[k];
      if (base == "mifgsm") {
        PlainProvider gp;
        run.adv[k] = mifgsm(x, y, target, acfg, gp, rng);
      } else if (base == "nim") {
        AttackConfig c = acfg;
        c.nesterov = true;
        PlainProvider gp;
        run.adv[k] = mifgsm(x, y, target, c, gp, rng);
      } else if (base == "dim") {
        DimProvider gp(0.7f, prof);
        run.adv[k] = mifgsm(x, y, target, acfg, gp, rng);
      } else if (base == "tim") {
        TimProvider gp(7);
        run.adv[k] = mifgsm(x, y, target, acfg, gp, rng);
      } else if (base == "sim") {
        SimProvider gp(acfg.copies);
        run.adv[k] = mifgsm(x, y, target, acfg, gp, rng);
      } else if (base == "cim") {
        CimProvider gp(acfg.copies, prof);
        run.adv[k] = mifgsm(x, y, target, acfg, gp, rng);
      } else if (base == "admix") {
        AdmixProvider gp(1, acfg.copies, kAdmixEta, pool);
        run.adv[k] = mifgsm(x, y, target, acfg, gp, rng);
      } else if (base == "adscm") {
        auto gp = adscm_provider(acfg.copies, prof, pool);
        run.adv[k] = mifgsm(x, y, target, acfg, *gp, rng);
        run.combos[k] = gp->combos();
      } else if (base == "random") {
        RngStream crng = rng.fork(7);
        auto gp = random_combo_provider(acfg, crng, prof, pool);
        run.adv[k] = mifgsm(x, y, target, acfg, *gp, rng);
        run.combos[k] = gp->combos();
      } else if (base == "aitl") {
        AitlAttackResult res = aitl_attack(x, y, target, st.aitl, acfg, st.cfg.schedule(), rng, prof, pool);
        run.adv[k] = std::move(res.adv);
        run.combos[k] = std::move(res.combos);
      } else {
        throw StageError("unknown attack id: " + id);
      }
    }
  };
  int workers = std::max(1, st.cfg.workers);
  if (workers == 1 || n < 2) {
    work(0, n);
  } else {
    std::vector<std::thread> ts;
    size_t chunk = (n + static_cast<size_t>(workers) - 1) / static_cast<size_t>(workers);
    for (int w = 0; w < workers; ++w) {
      size_t b = static_cast<size_t>(w) * chunk, e = std::min(n, b + chunk);
      if (b < e) ts.emplace_back(work, b, e);
    }
    for (auto& t : ts) t.join();
  }
  return run;
}

inline std::string adv_path(const PipelineState& st, const std::string& id) {
  return st.dir("adv") + "/" + id + ".ckpt";
}

inline void save_attack_run(const PipelineState& st, const AttackRun& run) {
  make_dirs(st.dir("adv"));
  std::vector<std::string> names;
  std::vector<Tensor> tensors;
  for (size_t i = 0; i < run.adv.size(); ++i) {
    char buf[16];
    std::snprintf(buf, sizeof(buf), "adv%05zu", i);
    names.push_back(buf);
    tensors.push_back(run.adv[i]);
  }
  save_checkpoint(adv_path(st, run.id), {{"kind", "adv_batch"}, {"attack", run.id}}, names, tensors);

  bool has_combos = false;
  for (const auto& c : run.combos) has_combos |= !c.empty();
  if (has_combos) {
    std::string csv = "image_index,copy";
    for (int s = 0; s < st.cfg.combo_len; ++s) csv += ",kind_" + std::to_string(s + 1);
    csv += "\n";
    for (size_t i = 0; i < run.combos.size(); ++i)
      for (size_t c = 0; c < run.combos[i].size(); ++c) {
        csv += std::to_string(st.attack_idx[i]) + "," + std::to_string(c);
        for (TransformKind k : run.combos[i][c]) csv += "," + std::to_string(static_cast<int>(k));
        csv += "\n";
      }
    atomic_write_file(st.dir("adv") + "/" + run.id + "_combos.csv", csv);
  }
  if (st.cfg.save_images) {
    std::string img_dir = st.dir("adv") + "/" + run.id + "_png";
    make_dirs(img_dir);
    for (size_t i = 0; i < run.adv.size(); ++i) {
      char buf[32];
      std::snprintf(buf, sizeof(buf), "/adv%05zu.png", i);
      png::write_file(run.adv[i], img_dir + buf);
    }
  }
}

inline AttackRun load_attack_run(const PipelineState& st, const std::string& id) {
  Checkpoint ck = load_checkpoint(adv_path(st, id));
  AttackRun run;
  run.id = id;
  run.adv = std::move(ck.tensors);
  return run;
}

inline void stage_attacks(PipelineState& st) {
  select_attack_images(st, st.cfg.eval_images);
  // persist the chosen image set next to the adversarial batches
  make_dirs(st.dir("adv"));
  std::string imgs_csv = "dataset_index,label\n";
  for (size_t i = 0; i < st.attack_idx.size(); ++i)
    imgs_csv += std::to_string(st.attack_idx[i]) + "," + std::to_string(st.attack_labels[i]) + "\n";
  atomic_write_file(st.dir("adv") + "/images.csv", imgs_csv);

  for (const auto& id : st.cfg.attacks) {
    if (file_exists(adv_path(st, id))) continue;
    AttackRun run = run_attack(st, id, st.cfg.attack_config());
    save_attack_run(st, run);
  }
}

// ---------------------------------------------------------------------------
// Evaluation and reports
// ---------------------------------------------------------------------------

inline void stage_evaluate(PipelineState& st) {
  if (st.attack_images.empty()) select_attack_images(st, st.cfg.eval_images);
  auto evals = st.eval_models();
  std::vector<std::string> eval_ids;
  for (const Classifier* m : evals) eval_ids.push_back("eval:" + detail::model_label(*m));

  CsvTable table;
  table.header = {"model"};
  for (const auto& id : st.cfg.attacks) table.header.push_back(id);

  std::vector<std::vector<double>> columns;  // [attack][row]
  for (const auto& id : st.cfg.attacks) {
    AttackRun run = load_attack_run(st, id);
    if (run.adv.size() != st.attack_images.size())
      throw StageError("cached adversarial batch for " + id + " does not match the image set");
    std::vector<const Classifier*> wb = {&st.source()};
    EvalResult rw = evaluate_asr(run.adv, st.attack_labels, wb);
    EvalResult rt = evaluate_asr(run.adv, st.attack_labels, evals, eval_ids);
    std::vector<double> col;
    col.push_back(rw.rates[0]);
    double mean = 0.0;
    for (double r : rt.rates) {
      col.push_back(r);
      mean += r;
    }
    col.push_back(mean / static_cast<double>(rt.rates.size()));
    columns.push_back(std::move(col));
  }

  std::vector<std::string> row_names = {"source:" + detail::model_label(st.source()) + " (white-box)"};
  for (const auto& id : eval_ids) row_names.push_back(id);
  row_names.push_back("eval_mean");
  for (size_t r = 0; r < row_names.size(); ++r) {
    std::vector<std::string> row = {row_names[r]};
    for (size_t a = 0; a < columns.size(); ++a) row.push_back(CsvTable::cell(columns[a][r]));
    table.rows.push_back(std::move(row));
  }
  make_dirs(st.dir("results"));
  table.write(st.dir("results") + "/asr.csv");

  nlohmann::json meta = {{"tool", kToolVersion},
                         {"config", config_to_json(st.cfg)},
                         {"images", st.attack_images.size()},
                         {"attacks", st.cfg.attacks},
                         {"rows", row_names}};
  atomic_write_file(st.dir("results") + "/asr_meta.json", meta.dump(2) + "\n");
}

/// Per-kind counts over every selected combo slot (Fig. 4 analog).
inline std::vector<long> frequency_counts(const PipelineState& st, const std::string& attack_id = "aitl") {
  std::vector<long> counts(kNumTransformKinds, 0);
  std::string path = st.dir("adv") + "/" + attack_id + "_combos.csv";
  if (!file_exists(path)) throw StageError("no combo log for attack " + attack_id + " (run the attack stage first)");
  std::istringstream in(read_file(path));
  std::string line;
  std::getline(in, line);  // header
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::istringstream ls(line);
    std::string cell;
    std::getline(ls, cell, ',');
    std::getline(ls, cell, ',');
    while (std::getline(ls, cell, ',')) counts[static_cast<size_t>(std::stoi(cell))]++;
  }
  return counts;
}

inline void stage_report(PipelineState& st) {
  make_dirs(st.dir("results"));
  make_dirs(st.dir("results/charts"));

  bool have_freq = file_exists(st.dir("adv") + "/aitl_combos.csv");
  if (have_freq) {
    auto counts = frequency_counts(st);
    CsvTable freq;
    freq.header = {"kind_id", "name", "count"};
    std::vector<std::string> labels;
    std::vector<double> values;
    for (int k = 0; k < kNumTransformKinds; ++k) {
      freq.rows.push_back({std::to_string(k), kind_name(kind_from_id(k)), std::to_string(counts[static_cast<size_t>(k)])});
      labels.push_back(kind_name(kind_from_id(k)));
      values.push_back(static_cast<double>(counts[static_cast<size_t>(k)]));
    }
    freq.write(st.dir("results") + "/frequency.csv");
    atomic_write_file(st.dir("results/charts") + "/frequency.svg",
                      svg::bar_chart("Transformations selected by the combo learner", labels, values));
  }

  // manifest last: it lists every artifact the run produced
  nlohmann::json manifest;
  manifest["tool"] = kToolVersion;
  manifest["config"] = config_to_json(st.cfg);
  nlohmann::json roster = nlohmann::json::array();
  for (const auto& e : st.cfg.roster())
    roster.push_back({{"role", e.role},
                      {"arch", e.arch},
                      {"init_seed", st.cfg.model_seed(e.seed_base)},
                      {"adv_eps", e.adv_eps}});
  manifest["roster"] = roster;
  nlohmann::json artifacts = nlohmann::json::array();
  namespace fs = std::filesystem;
  std::vector<std::string> files;
  for (const auto& e : fs::recursive_directory_iterator(st.dir()))
    if (e.is_regular_file() && e.path().filename() != "manifest.json") files.push_back(fs::relative(e.path(), st.dir()).string());
  std::sort(files.begin(), files.end());
  for (const auto& f : files) artifacts.push_back(f);
  manifest["artifacts"] = artifacts;
  manifest["status"] = "complete";
  atomic_write_file(st.dir("manifest.json"), manifest.dump(2) + "\n");
}

inline void stage_sweep(PipelineState& st) {
  select_attack_images(st, st.cfg.sweep_images);
  auto evals = st.eval_models();
  const Classifier* adv_model = st.adv_target();

  CsvTable table;
  table.header = {"eps_255"};
  for (const auto& id : st.cfg.sweep_attacks) {
    table.header.push_back(id + ":eval_mean");
    table.header.push_back(id + ":adv_target");
  }
  std::vector<double> xs;
  std::vector<std::vector<double>> series(st.cfg.sweep_attacks.size() * 2);
  for (float eps255 : st.cfg.sweep_eps_255) {
    std::vector<std::string> row = {CsvTable::cell(eps255)};
    xs.push_back(eps255);
    for (size_t a = 0; a < st.cfg.sweep_attacks.size(); ++a) {
      AttackConfig acfg = st.cfg.attack_config();
      acfg.eps = eps255 / 255.0f;
      acfg.alpha = acfg.eps / 10.0f;  // keep T * alpha = eps across the sweep
      AttackRun run = eps255 == 0.0f ? AttackRun{} : run_attack(st, st.cfg.sweep_attacks[a], acfg);
      if (eps255 == 0.0f) run.adv = st.attack_images;
      EvalResult rt = evaluate_asr(run.adv, st.attack_labels, evals);
      double mean = 0.0;
      for (double r : rt.rates) mean += r;
      mean /= static_cast<double>(rt.rates.size());
      double adv_rate = 0.0;
      if (adv_model) {
        std::vector<const Classifier*> am = {adv_model};
        adv_rate = evaluate_asr(run.adv, st.attack_labels, am).rates[0];
      }
      row.push_back(CsvTable::cell(mean));
      row.push_back(CsvTable::cell(adv_rate));
      series[2 * a].push_back(mean);
      series[2 * a + 1].push_back(adv_rate);
    }
    table.rows.push_back(std::move(row));
  }
  make_dirs(st.dir("results"));
  table.write(st.dir("results") + "/budget_sweep.csv");
  std::vector<std::string> names;
  for (const auto& id : st.cfg.sweep_attacks) {
    names.push_back(id + " (eval mean)");
    names.push_back(id + " (adv target)");
  }
  make_dirs(st.dir("results/charts"));
  atomic_write_file(st.dir("results/charts") + "/budget_sweep.svg",
                    svg::line_chart("Attack success rate vs perturbation budget", xs, names, series));
}

/// Reruns the AITL attack varying only one axis; asserts via manifest diff
/// that no other effective-config field moved.
inline void stage_ablate(PipelineState& st, const std::string& axis) {
  if (axis != "N" && axis != "M") throw ConfigError("ablate axis must be N or M");
  select_attack_images(st, st.cfg.ablate_images);
  auto evals = st.eval_models();

  nlohmann::json base = config_to_json(st.cfg);
  CsvTable table;
  table.header = {axis, "eval_mean"};
  for (const Classifier* m : evals) table.header.push_back("eval:" + detail::model_label(*m));

  const auto& values = axis == "N" ? st.cfg.ablate_n : st.cfg.ablate_m;
  for (int v : values) {
    ExperimentConfig sub = st.cfg;
    if (axis == "N")
      sub.copies = v;
    else
      sub.combo_len = v;
    nlohmann::json subj = config_to_json(sub);
    int moved = 0;
    for (auto it = base.begin(); it != base.end(); ++it)
      if (subj.at(it.key()) != it.value()) ++moved;
    if (moved > 1) throw StageError("ablation would vary more than one config field");

    std::vector<double> rates;
    if (axis == "N") {
      AttackConfig acfg = st.cfg.attack_config();
      acfg.copies = v;
      AttackRun run = run_attack(st, "aitl", acfg);
      EvalResult rt = evaluate_asr(run.adv, st.attack_labels, evals);
      rates = rt.rates;
    } else {
      // M changes the learner itself: train a dedicated AITL in a sub-run
      PipelineState sub_st;
      sub_st.cfg = sub;
      sub_st.cfg.out_dir = st.dir("ablate_M" + std::to_string(v));
      sub_st.cfg.eval_images = st.cfg.ablate_images;
      stage_dataset(sub_st);
      stage_zoo(sub_st);
      auto tuples = stage_tuples(sub_st);
      stage_aitl(sub_st, tuples);
      select_attack_images(sub_st, sub_st.cfg.ablate_images);
      AttackRun run = run_attack(sub_st, "aitl", sub_st.cfg.attack_config());
      EvalResult rt = evaluate_asr(run.adv, sub_st.attack_labels, evals);
      rates = rt.rates;
    }
    double mean = 0.0;
    for (double r : rates) mean += r;
    mean /= static_cast<double>(rates.size());
    std::vector<std::string> row = {std::to_string(v), CsvTable::cell(mean)};
    for (double r : rates) row.push_back(CsvTable::cell(r));
    table.rows.push_back(std::move(row));
  }
  make_dirs(st.dir("results"));
  table.write(st.dir("results") + "/ablation_" + axis + ".csv");
}

// ---------------------------------------------------------------------------
// Orchestration
// ---------------------------------------------------------------------------

/// Guards cached artifacts against config drift inside one output directory.
/// Only keys that shape cached artifacts participate; report-side knobs
/// (sweep.*, ablate.*, attack.list, workers, ...) may vary between verbs.
inline nlohmann::json cache_relevant_config(const ExperimentConfig& cfg) {
  nlohmann::json all = config_to_json(cfg);
  nlohmann::json out;
  static const char* keys[] = {"seed",          "profile",
                               "dataset.source", "dataset.classes",
                               "dataset.per_class", "dataset.train_per_class",
                               "dataset.eval_per_class", "dataset.mix_per_class",
                               "zoo.epochs",    "zoo.lr",
                               "zoo.batch",     "zoo.adv_eps",
                               "attack.eps",    "attack.alpha",
                               "attack.iters",  "attack.mu",
                               "attack.copies", "attack.combo_len",
                               "aitl.images",   "aitl.combos_per_image",
                               "aitl.epochs",   "aitl.batch",
                               "aitl.lr",       "aitl.gamma",
                               "aitl.r",        "eval.images"};
  for (const char* k : keys) out[k] = all.at(k);
  return out;
}

inline void check_config_lock(PipelineState& st) {
  std::string lock = st.dir("config.lock.json");
  nlohmann::json now = cache_relevant_config(st.cfg);
  if (file_exists(lock)) {
    nlohmann::json prev = nlohmann::json::parse(read_file(lock));
    if (prev != now)
      throw ConfigError("output directory " + st.dir() +
                        " was produced by a different config; use a fresh output.dir");
    return;
  }
  make_dirs(st.dir());
  atomic_write_file(lock, now.dump(2) + "\n");
}

inline void prepare(PipelineState& st, const ExperimentConfig& cfg) {
  st.cfg = cfg;
  validate_config(st.cfg, true);
  check_config_lock(st);
  stage_dataset(st);
}

/// Full run: zoo, tuples, AITL, attacks, evaluation, reports. Stages reuse
/// cached artifacts; a failure marks the bundle partial and rethrows.
inline void run_pipeline(const ExperimentConfig& cfg) {
  PipelineState st;
  prepare(st, cfg);
  std::string current = "zoo";
  try {
    stage_zoo(st);
    current = "tuples";
    bool need_aitl = false;
    for (const auto& id : st.cfg.attacks) need_aitl |= id == "aitl" || id == "ens-aitl";
    std::vector<TrainingTuple> tuples;
    if (need_aitl && !file_exists(aitl_path(st))) tuples = stage_tuples(st);
    current = "train-aitl";
    if (need_aitl) stage_aitl(st, tuples);
    current = "attack";
    stage_attacks(st);
    current = "evaluate";
    stage_evaluate(st);
    current = "report";
    stage_report(st);
  } catch (const std::exception& e) {
    nlohmann::json manifest;
    manifest["tool"] = kToolVersion;
    manifest["config"] = config_to_json(st.cfg);
    manifest["status"] = "partial";
    manifest["failed_stage"] = current;
    manifest["error"] = e.what();
    make_dirs(st.dir());
    atomic_write_file(st.dir("manifest.json"), manifest.dump(2) + "\n");
    throw StageError("stage " + current + " failed: " + e.what());
  }
}

}  // namespace aitl
