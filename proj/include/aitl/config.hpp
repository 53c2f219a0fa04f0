#pragma once

#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "aitl/attack.hpp"
#include "aitl/fsio.hpp"
#include "aitl/learner.hpp"

namespace aitl {

struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Flat key=value config file: one pair per line, '#' comments, whitespace
/// trimmed. CLI flags override file values; --seed is mandatory for run
/// commands.
inline std::map<std::string, std::string> parse_flat_config(const std::string& text) {
  std::map<std::string, std::string> kv;
  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  auto trim = [](std::string s) {
    size_t a = s.find_first_not_of(" \t\r");
    size_t b = s.find_last_not_of(" \t\r");
    return a == std::string::npos ? std::string() : s.substr(a, b - a + 1);
  };
  while (std::getline(in, line)) {
    ++lineno;
    std::string t = trim(line);
    if (t.empty() || t[0] == '#') continue;
    size_t eq = t.find('=');
    if (eq == std::string::npos)
      throw ConfigError("config line " + std::to_string(lineno) + ": expected key = value");
    std::string key = trim(t.substr(0, eq)), val = trim(t.substr(eq + 1));
    if (key.empty()) throw ConfigError("config line " + std::to_string(lineno) + ": empty key");
    kv[key] = val;
  }
  return kv;
}

struct ZooEntry {
  std::string role;  // source | target | eval
  std::string arch;
  uint64_t seed_base;
  float adv_eps = 0.0f;
};

/// Everything a run needs; serializes losslessly into the manifest.
struct ExperimentConfig {
  uint64_t seed = 0;
  bool seed_set = false;
  std::string profile = "desk";

  std::string dataset_source = "synthetic";
  int classes = 10;
  int per_class = 175;
  int train_per_class = 130;
  int eval_per_class = 25;
  int mix_per_class = 20;

  int zoo_epochs = 12;
  float zoo_lr = 5e-3f;
  int zoo_batch = 16;
  float zoo_adv_eps_255 = 8.0f;

  float eps_255 = 16.0f;
  float alpha_255 = 1.6f;
  int iters = 10;
  float mu = 1.0f;
  int copies = 5;
  int combo_len = 4;

  int aitl_images = 300;
  int combos_per_image = 4;
  int aitl_epochs = 10;
  int aitl_batch = 64;
  float aitl_lr = 5e-5f;
  float gamma = 15.0f;
  int ascent_steps = 1;

  std::vector<std::string> attacks = {"mifgsm", "dim",    "tim",    "sim",  "cim",
                                      "admix",  "adscm",  "random", "aitl", "ens-mifgsm", "ens-aitl"};
  int eval_images = 200;

  std::vector<float> sweep_eps_255 = {2, 4, 8, 16, 32};
  int sweep_images = 60;
  std::vector<std::string> sweep_attacks = {"mifgsm", "random", "aitl"};

  std::vector<int> ablate_n = {5, 10, 15};
  std::vector<int> ablate_m = {2, 3, 4};
  int ablate_images = 60;

  std::string out_dir = "runs/exp";
  int workers = 2;
  bool save_images = false;

  AttackConfig attack_config() const {
    AttackConfig a;
    a.eps = eps_255 / 255.0f;
    a.alpha = alpha_255 / 255.0f;
    a.iters = iters;
    a.mu = mu;
    a.copies = copies;
    a.combo_len = combo_len;
    return a;
  }
  OptimizerSchedule schedule() const {
    OptimizerSchedule s;
    s.steps = ascent_steps;
    s.gamma = gamma;
    return s;
  }

  /// Fixed roster; init seeds derive from the master seed so distinct seeds
  /// give distinct zoos while staying reproducible from the manifest.
  std::vector<ZooEntry> roster() const {
    float adv = zoo_adv_eps_255 / 255.0f;
    return {{"source", "cnn_a", 11, 0.0f},  {"target", "cnn_b", 103, 0.0f}, {"target", "cnn_c", 104, 0.0f},
            {"target", "cnn_d", 105, 0.0f}, {"target", "mlp_a", 106, 0.0f}, {"target", "cnn_e", 107, adv},
            {"eval", "mlp_b", 201, 0.0f},   {"eval", "cnn_d", 202, 0.0f},   {"eval", "cnn_b", 203, 0.0f},
            {"eval", "cnn_e", 204, 0.0f}};
  }
  uint64_t model_seed(uint64_t seed_base) const { return seed * 1000 + seed_base; }
};

namespace detail {

inline std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::istringstream in(s);
  std::string item;
  while (std::getline(in, item, ',')) {
    size_t a = item.find_first_not_of(" \t");
    size_t b = item.find_last_not_of(" \t");
    if (a != std::string::npos) out.push_back(item.substr(a, b - a + 1));
  }
  return out;
}

}  // namespace detail

inline const std::vector<std::string>& known_attack_ids() {
  static const std::vector<std::string> ids = {"mifgsm", "nim",    "dim",  "tim",        "sim",     "cim",
                                               "admix",  "adscm",  "random", "aitl",     "ens-mifgsm", "ens-aitl"};
  return ids;
}

inline void apply_kv(ExperimentConfig& cfg, const std::map<std::string, std::string>& kv) {
  auto geti = [&](const std::string& k, int& dst) {
    if (kv.count(k)) dst = std::stoi(kv.at(k));
  };
  auto getf = [&](const std::string& k, float& dst) {
    if (kv.count(k)) dst = std::stof(kv.at(k));
  };
  auto gets = [&](const std::string& k, std::string& dst) {
    if (kv.count(k)) dst = kv.at(k);
  };
  if (kv.count("seed")) {
    cfg.seed = std::stoull(kv.at("seed"));
    cfg.seed_set = true;
  }
  gets("profile", cfg.profile);
  gets("dataset.source", cfg.dataset_source);
  geti("dataset.classes", cfg.classes);
  geti("dataset.per_class", cfg.per_class);
  geti("dataset.train_per_class", cfg.train_per_class);
  geti("dataset.eval_per_class", cfg.eval_per_class);
  geti("dataset.mix_per_class", cfg.mix_per_class);
  geti("zoo.epochs", cfg.zoo_epochs);
  getf("zoo.lr", cfg.zoo_lr);
  geti("zoo.batch", cfg.zoo_batch);
  getf("zoo.adv_eps", cfg.zoo_adv_eps_255);
  getf("attack.eps", cfg.eps_255);
  getf("attack.alpha", cfg.alpha_255);
  geti("attack.iters", cfg.iters);
  getf("attack.mu", cfg.mu);
  geti("attack.copies", cfg.copies);
  geti("attack.combo_len", cfg.combo_len);
  if (kv.count("attack.list")) cfg.attacks = detail::split_list(kv.at("attack.list"));
  geti("aitl.images", cfg.aitl_images);
  geti("aitl.combos_per_image", cfg.combos_per_image);
  geti("aitl.epochs", cfg.aitl_epochs);
  geti("aitl.batch", cfg.aitl_batch);
  getf("aitl.lr", cfg.aitl_lr);
  getf("aitl.gamma", cfg.gamma);
  geti("aitl.r", cfg.ascent_steps);
  geti("eval.images", cfg.eval_images);
  if (kv.count("sweep.eps")) {
    cfg.sweep_eps_255.clear();
    for (const auto& s : detail::split_list(kv.at("sweep.eps"))) cfg.sweep_eps_255.push_back(std::stof(s));
  }
  geti("sweep.images", cfg.sweep_images);
  if (kv.count("sweep.attacks")) cfg.sweep_attacks = detail::split_list(kv.at("sweep.attacks"));
  if (kv.count("ablate.N")) {
    cfg.ablate_n.clear();
    for (const auto& s : detail::split_list(kv.at("ablate.N"))) cfg.ablate_n.push_back(std::stoi(s));
  }
  if (kv.count("ablate.M")) {
    cfg.ablate_m.clear();
    for (const auto& s : detail::split_list(kv.at("ablate.M"))) cfg.ablate_m.push_back(std::stoi(s));
  }
  geti("ablate.images", cfg.ablate_images);
  gets("output.dir", cfg.out_dir);
  geti("workers", cfg.workers);
  if (kv.count("save_images")) cfg.save_images = kv.at("save_images") == "1" || kv.at("save_images") == "true";
}

inline void validate_config(const ExperimentConfig& cfg, bool need_seed) {
  if (need_seed && !cfg.seed_set) throw ConfigError("--seed is required for run commands");
  if (cfg.profile != "desk" && cfg.profile != "paper-299") throw ConfigError("unknown profile: " + cfg.profile);
  if (cfg.classes < 2 || cfg.per_class < 1) throw ConfigError("dataset too small");
  if (cfg.train_per_class + cfg.eval_per_class + cfg.mix_per_class > cfg.per_class)
    throw ConfigError("dataset splits exceed per_class");
  if (cfg.iters < 1 || cfg.copies < 1 || cfg.combo_len < 1) throw ConfigError("invalid attack parameters");
  if (!(cfg.eps_255 > 0.0f) || !(cfg.alpha_255 > 0.0f)) throw ConfigError("invalid attack budget");
  for (const auto& id : cfg.attacks)
    if (std::find(known_attack_ids().begin(), known_attack_ids().end(), id) == known_attack_ids().end())
      throw ConfigError("unknown attack id: " + id);
  for (const auto& id : cfg.sweep_attacks)
    if (std::find(known_attack_ids().begin(), known_attack_ids().end(), id) == known_attack_ids().end())
      throw ConfigError("unknown sweep attack id: " + id);
}

inline nlohmann::json config_to_json(const ExperimentConfig& c) {
  nlohmann::json j;
  j["seed"] = c.seed;
  j["profile"] = c.profile;
  j["dataset.source"] = c.dataset_source;
  j["dataset.classes"] = c.classes;
  j["dataset.per_class"] = c.per_class;
  j["dataset.train_per_class"] = c.train_per_class;
  j["dataset.eval_per_class"] = c.eval_per_class;
  j["dataset.mix_per_class"] = c.mix_per_class;
  j["zoo.epochs"] = c.zoo_epochs;
  j["zoo.lr"] = c.zoo_lr;
  j["zoo.batch"] = c.zoo_batch;
  j["zoo.adv_eps"] = c.zoo_adv_eps_255;
  j["attack.eps"] = c.eps_255;
  j["attack.alpha"] = c.alpha_255;
  j["attack.iters"] = c.iters;
  j["attack.mu"] = c.mu;
  j["attack.copies"] = c.copies;
  j["attack.combo_len"] = c.combo_len;
  j["attack.list"] = c.attacks;
  j["aitl.images"] = c.aitl_images;
  j["aitl.combos_per_image"] = c.combos_per_image;
  j["aitl.epochs"] = c.aitl_epochs;
  j["aitl.batch"] = c.aitl_batch;
  j["aitl.lr"] = c.aitl_lr;
  j["aitl.gamma"] = c.gamma;
  j["aitl.r"] = c.ascent_steps;
  j["eval.images"] = c.eval_images;
  j["sweep.eps"] = c.sweep_eps_255;
  j["sweep.images"] = c.sweep_images;
  j["sweep.attacks"] = c.sweep_attacks;
  j["ablate.N"] = c.ablate_n;
  j["ablate.M"] = c.ablate_m;
  j["ablate.images"] = c.ablate_images;
  j["output.dir"] = c.out_dir;
  j["workers"] = c.workers;
  j["save_images"] = c.save_images;
  return j;
}

inline ExperimentConfig config_from_json(const nlohmann::json& j) {
  ExperimentConfig c;
  std::map<std::string, std::string> kv;
  for (auto it = j.begin(); it != j.end(); ++it) {
    if (it.value().is_string())
      kv[it.key()] = it.value().get<std::string>();
    else if (it.value().is_array()) {
      std::string s;
      for (const auto& v : it.value()) {
        if (!s.empty()) s += ",";
        if (v.is_string())
          s += v.get<std::string>();
        else
          s += nlohmann::json(v).dump();
      }
      kv[it.key()] = s;
    } else
      kv[it.key()] = nlohmann::json(it.value()).dump();
  }
  apply_kv(c, kv);
  if (j.contains("seed")) c.seed_set = true;
  return c;
}

/// Accepts a flat key=value file or a manifest JSON ("config" object).
inline ExperimentConfig load_config_file(const std::string& path) {
  std::string text = read_file(path);
  size_t first = text.find_first_not_of(" \t\r\n");
  if (first != std::string::npos && text[first] == '{') {
    nlohmann::json j = nlohmann::json::parse(text);
    if (j.contains("config")) return config_from_json(j.at("config"));
    return config_from_json(j);
  }
  ExperimentConfig c;
  apply_kv(c, parse_flat_config(text));
  return c;
}

}  // namespace aitl
