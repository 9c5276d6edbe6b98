#pragma once

#include <cstdint>
#include <fstream>
#include <map>
#include <sstream>
#include <string>

#include "cldyn/checkpoint.hpp"
#include "cldyn/tensor.hpp"

namespace cldyn {

/// Run hyperparameters. One source of truth: defaults here, optionally a
/// TOML-style key/value file, then CLI flag overrides. The canonical echo is
/// embedded (as text or as its CRC32 hash) in every artifact a run produces.
struct RunConfig {
  // stage 1: fusion network training
  double stage1_lr = 1e-3;
  long stage1_batch = 16;
  long stage1_epochs = 10;
  long stage1_scenes = 16;

  // stage 2: compensation training against frozen tasks
  double stage2_lr = 1e-2;
  long stage2_batch = 4;
  long stage2_epochs = 5;
  long stage2_scenes = 64;

  long eval_scenes = 16;

  // objective weights
  double lambda = 1.0;  // gradient term of the fusion loss
  double delta = 5.0;   // penalty strength in the closed-loop objective

  // architecture
  long layers = 2;        // L
  long branches = 4;      // M
  long e1 = 16;           // prototype embedding width
  long e2 = 256;          // basis vector width
  long base_channels = 32;

  // synthetic task pretraining
  double task_lr = 3e-3;
  long task_epochs = 60;
  long task_batch = 8;
  double task_threshold_heat = 0.02;
  double task_threshold_seg = 0.30;
  double task_threshold_sal = 0.45;

  long image_size = 64;
  std::uint64_t seed = 7;
  std::string out_dir = "runs/default";

  /// Canonical text form: sorted key = value lines, locale-independent.
  std::string canonical_text() const {
    std::ostringstream os;
    os.precision(17);
    os << "arch.base_channels = " << base_channels << "\n";
    os << "arch.branches = " << branches << "\n";
    os << "arch.e1 = " << e1 << "\n";
    os << "arch.e2 = " << e2 << "\n";
    os << "arch.layers = " << layers << "\n";
    os << "eval.scenes = " << eval_scenes << "\n";
    os << "image_size = " << image_size << "\n";
    os << "loss.delta = " << delta << "\n";
    os << "loss.lambda = " << lambda << "\n";
    os << "out_dir = " << out_dir << "\n";
    os << "seed = " << seed << "\n";
    os << "stage1.batch = " << stage1_batch << "\n";
    os << "stage1.epochs = " << stage1_epochs << "\n";
    os << "stage1.lr = " << stage1_lr << "\n";
    os << "stage1.scenes = " << stage1_scenes << "\n";
    os << "stage2.batch = " << stage2_batch << "\n";
    os << "stage2.epochs = " << stage2_epochs << "\n";
    os << "stage2.lr = " << stage2_lr << "\n";
    os << "stage2.scenes = " << stage2_scenes << "\n";
    os << "task.batch = " << task_batch << "\n";
    os << "task.epochs = " << task_epochs << "\n";
    os << "task.lr = " << task_lr << "\n";
    os << "task.threshold_heat = " << task_threshold_heat << "\n";
    os << "task.threshold_sal = " << task_threshold_sal << "\n";
    os << "task.threshold_seg = " << task_threshold_seg << "\n";
    return os.str();
  }

  std::uint32_t hash() const {
    const std::string text = canonical_text();
    return detail::crc32_of(text.data(), text.size());
  }

  void set(const std::string& key, const std::string& value) {
    auto as_long = [&] { return std::stol(value); };
    auto as_double = [&] { return std::stod(value); };
    if (key == "stage1.lr") stage1_lr = as_double();
    else if (key == "stage1.batch") stage1_batch = as_long();
    else if (key == "stage1.epochs") stage1_epochs = as_long();
    else if (key == "stage1.scenes") stage1_scenes = as_long();
    else if (key == "stage2.lr") stage2_lr = as_double();
    else if (key == "stage2.batch") stage2_batch = as_long();
    else if (key == "stage2.epochs") stage2_epochs = as_long();
    else if (key == "stage2.scenes") stage2_scenes = as_long();
    else if (key == "eval.scenes") eval_scenes = as_long();
    else if (key == "loss.lambda") lambda = as_double();
    else if (key == "loss.delta") delta = as_double();
    else if (key == "arch.layers") layers = as_long();
    else if (key == "arch.branches") branches = as_long();
    else if (key == "arch.e1") e1 = as_long();
    else if (key == "arch.e2") e2 = as_long();
    else if (key == "arch.base_channels") base_channels = as_long();
    else if (key == "task.lr") task_lr = as_double();
    else if (key == "task.epochs") task_epochs = as_long();
    else if (key == "task.batch") task_batch = as_long();
    else if (key == "task.threshold_heat") task_threshold_heat = as_double();
    else if (key == "task.threshold_seg") task_threshold_seg = as_double();
    else if (key == "task.threshold_sal") task_threshold_sal = as_double();
    else if (key == "image_size") image_size = as_long();
    else if (key == "seed") seed = static_cast<std::uint64_t>(std::stoull(value));
    else if (key == "out_dir") out_dir = value;
    else throw ConfigError("unknown config key '" + key + "'");
  }

  void validate() const {
    auto positive = [](double v, const char* name) {
      if (v <= 0) throw ConfigError(std::string(name) + " must be positive");
    };
    positive(stage1_lr, "stage1.lr");
    positive(stage2_lr, "stage2.lr");
    positive(task_lr, "task.lr");
    positive(static_cast<double>(stage1_batch), "stage1.batch");
    positive(static_cast<double>(stage2_batch), "stage2.batch");
    positive(static_cast<double>(stage1_epochs), "stage1.epochs");
    positive(static_cast<double>(stage2_epochs), "stage2.epochs");
    positive(static_cast<double>(stage1_scenes), "stage1.scenes");
    positive(static_cast<double>(stage2_scenes), "stage2.scenes");
    positive(static_cast<double>(eval_scenes), "eval.scenes");
    positive(static_cast<double>(branches), "arch.branches");
    positive(static_cast<double>(e1), "arch.e1");
    positive(static_cast<double>(e2), "arch.e2");
    positive(static_cast<double>(base_channels), "arch.base_channels");
    positive(static_cast<double>(image_size), "image_size");
    if (lambda < 0) throw ConfigError("loss.lambda must be >= 0");
    if (delta < 0) throw ConfigError("loss.delta must be >= 0");
    if (layers < 2) throw ConfigError("arch.layers must be >= 2 (compensation needs an exposed layer)");
    if (image_size < 32) throw ConfigError("image_size must be >= 32");
    if (e2 < 32) throw ConfigError("arch.e2 must be >= 32 (orthogonal bank init)");
  }
};

/// key = value lines, '#' comments, blank lines ignored. Values may be
/// quoted strings or bare numbers.
inline RunConfig load_config(const std::string& path, RunConfig base = {}) {
  std::ifstream f(path);
  if (!f) throw IoError("cannot open config " + path);
  std::string line;
  long lineno = 0;
  while (std::getline(f, line)) {
    ++lineno;
    const auto hash_pos = line.find('#');
    if (hash_pos != std::string::npos) line = line.substr(0, hash_pos);
    auto trim = [](std::string s) {
      const auto b = s.find_first_not_of(" \t\r");
      const auto e = s.find_last_not_of(" \t\r");
      return b == std::string::npos ? std::string() : s.substr(b, e - b + 1);
    };
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw ConfigError(path + ":" + std::to_string(lineno) + ": expected key = value");
    std::string key = trim(line.substr(0, eq));
    std::string value = trim(line.substr(eq + 1));
    if (value.size() >= 2 && value.front() == '"' && value.back() == '"')
      value = value.substr(1, value.size() - 2);
    try {
      base.set(key, value);
    } catch (const ConfigError&) {
      throw;
    } catch (const std::exception& e) {
      throw ConfigError(path + ":" + std::to_string(lineno) + ": bad value for '" + key + "': " + e.what());
    }
  }
  base.validate();
  return base;
}

}  // namespace cldyn
