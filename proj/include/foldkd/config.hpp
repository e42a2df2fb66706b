#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "foldkd/chain_env.hpp"
#include "foldkd/distill.hpp"
#include "foldkd/dt_model.hpp"
#include "foldkd/encoder.hpp"
#include "foldkd/teacher.hpp"

namespace foldkd::cfg {

enum class Preset { Desk, Paper };
Preset parse_preset(const std::string& name);
std::string preset_name(Preset p);

struct DataSettings {
  std::size_t episodes = 500;
  double gamma = 1.0;
  bool store_observations = true;
  double gate = 0.85;  // minimum mean expert normalized performance
};

struct EncoderSettings {
  vision::EncoderConfig model;
  vision::EncoderTrainConfig train;
  vision::AugmentationSpec augment;
  std::size_t max_episodes = 200;  // images are large; only the first N episodes are used
};

struct TeacherSettings {
  train::TrainSchedule schedule;
  std::size_t buffer_capacity = 0;  // 0: the dataset size
  double target_percentile = 0.9;
  double gate_ratio = 0.8;  // offline teacher vs. expert mean
};

struct DistillSettings {
  distill::DistillConfig run;
  double gate_ratio = 0.7;  // student vs. teacher mean
};

struct EvalSettings {
  std::size_t trials = 100;
  double sigma = 0.0;
  std::vector<double> noise_grid = eval::kDefaultNoiseGrid;
};

// Artifact locations; empty means the default file inside `out`.
struct Paths {
  std::string dataset;
  std::string teacher;
  std::string encoder;        // trained with augmentation
  std::string encoder_noaug;  // trained without
  std::string student;
};

struct RunConfig {
  Preset preset = Preset::Desk;
  sim::TaskId task = sim::TaskId::FoldFree;
  std::uint64_t seed = 0;
  std::string out = "runs";
  model::DtConfig model;
  DataSettings data;
  TeacherSettings teacher;
  EncoderSettings encoder;
  DistillSettings distill;
  EvalSettings eval;
  Paths paths;

  static RunConfig make(Preset p);

  sim::TaskSpec task_spec() const { return sim::TaskSpec::make(task); }
  // Model config with the task's dimensions filled in.
  model::DtConfig model_config() const;

  std::string dataset_path() const;
  std::string teacher_path() const;
  std::string encoder_path(bool augmented) const;
  // Defaults to student_<variant>.ckpt so ablations do not overwrite each other.
  std::string student_path() const;
  std::string out_file(const std::string& name) const;

  // Per-stage seeds, all derived from `seed`.
  std::uint64_t stage_seed(const std::string& stage) const;

  // Throws ConfigError naming the key. Keys look like "teacher.lr".
  void set(const std::string& key, const std::string& value);
  std::string get(const std::string& key) const;
  static const std::vector<std::string>& keys();

  void validate() const;
  // Every key, one "key = value" per line, in keys() order.
  std::string resolved() const;
};

using Assignment = std::pair<std::string, std::string>;

// "key = value" lines; '#' starts a comment; blank lines are skipped.
// Throws ConfigError with the line number on malformed input.
std::vector<Assignment> parse_text(const std::string& text);
Assignment parse_assignment(const std::string& s);

// Preset first (flag beats a `preset` key in the file), then the file's
// assignments in order, then overrides.
RunConfig resolve(const std::string& preset_flag, const std::vector<Assignment>& file,
                  const std::vector<Assignment>& overrides);

}  // namespace foldkd::cfg
