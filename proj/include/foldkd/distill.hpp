#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "foldkd/dataset.hpp"
#include "foldkd/dt_model.hpp"
#include "foldkd/encoder.hpp"
#include "foldkd/eval.hpp"
#include "foldkd/optim.hpp"

namespace foldkd::distill {

struct DistillConfig {
  std::size_t epochs = 60;
  std::size_t steps_per_epoch = 20;
  std::size_t episodes_per_epoch = 10;
  std::size_t batch_size = 32;
  std::size_t eval_trials = 10;
  double lr = 3e-4;
  double weight_decay = 1e-4;
  double grad_clip = 1.0;
  double sigma = 0.0;  // std of Gaussian noise on estimated states; 0 disables
  bool use_augmented_encoder = true;
  bool use_weight_copy = true;
  bool use_distillation = true;  // false: imitate the expert dataset instead
  std::uint64_t seed = 0;

  static DistillConfig ours();
  static DistillConfig no_aug();
  static DistillConfig no_pretrain();
  // Plain behaviour cloning from images; starts from fresh weights.
  static DistillConfig no_distill();

  std::string variant() const;
  void validate() const;
};

// One episode seen by both policies. The encoder is frozen, so its
// estimates are cached instead of the images they came from.
struct PairedRollout {
  std::uint64_t seed = 0;
  std::size_t state_dim = 0;
  std::size_t action_dim = 0;
  std::vector<double> true_states;       // teacher input, H x ds
  std::vector<double> estimated_states;  // encoder output, H x ds
  std::vector<double> actions;           // executed (student's own), H x da
  std::vector<double> returns_to_go;     // shared conditioning stream, H
  std::vector<double> teacher_actions;   // relabels, H x da
  std::size_t length() const { return returns_to_go.size(); }
};

// Weight copy when requested, fresh initialization otherwise; the student
// always inherits the teacher's input normalizer.
model::DtModel init_student(const model::DtModel& teacher, bool use_weight_copy, std::uint64_t seed);

// Teacher greedy action at every step, computed on true-state windows that
// share the rollout's returns-to-go and executed actions.
void relabel(const model::DtModel& teacher, PairedRollout& rollout);

// Rolls out the student (greedy, image input) on the given seeds and
// labels every step with the teacher.
std::vector<PairedRollout> collect_paired(const model::DtModel& student, const model::DtModel& teacher,
                                          const vision::EncoderModel& encoder,
                                          const sim::TaskSpec& task,
                                          std::span<const std::uint64_t> seeds);

// Expert-dataset episodes in the same form (labels are the expert's own
// actions); used when distillation is switched off.
std::vector<PairedRollout> expert_rollouts(const data::Dataset& ds, const vision::EncoderModel& encoder);

// Student windows: estimated states (+ noise), shared returns-to-go,
// student actions as tokens, teacher actions as targets.
model::TokenBatch sample_student_batch(std::span<const PairedRollout> rollouts,
                                       const model::DtConfig& cfg, std::size_t batch, double sigma,
                                       Rng& rng);

// Gradient steps on the student only; teacher and encoder are held by
// const reference and never enter the graph.
class Distiller {
 public:
  Distiller(model::DtModel& student, const DistillConfig& cfg);

  // One step; returns the NLL of teacher actions under the student.
  double step(std::span<const PairedRollout> rollouts);
  std::uint64_t steps_done() const { return step_; }
  const ad::AdamW& optimizer() const { return opt_; }

 private:
  model::DtModel& student_;
  DistillConfig cfg_;
  ad::AdamW opt_;
  std::uint64_t step_ = 0;
};

struct CurveRow {
  std::size_t epoch = 0;
  double loss = 0.0;
  double eval_mean = 0.0;
  double eval_std = 0.0;
  bool operator==(const CurveRow&) const = default;
};
std::string curve_csv(std::span<const CurveRow> rows);

struct DistillHooks {
  std::string curve_path;       // CSV rewritten after every epoch
  std::string checkpoint_path;  // student, after every epoch
};

struct DistillResult {
  model::DtModel student;
  std::vector<CurveRow> curve;
  std::size_t rollouts_collected = 0;
};

// Ours / No-Aug / No-Pretrain use DAgger-style epochs: collect episodes with
// the current student, relabel with the teacher, train on everything
// gathered so far, evaluate. No-Distill trains on `expert` instead.
DistillResult run_distillation(const DistillConfig& cfg, const model::DtModel& teacher,
                               const vision::EncoderModel& encoder, const sim::TaskSpec& task,
                               const data::Dataset* expert = nullptr, const DistillHooks& hooks = {});

// Least-squares slope of the last `n` values.
double tail_slope(std::span<const double> values, std::size_t n);

}  // namespace foldkd::distill
