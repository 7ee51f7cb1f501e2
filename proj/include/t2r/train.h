#pragma once

// Teacher-forced training, the swap-then-finetune procedure and the
// experiment matrix over feature maps, initializations and feature sizes.

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "t2r/model.h"
#include "t2r/tasks.h"

namespace t2r {

enum class Schedule { kInverseSqrt, kConstant, kCosine };
std::string_view ScheduleName(Schedule s);
Schedule ParseSchedule(std::string_view name);

struct TrainConfig {
  long steps = 1000;
  std::size_t batch_tokens = 512;
  double lr = 1e-3;
  long warmup = 100;
  Schedule schedule = Schedule::kInverseSqrt;
  std::uint64_t seed = 0;
  Objective objective = Objective::kLm;
  double label_smoothing = 0.0;
  double beta1 = 0.9;
  double beta2 = 0.98;
  // 0 disables clipping.
  double grad_clip = 1.0;
  // Keep phi parameters at their converted values.
  bool freeze_feature_maps = false;
  // Trajectory sampling; 0 records only the final evaluation.
  long eval_every = 0;
  std::size_t eval_sequences = 64;

  // steps >= 0 (0 means "return the input"), lr > 0, warmup <= steps.
  void Validate() const;
};

// Learning rate at 1-based step.
//   inverse-sqrt: lr * min(step / warmup, sqrt(warmup / step))
//   constant:     lr * min(1, step / warmup)
//   cosine:       linear warmup, then half a cosine down to 0 at `steps`
double LearningRate(const TrainConfig& config, long step);

// Label-smoothed cross entropy averaged over non-ignored positions.
Tensor Loss(const Tensor& logits, std::span<const int> targets, double label_smoothing);

struct Evaluation {
  double loss = 0.0;
  // Fraction of evaluation sequences whose every target position is predicted
  // correctly by argmax under teacher forcing (equivalently, greedy decoding
  // reproduces the target). Undefined (NaN) for char-lm.
  double exact_match = 0.0;
  std::size_t sequences = 0;
};

Evaluation Evaluate(const Model& model, const SyntheticTask& task, Objective objective,
                    std::size_t sequences);

struct TrainResult {
  Model model;
  double initial_loss = 0.0;
  double final_loss = 0.0;
  Evaluation eval;
  // (step, eval loss) samples when eval_every > 0.
  std::vector<std::pair<long, double>> trajectory;
  // Per-step training loss.
  std::vector<double> losses;
  double seconds = 0.0;
};

// Trains a copy of `model`; the argument is never modified. Throws
// DivergenceError on a non-finite loss or a loss above 10x the initial loss
// for 100 consecutive steps.
TrainResult Train(const Model& model, const TrainConfig& config, const SyntheticTask& task);

// Fresh softmax model trained from scratch. Metadata records step, seed,
// objective and the final losses.
TrainResult Pretrain(const ModelConfig& config, const TrainConfig& train, const SyntheticTask& task);

// Finetunes every parameter of a converted model (phi included unless
// freeze_feature_maps). ContractError when no attention site is linear.
TrainResult Finetune(const Model& converted, const TrainConfig& train, const SyntheticTask& task);

enum class InitKind { kPretrain, kRandom };
std::string_view InitName(InitKind k);
InitKind ParseInit(std::string_view name);

struct MatrixCell {
  std::string id;
  FeatureMapKind feature_map = FeatureMapKind::kMlpRelu;
  InitKind init = InitKind::kPretrain;
  std::size_t k_causal = 16;
  std::size_t k_cross = 16;
  std::uint64_t seed = 0;
  bool freeze_feature_maps = false;
};

struct MatrixPlan {
  // Softmax architecture shared by every cell.
  ModelConfig model;
  TrainConfig pretrain;
  TrainConfig finetune;
  std::vector<MatrixCell> cells;
};

struct MatrixRow {
  std::string cell_id;
  std::string feature_map;
  std::string init;
  std::size_t k_causal = 0;
  std::size_t k_cross = 0;
  long steps = 0;
  // Evaluation loss (nats per scored token); NaN when diverged.
  double eval_metric = 0.0;
  double train_seconds = 0.0;
  std::size_t param_count = 0;
  // "ok" or "diverged".
  std::string status;
};

// Pretrained teachers, keyed by seed; nullopt marks a teacher that diverged.
using TeacherCache = std::map<std::uint64_t, std::optional<Model>>;

// Pretrained teachers are trained once per seed and shared by the cells that
// use them; pass `teachers` to reuse or keep them. A diverging cell is
// recorded, never fatal.
std::vector<MatrixRow> RunMatrix(const MatrixPlan& plan, const SyntheticTask& task,
                                 TeacherCache* teachers = nullptr);

// The cells {feature maps} x {inits} x {k} x {seeds}.
std::vector<MatrixCell> EnumerateCells(const std::vector<FeatureMapKind>& maps,
                                       const std::vector<InitKind>& inits,
                                       const std::vector<std::size_t>& ks,
                                       const std::vector<std::uint64_t>& seeds);

inline constexpr const char* kResultsHeader =
    "cell_id,feature_map,init,k_causal,k_cross,steps,eval_metric,train_seconds,param_count,status";
std::string ResultsCsv(const std::vector<MatrixRow>& rows);

}  // namespace t2r
