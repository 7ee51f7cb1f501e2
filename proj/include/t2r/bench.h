#pragma once

// Generation throughput and attention-state memory against sequence length.
//
// One decode at length L: a prompt of L tokens is consumed position by
// position, then L tokens are generated greedily and each is fed back, so
// 2L positions pass through the decoder. Throughput counts generated tokens
// over the whole decode, across the batch.

#include <optional>
#include <string>
#include <vector>

#include "t2r/model.h"

namespace t2r {

// recurrent: the incremental decoder as configured (linear sites keep a
// fixed-size state, softmax sites a cache). softmax: the same decoder on an
// all-softmax model, i.e. the key/value-cache baseline.
enum class BenchMode { kRecurrent, kSoftmax };
std::string_view BenchModeName(BenchMode m);
BenchMode ParseBenchMode(std::string_view name);

struct BenchOptions {
  std::string model_id = "model";
  BenchMode mode = BenchMode::kRecurrent;
  std::vector<std::size_t> lengths{256};
  std::size_t batch = 16;
  // Timed repetitions after one discarded warm-up.
  std::size_t reps = 3;
  std::uint64_t seed = 0;
};

struct BenchRow {
  std::string model;
  std::string mode;
  std::size_t length = 0;
  std::size_t batch = 0;
  // Repetition index, or "median".
  std::string rep;
  double tokens_per_sec = 0.0;
  std::size_t attn_state_elements = 0;
};

// Raw rows for every timed rep, then one median row per length.
std::vector<BenchRow> BenchSpeed(const Model& model, const BenchOptions& options);

struct MemoryPoint {
  std::size_t length = 0;
  // Peak live attention-state elements for one stream over the decode.
  std::size_t elements = 0;
};
std::vector<MemoryPoint> BenchMemory(const Model& model, const std::vector<std::size_t>& lengths,
                                     BenchMode mode = BenchMode::kRecurrent);

// Wall-clock seconds of each decoder step over `steps` positions of greedy
// decoding from a random first token, one vector per independent decode.
std::vector<std::vector<double>> StepTimeRuns(const Model& model, std::size_t steps,
                                              std::size_t batch, BenchMode mode,
                                              std::uint64_t seed = 0, std::size_t reps = 1);
// Per-position median over StepTimeRuns.
std::vector<double> StepTimes(const Model& model, std::size_t steps, std::size_t batch,
                              BenchMode mode, std::uint64_t seed = 0, std::size_t reps = 1);

struct SlopeFit {
  double slope = 0.0;
  double ci_low = 0.0;
  double ci_high = 0.0;
  bool ContainsZero() const { return ci_low <= 0.0 && 0.0 <= ci_high; }
};
// Ordinary least squares of y against its index, with a 95% confidence
// interval on the slope from a Newey-West (Bartlett kernel) standard error.
// Timing residuals are serially correlated, so the iid formula would be far
// too narrow. max_lag defaults to floor(sqrt(n)); 0 gives the iid interval.
SlopeFit FitSlope(const std::vector<double>& y, std::optional<std::size_t> max_lag = std::nullopt);

// One OLS slope per run; the interval is a Student-t interval on their mean,
// so slow machine drift within a run counts as noise between runs.
SlopeFit FitSlopeAcrossRuns(const std::vector<std::vector<double>>& runs);

inline constexpr const char* kBenchHeader =
    "model,mode,length,batch,rep,tokens_per_sec,attn_state_elements";
std::string BenchCsv(const std::vector<BenchRow>& rows);

}  // namespace t2r
