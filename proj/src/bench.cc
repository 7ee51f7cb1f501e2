#include "t2r/bench.h"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <sstream>

#include "t2r/errors.h"
#include "t2r/random.h"
#include "t2r/recurrent.h"

namespace t2r {

std::string_view BenchModeName(BenchMode m) {
  return m == BenchMode::kRecurrent ? "recurrent" : "softmax";
}

BenchMode ParseBenchMode(std::string_view name) {
  if (name == "recurrent") return BenchMode::kRecurrent;
  if (name == "softmax") return BenchMode::kSoftmax;
  throw ConfigError("unknown bench mode '" + std::string(name) + "' (recurrent, softmax)");
}

namespace {

using Clock = std::chrono::steady_clock;

void CheckMode(const Model& model, BenchMode mode) {
  if (mode != BenchMode::kSoftmax) return;
  for (AttentionKind k : model.config().causal_kinds) {
    if (IsLinear(k)) throw ContractError("softmax bench mode needs an all-softmax model");
  }
}

void CheckLength(const Model& model, std::size_t positions) {
  if (positions > model.config().max_positions) {
    throw InputError("decode of " + std::to_string(positions) + " positions exceeds max_positions " +
                     std::to_string(model.config().max_positions));
  }
}

std::vector<int> Prompt(std::size_t n, std::size_t vocab, Rng& rng) {
  std::vector<int> p(n);
  for (int& t : p) t = rng.UniformInt(static_cast<int>(vocab));
  return p;
}

int Argmax(std::span<const double> row) {
  return static_cast<int>(std::max_element(row.begin(), row.end()) - row.begin());
}

struct DecodeStats {
  double seconds = 0.0;
  std::size_t peak_elements = 0;
};

// Prompt of `length` tokens per stream, then `length` greedy tokens fed back.
DecodeStats TimedDecode(const Model& model, std::size_t length, std::size_t batch, Rng& rng) {
  const std::size_t vocab = model.config().vocab;
  const std::vector<int> prompt = Prompt(length * batch, vocab, rng);
  std::vector<int> step(batch);
  DecodeStats stats;
  const auto start = Clock::now();
  IncrementalDecoder dec(model, batch);
  std::span<const double> logits;
  for (std::size_t i = 0; i < length; ++i) {
    for (std::size_t b = 0; b < batch; ++b) step[b] = prompt[b * length + i];
    logits = dec.Step(step);
  }
  for (std::size_t i = 0; i < length; ++i) {
    for (std::size_t b = 0; b < batch; ++b) step[b] = Argmax(logits.subspan(b * vocab, vocab));
    logits = dec.Step(step);
  }
  stats.seconds = std::chrono::duration<double>(Clock::now() - start).count();
  stats.peak_elements = dec.AttentionStateElements();
  return stats;
}

double Median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

}  // namespace

std::vector<BenchRow> BenchSpeed(const Model& model, const BenchOptions& o) {
  if (o.reps < 3) throw ConfigError("bench needs reps >= 3");
  if (o.batch == 0) throw ConfigError("bench needs batch >= 1");
  if (o.lengths.empty()) throw ConfigError("bench needs at least one length");
  CheckMode(model, o.mode);
  for (std::size_t L : o.lengths) CheckLength(model, 2 * L);
  std::vector<BenchRow> rows;
  Rng rng(o.seed);
  for (std::size_t L : o.lengths) {
    TimedDecode(model, L, o.batch, rng);
    std::vector<double> rates;
    std::size_t elements = 0;
    for (std::size_t r = 0; r < o.reps; ++r) {
      const DecodeStats s = TimedDecode(model, L, o.batch, rng);
      const double rate = static_cast<double>(L * o.batch) / s.seconds;
      rates.push_back(rate);
      elements = s.peak_elements;
      rows.push_back({o.model_id, std::string(BenchModeName(o.mode)), L, o.batch, std::to_string(r),
                      rate, elements});
    }
    rows.push_back({o.model_id, std::string(BenchModeName(o.mode)), L, o.batch, "median",
                    Median(rates), elements});
  }
  return rows;
}

std::vector<MemoryPoint> BenchMemory(const Model& model, const std::vector<std::size_t>& lengths,
                                     BenchMode mode) {
  CheckMode(model, mode);
  std::vector<MemoryPoint> out;
  for (std::size_t L : lengths) {
    CheckLength(model, 2 * L);
    IncrementalDecoder dec(model, 1);
    std::size_t peak = 0;
    int token = 0;
    for (std::size_t i = 0; i < 2 * L; ++i) {
      auto logits = dec.Step(std::span<const int>(&token, 1));
      peak = std::max(peak, dec.AttentionStateElements());
      token = Argmax(logits);
    }
    out.push_back({L, peak});
  }
  return out;
}

std::vector<std::vector<double>> StepTimeRuns(const Model& model, std::size_t steps,
                                              std::size_t batch, BenchMode mode,
                                              std::uint64_t seed, std::size_t reps) {
  CheckMode(model, mode);
  CheckLength(model, steps);
  if (reps == 0) throw ConfigError("step timing needs reps >= 1");
  const std::size_t vocab = model.config().vocab;
  Rng rng(seed);
  std::vector<std::vector<double>> runs(reps, std::vector<double>(steps));
  for (auto& times : runs) {
    std::vector<int> tokens = Prompt(batch, vocab, rng);
    IncrementalDecoder dec(model, batch);
    for (std::size_t i = 0; i < steps; ++i) {
      const auto start = Clock::now();
      auto logits = dec.Step(tokens);
      for (std::size_t b = 0; b < batch; ++b) tokens[b] = Argmax(logits.subspan(b * vocab, vocab));
      times[i] = std::chrono::duration<double>(Clock::now() - start).count();
    }
  }
  return runs;
}

std::vector<double> StepTimes(const Model& model, std::size_t steps, std::size_t batch,
                              BenchMode mode, std::uint64_t seed, std::size_t reps) {
  const auto runs = StepTimeRuns(model, steps, batch, mode, seed, reps);
  std::vector<double> out(steps);
  std::vector<double> at(reps);
  for (std::size_t i = 0; i < steps; ++i) {
    for (std::size_t r = 0; r < reps; ++r) at[r] = runs[r][i];
    out[i] = Median(at);
  }
  return out;
}

SlopeFit FitSlope(const std::vector<double>& y, std::optional<std::size_t> max_lag) {
  const std::size_t n = y.size();
  if (n < 3) throw ContractError("slope fit needs at least 3 points");
  const std::size_t lag =
      std::min(n - 1, max_lag.value_or(static_cast<std::size_t>(std::sqrt(static_cast<double>(n)))));
  double mx = 0.0, my = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    mx += static_cast<double>(i);
    my += y[i];
  }
  mx /= static_cast<double>(n);
  my /= static_cast<double>(n);
  double sxx = 0.0, sxy = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double dx = static_cast<double>(i) - mx;
    sxx += dx * dx;
    sxy += dx * (y[i] - my);
  }
  const double slope = sxy / sxx;
  // u_i = x_i * e_i; long-run variance of sum(u) with Bartlett weights.
  std::vector<double> u(n);
  for (std::size_t i = 0; i < n; ++i) {
    const double dx = static_cast<double>(i) - mx;
    u[i] = dx * (y[i] - my - slope * dx);
  }
  double s = 0.0;
  for (double v : u) s += v * v;
  for (std::size_t l = 1; l <= lag; ++l) {
    const double w = 1.0 - static_cast<double>(l) / static_cast<double>(lag + 1);
    double c = 0.0;
    for (std::size_t i = l; i < n; ++i) c += u[i] * u[i - l];
    s += 2.0 * w * c;
  }
  const double dof = static_cast<double>(n) / static_cast<double>(n - 2);
  const double se = std::sqrt(std::max(0.0, s * dof)) / sxx;
  return {slope, slope - 1.96 * se, slope + 1.96 * se};
}

SlopeFit FitSlopeAcrossRuns(const std::vector<std::vector<double>>& runs) {
  if (runs.size() < 2) throw ContractError("slope test needs at least 2 runs");
  std::vector<double> slopes;
  for (const auto& r : runs) slopes.push_back(FitSlope(r, 0).slope);
  const double n = static_cast<double>(slopes.size());
  double mean = 0.0;
  for (double v : slopes) mean += v;
  mean /= n;
  double var = 0.0;
  for (double v : slopes) var += (v - mean) * (v - mean);
  var /= n - 1.0;
  // Two-sided 97.5% Student-t quantiles for 1..30 degrees of freedom.
  static constexpr double kT[] = {12.706, 4.303, 3.182, 2.776, 2.571, 2.447, 2.365, 2.306,
                                  2.262,  2.228, 2.201, 2.179, 2.160, 2.145, 2.131, 2.120,
                                  2.110,  2.101, 2.093, 2.086, 2.080, 2.074, 2.069, 2.064,
                                  2.060,  2.056, 2.052, 2.048, 2.045, 2.042};
  const std::size_t dof = slopes.size() - 1;
  const double t = dof <= 30 ? kT[dof - 1] : 1.96;
  const double half = t * std::sqrt(var / n);
  return {mean, mean - half, mean + half};
}

std::string BenchCsv(const std::vector<BenchRow>& rows) {
  std::ostringstream out;
  out << kBenchHeader << "\n";
  for (const auto& r : rows) {
    out << r.model << ',' << r.mode << ',' << r.length << ',' << r.batch << ',' << r.rep << ','
        << r.tokens_per_sec << ',' << r.attn_state_elements << "\n";
  }
  return out.str();
}

}  // namespace t2r
