#pragma once

// Perplexity under the "score only the tail of each window" protocol, and
// attention-fidelity measures between a converted model and its teacher.

#include <optional>
#include <span>
#include <string>
#include <vector>

#include "t2r/attention.h"
#include "t2r/model.h"

namespace t2r {

// Splits corpus into non-overlapping windows (window b reads
// tokens[bW, bW + W) and predicts tokens[bW + 1, bW + W + 1)) and returns
// exp of the mean NLL over the last predict_last positions of each window.
double EvalPerplexity(const Model& model, std::span<const int> corpus, std::size_t window,
                      std::size_t predict_last);

// Attention coefficients of every layer and head of a decoder-only model on
// one input.
AttentionTrace CollectTrace(const Model& model, std::span<const int> tokens,
                            std::string model_id = {}, std::string input_id = {});

// Mean Euclidean distance between corresponding rows: per head the row
// distances are averaged, then heads are averaged over every (sample, layer,
// head). `layers`, when given, restricts the comparison to those layers.
// ContractError naming the (layer, head) on any shape disagreement.
double AttentionDistance(const std::vector<AttentionTrace>& a, const std::vector<AttentionTrace>& b,
                         std::optional<std::vector<std::size_t>> layers = std::nullopt);
double AttentionDistance(const AttentionTrace& a, const AttentionTrace& b);

// Shannon entropy (natural log, 0 ln 0 = 0) per row, averaged like the
// distance. All-zero rows (a relu feature map can zero every feature of a
// query, leaving it no attention at all) are skipped; any other row whose
// sum is off by more than 1e-4 is a ContractError.
double AttentionEntropy(const std::vector<AttentionTrace>& traces);
double RowEntropy(std::span<const double> row);

struct AnalysisRow {
  std::string model_a;
  std::string model_b;
  std::size_t k = 0;
  // "distance" or "entropy".
  std::string metric;
  double value = 0.0;
  std::size_t n_samples = 0;
};

inline constexpr const char* kAnalysisHeader = "model_a,model_b,k,metric,value,n_samples";
std::string AnalysisCsv(const std::vector<AnalysisRow>& rows);

}  // namespace t2r
