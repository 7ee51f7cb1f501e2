#include "t2r/analysis.h"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "t2r/errors.h"
#include "t2r/ops.h"

namespace t2r {

double EvalPerplexity(const Model& model, std::span<const int> corpus, std::size_t window,
                      std::size_t predict_last) {
  if (window == 0 || predict_last == 0 || predict_last > window) {
    throw ContractError("need 1 <= predict_last <= window, got " + std::to_string(predict_last) +
                        " and " + std::to_string(window));
  }
  if (corpus.size() < window + 1) {
    throw InputError("corpus of " + std::to_string(corpus.size()) +
                     " tokens is shorter than one window of " + std::to_string(window) +
                     " plus its next token");
  }
  const std::size_t windows = (corpus.size() - 1) / window;
  const std::size_t chunk = 32;
  NoGradGuard guard;
  double nll = 0.0;
  std::size_t scored = 0;
  for (std::size_t first = 0; first < windows; first += chunk) {
    const std::size_t n = std::min(chunk, windows - first);
    std::vector<int> inputs, targets;
    for (std::size_t w = first; w < first + n; ++w) {
      for (std::size_t i = 0; i < window; ++i) {
        inputs.push_back(corpus[w * window + i]);
        targets.push_back(i >= window - predict_last ? corpus[w * window + i + 1] : kIgnoreTarget);
      }
    }
    const double mean = CrossEntropy(LmForward(model, inputs, n), targets).item();
    nll += mean * static_cast<double>(n * predict_last);
    scored += n * predict_last;
  }
  return std::exp(nll / static_cast<double>(scored));
}

AttentionTrace CollectTrace(const Model& model, std::span<const int> tokens, std::string model_id,
                            std::string input_id) {
  AttentionTrace trace;
  trace.model_id = std::move(model_id);
  trace.input_id = std::move(input_id);
  NoGradGuard guard;
  LmForward(model, tokens, 1, {nullptr, &trace});
  return trace;
}

namespace {

std::string Where(const HeadTrace& h) {
  return "(layer " + std::to_string(h.layer) + ", head " + std::to_string(h.head) + ", " +
         std::string(AttentionSiteName(h.site)) + ")";
}

double RowDistance(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
  return std::sqrt(s);
}

bool Selected(const std::optional<std::vector<std::size_t>>& layers, std::size_t layer) {
  return !layers || std::find(layers->begin(), layers->end(), layer) != layers->end();
}

}  // namespace

double AttentionDistance(const std::vector<AttentionTrace>& a, const std::vector<AttentionTrace>& b,
                         std::optional<std::vector<std::size_t>> layers) {
  if (a.size() != b.size()) {
    throw ContractError("trace sets differ in sample count: " + std::to_string(a.size()) + " vs " +
                        std::to_string(b.size()));
  }
  double total = 0.0;
  std::size_t heads = 0;
  for (std::size_t s = 0; s < a.size(); ++s) {
    if (a[s].heads.size() != b[s].heads.size()) {
      throw ContractError("sample " + std::to_string(s) + ": traces hold " +
                          std::to_string(a[s].heads.size()) + " and " +
                          std::to_string(b[s].heads.size()) + " heads");
    }
    for (std::size_t i = 0; i < a[s].heads.size(); ++i) {
      const HeadTrace& x = a[s].heads[i];
      const HeadTrace& y = b[s].heads[i];
      if (x.layer != y.layer || x.head != y.head || x.site != y.site || x.rows != y.rows ||
          x.cols != y.cols) {
        throw ContractError("attention traces disagree at " + Where(x) + " vs " + Where(y));
      }
      if (!Selected(layers, x.layer) || x.rows == 0) continue;
      double sum = 0.0;
      for (std::size_t r = 0; r < x.rows; ++r) sum += RowDistance(x.Row(r), y.Row(r));
      total += sum / static_cast<double>(x.rows);
      ++heads;
    }
  }
  if (heads == 0) throw ContractError("no attention heads to compare");
  return total / static_cast<double>(heads);
}

double AttentionDistance(const AttentionTrace& a, const AttentionTrace& b) {
  return AttentionDistance(std::vector<AttentionTrace>{a}, std::vector<AttentionTrace>{b});
}

double RowEntropy(std::span<const double> row) {
  double sum = 0.0, h = 0.0;
  for (double p : row) {
    sum += p;
    if (p > 0.0) h -= p * std::log(p);
  }
  if (std::abs(sum - 1.0) > 1e-4) {
    throw ContractError("attention row sums to " + std::to_string(sum) + ", not 1");
  }
  return h;
}

double AttentionEntropy(const std::vector<AttentionTrace>& traces) {
  double total = 0.0;
  std::size_t heads = 0;
  for (const auto& t : traces) {
    for (const HeadTrace& h : t.heads) {
      double sum = 0.0;
      std::size_t live = 0;
      for (std::size_t r = 0; r < h.rows; ++r) {
        const auto row = h.Row(r);
        if (std::all_of(row.begin(), row.end(), [](double p) { return p == 0.0; })) continue;
        try {
          sum += RowEntropy(row);
        } catch (const ContractError& e) {
          throw ContractError(std::string(e.what()) + " at " + Where(h) + ", row " + std::to_string(r));
        }
        ++live;
      }
      if (live == 0) continue;
      total += sum / static_cast<double>(live);
      ++heads;
    }
  }
  if (heads == 0) throw ContractError("no attention heads to average");
  return total / static_cast<double>(heads);
}

std::string AnalysisCsv(const std::vector<AnalysisRow>& rows) {
  std::ostringstream out;
  out.precision(10);
  out << kAnalysisHeader << "\n";
  for (const auto& r : rows) {
    out << r.model_a << ',' << r.model_b << ',' << r.k << ',' << r.metric << ',' << r.value << ','
        << r.n_samples << "\n";
  }
  return out.str();
}

}  // namespace t2r
