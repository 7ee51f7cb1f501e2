#include "t2r/tasks.h"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "t2r/errors.h"
#include "t2r/ops.h"

namespace t2r {

std::string_view TaskName(TaskKind kind) {
  switch (kind) {
    case TaskKind::kCopy:
      return "copy";
    case TaskKind::kReverse:
      return "reverse";
    case TaskKind::kLookup:
      return "lookup";
    case TaskKind::kCharLm:
      return "char-lm";
  }
  return "?";
}

TaskKind ParseTask(std::string_view name) {
  if (name == "copy") return TaskKind::kCopy;
  if (name == "reverse") return TaskKind::kReverse;
  if (name == "lookup" || name == "lookup-table") return TaskKind::kLookup;
  if (name == "char-lm") return TaskKind::kCharLm;
  throw ConfigError("unknown task '" + std::string(name) + "' (copy, reverse, lookup, char-lm)");
}

std::string_view ObjectiveName(Objective o) { return o == Objective::kLm ? "lm" : "seq2seq"; }

Objective ParseObjective(std::string_view name) {
  if (name == "lm") return Objective::kLm;
  if (name == "seq2seq") return Objective::kSeq2Seq;
  throw ConfigError("unknown objective '" + std::string(name) + "' (lm, seq2seq)");
}

SyntheticTask SyntheticTask::Sequence(TaskKind kind, std::size_t length, std::size_t alphabet,
                                      std::uint64_t seed) {
  if (kind == TaskKind::kCharLm) throw ConfigError("char-lm needs a corpus");
  if (length == 0 || alphabet < 2) throw ConfigError("sequence tasks need length >= 1, alphabet >= 2");
  SyntheticTask t;
  t.kind_ = kind;
  t.length_ = length;
  t.alphabet_ = alphabet;
  t.seed_ = seed;
  if (kind == TaskKind::kLookup) {
    t.table_.resize(alphabet);
    std::iota(t.table_.begin(), t.table_.end(), 0);
    Rng rng(seed ^ 0x7ab1e5eedull);
    std::shuffle(t.table_.begin(), t.table_.end(), rng.engine());
  }
  return t;
}

SyntheticTask SyntheticTask::CharLm(std::vector<int> corpus, std::size_t window, std::uint64_t seed) {
  if (window < 2) throw ConfigError("char-lm window must be >= 2");
  const std::size_t split = corpus.size() / 10 * 9;
  if (split < window + 1 || corpus.size() - split < window + 1) {
    throw InputError("corpus of " + std::to_string(corpus.size()) +
                     " bytes is too short for window " + std::to_string(window));
  }
  SyntheticTask t;
  t.kind_ = TaskKind::kCharLm;
  t.length_ = window;
  t.alphabet_ = 256;
  t.seed_ = seed;
  t.train_.assign(corpus.begin(), corpus.begin() + static_cast<long>(split));
  t.eval_.assign(corpus.begin() + static_cast<long>(split), corpus.end());
  return t;
}

std::size_t SyntheticTask::vocab() const {
  return kind_ == TaskKind::kCharLm ? 256 : alphabet_ + 2;
}

std::size_t SyntheticTask::decoder_length(Objective o) const {
  if (kind_ == TaskKind::kCharLm) return length_;
  return o == Objective::kLm ? 2 * length_ : length_;
}

std::size_t SyntheticTask::source_length(Objective o) const {
  return (kind_ != TaskKind::kCharLm && o == Objective::kSeq2Seq) ? length_ : 0;
}

std::vector<int> SyntheticTask::Target(const std::vector<int>& p) const {
  std::vector<int> t(p.size());
  for (std::size_t j = 0; j < p.size(); ++j) {
    switch (kind_) {
      case TaskKind::kCopy:
        t[j] = p[j];
        break;
      case TaskKind::kReverse:
        t[j] = p[p.size() - 1 - j];
        break;
      case TaskKind::kLookup:
        t[j] = table_[static_cast<std::size_t>(p[j])];
        break;
      case TaskKind::kCharLm:
        throw ContractError("char-lm has no payload targets");
    }
  }
  return t;
}

Batch SyntheticTask::Build(const std::vector<std::vector<int>>& payloads, Objective objective) const {
  Batch b;
  b.batch = payloads.size();
  const std::size_t n = length_;
  for (const auto& p : payloads) {
    const auto t = Target(p);
    if (objective == Objective::kLm) {
      // [p, SEP, t] shifted by one; loss only where t is predicted.
      std::vector<int> s(p);
      s.push_back(sep());
      s.insert(s.end(), t.begin(), t.end());
      for (std::size_t i = 0; i < 2 * n; ++i) {
        b.inputs.push_back(s[i]);
        b.targets.push_back(i >= n ? s[i + 1] : kIgnoreTarget);
      }
    } else {
      b.src.insert(b.src.end(), p.begin(), p.end());
      b.inputs.push_back(bos());
      b.inputs.insert(b.inputs.end(), t.begin(), t.end() - 1);
      b.targets.insert(b.targets.end(), t.begin(), t.end());
    }
  }
  return b;
}

Batch SyntheticTask::Sample(std::size_t sequences, Objective objective, Rng& rng) const {
  if (kind_ == TaskKind::kCharLm) {
    if (objective != Objective::kLm) throw ConfigError("char-lm trains decoder-only models");
    Batch b;
    b.batch = sequences;
    const int starts = static_cast<int>(train_.size() - length_);
    for (std::size_t s = 0; s < sequences; ++s) {
      const auto at = static_cast<std::size_t>(rng.UniformInt(starts));
      b.inputs.insert(b.inputs.end(), train_.begin() + static_cast<long>(at),
                      train_.begin() + static_cast<long>(at + length_));
      b.targets.insert(b.targets.end(), train_.begin() + static_cast<long>(at + 1),
                       train_.begin() + static_cast<long>(at + length_ + 1));
    }
    return b;
  }
  std::vector<std::vector<int>> payloads(sequences, std::vector<int>(length_));
  for (auto& p : payloads) {
    for (int& x : p) x = rng.UniformInt(static_cast<int>(alphabet_));
  }
  return Build(payloads, objective);
}

Batch SyntheticTask::EvalSet(std::size_t sequences, Objective objective) const {
  if (kind_ == TaskKind::kCharLm) {
    if (objective != Objective::kLm) throw ConfigError("char-lm evaluates decoder-only models");
    // Non-overlapping windows of the held-out split, scored on their last half.
    const std::size_t available = (eval_.size() - 1) / length_;
    const std::size_t count = std::min(sequences, available);
    Batch b;
    b.batch = count;
    for (std::size_t w = 0; w < count; ++w) {
      for (std::size_t i = 0; i < length_; ++i) {
        const std::size_t at = w * length_ + i;
        b.inputs.push_back(eval_[at]);
        b.targets.push_back(i >= length_ - length_ / 2 ? eval_[at + 1] : kIgnoreTarget);
      }
    }
    return b;
  }
  Rng rng(seed_ ^ 0xe7a15e7ull);
  return Sample(sequences, objective, rng);
}

// ---------------------------------------------------------------------------
// Synthetic corpus

namespace {

const char* const kOnsets[] = {"b", "c", "d", "f", "g", "h", "l", "m", "n", "p", "r",
                               "s", "t", "v", "w", "th", "st", "br", "ch", "sh", "gr", ""};
const char* const kNuclei[] = {"a", "e", "i", "o", "u", "ea", "ou", "ai", "y"};
const char* const kCodas[] = {"", "", "n", "r", "s", "t", "nd", "ng", "ll", "st", "rk"};

template <std::size_t N>
const char* Pick(const char* const (&arr)[N], Rng& rng) {
  return arr[rng.UniformInt(static_cast<int>(N))];
}

}  // namespace

std::string GenerateSyntheticCorpus(std::size_t bytes, std::uint64_t seed) {
  Rng rng(seed);
  const int n_words = 400;
  std::vector<std::string> words;
  while (words.size() < static_cast<std::size_t>(n_words)) {
    std::string w;
    const int syllables = 1 + rng.UniformInt(3);
    for (int s = 0; s < syllables; ++s) {
      w += Pick(kOnsets, rng);
      w += Pick(kNuclei, rng);
      if (s + 1 == syllables || rng.Uniform() < 0.3) w += Pick(kCodas, rng);
    }
    if (std::find(words.begin(), words.end(), w) == words.end()) words.push_back(w);
  }
  // Zipf weights for the unconditional draw; each word also prefers a short
  // list of successors.
  std::vector<double> zipf(n_words);
  for (int i = 0; i < n_words; ++i) zipf[i] = 1.0 / (i + 1.0);
  std::discrete_distribution<int> unigram(zipf.begin(), zipf.end());
  std::vector<std::vector<int>> successors(n_words);
  for (auto& s : successors) {
    for (int j = 0; j < 4; ++j) s.push_back(unigram(rng.engine()));
  }

  std::string out;
  out.reserve(bytes + 64);
  int prev = unigram(rng.engine());
  while (out.size() < bytes) {
    const int sentence = 4 + rng.UniformInt(9);
    for (int i = 0; i < sentence; ++i) {
      const int w = rng.Uniform() < 0.6 ? successors[prev][rng.UniformInt(4)] : unigram(rng.engine());
      std::string word = words[w];
      if (i == 0) word[0] = static_cast<char>(std::toupper(static_cast<unsigned char>(word[0])));
      out += word;
      if (i + 1 < sentence) out += (rng.Uniform() < 0.08) ? ", " : " ";
      prev = w;
    }
    out += rng.Uniform() < 0.85 ? ". " : (rng.Uniform() < 0.5 ? "? " : "! ");
    if (rng.Uniform() < 0.1) out += "\n\n";
  }
  out.resize(bytes);
  return out;
}

double UnigramPerplexity(const std::vector<int>& train, const std::vector<int>& eval) {
  if (eval.empty()) throw InputError("unigram perplexity of an empty evaluation set");
  std::vector<double> counts(256, 1.0);
  for (int t : train) counts.at(static_cast<std::size_t>(t)) += 1.0;
  const double total = static_cast<double>(train.size()) + 256.0;
  double nll = 0.0;
  for (int t : eval) nll -= std::log(counts.at(static_cast<std::size_t>(t)) / total);
  return std::exp(nll / static_cast<double>(eval.size()));
}

}  // namespace t2r
