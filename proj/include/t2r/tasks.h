#pragma once

// Desk-scale training tasks. Sequence tasks map a random payload p of length n
// over a small alphabet to a target t of the same length:
//   copy: t = p, reverse: t_j = p_(n-1-j), lookup: t_j = f(p_j) for a fixed
//   random permutation f of the alphabet.
// Decoder-only models see [p, SEP, t] and are scored on the t positions only;
// seq2seq models see src = p and decode [BOS, t] left to right.
// char-lm is next-byte prediction on a corpus split 90/10 into train/eval.

#include <cstdint>
#include <string>
#include <vector>

#include "t2r/random.h"

namespace t2r {

enum class TaskKind { kCopy, kReverse, kLookup, kCharLm };
std::string_view TaskName(TaskKind kind);
TaskKind ParseTask(std::string_view name);

enum class Objective { kLm, kSeq2Seq };
std::string_view ObjectiveName(Objective o);
Objective ParseObjective(std::string_view name);

struct Batch {
  std::size_t batch = 0;
  // Decoder input [batch * len] (LM form, or the target side for seq2seq).
  std::vector<int> inputs;
  // Same layout; kIgnoreTarget where no loss applies.
  std::vector<int> targets;
  // Seq2seq source [batch * src_len]; empty in LM form.
  std::vector<int> src;
};

class SyntheticTask {
 public:
  // Sequence tasks.
  static SyntheticTask Sequence(TaskKind kind, std::size_t length, std::size_t alphabet,
                                std::uint64_t seed);
  // Next-byte prediction over corpus bytes; windows of `window` tokens.
  static SyntheticTask CharLm(std::vector<int> corpus, std::size_t window, std::uint64_t seed);

  TaskKind kind() const { return kind_; }
  std::size_t vocab() const;
  std::size_t alphabet() const { return alphabet_; }
  std::size_t length() const { return length_; }
  int sep() const { return static_cast<int>(alphabet_); }
  int bos() const { return static_cast<int>(alphabet_) + 1; }
  // Decoder positions per sequence for the objective.
  std::size_t decoder_length(Objective o) const;
  std::size_t source_length(Objective o) const;

  // Deterministic for a given rng state.
  Batch Sample(std::size_t sequences, Objective objective, Rng& rng) const;
  // Fixed evaluation set, identical on every call.
  Batch EvalSet(std::size_t sequences, Objective objective) const;

  // The target for payload p.
  std::vector<int> Target(const std::vector<int>& payload) const;

  const std::vector<int>& train_tokens() const { return train_; }
  const std::vector<int>& eval_tokens() const { return eval_; }
  std::uint64_t seed() const { return seed_; }

 private:
  Batch Build(const std::vector<std::vector<int>>& payloads, Objective objective) const;

  TaskKind kind_ = TaskKind::kCopy;
  std::size_t length_ = 0;
  std::size_t alphabet_ = 0;
  std::uint64_t seed_ = 0;
  std::vector<int> table_;
  std::vector<int> train_, eval_;
};

// Deterministic English-like text of about `bytes` bytes: Zipf-distributed
// pseudo-words with Markov word-to-word preferences, punctuation and
// paragraphs. Stands in for a public-domain book when none is available.
std::string GenerateSyntheticCorpus(std::size_t bytes, std::uint64_t seed);

// Perplexity of the corpus's own unigram distribution (add-one smoothed over
// 256 byte values), evaluated on `eval`.
double UnigramPerplexity(const std::vector<int>& train, const std::vector<int>& eval);

}  // namespace t2r
