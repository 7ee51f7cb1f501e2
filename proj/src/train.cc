#include "t2r/train.h"

#include <chrono>
#include <cmath>
#include <limits>
#include <map>
#include <sstream>

#include "t2r/errors.h"
#include "t2r/ops.h"
#include "t2r/optim.h"

namespace t2r {

std::string_view ScheduleName(Schedule s) {
  switch (s) {
    case Schedule::kInverseSqrt:
      return "inverse-sqrt";
    case Schedule::kConstant:
      return "constant";
    case Schedule::kCosine:
      return "cosine";
  }
  return "?";
}

Schedule ParseSchedule(std::string_view name) {
  if (name == "inverse-sqrt") return Schedule::kInverseSqrt;
  if (name == "constant") return Schedule::kConstant;
  if (name == "cosine") return Schedule::kCosine;
  throw ConfigError("unknown schedule '" + std::string(name) + "' (inverse-sqrt, constant, cosine)");
}

std::string_view InitName(InitKind k) { return k == InitKind::kPretrain ? "pretrain" : "random"; }

InitKind ParseInit(std::string_view name) {
  if (name == "pretrain") return InitKind::kPretrain;
  if (name == "random") return InitKind::kRandom;
  throw ConfigError("unknown init '" + std::string(name) + "' (pretrain, random)");
}

void TrainConfig::Validate() const {
  if (steps < 0) throw ConfigError("steps must be >= 0");
  if (!(lr > 0.0)) throw ConfigError("lr must be > 0");
  if (warmup < 0 || warmup > steps) throw ConfigError("warmup must lie in [0, steps]");
  if (batch_tokens == 0) throw ConfigError("batch_tokens must be >= 1");
  if (label_smoothing < 0.0 || label_smoothing >= 1.0) {
    throw ConfigError("label_smoothing must lie in [0, 1)");
  }
  if (grad_clip < 0.0) throw ConfigError("grad_clip must be >= 0");
  if (eval_every < 0) throw ConfigError("eval_every must be >= 0");
}

double LearningRate(const TrainConfig& c, long step) {
  const double s = static_cast<double>(std::max(step, 1L));
  const double w = static_cast<double>(c.warmup);
  const double ramp = c.warmup > 0 ? std::min(1.0, s / w) : 1.0;
  switch (c.schedule) {
    case Schedule::kConstant:
      return c.lr * ramp;
    case Schedule::kInverseSqrt:
      if (c.warmup == 0) return c.lr / std::sqrt(s);
      return c.lr * std::min(s / w, std::sqrt(w / s));
    case Schedule::kCosine: {
      if (s <= w) return c.lr * ramp;
      const double span = std::max(1.0, static_cast<double>(c.steps) - w);
      const double progress = std::min(1.0, (s - w) / span);
      return c.lr * 0.5 * (1.0 + std::cos(M_PI * progress));
    }
  }
  return c.lr;
}

Tensor Loss(const Tensor& logits, std::span<const int> targets, double label_smoothing) {
  return CrossEntropy(logits, targets, label_smoothing);
}

namespace {

Tensor Forward(const Model& model, const Batch& b, Objective objective, ForwardOptions options) {
  if (objective == Objective::kSeq2Seq) {
    return Seq2SeqForward(model, b.src, b.inputs, b.batch, options);
  }
  return LmForward(model, b.inputs, b.batch, options);
}

void CheckCompatible(const Model& model, const SyntheticTask& task, Objective objective) {
  const ModelConfig& c = model.config();
  if ((objective == Objective::kSeq2Seq) != c.seq2seq) {
    throw ConfigError(std::string("objective ") + std::string(ObjectiveName(objective)) +
                      " does not match a " + (c.seq2seq ? "seq2seq" : "decoder-only") + " model");
  }
  if (task.vocab() > c.vocab) {
    throw ConfigError("task needs vocab " + std::to_string(task.vocab()) + ", model has " +
                      std::to_string(c.vocab));
  }
  const std::size_t len = std::max(task.decoder_length(objective), task.source_length(objective));
  if (len > c.max_positions) {
    throw ConfigError("task sequences of " + std::to_string(len) + " positions exceed max_positions " +
                      std::to_string(c.max_positions));
  }
}

bool IsFeatureMapParam(const std::string& name) { return name.find(".phi.") != std::string::npos; }

}  // namespace

Evaluation Evaluate(const Model& model, const SyntheticTask& task, Objective objective,
                    std::size_t sequences) {
  CheckCompatible(model, task, objective);
  const Batch all = task.EvalSet(sequences, objective);
  const std::size_t len = task.decoder_length(objective);
  const std::size_t src_len = task.source_length(objective);
  const std::size_t vocab = model.config().vocab;
  NoGradGuard guard;
  double nll = 0.0;
  std::size_t scored = 0, exact = 0;
  const std::size_t chunk = 32;
  for (std::size_t first = 0; first < all.batch; first += chunk) {
    const std::size_t n = std::min(chunk, all.batch - first);
    Batch b;
    b.batch = n;
    b.inputs.assign(all.inputs.begin() + first * len, all.inputs.begin() + (first + n) * len);
    b.targets.assign(all.targets.begin() + first * len, all.targets.begin() + (first + n) * len);
    if (src_len) b.src.assign(all.src.begin() + first * src_len, all.src.begin() + (first + n) * src_len);
    const Tensor logits = Forward(model, b, objective, {});
    std::size_t count = 0;
    for (int t : b.targets) count += t != kIgnoreTarget;
    if (count == 0) continue;
    nll += CrossEntropy(logits, b.targets).item() * static_cast<double>(count);
    scored += count;
    for (std::size_t s = 0; s < n; ++s) {
      bool ok = true;
      for (std::size_t i = 0; i < len && ok; ++i) {
        const int t = b.targets[s * len + i];
        if (t == kIgnoreTarget) continue;
        const auto row = logits.data().subspan((s * len + i) * vocab, vocab);
        ok = std::max_element(row.begin(), row.end()) - row.begin() == t;
      }
      exact += ok;
    }
  }
  if (scored == 0) throw InputError("evaluation set has no scored positions");
  Evaluation e;
  e.loss = nll / static_cast<double>(scored);
  e.sequences = all.batch;
  e.exact_match = task.kind() == TaskKind::kCharLm
                      ? std::numeric_limits<double>::quiet_NaN()
                      : static_cast<double>(exact) / static_cast<double>(all.batch);
  return e;
}

TrainResult Train(const Model& model, const TrainConfig& config, const SyntheticTask& task) {
  config.Validate();
  CheckCompatible(model, task, config.objective);
  TrainResult r;
  r.model = model.Clone();
  std::vector<NamedTensor> params;
  for (auto& nt : r.model.Trainable()) {
    if (config.freeze_feature_maps && IsFeatureMapParam(nt.name)) continue;
    params.push_back(nt);
  }
  Adam opt(params, {config.beta1, config.beta2, 1e-8});
  Rng rng(config.seed);
  Rng dropout_rng(config.seed ^ 0xd40f00dull);
  const std::size_t len = task.decoder_length(config.objective);
  const std::size_t seqs = std::max<std::size_t>(1, config.batch_tokens / len);
  const auto start = std::chrono::steady_clock::now();
  long runaway = 0;
  for (long step = 1; step <= config.steps; ++step) {
    const Batch b = task.Sample(seqs, config.objective, rng);
    Tape::Current().Clear();
    const Tensor loss =
        Loss(Forward(r.model, b, config.objective, {&dropout_rng, nullptr}), b.targets,
             config.label_smoothing);
    const double value = loss.item();
    if (!std::isfinite(value)) {
      Tape::Current().Clear();
      throw DivergenceError("training loss is not finite at step " + std::to_string(step), step);
    }
    if (step == 1) r.initial_loss = value;
    runaway = value > 10.0 * r.initial_loss ? runaway + 1 : 0;
    if (runaway >= 100) {
      Tape::Current().Clear();
      throw DivergenceError("training loss above 10x its initial value for 100 steps, at step " +
                                std::to_string(step),
                            step);
    }
    r.losses.push_back(value);
    Backward(loss);
    if (config.grad_clip > 0.0) opt.ClipGradNorm(config.grad_clip);
    try {
      opt.Step(LearningRate(config, step));
    } catch (const DivergenceError& e) {
      throw DivergenceError(std::string(e.what()) + " at step " + std::to_string(step), step);
    }
    opt.ZeroGrad();
    if (config.eval_every > 0 && step % config.eval_every == 0) {
      r.trajectory.emplace_back(step, Evaluate(r.model, task, config.objective, config.eval_sequences).loss);
    }
  }
  r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  r.final_loss = r.losses.empty() ? 0.0 : r.losses.back();
  r.eval = Evaluate(r.model, task, config.objective, config.eval_sequences);

  auto& meta = r.model.metadata();
  long prior = 0;
  if (auto it = meta.find("step"); it != meta.end()) prior = std::stol(it->second);
  std::ostringstream loss_text;
  loss_text.precision(17);
  loss_text << r.eval.loss;
  meta["step"] = std::to_string(prior + config.steps);
  meta["seed"] = std::to_string(config.seed);
  meta["objective"] = std::string(ObjectiveName(config.objective));
  meta["task"] = std::string(TaskName(task.kind()));
  meta["eval_loss"] = loss_text.str();
  return r;
}

TrainResult Pretrain(const ModelConfig& config, const TrainConfig& train, const SyntheticTask& task) {
  ModelConfig c = config;
  c.Normalize();
  for (AttentionKind k : c.causal_kinds) {
    if (IsLinear(k)) throw ContractError("pretraining expects softmax attention everywhere");
  }
  for (AttentionKind k : c.cross_kinds) {
    if (IsLinear(k)) throw ContractError("pretraining expects softmax attention everywhere");
  }
  if (train.steps == 0) throw ConfigError("pretraining needs steps >= 1");
  return Train(Model::Init(c, train.seed), train, task);
}

TrainResult Finetune(const Model& converted, const TrainConfig& train, const SyntheticTask& task) {
  const ModelConfig& c = converted.config();
  bool any = false;
  for (AttentionKind k : c.causal_kinds) any |= IsLinear(k);
  for (AttentionKind k : c.cross_kinds) any |= IsLinear(k);
  if (!any) throw ContractError("finetuning expects at least one linear attention site");
  return Train(converted, train, task);
}

// ---------------------------------------------------------------------------
// Matrix

std::vector<MatrixCell> EnumerateCells(const std::vector<FeatureMapKind>& maps,
                                       const std::vector<InitKind>& inits,
                                       const std::vector<std::size_t>& ks,
                                       const std::vector<std::uint64_t>& seeds) {
  std::vector<MatrixCell> cells;
  for (FeatureMapKind m : maps) {
    for (InitKind init : inits) {
      for (std::size_t k : ks) {
        for (std::uint64_t seed : seeds) {
          MatrixCell c;
          c.feature_map = m;
          c.init = init;
          c.k_causal = k;
          c.k_cross = k;
          c.seed = seed;
          c.id = std::string(FeatureMapName(m)) + "-" + std::string(InitName(init)) + "-k" +
                 std::to_string(k) + "-s" + std::to_string(seed);
          cells.push_back(std::move(c));
        }
      }
    }
  }
  return cells;
}

std::vector<MatrixRow> RunMatrix(const MatrixPlan& plan, const SyntheticTask& task,
                                 TeacherCache* cache) {
  TeacherCache local;
  TeacherCache& teachers = cache != nullptr ? *cache : local;
  std::vector<MatrixRow> rows;
  for (const MatrixCell& cell : plan.cells) {
    MatrixRow row;
    row.cell_id = cell.id;
    row.feature_map = std::string(FeatureMapName(cell.feature_map));
    row.init = std::string(InitName(cell.init));
    // elu keeps the head dimension whatever k was asked for.
    const std::size_t k_self =
        cell.feature_map == FeatureMapKind::kElu ? plan.model.head_dim : cell.k_causal;
    const std::size_t k_cross =
        cell.feature_map == FeatureMapKind::kElu ? plan.model.head_dim : cell.k_cross;
    row.k_causal = k_self;
    row.k_cross = plan.model.seq2seq ? k_cross : 0;
    row.steps = plan.finetune.steps;
    TrainConfig ft = plan.finetune;
    ft.seed = cell.seed;
    ft.freeze_feature_maps = cell.freeze_feature_maps;
    try {
      Model start;
      if (cell.init == InitKind::kPretrain) {
        auto it = teachers.find(cell.seed);
        if (it == teachers.end()) {
          TrainConfig pt = plan.pretrain;
          pt.seed = cell.seed;
          std::optional<Model> teacher;
          try {
            teacher = Pretrain(plan.model, pt, task).model;
          } catch (const DivergenceError&) {
          }
          it = teachers.emplace(cell.seed, std::move(teacher)).first;
        }
        if (!it->second) throw DivergenceError("teacher diverged", 0);
        SwapSpec spec;
        spec.feature_map = cell.feature_map;
        spec.k_causal = k_self;
        spec.k_cross = k_cross;
        spec.seed = cell.seed + 7919;
        start = SwapAttention(*it->second, spec);
      } else {
        ModelConfig c = plan.model;
        c.Normalize();
        const AttentionKind kind = ToAttentionKind(cell.feature_map);
        c.causal_kinds.assign(c.layers, kind);
        if (c.seq2seq) c.cross_kinds.assign(c.layers, kind);
        c.k_causal = k_self;
        c.k_cross = k_cross;
        start = Model::Init(c, cell.seed + 104729);
      }
      row.param_count = start.ParameterCount();
      TrainResult r = Finetune(start, ft, task);
      row.eval_metric = r.eval.loss;
      row.train_seconds = r.seconds;
      row.status = "ok";
    } catch (const DivergenceError&) {
      row.eval_metric = std::numeric_limits<double>::quiet_NaN();
      row.status = "diverged";
    }
    rows.push_back(std::move(row));
  }
  return rows;
}

std::string ResultsCsv(const std::vector<MatrixRow>& rows) {
  std::ostringstream out;
  out << kResultsHeader << "\n";
  for (const MatrixRow& r : rows) {
    out << r.cell_id << ',' << r.feature_map << ',' << r.init << ',' << r.k_causal << ','
        << r.k_cross << ',' << r.steps << ',';
    if (std::isnan(r.eval_metric)) {
      out << "nan";
    } else {
      out << r.eval_metric;
    }
    out << ',' << r.train_seconds << ',' << r.param_count << ',' << r.status << "\n";
  }
  return out.str();
}

}  // namespace t2r
