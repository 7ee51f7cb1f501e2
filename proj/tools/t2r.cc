// Command-line driver: train, convert, finetune, generate, eval, bench,
// analyze, matrix.

#include <cmath>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "t2r/analysis.h"
#include "t2r/bench.h"
#include "t2r/errors.h"
#include "t2r/io.h"
#include "t2r/recurrent.h"
#include "t2r/train.h"

namespace t2r {
namespace {

constexpr std::size_t kSyntheticCorpusBytes = 1'000'000;

// ---------------------------------------------------------------- options

struct TaskFlags {
  std::string task = "copy";
  std::size_t length = 12;
  std::size_t alphabet = 10;
  std::string corpus;
  std::size_t corpus_bytes = kSyntheticCorpusBytes;
  std::size_t window = 64;
  std::uint64_t task_seed = 0;
};

struct ModelFlags {
  std::size_t layers = 2;
  std::size_t heads = 4;
  std::size_t head_dim = 8;
  std::size_t ffn_dim = 128;
  std::size_t max_positions = 0;
  double dropout = 0.0;
  bool untied = false;
};

struct TrainFlags {
  long steps = 1000;
  std::size_t batch_tokens = 512;
  double lr = 1e-3;
  long warmup = 100;
  std::string schedule = "inverse-sqrt";
  std::string objective = "lm";
  double label_smoothing = 0.0;
  double beta1 = 0.9;
  double beta2 = 0.98;
  double grad_clip = 1.0;
  long eval_every = 0;
  std::size_t eval_sequences = 64;
};

const std::vector<std::string> kTasks{"copy", "reverse", "lookup", "lookup-table", "char-lm"};
const std::vector<std::string> kMaps{"mlp", "elu", "rfa"};

void AddTaskFlags(CLI::App* app, TaskFlags& f) {
  app->add_option("--task", f.task, "copy, reverse, lookup or char-lm")
      ->check(CLI::IsMember(kTasks))
      ->capture_default_str();
  app->add_option("--length", f.length, "payload length of sequence tasks")->capture_default_str();
  app->add_option("--alphabet", f.alphabet, "payload alphabet of sequence tasks")
      ->capture_default_str();
  app->add_option("--corpus", f.corpus, "char-lm text file (default: generated text)");
  app->add_option("--corpus-bytes", f.corpus_bytes, "size of the generated char-lm text")
      ->capture_default_str();
  app->add_option("--window", f.window, "char-lm window")->capture_default_str();
  app->add_option("--task-seed", f.task_seed, "seed of the task data")->capture_default_str();
}

void AddModelFlags(CLI::App* app, ModelFlags& f) {
  app->add_option("--layers", f.layers)->capture_default_str();
  app->add_option("--heads", f.heads)->capture_default_str();
  app->add_option("--head-dim", f.head_dim)->capture_default_str();
  app->add_option("--ffn-dim", f.ffn_dim)->capture_default_str();
  app->add_option("--max-positions", f.max_positions, "default: what the task needs");
  app->add_option("--dropout", f.dropout)->capture_default_str();
  app->add_flag("--untied-embeddings", f.untied);
}

void AddTrainFlags(CLI::App* app, TrainFlags& f, const std::string& prefix = "") {
  app->add_option("--" + prefix + "steps", f.steps)->capture_default_str();
  app->add_option("--" + prefix + "batch-tokens", f.batch_tokens)->capture_default_str();
  app->add_option("--" + prefix + "lr", f.lr)->capture_default_str();
  app->add_option("--" + prefix + "warmup", f.warmup)->capture_default_str();
  if (!prefix.empty()) return;
  app->add_option("--schedule", f.schedule)
      ->check(CLI::IsMember({"inverse-sqrt", "constant", "cosine"}))
      ->capture_default_str();
  app->add_option("--objective", f.objective)
      ->check(CLI::IsMember({"lm", "seq2seq"}))
      ->capture_default_str();
  app->add_option("--label-smoothing", f.label_smoothing)->capture_default_str();
  app->add_option("--beta1", f.beta1)->capture_default_str();
  app->add_option("--beta2", f.beta2)->capture_default_str();
  app->add_option("--grad-clip", f.grad_clip, "0 disables")->capture_default_str();
  app->add_option("--eval-every", f.eval_every)->capture_default_str();
  app->add_option("--eval-sequences", f.eval_sequences)->capture_default_str();
}

CLI::Option* AddSeed(CLI::App* app, std::uint64_t& seed) {
  return app->add_option("--seed", seed)->envname("T2R_SEED")->capture_default_str();
}

TrainConfig ToTrainConfig(const TrainFlags& f, std::uint64_t seed) {
  TrainConfig c;
  c.steps = f.steps;
  c.batch_tokens = f.batch_tokens;
  c.lr = f.lr;
  c.warmup = std::min(f.warmup, f.steps);
  c.schedule = ParseSchedule(f.schedule);
  c.seed = seed;
  c.objective = ParseObjective(f.objective);
  c.label_smoothing = f.label_smoothing;
  c.beta1 = f.beta1;
  c.beta2 = f.beta2;
  c.grad_clip = f.grad_clip;
  c.eval_every = f.eval_every;
  c.eval_sequences = f.eval_sequences;
  return c;
}

// ---------------------------------------------------------------- tasks

SyntheticTask BuildTask(const TaskFlags& f) {
  const TaskKind kind = ParseTask(f.task);
  if (kind != TaskKind::kCharLm) return SyntheticTask::Sequence(kind, f.length, f.alphabet, f.task_seed);
  std::vector<int> corpus = f.corpus.empty()
                                ? Tokenize(GenerateSyntheticCorpus(f.corpus_bytes, f.task_seed))
                                : LoadCorpus(f.corpus);
  return SyntheticTask::CharLm(std::move(corpus), f.window, f.task_seed);
}

void RecordTask(Model& model, const TaskFlags& f) {
  auto& m = model.metadata();
  m["task.kind"] = std::string(TaskName(ParseTask(f.task)));
  m["task.length"] = std::to_string(f.length);
  m["task.alphabet"] = std::to_string(f.alphabet);
  m["task.corpus"] = f.corpus;
  m["task.corpus_bytes"] = std::to_string(f.corpus_bytes);
  m["task.window"] = std::to_string(f.window);
  m["task.seed"] = std::to_string(f.task_seed);
}

// Task flags the user did not give are taken from the checkpoint.
void ResolveTask(const CLI::App* app, TaskFlags& f, const Model& model) {
  const auto& m = model.metadata();
  auto from = [&](const char* flag, const char* key, auto& field) {
    const auto it = m.find(key);
    const CLI::Option* opt = app->get_option_no_throw(flag);
    if ((opt != nullptr && opt->count() > 0) || it == m.end()) return;
    using T = std::decay_t<decltype(field)>;
    if constexpr (std::is_same_v<T, std::string>) {
      field = it->second;
    } else {
      field = static_cast<T>(std::stoull(it->second));
    }
  };
  from("--task", "task.kind", f.task);
  from("--length", "task.length", f.length);
  from("--alphabet", "task.alphabet", f.alphabet);
  from("--corpus", "task.corpus", f.corpus);
  from("--corpus-bytes", "task.corpus_bytes", f.corpus_bytes);
  from("--window", "task.window", f.window);
  from("--task-seed", "task.seed", f.task_seed);
}

Objective ModelObjective(const Model& model) {
  return model.config().seq2seq ? Objective::kSeq2Seq : Objective::kLm;
}

ModelConfig ToModelConfig(const ModelFlags& f, const SyntheticTask& task, Objective objective) {
  ModelConfig c;
  c.layers = f.layers;
  c.heads = f.heads;
  c.head_dim = f.head_dim;
  c.ffn_dim = f.ffn_dim;
  c.vocab = task.vocab();
  c.max_positions = f.max_positions > 0
                        ? f.max_positions
                        : std::max(task.decoder_length(objective), task.source_length(objective));
  c.seq2seq = objective == Objective::kSeq2Seq;
  c.dropout = f.dropout;
  c.tie_embeddings = !f.untied;
  c.Normalize();
  return c;
}

// ---------------------------------------------------------------- output

std::vector<std::string> SplitList(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream in(s);
  std::string item;
  while (std::getline(in, item, ',')) {
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

template <typename T>
std::vector<T> ParseList(const std::string& s, const char* what) {
  std::vector<T> out;
  for (const auto& item : SplitList(s)) {
    try {
      std::size_t used = 0;
      const unsigned long long v = std::stoull(item, &used);
      if (used != item.size()) throw std::invalid_argument(item);
      out.push_back(static_cast<T>(v));
    } catch (const std::logic_error&) {
      throw ConfigError(std::string("bad ") + what + " '" + item + "'");
    }
  }
  if (out.empty()) throw ConfigError(std::string("empty ") + what + " list");
  return out;
}

void Emit(const std::string& path, const std::string& text) {
  if (path.empty() || path == "-") {
    std::cout << text;
  } else {
    WriteFileAtomic(path, text);
  }
}

std::string Num(double v) {
  std::ostringstream s;
  s.precision(6);
  s << v;
  return s.str();
}

void Report(const char* what, const TrainResult& r, TaskKind kind) {
  std::cerr << what << ": steps " << r.losses.size() << ", train loss " << Num(r.initial_loss)
            << " -> " << Num(r.final_loss) << ", eval loss " << Num(r.eval.loss);
  if (kind != TaskKind::kCharLm) std::cerr << ", exact match " << Num(r.eval.exact_match);
  std::cerr << ", " << Num(r.seconds) << " s\n";
}

void WriteTrajectory(const std::string& path, const TrainResult& r) {
  if (path.empty()) return;
  std::ostringstream out;
  out << "step,eval_loss\n";
  for (const auto& [step, loss] : r.trajectory) out << step << ',' << loss << "\n";
  WriteFileAtomic(path, out.str());
}

std::vector<int> ParseIds(const std::string& s) {
  std::vector<int> out;
  for (const auto& v : ParseList<unsigned>(s, "token id")) out.push_back(static_cast<int>(v));
  return out;
}

std::string FormatIds(const std::vector<int>& ids) {
  std::string out;
  for (std::size_t i = 0; i < ids.size(); ++i) out += (i ? "," : "") + std::to_string(ids[i]);
  return out;
}

// ---------------------------------------------------------------- --config

// Expands `--config FILE` into the key=value flags it holds. They are placed
// ahead of the command line, and flags given explicitly are dropped from the
// file, so explicit flags win.
std::vector<std::string> ExpandConfig(std::vector<std::string> args) {
  std::size_t at = args.size();
  for (std::size_t i = 0; i < args.size(); ++i) {
    if (args[i] == "--config" || args[i].rfind("--config=", 0) == 0) {
      at = i;
      break;
    }
  }
  if (at == args.size()) return args;
  std::string path;
  if (args[at] == "--config") {
    if (at + 1 >= args.size()) throw CLI::ArgumentMismatch("--config needs a file");
    path = args[at + 1];
    args.erase(args.begin() + static_cast<long>(at), args.begin() + static_cast<long>(at) + 2);
  } else {
    path = args[at].substr(9);
    args.erase(args.begin() + static_cast<long>(at));
  }
  std::set<std::string> given;
  for (const auto& a : args) {
    if (a.rfind("--", 0) == 0) given.insert(a.substr(2, a.find('=') - 2));
  }
  std::ifstream in(path);
  if (!in) throw InputError("cannot read config file " + path);
  std::vector<std::string> extra;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.resize(hash);
    const auto trim = [](std::string s) {
      const auto b = s.find_first_not_of(" \t\r");
      const auto e = s.find_last_not_of(" \t\r");
      return b == std::string::npos ? std::string() : s.substr(b, e - b + 1);
    };
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw CLI::ConversionError(path + ":" + std::to_string(lineno) + ": expected key=value");
    }
    std::string key = trim(line.substr(0, eq));
    std::replace(key.begin(), key.end(), '_', '-');
    if (given.count(key)) continue;
    extra.push_back("--" + key + "=" + trim(line.substr(eq + 1)));
  }
  // args[0] is the program, args[1] the subcommand.
  const std::size_t insert = std::min<std::size_t>(2, args.size());
  args.insert(args.begin() + static_cast<long>(insert), extra.begin(), extra.end());
  return args;
}

// ---------------------------------------------------------------- commands

int Main(int argc, char** argv) {
  CLI::App app{"Convert pretrained softmax transformers into recurrent linear-attention models."};
  app.require_subcommand(1);
  app.set_help_all_flag("--help-all");
  app.footer("Any subcommand accepts --config FILE of key=value lines; explicit flags win.");

  std::uint64_t seed = 0;
  std::string ckpt, out;
  TaskFlags task;
  ModelFlags mflags;
  TrainFlags tflags;

  // train
  auto* train = app.add_subcommand("train", "pretrain a softmax model on a task");
  AddTaskFlags(train, task);
  AddModelFlags(train, mflags);
  AddTrainFlags(train, tflags);
  AddSeed(train, seed);
  train->add_option("--out", out, "checkpoint to write")->required();
  std::string trajectory;
  train->add_option("--trajectory", trajectory, "CSV of (step, eval loss)");

  // convert
  auto* convert = app.add_subcommand("convert", "swap softmax attention for linear attention");
  std::string feature_map = "mlp", sites = "both";
  std::size_t k_causal = 16, k_cross = 16;
  int keep_nth = 0;
  convert->add_option("--ckpt", ckpt)->required();
  convert->add_option("--feature-map", feature_map)->check(CLI::IsMember(kMaps))->capture_default_str();
  convert->add_option("--k-causal", k_causal)->capture_default_str();
  convert->add_option("--k-cross", k_cross)->capture_default_str();
  convert->add_option("--sites", sites)
      ->check(CLI::IsMember({"causal", "cross", "both"}))
      ->capture_default_str();
  convert->add_option("--keep-every-nth", keep_nth, "keep every nth layer (from the top) softmax");
  AddSeed(convert, seed);
  convert->add_option("--out", out)->required();

  // finetune
  auto* finetune = app.add_subcommand("finetune", "finetune a converted model");
  TrainFlags fflags;
  fflags.lr = 5e-4;
  bool freeze = false;
  finetune->add_option("--ckpt", ckpt)->required();
  AddTaskFlags(finetune, task);
  AddTrainFlags(finetune, fflags);
  finetune->add_flag("--freeze-feature-maps", freeze);
  AddSeed(finetune, seed);
  finetune->add_option("--out", out)->required();
  finetune->add_option("--trajectory", trajectory, "CSV of (step, eval loss)");

  // generate
  auto* generate = app.add_subcommand("generate", "greedy decoding");
  std::string prompt, src, mode = "recurrent";
  int n_steps = 32;
  generate->add_option("--ckpt", ckpt)->required();
  generate->add_option("--prompt", prompt, "text for byte models, else comma-separated ids");
  generate->add_option("--src", src, "comma-separated source ids (seq2seq)");
  generate->add_option("--steps", n_steps)->capture_default_str();
  generate->add_option("--mode", mode)->check(CLI::IsMember({"recurrent", "parallel"}))->capture_default_str();

  // eval
  auto* eval = app.add_subcommand("eval", "evaluate a checkpoint on its task");
  std::size_t predict_last = 0;
  eval->add_option("--ckpt", ckpt)->required();
  AddTaskFlags(eval, task);
  eval->add_option("--predict-last", predict_last, "char-lm: score the last N of each window (default window/2)");
  std::size_t eval_sequences = 256;
  eval->add_option("--sequences", eval_sequences)->capture_default_str();

  // bench
  auto* bench = app.add_subcommand("bench", "decoding throughput and attention-state memory");
  std::string lengths = "256,1024,2048", bench_mode = "recurrent";
  std::size_t batch = 16, reps = 3;
  bench->add_option("--ckpt", ckpt)->required();
  bench->add_option("--mode", bench_mode)->check(CLI::IsMember({"recurrent", "softmax"}))->capture_default_str();
  bench->add_option("--lengths", lengths)->capture_default_str();
  bench->add_option("--batch", batch)->capture_default_str();
  bench->add_option("--reps", reps)->capture_default_str();
  AddSeed(bench, seed);
  bench->add_option("--out", out, "CSV path (default stdout)");

  // analyze
  auto* analyze = app.add_subcommand("analyze", "attention distance and entropy against a teacher");
  std::string teacher;
  std::vector<std::string> students;
  std::size_t samples = 32, length = 0;
  std::string layers;
  analyze->add_option("--teacher", teacher)->required();
  analyze->add_option("--student", students, "converted checkpoints (repeatable)")->required();
  analyze->add_option("--samples", samples)->capture_default_str();
  analyze->add_option("--length", length, "char-lm input length (default: task window)");
  analyze->add_option("--layers", layers, "comma-separated layers to compare (default all)");
  AddSeed(analyze, seed);
  analyze->add_option("--out", out, "CSV path (default stdout)");

  // matrix
  auto* matrix = app.add_subcommand("matrix", "feature map x init x k experiment grid");
  TaskFlags mtask;
  ModelFlags mmodel;
  TrainFlags pflags, ftflags;
  pflags.lr = 3e-3;
  ftflags.lr = 1.5e-3;
  std::string maps = "mlp,elu,rfa", inits = "pretrain,random", ks = "16", seeds = "0";
  bool mfreeze = false;
  AddTaskFlags(matrix, mtask);
  AddModelFlags(matrix, mmodel);
  AddTrainFlags(matrix, pflags, "pretrain-");
  AddTrainFlags(matrix, ftflags, "finetune-");
  matrix->add_option("--feature-maps", maps)->capture_default_str();
  matrix->add_option("--inits", inits)->capture_default_str();
  matrix->add_option("--ks", ks)->capture_default_str();
  matrix->add_option("--seeds", seeds)->capture_default_str();
  matrix->add_flag("--freeze-feature-maps", mfreeze);
  matrix->add_option("--out", out, "CSV path (default stdout)");

  std::vector<std::string> args(argv, argv + argc);
  args = ExpandConfig(std::move(args));
  std::vector<const char*> cargs;
  for (const auto& a : args) cargs.push_back(a.c_str());
  try {
    app.parse(static_cast<int>(cargs.size()), cargs.data());
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }

  if (*train) {
    const SyntheticTask t = BuildTask(task);
    TrainConfig tc = ToTrainConfig(tflags, seed);
    const ModelConfig mc = ToModelConfig(mflags, t, tc.objective);
    TrainResult r = Pretrain(mc, tc, t);
    RecordTask(r.model, task);
    SaveCheckpoint(r.model, out);
    WriteTrajectory(trajectory, r);
    Report("train", r, t.kind());
    return 0;
  }

  if (*convert) {
    const Model source = LoadCheckpoint(ckpt);
    SwapSpec spec;
    spec.feature_map = ParseFeatureMap(feature_map);
    spec.k_causal = k_causal;
    spec.k_cross = k_cross;
    spec.sites = sites == "causal" ? SwapSites::kCausal : sites == "cross" ? SwapSites::kCross : SwapSites::kBoth;
    if (!source.config().seq2seq && sites == "both") spec.sites = SwapSites::kCausal;
    if (convert->count("--keep-every-nth")) spec.keep_every_nth_from_top = keep_nth;
    spec.seed = seed;
    Model converted = SwapAttention(source, spec);
    SaveCheckpoint(converted, out);
    std::cerr << "convert: " << source.ParameterCount() << " -> " << converted.ParameterCount()
              << " parameters\n";
    return 0;
  }

  if (*finetune) {
    const Model model = LoadCheckpoint(ckpt);
    ResolveTask(finetune, task, model);
    const SyntheticTask t = BuildTask(task);
    TrainConfig tc = ToTrainConfig(fflags, seed);
    tc.objective = ModelObjective(model);
    tc.freeze_feature_maps = freeze;
    TrainResult r = Finetune(model, tc, t);
    RecordTask(r.model, task);
    SaveCheckpoint(r.model, out);
    WriteTrajectory(trajectory, r);
    Report("finetune", r, t.kind());
    return 0;
  }

  if (*generate) {
    const Model model = LoadCheckpoint(ckpt);
    const DecodeMode m = mode == "recurrent" ? DecodeMode::kRecurrent : DecodeMode::kParallel;
    const bool bytes = model.config().vocab == 256;
    std::vector<int> result;
    if (model.config().seq2seq) {
      const int bos = static_cast<int>(model.config().vocab) - 1;
      result = GenerateSeq2Seq(model, ParseIds(src), bos, n_steps, m);
    } else {
      const std::vector<int> p = bytes ? Tokenize(prompt) : ParseIds(prompt);
      result = Generate(model, p, n_steps, m);
    }
    std::cout << (bytes ? Detokenize(result) : FormatIds(result)) << "\n";
    return 0;
  }

  if (*eval) {
    const Model model = LoadCheckpoint(ckpt);
    ResolveTask(eval, task, model);
    const SyntheticTask t = BuildTask(task);
    if (t.kind() == TaskKind::kCharLm) {
      const std::size_t last = predict_last > 0 ? predict_last : task.window / 2;
      const double ppl = EvalPerplexity(model, t.eval_tokens(), task.window, last);
      std::cout << "perplexity " << Num(ppl) << "\nunigram_perplexity "
                << Num(UnigramPerplexity(t.train_tokens(), t.eval_tokens())) << "\n";
    } else {
      const Evaluation e = Evaluate(model, t, ModelObjective(model), eval_sequences);
      std::cout << "loss " << Num(e.loss) << "\nexact_match " << Num(e.exact_match) << "\n";
    }
    return 0;
  }

  if (*bench) {
    const Model model = LoadCheckpoint(ckpt);
    BenchOptions o;
    o.model_id = ckpt;
    o.mode = ParseBenchMode(bench_mode);
    o.lengths = ParseList<std::size_t>(lengths, "length");
    o.batch = batch;
    o.reps = reps;
    o.seed = seed;
    Emit(out, BenchCsv(BenchSpeed(model, o)));
    return 0;
  }

  if (*analyze) {
    const Model t_model = LoadCheckpoint(teacher);
    if (t_model.config().seq2seq) throw ContractError("analyze supports decoder-only models");
    TaskFlags tf;
    ResolveTask(analyze, tf, t_model);
    const SyntheticTask t = BuildTask(tf);
    std::vector<std::vector<int>> inputs;
    if (t.kind() == TaskKind::kCharLm) {
      const std::size_t n = length > 0 ? length : tf.window;
      const auto& tokens = t.eval_tokens();
      if (tokens.size() < n) throw InputError("eval split shorter than the analysis length");
      Rng rng(seed);
      for (std::size_t s = 0; s < samples; ++s) {
        const std::size_t at = static_cast<std::size_t>(rng.UniformInt(static_cast<int>(tokens.size() - n + 1)));
        inputs.emplace_back(tokens.begin() + static_cast<long>(at), tokens.begin() + static_cast<long>(at + n));
      }
    } else {
      const Batch b = t.EvalSet(samples, Objective::kLm);
      const std::size_t n = b.inputs.size() / samples;
      for (std::size_t s = 0; s < samples; ++s) {
        inputs.emplace_back(b.inputs.begin() + static_cast<long>(s * n), b.inputs.begin() + static_cast<long>((s + 1) * n));
      }
    }
    std::optional<std::vector<std::size_t>> which;
    if (!layers.empty()) which = ParseList<std::size_t>(layers, "layer");
    auto traces = [&](const Model& m, const std::string& id) {
      std::vector<AttentionTrace> v;
      for (std::size_t s = 0; s < inputs.size(); ++s) v.push_back(CollectTrace(m, inputs[s], id, std::to_string(s)));
      return v;
    };
    const auto teacher_traces = traces(t_model, teacher);
    std::vector<AnalysisRow> rows;
    rows.push_back({teacher, teacher, 0, "entropy", AttentionEntropy(teacher_traces), inputs.size()});
    for (const auto& path : students) {
      const Model s_model = LoadCheckpoint(path);
      const auto st = traces(s_model, path);
      const std::size_t k = s_model.config().k_causal;
      rows.push_back({teacher, path, k, "distance", AttentionDistance(teacher_traces, st, which), inputs.size()});
      rows.push_back({path, path, k, "entropy", AttentionEntropy(st), inputs.size()});
    }
    Emit(out, AnalysisCsv(rows));
    return 0;
  }

  if (*matrix) {
    const SyntheticTask t = BuildTask(mtask);
    MatrixPlan plan;
    plan.pretrain = ToTrainConfig(pflags, 0);
    plan.finetune = ToTrainConfig(ftflags, 0);
    plan.finetune.freeze_feature_maps = mfreeze;
    plan.model = ToModelConfig(mmodel, t, Objective::kLm);
    std::vector<FeatureMapKind> fms;
    for (const auto& m : SplitList(maps)) fms.push_back(ParseFeatureMap(m));
    std::vector<InitKind> iks;
    for (const auto& i : SplitList(inits)) iks.push_back(ParseInit(i));
    plan.cells = EnumerateCells(fms, iks, ParseList<std::size_t>(ks, "k"),
                                ParseList<std::uint64_t>(seeds, "seed"));
    for (auto& c : plan.cells) c.freeze_feature_maps = mfreeze;
    Emit(out, ResultsCsv(RunMatrix(plan, t)));
    return 0;
  }
  return 2;
}

}  // namespace
}  // namespace t2r

int main(int argc, char** argv) {
  try {
    return t2r::Main(argc, argv);
  } catch (const CLI::Error& e) {
    std::cerr << "t2r: " << e.what() << "\n";
    return 2;
  } catch (const t2r::DivergenceError& e) {
    std::cerr << "t2r: diverged: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "t2r: error: " << e.what() << "\n";
    return 1;
  }
}
