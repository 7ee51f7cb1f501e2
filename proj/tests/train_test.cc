#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <cstring>

#include "t2r/errors.h"
#include "t2r/ops.h"
#include "t2r/recurrent.h"
#include "t2r/train.h"

using namespace t2r;

namespace {

ModelConfig CopyModel(std::size_t length) {
  ModelConfig c;
  c.layers = 2;
  c.heads = 4;
  c.head_dim = 8;
  c.ffn_dim = 128;
  c.vocab = 12;
  c.max_positions = 2 * length;
  return c;
}

TrainConfig Quick(long steps, double lr = 3e-3) {
  TrainConfig t;
  t.steps = steps;
  t.batch_tokens = 384;
  t.lr = lr;
  t.warmup = std::min(100L, steps);
  t.eval_sequences = 64;
  return t;
}

bool SameBits(const Model& a, const Model& b) {
  if (a.tensors().size() != b.tensors().size()) return false;
  for (std::size_t i = 0; i < a.tensors().size(); ++i) {
    const Tensor& x = a.tensors()[i].tensor;
    const Tensor& y = b.tensors()[i].tensor;
    if (x.shape() != y.shape() ||
        std::memcmp(x.data().data(), y.data().data(), x.numel() * sizeof(double)) != 0) {
      return false;
    }
  }
  return true;
}

}  // namespace

TEST_CASE("loss") {
  SUBCASE("confident correct logits") {
    Tensor logits({2, 3}, {50, 0, 0, 0, 0, 50});
    const std::vector<int> t{0, 2};
    CHECK(Loss(logits, t, 0.0).item() < 1e-20);
  }
  SUBCASE("uniform logits give ln V, with or without smoothing") {
    for (std::size_t v : {2, 4, 64}) {
      const Tensor logits = Tensor::Zeros({3, v});
      const std::vector<int> t{0, 1, 1};
      CHECK(Loss(logits, t, 0.0).item() == doctest::Approx(std::log(static_cast<double>(v))));
      CHECK(Loss(logits, t, 0.1).item() == doctest::Approx(std::log(static_cast<double>(v))));
    }
  }
  SUBCASE("target outside the vocabulary") {
    const std::vector<int> t{4};
    CHECK_THROWS_AS(Loss(Tensor::Zeros({1, 4}), t, 0.0), InputError);
  }
}

TEST_CASE("schedules") {
  TrainConfig c = Quick(1000, 1.0);
  c.warmup = 100;
  CHECK(LearningRate(c, 50) == doctest::Approx(0.5));
  CHECK(LearningRate(c, 100) == doctest::Approx(1.0));
  CHECK(LearningRate(c, 400) == doctest::Approx(0.5));
  c.schedule = Schedule::kConstant;
  CHECK(LearningRate(c, 900) == 1.0);
  c.schedule = Schedule::kCosine;
  CHECK(LearningRate(c, 1000) == doctest::Approx(0.0));
  CHECK(LearningRate(c, 550) == doctest::Approx(0.5));
  c.warmup = 2000;
  CHECK_THROWS_AS(c.Validate(), ConfigError);
  c = Quick(10);
  c.lr = 0.0;
  CHECK_THROWS_AS(c.Validate(), ConfigError);
}

TEST_CASE("tasks") {
  SUBCASE("targets") {
    const std::vector<int> p{3, 1, 4, 1};
    CHECK(SyntheticTask::Sequence(TaskKind::kCopy, 4, 6, 0).Target(p) == p);
    CHECK(SyntheticTask::Sequence(TaskKind::kReverse, 4, 6, 0).Target(p) == std::vector<int>{1, 4, 1, 3});
    const auto lookup = SyntheticTask::Sequence(TaskKind::kLookup, 4, 6, 0);
    const auto t = lookup.Target(p);
    CHECK(t[1] == t[3]);
  }
  SUBCASE("lm layout scores only the target half") {
    const auto task = SyntheticTask::Sequence(TaskKind::kCopy, 3, 5, 1);
    Rng rng(2);
    const Batch b = task.Sample(2, Objective::kLm, rng);
    REQUIRE(b.inputs.size() == 12);
    for (std::size_t s = 0; s < 2; ++s) {
      const int* in = b.inputs.data() + s * 6;
      const int* tg = b.targets.data() + s * 6;
      CHECK(in[3] == task.sep());
      for (int i = 0; i < 3; ++i) CHECK(tg[i] == kIgnoreTarget);
      for (int j = 0; j < 3; ++j) CHECK(tg[3 + j] == in[j]);
    }
  }
  SUBCASE("seq2seq layout") {
    const auto task = SyntheticTask::Sequence(TaskKind::kReverse, 3, 5, 1);
    Rng rng(2);
    const Batch b = task.Sample(1, Objective::kSeq2Seq, rng);
    CHECK(b.inputs[0] == task.bos());
    CHECK(b.targets == std::vector<int>{b.src[2], b.src[1], b.src[0]});
    CHECK(b.inputs[1] == b.targets[0]);
  }
  SUBCASE("deterministic given the seed") {
    const auto task = SyntheticTask::Sequence(TaskKind::kLookup, 5, 7, 3);
    Rng a(9), b(9);
    CHECK(task.Sample(4, Objective::kLm, a).inputs == task.Sample(4, Objective::kLm, b).inputs);
    CHECK(task.EvalSet(8, Objective::kLm).inputs == task.EvalSet(8, Objective::kLm).inputs);
  }
  SUBCASE("synthetic corpus") {
    const std::string text = GenerateSyntheticCorpus(20000, 1);
    CHECK(text.size() == 20000);
    CHECK(text == GenerateSyntheticCorpus(20000, 1));
    CHECK(text != GenerateSyntheticCorpus(20000, 2));
  }
}

TEST_CASE("training") {
  const auto task = SyntheticTask::Sequence(TaskKind::kCopy, 8, 10, 1);
  SUBCASE("same seed, same checkpoint") {
    const auto a = Pretrain(CopyModel(8), Quick(30), task);
    const auto b = Pretrain(CopyModel(8), Quick(30), task);
    CHECK(SameBits(a.model, b.model));
    CHECK(a.losses == b.losses);
    CHECK(a.model.metadata().at("step") == "30");
  }
  SUBCASE("pretraining requires softmax") {
    ModelConfig c = CopyModel(8);
    c.causal_kinds.assign(2, AttentionKind::kMlp);
    CHECK_THROWS_AS(Pretrain(c, Quick(5), task), ContractError);
  }
  SUBCASE("finetune with zero steps returns the input unchanged") {
    const Model m = SwapAttention(Model::Init(CopyModel(8), 3), {});
    TrainConfig t = Quick(0);
    t.warmup = 0;
    const auto r = Finetune(m, t, task);
    CHECK(SameBits(r.model, m));
  }
  SUBCASE("finetune never mutates its input") {
    const Model m = SwapAttention(Model::Init(CopyModel(8), 3), {});
    const Model before = m.Clone();
    Finetune(m, Quick(5), task);
    CHECK(SameBits(m, before));
  }
  SUBCASE("finetune needs a linear site") {
    CHECK_THROWS_AS(Finetune(Model::Init(CopyModel(8), 3), Quick(5), task), ContractError);
  }
  SUBCASE("frozen feature maps stay put") {
    const Model m = SwapAttention(Model::Init(CopyModel(8), 3), {});
    TrainConfig t = Quick(5);
    t.freeze_feature_maps = true;
    const auto r = Finetune(m, t, task);
    for (const auto& nt : m.tensors()) {
      const bool phi = nt.name.find(".phi.") != std::string::npos;
      const bool same = std::memcmp(nt.tensor.data().data(), r.model.Get(nt.name).data().data(),
                                    nt.tensor.numel() * sizeof(double)) == 0;
      CHECK(same == phi);
    }
  }
  SUBCASE("huge learning rate is reported as divergence") {
    TrainConfig t = Quick(300, 1e6);
    t.grad_clip = 0.0;
    t.warmup = 0;
    t.schedule = Schedule::kConstant;
    CHECK_THROWS_AS(Pretrain(CopyModel(8), t, task), DivergenceError);
  }
  SUBCASE("copy loss falls below its start within 200 steps for every feature map") {
    const Model teacher = Pretrain(CopyModel(8), Quick(100), task).model;
    for (auto fm : {FeatureMapKind::kMlpRelu, FeatureMapKind::kElu, FeatureMapKind::kRfa}) {
      CAPTURE(FeatureMapName(fm));
      SwapSpec spec;
      spec.feature_map = fm;
      spec.k_causal = fm == FeatureMapKind::kElu ? 8 : 16;
      const auto r = Finetune(SwapAttention(teacher, spec), Quick(200, 1.5e-3), task);
      CHECK(r.final_loss < r.initial_loss);
    }
  }
}

TEST_CASE("trained copy model reproduces its payload") {
  const auto task = SyntheticTask::Sequence(TaskKind::kCopy, 8, 10, 1);
  const auto r = Pretrain(CopyModel(8), Quick(600), task);
  CHECK(r.eval.exact_match >= 0.99);
  Rng rng(77);
  int exact = 0;
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<int> prompt(8);
    for (int& t : prompt) t = rng.UniformInt(10);
    auto full = prompt;
    full.push_back(task.sep());
    exact += Generate(r.model, full, 8, DecodeMode::kRecurrent) == prompt;
  }
  CHECK(exact == 20);
}

TEST_CASE("run matrix") {
  const auto task = SyntheticTask::Sequence(TaskKind::kCopy, 6, 8, 1);
  MatrixPlan plan;
  plan.model = CopyModel(6);
  plan.model.vocab = 10;
  plan.pretrain = Quick(40);
  plan.finetune = Quick(20);
  SUBCASE("one cell") {
    plan.cells = EnumerateCells({FeatureMapKind::kMlpRelu}, {InitKind::kPretrain}, {8}, {0});
    const auto rows = RunMatrix(plan, task);
    const std::string csv = ResultsCsv(rows);
    CHECK(csv.rfind(std::string(kResultsHeader) + "\n", 0) == 0);
    CHECK(std::count(csv.begin(), csv.end(), '\n') == 2);
    CHECK(rows[0].status == "ok");
    CHECK(rows[0].param_count == Model::Init(plan.model, 0).ParameterCount() + 2 * 4 * 8 * 9);
  }
  SUBCASE("three feature maps, finite or marked diverged") {
    plan.cells = EnumerateCells({FeatureMapKind::kMlpRelu, FeatureMapKind::kElu, FeatureMapKind::kRfa},
                                {InitKind::kPretrain}, {8}, {0});
    const auto rows = RunMatrix(plan, task);
    REQUIRE(rows.size() == 3);
    for (const auto& r : rows) {
      CHECK((r.status == "diverged" || std::isfinite(r.eval_metric)));
    }
  }
  SUBCASE("a diverging cell is recorded, not thrown") {
    plan.finetune.lr = 1e6;
    plan.finetune.grad_clip = 0.0;
    plan.finetune.warmup = 0;
    plan.finetune.schedule = Schedule::kConstant;
    plan.finetune.steps = 300;
    plan.cells = EnumerateCells({FeatureMapKind::kMlpRelu}, {InitKind::kRandom}, {8}, {0});
    const auto rows = RunMatrix(plan, task);
    CHECK(rows[0].status == "diverged");
    CHECK(ResultsCsv(rows).find(",nan,") != std::string::npos);
  }
}
