#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <algorithm>
#include <cmath>

#include "t2r/analysis.h"
#include "t2r/bench.h"
#include "t2r/errors.h"
#include "t2r/ops.h"
#include "t2r/recurrent.h"
#include "test_util.h"

using namespace t2r;
using t2r::testing::RelativeError;

namespace {

ModelConfig Small(std::size_t vocab = 16) {
  ModelConfig c;
  c.layers = 2;
  c.heads = 4;
  c.head_dim = 4;
  c.ffn_dim = 32;
  c.vocab = vocab;
  c.max_positions = 64;
  return c;
}

std::vector<int> RandomTokens(std::size_t n, std::size_t vocab, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<int> t(n);
  for (int& x : t) x = rng.UniformInt(static_cast<int>(vocab));
  return t;
}

HeadTrace Head(std::size_t layer, std::size_t head, std::size_t rows, std::size_t cols,
               std::vector<double> w) {
  HeadTrace h;
  h.layer = layer;
  h.head = head;
  h.rows = rows;
  h.cols = cols;
  h.weights = std::move(w);
  return h;
}

AttentionTrace RandomTrace(std::size_t heads, std::size_t n, Rng& rng) {
  AttentionTrace t;
  for (std::size_t h = 0; h < heads; ++h) {
    std::vector<double> w(n * n);
    for (std::size_t r = 0; r < n; ++r) {
      double s = 0.0;
      for (std::size_t c = 0; c < n; ++c) s += (w[r * n + c] = rng.Uniform());
      for (std::size_t c = 0; c < n; ++c) w[r * n + c] /= s;
    }
    t.heads.push_back(Head(0, h, n, n, std::move(w)));
  }
  return t;
}

}  // namespace

TEST_CASE("perplexity") {
  SUBCASE("a model with constant logits has perplexity V") {
    Model m = Model::Init(Small(64), 1);
    Tensor g = m.Get("dec.ln.g");
    std::fill(g.mutable_data().begin(), g.mutable_data().end(), 0.0);
    const auto corpus = RandomTokens(500, 64, 2);
    CHECK(std::abs(EvalPerplexity(m, corpus, 16, 8) - 64.0) < 1e-9);
    CHECK(std::abs(EvalPerplexity(m, corpus, 16, 16) - 64.0) < 1e-9);
  }
  SUBCASE("matches a per-window log-softmax oracle") {
    const Model m = Model::Init(Small(), 3);
    const auto corpus = RandomTokens(16 * 5 + 3, 16, 4);
    for (std::size_t last : {1, 5, 16}) {
      double nll = 0.0;
      std::size_t n = 0;
      NoGradGuard guard;
      for (std::size_t w = 0; w < 5; ++w) {
        const std::span<const int> win(corpus.data() + w * 16, 16);
        const Tensor logits = LmForward(m, win, 1);
        for (std::size_t i = 16 - last; i < 16; ++i) {
          const auto row = logits.data().subspan(i * 16, 16);
          const double mx = *std::max_element(row.begin(), row.end());
          double z = 0.0;
          for (double v : row) z += std::exp(v - mx);
          nll -= row[corpus[w * 16 + i + 1]] - mx - std::log(z);
          ++n;
        }
      }
      CHECK(RelativeError(EvalPerplexity(m, corpus, 16, last), std::exp(nll / n)) < 1e-10);
    }
  }
  SUBCASE("argument checks") {
    const Model m = Model::Init(Small(), 3);
    const auto corpus = RandomTokens(100, 16, 4);
    CHECK_THROWS_AS(EvalPerplexity(m, corpus, 16, 17), ContractError);
    CHECK_THROWS_AS(EvalPerplexity(m, corpus, 16, 0), ContractError);
    CHECK_THROWS_AS(EvalPerplexity(m, std::span<const int>(corpus.data(), 16), 16, 8), InputError);
  }
}

TEST_CASE("attention distance") {
  SUBCASE("identical traces") {
    const Model m = Model::Init(Small(), 5);
    const auto t = CollectTrace(m, RandomTokens(12, 16, 1));
    CHECK(t.heads.size() == 8);
    CHECK(AttentionDistance(t, t) == 0.0);
  }
  SUBCASE("one-hot against uniform rows") {
    for (std::size_t n : {2, 5, 64}) {
      std::vector<double> hot(n * n, 0.0), flat(n * n, 1.0 / n);
      for (std::size_t r = 0; r < n; ++r) hot[r * n + (r * 7) % n] = 1.0;
      AttentionTrace a, b;
      a.heads.push_back(Head(0, 0, n, n, hot));
      b.heads.push_back(Head(0, 0, n, n, flat));
      const double expect = std::sqrt((1.0 - 1.0 / n) * (1.0 - 1.0 / n) + (n - 1.0) / (n * n));
      CHECK(std::abs(AttentionDistance(a, b) - expect) < 1e-12);
    }
  }
  SUBCASE("metric properties") {
    Rng rng(11);
    for (int trial = 0; trial < 100; ++trial) {
      const auto a = RandomTrace(3, 6, rng), b = RandomTrace(3, 6, rng), c = RandomTrace(3, 6, rng);
      const double ab = AttentionDistance(a, b);
      CHECK(ab >= 0.0);
      CHECK(ab == doctest::Approx(AttentionDistance(b, a)).epsilon(1e-14));
      CHECK(AttentionDistance(a, c) <= ab + AttentionDistance(b, c) + 1e-12);
    }
  }
  SUBCASE("layer filter and averaging over samples") {
    AttentionTrace a, b;
    a.heads.push_back(Head(0, 0, 1, 2, {1, 0}));
    b.heads.push_back(Head(0, 0, 1, 2, {0, 1}));
    a.heads.push_back(Head(1, 0, 1, 2, {1, 0}));
    b.heads.push_back(Head(1, 0, 1, 2, {1, 0}));
    CHECK(AttentionDistance({a}, {b}) == doctest::Approx(std::sqrt(2.0) / 2));
    CHECK(AttentionDistance({a}, {b}, std::vector<std::size_t>{0}) == doctest::Approx(std::sqrt(2.0)));
    CHECK(AttentionDistance({a, a}, {b, a}) == doctest::Approx(std::sqrt(2.0) / 4));
  }
  SUBCASE("shape mismatch names the head") {
    AttentionTrace a, b;
    a.heads.push_back(Head(1, 3, 1, 2, {1, 0}));
    b.heads.push_back(Head(1, 3, 1, 3, {1, 0, 0}));
    try {
      AttentionDistance(a, b);
      FAIL("expected ContractError");
    } catch (const ContractError& e) {
      CHECK(std::string(e.what()).find("layer 1, head 3") != std::string::npos);
    }
    CHECK_THROWS_AS(AttentionDistance({a}, {a, a}), ContractError);
  }
  SUBCASE("converted model departs from its teacher") {
    const Model teacher = Model::Init(Small(), 5);
    SwapSpec spec;
    spec.k_causal = 8;
    const Model student = SwapAttention(teacher, spec);
    const auto tokens = RandomTokens(12, 16, 3);
    const double d = AttentionDistance(CollectTrace(teacher, tokens), CollectTrace(student, tokens));
    CHECK(std::isfinite(d));
    CHECK(d > 0.0);
  }
}

TEST_CASE("attention entropy") {
  const std::vector<double> flat(512, 1.0 / 512);
  CHECK(std::abs(RowEntropy(flat) - std::log(512.0)) < 1e-12);
  std::vector<double> hot(9, 0.0);
  hot[4] = 1.0;
  CHECK(RowEntropy(hot) == 0.0);
  CHECK_THROWS_AS(RowEntropy(std::vector<double>{0.5, 0.4}), ContractError);

  Rng rng(3);
  for (int trial = 0; trial < 100; ++trial) {
    const auto t = RandomTrace(1, 7, rng);
    auto row = std::vector<double>(t.heads[0].Row(2).begin(), t.heads[0].Row(2).end());
    const double h = RowEntropy(row);
    CHECK(h >= 0.0);
    CHECK(h <= std::log(7.0) + 1e-12);
    std::shuffle(row.begin(), row.end(), rng.engine());
    CHECK(std::abs(RowEntropy(row) - h) < 1e-12);
  }

  AttentionTrace dead;
  dead.heads.push_back(Head(0, 0, 2, 2, {0, 0, 0.5, 0.5}));
  CHECK(AttentionEntropy({dead}) == doctest::Approx(std::log(2.0)));
  dead.heads[0].weights = {0.2, 0.2, 0.5, 0.5};
  CHECK_THROWS_AS(AttentionEntropy({dead}), ContractError);

  const Model m = Model::Init(Small(), 5);
  const double e = AttentionEntropy({CollectTrace(m, RandomTokens(20, 16, 3))});
  CHECK(e > 0.0);
  CHECK(e < std::log(20.0));
}

TEST_CASE("analysis csv") {
  const std::string csv = AnalysisCsv({{"teacher", "mlp", 16, "distance", 0.25, 10}});
  CHECK(csv == std::string(kAnalysisHeader) + "\nteacher,mlp,16,distance,0.25,10\n");
}

TEST_CASE("bench") {
  ModelConfig c = Small();
  c.max_positions = 600;
  const Model soft = Model::Init(c, 1);
  SwapSpec spec;
  spec.k_causal = 16;
  const Model lin = SwapAttention(soft, spec);

  SUBCASE("rows per length") {
    BenchOptions o;
    o.lengths = {8};
    o.batch = 2;
    const auto rows = BenchSpeed(lin, o);
    REQUIRE(rows.size() == 4);
    std::vector<double> raw;
    for (int i = 0; i < 3; ++i) {
      CHECK(rows[i].rep == std::to_string(i));
      CHECK(rows[i].tokens_per_sec > 0.0);
      raw.push_back(rows[i].tokens_per_sec);
    }
    std::sort(raw.begin(), raw.end());
    CHECK(rows[3].rep == "median");
    CHECK(rows[3].tokens_per_sec == raw[1]);
    const std::string csv = BenchCsv(rows);
    CHECK(csv.rfind(std::string(kBenchHeader) + "\n", 0) == 0);
    CHECK(std::count(csv.begin(), csv.end(), '\n') == 5);
  }
  SUBCASE("option checks") {
    BenchOptions o;
    o.reps = 2;
    CHECK_THROWS_AS(BenchSpeed(lin, o), ConfigError);
    o.reps = 3;
    o.mode = BenchMode::kSoftmax;
    CHECK_THROWS_AS(BenchSpeed(lin, o), ContractError);
    o.mode = BenchMode::kRecurrent;
    o.lengths = {301};
    CHECK_THROWS_AS(BenchSpeed(lin, o), InputError);
  }
  SUBCASE("recurrent state is constant in length") {
    const auto pts = BenchMemory(lin, {4, 32, 256});
    for (const auto& p : pts) CHECK(p.elements == StateFootprint(lin.config()));
  }
  SUBCASE("softmax cache grows linearly") {
    const auto pts = BenchMemory(soft, {4, 32, 256}, BenchMode::kSoftmax);
    const std::size_t per = 2 * c.layers * c.heads * c.head_dim;
    for (const auto& p : pts) CHECK(p.elements == per * 2 * p.length);
  }
  SUBCASE("halving k halves the state") {
    spec.k_causal = 8;
    const Model half = SwapAttention(soft, spec);
    CHECK(2 * BenchMemory(half, {16})[0].elements == BenchMemory(lin, {16})[0].elements);
  }
  SUBCASE("slope fit") {
    std::vector<double> line(50), flat(50);
    Rng rng(1);
    for (std::size_t i = 0; i < 50; ++i) {
      line[i] = 3.0 + 2.0 * static_cast<double>(i);
      flat[i] = 1.0 + rng.Normal(0.0, 1e-3);
    }
    const auto a = FitSlope(line);
    CHECK(a.slope == doctest::Approx(2.0));
    CHECK_FALSE(a.ContainsZero());
    int contains = 0;
    for (int trial = 0; trial < 200; ++trial) {
      for (double& y : flat) y = 1.0 + rng.Normal(0.0, 1e-3);
      contains += FitSlope(flat, 0).ContainsZero();
    }
    CHECK(contains >= 180);
    CHECK_THROWS_AS(FitSlope({1.0, 2.0}), ContractError);
    const auto across = FitSlopeAcrossRuns({{0, 1, 2, 3}, {0, 2, 4, 6}, {0, 3, 6, 9}});
    CHECK(across.slope == doctest::Approx(2.0));
    CHECK(across.ci_low == doctest::Approx(2.0 - 4.303 / std::sqrt(3.0)));
  }
  SUBCASE("step times cover every position") {
    CHECK(StepTimes(lin, 50, 2, BenchMode::kRecurrent, 0, 3).size() == 50);
    const auto runs = StepTimeRuns(lin, 20, 2, BenchMode::kRecurrent, 0, 4);
    CHECK(runs.size() == 4);
  }
}
