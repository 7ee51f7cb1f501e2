#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>

#include "t2r/attention.h"
#include "t2r/errors.h"
#include "t2r/ops.h"
#include "test_util.h"

using namespace t2r;
using t2r::testing::GradCheck;
using t2r::testing::MaxAbsDiff;
using t2r::testing::RandomTensor;

namespace {

// Direct double loop over (i, j): similarity, normalize, average.
std::vector<double> NaiveLinearAttention(const Tensor& fq, const Tensor& fk, const Tensor& v,
                                         std::size_t heads, bool causal) {
  const std::size_t n = fq.size(0), m = fk.size(0);
  const std::size_t k = fq.size(1) / heads, d = v.size(1) / heads;
  std::vector<double> out(n * heads * d, 0.0);
  for (std::size_t h = 0; h < heads; ++h) {
    for (std::size_t i = 0; i < n; ++i) {
      double den = 0.0;
      std::vector<double> num(d, 0.0);
      for (std::size_t j = 0; j < (causal ? i + 1 : m); ++j) {
        double sim = 0.0;
        for (std::size_t a = 0; a < k; ++a) {
          sim += fq.data()[i * heads * k + h * k + a] * fk.data()[j * heads * k + h * k + a];
        }
        den += sim;
        for (std::size_t c = 0; c < d; ++c) num[c] += sim * v.data()[j * heads * d + h * d + c];
      }
      for (std::size_t c = 0; c < d; ++c) {
        out[i * heads * d + h * d + c] = num[c] / std::max(den, kDenominatorEps);
      }
    }
  }
  return out;
}

std::vector<double> NaiveSoftmaxAttention(const Tensor& q, const Tensor& k, const Tensor& v,
                                          std::size_t heads, bool causal) {
  const std::size_t n = q.size(0), m = k.size(0);
  const std::size_t d = q.size(1) / heads, dv = v.size(1) / heads;
  std::vector<double> out(n * heads * dv, 0.0);
  for (std::size_t h = 0; h < heads; ++h) {
    for (std::size_t i = 0; i < n; ++i) {
      const std::size_t visible = causal ? i + 1 : m;
      std::vector<double> sims(visible);
      double total = 0.0;
      for (std::size_t j = 0; j < visible; ++j) {
        double dot = 0.0;
        for (std::size_t a = 0; a < d; ++a) {
          dot += q.data()[i * heads * d + h * d + a] * k.data()[j * heads * d + h * d + a];
        }
        sims[j] = std::exp(dot / std::sqrt(static_cast<double>(d)));
        total += sims[j];
      }
      for (std::size_t j = 0; j < visible; ++j) {
        for (std::size_t c = 0; c < dv; ++c) {
          out[i * heads * dv + h * dv + c] += sims[j] / total * v.data()[j * heads * dv + h * dv + c];
        }
      }
    }
  }
  return out;
}

Tensor Positive(const Shape& shape, Rng& rng) {
  Tensor t = RandomTensor(shape, rng);
  for (double& x : t.mutable_data()) x = std::abs(x) + 0.05;
  return t;
}

}  // namespace

TEST_CASE("project_qkv") {
  Rng rng(1);
  auto w = AttentionWeights::Init(2, 2, rng);
  SUBCASE("identity projection") {
    for (Tensor* t : {&w.wq, &w.wk, &w.wv}) {
      auto d = t->mutable_data();
      std::fill(d.begin(), d.end(), 0.0);
      for (std::size_t i = 0; i < 4; ++i) d[i * 4 + i] = 1.0;
    }
    Tensor e1({1, 4}, {1, 0, 0, 0});
    auto p = ProjectQkv(e1, e1, w);
    CHECK(std::vector<double>(p.q.data().begin(), p.q.data().end()) ==
          std::vector<double>{1, 0, 0, 0});
  }
  SUBCASE("bias only") {
    auto b = w.bq.mutable_data();
    for (std::size_t i = 0; i < 4; ++i) b[i] = 0.5 + static_cast<double>(i);
    auto p = ProjectQkv(Tensor::Zeros({1, 4}), Tensor::Zeros({1, 4}), w);
    CHECK(std::vector<double>(p.q.data().begin(), p.q.data().end()) ==
          std::vector<double>{0.5, 1.5, 2.5, 3.5});
  }
  SUBCASE("random matches per-head matmul") {
    auto x = RandomTensor({3, 4}, rng), s = RandomTensor({5, 4}, rng);
    for (double& b : w.bk.mutable_data()) b = rng.Normal();
    auto p = ProjectQkv(x, s, w);
    for (std::size_t j = 0; j < 5; ++j) {
      for (std::size_t o = 0; o < 4; ++o) {
        double expected = w.bk.data()[o];
        for (std::size_t c = 0; c < 4; ++c) expected += w.wk.data()[o * 4 + c] * s.data()[j * 4 + c];
        CHECK(p.k.data()[j * 4 + o] == doctest::Approx(expected).epsilon(1e-14));
      }
    }
  }
  SUBCASE("width mismatch") {
    CHECK_THROWS_AS(ProjectQkv(Tensor::Zeros({1, 3}), Tensor::Zeros({1, 4}), w), DimensionError);
  }
}

TEST_CASE("softmax attention") {
  Rng rng(2);
  SUBCASE("single key returns its value") {
    auto q = RandomTensor({3, 4}, rng), k = RandomTensor({1, 4}, rng), v = RandomTensor({1, 4}, rng);
    auto out = SoftmaxAttention(q, k, v, {1, 3, 1, 2, false});
    for (std::size_t i = 0; i < 3; ++i) {
      for (std::size_t c = 0; c < 4; ++c) CHECK(out.data()[i * 4 + c] == doctest::Approx(v.data()[c]));
    }
  }
  SUBCASE("identical keys split evenly") {
    AttentionTrace trace;
    Tensor k({2, 2}, {0.3, -1, 0.3, -1});
    SoftmaxAttention(RandomTensor({1, 2}, rng), k, RandomTensor({2, 2}, rng), {1, 1, 2, 1, false},
                     {&trace, 0, AttentionSite::kSelf});
    REQUIRE(trace.heads.size() == 1);
    CHECK(trace.heads[0].weights[0] == doctest::Approx(0.5).epsilon(1e-15));
    CHECK(trace.heads[0].weights[1] == doctest::Approx(0.5).epsilon(1e-15));
  }
  SUBCASE("hand evaluation with d = 1") {
    Tensor q({1, 1}, {std::log(2.0)}), k({2, 1}, {1, 0}), v({2, 1}, {1, 0});
    auto out = SoftmaxAttention(q, k, v, {1, 1, 2, 1, false});
    CHECK(out.item() == doctest::Approx(2.0 / 3.0).epsilon(1e-14));
  }
  SUBCASE("causal needs square") {
    CHECK_THROWS_AS(SoftmaxAttention(Tensor::Zeros({2, 2}), Tensor::Zeros({3, 2}),
                                     Tensor::Zeros({3, 2}), {1, 2, 3, 1, true}),
                    ContractError);
  }
  SUBCASE("matches naive evaluation, batched") {
    for (bool causal : {false, true}) {
      auto q = RandomTensor({2 * 5, 6}, rng), k = RandomTensor({2 * 5, 6}, rng);
      auto v = RandomTensor({2 * 5, 6}, rng);
      auto out = SoftmaxAttention(q, k, v, {2, 5, 5, 3, causal});
      for (std::size_t b = 0; b < 2; ++b) {
        auto slice = [&](const Tensor& t) {
          return Tensor({5, 6}, std::vector<double>(t.data().begin() + b * 30,
                                                    t.data().begin() + b * 30 + 30));
        };
        auto expected = NaiveSoftmaxAttention(slice(q), slice(k), slice(v), 3, causal);
        CHECK(MaxAbsDiff(std::span<const double>(out.data()).subspan(b * 30, 30), expected) <
              1e-12);
      }
    }
  }
  SUBCASE("shift invariance: a common key offset shifts each row's logits uniformly") {
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
      Rng r(seed);
      auto q = RandomTensor({4, 4}, r), k = RandomTensor({4, 4}, r), v = RandomTensor({4, 4}, r);
      Tensor shifted = k.Clone();
      std::vector<double> offset{r.Normal(), r.Normal(), r.Normal(), r.Normal()};
      for (std::size_t j = 0; j < 4; ++j)
        for (std::size_t c = 0; c < 4; ++c) shifted.mutable_data()[j * 4 + c] += 3.0 * offset[c];
      auto a = SoftmaxAttention(q, k, v, {1, 4, 4, 2, true});
      auto b = SoftmaxAttention(q, shifted, v, {1, 4, 4, 2, true});
      CHECK(MaxAbsDiff(a.data(), b.data()) < 1e-12);
    }
  }
  SUBCASE("trace rows normalized and causal") {
    AttentionTrace trace;
    SoftmaxAttention(RandomTensor({6, 4}, rng), RandomTensor({6, 4}, rng), RandomTensor({6, 4}, rng),
                     {1, 6, 6, 2, true}, {&trace, 3, AttentionSite::kSelf});
    REQUIRE(trace.heads.size() == 2);
    for (const auto& ht : trace.heads) {
      CHECK(ht.layer == 3);
      for (std::size_t i = 0; i < 6; ++i) {
        double total = 0.0;
        for (std::size_t j = 0; j < 6; ++j) {
          if (j > i) CHECK(ht.Row(i)[j] == 0.0);
          total += ht.Row(i)[j];
        }
        CHECK(std::abs(total - 1.0) < 1e-6);
      }
    }
  }
}

TEST_CASE("feature maps") {
  Rng rng(4);
  SUBCASE("mlp with identity weights") {
    auto phi = MakeFeatureMap(FeatureMapKind::kMlpRelu, 1, 2, 2, rng);
    auto w = phi.weight.mutable_data();
    w[0] = 1;
    w[1] = 0;
    w[2] = 0;
    w[3] = 1;
    auto out = ApplyFeatureMap(phi, Tensor({1, 2}, {-1, 2}));
    CHECK(std::vector<double>(out.data().begin(), out.data().end()) ==
          std::vector<double>{0, 2});
    CHECK(phi.LearnableParameterCount() == 1 * 2 * (2 + 1));
  }
  SUBCASE("elu at zero") {
    auto phi = MakeFeatureMap(FeatureMapKind::kElu, 2, 3, 3, rng);
    auto out = ApplyFeatureMap(phi, Tensor::Zeros({2, 6}));
    for (double v : out.data()) CHECK(v == 1.0);
  }
  SUBCASE("elu rejects k != d") {
    CHECK_THROWS_AS(MakeFeatureMap(FeatureMapKind::kElu, 2, 4, 3, rng), ConfigError);
  }
  SUBCASE("all maps nonnegative") {
    for (auto kind : {FeatureMapKind::kMlpRelu, FeatureMapKind::kElu, FeatureMapKind::kRfa}) {
      auto phi = MakeFeatureMap(kind, 2, 4, 4, rng);
      auto out = ApplyFeatureMap(phi, RandomTensor({7, 8}, rng, 3.0));
      for (double v : out.data()) {
        CHECK(v >= 0.0);
        if (kind != FeatureMapKind::kMlpRelu) CHECK(v > 0.0);
      }
    }
  }
  SUBCASE("parse names") {
    CHECK(ParseFeatureMap("mlp") == FeatureMapKind::kMlpRelu);
    CHECK(ParseFeatureMap("rfa") == FeatureMapKind::kRfa);
    CHECK_THROWS_AS(ParseFeatureMap("performer"), ConfigError);
  }
}

// Monte Carlo against the exact exponential kernel exp(xs . ys / sigma^2) with
// xs = sqrt(d) x / |x|. Sigma is set so that the self-similarity exponent is
// 0.5, which keeps the estimator variance small enough for 100 draws.
TEST_CASE("rfa approximates the exponential kernel") {
  const std::size_t d = 4, m = 256;
  const double sigma = std::sqrt(2.0 * static_cast<double>(d));
  Rng data_rng(99);
  std::vector<double> x(d), y(d);
  double nx = 0.0, ny = 0.0;
  for (std::size_t i = 0; i < d; ++i) {
    x[i] = data_rng.Normal();
    y[i] = data_rng.Normal();
    nx += x[i] * x[i];
    ny += y[i] * y[i];
  }
  double xy = 0.0;
  for (std::size_t i = 0; i < d; ++i) {
    x[i] /= std::sqrt(nx);
    y[i] /= std::sqrt(ny);
    xy += x[i] * y[i];
  }
  const double scale = static_cast<double>(d) / (sigma * sigma);
  const double exact_self = std::exp(scale);
  const double exact_cross = std::exp(scale * xy);
  double self_sum = 0.0, cross_sum = 0.0;
  const int draws = 100;
  for (int draw = 0; draw < draws; ++draw) {
    Rng rng(1000 + draw);
    auto phi = MakeFeatureMap(FeatureMapKind::kRfa, 1, d, m, rng);
    phi.sigma.mutable_data()[0] = sigma;
    std::vector<double> both(x);
    both.insert(both.end(), y.begin(), y.end());
    auto f = ApplyFeatureMap(phi, Tensor({2, d}, both));
    double s = 0.0, c = 0.0;
    for (std::size_t l = 0; l < m; ++l) {
      s += f.data()[l] * f.data()[l];
      c += f.data()[l] * f.data()[m + l];
    }
    self_sum += s;
    cross_sum += c;
  }
  CHECK(std::abs(self_sum / draws / exact_self - 1.0) < 0.10);
  CHECK(std::abs(cross_sum / draws / exact_cross - 1.0) < 0.10);
}

TEST_CASE("linear attention") {
  Rng rng(5);
  SUBCASE("single key returns its value") {
    auto fq = Positive({3, 4}, rng), fk = Positive({1, 4}, rng);
    auto v = RandomTensor({1, 6}, rng);
    auto out = LinearAttention(fq, fk, v, {1, 3, 1, 2, false});
    for (std::size_t i = 0; i < 3; ++i)
      for (std::size_t c = 0; c < 6; ++c)
        CHECK(out.data()[i * 6 + c] == doctest::Approx(v.data()[c]).epsilon(1e-14));
  }
  SUBCASE("equal key features average values") {
    auto fq = Positive({1, 3}, rng);
    Tensor fk({4, 3}, std::vector<double>(12, 0.7));
    auto v = RandomTensor({4, 2}, rng);
    auto out = LinearAttention(fq, fk, v, {1, 1, 4, 1, false});
    for (std::size_t c = 0; c < 2; ++c) {
      double mean = 0.0;
      for (std::size_t j = 0; j < 4; ++j) mean += v.data()[j * 2 + c] / 4.0;
      CHECK(out.data()[c] == doctest::Approx(mean).epsilon(1e-13));
    }
  }
  SUBCASE("zero query features hit the guard, not an exception") {
    auto out = LinearAttention(Tensor::Zeros({2, 3}), Positive({2, 3}, rng), RandomTensor({2, 2}, rng),
                               {1, 2, 2, 1, true});
    for (double v : out.data()) CHECK(v == 0.0);
  }
  SUBCASE("matches the quadratic double loop on 100 seeds") {
    double worst = 0.0;
    for (std::uint64_t seed = 0; seed < 100; ++seed) {
      Rng r(seed);
      const std::size_t heads = 1 + seed % 3, k = 2 + seed % 5, d = 1 + seed % 4;
      const std::size_t n = 1 + seed % 17, m = (seed % 2) ? n : 1 + (seed * 7) % 13;
      const bool causal = (seed % 2) == 1;
      auto fq = Positive({n, heads * k}, r), fk = Positive({m, heads * k}, r);
      auto v = RandomTensor({m, heads * d}, r);
      auto out = LinearAttention(fq, fk, v, {1, n, m, heads, causal});
      worst = std::max(worst, MaxAbsDiff(out.data(), NaiveLinearAttention(fq, fk, v, heads, causal)));
    }
    CHECK(worst <= 1e-10);
  }
  SUBCASE("trace rows") {
    AttentionTrace trace;
    LinearAttention(Positive({5, 4}, rng), Positive({5, 4}, rng), RandomTensor({5, 4}, rng),
                    {1, 5, 5, 2, true}, {&trace, 0, AttentionSite::kSelf});
    REQUIRE(trace.heads.size() == 2);
    for (const auto& ht : trace.heads) {
      for (std::size_t i = 0; i < 5; ++i) {
        double total = 0.0;
        for (std::size_t j = 0; j < 5; ++j) {
          CHECK(ht.Row(i)[j] >= 0.0);
          if (j > i) CHECK(ht.Row(i)[j] == 0.0);
          total += ht.Row(i)[j];
        }
        CHECK(std::abs(total - 1.0) < 1e-6);
      }
    }
  }
}

TEST_CASE("attention gradients match finite differences") {
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    Rng rng(seed);
    CAPTURE(seed);
    const bool causal = seed % 2 == 0;
    const std::size_t batch = 1 + seed % 2, n = 3, m = causal ? 3 : 4;
    auto q = RandomTensor({batch * n, 4}, rng), k = RandomTensor({batch * m, 4}, rng);
    auto v = RandomTensor({batch * m, 6}, rng), weights = RandomTensor({batch * n, 6}, rng, 1.0, false);
    const AttentionShape shape{batch, n, m, 2, causal};
    auto reduce = [&](const Tensor& t) { return Sum(Mul(t, weights)); };
    CHECK(GradCheck([&](auto& in) { return reduce(SoftmaxAttention(in[0], in[1], in[2], shape)); },
                    {q, k, v}) < 1e-4);
    auto fq = Positive({batch * n, 4}, rng), fk = Positive({batch * m, 4}, rng);
    CHECK(GradCheck([&](auto& in) { return reduce(LinearAttention(in[0], in[1], in[2], shape)); },
                    {fq, fk, v}) < 1e-4);
  }
  Tape::Current().Clear();
}

TEST_CASE("feature map gradients match finite differences") {
  for (std::uint64_t seed = 0; seed < 30; ++seed) {
    Rng rng(seed);
    CAPTURE(seed);
    auto x = RandomTensor({3, 6}, rng);
    for (auto kind : {FeatureMapKind::kMlpRelu, FeatureMapKind::kElu, FeatureMapKind::kRfa}) {
      auto phi = MakeFeatureMap(kind, 2, 3, 3, rng);
      auto weights = RandomTensor({3, 6}, rng, 1.0, false);
      std::vector<Tensor> inputs{x};
      if (kind == FeatureMapKind::kMlpRelu) {
        inputs.push_back(phi.weight);
        inputs.push_back(phi.bias);
      } else if (kind == FeatureMapKind::kRfa) {
        inputs.push_back(phi.sigma);
      }
      CHECK(GradCheck(
                [&](auto& in) {
                  FeatureMap local = phi;
                  if (kind == FeatureMapKind::kMlpRelu) {
                    local.weight = in[1];
                    local.bias = in[2];
                  } else if (kind == FeatureMapKind::kRfa) {
                    local.sigma = in[1];
                  }
                  return Sum(Mul(ApplyFeatureMap(local, in[0]), weights));
                },
                inputs) < 1e-4);
    }
  }
  Tape::Current().Clear();
}
