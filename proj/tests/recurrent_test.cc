#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include "t2r/errors.h"
#include "t2r/ops.h"
#include "t2r/recurrent.h"
#include "test_util.h"

using namespace t2r;
using t2r::testing::MaxAbsDiff;
using t2r::testing::RandomTensor;

namespace {

std::vector<double> RandomNonneg(std::size_t n, Rng& rng) {
  std::vector<double> v(n);
  for (double& x : v) x = std::abs(rng.Normal()) + 0.01;
  return v;
}

std::vector<double> RandomVec(std::size_t n, Rng& rng) {
  std::vector<double> v(n);
  for (double& x : v) x = rng.Normal();
  return v;
}

ModelConfig Lm(std::vector<AttentionKind> kinds, std::size_t k = 6) {
  ModelConfig c;
  c.layers = kinds.size();
  c.heads = 2;
  c.head_dim = 4;
  c.ffn_dim = 16;
  c.vocab = 13;
  c.max_positions = 300;
  c.k_causal = k;
  c.causal_kinds = std::move(kinds);
  return c;
}

std::vector<int> RandomTokens(std::size_t n, int vocab, Rng& rng) {
  std::vector<int> t(n);
  for (int& x : t) x = rng.UniformInt(vocab);
  return t;
}

// Feeds tokens one at a time and collects the logits of every position.
std::vector<double> DecodeAll(IncrementalDecoder& dec, const std::vector<int>& tokens) {
  std::vector<double> all;
  for (int t : tokens) {
    auto l = dec.Step(std::span<const int>(&t, 1));
    all.insert(all.end(), l.begin(), l.end());
  }
  return all;
}

}  // namespace

TEST_CASE("state update") {
  Rng rng(1);
  SUBCASE("one update from zero") {
    RecurrentState st(2, 3, 2);
    const auto f = RandomNonneg(6, rng), v = RandomVec(4, rng);
    st.Update(f, v);
    CHECK(st.step() == 1);
    for (std::size_t h = 0; h < 2; ++h)
      for (std::size_t a = 0; a < 3; ++a) {
        CHECK(st.z()[h * 3 + a] == f[h * 3 + a]);
        for (std::size_t c = 0; c < 2; ++c) CHECK(st.s()[(h * 3 + a) * 2 + c] == f[h * 3 + a] * v[h * 2 + c]);
      }
    CHECK(st.ElementCount() == 2 * 3 * (2 + 1));
  }
  SUBCASE("zero feature only advances the counter") {
    RecurrentState st(1, 3, 2);
    st.Update(RandomNonneg(3, rng), RandomVec(2, rng));
    const std::vector<double> s(st.s().begin(), st.s().end()), z(st.z().begin(), st.z().end());
    st.Update(std::vector<double>(3, 0.0), RandomVec(2, rng));
    CHECK(st.step() == 2);
    CHECK(MaxAbsDiff(st.s(), s) == 0.0);
    CHECK(MaxAbsDiff(st.z(), z) == 0.0);
  }
  SUBCASE("sequential updates equal batch sums, z nondecreasing") {
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
      Rng r(seed);
      const std::size_t heads = 2, k = 5, d = 3, n = 30;
      RecurrentState st(heads, k, d);
      std::vector<double> s(heads * k * d, 0.0), z(heads * k, 0.0);
      for (std::size_t i = 0; i < n; ++i) {
        const auto f = RandomNonneg(heads * k, r), v = RandomVec(heads * d, r);
        const std::vector<double> before(st.z().begin(), st.z().end());
        st.Update(f, v);
        for (std::size_t a = 0; a < heads * k; ++a) CHECK(st.z()[a] >= before[a]);
        for (std::size_t h = 0; h < heads; ++h)
          for (std::size_t a = 0; a < k; ++a) {
            z[h * k + a] += f[h * k + a];
            for (std::size_t c = 0; c < d; ++c) s[(h * k + a) * d + c] += f[h * k + a] * v[h * d + c];
          }
      }
      CHECK(MaxAbsDiff(st.s(), s) <= 1e-12);
      CHECK(MaxAbsDiff(st.z(), z) <= 1e-12);
    }
  }
  SUBCASE("width mismatch") {
    RecurrentState st(1, 3, 2);
    CHECK_THROWS_AS(st.Update(std::vector<double>(2), std::vector<double>(2)), DimensionError);
  }
}

TEST_CASE("readout") {
  Rng rng(2);
  SUBCASE("one position returns its value") {
    RecurrentState st(2, 4, 3);
    const auto v = RandomVec(6, rng);
    st.Update(RandomNonneg(8, rng), v);
    std::vector<double> out(6);
    st.Readout(RandomNonneg(8, rng), out);
    CHECK(MaxAbsDiff(out, v) < 1e-14);
  }
  SUBCASE("zero query hits the guard") {
    RecurrentState st(1, 4, 3);
    st.Update(RandomNonneg(4, rng), RandomVec(3, rng));
    std::vector<double> out(3, 7.0);
    st.Readout(std::vector<double>(4, 0.0), out);
    for (double x : out) CHECK(x == 0.0);
  }
  SUBCASE("empty state") {
    RecurrentState st(1, 4, 3);
    std::vector<double> out(3);
    CHECK_THROWS_AS(st.Readout(RandomNonneg(4, rng), out), ContractError);
  }
  SUBCASE("matches parallel linear attention position by position") {
    for (std::uint64_t seed = 0; seed < 50; ++seed) {
      Rng r(seed);
      const std::size_t heads = 1 + seed % 3, k = 2 + seed % 4, d = 1 + seed % 5, n = 1 + seed % 40;
      Tensor fq({n, heads * k}, RandomNonneg(n * heads * k, r));
      Tensor fk({n, heads * k}, RandomNonneg(n * heads * k, r));
      Tensor v = RandomTensor({n, heads * d}, r);
      const Tensor parallel = LinearAttention(fq, fk, v, {1, n, n, heads, true});
      RecurrentState st(heads, k, d);
      std::vector<double> out(heads * d);
      double worst = 0.0;
      for (std::size_t i = 0; i < n; ++i) {
        st.Update(fk.data().subspan(i * heads * k, heads * k), v.data().subspan(i * heads * d, heads * d));
        st.Readout(fq.data().subspan(i * heads * k, heads * k), out);
        worst = std::max(worst, MaxAbsDiff(out, parallel.data().subspan(i * heads * d, heads * d)));
      }
      CHECK(worst <= 1e-10);
    }
  }
}

TEST_CASE("cross state precomputation") {
  Rng rng(3);
  SUBCASE("single position") {
    Tensor fk({1, 3}, RandomNonneg(3, rng));
    Tensor v({1, 2}, RandomVec(2, rng));
    const RecurrentState st = PrecomputeCrossState(fk, v, 1);
    for (std::size_t a = 0; a < 3; ++a)
      for (std::size_t c = 0; c < 2; ++c) CHECK(st.s()[a * 2 + c] == fk.data()[a] * v.data()[c]);
  }
  SUBCASE("equals a fold of updates") {
    Tensor fk({7, 6}, RandomNonneg(42, rng));
    Tensor v({7, 4}, RandomVec(28, rng));
    const RecurrentState st = PrecomputeCrossState(fk, v, 2);
    RecurrentState fold(2, 3, 2);
    for (std::size_t j = 0; j < 7; ++j) fold.Update(fk.data().subspan(j * 6, 6), v.data().subspan(j * 4, 4));
    CHECK(MaxAbsDiff(st.s(), fold.s()) == 0.0);
    CHECK(MaxAbsDiff(st.z(), fold.z()) == 0.0);
    CHECK(st.step() == 7);
  }
  SUBCASE("empty source") {
    CHECK_THROWS_AS(PrecomputeCrossState(Tensor::Zeros({0, 3}), Tensor::Zeros({0, 2}), 1),
                    ContractError);
  }
}

TEST_CASE("feature map merge") {
  Rng rng(4);
  auto w = AttentionWeights::Init(2, 3, rng);
  for (Tensor* b : {&w.bq, &w.bk}) {
    for (double& x : b->mutable_data()) x = rng.Normal();
  }
  SUBCASE("identity feature map leaves projections alone") {
    auto phi = MakeFeatureMap(FeatureMapKind::kMlpRelu, 2, 3, 3, rng);
    auto pw = phi.weight.mutable_data();
    std::fill(pw.begin(), pw.end(), 0.0);
    for (std::size_t h = 0; h < 2; ++h)
      for (std::size_t i = 0; i < 3; ++i) pw[(h * 3 + i) * 3 + i] = 1.0;
    const auto m = MergeFeatureMap(w, phi);
    CHECK(MaxAbsDiff(m.wq, w.wq.data()) == 0.0);
    CHECK(MaxAbsDiff(m.bq, w.bq.data()) == 0.0);
    CHECK(MaxAbsDiff(m.wk, w.wk.data()) == 0.0);
  }
  SUBCASE("zero input and zero query bias give relu(b_phi)") {
    auto phi = MakeFeatureMap(FeatureMapKind::kMlpRelu, 2, 3, 4, rng);
    for (double& x : phi.bias.mutable_data()) x = rng.Normal();
    auto wz = w;
    wz.bq = Tensor::Zeros({6});
    const auto m = MergeFeatureMap(wz, phi);
    std::vector<double> out(8);
    m.ApplyQ(std::vector<double>(6, 0.0), out);
    for (std::size_t i = 0; i < 8; ++i) CHECK(out[i] == std::max(phi.bias.data()[i], 0.0));
  }
  SUBCASE("merged path equals composed path") {
    auto phi = MakeFeatureMap(FeatureMapKind::kMlpRelu, 2, 3, 5, rng);
    for (double& x : phi.bias.mutable_data()) x = rng.Normal();
    const auto m = MergeFeatureMap(w, phi);
    double worst = 0.0;
    for (int trial = 0; trial < 100; ++trial) {
      const Tensor x = RandomTensor({1, 6}, rng, 1.0, false);
      NoGradGuard g;
      const auto p = ProjectQkv(x, x, w);
      const Tensor fq = ApplyFeatureMap(phi, p.q), fk = ApplyFeatureMap(phi, p.k);
      std::vector<double> mq(10), mk(10);
      m.ApplyQ(x.data(), mq);
      m.ApplyK(x.data(), mk);
      worst = std::max({worst, MaxAbsDiff(mq, fq.data()), MaxAbsDiff(mk, fk.data())});
    }
    CHECK(worst <= 1e-12);
  }
  SUBCASE("only mlp merges") {
    auto phi = MakeFeatureMap(FeatureMapKind::kElu, 2, 3, 3, rng);
    CHECK_THROWS_AS(MergeFeatureMap(w, phi), ConfigError);
  }
}

TEST_CASE("raw feature rows match the taped map") {
  Rng rng(5);
  for (auto kind : {FeatureMapKind::kMlpRelu, FeatureMapKind::kElu, FeatureMapKind::kRfa}) {
    auto phi = MakeFeatureMap(kind, 3, 4, 4, rng);
    const Tensor x = RandomTensor({5, 12}, rng, 2.0, false);
    const Tensor ref = ApplyFeatureMap(phi, x);
    std::vector<double> row(12);
    for (std::size_t i = 0; i < 5; ++i) {
      ApplyFeatureMapRow(phi, x.data().subspan(i * 12, 12), row);
      CHECK(MaxAbsDiff(row, ref.data().subspan(i * 12, 12)) < 1e-13);
    }
  }
}

TEST_CASE("incremental decoder matches the parallel forward") {
  const std::vector<std::vector<AttentionKind>> configs{
      {AttentionKind::kMlp, AttentionKind::kMlp},
      {AttentionKind::kElu},
      {AttentionKind::kRfa, AttentionKind::kRfa},
      {AttentionKind::kSoftmax, AttentionKind::kMlp},
      {AttentionKind::kSoftmax}};
  for (std::size_t ci = 0; ci < configs.size(); ++ci) {
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
      CAPTURE(ci);
      CAPTURE(seed);
      Rng rng(seed);
      const std::size_t k = configs[ci][0] == AttentionKind::kElu ? 4 : 6;
      const Model m = Model::Init(Lm(configs[ci], k), seed + 17);
      const auto tokens = RandomTokens(1 + seed * 5, 13, rng);
      IncrementalDecoder dec(m);
      const auto stepped = DecodeAll(dec, tokens);
      NoGradGuard g;
      CHECK(MaxAbsDiff(stepped, LmForward(m, tokens).data()) <= 1e-10);
    }
  }
}

TEST_CASE("batched decoding equals single streams") {
  Rng rng(6);
  const Model m = Model::Init(Lm({AttentionKind::kSoftmax, AttentionKind::kRfa}), 2);
  const auto a = RandomTokens(9, 13, rng), b = RandomTokens(9, 13, rng);
  IncrementalDecoder both(m, 2), da(m), db(m);
  const auto la = DecodeAll(da, a), lb = DecodeAll(db, b);
  for (std::size_t i = 0; i < 9; ++i) {
    const int pair[2] = {a[i], b[i]};
    auto l = both.Step(pair);
    CHECK(MaxAbsDiff(l.subspan(0, 13), std::span<const double>(la).subspan(i * 13, 13)) < 1e-12);
    CHECK(MaxAbsDiff(l.subspan(13, 13), std::span<const double>(lb).subspan(i * 13, 13)) < 1e-12);
  }
}

TEST_CASE("seq2seq incremental decoding") {
  Rng rng(7);
  for (auto self : {AttentionKind::kSoftmax, AttentionKind::kMlp}) {
    for (auto cross : {AttentionKind::kSoftmax, AttentionKind::kMlp, AttentionKind::kRfa}) {
      ModelConfig c = Lm({self, self});
      c.seq2seq = true;
      c.k_cross = 5;
      c.cross_kinds.assign(2, cross);
      const Model m = Model::Init(c, 3);
      const auto src = RandomTokens(8, 13, rng), tgt = RandomTokens(10, 13, rng);
      IncrementalDecoder dec(m);
      dec.SetSource(src);
      const auto stepped = DecodeAll(dec, tgt);
      NoGradGuard g;
      CHECK(MaxAbsDiff(stepped, Seq2SeqForward(m, src, tgt).data()) <= 1e-10);
    }
  }
}

TEST_CASE("cross state is fixed for the whole decode") {
  ModelConfig c = Lm({AttentionKind::kMlp});
  c.seq2seq = true;
  c.k_cross = 5;
  c.cross_kinds = {AttentionKind::kMlp};
  const Model m = Model::Init(c, 4);
  Rng rng(8);
  IncrementalDecoder dec(m);
  dec.SetSource(RandomTokens(6, 13, rng));
  const RecurrentState* first = &dec.CrossState(0, 0);
  const std::vector<double> s(first->s().begin(), first->s().end());
  for (int i = 0; i < 100; ++i) {
    const int t = rng.UniformInt(13);
    dec.Step(std::span<const int>(&t, 1));
    CHECK(&dec.CrossState(0, 0) == first);
  }
  CHECK(MaxAbsDiff(first->s(), s) == 0.0);
  CHECK(first->step() == 6);
}

TEST_CASE("state footprint") {
  SUBCASE("one layer at r=8, k=32, d=128") {
    ModelConfig c;
    c.layers = 1;
    c.heads = 8;
    c.head_dim = 128;
    c.k_causal = 32;
    c.causal_kinds = {AttentionKind::kMlp};
    CHECK(StateFootprint(c) == 33024);
    c.k_causal = 64;
    CHECK(StateFootprint(c) == 2 * 33024);
  }
  SUBCASE("measured count is constant and equals the formula") {
    const Model m = Model::Init(Lm({AttentionKind::kMlp, AttentionKind::kMlp}), 5);
    IncrementalDecoder dec(m, 3);
    Rng rng(9);
    for (int step = 0; step < 200; ++step) {
      const int t[3] = {rng.UniformInt(13), rng.UniformInt(13), rng.UniformInt(13)};
      dec.Step(t);
      CHECK(dec.AttentionStateElements() == 3 * StateFootprint(m.config()));
    }
  }
  SUBCASE("softmax cache grows linearly") {
    const Model m = Model::Init(Lm({AttentionKind::kSoftmax, AttentionKind::kMlp}), 5);
    IncrementalDecoder dec(m);
    for (std::size_t step = 1; step <= 50; ++step) {
      const int t = 1;
      dec.Step(std::span<const int>(&t, 1));
      CHECK(dec.AttentionStateElements() == StateFootprint(m.config()) + 2 * step * 8);
    }
  }
}

TEST_CASE("generation") {
  Rng rng(10);
  SUBCASE("guards") {
    const Model m = Model::Init(Lm({AttentionKind::kMlp}), 1);
    const std::vector<int> prompt{1, 2};
    CHECK_THROWS_AS(Generate(m, prompt, 0, DecodeMode::kRecurrent), ContractError);
    CHECK_THROWS_AS(Generate(m, std::vector<int>{}, 3, DecodeMode::kRecurrent), ContractError);
  }
  SUBCASE("recurrent and parallel decode agree for 256 steps") {
    for (auto kinds : {std::vector<AttentionKind>{AttentionKind::kMlp, AttentionKind::kMlp},
                       std::vector<AttentionKind>{AttentionKind::kSoftmax, AttentionKind::kRfa}}) {
      const Model m = Model::Init(Lm(kinds), 11);
      const auto prompt = RandomTokens(8, 13, rng);
      const auto a = Generate(m, prompt, 256, DecodeMode::kRecurrent);
      const auto b = Generate(m, prompt, 256, DecodeMode::kParallel);
      CHECK(a.size() == 256);
      CHECK(a == b);
    }
  }
  SUBCASE("seq2seq modes agree") {
    ModelConfig c = Lm({AttentionKind::kMlp});
    c.seq2seq = true;
    c.cross_kinds = {AttentionKind::kMlp};
    const Model m = Model::Init(c, 12);
    const auto src = RandomTokens(10, 13, rng);
    CHECK(GenerateSeq2Seq(m, src, 0, 40, DecodeMode::kRecurrent) ==
          GenerateSeq2Seq(m, src, 0, 40, DecodeMode::kParallel));
  }
}
