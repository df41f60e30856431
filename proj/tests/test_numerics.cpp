#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>

#include "dirgap/checks.hpp"
#include "dirgap/models.hpp"
#include "dirgap/nn/checkpoint.hpp"
#include "dirgap/nn/gradcheck.hpp"
#include "dirgap/nn/loss.hpp"
#include "dirgap/nn/ops.hpp"

using namespace dirgap;
using namespace dirgap::nn;

namespace {

// Reference -log softmax(row)[t] computed directly from the definition.
double naive_nll(const std::vector<double>& row, int t) {
  double z = 0;
  for (double v : row) z += std::exp(v);
  return -std::log(std::exp(row[t]) / z);
}

}  // namespace

TEST(CrossEntropy, UniformLogits) {
  DenseArray<double> logits({10, 41});
  std::vector<std::int32_t> tgt(10);
  std::vector<std::uint8_t> mask(10, 0);
  for (int i = 0; i < 10; ++i) tgt[i] = (i * 7) % 41;
  for (int i = 1; i < 9; ++i) mask[i] = 1;
  const auto ce = masked_cross_entropy(logits, tgt, mask);
  EXPECT_NEAR(ce.loss, std::log(41.0), 1e-12);
  EXPECT_NEAR(ce.loss, 3.7136, 1e-4);
  EXPECT_EQ(ce.count, 8u);
}

TEST(CrossEntropy, TwoClasses) {
  DenseArray<double> logits({1, 2});
  const auto ce = masked_cross_entropy(logits, std::vector<std::int32_t>{0}, std::vector<std::uint8_t>{1});
  EXPECT_NEAR(ce.loss, 0.6931471805599453, 1e-15);
}

TEST(CrossEntropy, MarginLimit) {
  double prev = 1e9;
  for (double margin : {1.0, 5.0, 20.0, 100.0}) {
    DenseArray<double> logits({1, 5});
    logits[2] = margin;
    const auto ce = masked_cross_entropy(logits, std::vector<std::int32_t>{2}, std::vector<std::uint8_t>{1});
    EXPECT_LT(ce.loss, prev);
    prev = ce.loss;
  }
  EXPECT_LT(prev, 1e-40);
}

TEST(CrossEntropy, MatchesNaiveFormula) {
  Rng rng(4);
  DenseArray<double> logits({6, 7});
  for (auto& v : logits.values) v = rng.normal(0, 2);
  std::vector<std::int32_t> tgt{0, 3, 6, 2, 1, 5};
  std::vector<std::uint8_t> mask{1, 0, 1, 1, 0, 1};
  double expect = 0;
  int n = 0;
  for (int r = 0; r < 6; ++r) {
    if (!mask[r]) continue;
    expect += naive_nll(std::vector<double>(logits.values.begin() + r * 7, logits.values.begin() + r * 7 + 7), tgt[r]);
    ++n;
  }
  EXPECT_NEAR(masked_cross_entropy(logits, tgt, mask).loss, expect / n, 1e-12);
}

TEST(CrossEntropy, ShiftInvariance) {
  Rng rng(5);
  for (int trial = 0; trial < 20; ++trial) {
    DenseArray<double> logits({4, 9});
    for (auto& v : logits.values) v = rng.normal(0, 3);
    std::vector<std::int32_t> tgt{1, 8, 0, 4};
    std::vector<std::uint8_t> mask{1, 1, 0, 1};
    const double base = masked_cross_entropy(logits, tgt, mask).loss;
    const double shift = rng.normal(0, 50);
    for (std::size_t c = 0; c < 9; ++c) logits.at(2, c) += rng.normal(0, 1);  // masked row
    for (std::size_t c = 0; c < 9; ++c) logits.at(1, c) += shift;
    EXPECT_NEAR(masked_cross_entropy(logits, tgt, mask).loss, base, 1e-9);
  }
}

TEST(CrossEntropy, SoftmaxRowsSumToOne) {
  // d loss / d logits = (softmax - onehot) / count, so every row sums to
  // zero exactly when the softmax row sums to one.
  Rng rng(6);
  Tape<double> tape;
  Var logits = tape.make({5, 11}, true);
  for (auto& v : tape.value(logits)) v = rng.normal(0, 4);
  std::vector<std::int32_t> tgt{0, 1, 2, 3, 4};
  std::vector<std::uint8_t> mask(5, 1);
  auto out = masked_cross_entropy(tape, logits, tgt, mask);
  tape.backward(out.loss);
  const auto g = tape.grad(logits);
  for (int r = 0; r < 5; ++r) {
    double row = 0, p_sum = 0;
    for (int c = 0; c < 11; ++c) {
      row += g[r * 11 + c];
      p_sum += g[r * 11 + c] * 5 + (c == tgt[r] ? 1.0 : 0.0);
    }
    EXPECT_NEAR(row, 0.0, 1e-12);
    EXPECT_NEAR(p_sum, 1.0, 1e-12);
  }
}

TEST(CrossEntropy, Errors) {
  DenseArray<double> logits({3, 4});
  std::vector<std::int32_t> tgt{0, 1, 2};
  EXPECT_THROW(masked_cross_entropy(logits, tgt, std::vector<std::uint8_t>{0, 0, 0}), EmptyTargetError);
  EXPECT_THROW(masked_cross_entropy(logits, std::vector<std::int32_t>{0, 9, 1}, std::vector<std::uint8_t>{1, 1, 1}),
               ConfigError);
  DenseArray<double> one({3, 1});
  EXPECT_THROW(masked_cross_entropy(one, std::vector<std::int32_t>{0, 0, 0}, std::vector<std::uint8_t>{1, 1, 1}),
               ConfigError);
}

TEST(Backward, SumGivesOnes) {
  ParameterStore<double> p;
  auto& w = p.add("w", {3, 4});
  for (std::size_t i = 0; i < w.value.size(); ++i) w.value[i] = 0.1 * i - 0.3;
  Tape<double> tape;
  Var loss = sum(tape, tape.param(p, "w"));
  tape.backward(loss);
  for (double g : p.at("w").grad.values) EXPECT_EQ(g, 1.0);
}

TEST(Backward, HalfSquaredNormGivesW) {
  ParameterStore<double> p;
  auto& w = p.add("w", {2, 5});
  for (std::size_t i = 0; i < w.value.size(); ++i) w.value[i] = std::sin(1.0 + i);
  Tape<double> tape;
  tape.backward(half_sum_squares(tape, tape.param(p, "w")));
  EXPECT_EQ(p.at("w").grad.values, p.at("w").value.values);
}

TEST(Backward, FrozenEntriesUntouched) {
  ParameterStore<double> p;
  p.add("a", {3});
  p.add("b", {3});
  p.at("b").trainable = false;
  p.at("b").grad.values = {7, 8, 9};
  Tape<double> tape;
  Var s = add(tape, tape.param(p, "a"), tape.param(p, "b"));
  tape.backward(sum(tape, s));
  EXPECT_EQ(p.at("a").grad.values, (nn::Buffer<double>{1, 1, 1}));
  EXPECT_EQ(p.at("b").grad.values, (nn::Buffer<double>{7, 8, 9}));
}

TEST(Backward, StateErrors) {
  Tape<double> empty;
  EXPECT_THROW(empty.backward(Var{0}), StateError);
  ParameterStore<double> p;
  p.add("w", {2});
  Tape<double> tape;
  Var l = sum(tape, tape.param(p, "w"));
  tape.backward(l);
  EXPECT_THROW(tape.backward(l), StateError);
  Tape<double> nograd(false);
  Var l2 = sum(nograd, nograd.param(p, "w"));
  EXPECT_THROW(nograd.backward(l2), StateError);
  Tape<double> vec;
  Var v = vec.param(p, "w");
  EXPECT_THROW(vec.backward(v), StateError);
}

TEST(Backward, NonFiniteIsAnError) {
  ParameterStore<double> p;
  p.add("x", {1, 2}).value.values = {1.0, std::nan("")};
  p.add("w", {2, 2});
  Tape<double> tape;
  EXPECT_THROW(linear(tape, tape.param(p, "x"), tape.param(p, "w")), NumericError);
}

TEST(GradCheck, TinyTransformer) {
  const auto r = gradcheck_tiny_transformer();
  EXPECT_TRUE(r.pass) << r.worst_group << " " << r.max_rel_error;
  EXPECT_EQ(r.groups.size(), 2u * 12 + 4);
  for (const auto& g : r.groups) EXPECT_GE(g.checked, 16u) << g.name;
}

TEST(GradCheck, TinyTransformerLora) {
  const auto r = gradcheck_tiny_transformer({}, true);
  EXPECT_TRUE(r.pass) << r.worst_group << " " << r.max_rel_error;
  for (const auto& g : r.groups) EXPECT_TRUE(g.name.starts_with("lora.")) << g.name;
}

TEST(GradCheck, TinyMlp) {
  const auto r = gradcheck_tiny_mlp();
  EXPECT_TRUE(r.pass) << r.worst_group << " " << r.max_rel_error;
}

TEST(GradCheck, OneLayerTransformerAndSmallestMlp) {
  // One block, d=16, 2 heads; MLP with L=2, d_emb=4, d_hidden=8.
  MappingConfig m;
  m.spec.alphabet = "abc";
  m.spec.length = 2;
  m.branching = 1;
  m.n_pairs = 4;
  m.seed = 2;
  const auto ps = generate(m);
  const Vocab vocab(m.spec);
  TransformerConfig tc = tiny_transformer_config(vocab.size());
  tc.n_layers = 1;
  std::vector<TaskInstance> batch;
  for (const auto& p : ps.pairs) batch.push_back(encode_example(p, Direction::Forward, vocab, tc.max_len));
  auto tp = transformer_init<double>(tc, 1);
  dirgap::detail::jitter(tp, 2, 0.3);
  const auto tr = grad_check(
      [&](Tape<double>& t, ParameterStore<double>& p) { return transformer_forward(t, p, tc, batch, false).loss; }, tp);
  EXPECT_TRUE(tr.pass) << tr.worst_group << " " << tr.max_rel_error;

  MLPConfig mc;
  mc.seq_len = 2;
  mc.vocab_size = 3;
  mc.d_emb = 4;
  mc.d_hidden = 8;
  std::vector<std::int32_t> src, tgt;
  for (const auto& p : ps.pairs) {
    for (auto id : alphabet_ids(p.a, m.spec)) src.push_back(id);
    for (auto id : alphabet_ids(p.b, m.spec)) tgt.push_back(id);
  }
  auto mp = mlp_init<double>(mc, 3);
  const auto mr = grad_check(
      [&](Tape<double>& t, ParameterStore<double>& p) { return mlp_forward(t, p, mc, src, tgt).loss; }, mp);
  EXPECT_TRUE(mr.pass) << mr.worst_group << " " << mr.max_rel_error;
  for (const auto& g : mr.groups) EXPECT_EQ(g.checked, std::min<std::size_t>(32, mp.at(g.name).value.size()));
}

TEST(GradCheck, CorruptedGradientIsCaught) {
  GradCheckOptions opt;
  opt.coords_per_group = 1u << 20;  // every coordinate, so the corrupted one is seen
  opt.after_backward = [](ParameterStore<double>& p) {
    auto& g = p.at("head.weight").grad;
    std::size_t best = 0;
    for (std::size_t i = 1; i < g.size(); ++i)
      if (std::abs(g[i]) > std::abs(g[best])) best = i;
    g[best] *= 1.1;
  };
  const auto r = gradcheck_tiny_mlp(opt);
  EXPECT_FALSE(r.pass);
  EXPECT_EQ(r.worst_group, "head.weight");
  EXPECT_NEAR(r.max_rel_error, 0.1 / 1.1, 1e-3);
}

TEST(Clip, Examples) {
  auto store = [](std::vector<double> g) {
    ParameterStore<double> p;
    p.add("w", {g.size()}).grad.values.assign(g.begin(), g.end());
    return p;
  };
  auto p = store({2.0, 0.0});
  EXPECT_DOUBLE_EQ(clip_global_norm(p, 1.0), 0.5);
  EXPECT_DOUBLE_EQ(p.at("w").grad[0], 1.0);
  p = store({0.3, 0.4});
  EXPECT_DOUBLE_EQ(clip_global_norm(p, 1.0), 1.0);
  EXPECT_DOUBLE_EQ(p.at("w").grad[1], 0.4);
  p = store({0.0, 0.0});
  EXPECT_DOUBLE_EQ(clip_global_norm(p, 1.0), 1.0);
  EXPECT_DOUBLE_EQ(global_grad_norm(p), 0.0);

  ParameterStore<double> two;
  two.add("a", {1}).grad.values = {3.0};
  two.add("b", {1}).grad.values = {4.0};
  two.add("c", {1}).grad.values = {100.0};
  two.at("c").trainable = false;
  EXPECT_DOUBLE_EQ(clip_global_norm(two, 1.0), 0.2);
  EXPECT_NEAR(global_grad_norm(two), 1.0, 1e-15);
  EXPECT_DOUBLE_EQ(two.at("c").grad[0], 100.0);
}

TEST(Checkpoint, RoundTripIsBitExact) {
  TransformerConfig tc;
  tc.n_layers = 1;
  tc.d_model = 8;
  tc.n_heads = 2;
  tc.d_ff = 16;
  auto p = transformer_init<float>(tc, 5);
  p = lora_wrap(p, tc, LoraConfig::with_rank(2), 6);
  const auto path = std::filesystem::temp_directory_path() / "dirgap_ckpt_roundtrip.bin";
  save_checkpoint(p, path);
  const auto q = load_checkpoint<float>(path);
  ASSERT_EQ(q.size(), p.size());
  for (const auto& [name, e] : p) {
    ASSERT_TRUE(q.contains(name)) << name;
    const auto& f = q.at(name);
    EXPECT_EQ(f.value.shape, e.value.shape);
    EXPECT_EQ(f.trainable, e.trainable);
    EXPECT_EQ(f.decay, e.decay);
    EXPECT_EQ(std::memcmp(f.value.data(), e.value.data(), e.value.size() * sizeof(float)), 0) << name;
  }
  std::ifstream manifest(manifest_path(path));
  std::string first;
  std::getline(manifest, first);
  EXPECT_NE(first.find('\t'), std::string::npos);

  auto wrong = transformer_init<float>([&] {
    auto t = tc;
    t.d_model = 16;
    return t;
  }(), 5);
  EXPECT_THROW(load_into(wrong, path), LoadError);
  std::filesystem::remove(path);
  std::filesystem::remove(manifest_path(path));
  EXPECT_THROW(load_checkpoint<float>(path), LoadError);
}
