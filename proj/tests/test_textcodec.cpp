#include <gtest/gtest.h>

#include "dirgap/mapgen.hpp"
#include "dirgap/textcodec.hpp"

using namespace dirgap;

namespace {

// Counting oracle: rendered length of "x: {src} y: {tgt}".
std::size_t rendered_length(std::size_t src, std::size_t tgt) {
  return std::string("x: ").size() + src + std::string(" y: ").size() + tgt;
}

}  // namespace

TEST(TextCodec, RenderPrompt) {
  const Pair p{"abcd1234", "zz99xx00"};
  EXPECT_EQ(render_prompt(p, Direction::Forward), "x: abcd1234 y: zz99xx00");
  EXPECT_EQ(render_prompt(p, Direction::Inverse), "x: zz99xx00 y: abcd1234");
  EXPECT_EQ(render_prompt({"a", "b"}, Direction::Forward), "x: a y: b");
}

TEST(TextCodec, VocabLayout) {
  const Vocab v(StringSpec{});
  // 36 alphabet symbols; 'x' and 'y' are already in it, so ' ' and ':' are
  // the only additions before PAD.
  EXPECT_EQ(v.size(), 39);
  EXPECT_EQ(v.pad_id(), 38);
  EXPECT_EQ(v.id('a'), 0);
  EXPECT_EQ(v.id('9'), 35);
  EXPECT_EQ(v.id(' '), 36);
  EXPECT_EQ(v.id(':'), 37);
  EXPECT_THROW(v.id('Z'), EncodingError);
  const auto syms = v.symbols();
  ASSERT_EQ(syms.size(), 39u);
  EXPECT_EQ(syms[36], "<space>");
  EXPECT_EQ(syms.back(), "<pad>");

  StringSpec digits;
  digits.alphabet = "01";
  EXPECT_EQ(Vocab(digits).size(), 2 + 4 + 1);
}

TEST(TextCodec, EncodeMaskAndPadding) {
  const Vocab v(StringSpec{});
  const Pair p{"abcd1234", "zz99xx00"};
  for (auto d : {Direction::Forward, Direction::Inverse}) {
    const auto ti = encode_example(p, d, v, 32);
    ASSERT_EQ(ti.input_ids.size(), 32u);
    int trues = 0;
    for (auto m : ti.loss_mask) trues += m;
    EXPECT_EQ(trues, 8);
    EXPECT_EQ(ti.prompt_len, 15);
    for (int i = 0; i < ti.prompt_len; ++i) EXPECT_FALSE(ti.loss_mask[i]);
    for (std::size_t i = 0; i < 32; ++i)
      if (ti.input_ids[i] == v.pad_id()) EXPECT_FALSE(ti.loss_mask[i]);
    std::string target;
    for (std::size_t i = 0; i < 32; ++i)
      if (ti.loss_mask[i]) target += v.symbol(ti.input_ids[i]);
    EXPECT_EQ(target, oriented(p, d).second);
  }
}

TEST(TextCodec, ExactFitAndOverflow) {
  const Vocab v(StringSpec{});
  const Pair p{"abcd1234", "zz99xx00"};
  const auto exact = static_cast<int>(rendered_length(8, 8));
  ASSERT_EQ(exact, static_cast<int>(render_prompt(p, Direction::Forward).size()));
  const auto ti = encode_example(p, Direction::Forward, v, exact);
  EXPECT_EQ(std::count(ti.input_ids.begin(), ti.input_ids.end(), v.pad_id()), 0);
  EXPECT_EQ(std::count(ti.loss_mask.begin(), ti.loss_mask.end(), 1), 8);
  try {
    encode_example(p, Direction::Forward, v, exact - 1);
    FAIL() << "expected EncodingError";
  } catch (const EncodingError& e) {
    EXPECT_NE(std::string(e.what()).find("abcd1234"), std::string::npos);
  }
}

TEST(TextCodec, Decode) {
  const Vocab v(StringSpec{});
  EXPECT_EQ(decode(encode_text("x: a y: b", v), v), "x: a y: b");
  EXPECT_EQ(decode(std::vector<std::int32_t>(5, v.pad_id()), v), "");
  EXPECT_EQ(decode({v.id('z')}, v), "z");
  EXPECT_THROW(decode({99}, v), DecodeError);
  EXPECT_THROW(decode({-1}, v), DecodeError);
}

TEST(TextCodec, RoundTripAndSymmetryOverGeneratedPairs) {
  MappingConfig m;
  m.branching = 5;
  m.n_pairs = 500;
  m.seed = 8;
  const auto ps = generate(m);
  const Vocab v(m.spec);
  for (const auto& p : ps.pairs) {
    const auto f = encode_example(p, Direction::Forward, v);
    const auto i = encode_example(p, Direction::Inverse, v);
    EXPECT_EQ(decode(f.input_ids, v), render_prompt(p, Direction::Forward));
    EXPECT_EQ(decode(i.input_ids, v), render_prompt(p, Direction::Inverse));
    EXPECT_EQ(f.prompt_len, i.prompt_len);
    EXPECT_EQ(f.loss_mask, i.loss_mask);
  }
}

TEST(TextCodec, ParseDirection) {
  EXPECT_EQ(parse_direction("forward"), Direction::Forward);
  EXPECT_EQ(parse_direction("inv"), Direction::Inverse);
  EXPECT_THROW(parse_direction("sideways"), ConfigError);
}
