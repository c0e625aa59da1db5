#include <catch2/catch_amalgamated.hpp>

#include <string>
#include <vector>

#include "blankfill/layout.hpp"
#include "support.hpp"

using namespace blankfill;

namespace {

// x1..x6 as ids 10..15
const std::vector<TokenId> kFig2Tokens{10, 11, 12, 13, 14, 15};
const SpanSet kFig2Spans{{Span{2, 1}, Span{4, 2}}};
const Permutation kFig2Order{{1, 0}};

constexpr TokenId M = Vocab::kMask, S = Vocab::kStart, E = Vocab::kEnd, P = Vocab::kPad;

std::vector<std::string> mask_rows(const MaskMatrix& m) {
  std::vector<std::string> rows;
  for (std::size_t q = 0; q < m.side; ++q) {
    std::string r;
    for (std::size_t k = 0; k < m.side; ++k) r.push_back(m(q, k) ? 'T' : 'F');
    rows.push_back(r);
  }
  return rows;
}

}  // namespace

TEST_CASE("six-token golden layout") {
  const GlmExample ex = build_example(kFig2Tokens, kFig2Spans, kFig2Order, Vocab());
  CHECK(ex.part_a_len == 5);
  CHECK(ex.input_ids == std::vector<TokenId>{10, 11, M, 13, M, S, 14, 15, S, 12});
  CHECK(ex.pos1 == std::vector<std::size_t>{0, 1, 2, 3, 4, 4, 4, 4, 2, 2});
  CHECK(ex.pos2 == std::vector<std::size_t>{0, 0, 0, 0, 0, 1, 2, 3, 1, 2});
  CHECK(ex.target_ids == std::vector<TokenId>{P, P, P, P, P, 14, 15, E, 12, E});
  CHECK(ex.loss_mask == std::vector<bool>{false, false, false, false, false, true, true, true, true, true});
  CHECK(ex.b_span_lens == std::vector<std::size_t>{3, 2});

  const std::vector<std::string> expected{
      "TTTTTFFFFF", "TTTTTFFFFF", "TTTTTFFFFF", "TTTTTFFFFF", "TTTTTFFFFF",
      "TTTTTTFFFF", "TTTTTTTFFF", "TTTTTTTTFF", "TTTTTTTTTF", "TTTTTTTTTT",
  };
  CHECK(mask_rows(build_attention_mask(ex.mask_spec())) == expected);
}

TEST_CASE("sentinel mode changes only the Part A mask tokens") {
  const Vocab v = Vocab::build_from_text("x", 16, 4);
  const GlmExample plain = build_example(kFig2Tokens, kFig2Spans, kFig2Order, v);
  const GlmExample sent = build_example(kFig2Tokens, kFig2Spans, kFig2Order, v, {true, 0});
  CHECK(sent.input_ids[2] == v.sentinel(1));
  CHECK(sent.input_ids[4] == v.sentinel(2));
  GlmExample patched = sent;
  patched.input_ids[2] = M;
  patched.input_ids[4] = M;
  CHECK(patched == plain);

  const Vocab few = Vocab::build_from_text("x", 16, 1);
  CHECK_THROWS_AS(build_example(kFig2Tokens, kFig2Spans, kFig2Order, few, {true, 0}), ContractError);
}

TEST_CASE("empty span set leaves Part B empty") {
  const GlmExample ex = build_example(kFig2Tokens, SpanSet{}, Permutation{}, Vocab());
  CHECK(ex.input_ids == kFig2Tokens);
  CHECK(ex.part_b_len() == 0);
  for (const bool b : ex.loss_mask) CHECK_FALSE(b);
}

TEST_CASE("layout errors") {
  CHECK_THROWS_AS(build_example(kFig2Tokens, kFig2Spans, Permutation{{0, 0}}, Vocab()), ContractError);
  CHECK_THROWS_AS(build_example(kFig2Tokens, kFig2Spans, kFig2Order, Vocab(), {false, 9}), LengthError);
  CHECK_NOTHROW(build_example(kFig2Tokens, kFig2Spans, kFig2Order, Vocab(), {false, 10}));
  CHECK_THROWS_AS(build_example(kFig2Tokens, SpanSet{{Span{5, 3}}}, Permutation{{0}}, Vocab()), ContractError);
}

TEST_CASE("attention masks by hand") {
  CHECK(mask_rows(build_attention_mask({2, {2}, false})) ==
        std::vector<std::string>{"TTFF", "TTFF", "TTTF", "TTTT"});
  CHECK(mask_rows(build_attention_mask({3, {}, false})) == std::vector<std::string>{"TTT", "TTT", "TTT"});
  CHECK(mask_rows(build_attention_mask({0, {3}, false})) == std::vector<std::string>{"TFF", "TTF", "TTT"});
  // padding keys are never visible
  CHECK(mask_rows(build_attention_mask({1, {1}, false}, 3)) == std::vector<std::string>{"TFF", "TTF", "TTF"});
}

TEST_CASE("layout invariants over random examples") {
  Rng rng(12);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t len = 2 + rng.uniform_int(40);
    const GlmExample ex = testing::random_example(50, len, rng);
    const std::size_t a = ex.part_a_len;
    for (std::size_t i = 0; i < a; ++i) {
      CHECK(ex.pos2[i] == 0);
      CHECK(ex.pos1[i] == i);
    }
    std::size_t pos = a, loss_count = 0, lens = 0;
    for (const std::size_t l : ex.b_span_lens) {
      lens += l;
      const std::size_t mask_at = ex.pos1[pos];
      CHECK(mask_at < a);
      CHECK(ex.input_ids[mask_at] == M);
      CHECK(ex.input_ids[pos] == S);
      for (std::size_t j = 0; j < l; ++j) {
        CHECK(ex.pos1[pos + j] == mask_at);
        CHECK(ex.pos2[pos + j] == j + 1);
        if (j + 1 < l) CHECK(ex.target_ids[pos + j] == ex.input_ids[pos + j + 1]);
      }
      CHECK(ex.target_ids[pos + l - 1] == E);
      pos += l;
    }
    for (const bool b : ex.loss_mask) loss_count += b ? 1 : 0;
    CHECK(loss_count == lens);
    CHECK(pos == ex.size());

    const MaskMatrix m = build_attention_mask(ex.mask_spec());
    for (std::size_t q = 0; q < m.side; ++q) {
      for (std::size_t k = a; k < m.side; ++k) {
        if (q < a || k > q) CHECK_FALSE(m(q, k));
      }
    }
  }
}

TEST_CASE("shuffle off generates spans left to right") {
  Rng rng(4);
  CorruptionConfig cfg;
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<TokenId> tokens(30);
    for (std::size_t i = 0; i < tokens.size(); ++i) tokens[i] = 10 + i;
    const SpanSet spans = sample_short_spans(tokens.size(), rng, cfg);
    const GlmExample ex = build_example(tokens, spans, permute_spans(spans, rng, false), Vocab());
    std::size_t pos = ex.part_a_len, previous = 0;
    for (const std::size_t l : ex.b_span_lens) {
      CHECK(ex.pos1[pos] >= previous);
      previous = ex.pos1[pos];
      pos += l;
    }
  }
}

TEST_CASE("build_example is pure") {
  CHECK(build_example(kFig2Tokens, kFig2Spans, kFig2Order, Vocab()) ==
        build_example(kFig2Tokens, kFig2Spans, kFig2Order, Vocab()));
}

TEST_CASE("generation contexts") {
  const BlankContext c = build_generation_context(std::vector<TokenId>{10, 11});
  CHECK(c.example.input_ids == std::vector<TokenId>{10, 11, M});
  REQUIRE(c.blanks == std::vector<std::size_t>{2});
  const GlmExample seed = c.seed(0);
  CHECK(seed.input_ids.back() == S);
  CHECK(seed.pos1.back() == 2);
  CHECK(seed.pos2.back() == 1);

  const BlankContext mid = build_generation_context(std::vector<TokenId>{10, M, 11, M}, false);
  CHECK(mid.blanks == std::vector<std::size_t>{1, 3});
  CHECK(mid.seed(0).pos1.back() == 1);
  CHECK(mid.seed(1).pos1.back() == 3);

  const BlankContext collapsed = build_generation_context(std::vector<TokenId>{10, M, M, M, 11}, false);
  CHECK(collapsed.example.input_ids == std::vector<TokenId>{10, M, 11});
  CHECK(collapsed.blanks == std::vector<std::size_t>{1});

  const BlankContext empty = build_generation_context(std::vector<TokenId>{});
  CHECK(empty.example.input_ids == std::vector<TokenId>{M});
  CHECK_THROWS_AS(build_generation_context(std::vector<TokenId>{}, false), ContractError);
  CHECK_THROWS_AS(build_generation_context(std::vector<TokenId>{10}, false), ContractError);
}

TEST_CASE("dump_example lists tokens, positions and mask rows") {
  const Vocab v = Vocab::build_from_text("x1 x2 x3 x4 x5 x6", 16);
  std::vector<TokenId> tokens;
  for (const char* w : {"x1", "x2", "x3", "x4", "x5", "x6"}) tokens.push_back(*v.find(w));
  const std::string dump = dump_example(build_example(tokens, kFig2Spans, kFig2Order, v), v);
  CHECK(dump.find("[START]") != std::string::npos);
  CHECK(dump.find("mask   9 1111111111") != std::string::npos);
  CHECK(dump.find("mask   0 1111100000") != std::string::npos);
}
