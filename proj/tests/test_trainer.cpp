#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <filesystem>
#include <limits>
#include <numeric>
#include <vector>

#include "blankfill/checkpoint.hpp"
#include "blankfill/grad_check.hpp"
#include "blankfill/trainer.hpp"
#include "support.hpp"

using namespace blankfill;
using Catch::Matchers::WithinAbs;
using testing::tiny_config;

namespace {

GlmExample fig2_example() {
  const std::vector<TokenId> tokens{10, 11, 12, 13, 14, 15};
  return build_example(tokens, SpanSet{{Span{2, 1}, Span{4, 2}}}, Permutation{{1, 0}}, Vocab());
}

Parameters<double> scalar_param(double value, const std::string& name = "w") {
  Parameters<double> p;
  p.add(name, Tensor<double>({1}, {value}));
  return p;
}

TrainConfig quiet_config() {
  TrainConfig c;
  c.peak_lr = 0.1;
  c.warmup_steps = 0;
  c.max_steps = 1000;
  c.weight_decay = 0.0;
  return c;
}

struct ToyData {
  Vocab vocab;
  std::vector<Document> docs;
};

ToyData toy_data(std::size_t n_docs, std::uint64_t seed) {
  const std::string corpus = testing::synthetic_corpus(n_docs, 40, 8, 14, seed);
  ToyData d{Vocab::build_from_text(corpus, 64), {}};
  std::istringstream in(corpus);
  d.docs = read_corpus(in, d.vocab);
  return d;
}

TrainConfig toy_train_config() {
  TrainConfig c;
  c.peak_lr = 3e-3;
  c.warmup_steps = 10;
  c.max_steps = 200;
  c.batch_size = 8;
  c.max_seq_len = 32;
  c.seed = 5;
  c.deterministic = true;
  return c;
}

}  // namespace

TEST_CASE("pretrain loss on uniform logits is ln V") {
  const std::vector<GlmExample> batch{fig2_example()};
  Tape<double> tape;
  const Tensor<double> logits = Tensor<double>::zeros({1, 10, 32});
  CHECK_THAT(pretrain_loss(tape, logits, batch).item(), WithinAbs(std::log(32.0), 1e-12));
}

TEST_CASE("pretrain loss equals cross entropy restricted to Part B") {
  const GlmExample ex = fig2_example();
  const std::vector<GlmExample> batch{ex};
  const Tensor<double> logits = testing::random_tensor<double>({1, 10, 20}, 3, 4.0, false);
  Tape<double> tape;
  const double loss = pretrain_loss(tape, logits, batch).item();
  const Tensor<double> rows = Tensor<double>({5, 20}, std::vector<double>(logits.data().begin() + 5 * 20,
                                                                           logits.data().end()));
  const std::vector<std::size_t> targets(ex.target_ids.begin() + 5, ex.target_ids.end());
  CHECK_THAT(loss, WithinAbs(cross_entropy_with_logits(tape, rows, targets).item(), 1e-7));
}

TEST_CASE("pretrain loss near zero for confident correct logits and errors without Part B") {
  const GlmExample ex = fig2_example();
  std::vector<double> v(10 * 20, 0.0);
  for (std::size_t i = 5; i < 10; ++i) v[i * 20 + ex.target_ids[i]] = 20.0;
  Tape<double> tape;
  const std::vector<GlmExample> batch{ex};
  CHECK(pretrain_loss(tape, Tensor<double>({1, 10, 20}, v), batch).item() < 0.01);

  const GlmExample empty = build_example(std::vector<TokenId>{10, 11}, SpanSet{}, Permutation{}, Vocab());
  const std::vector<GlmExample> none{empty};
  CHECK_THROWS_AS(pretrain_loss(tape, Tensor<double>::zeros({1, 2, 20}), none), DegenerateInputError);
}

TEST_CASE("loss gradients vanish at Part A positions") {
  const std::vector<GlmExample> batch{fig2_example()};
  Tensor<double> logits = testing::random_tensor<double>({1, 10, 20}, 4);
  Tape<double> tape;
  tape.backward(pretrain_loss(tape, logits, batch));
  for (std::size_t i = 0; i < 5 * 20; ++i) CHECK(logits.grad()[i] == 0.0);
  double b_norm = 0;
  for (std::size_t i = 5 * 20; i < 10 * 20; ++i) b_norm += std::abs(logits.grad()[i]);
  CHECK(b_norm > 0);
}

TEST_CASE("learning-rate schedule") {
  TrainConfig c;
  c.peak_lr = 1e-3;
  c.warmup_steps = 100;
  c.max_steps = 2100;
  CHECK(lr_schedule(0, c) == 0.0);
  CHECK(lr_schedule(100, c) == 1e-3);
  CHECK(lr_schedule(2100, c) == 0.0);
  CHECK_THAT(lr_schedule(1100, c), WithinAbs(5e-4, 1e-9));
  CHECK_THAT(lr_schedule(50, c), WithinAbs(5e-4, 1e-15));
  CHECK(std::abs(lr_schedule(99, c) - lr_schedule(100, c)) < 1e-5 + 1e-12);
  // continuity at the junction with a continuous step variable
  TrainConfig fine = c;
  fine.warmup_steps = 1000000;
  fine.max_steps = 3000000;
  CHECK(std::abs(lr_schedule(1000000, fine) - lr_schedule(999999, fine)) < 1e-8);
  CHECK(std::abs(lr_schedule(1000001, fine) - lr_schedule(1000000, fine)) < 1e-12);
  double previous = 2.0;
  for (std::size_t s = 100; s <= 2100; s += 50) {
    CHECK(lr_schedule(s, c) <= previous);
    previous = lr_schedule(s, c);
  }
}

TEST_CASE("train config validation") {
  TrainConfig c;
  c.warmup_steps = c.max_steps;
  CHECK_THROWS_AS(c.validate(), ContractError);
  c = TrainConfig{};
  c.peak_lr = 0;
  CHECK_THROWS_AS(c.validate(), ContractError);
}

TEST_CASE("one Adam step moves a scalar by about lr") {
  for (const double g : {1e-3, 0.5, 20.0}) {
    auto p = scalar_param(1.0);
    AdamState<double> s;
    p.entries()[0].second.mutable_grad()[0] = g;
    adam_step(s, p, 0.01, quiet_config());
    CHECK_THAT(p.get("w")[0], WithinAbs(1.0 - 0.01, 1e-5));
    CHECK(s.step == 1);
  }
}

TEST_CASE("zero gradient without weight decay leaves parameters unchanged") {
  auto p = scalar_param(0.7);
  AdamState<double> s;
  p.entries()[0].second.mutable_grad()[0] = 0.0;
  for (int i = 0; i < 3; ++i) adam_step(s, p, 0.01, quiet_config());
  CHECK(p.get("w")[0] == 0.7);
}

TEST_CASE("decoupled weight decay skips norms and biases") {
  Parameters<double> p;
  p.add("layer0.ffn.w1", Tensor<double>({1}, {2.0}));
  p.add("layer0.ffn.b1", Tensor<double>({1}, {2.0}));
  p.add("layer0.ln1.gain", Tensor<double>({1}, {2.0}));
  TrainConfig c = quiet_config();
  c.weight_decay = 0.1;
  AdamState<double> s;
  adam_step(s, p, 0.5, c);
  CHECK_THAT(p.get("layer0.ffn.w1")[0], WithinAbs(2.0 - 0.5 * 0.1 * 2.0, 1e-12));
  CHECK(p.get("layer0.ffn.b1")[0] == 2.0);
  CHECK(p.get("layer0.ln1.gain")[0] == 2.0);
}

TEST_CASE("Adam descends a quadratic bowl monotonically") {
  Parameters<double> p;
  p.add("w", Tensor<double>({3}, {1.0, -2.0, 0.5}));
  AdamState<double> s;
  auto loss = [&] {
    Tape<double> tape;
    const Tensor<double>& w = p.get("w");
    const Tensor<double> l = sum(tape, mul(tape, w, w));
    p.zero_grad();
    tape.backward(l);
    return l.item();
  };
  double previous = loss();
  for (int i = 0; i < 5; ++i) {
    adam_step(s, p, 0.05, quiet_config());
    const double now = loss();
    CHECK(now < previous);
    previous = now;
  }
}

TEST_CASE("non-finite gradients abort the update without touching state") {
  Parameters<double> p;
  p.add("a", Tensor<double>({2}, {1.0, 2.0}));
  p.add("b", Tensor<double>({1}, {3.0}));
  AdamState<double> s = AdamState<double>::for_params(p);
  p.entries()[0].second.mutable_grad()[0] = 1.0;
  p.entries()[1].second.mutable_grad()[0] = std::numeric_limits<double>::infinity();
  CHECK_THROWS_AS(adam_step(s, p, 0.01, quiet_config()), NumericError);
  CHECK(s.step == 0);
  CHECK(s.m[0][0] == 0.0);
  CHECK(p.get("a")[0] == 1.0);
  CHECK(p.get("b")[0] == 3.0);
}

TEST_CASE("gradient clipping") {
  Parameters<double> p;
  p.add("a", Tensor<double>({2}, {0.0, 0.0}));
  p.add("b", Tensor<double>({1}, {0.0}));
  auto set = [&](double x, double y, double z) {
    p.entries()[0].second.mutable_grad()[0] = x;
    p.entries()[0].second.mutable_grad()[1] = y;
    p.entries()[1].second.mutable_grad()[0] = z;
  };
  set(0.3, 0.0, 0.4);
  CHECK_THAT(clip_gradients(p, 1.0), WithinAbs(0.5, 1e-15));
  CHECK(p.get("a").grad()[0] == 0.3);
  CHECK(p.get("b").grad()[0] == 0.4);

  set(0.0, 2.4, 3.2);
  CHECK_THAT(clip_gradients(p, 1.0), WithinAbs(4.0, 1e-12));
  CHECK_THAT(p.get("a").grad()[1], WithinAbs(0.6, 1e-12));
  CHECK_THAT(p.get("b").grad()[0], WithinAbs(0.8, 1e-12));
  const double norm = std::hypot(p.get("a").grad()[1], p.get("b").grad()[0]);
  CHECK_THAT(norm, WithinAbs(1.0, 1e-6));

  set(-1.0, 5.0, 7.0);
  const std::vector<double> before{-1.0, 5.0, 7.0};
  clip_gradients(p, 1.0);
  const std::vector<double> after{p.get("a").grad()[0], p.get("a").grad()[1], p.get("b").grad()[0]};
  const double dot = std::inner_product(before.begin(), before.end(), after.begin(), 0.0);
  const double na = std::sqrt(std::inner_product(before.begin(), before.end(), before.begin(), 0.0));
  const double nb = std::sqrt(std::inner_product(after.begin(), after.end(), after.begin(), 0.0));
  CHECK_THAT(dot / (na * nb), WithinAbs(1.0, 1e-7));
}

TEST_CASE("multi-task batches mix both objectives") {
  const ToyData data = toy_data(16, 1);
  CorruptionConfig corruption;
  corruption.objective = Objective::kDocument;
  corruption.multi_task = true;
  TrainConfig cfg = toy_train_config();
  int mixed = 0;
  for (std::size_t step = 0; step < 100; ++step) {
    bool saw_short = false, saw_doc = false;
    for (std::size_t i = 0; i < cfg.batch_size; ++i) {
      Rng rng(derive_seed(cfg.seed, step * cfg.batch_size + i));
      (choose_objective(rng, corruption) == Objective::kShortSpan ? saw_short : saw_doc) = true;
    }
    mixed += saw_short && saw_doc ? 1 : 0;
  }
  // 1 - 2 * 0.5^8 = 0.992
  CHECK(mixed >= 95);

  const auto batch = make_pretrain_batch(data.docs, data.vocab, corruption, cfg, 3);
  CHECK(batch.size() == cfg.batch_size);
  CHECK(batch == make_pretrain_batch(data.docs, data.vocab, corruption, cfg, 3));
}

TEST_CASE("training reduces the loss on a toy corpus") {
  const ToyData data = toy_data(32, 2);
  auto mcfg = tiny_config(data.vocab.size(), 2, 32);
  auto model = GlmModel<float>::init(mcfg, 3);
  AdamState<float> state;
  const auto history = train_loop(model, state, data.docs, data.vocab, toy_train_config(), CorruptionConfig{});
  REQUIRE(history.size() == 200);
  double first = 0, last = 0;
  for (std::size_t i = 0; i < 10; ++i) {
    first += history[i].loss / 10;
    last += history[190 + i].loss / 10;
  }
  INFO("first " << first << " last " << last);
  CHECK(last < first - 1.0);
  CHECK(state.step == 200);
}

TEST_CASE("seeded runs write identical metrics and resume matches an uninterrupted run") {
  testing::TempDir dir("train");
  const ToyData data = toy_data(12, 4);
  auto mcfg = tiny_config(data.vocab.size(), 1, 16);
  TrainConfig cfg = toy_train_config();
  cfg.max_steps = 30;
  cfg.checkpoint_every = 10;

  auto run = [&](const std::string& tag, std::size_t limit) {
    auto model = GlmModel<float>::init(mcfg, 7);
    AdamState<float> state;
    TrainIo io;
    io.metrics_csv = dir / (tag + ".csv");
    io.checkpoint = dir / (tag + ".ckpt");
    io.step_limit = limit;
    train_loop(model, state, data.docs, data.vocab, cfg, CorruptionConfig{}, io);
    return model;
  };
  const auto full_a = run("a", 0);
  run("b", 0);
  CHECK(read_file(dir / "a.csv") == read_file(dir / "b.csv"));
  CHECK(read_file(dir / "a.csv").starts_with("step,loss,lr,tokens_per_sec\n"));

  run("c", 13);
  auto resumed = load_checkpoint<float>(dir / "c.ckpt");
  AdamState<float> state = restore_adam_state(resumed);
  CHECK(state.step == 13);
  TrainIo io;
  io.metrics_csv = dir / "c.csv";
  io.checkpoint = dir / "c.ckpt";
  train_loop(resumed.model, state, data.docs, data.vocab, cfg, CorruptionConfig{}, io);
  CHECK(read_file(dir / "a.csv") == read_file(dir / "c.csv"));
  CHECK(read_file(dir / "a.ckpt") == read_file(dir / "c.ckpt"));
  for (std::size_t i = 0; i < full_a.params().size(); ++i) {
    const auto& x = full_a.params().entries()[i].second;
    const auto& y = resumed.model.params().entries()[i].second;
    CHECK(std::equal(x.data().begin(), x.data().end(), y.data().begin()));
  }
}

TEST_CASE("numeric failures carry the step number") {
  const ToyData data = toy_data(4, 5);
  auto model = GlmModel<float>::init(tiny_config(data.vocab.size(), 1, 16), 1);
  TrainConfig cfg = toy_train_config();
  cfg.peak_lr = 1e30;
  cfg.warmup_steps = 0;
  cfg.max_steps = 50;
  cfg.grad_clip = 1e30;
  AdamState<float> state;
  try {
    train_loop(model, state, data.docs, data.vocab, cfg, CorruptionConfig{});
    FAIL("expected a numeric failure");
  } catch (const TrainingNumericError& e) {
    CHECK(e.step() >= 1);
    CHECK(std::string(e.what()).starts_with("step "));
  }
}

TEST_CASE("cloze loss with identical verbalizers is ln 2") {
  const Vocab v = Vocab::build_from_text("it was good bad great movie", 32);
  const auto model = GlmModel<double>::init(tiny_config(v.size()), 8);
  ClozePattern pattern{"{input} it was ___ .", {"pos", "neg"}, {v.encode("good"), v.encode("good")}};
  const std::vector<LabeledInput> batch{{"great movie", 0}, {"bad movie", 1}};
  Tape<double> tape;
  Rng rng(0);
  const double loss = cloze_loss(tape, model, pattern, std::span<const LabeledInput>(batch), v, false, rng).item();
  CHECK_THAT(loss, WithinAbs(std::log(2.0), 1e-12));
}

TEST_CASE("cloze loss gradients match finite differences") {
  const Vocab v = Vocab::build_from_text("it was good bad great movie very", 32);
  auto model = GlmModel<double>::init(tiny_config(v.size()), 9);
  Rng perturb(1);
  for (auto& [name, t] : model.params().entries()) {
    for (double& x : t.mutable_data()) x += 0.2 * perturb.normal();
  }
  ClozePattern pattern{"{input} it was ___ .", {"pos", "neg"}, {v.encode("very good"), v.encode("bad")}};
  const std::vector<LabeledInput> batch{{"great movie", 0}, {"bad movie", 1}};
  auto fn = [&](Tape<double>& tape) {
    Rng rng(0);
    return cloze_loss(tape, model, pattern, std::span<const LabeledInput>(batch), v, false, rng);
  };
  GradCheckOptions opts;
  opts.max_entries = 200;
  opts.seed = 3;
  CHECK(grad_check<double>(fn, model.params().tensors(), opts).max_rel_error < 1e-3);
}

TEST_CASE("cloze finetuning learns a separable task") {
  const Vocab v = Vocab::build_from_text("the film was great awful it good bad a story", 32);
  auto model = GlmModel<float>::init(tiny_config(v.size(), 1, 16), 10);
  ClozePattern pattern{"{input} . it was ___ .", {"pos", "neg"}, {v.encode("good"), v.encode("bad")}};
  const std::vector<LabeledInput> batch{
      {"the film was great", 0}, {"the film was awful", 1}, {"a story was great", 0}, {"a story was awful", 1}};
  TrainConfig cfg = quiet_config();
  cfg.peak_lr = 3e-3;
  cfg.warmup_steps = 0;
  cfg.max_steps = 50;
  AdamState<float> state;
  std::vector<double> losses;
  for (int step = 0; step < 50; ++step) {
    losses.push_back(finetune_cloze_step(model, state, pattern, std::span<const LabeledInput>(batch), v, cfg));
  }
  CHECK(losses.back() < losses.front() * 0.5);
  const auto p = cloze_predict(model, pattern, "the film was great", v);
  CHECK(p[0] > 0.5);
  CHECK_THAT(p[0] + p[1], WithinAbs(1.0, 1e-6));
}

TEST_CASE("candidate longer than the pos2 budget is rejected") {
  const Vocab v = Vocab::build_from_text("a b", 16);
  const auto model = GlmModel<double>::init(tiny_config(v.size()), 1);
  std::vector<TokenId> longest(model.config().max_pos2 - 1, *v.find("a"));
  ClozePattern pattern{"x ___", {"y"}, {longest}};
  const std::vector<LabeledInput> batch{{"a", 0}};
  Tape<double> tape;
  Rng rng(0);
  CHECK_THROWS_AS(cloze_loss(tape, model, pattern, std::span<const LabeledInput>(batch), v, false, rng),
                  ContractError);
}

TEST_CASE("seq2seq loss") {
  const auto model = GlmModel<double>::init(tiny_config(20), 12);
  const std::vector<Seq2SeqPair> pairs{{{6, 7, 8}, {9, 10}}, {{11}, {12, 13, 14}}};
  Rng rng(0);
  Tape<double> tape;
  std::vector<GlmExample> batch;
  for (const auto& p : pairs) batch.push_back(seq2seq_example(p));
  const double plain = seq2seq_loss(tape, model, std::span<const Seq2SeqPair>(pairs), 0.0, false, rng).item();
  const double reference = pretrain_loss(tape, model.forward(batch), batch).item();
  CHECK(plain == reference);

  // smoothed loss against a direct formula on the same logits
  const Tensor<double> logits = model.forward(batch);
  const std::size_t seq = logits.dim(1), V = logits.dim(2);
  double expected = 0;
  std::size_t count = 0;
  for (std::size_t b = 0; b < batch.size(); ++b) {
    for (std::size_t i = batch[b].part_a_len; i < batch[b].size(); ++i) {
      const auto row = logits.data().subspan((b * seq + i) * V, V);
      double z = 0, mean = 0;
      for (const double x : row) {
        z += std::exp(x);
        mean += x / static_cast<double>(V);
      }
      expected += 0.9 * (std::log(z) - row[batch[b].target_ids[i]]) + 0.1 * (std::log(z) - mean);
      ++count;
    }
  }
  expected /= static_cast<double>(count);
  CHECK_THAT(seq2seq_loss(tape, model, std::span<const Seq2SeqPair>(pairs), 0.1, false, rng).item(),
             WithinAbs(expected, 1e-6));

  const std::vector<GlmExample> one{seq2seq_example(pairs[0])};
  for (const double eps : {0.0, 0.1, 0.5}) {
    const Tensor<double> uniform = Tensor<double>::zeros({1, one[0].size(), 20});
    CHECK_THAT(pretrain_loss(tape, uniform, one, eps).item(), WithinAbs(std::log(20.0), 1e-12));
  }
  const std::vector<Seq2SeqPair> empty{{{6}, {}}};
  CHECK_THROWS_AS(seq2seq_loss(tape, model, std::span<const Seq2SeqPair>(empty), 0.1, false, rng),
                  DegenerateInputError);
}

TEST_CASE("seq2seq finetuning step reduces the loss") {
  auto model = GlmModel<float>::init(tiny_config(20, 1, 16), 13);
  const std::vector<Seq2SeqPair> pairs{{{6, 7, 8}, {9, 10}}, {{11, 12}, {13}}};
  TrainConfig cfg = quiet_config();
  cfg.peak_lr = 1e-2;
  cfg.label_smoothing = 0.1;
  AdamState<float> state;
  const double first = finetune_seq2seq_step(model, state, std::span<const Seq2SeqPair>(pairs), cfg);
  double last = first;
  for (int i = 0; i < 30; ++i) last = finetune_seq2seq_step(model, state, std::span<const Seq2SeqPair>(pairs), cfg);
  CHECK(last < first);
}
