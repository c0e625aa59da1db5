// blankfill command-line front end.
//
//   blankfill build-vocab --corpus c.txt --out vocab.txt
//   blankfill pretrain    --corpus c.txt --vocab vocab.txt --checkpoint m.ckpt
//   blankfill finetune    cloze|seq2seq --checkpoint m.ckpt --data d.tsv --out ft.ckpt
//   blankfill infill      --checkpoint m.ckpt --vocab vocab.txt --text "a [MASK] c"
//   blankfill score       --checkpoint m.ckpt --vocab vocab.txt --pattern p.txt --text "..."
//   blankfill eval        ppl|lastword --checkpoint m.ckpt --vocab vocab.txt --data d.txt
//
// Every command takes --config FILE (flat key=value lines, keys are flag
// names). Flags on the command line win over the file.
//
// Exit codes: 0 ok, 2 bad input, 3 I/O failure, 4 numeric failure.

#include <CLI11.hpp>
#include <json.hpp>

#include <charconv>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <memory>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "blankfill/checkpoint.hpp"
#include "blankfill/corruption.hpp"
#include "blankfill/inference.hpp"
#include "blankfill/model.hpp"
#include "blankfill/trainer.hpp"
#include "blankfill/vocab.hpp"

namespace bf = blankfill;
namespace fs = std::filesystem;

namespace {

constexpr int kExitBadInput = 2;
constexpr int kExitIo = 3;
constexpr int kExitNumeric = 4;

std::string to_text(const std::string& v) { return v; }
std::string to_text(bool v) { return v ? "true" : "false"; }
std::string to_text(double v) {
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}
template <typename I>
  requires std::is_integral_v<I>
std::string to_text(I v) {
  return std::to_string(v);
}

/// Registers options on one subcommand and remembers how to echo them.
class Flags {
 public:
  explicit Flags(CLI::App* app) : app_(app) {
    // options bind to members, so a Flags object must stay put
    app_->add_option("--config", config_, "key=value file; flags override it");
    app_->add_option("--config-out", config_out_, "write the effective configuration here");
  }

  template <typename V>
  CLI::Option* option(const std::string& name, V& var, const std::string& help) {
    entries_.emplace_back(name, [&var] { return to_text(var); });
    return app_->add_option("--" + name, var, help);
  }

  CLI::Option* positional(const std::string& name, std::string& var, const std::string& help) {
    entries_.emplace_back(name, [&var] { return var; });
    return app_->add_option(name + ",--" + name, var, help)->required();
  }

  CLI::Option* flag(const std::string& name, bool& var, const std::string& help) {
    entries_.emplace_back(name, [&var] { return to_text(var); });
    return app_->add_flag("--" + name, var, help);
  }

  std::string effective() const {
    std::string out;
    for (const auto& [name, get] : entries_) out += name + "=" + get() + "\n";
    return out;
  }

  /// Writes the sidecar to --config-out, or to `fallback` when that is set.
  void echo(const std::string& fallback = "") const {
    const std::string target = config_out_.empty() ? fallback : config_out_;
    if (target.empty()) return;
    std::ofstream out(target);
    if (!out || !(out << effective())) throw bf::IoError("cannot write config to " + target);
  }

  CLI::App* app() const { return app_; }

 private:
  CLI::App* app_;
  std::string config_, config_out_;
  std::vector<std::pair<std::string, std::function<std::string()>>> entries_;
};

void require_file(const std::string& path, const std::string& what) {
  if (path.empty()) throw bf::ContractError(what + " path is required");
  std::error_code ec;
  if (!fs::is_regular_file(path, ec)) throw bf::IoError(what + " not found: " + path);
}

void require_output(const std::string& path, const std::string& what) {
  if (path.empty()) throw bf::ContractError(what + " path is required");
  const fs::path parent = fs::path(path).parent_path();
  std::error_code ec;
  if (!parent.empty() && !fs::is_directory(parent, ec)) {
    throw bf::IoError(what + " directory does not exist: " + parent.string());
  }
}

std::vector<std::string> read_lines(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw bf::IoError("cannot open " + path);
  std::vector<std::string> lines;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    lines.push_back(line);
  }
  return lines;
}

std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t");
  if (b == std::string_view::npos) return "";
  const auto e = s.find_last_not_of(" \t");
  return std::string(s.substr(b, e - b + 1));
}

std::pair<std::string, std::string> split_tab(const std::string& line, const std::string& path, std::size_t n) {
  const auto tab = line.find('\t');
  if (tab == std::string::npos) {
    throw bf::IngestionError(path + ":" + std::to_string(n) + ": expected two tab-separated fields");
  }
  return {line.substr(0, tab), line.substr(tab + 1)};
}

/// Template line with a ___ blank, then label<TAB>verbalizer lines.
bf::ClozePattern load_pattern(const std::string& path, const bf::Vocab& vocab) {
  bf::ClozePattern p;
  bool have_template = false;
  std::size_t n = 0;
  for (const auto& line : read_lines(path)) {
    ++n;
    if (trim(line).empty()) continue;
    if (!have_template) {
      p.template_text = line;
      have_template = true;
      continue;
    }
    auto [label, words] = split_tab(line, path, n);
    const auto ids = vocab.encode(words);
    for (const auto id : ids) {
      if (id == bf::Vocab::kUnk) throw bf::IngestionError(path + ":" + std::to_string(n) + ": verbalizer '" + words + "' is not in the vocabulary");
    }
    p.labels.push_back(trim(label));
    p.verbalizers.push_back(ids);
  }
  if (!have_template) throw bf::IngestionError("pattern file " + path + " is empty");
  p.validate();
  return p;
}

std::vector<bf::LabeledInput> load_labeled(const std::string& path, const bf::ClozePattern& pattern) {
  std::vector<bf::LabeledInput> out;
  std::size_t n = 0;
  for (const auto& line : read_lines(path)) {
    ++n;
    if (trim(line).empty()) continue;
    auto [text, label] = split_tab(line, path, n);
    out.push_back({text, pattern.label_index(trim(label))});
  }
  if (out.empty()) throw bf::DegenerateInputError("no examples in " + path);
  return out;
}

std::vector<bf::Seq2SeqPair> load_pairs(const std::string& path, const bf::Vocab& vocab) {
  std::vector<bf::Seq2SeqPair> out;
  std::size_t n = 0;
  for (const auto& line : read_lines(path)) {
    ++n;
    if (trim(line).empty()) continue;
    auto [source, target] = split_tab(line, path, n);
    out.push_back({vocab.encode(source), vocab.encode(target)});
    if (out.back().target.empty()) throw bf::IngestionError(path + ":" + std::to_string(n) + ": empty target");
  }
  if (out.empty()) throw bf::DegenerateInputError("no pairs in " + path);
  return out;
}

/// Longest span an objective can produce on `len` tokens.
std::size_t longest_span(std::size_t len, const bf::CorruptionConfig& c) {
  if (c.objective == bf::Objective::kShortSpan) return std::max<std::size_t>(1, bf::required_masked(len, c.min_mask_ratio));
  return len;
}

bf::LoadedCheckpoint<float> load_model(const std::string& path, const bf::Vocab& vocab) {
  auto ckpt = bf::load_checkpoint<float>(path);
  if (ckpt.model.config().vocab_size != vocab.size()) {
    throw bf::ContractError("checkpoint vocab size " + std::to_string(ckpt.model.config().vocab_size) +
                            " does not match vocab file (" + std::to_string(vocab.size()) + ")");
  }
  return ckpt;
}

// ---------------------------------------------------------------------------

struct BuildVocabCmd {
  std::string corpus, out;
  std::size_t max_size = 8000;
  std::size_t sentinels = 0;

  void add(Flags& f) {
    f.option("corpus", corpus, "training text, one document per line");
    f.option("out", out, "vocab file to write");
    f.option("max-size", max_size, "vocab size including reserved tokens");
    f.option("sentinels", sentinels, "number of [MASK_k] sentinel tokens to reserve");
  }

  int run(const Flags& f) {
    require_file(corpus, "corpus");
    require_output(out, "vocab");
    std::ifstream in(corpus);
    if (!in) throw bf::IoError("cannot open corpus " + corpus);
    const bf::Vocab v = bf::Vocab::build(in, max_size, sentinels);
    v.save(out);
    f.echo(out + ".config");
    std::printf("vocab: %zu tokens -> %s\n", v.size(), out.c_str());
    return 0;
  }
};

struct PretrainCmd {
  std::string corpus, vocab, checkpoint, metrics;
  bool resume = false;
  std::size_t stop_after = 0;
  std::uint64_t seed = 1234;
  // model
  std::size_t layers = 2, hidden = 64, heads = 4, ffn = 0, max_pos1 = 0, max_pos2 = 0;
  double dropout = 0.1, attention_dropout = 0.1;
  bool use_pos2 = true, tie_output = true;
  // optimization
  double lr = 1e-3, weight_decay = 0.1, clip = 1.0, label_smoothing = 0.0;
  std::size_t warmup = 100, steps = 2000, batch = 16, max_seq_len = 64, checkpoint_every = 0;
  bool deterministic = false;
  // corruption
  std::string objective = "short";
  bool multi_task = false, shuffle_spans = true, sentinel_mode = false;
  double lambda = 3.0, mask_ratio = 0.15;

  void add(Flags& f) {
    f.option("corpus", corpus, "training text, one document per line");
    f.option("vocab", vocab, "vocab file from build-vocab");
    f.option("checkpoint", checkpoint, "checkpoint to write (and read with --resume)");
    f.option("metrics", metrics, "metrics CSV (default: <checkpoint>.csv)");
    f.flag("resume", resume, "continue from --checkpoint when it exists");
    f.option("stop-after", stop_after, "stop after this many updates in this run (0: run to --steps)");
    f.option("seed", seed, "seed for init, masking and dropout");
    f.option("layers", layers, "transformer layers");
    f.option("hidden", hidden, "hidden size");
    f.option("heads", heads, "attention heads");
    f.option("ffn", ffn, "feed-forward size (0: 4 * hidden)");
    f.option("max-pos1", max_pos1, "position table size (0: max-seq-len)");
    f.option("max-pos2", max_pos2, "intra-span position table size (0: fit the longest span)");
    f.option("dropout", dropout, "hidden dropout");
    f.option("attention-dropout", attention_dropout, "attention dropout");
    f.option("use-pos2", use_pos2, "add the intra-span position embedding");
    f.option("tie-output", tie_output, "share the output projection with token embeddings");
    f.option("lr", lr, "peak learning rate");
    f.option("warmup", warmup, "linear warmup steps");
    f.option("steps", steps, "total optimizer steps");
    f.option("batch", batch, "examples per step");
    f.option("max-seq-len", max_seq_len, "documents are cut to this many tokens");
    f.option("weight-decay", weight_decay, "decoupled weight decay");
    f.option("clip", clip, "global gradient norm clip");
    f.option("label-smoothing", label_smoothing, "label smoothing for the token loss");
    f.option("checkpoint-every", checkpoint_every, "checkpoint period in steps (0: only at the end)");
    f.flag("deterministic", deterministic, "write 0 tokens/sec so metrics are reproducible");
    f.option("objective", objective, "short | doc | sentence");
    f.option("multi-task", multi_task, "mix short spans with --objective at even odds");
    f.option("shuffle-spans", shuffle_spans, "permute span order in Part B");
    f.option("sentinel-mode", sentinel_mode, "distinct [MASK_k] per span instead of one [MASK]");
    f.option("lambda", lambda, "Poisson mean of short span lengths");
    f.option("mask-ratio", mask_ratio, "minimum masked fraction for short and sentence spans");
  }

  int run(const Flags& f) {
    require_file(corpus, "corpus");
    require_file(vocab, "vocab");
    require_output(checkpoint, "checkpoint");
    if (metrics.empty()) metrics = checkpoint + ".csv";
    require_output(metrics, "metrics");

    bf::CorruptionConfig cc;
    cc.objective = bf::parse_objective(objective);
    cc.multi_task = multi_task;
    cc.shuffle_spans = shuffle_spans;
    cc.sentinel_mode = sentinel_mode;
    cc.lambda = lambda;
    cc.min_mask_ratio = mask_ratio;
    cc.validate();

    bf::TrainConfig tc;
    tc.peak_lr = lr;
    tc.warmup_steps = warmup;
    tc.max_steps = steps;
    tc.batch_size = batch;
    tc.weight_decay = weight_decay;
    tc.grad_clip = clip;
    tc.label_smoothing = label_smoothing;
    tc.seed = seed;
    tc.max_seq_len = max_seq_len;
    tc.checkpoint_every = checkpoint_every;
    tc.deterministic = deterministic;
    tc.validate();

    const bf::Vocab v = bf::Vocab::load(vocab);
    if (sentinel_mode) {
      const std::size_t need = bf::max_span_count(max_seq_len, cc);
      if (v.sentinel_count() < need) {
        throw bf::ContractError("sentinel mode can need " + std::to_string(need) + " sentinels at max-seq-len " +
                                std::to_string(max_seq_len) + "; vocab has " + std::to_string(v.sentinel_count()));
      }
    }

    bf::ModelConfig mc;
    mc.n_layers = layers;
    mc.hidden_size = hidden;
    mc.n_heads = heads;
    mc.ffn_size = ffn == 0 ? 4 * hidden : ffn;
    mc.vocab_size = v.size();
    mc.max_pos1 = max_pos1 == 0 ? max_seq_len : max_pos1;
    mc.max_pos2 = max_pos2 == 0 ? longest_span(max_seq_len, cc) + 2 : max_pos2;
    mc.dropout = dropout;
    mc.attention_dropout = attention_dropout;
    mc.use_pos2 = use_pos2;
    mc.tie_output = tie_output;
    mc.validate();
    if (mc.max_pos1 < max_seq_len) {
      throw bf::ContractError("max-pos1 " + std::to_string(mc.max_pos1) + " is below max-seq-len " +
                              std::to_string(max_seq_len));
    }
    if (mc.max_pos2 < longest_span(max_seq_len, cc) + 2) {
      throw bf::ContractError("max-pos2 " + std::to_string(mc.max_pos2) + " cannot hold a span of " +
                              std::to_string(longest_span(max_seq_len, cc)) + " tokens");
    }

    const auto docs = bf::load_corpus(corpus, v);
    std::optional<bf::GlmModel<float>> model;
    bf::AdamState<float> state;
    if (resume && fs::exists(checkpoint)) {
      auto ckpt = load_model(checkpoint, v);
      if (!(ckpt.model.config() == mc)) throw bf::ContractError("--resume: flags describe a different model than " + checkpoint);
      state = bf::restore_adam_state(ckpt);
      model.emplace(std::move(ckpt.model));
    } else {
      model.emplace(bf::GlmModel<float>::init(mc, seed));
    }
    f.echo(checkpoint + ".config");

    bf::TrainIo io;
    io.metrics_csv = metrics;
    io.checkpoint = checkpoint;
    io.step_limit = stop_after;
    io.checkpoint_metadata = {
        {"corrupt.objective", std::string(bf::objective_name(cc.objective))},
        {"corrupt.multi_task", to_text(multi_task)},
        {"corrupt.shuffle_spans", to_text(shuffle_spans)},
        {"corrupt.sentinel_mode", to_text(sentinel_mode)},
        {"train.max_seq_len", to_text(max_seq_len)},
    };
    const auto history = bf::train_loop(*model, state, docs, v, tc, cc, io);
    if (history.empty()) {
      std::printf("nothing to do: checkpoint is already at step %zu\n", state.step);
    } else {
      std::printf("final loss %.6f after %zu steps\n", history.back().loss, state.step);
    }
    return 0;
  }
};

struct FinetuneCmd {
  std::string mode, checkpoint, out, vocab, data, pattern, metrics;
  std::uint64_t seed = 1234;
  double lr = 1e-3, weight_decay = 0.1, clip = 1.0, label_smoothing = -1.0;
  std::size_t warmup = 10, steps = 200, batch = 16;
  bool deterministic = false;

  void add(Flags& f) {
    f.positional("mode", mode, "cloze | seq2seq")->check(CLI::IsMember({"cloze", "seq2seq"}));
    f.option("checkpoint", checkpoint, "pretrained checkpoint");
    f.option("out", out, "finetuned checkpoint to write");
    f.option("vocab", vocab, "vocab file");
    f.option("data", data, "TSV: input<TAB>label (cloze) or source<TAB>target (seq2seq)");
    f.option("pattern", pattern, "cloze pattern file");
    f.option("metrics", metrics, "metrics CSV");
    f.option("seed", seed, "seed for batch sampling and dropout");
    f.option("lr", lr, "peak learning rate");
    f.option("warmup", warmup, "linear warmup steps");
    f.option("steps", steps, "optimizer steps");
    f.option("batch", batch, "examples per step");
    f.option("weight-decay", weight_decay, "decoupled weight decay");
    f.option("clip", clip, "global gradient norm clip");
    f.option("label-smoothing", label_smoothing, "seq2seq label smoothing (negative: 0.1)");
    f.flag("deterministic", deterministic, "write 0 tokens/sec");
  }

  int run(const Flags& f) {
    require_file(checkpoint, "checkpoint");
    require_file(vocab, "vocab");
    require_file(data, "data");
    if (mode == "cloze") require_file(pattern, "pattern");
    require_output(out, "output checkpoint");
    if (!metrics.empty()) require_output(metrics, "metrics");

    bf::TrainConfig tc;
    tc.peak_lr = lr;
    tc.warmup_steps = warmup;
    tc.max_steps = steps;
    tc.batch_size = batch;
    tc.weight_decay = weight_decay;
    tc.grad_clip = clip;
    tc.label_smoothing = mode == "seq2seq" ? (label_smoothing < 0 ? 0.1 : label_smoothing) : 0.0;
    tc.seed = seed;
    tc.deterministic = deterministic;
    tc.validate();

    const bf::Vocab v = bf::Vocab::load(vocab);
    auto ckpt = load_model(checkpoint, v);
    auto& model = ckpt.model;
    auto state = bf::AdamState<float>::for_params(model.params());

    std::optional<bf::ClozePattern> pat;
    std::vector<bf::LabeledInput> labeled;
    std::vector<bf::Seq2SeqPair> pairs;
    std::size_t n = 0;
    if (mode == "cloze") {
      pat = load_pattern(pattern, v);
      labeled = load_labeled(data, *pat);
      n = labeled.size();
    } else {
      pairs = load_pairs(data, v);
      n = pairs.size();
    }
    f.echo(out + ".config");

    std::ofstream csv;
    if (!metrics.empty()) {
      csv.open(metrics, std::ios::trunc);
      if (!csv) throw bf::IoError("cannot write metrics to " + metrics);
      csv << bf::kMetricsHeader << '\n';
    }
    double loss = 0.0;
    while (state.step < steps) {
      const std::size_t step = state.step;
      const auto t0 = std::chrono::steady_clock::now();
      bf::Rng rng(bf::derive_seed(seed, step));
      std::size_t tokens = 0;
      try {
        if (pat) {
          std::vector<bf::LabeledInput> b;
          for (std::size_t i = 0; i < batch; ++i) b.push_back(labeled[rng.uniform_int(n)]);
          for (const auto& x : b) tokens += pat->render(x.text, v).size();
          loss = bf::finetune_cloze_step(model, state, *pat, std::span<const bf::LabeledInput>(b), v, tc);
        } else {
          std::vector<bf::Seq2SeqPair> b;
          for (std::size_t i = 0; i < batch; ++i) b.push_back(pairs[rng.uniform_int(n)]);
          for (const auto& x : b) tokens += x.source.size() + x.target.size() + 2;
          loss = bf::finetune_seq2seq_step(model, state, std::span<const bf::Seq2SeqPair>(b), tc);
        }
      } catch (const bf::NumericError& e) {
        throw bf::TrainingNumericError(step + 1, e.what());
      }
      if (csv.is_open()) {
        const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        bf::StepMetrics m{state.step, loss, bf::lr_schedule(state.step, tc), 0.0, 0.0};
        if (!deterministic && secs > 0) m.tokens_per_sec = static_cast<double>(tokens) / secs;
        csv << bf::format_metrics_row(m) << '\n';
      }
    }
    bf::save_training_checkpoint(out, model, state, tc, {{"finetune.mode", mode}});
    if (pat) {
      std::size_t correct = 0;
      for (const auto& x : labeled) {
        const auto p = bf::cloze_predict(model, *pat, x.text, v);
        correct += static_cast<std::size_t>(std::max_element(p.begin(), p.end()) - p.begin()) == x.label ? 1 : 0;
      }
      std::printf("final loss %.6f, train accuracy %.4f\n", loss, static_cast<double>(correct) / static_cast<double>(n));
    } else {
      std::printf("final loss %.6f\n", loss);
    }
    return 0;
  }
};

struct InfillCmd {
  std::string checkpoint, vocab, text, input, strategy = "greedy";
  std::uint64_t seed = 1234;
  std::size_t top_k = 40, beam = 5, max_blank_len = 0;
  double length_penalty = 0.0;
  bool block_trigrams = true;

  void add(Flags& f) {
    f.option("checkpoint", checkpoint, "model checkpoint");
    f.option("vocab", vocab, "vocab file");
    f.option("text", text, "text with one [MASK] per blank (none: continue the text)");
    f.option("input", input, "file of such texts, one per line");
    f.option("strategy", strategy, "greedy | topk | beam")->check(CLI::IsMember({"greedy", "topk", "beam"}));
    f.option("top-k", top_k, "k for top-k sampling");
    f.option("beam", beam, "beam width");
    f.option("length-penalty", length_penalty, "beam length penalty exponent");
    f.option("block-trigrams", block_trigrams, "forbid repeated trigrams in beam search");
    f.option("max-blank-len", max_blank_len, "token budget per blank (0: fit the checkpoint, at most 32)");
    f.option("seed", seed, "sampling seed");
  }

  int run(const Flags& f) {
    require_file(checkpoint, "checkpoint");
    require_file(vocab, "vocab");
    if (text.empty() == input.empty()) throw bf::ContractError("give exactly one of --text and --input");
    if (!input.empty()) require_file(input, "input");

    const bf::Vocab v = bf::Vocab::load(vocab);
    const auto ckpt = load_model(checkpoint, v);
    const auto& mc = ckpt.model.config();

    bf::DecodeConfig dc;
    dc.strategy = strategy == "topk" ? bf::DecodeStrategy::kTopK
                  : strategy == "beam" ? bf::DecodeStrategy::kBeam
                                       : bf::DecodeStrategy::kGreedy;
    dc.top_k = top_k;
    dc.beam_width = beam;
    dc.length_penalty = length_penalty;
    dc.block_repeated_trigrams = block_trigrams;
    dc.max_blank_len = max_blank_len == 0 ? std::min<std::size_t>(32, mc.max_pos2 - 2) : max_blank_len;
    dc.validate();
    if (dc.max_blank_len + 2 > mc.max_pos2) {
      throw bf::ContractError("max-blank-len " + std::to_string(dc.max_blank_len) + " needs max_pos2 >= " +
                              std::to_string(dc.max_blank_len + 2) + "; checkpoint has " + std::to_string(mc.max_pos2));
    }
    f.echo();

    const std::vector<std::string> texts = input.empty() ? std::vector<std::string>{text} : read_lines(input);
    bf::Rng rng(seed);
    for (std::size_t line = 0; line < texts.size(); ++line) {
      if (!input.empty() && trim(texts[line]).empty()) continue;
      const auto ids = bf::encode_with_blanks(texts[line], v);
      const bool has_blank = std::find(ids.begin(), ids.end(), bf::Vocab::kMask) != ids.end();
      const bf::BlankContext ctx = bf::build_generation_context(ids, !has_blank);
      if (ctx.example.part_a_len > mc.max_pos1) {
        throw bf::LengthError("input of " + std::to_string(ctx.example.part_a_len) + " tokens exceeds max_pos1 " +
                              std::to_string(mc.max_pos1));
      }
      for (const auto& fill : bf::infill(ckpt.model, ctx, dc, rng)) {
        nlohmann::json rec;
        if (!input.empty()) rec["line"] = line + 1;
        rec["blank_index"] = fill.blank_index;
        std::vector<std::string> toks;
        for (const auto t : fill.tokens) toks.push_back(v.token(t));
        rec["tokens"] = toks;
        rec["text"] = v.decode(fill.tokens);
        rec["logprob"] = fill.logprob;
        rec["truncated"] = fill.truncated;
        std::cout << rec.dump() << '\n';
      }
    }
    return 0;
  }
};

struct ScoreCmd {
  std::string checkpoint, vocab, pattern, text, data;

  void add(Flags& f) {
    f.option("checkpoint", checkpoint, "model checkpoint");
    f.option("vocab", vocab, "vocab file");
    f.option("pattern", pattern, "cloze pattern file");
    f.option("text", text, "input to classify");
    f.option("data", data, "TSV of input<TAB>label; prints accuracy");
  }

  int run(const Flags& f) {
    require_file(checkpoint, "checkpoint");
    require_file(vocab, "vocab");
    require_file(pattern, "pattern");
    if (text.empty() == data.empty()) throw bf::ContractError("give exactly one of --text and --data");
    if (!data.empty()) require_file(data, "data");

    const bf::Vocab v = bf::Vocab::load(vocab);
    const auto ckpt = load_model(checkpoint, v);
    const auto pat = load_pattern(pattern, v);
    f.echo();
    if (!text.empty()) {
      const auto p = bf::cloze_predict(ckpt.model, pat, text, v);
      for (std::size_t i = 0; i < p.size(); ++i) std::printf("%s\t%.6f\n", pat.labels[i].c_str(), p[i]);
      return 0;
    }
    const auto items = load_labeled(data, pat);
    std::size_t correct = 0;
    for (const auto& x : items) {
      const auto p = bf::cloze_predict(ckpt.model, pat, x.text, v);
      correct += static_cast<std::size_t>(std::max_element(p.begin(), p.end()) - p.begin()) == x.label ? 1 : 0;
    }
    std::printf("accuracy %.6f (%zu/%zu)\n", static_cast<double>(correct) / static_cast<double>(items.size()), correct,
                items.size());
    return 0;
  }
};

struct EvalCmd {
  std::string mode, checkpoint, vocab, data;
  std::size_t window = 64, overlap = 32;
  bool causal = false, force_uniform = false;

  void add(Flags& f) {
    f.positional("mode", mode, "ppl | lastword")->check(CLI::IsMember({"ppl", "lastword"}));
    f.option("checkpoint", checkpoint, "model checkpoint");
    f.option("vocab", vocab, "vocab file");
    f.option("data", data, "text file (ppl: one token stream; lastword: one passage per line)");
    f.option("window", window, "context window w");
    f.option("overlap", overlap, "tokens scored per window after the first");
    f.flag("causal", causal, "causal attention over the context instead of bidirectional");
    f.flag("force-uniform", force_uniform, "zero every parameter (uniform predictions); debug aid");
  }

  int run(const Flags& f) {
    if (!(force_uniform && checkpoint.empty())) require_file(checkpoint, "checkpoint");
    require_file(vocab, "vocab");
    require_file(data, "data");

    const bf::Vocab v = bf::Vocab::load(vocab);
    std::optional<bf::GlmModel<float>> model;
    if (!checkpoint.empty()) {
      model.emplace(load_model(checkpoint, v).model);
    } else {
      bf::ModelConfig mc;
      mc.n_layers = 1;
      mc.hidden_size = 8;
      mc.n_heads = 1;
      mc.ffn_size = 8;
      mc.vocab_size = v.size();
      mc.max_pos1 = window + 1;
      mc.max_pos2 = window + 2;
      model.emplace(bf::GlmModel<float>::init(mc, 0));
    }
    if (force_uniform) {
      for (auto& [name, t] : model->params().entries()) std::fill(t.mutable_data().begin(), t.mutable_data().end(), 0.0f);
    }
    f.echo();

    const auto lines = read_lines(data);
    if (mode == "ppl") {
      std::vector<bf::TokenId> stream;
      for (const auto& l : lines) {
        const auto ids = v.encode(l);
        stream.insert(stream.end(), ids.begin(), ids.end());
      }
      const auto r = bf::eval_perplexity(*model, stream, bf::EvalConfig{window, overlap, !causal});
      std::printf("ppl %.6f\nmean_nll %.6f\ntokens %zu\nwindows %zu\n", r.perplexity, r.mean_nll, r.tokens, r.windows);
      return 0;
    }
    std::vector<bf::LastWordItem> items;
    for (const auto& l : lines) {
      const std::string s = trim(l);
      if (s.empty()) continue;
      const auto cut = s.find_last_of(" \t");
      if (cut == std::string::npos) throw bf::IngestionError("lastword passage has no context: " + s);
      items.push_back({v.encode(s.substr(0, cut)), v.encode(s.substr(cut + 1))});
    }
    if (items.empty()) throw bf::DegenerateInputError("no passages in " + data);
    const double acc = bf::eval_last_word(*model, std::span<const bf::LastWordItem>(items));
    std::printf("accuracy %.6f\nitems %zu\n", acc, items.size());
    return 0;
  }
};

/// Splices `--config FILE` entries in as --key=value flags right after the
/// subcommand, so anything given explicitly (later) takes precedence.
std::vector<std::string> expand_config(std::vector<std::string> args) {
  std::string path;
  for (std::size_t i = 1; i < args.size(); ++i) {
    if (args[i] == "--config" && i + 1 < args.size()) {
      path = args[i + 1];
      args.erase(args.begin() + static_cast<std::ptrdiff_t>(i), args.begin() + static_cast<std::ptrdiff_t>(i + 2));
      break;
    }
    if (args[i].starts_with("--config=")) {
      path = args[i].substr(9);
      args.erase(args.begin() + static_cast<std::ptrdiff_t>(i));
      break;
    }
  }
  if (path.empty()) return args;
  require_file(path, "config file");
  std::vector<std::string> from_file;
  std::size_t n = 0;
  for (const auto& raw : read_lines(path)) {
    ++n;
    const std::string line = trim(raw.substr(0, raw.find('#')));
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw bf::IngestionError(path + ":" + std::to_string(n) + ": expected key=value");
    from_file.push_back("--" + trim(line.substr(0, eq)) + "=" + trim(line.substr(eq + 1)));
  }
  std::size_t at = 1;
  while (at < args.size() && args[at].starts_with("-")) ++at;
  args.insert(args.begin() + static_cast<std::ptrdiff_t>(std::min(at + 1, args.size())), from_file.begin(),
              from_file.end());
  return args;
}

int run(int argc, char** argv) {
  CLI::App app{"GLM-style autoregressive blank infilling"};
  app.option_defaults()->multi_option_policy(CLI::MultiOptionPolicy::TakeLast);
  app.require_subcommand(1);

  BuildVocabCmd build_vocab;
  PretrainCmd pretrain;
  FinetuneCmd finetune;
  InfillCmd infill;
  ScoreCmd score;
  EvalCmd eval;

  std::vector<std::pair<std::unique_ptr<Flags>, std::function<int(const Flags&)>>> commands;
  auto wire = [&](auto& cmd, const char* name, const char* help) {
    auto flags = std::make_unique<Flags>(app.add_subcommand(name, help));
    cmd.add(*flags);
    commands.emplace_back(std::move(flags), [&cmd](const Flags& f) { return cmd.run(f); });
  };
  wire(build_vocab, "build-vocab", "build a vocabulary file from a corpus");
  wire(pretrain, "pretrain", "pretrain with the blank-infilling objective");
  wire(finetune, "finetune", "finetune on a cloze or seq2seq task");
  wire(infill, "infill", "fill [MASK] blanks; prints one JSON record per blank");
  wire(score, "score", "cloze label probabilities for an input");
  wire(eval, "eval", "perplexity or last-word accuracy");

  std::vector<std::string> args(argv, argv + argc);
  try {
    args = expand_config(std::move(args));
  } catch (const bf::IoError& e) {
    std::fprintf(stderr, "blankfill: %s\n", e.what());
    return kExitIo;
  } catch (const bf::Error& e) {
    std::fprintf(stderr, "blankfill: %s\n", e.what());
    return kExitBadInput;
  }
  std::vector<char*> cargs;
  for (auto& a : args) cargs.push_back(a.data());
  try {
    app.parse(static_cast<int>(cargs.size()), cargs.data());
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kExitBadInput;
  }

  for (auto& [flags, fn] : commands) {
    if (!flags->app()->parsed()) continue;
    try {
      return fn(*flags);
    } catch (const bf::NumericError& e) {
      std::fprintf(stderr, "blankfill: numeric failure: %s\n", e.what());
      return kExitNumeric;
    } catch (const bf::IoError& e) {
      std::fprintf(stderr, "blankfill: %s\n", e.what());
      return kExitIo;
    } catch (const bf::Error& e) {
      std::fprintf(stderr, "blankfill: %s\n", e.what());
      return kExitBadInput;
    }
  }
  return kExitBadInput;
}

}  // namespace

int main(int argc, char** argv) { return run(argc, argv); }
