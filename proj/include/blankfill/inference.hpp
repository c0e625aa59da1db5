// Copyright (c) 2026, The blankfill Authors
// SPDX-License-Identifier: Apache-2.0
//
// Cloze scoring, blank decoding and language-model evaluation.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <numeric>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "blankfill/errors.hpp"
#include "blankfill/layout.hpp"
#include "blankfill/model.hpp"
#include "blankfill/rng.hpp"
#include "blankfill/tensor.hpp"
#include "blankfill/vocab.hpp"

namespace blankfill {

/// Encodes text in which the literal marker "[MASK]" denotes a blank.
inline std::vector<TokenId> encode_with_blanks(std::string_view text, const Vocab& vocab,
                                               std::string_view marker = Vocab::kMaskText) {
  std::vector<TokenId> ids;
  std::size_t pos = 0;
  while (true) {
    const auto hit = text.find(marker, pos);
    const auto piece = vocab.encode(text.substr(pos, hit == std::string_view::npos ? std::string_view::npos : hit - pos));
    ids.insert(ids.end(), piece.begin(), piece.end());
    if (hit == std::string_view::npos) break;
    ids.push_back(Vocab::kMask);
    pos = hit + marker.size();
  }
  return ids;
}

// ---------------------------------------------------------------------------
// Cloze patterns

/// A template with exactly one blank ("___") and an optional "{input}" slot,
/// plus one verbalizer token sequence per label.
struct ClozePattern {
  static constexpr std::string_view kBlank = "___";
  static constexpr std::string_view kInputSlot = "{input}";

  std::string template_text;
  std::vector<std::string> labels;
  std::vector<std::vector<TokenId>> verbalizers;

  void validate() const {
    std::size_t blanks = 0;
    for (auto p = template_text.find(kBlank); p != std::string::npos; p = template_text.find(kBlank, p + kBlank.size())) {
      ++blanks;
    }
    if (blanks != 1) throw ContractError("cloze template must contain exactly one ___ blank");
    if (labels.empty()) throw ContractError("cloze pattern has no labels");
    if (labels.size() != verbalizers.size()) throw ContractError("every label needs a verbalizer");
    for (std::size_t i = 0; i < verbalizers.size(); ++i) {
      if (verbalizers[i].empty()) throw ContractError("verbalizer for label '" + labels[i] + "' is empty");
    }
  }

  std::size_t label_index(std::string_view label) const {
    for (std::size_t i = 0; i < labels.size(); ++i) {
      if (labels[i] == label) return i;
    }
    throw ContractError("unknown label '" + std::string(label) + "'");
  }

  /// Template with the input substituted; the blank becomes one [MASK] id.
  /// Without an {input} slot the input is prepended.
  std::vector<TokenId> render(std::string_view input, const Vocab& vocab) const {
    std::string text = template_text;
    if (const auto slot = text.find(kInputSlot); slot != std::string::npos) {
      text.replace(slot, kInputSlot.size(), input);
    } else {
      text = std::string(input) + " " + text;
    }
    const auto blank = text.find(kBlank);
    auto ids = vocab.encode(std::string_view(text).substr(0, blank));
    ids.push_back(Vocab::kMask);
    const auto tail = vocab.encode(std::string_view(text).substr(blank + kBlank.size()));
    ids.insert(ids.end(), tail.begin(), tail.end());
    return ids;
  }
};

/// One candidate fill of one blank in a Part A context.
struct CandidateQuery {
  const GlmExample* context = nullptr;  // Part A only
  std::size_t blank_pos = 0;
  std::vector<TokenId> candidate;
};

/// Teacher-forced layout of a candidate after the blank's [START].
inline GlmExample candidate_example(const GlmExample& context, std::size_t blank_pos,
                                    std::span<const TokenId> candidate) {
  if (context.part_b_len() != 0) throw ContractError("candidate context must not already contain Part B");
  if (blank_pos >= context.part_a_len || context.input_ids[blank_pos] != Vocab::kMask) {
    throw ContractError("candidate blank position does not hold a [MASK]");
  }
  GlmExample ex = context;
  append_part_b_span(ex, blank_pos, candidate);
  return ex;
}

inline GlmExample checked_candidate_example(const ModelConfig& cfg, const CandidateQuery& q) {
  if (q.candidate.empty()) throw ContractError("candidate must contain at least one token");
  if (q.candidate.size() + 1 >= cfg.max_pos2) {
    throw ContractError("candidate of " + std::to_string(q.candidate.size()) + " tokens exceeds the pos2 budget");
  }
  for (const TokenId t : q.candidate) {
    if (t >= cfg.vocab_size) throw ContractError("candidate token outside the model vocabulary");
  }
  return candidate_example(*q.context, q.blank_pos, q.candidate);
}

/// log softmax(row)[target], accumulated in double.
template <typename T>
double row_log_prob(std::span<const T> row, std::size_t target) {
  double mx = -std::numeric_limits<double>::infinity();
  for (const T v : row) mx = std::max(mx, static_cast<double>(v));
  double z = 0.0;
  for (const T v : row) z += std::exp(static_cast<double>(v) - mx);
  return static_cast<double>(row[target]) - mx - std::log(z);
}

/// Differentiable total log-probabilities of a batch of candidates, from one
/// forward pass: sum_j log p(c_j | context, c_<j), plus log p([END] | ...)
/// when include_end is set. Returns one scalar tensor per query.
template <typename T>
std::vector<Tensor<T>> candidate_log_probs(Tape<T>& tape, const GlmModel<T>& model,
                                           std::span<const CandidateQuery> queries, bool include_end, bool train,
                                           Rng& rng) {
  std::vector<GlmExample> batch;
  batch.reserve(queries.size());
  for (const auto& q : queries) batch.push_back(checked_candidate_example(model.config(), q));
  const Tensor<T> logits = model.forward(tape, batch, train, rng);
  const std::size_t seq = logits.dim(1), vocab = logits.dim(2);
  const Tensor<T> logp = log_softmax_rows(tape, logits);
  std::vector<Tensor<T>> out;
  out.reserve(batch.size());
  for (std::size_t b = 0; b < batch.size(); ++b) {
    const auto& ex = batch[b];
    const std::size_t n = queries[b].candidate.size() + (include_end ? 1 : 0);
    std::vector<std::size_t> flat;
    for (std::size_t j = 0; j < n; ++j) {
      const std::size_t row = b * seq + ex.part_a_len + j;
      flat.push_back(row * vocab + ex.target_ids[ex.part_a_len + j]);
    }
    out.push_back(sum(tape, pick(tape, logp, flat)));
  }
  return out;
}

/// Total log-probability of filling the blank at `blank_pos` with `candidate`,
/// from one forward pass.
template <typename T>
double score_candidate(const GlmModel<T>& model, const GlmExample& context, std::size_t blank_pos,
                       std::span<const TokenId> candidate, bool include_end = true) {
  const CandidateQuery q{&context, blank_pos, std::vector<TokenId>(candidate.begin(), candidate.end())};
  const GlmExample ex = checked_candidate_example(model.config(), q);
  const Tensor<T> logits = model.forward(std::span<const GlmExample>(&ex, 1));
  const std::size_t vocab = logits.dim(2);
  const std::size_t n = candidate.size() + (include_end ? 1 : 0);
  double total = 0.0;
  for (std::size_t j = 0; j < n; ++j) {
    const std::size_t row = ex.part_a_len + j;
    total += row_log_prob(logits.data().subspan(row * vocab, vocab), ex.target_ids[row]);
  }
  return total;
}

/// p(y | x) = exp(s_y) / sum exp(s_y'), computed after subtracting the max.
inline std::vector<double> cloze_distribution(std::span<const double> scores) {
  if (scores.empty()) throw ContractError("cloze distribution needs at least one label");
  const double mx = *std::max_element(scores.begin(), scores.end());
  std::vector<double> p(scores.size());
  double z = 0.0;
  for (std::size_t i = 0; i < scores.size(); ++i) z += (p[i] = std::exp(scores[i] - mx));
  for (auto& v : p) v /= z;
  return p;
}

/// Per-label probabilities for one input under a cloze pattern.
template <typename T>
std::vector<double> cloze_predict(const GlmModel<T>& model, const ClozePattern& pattern, std::string_view input,
                                  const Vocab& vocab) {
  pattern.validate();
  const BlankContext ctx = build_generation_context(pattern.render(input, vocab), false);
  std::vector<double> scores;
  for (const auto& v : pattern.verbalizers) scores.push_back(score_candidate(model, ctx.example, ctx.blanks[0], v));
  return cloze_distribution(scores);
}

// ---------------------------------------------------------------------------
// Decoding

enum class DecodeStrategy { kGreedy, kTopK, kBeam };

struct DecodeConfig {
  DecodeStrategy strategy = DecodeStrategy::kGreedy;
  std::size_t max_blank_len = 32;
  std::size_t top_k = 40;
  std::size_t beam_width = 5;
  /// Exponent of the length penalty ((5 + len) / 6)^alpha applied to beam scores.
  double length_penalty = 0.0;
  bool block_repeated_trigrams = true;

  void validate() const {
    if (max_blank_len == 0) throw ContractError("decode: max_blank_len must be >= 1");
    if (top_k == 0) throw ContractError("decode: top_k must be >= 1");
    if (beam_width == 0) throw ContractError("decode: beam_width must be >= 1");
  }
};

struct BlankFill {
  std::size_t blank_index = 0;
  std::vector<TokenId> tokens;  // without [END]
  double logprob = 0.0;         // includes the [END] step when finished
  bool truncated = false;       // budget ran out before [END]
};

/// Log-softmax over the vocabulary at the last position of `ex`.
template <typename T>
std::vector<double> next_token_log_probs(const GlmModel<T>& model, const GlmExample& ex) {
  const Tensor<T> logits = model.forward(std::span<const GlmExample>(&ex, 1));
  const std::size_t vocab = logits.dim(2);
  const auto row = logits.data().subspan((ex.size() - 1) * vocab, vocab);
  double mx = -std::numeric_limits<double>::infinity();
  for (const T v : row) mx = std::max(mx, static_cast<double>(v));
  double z = 0.0;
  for (const T v : row) z += std::exp(static_cast<double>(v) - mx);
  const double lse = mx + std::log(z);
  std::vector<double> out(vocab);
  for (std::size_t i = 0; i < vocab; ++i) out[i] = static_cast<double>(row[i]) - lse;
  return out;
}

/// Index of the largest value; ties go to the lowest index.
inline std::size_t argmax_lowest(std::span<const double> v) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < v.size(); ++i) {
    if (v[i] > v[best]) best = i;
  }
  return best;
}

namespace detail {

inline bool repeats_trigram(std::span<const TokenId> seq, TokenId next) {
  const std::size_t n = seq.size();
  if (n < 2) return false;
  const TokenId a = seq[n - 2], b = seq[n - 1];
  for (std::size_t i = 0; i + 2 < n; ++i) {
    if (seq[i] == a && seq[i + 1] == b && seq[i + 2] == next) return true;
  }
  return false;
}

inline double length_normalizer(std::size_t len, double alpha) {
  if (alpha == 0.0) return 1.0;
  return std::pow((5.0 + static_cast<double>(len)) / 6.0, alpha);
}

template <typename T>
BlankFill decode_sampled(const GlmModel<T>& model, const GlmExample& base, std::size_t blank_pos,
                         const DecodeConfig& cfg, Rng& rng) {
  BlankFill fill;
  fill.truncated = true;
  for (std::size_t step = 0; step < cfg.max_blank_len; ++step) {
    GlmExample ex = base;
    append_part_b_span(ex, blank_pos, fill.tokens);
    const auto lp = next_token_log_probs(model, ex);
    TokenId next;
    if (cfg.strategy == DecodeStrategy::kGreedy) {
      next = argmax_lowest(lp);
    } else {
      std::vector<std::size_t> order(lp.size());
      std::iota(order.begin(), order.end(), std::size_t{0});
      const std::size_t k = std::min(cfg.top_k, lp.size());
      std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(k), order.end(),
                        [&](std::size_t a, std::size_t b) { return lp[a] > lp[b] || (lp[a] == lp[b] && a < b); });
      std::vector<double> w(k);
      double z = 0.0;
      for (std::size_t i = 0; i < k; ++i) z += (w[i] = std::exp(lp[order[i]] - lp[order[0]]));
      double u = rng.uniform() * z;
      next = order[k - 1];
      for (std::size_t i = 0; i < k; ++i) {
        if (u < w[i]) {
          next = order[i];
          break;
        }
        u -= w[i];
      }
    }
    fill.logprob += lp[next];
    if (next == Vocab::kEnd) {
      fill.truncated = false;
      break;
    }
    fill.tokens.push_back(next);
  }
  return fill;
}

template <typename T>
BlankFill decode_beam(const GlmModel<T>& model, const GlmExample& base, std::size_t blank_pos,
                      const DecodeConfig& cfg) {
  struct Hyp {
    std::vector<TokenId> tokens;
    double logprob = 0.0;
    bool finished = false;
  };
  const std::size_t width = cfg.beam_width;
  std::vector<Hyp> alive{Hyp{}};
  std::vector<Hyp> finished;
  for (std::size_t step = 0; step < cfg.max_blank_len && !alive.empty() && finished.size() < width; ++step) {
    struct Cand {
      std::size_t hyp;
      TokenId token;
      double score;
    };
    std::vector<Cand> cands;
    for (std::size_t h = 0; h < alive.size(); ++h) {
      GlmExample ex = base;
      append_part_b_span(ex, blank_pos, alive[h].tokens);
      const auto lp = next_token_log_probs(model, ex);
      for (TokenId v = 0; v < lp.size(); ++v) {
        if (v != Vocab::kEnd && cfg.block_repeated_trigrams && repeats_trigram(alive[h].tokens, v)) continue;
        cands.push_back({h, v, alive[h].logprob + lp[v]});
      }
    }
    std::stable_sort(cands.begin(), cands.end(), [](const Cand& a, const Cand& b) { return a.score > b.score; });
    std::vector<Hyp> next_alive;
    for (std::size_t rank = 0; rank < cands.size() && next_alive.size() < width; ++rank) {
      const Cand& c = cands[rank];
      if (c.token == Vocab::kEnd) {
        if (rank < width) finished.push_back(Hyp{alive[c.hyp].tokens, c.score, true});
        continue;
      }
      Hyp h = alive[c.hyp];
      h.tokens.push_back(c.token);
      h.logprob = c.score;
      next_alive.push_back(std::move(h));
    }
    alive = std::move(next_alive);
  }
  const bool any_finished = !finished.empty();
  const std::vector<Hyp>& pool = any_finished ? finished : alive;
  if (pool.empty()) return BlankFill{0, {}, 0.0, true};
  std::size_t best = 0;
  for (std::size_t i = 1; i < pool.size(); ++i) {
    const double si = pool[i].logprob / length_normalizer(pool[i].tokens.size(), cfg.length_penalty);
    const double sb = pool[best].logprob / length_normalizer(pool[best].tokens.size(), cfg.length_penalty);
    if (si > sb) best = i;
  }
  return BlankFill{0, pool[best].tokens, pool[best].logprob, !any_finished};
}

}  // namespace detail

/// Fills every blank of `ctx` left to right. Earlier fills stay in Part B and
/// are visible while decoding later blanks.
template <typename T>
std::vector<BlankFill> infill(const GlmModel<T>& model, const BlankContext& ctx, const DecodeConfig& cfg, Rng& rng) {
  cfg.validate();
  if (ctx.blanks.empty()) throw ContractError("infill: no blanks");
  GlmExample base = ctx.example;
  std::vector<BlankFill> out;
  for (std::size_t i = 0; i < ctx.blanks.size(); ++i) {
    BlankFill fill = cfg.strategy == DecodeStrategy::kBeam
                         ? detail::decode_beam(model, base, ctx.blanks[i], cfg)
                         : detail::decode_sampled(model, base, ctx.blanks[i], cfg, rng);
    fill.blank_index = i;
    append_part_b_span(base, ctx.blanks[i], fill.tokens);
    out.push_back(std::move(fill));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Language-model evaluation

struct EvalConfig {
  std::size_t window = 64;
  std::size_t overlap = 32;
  /// Part A attends bidirectionally; false makes it causal.
  bool bidirectional = true;

  void validate() const {
    if (window < 2) throw ContractError("eval: window must be >= 2");
    if (overlap == 0 || overlap > window) throw ContractError("eval: overlap must lie in [1, window]");
  }
};

struct PerplexityResult {
  double perplexity = 0.0;
  double mean_nll = 0.0;
  std::size_t tokens = 0;
  std::size_t windows = 0;
};

/// Teacher-forced layout scoring `scored` after `context`: Part A is the
/// context plus one [MASK], Part B is [START] + scored.
inline GlmExample scoring_example(std::span<const TokenId> context, std::span<const TokenId> scored,
                                  bool bidirectional) {
  BlankContext ctx = build_generation_context(context, true);
  ctx.example.causal_context = !bidirectional;
  append_part_b_span(ctx.example, ctx.blanks.back(), scored);
  return ctx.example;
}

/// Sliding-window perplexity. The first window scores all of its tokens;
/// each later window advances by `overlap` and scores only its last
/// `overlap` tokens, conditioning on the preceding window - overlap tokens.
template <typename T>
PerplexityResult eval_perplexity(const GlmModel<T>& model, std::span<const TokenId> stream, const EvalConfig& cfg) {
  cfg.validate();
  if (stream.size() < 2) throw ContractError("eval: token stream needs at least 2 tokens");
  for (const TokenId t : stream) {
    if (t == Vocab::kMask) throw ContractError("eval: stream contains [MASK]");
  }
  const std::size_t total = stream.size();
  double nll = 0.0;
  std::size_t scored = 0, windows = 0, end = 0;
  while (end < total) {
    const std::size_t new_end = end == 0 ? std::min(cfg.window, total) : std::min(end + cfg.overlap, total);
    const std::size_t start = new_end > cfg.window ? new_end - cfg.window : 0;
    const auto context = stream.subspan(start, end - start);
    const auto target = stream.subspan(end, new_end - end);
    if (target.size() + 1 >= model.config().max_pos2) {
      throw ContractError("eval: scoring " + std::to_string(target.size()) + " tokens needs max_pos2 > " +
                          std::to_string(target.size() + 1));
    }
    const GlmExample ex = scoring_example(context, target, cfg.bidirectional);
    const Tensor<T> logits = model.forward(std::span<const GlmExample>(&ex, 1));
    const std::size_t vocab = logits.dim(2);
    const auto data = logits.data();
    for (std::size_t j = 0; j < target.size(); ++j) {
      const std::size_t row = ex.part_a_len + j;
      nll -= row_log_prob(data.subspan(row * vocab, vocab), target[j]);
    }
    scored += target.size();
    ++windows;
    end = new_end;
  }
  const double mean = nll / static_cast<double>(scored);
  return PerplexityResult{std::exp(mean), mean, scored, windows};
}

/// A passage whose final word (possibly several tokens) is to be predicted.
struct LastWordItem {
  std::vector<TokenId> context;
  std::vector<TokenId> answer;
};

/// Teacher-forced check: correct only if the argmax is right at every answer token.
template <typename T>
bool last_word_correct(const GlmModel<T>& model, const LastWordItem& item) {
  if (item.answer.empty()) throw ContractError("last-word item has an empty answer");
  const GlmExample ex = scoring_example(item.context, item.answer, true);
  const Tensor<T> logits = model.forward(std::span<const GlmExample>(&ex, 1));
  const std::size_t vocab = logits.dim(2);
  for (std::size_t j = 0; j < item.answer.size(); ++j) {
    const auto r = logits.data().subspan((ex.part_a_len + j) * vocab, vocab);
    std::size_t best = 0;
    for (std::size_t i = 1; i < vocab; ++i) {
      if (r[i] > r[best]) best = i;
    }
    if (best != item.answer[j]) return false;
  }
  return true;
}

template <typename T>
double eval_last_word(const GlmModel<T>& model, std::span<const LastWordItem> items) {
  if (items.empty()) throw ContractError("last-word eval needs at least one passage");
  std::size_t correct = 0;
  for (const auto& it : items) correct += last_word_correct(model, it) ? 1 : 0;
  return static_cast<double>(correct) / static_cast<double>(items.size());
}

}  // namespace blankfill
