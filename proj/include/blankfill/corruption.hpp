// Copyright (c) 2026, The blankfill Authors
// SPDX-License-Identifier: Apache-2.0
//
// Span samplers for the blank-infilling objectives and the order in which the
// sampled spans are generated.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <numeric>
#include <string>
#include <string_view>
#include <vector>

#include "blankfill/errors.hpp"
#include "blankfill/rng.hpp"
#include "blankfill/vocab.hpp"

namespace blankfill {

enum class Objective { kShortSpan, kDocument, kSentence };

inline std::string_view objective_name(Objective o) {
  switch (o) {
    case Objective::kShortSpan: return "short";
    case Objective::kDocument: return "doc";
    case Objective::kSentence: return "sentence";
  }
  return "?";
}

inline Objective parse_objective(std::string_view name) {
  if (name == "short") return Objective::kShortSpan;
  if (name == "doc" || name == "document") return Objective::kDocument;
  if (name == "sentence" || name == "sent") return Objective::kSentence;
  throw ContractError("unknown objective '" + std::string(name) + "' (expected short|doc|sentence)");
}

struct CorruptionConfig {
  double lambda = 3.0;
  double min_mask_ratio = 0.15;
  /// With multi_task this is the long objective mixed with short spans.
  Objective objective = Objective::kShortSpan;
  bool multi_task = false;
  bool shuffle_spans = true;
  bool sentinel_mode = false;

  void validate() const {
    if (!(lambda > 0.0)) throw ContractError("corruption: lambda must be positive");
    if (!(min_mask_ratio > 0.0 && min_mask_ratio < 1.0)) {
      throw ContractError("corruption: min_mask_ratio must lie in (0, 1)");
    }
    if (multi_task && objective == Objective::kShortSpan) {
      throw ContractError("corruption: multi-task mixing needs a long objective (doc or sentence)");
    }
  }
};

struct Span {
  std::size_t start = 0;
  std::size_t length = 0;

  std::size_t end() const { return start + length; }
  bool operator==(const Span&) const = default;
};

/// Disjoint spans sorted by start.
struct SpanSet {
  std::vector<Span> spans;

  std::size_t size() const { return spans.size(); }
  bool empty() const { return spans.empty(); }
  std::size_t masked_tokens() const {
    std::size_t n = 0;
    for (const auto& s : spans) n += s.length;
    return n;
  }
  bool operator==(const SpanSet&) const = default;

  /// Throws ContractError unless sorted, disjoint, non-empty and inside [0, seq_len).
  void validate(std::size_t seq_len) const {
    std::size_t prev_end = 0;
    for (std::size_t i = 0; i < spans.size(); ++i) {
      const auto& s = spans[i];
      if (s.length == 0) throw ContractError("span " + std::to_string(i) + " is empty");
      if (s.end() > seq_len) throw ContractError("span " + std::to_string(i) + " exceeds sequence");
      if (i > 0 && s.start < prev_end) throw ContractError("spans overlap or are unsorted");
      prev_end = s.end();
    }
  }
};

/// Generation order over the spans of a SpanSet (indices into its sorted list).
struct Permutation {
  std::vector<std::size_t> order;

  bool valid_for(std::size_t m) const {
    if (order.size() != m) return false;
    std::vector<bool> seen(m, false);
    for (const auto i : order) {
      if (i >= m || seen[i]) return false;
      seen[i] = true;
    }
    return true;
  }
};

/// Smallest token count whose fraction of seq_len reaches `ratio`.
inline std::size_t required_masked(std::size_t seq_len, double ratio) {
  // The epsilon absorbs representation error, e.g. 0.15 * 100 = 15.000000000000002.
  return static_cast<std::size_t>(std::ceil(ratio * static_cast<double>(seq_len) - 1e-9));
}

/// Poisson-length spans, resampled until at least min_mask_ratio of the
/// sequence is masked. Lengths are clamped to [1, remaining budget]; starts
/// are rejection-sampled against existing spans (20 tries, then a new length).
inline SpanSet sample_short_spans(std::size_t seq_len, Rng& rng, const CorruptionConfig& cfg) {
  if (seq_len < 2) throw DegenerateInputError("short-span sampling needs at least 2 tokens");
  const std::size_t target = std::max<std::size_t>(1, required_masked(seq_len, cfg.min_mask_ratio));
  if (target > seq_len) throw DegenerateInputError("mask ratio cannot be met on this sequence");
  constexpr int kStartRetries = 20;
  constexpr int kMaxLengthDraws = 10000;

  std::vector<bool> taken(seq_len, false);
  SpanSet out;
  std::size_t masked = 0;
  int draws = 0;
  while (masked < target) {
    if (++draws > kMaxLengthDraws) throw DegenerateInputError("could not place spans without overlap");
    const auto budget = static_cast<std::int64_t>(target - masked);
    const auto length =
        static_cast<std::size_t>(std::clamp<std::int64_t>(rng.poisson(cfg.lambda), 1, budget));
    for (int attempt = 0; attempt < kStartRetries; ++attempt) {
      const std::size_t start = rng.uniform_int(seq_len - length + 1);
      bool free = true;
      for (std::size_t i = start; i < start + length && free; ++i) free = !taken[i];
      if (!free) continue;
      std::fill(taken.begin() + static_cast<std::ptrdiff_t>(start),
                taken.begin() + static_cast<std::ptrdiff_t>(start + length), true);
      out.spans.push_back({start, length});
      masked += length;
      break;
    }
  }
  std::sort(out.spans.begin(), out.spans.end(), [](const Span& a, const Span& b) { return a.start < b.start; });
  return out;
}

/// One span covering a uniform 50%-100% of the sequence at a uniform offset.
inline SpanSet sample_document_span(std::size_t seq_len, Rng& rng) {
  if (seq_len < 2) throw DegenerateInputError("document-span sampling needs at least 2 tokens");
  const auto min_len = static_cast<std::int64_t>((seq_len + 1) / 2);
  const auto length = static_cast<std::size_t>(rng.uniform_range(min_len, static_cast<std::int64_t>(seq_len)));
  const std::size_t start = rng.uniform_int(seq_len - length + 1);
  return SpanSet{{Span{start, length}}};
}

/// Whole sentences drawn without replacement until min_mask_ratio is covered.
inline SpanSet sample_sentence_spans(const Document& doc, Rng& rng, double min_mask_ratio = 0.15) {
  if (doc.tokens.empty()) throw DegenerateInputError("sentence sampling on an empty document");
  std::vector<std::pair<std::size_t, std::size_t>> sentences;
  if (doc.sentence_starts.empty()) {
    sentences.emplace_back(0, doc.size());
  } else {
    for (std::size_t i = 0; i < doc.sentence_starts.size(); ++i) sentences.push_back(doc.sentence(i));
  }
  const std::size_t target = std::max<std::size_t>(1, required_masked(doc.size(), min_mask_ratio));
  std::vector<std::size_t> pool(sentences.size());
  std::iota(pool.begin(), pool.end(), std::size_t{0});
  SpanSet out;
  std::size_t masked = 0;
  for (std::size_t i = 0; i < pool.size() && masked < target; ++i) {
    const std::size_t j = i + rng.uniform_int(pool.size() - i);
    std::swap(pool[i], pool[j]);
    const auto [b, e] = sentences[pool[i]];
    out.spans.push_back({b, e - b});
    masked += e - b;
  }
  std::sort(out.spans.begin(), out.spans.end(), [](const Span& a, const Span& b) { return a.start < b.start; });
  return out;
}

/// Per-example objective: with multi_task, a fair coin between short spans
/// and the configured long objective.
inline Objective choose_objective(Rng& rng, const CorruptionConfig& cfg) {
  if (!cfg.multi_task) return cfg.objective;
  return rng.bernoulli(0.5) ? Objective::kShortSpan : cfg.objective;
}

/// Most spans any example of `seq_len` tokens can receive. Every sampled span
/// is at least one token and sampling stops at the mask target.
inline std::size_t max_span_count(std::size_t seq_len, const CorruptionConfig& cfg) {
  const std::size_t target = std::max<std::size_t>(1, required_masked(seq_len, cfg.min_mask_ratio));
  if (cfg.objective == Objective::kDocument && !cfg.multi_task) return 1;
  return target;
}

inline SpanSet sample_spans(const Document& doc, Objective objective, Rng& rng, const CorruptionConfig& cfg) {
  switch (objective) {
    case Objective::kShortSpan: return sample_short_spans(doc.size(), rng, cfg);
    case Objective::kDocument: return sample_document_span(doc.size(), rng);
    case Objective::kSentence: return sample_sentence_spans(doc, rng, cfg.min_mask_ratio);
  }
  throw ContractError("unknown objective");
}

/// Uniform random order (Fisher-Yates) when shuffling, else left to right.
inline Permutation permute_spans(const SpanSet& spans, Rng& rng, bool shuffle_spans) {
  Permutation p;
  p.order.resize(spans.size());
  std::iota(p.order.begin(), p.order.end(), std::size_t{0});
  if (!shuffle_spans) {
    std::stable_sort(p.order.begin(), p.order.end(),
                     [&](std::size_t a, std::size_t b) { return spans.spans[a].start < spans.spans[b].start; });
    return p;
  }
  for (std::size_t i = p.order.size(); i > 1; --i) {
    const std::size_t j = rng.uniform_int(i);
    std::swap(p.order[i - 1], p.order[j]);
  }
  return p;
}

}  // namespace blankfill
