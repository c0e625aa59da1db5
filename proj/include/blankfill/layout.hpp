// Copyright (c) 2026, The blankfill Authors
// SPDX-License-Identifier: Apache-2.0
//
// Part A / Part B sequence layout with two position tracks.
//
//   Part A  corrupted text; every span collapsed to one mask token.
//           pos1 = index in Part A, pos2 = 0. Attends bidirectionally within A.
//   Part B  for each span (in generation order): [START] + span tokens,
//           predicting span tokens + [END]. pos1 = index of the span's mask
//           in Part A, pos2 = 1..len+1. Attends to all of A and causally to B.

#pragma once

#include <cstddef>
#include <iomanip>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "blankfill/corruption.hpp"
#include "blankfill/errors.hpp"
#include "blankfill/vocab.hpp"

namespace blankfill {

/// Enough to materialize the visibility matrix of one example.
struct AttentionMaskSpec {
  std::size_t part_a_len = 0;
  std::vector<std::size_t> b_span_lens;
  /// Part A attends causally instead of bidirectionally (unidirectional LM eval).
  bool causal_context = false;

  std::size_t total() const {
    std::size_t n = part_a_len;
    for (const auto l : b_span_lens) n += l;
    return n;
  }

  bool allowed(std::size_t q, std::size_t k) const {
    if (k >= total()) return false;
    if (causal_context) return k <= q;
    if (q < part_a_len) return k < part_a_len;
    return k < part_a_len || k <= q;
  }
};

/// Row-major boolean matrix; cell (q, k) true when query q may attend to key k.
struct MaskMatrix {
  std::size_t side = 0;
  std::vector<unsigned char> cells;

  bool operator()(std::size_t q, std::size_t k) const { return cells[q * side + k] != 0; }
};

/// Materializes the mask. With side > total(), the extra key columns (padding)
/// are never visible; padding rows follow the Part B rule.
inline MaskMatrix build_attention_mask(const AttentionMaskSpec& spec, std::size_t side = 0) {
  const std::size_t n = spec.total();
  if (side == 0) side = n;
  if (side < n) throw ContractError("attention mask side smaller than sequence");
  MaskMatrix m{side, std::vector<unsigned char>(side * side, 0)};
  for (std::size_t q = 0; q < side; ++q) {
    for (std::size_t k = 0; k < n; ++k) m.cells[q * side + k] = spec.allowed(q, k) ? 1 : 0;
  }
  return m;
}

/// One laid-out instance. All per-position vectors have the same length.
struct GlmExample {
  std::vector<TokenId> input_ids;
  std::vector<std::size_t> pos1;
  std::vector<std::size_t> pos2;
  std::size_t part_a_len = 0;
  /// Laid-out length of each Part B span ([START] included).
  std::vector<std::size_t> b_span_lens;
  /// Next-token targets; [PAD] wherever loss_mask is false.
  std::vector<TokenId> target_ids;
  /// True exactly on Part B positions.
  std::vector<bool> loss_mask;
  bool causal_context = false;

  std::size_t size() const { return input_ids.size(); }
  std::size_t part_b_len() const { return input_ids.size() - part_a_len; }

  AttentionMaskSpec mask_spec() const { return {part_a_len, b_span_lens, causal_context}; }

  std::span<const TokenId> part_b_targets() const {
    return std::span<const TokenId>(target_ids).subspan(part_a_len);
  }

  bool operator==(const GlmExample&) const = default;
};

struct LayoutConfig {
  bool sentinel_mode = false;
  /// Largest allowed laid-out length; 0 disables the check.
  std::size_t max_length = 0;
};

/// Appends one Part B span: inputs [START] + tokens, targets tokens + [END].
inline void append_part_b_span(GlmExample& ex, std::size_t mask_pos, std::span<const TokenId> tokens) {
  ex.input_ids.push_back(Vocab::kStart);
  ex.pos1.push_back(mask_pos);
  ex.pos2.push_back(1);
  for (std::size_t j = 0; j < tokens.size(); ++j) {
    ex.input_ids.push_back(tokens[j]);
    ex.pos1.push_back(mask_pos);
    ex.pos2.push_back(j + 2);
    ex.target_ids.push_back(tokens[j]);
    ex.loss_mask.push_back(true);
  }
  ex.target_ids.push_back(Vocab::kEnd);
  ex.loss_mask.push_back(true);
  ex.b_span_lens.push_back(tokens.size() + 1);
}

/// Lays out `tokens` corrupted by `spans`, generating spans in `order`.
inline GlmExample build_example(std::span<const TokenId> tokens, const SpanSet& spans, const Permutation& order,
                                const Vocab& vocab, const LayoutConfig& cfg = {}) {
  spans.validate(tokens.size());
  if (!order.valid_for(spans.size())) throw ContractError("permutation does not match span count");
  if (cfg.sentinel_mode && spans.size() > vocab.sentinel_count()) {
    throw ContractError(std::to_string(spans.size()) + " spans but only " +
                        std::to_string(vocab.sentinel_count()) + " sentinel tokens");
  }

  GlmExample ex;
  std::vector<std::size_t> mask_pos(spans.size());
  std::size_t next = 0;
  for (std::size_t i = 0; i < tokens.size();) {
    if (next < spans.size() && spans.spans[next].start == i) {
      mask_pos[next] = ex.input_ids.size();
      ex.input_ids.push_back(cfg.sentinel_mode ? vocab.sentinel(next + 1) : Vocab::kMask);
      i += spans.spans[next].length;
      ++next;
    } else {
      ex.input_ids.push_back(tokens[i]);
      ++i;
    }
  }
  ex.part_a_len = ex.input_ids.size();
  for (std::size_t i = 0; i < ex.part_a_len; ++i) {
    ex.pos1.push_back(i);
    ex.pos2.push_back(0);
  }
  ex.target_ids.assign(ex.part_a_len, Vocab::kPad);
  ex.loss_mask.assign(ex.part_a_len, false);
  for (const std::size_t s : order.order) {
    const Span& span = spans.spans[s];
    append_part_b_span(ex, mask_pos[s], tokens.subspan(span.start, span.length));
  }
  if (cfg.max_length != 0 && ex.size() > cfg.max_length) {
    throw LengthError("laid-out example has " + std::to_string(ex.size()) + " positions, limit " +
                      std::to_string(cfg.max_length));
  }
  return ex;
}

/// Part A for generation: the context with its blanks, plus the index of every blank.
struct BlankContext {
  GlmExample example;  // Part B empty
  std::vector<std::size_t> blanks;

  /// The first decode input of blank i: [START] at the blank's pos1, pos2 = 1.
  GlmExample seed(std::size_t i) const {
    GlmExample ex = example;
    append_part_b_span(ex, blanks.at(i), {});
    return ex;
  }
};

/// Builds Part A from `context`. Runs of [MASK] ids inside the context are
/// collapsed into one blank each; `append_blank` adds a blank at the end.
inline BlankContext build_generation_context(std::span<const TokenId> context, bool append_blank = true) {
  BlankContext out;
  GlmExample& ex = out.example;
  for (const TokenId t : context) {
    if (t == Vocab::kMask && !ex.input_ids.empty() && ex.input_ids.back() == Vocab::kMask) continue;
    if (t == Vocab::kMask) out.blanks.push_back(ex.input_ids.size());
    ex.input_ids.push_back(t);
  }
  if (append_blank) {
    out.blanks.push_back(ex.input_ids.size());
    ex.input_ids.push_back(Vocab::kMask);
  }
  if (out.blanks.empty()) throw ContractError("generation context has no blank to fill");
  ex.part_a_len = ex.input_ids.size();
  for (std::size_t i = 0; i < ex.part_a_len; ++i) {
    ex.pos1.push_back(i);
    ex.pos2.push_back(0);
  }
  ex.target_ids.assign(ex.part_a_len, Vocab::kPad);
  ex.loss_mask.assign(ex.part_a_len, false);
  return out;
}

/// Human-readable table of an example: one column per position, then the mask.
inline std::string dump_example(const GlmExample& ex, const Vocab& vocab) {
  std::ostringstream os;
  auto row = [&](const char* label, auto&& cell) {
    os << std::left << std::setw(8) << label;
    for (std::size_t i = 0; i < ex.size(); ++i) os << ' ' << std::setw(8) << cell(i);
    os << '\n';
  };
  row("token", [&](std::size_t i) { return vocab.token(ex.input_ids[i]); });
  row("pos1", [&](std::size_t i) { return std::to_string(ex.pos1[i]); });
  row("pos2", [&](std::size_t i) { return std::to_string(ex.pos2[i]); });
  row("target", [&](std::size_t i) { return ex.loss_mask[i] ? vocab.token(ex.target_ids[i]) : std::string("-"); });
  const MaskMatrix m = build_attention_mask(ex.mask_spec());
  for (std::size_t q = 0; q < m.side; ++q) {
    os << "mask " << std::right << std::setw(3) << q << ' ';
    for (std::size_t k = 0; k < m.side; ++k) os << (m(q, k) ? '1' : '0');
    os << '\n';
  }
  return os.str();
}

}  // namespace blankfill
