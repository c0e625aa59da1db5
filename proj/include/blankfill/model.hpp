// Copyright (c) 2026, The blankfill Authors
// SPDX-License-Identifier: Apache-2.0
//
// Single-stack Transformer over the Part A / Part B layout. Inputs are the sum
// of token, first-position and (optionally) second-position embeddings; each
// layer is pre-norm attention and pre-norm GeLU feed-forward with residuals; a
// final norm feeds one linear projection to the vocabulary.

#pragma once

#include <algorithm>
#include <cstddef>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "blankfill/errors.hpp"
#include "blankfill/layout.hpp"
#include "blankfill/rng.hpp"
#include "blankfill/tensor.hpp"

namespace blankfill {

struct ModelConfig {
  std::size_t n_layers = 4;
  std::size_t hidden_size = 128;
  std::size_t n_heads = 8;
  std::size_t ffn_size = 512;
  std::size_t vocab_size = 0;
  std::size_t max_pos1 = 256;
  std::size_t max_pos2 = 130;
  double dropout = 0.1;
  double attention_dropout = 0.1;
  bool use_pos2 = true;
  bool tie_output = true;

  void validate() const {
    if (n_layers == 0 || hidden_size == 0 || n_heads == 0 || ffn_size == 0) {
      throw ContractError("model config: sizes must be positive");
    }
    if (hidden_size % n_heads != 0) throw ContractError("model config: hidden_size must divide by n_heads");
    if (vocab_size == 0) throw ContractError("model config: vocab_size must be positive");
    // pos2 must reach 2 for even a one-token span
    if (max_pos1 == 0 || max_pos2 < 3) throw ContractError("model config: position tables too small");
    if (dropout < 0.0 || dropout >= 1.0 || attention_dropout < 0.0 || attention_dropout >= 1.0) {
      throw ContractError("model config: dropout rates must lie in [0, 1)");
    }
  }

  bool operator==(const ModelConfig&) const = default;
};

/// Named learnable tensors in a fixed order.
template <typename T>
class Parameters {
 public:
  void add(std::string name, Tensor<T> t) {
    t.set_requires_grad(true);
    entries_.emplace_back(std::move(name), std::move(t));
  }

  std::size_t size() const { return entries_.size(); }
  const std::vector<std::pair<std::string, Tensor<T>>>& entries() const { return entries_; }
  std::vector<std::pair<std::string, Tensor<T>>>& entries() { return entries_; }

  std::optional<Tensor<T>> find(std::string_view name) const {
    for (const auto& [n, t] : entries_) {
      if (n == name) return t;
    }
    return std::nullopt;
  }

  const Tensor<T>& get(std::string_view name) const {
    for (const auto& [n, t] : entries_) {
      if (n == name) return t;
    }
    throw ContractError("no parameter named " + std::string(name));
  }

  std::vector<Tensor<T>> tensors() const {
    std::vector<Tensor<T>> out;
    for (const auto& e : entries_) out.push_back(e.second);
    return out;
  }

  std::size_t scalar_count() const {
    std::size_t n = 0;
    for (const auto& e : entries_) n += e.second.numel();
    return n;
  }

  void zero_grad() {
    for (auto& e : entries_) e.second.zero_grad();
  }

  /// Deep copy with fresh storage.
  Parameters clone() const {
    Parameters out;
    for (const auto& [n, t] : entries_) out.add(n, t.clone());
    return out;
  }

 private:
  std::vector<std::pair<std::string, Tensor<T>>> entries_;
};

/// Whether weight decay applies: not to norm gains or any bias.
inline bool decays(std::string_view name) {
  return !(name.ends_with(".bias") || name.ends_with(".gain") || name.ends_with(".bq") ||
           name.ends_with(".bk") || name.ends_with(".bv") || name.ends_with(".bo") || name.ends_with(".b1") ||
           name.ends_with(".b2"));
}

/// Names and shapes of every parameter implied by `cfg`, in storage order.
inline std::vector<std::pair<std::string, Shape>> parameter_layout(const ModelConfig& cfg) {
  const std::size_t h = cfg.hidden_size, f = cfg.ffn_size;
  std::vector<std::pair<std::string, Shape>> out;
  out.emplace_back("embed.token", Shape{cfg.vocab_size, h});
  out.emplace_back("embed.pos1", Shape{cfg.max_pos1, h});
  if (cfg.use_pos2) out.emplace_back("embed.pos2", Shape{cfg.max_pos2, h});
  for (std::size_t l = 0; l < cfg.n_layers; ++l) {
    const std::string p = "layer" + std::to_string(l) + ".";
    out.emplace_back(p + "ln1.gain", Shape{h});
    out.emplace_back(p + "ln1.bias", Shape{h});
    for (const char* w : {"wq", "wk", "wv", "wo"}) out.emplace_back(p + "attn." + w, Shape{h, h});
    for (const char* b : {"bq", "bk", "bv", "bo"}) out.emplace_back(p + "attn." + b, Shape{h});
    out.emplace_back(p + "ln2.gain", Shape{h});
    out.emplace_back(p + "ln2.bias", Shape{h});
    out.emplace_back(p + "ffn.w1", Shape{h, f});
    out.emplace_back(p + "ffn.b1", Shape{f});
    out.emplace_back(p + "ffn.w2", Shape{f, h});
    out.emplace_back(p + "ffn.b2", Shape{h});
  }
  out.emplace_back("final_ln.gain", Shape{h});
  out.emplace_back("final_ln.bias", Shape{h});
  if (!cfg.tie_output) out.emplace_back("head.weight", Shape{cfg.vocab_size, h});
  return out;
}

/// Weights ~ N(0, 0.02^2); norm gains 1; biases 0.
template <typename T>
Parameters<T> init_params(const ModelConfig& cfg, Rng& rng) {
  cfg.validate();
  Parameters<T> params;
  for (auto& [name, shape] : parameter_layout(cfg)) {
    const std::size_t n = shape_numel(shape);
    std::vector<T> values(n, T(0));
    if (name.ends_with(".gain")) {
      std::fill(values.begin(), values.end(), T(1));
    } else if (decays(name)) {
      for (auto& v : values) v = static_cast<T>(0.02 * rng.normal());
    }
    params.add(name, Tensor<T>(shape, std::move(values)));
  }
  return params;
}

/// Attention probabilities captured during a forward pass: [layer][batch][head][seq*seq].
template <typename T>
using AttentionTrace = std::vector<std::vector<std::vector<std::vector<T>>>>;

template <typename T>
class GlmModel {
 public:
  GlmModel(ModelConfig cfg, Parameters<T> params) : cfg_(std::move(cfg)), params_(std::move(params)) {
    cfg_.validate();
    const auto layout = parameter_layout(cfg_);
    if (layout.size() != params_.size()) throw ContractError("parameter set does not match model config");
    for (std::size_t i = 0; i < layout.size(); ++i) {
      const auto& [name, tensor] = params_.entries()[i];
      if (name != layout[i].first || tensor.shape() != layout[i].second) {
        throw ContractError("parameter " + name + " does not match model config");
      }
    }
  }

  static GlmModel init(const ModelConfig& cfg, std::uint64_t seed) {
    Rng rng(seed);
    return GlmModel(cfg, init_params<T>(cfg, rng));
  }

  const ModelConfig& config() const { return cfg_; }
  const Parameters<T>& params() const { return params_; }
  Parameters<T>& params() { return params_; }

  /// Logits [batch x seq x vocab] for a batch padded to its longest example.
  /// Dropout is active only when `train` is set.
  Tensor<T> forward(Tape<T>& tape, std::span<const GlmExample> batch, bool train, Rng& rng,
                    AttentionTrace<T>* trace = nullptr) const {
    if (batch.empty()) throw ContractError("forward: empty batch");
    std::size_t seq = 0;
    for (const auto& ex : batch) {
      if (ex.size() == 0) throw ContractError("forward: empty example");
      if (ex.pos1.size() != ex.size() || ex.pos2.size() != ex.size()) {
        throw ContractError("forward: position tracks do not match token count");
      }
      seq = std::max(seq, ex.size());
    }
    const std::size_t bsz = batch.size(), rows = bsz * seq;
    std::vector<std::size_t> ids(rows, Vocab::kPad), p1(rows, 0), p2(rows, 0);
    std::vector<std::vector<unsigned char>> masks;
    masks.reserve(bsz);
    for (std::size_t b = 0; b < bsz; ++b) {
      const auto& ex = batch[b];
      for (std::size_t i = 0; i < ex.size(); ++i) {
        if (ex.input_ids[i] >= cfg_.vocab_size) {
          throw ContractError("forward: token id " + std::to_string(ex.input_ids[i]) + " >= vocab size " +
                              std::to_string(cfg_.vocab_size));
        }
        if (ex.pos1[i] >= cfg_.max_pos1) {
          throw ContractError("forward: pos1 " + std::to_string(ex.pos1[i]) + " >= max_pos1 " +
                              std::to_string(cfg_.max_pos1));
        }
        if (ex.pos2[i] >= cfg_.max_pos2) {
          throw ContractError("forward: pos2 " + std::to_string(ex.pos2[i]) + " >= max_pos2 " +
                              std::to_string(cfg_.max_pos2));
        }
        ids[b * seq + i] = ex.input_ids[i];
        p1[b * seq + i] = ex.pos1[i];
        p2[b * seq + i] = ex.pos2[i];
      }
      masks.push_back(build_attention_mask(ex.mask_spec(), seq).cells);
    }

    Tensor<T> x = embedding(tape, params_.get("embed.token"), ids);
    x = add(tape, x, embedding(tape, params_.get("embed.pos1"), p1));
    if (cfg_.use_pos2) x = add(tape, x, embedding(tape, params_.get("embed.pos2"), p2));
    x = dropout(tape, x, cfg_.dropout, rng, train);

    if (trace != nullptr) trace->assign(cfg_.n_layers, {});
    for (std::size_t l = 0; l < cfg_.n_layers; ++l) {
      const std::string p = "layer" + std::to_string(l) + ".";
      auto param = [&](const std::string& n) -> const Tensor<T>& { return params_.get(p + n); };
      auto linear = [&](const Tensor<T>& in, const std::string& w, const std::string& b) {
        return add(tape, matmul(tape, in, param(w)), param(b));
      };

      const Tensor<T> a_in = layer_norm(tape, x, param("ln1.gain"), param("ln1.bias"));
      const Tensor<T> q = linear(a_in, "attn.wq", "attn.bq");
      const Tensor<T> k = linear(a_in, "attn.wk", "attn.bk");
      const Tensor<T> v = linear(a_in, "attn.wv", "attn.bv");
      const Tensor<T> ctx = multihead_attention(tape, q, k, v, bsz, seq, cfg_.n_heads, masks,
                                                cfg_.attention_dropout, rng, train,
                                                trace != nullptr ? &(*trace)[l] : nullptr);
      x = add(tape, x, dropout(tape, linear(ctx, "attn.wo", "attn.bo"), cfg_.dropout, rng, train));

      const Tensor<T> f_in = layer_norm(tape, x, param("ln2.gain"), param("ln2.bias"));
      const Tensor<T> f_mid = gelu(tape, linear(f_in, "ffn.w1", "ffn.b1"));
      x = add(tape, x, dropout(tape, linear(f_mid, "ffn.w2", "ffn.b2"), cfg_.dropout, rng, train));
    }
    x = layer_norm(tape, x, params_.get("final_ln.gain"), params_.get("final_ln.bias"));
    const Tensor<T>& head = cfg_.tie_output ? params_.get("embed.token") : params_.get("head.weight");
    const Tensor<T> logits = matmul_nt(tape, x, head);
    return reshape(tape, logits, Shape{bsz, seq, cfg_.vocab_size});
  }

  /// Evaluation-mode forward without recording.
  Tensor<T> forward(std::span<const GlmExample> batch) const {
    Tape<T> tape(false);
    Rng unused(0);
    return forward(tape, batch, false, unused);
  }

 private:
  ModelConfig cfg_;
  Parameters<T> params_;
};

/// Padded per-row targets and loss mask matching forward()'s layout.
inline std::pair<std::vector<std::size_t>, std::vector<bool>> flatten_targets(std::span<const GlmExample> batch,
                                                                              std::size_t seq) {
  std::vector<std::size_t> targets(batch.size() * seq, Vocab::kPad);
  std::vector<bool> mask(batch.size() * seq, false);
  for (std::size_t b = 0; b < batch.size(); ++b) {
    const auto& ex = batch[b];
    for (std::size_t i = 0; i < ex.size(); ++i) {
      targets[b * seq + i] = ex.target_ids[i];
      mask[b * seq + i] = ex.loss_mask[i];
    }
  }
  return {std::move(targets), std::move(mask)};
}

}  // namespace blankfill
