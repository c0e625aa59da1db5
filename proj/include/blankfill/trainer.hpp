// Copyright (c) 2026, The blankfill Authors
// SPDX-License-Identifier: Apache-2.0
//
// Losses, Adam with decoupled weight decay, warmup + cosine schedule,
// gradient clipping, the pretraining loop and the two finetuning steps.

#pragma once

#include <chrono>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <numbers>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "blankfill/checkpoint.hpp"
#include "blankfill/corruption.hpp"
#include "blankfill/errors.hpp"
#include "blankfill/inference.hpp"
#include "blankfill/layout.hpp"
#include "blankfill/model.hpp"
#include "blankfill/rng.hpp"
#include "blankfill/tensor.hpp"
#include "blankfill/vocab.hpp"

namespace blankfill {

struct TrainConfig {
  double peak_lr = 3e-4;
  std::size_t warmup_steps = 100;
  std::size_t max_steps = 2000;
  std::size_t batch_size = 16;
  double beta1 = 0.9;
  double beta2 = 0.98;
  double adam_eps = 1e-6;
  double weight_decay = 0.1;
  double grad_clip = 1.0;
  double label_smoothing = 0.0;
  std::uint64_t seed = 1234;
  /// Raw documents are cut to this many tokens before corruption.
  std::size_t max_seq_len = 128;
  /// Write a checkpoint every this many steps (0: only at the end).
  std::size_t checkpoint_every = 0;
  /// Report 0 tokens/sec so metrics files are reproducible byte for byte.
  bool deterministic = false;

  void validate() const {
    if (!(peak_lr > 0.0)) throw ContractError("train: peak_lr must be positive");
    if (max_steps == 0 || warmup_steps >= max_steps) throw ContractError("train: need warmup_steps < max_steps");
    if (batch_size == 0) throw ContractError("train: batch_size must be positive");
    if (!(beta1 > 0.0 && beta1 < 1.0 && beta2 > 0.0 && beta2 < 1.0)) throw ContractError("train: betas in (0,1)");
    if (!(adam_eps > 0.0) || weight_decay < 0.0 || !(grad_clip > 0.0)) {
      throw ContractError("train: eps and clip must be positive, weight decay non-negative");
    }
    if (label_smoothing < 0.0 || label_smoothing >= 1.0) throw ContractError("train: label_smoothing in [0,1)");
    if (max_seq_len < 2) throw ContractError("train: max_seq_len must be >= 2");
  }
};

/// Learning rate after `step` updates: linear warmup to the peak, then cosine
/// decay to zero at max_steps.
inline double lr_schedule(std::size_t step, const TrainConfig& cfg) {
  const double peak = cfg.peak_lr;
  if (step >= cfg.max_steps) return 0.0;
  if (step < cfg.warmup_steps) return peak * static_cast<double>(step) / static_cast<double>(cfg.warmup_steps);
  const double progress =
      static_cast<double>(step - cfg.warmup_steps) / static_cast<double>(cfg.max_steps - cfg.warmup_steps);
  return std::max(0.0, peak * 0.5 * (1.0 + std::cos(std::numbers::pi * progress)));
}

/// Adam moments for every parameter plus the update counter.
template <typename T>
struct AdamState {
  std::size_t step = 0;
  std::vector<std::vector<T>> m;
  std::vector<std::vector<T>> v;

  static AdamState for_params(const Parameters<T>& params) {
    AdamState s;
    for (const auto& [name, t] : params.entries()) {
      s.m.emplace_back(t.numel(), T(0));
      s.v.emplace_back(t.numel(), T(0));
    }
    return s;
  }

  std::vector<NamedArray> to_arrays(const Parameters<T>& params) const {
    std::vector<NamedArray> out;
    for (std::size_t i = 0; i < params.size(); ++i) {
      const auto& [name, t] = params.entries()[i];
      out.push_back({"adam.m." + name, t.shape(), std::vector<float>(m[i].begin(), m[i].end())});
      out.push_back({"adam.v." + name, t.shape(), std::vector<float>(v[i].begin(), v[i].end())});
    }
    return out;
  }

  static AdamState from_arrays(const Parameters<T>& params, const std::vector<NamedArray>& arrays, std::size_t step) {
    AdamState s;
    s.step = step;
    auto find = [&](const std::string& name, const Tensor<T>& like) -> std::vector<T> {
      for (const auto& a : arrays) {
        if (a.name != name) continue;
        if (a.shape != like.shape()) throw CheckpointShapeError("optimizer state " + name + " has wrong shape");
        return std::vector<T>(a.values.begin(), a.values.end());
      }
      throw CheckpointShapeError("checkpoint lacks optimizer state " + name);
    };
    for (const auto& [name, t] : params.entries()) {
      s.m.push_back(find("adam.m." + name, t));
      s.v.push_back(find("adam.v." + name, t));
    }
    return s;
  }
};

/// Scales all gradients so their global L2 norm is at most max_norm.
/// Returns the norm before clipping.
template <typename T>
double clip_gradients(std::span<Tensor<T>> tensors, double max_norm) {
  double sq = 0.0;
  for (const auto& t : tensors) {
    for (const T g : t.grad()) sq += static_cast<double>(g) * static_cast<double>(g);
  }
  const double norm = std::sqrt(sq);
  if (norm > max_norm) {
    const T factor = static_cast<T>(max_norm / norm);
    for (auto& t : tensors) {
      if (!t.has_grad()) continue;
      for (T& g : t.mutable_grad()) g *= factor;
    }
  }
  return norm;
}

template <typename T>
double clip_gradients(Parameters<T>& params, double max_norm) {
  auto ts = params.tensors();
  return clip_gradients<T>(std::span<Tensor<T>>(ts), max_norm);
}

/// One Adam update with bias correction and decoupled weight decay
/// (p -= lr * wd * p) on parameters that decay. Missing gradients count as
/// zero. A non-finite gradient aborts before anything is modified.
template <typename T>
void adam_step(AdamState<T>& state, Parameters<T>& params, double lr, const TrainConfig& cfg) {
  if (state.m.size() != params.size()) state = AdamState<T>::for_params(params);
  for (const auto& [name, t] : params.entries()) {
    for (const T g : t.grad()) {
      if (!std::isfinite(g)) throw NumericError("non-finite gradient in " + name);
    }
  }
  ++state.step;
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.step));
  const T b1 = T(cfg.beta1), b2 = T(cfg.beta2);
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& [name, t] = params.entries()[i];
    const auto grad = t.grad();
    auto p = t.mutable_data();
    auto& m = state.m[i];
    auto& v = state.v[i];
    const T decay = decays(name) ? T(lr * cfg.weight_decay) : T(0);
    for (std::size_t j = 0; j < p.size(); ++j) {
      const T g = grad.empty() ? T(0) : grad[j];
      m[j] = b1 * m[j] + (T(1) - b1) * g;
      v[j] = b2 * v[j] + (T(1) - b2) * g * g;
      const T mhat = m[j] / T(bc1);
      const T vhat = v[j] / T(bc2);
      p[j] -= decay * p[j] + T(lr) * mhat / (std::sqrt(vhat) + T(cfg.adam_eps));
    }
  }
}

/// Mean token NLL over the loss-masked (Part B) positions of the batch.
template <typename T>
Tensor<T> pretrain_loss(Tape<T>& tape, const Tensor<T>& logits, std::span<const GlmExample> batch,
                        double label_smoothing = 0.0) {
  const std::size_t seq = logits.dim(1), vocab = logits.dim(2);
  const auto [targets, mask] = flatten_targets(batch, seq);
  const Tensor<T> flat = reshape(tape, logits, Shape{batch.size() * seq, vocab});
  return cross_entropy_with_logits(tape, flat, targets, mask, label_smoothing);
}

/// Corrupts and lays out one document for pretraining. Draw order from `rng`:
/// objective, spans, permutation.
inline GlmExample make_pretrain_example(const Document& source, const Vocab& vocab, const CorruptionConfig& cfg,
                                        std::size_t max_seq_len, Rng& rng) {
  Document doc = source;
  doc.truncate(max_seq_len);
  const Objective objective = choose_objective(rng, cfg);
  const SpanSet spans = sample_spans(doc, objective, rng, cfg);
  const Permutation order = permute_spans(spans, rng, cfg.shuffle_spans);
  return build_example(doc.tokens, spans, order, vocab, LayoutConfig{cfg.sentinel_mode, 0});
}

/// The batch used at optimizer step `step`: example i draws document
/// (step * batch + i) mod N with its own seed derived from that index.
inline std::vector<GlmExample> make_pretrain_batch(std::span<const Document> docs, const Vocab& vocab,
                                                   const CorruptionConfig& corruption, const TrainConfig& cfg,
                                                   std::size_t step) {
  std::vector<GlmExample> batch;
  batch.reserve(cfg.batch_size);
  for (std::size_t i = 0; i < cfg.batch_size; ++i) {
    const std::size_t index = step * cfg.batch_size + i;
    Rng rng(derive_seed(cfg.seed, index));
    batch.push_back(make_pretrain_example(docs[index % docs.size()], vocab, corruption, cfg.max_seq_len, rng));
  }
  return batch;
}

struct StepMetrics {
  std::size_t step = 0;  // updates completed, 1-based
  double loss = 0.0;
  double lr = 0.0;
  double tokens_per_sec = 0.0;
  double grad_norm = 0.0;
};

inline constexpr std::string_view kMetricsHeader = "step,loss,lr,tokens_per_sec";

inline std::string format_metrics_row(const StepMetrics& m) {
  char buf[128];
  std::snprintf(buf, sizeof(buf), "%zu,%.9g,%.9g,%.1f", m.step, m.loss, m.lr, m.tokens_per_sec);
  return buf;
}

struct TrainIo {
  std::optional<std::filesystem::path> metrics_csv;
  std::optional<std::filesystem::path> checkpoint;
  /// Stop after this many updates even if max_steps is not reached (0: run to max_steps).
  std::size_t step_limit = 0;
  std::function<void(const StepMetrics&)> on_step;
  /// Extra header keys written into every checkpoint.
  Metadata checkpoint_metadata;
};

/// Step-annotated wrapper for numeric failures inside the loop.
class TrainingNumericError : public NumericError {
 public:
  TrainingNumericError(std::size_t step, const std::string& what)
      : NumericError("step " + std::to_string(step) + ": " + what), step_(step) {}
  std::size_t step() const { return step_; }

 private:
  std::size_t step_;
};

template <typename T>
Metadata train_metadata(const AdamState<T>& state, const TrainConfig& cfg) {
  return {{"train.step", std::to_string(state.step)},
          {"train.seed", std::to_string(cfg.seed)},
          {"train.max_steps", std::to_string(cfg.max_steps)}};
}

template <typename T>
void save_training_checkpoint(const std::filesystem::path& path, const GlmModel<T>& model, const AdamState<T>& state,
                              const TrainConfig& cfg, Metadata extra = {}) {
  Metadata meta = train_metadata(state, cfg);
  meta.insert(extra.begin(), extra.end());
  save_checkpoint(path, model, meta, state.to_arrays(model.params()));
}

/// Restores optimizer state saved by save_training_checkpoint.
template <typename T>
AdamState<T> restore_adam_state(const LoadedCheckpoint<T>& ckpt) {
  const auto it = ckpt.metadata.find("train.step");
  if (it == ckpt.metadata.end()) throw CheckpointHeaderError("checkpoint has no training state");
  return AdamState<T>::from_arrays(ckpt.model.params(), ckpt.extra, std::stoull(it->second));
}

/// Pretraining loop. Continues from `state` (fresh or restored) until
/// max_steps or io.step_limit updates have been made.
template <typename T>
std::vector<StepMetrics> train_loop(GlmModel<T>& model, AdamState<T>& state, std::span<const Document> docs,
                                    const Vocab& vocab, const TrainConfig& cfg, const CorruptionConfig& corruption,
                                    const TrainIo& io = {}) {
  cfg.validate();
  corruption.validate();
  if (docs.empty()) throw DegenerateInputError("train: corpus is empty");
  if (state.m.size() != model.params().size()) state = AdamState<T>::for_params(model.params());

  std::ofstream metrics;
  if (io.metrics_csv) {
    const bool fresh = state.step == 0 || !std::filesystem::exists(*io.metrics_csv);
    metrics.open(*io.metrics_csv, fresh ? std::ios::trunc : std::ios::app);
    if (!metrics) throw IoError("cannot write metrics to " + io.metrics_csv->string());
    if (fresh) metrics << kMetricsHeader << '\n';
  }

  std::vector<StepMetrics> history;
  const std::size_t stop =
      io.step_limit == 0 ? cfg.max_steps : std::min(cfg.max_steps, state.step + io.step_limit);
  while (state.step < stop) {
    const auto t0 = std::chrono::steady_clock::now();
    const std::size_t step = state.step;
    StepMetrics m;
    try {
      const auto batch = make_pretrain_batch(docs, vocab, corruption, cfg, step);
      Rng dropout_rng(derive_seed(cfg.seed ^ 0xd50f5eedULL, step));
      model.params().zero_grad();
      Tape<T> tape;
      const Tensor<T> logits = model.forward(tape, batch, true, dropout_rng);
      const Tensor<T> loss = pretrain_loss(tape, logits, batch, cfg.label_smoothing);
      tape.backward(loss);
      m.grad_norm = clip_gradients(model.params(), cfg.grad_clip);
      m.lr = lr_schedule(step + 1, cfg);
      adam_step(state, model.params(), m.lr, cfg);
      m.loss = static_cast<double>(loss.item());
      std::size_t tokens = 0;
      for (const auto& ex : batch) tokens += ex.size();
      const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
      m.tokens_per_sec = cfg.deterministic || secs <= 0.0 ? 0.0 : static_cast<double>(tokens) / secs;
    } catch (const NumericError& e) {
      throw TrainingNumericError(step + 1, e.what());
    }
    m.step = state.step;
    if (metrics.is_open()) {
      metrics << format_metrics_row(m) << '\n';
      metrics.flush();
    }
    if (io.on_step) io.on_step(m);
    history.push_back(m);
    if (io.checkpoint && cfg.checkpoint_every != 0 && state.step % cfg.checkpoint_every == 0) {
      save_training_checkpoint(*io.checkpoint, model, state, cfg, io.checkpoint_metadata);
    }
  }
  if (io.checkpoint) save_training_checkpoint(*io.checkpoint, model, state, cfg, io.checkpoint_metadata);
  return history;
}

// ---------------------------------------------------------------------------
// Finetuning

struct LabeledInput {
  std::string text;
  std::size_t label = 0;
};

/// Cloze objective: per-label candidate log-scores, softmax over
/// labels, cross-entropy against the gold label. Differentiable; no update.
template <typename T>
Tensor<T> cloze_loss(Tape<T>& tape, const GlmModel<T>& model, const ClozePattern& pattern,
                     std::span<const LabeledInput> batch, const Vocab& vocab, bool train, Rng& rng) {
  pattern.validate();
  if (batch.empty()) throw DegenerateInputError("cloze: empty batch");
  const std::size_t n_labels = pattern.labels.size();
  std::vector<BlankContext> contexts;
  contexts.reserve(batch.size());
  for (const auto& item : batch) {
    if (item.label >= n_labels) throw ContractError("cloze: label index out of range");
    contexts.push_back(build_generation_context(pattern.render(item.text, vocab), false));
  }
  std::vector<CandidateQuery> queries;
  for (const auto& ctx : contexts) {
    for (const auto& verbalizer : pattern.verbalizers) queries.push_back({&ctx.example, ctx.blanks[0], verbalizer});
  }
  const auto scores = candidate_log_probs(tape, model, std::span<const CandidateQuery>(queries), true, train, rng);
  const Tensor<T> table = reshape(tape, stack_scalars(tape, scores), Shape{batch.size(), n_labels});
  std::vector<std::size_t> gold;
  for (const auto& item : batch) gold.push_back(item.label);
  return cross_entropy_with_logits(tape, table, gold);
}

/// Backward, clip, Adam at the scheduled rate; returns the loss.
template <typename T>
double apply_update(Tape<T>& tape, const Tensor<T>& loss, GlmModel<T>& model, AdamState<T>& state,
                    const TrainConfig& cfg) {
  tape.backward(loss);
  clip_gradients(model.params(), cfg.grad_clip);
  adam_step(state, model.params(), lr_schedule(state.step + 1, cfg), cfg);
  return static_cast<double>(loss.item());
}

template <typename T>
double finetune_cloze_step(GlmModel<T>& model, AdamState<T>& state, const ClozePattern& pattern,
                           std::span<const LabeledInput> batch, const Vocab& vocab, const TrainConfig& cfg) {
  Rng dropout_rng(derive_seed(cfg.seed ^ 0xc102eULL, state.step));
  model.params().zero_grad();
  Tape<T> tape;
  const Tensor<T> loss = cloze_loss(tape, model, pattern, batch, vocab, true, dropout_rng);
  return apply_update(tape, loss, model, state, cfg);
}

struct Seq2SeqPair {
  std::vector<TokenId> source;
  std::vector<TokenId> target;
};

/// Source as Part A with a trailing blank, target + [END] as Part B.
inline GlmExample seq2seq_example(const Seq2SeqPair& pair) {
  if (pair.target.empty()) throw DegenerateInputError("seq2seq: empty target");
  BlankContext ctx = build_generation_context(pair.source, true);
  append_part_b_span(ctx.example, ctx.blanks.back(), pair.target);
  return ctx.example;
}

/// Label-smoothed token loss: (1 - eps) * NLL + eps * mean_v(-log p_v).
template <typename T>
Tensor<T> seq2seq_loss(Tape<T>& tape, const GlmModel<T>& model, std::span<const Seq2SeqPair> pairs,
                       double label_smoothing, bool train, Rng& rng) {
  if (pairs.empty()) throw DegenerateInputError("seq2seq: empty batch");
  std::vector<GlmExample> batch;
  for (const auto& p : pairs) batch.push_back(seq2seq_example(p));
  const Tensor<T> logits = model.forward(tape, batch, train, rng);
  return pretrain_loss(tape, logits, batch, label_smoothing);
}

template <typename T>
double finetune_seq2seq_step(GlmModel<T>& model, AdamState<T>& state, std::span<const Seq2SeqPair> pairs,
                             const TrainConfig& cfg) {
  Rng dropout_rng(derive_seed(cfg.seed ^ 0x5e92eULL, state.step));
  model.params().zero_grad();
  Tape<T> tape;
  const Tensor<T> loss = seq2seq_loss(tape, model, pairs, cfg.label_smoothing, true, dropout_rng);
  return apply_update(tape, loss, model, state, cfg);
}

}  // namespace blankfill
