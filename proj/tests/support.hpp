// Shared fixtures for the test binaries.

#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "blankfill/corruption.hpp"
#include "blankfill/layout.hpp"
#include "blankfill/model.hpp"
#include "blankfill/rng.hpp"
#include "blankfill/tensor.hpp"
#include "blankfill/vocab.hpp"

namespace testing {

using namespace blankfill;

template <typename T>
Tensor<T> random_tensor(Shape shape, std::uint64_t seed, double scale = 1.0, bool requires_grad = true) {
  Rng rng(seed);
  std::vector<T> v(shape_numel(shape));
  for (auto& x : v) x = static_cast<T>(scale * (2.0 * rng.uniform() - 1.0));
  return Tensor<T>(std::move(shape), std::move(v), requires_grad);
}

inline ModelConfig tiny_config(std::size_t vocab, std::size_t layers = 2, std::size_t hidden = 16) {
  ModelConfig c;
  c.n_layers = layers;
  c.hidden_size = hidden;
  c.n_heads = 2;
  c.ffn_size = 4 * hidden;
  c.vocab_size = vocab;
  c.max_pos1 = 64;
  c.max_pos2 = 34;
  c.dropout = 0.0;
  c.attention_dropout = 0.0;
  return c;
}

/// Every parameter zero except the final norm bias and the token embedding,
/// so the logits at every position equal bias . embed^T. With `favored` set,
/// that token gets the largest logit; without it all logits are exactly 0.
template <typename T>
GlmModel<T> constant_model(const ModelConfig& cfg, std::optional<TokenId> favored = std::nullopt) {
  Parameters<T> params;
  for (const auto& [name, shape] : parameter_layout(cfg)) params.add(name, Tensor<T>::zeros(shape));
  if (favored) {
    auto emb = params.get("embed.token");
    auto bias = params.get("final_ln.bias");
    bias.mutable_data()[0] = T(1);
    for (std::size_t t = 0; t < cfg.vocab_size; ++t) emb.mutable_data()[t * cfg.hidden_size] = T(t == *favored ? 2 : 1);
  }
  return GlmModel<T>(cfg, std::move(params));
}

/// A random layout over non-reserved token ids below `vocab`: random tokens, spans
/// and order.
inline GlmExample random_example(std::size_t vocab, std::size_t len, Rng& rng) {
  std::vector<TokenId> tokens(len);
  for (auto& t : tokens) t = Vocab::kNumReserved + rng.uniform_int(vocab - Vocab::kNumReserved);
  CorruptionConfig cfg;
  const SpanSet spans = sample_short_spans(len, rng, cfg);
  const Permutation order = permute_spans(spans, rng, true);
  return build_example(tokens, spans, order, Vocab(), {});
}

/// `n_docs` lines of min_len..max_len words "w0".."w{n_words-1}", each
/// ending with a period.
inline std::string synthetic_corpus(std::size_t n_docs, std::size_t n_words, std::size_t min_len, std::size_t max_len,
                                    std::uint64_t seed) {
  Rng rng(seed);
  std::string out;
  for (std::size_t d = 0; d < n_docs; ++d) {
    const std::size_t len = static_cast<std::size_t>(rng.uniform_range(static_cast<std::int64_t>(min_len),
                                                                        static_cast<std::int64_t>(max_len)));
    for (std::size_t i = 0; i < len; ++i) {
      out += "w" + std::to_string(rng.uniform_int(n_words));
      out += ' ';
    }
    out += ".\n";
  }
  return out;
}

struct TempDir {
  std::filesystem::path path;

  explicit TempDir(const std::string& tag) {
    path = std::filesystem::temp_directory_path() /
           ("blankfill-" + tag + "-" + std::to_string(std::random_device{}()));
    std::filesystem::create_directories(path);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path, ec);
  }
  std::filesystem::path operator/(const std::string& name) const { return path / name; }
};

}  // namespace testing
