// Copyright (c) 2026, The blankfill Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <utility>
#include <vector>

#include "blankfill/rng.hpp"
#include "blankfill/tensor.hpp"

namespace blankfill {

struct GradCheckOptions {
  double epsilon = 1e-6;
  /// Check at most this many scalar entries, chosen uniformly at random over
  /// all parameters. Zero checks every entry.
  std::size_t max_entries = 0;
  std::uint64_t seed = 0;
  /// Relative error is |analytic - numeric| / max(|analytic|, |numeric|, floor),
  /// so gradients that are numerically zero compare absolutely. Central
  /// differences of an O(1) loss carry noise near 1e-10 at epsilon 1e-6.
  double floor = 1e-6;
};

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::size_t entries_checked = 0;
  std::size_t worst_param = 0;
  std::size_t worst_index = 0;
};

/// Compares reverse-mode gradients of `fn` against central differences.
///
/// `fn` builds a scalar loss on the given tape from the current values of
/// `params`. It must be pure: the same parameter values must give the same loss.
template <typename T>
GradCheckResult grad_check(const std::function<Tensor<T>(Tape<T>&)>& fn, std::vector<Tensor<T>> params,
                           const GradCheckOptions& opts = {}) {
  if (opts.epsilon <= 0.0) throw ContractError("grad_check: epsilon must be positive");
  for (auto& p : params) {
    p.set_requires_grad(true);
    p.zero_grad();
  }
  {
    Tape<T> tape;
    const Tensor<T> loss = fn(tape);
    tape.backward(loss);
  }
  std::vector<std::vector<T>> analytic;
  for (const auto& p : params) {
    if (p.has_grad()) {
      analytic.emplace_back(p.grad().begin(), p.grad().end());
    } else {
      analytic.emplace_back(p.numel(), T(0));
    }
  }

  std::vector<std::pair<std::size_t, std::size_t>> entries;
  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    for (std::size_t i = 0; i < params[pi].numel(); ++i) entries.emplace_back(pi, i);
  }
  if (opts.max_entries != 0 && opts.max_entries < entries.size()) {
    Rng rng(opts.seed);
    for (std::size_t i = 0; i < opts.max_entries; ++i) {
      const auto j = i + rng.uniform_int(entries.size() - i);
      std::swap(entries[i], entries[j]);
    }
    entries.resize(opts.max_entries);
  }

  auto evaluate = [&fn] {
    Tape<T> tape(false);
    return static_cast<double>(fn(tape).item());
  };

  GradCheckResult result;
  for (const auto& [pi, i] : entries) {
    auto values = params[pi].mutable_data();
    const T saved = values[i];
    values[i] = saved + T(opts.epsilon);
    const double up = evaluate();
    values[i] = saved - T(opts.epsilon);
    const double down = evaluate();
    values[i] = saved;
    const double numeric = (up - down) / (2.0 * opts.epsilon);
    const double a = static_cast<double>(analytic[pi][i]);
    const double denom = std::max({std::abs(a), std::abs(numeric), opts.floor});
    const double rel = std::abs(a - numeric) / denom;
    ++result.entries_checked;
    if (rel > result.max_rel_error) {
      result.max_rel_error = rel;
      result.worst_param = pi;
      result.worst_index = i;
    }
  }
  return result;
}

}  // namespace blankfill
