#pragma once

#include "ddlm/model.hpp"

#include <utility>
#include <vector>

namespace ddlm {

/// First-iteration pass over prompt + initial answer window. The returned
/// cache retains the prompt K/V of exactly this pass; the logits are the
/// same answer-slot rows the uncached pass would produce, because it is the
/// uncached pass.
template <typename S>
std::pair<KVCache<S>, Matrix<S>> build_cache(const ModelParams<S>& p,
                                             std::span<const int> prompt_and_window,
                                             int prompt_length, AttentionMode mode,
                                             ForwardStats* stats = nullptr) {
  require(prompt_length >= 0 && prompt_length < int(prompt_and_window.size()),
          "build_cache: prompt must be a strict prefix");
  KVCache<S> cache;
  cache.prompt_length = prompt_length;
  Matrix<S> logits = forward_ex(p, prompt_and_window, mode,
                                ForwardHooks<S>{.build = &cache, .stats = stats});
  const int answer_len = int(prompt_and_window.size()) - prompt_length;
  return {std::move(cache), logits.bottomRows(answer_len)};
}

/// One decode iteration against a frozen prompt cache. Queries, keys and
/// values are computed for answer slots only; each answer query attends to
/// cached prompt K/V plus fresh answer K/V, so the score work per step is
/// L_answer * (L_prompt + L_answer) entries rather than the full square.
template <typename S>
Matrix<S> step_with_cache(const ModelParams<S>& p, std::span<const int> answer_window,
                          const KVCache<S>& cache, ForwardStats* stats = nullptr) {
  require(!answer_window.empty(), "step_with_cache: empty answer window");
  std::vector<int> full(cache.prompt_tokens);
  full.insert(full.end(), answer_window.begin(), answer_window.end());
  return forward_with_cache(p, std::span<const int>(full), cache, stats);
}

}  // namespace ddlm
