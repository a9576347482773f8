#pragma once

#include "ddlm/decoder.hpp"
#include "ddlm/prefill.hpp"
#include "ddlm/serialize.hpp"
#include "ddlm/tasks.hpp"
#include "ddlm/trainer.hpp"

#include <algorithm>
#include <string>
#include <vector>

namespace ddlm {

struct EvalOptions {
  DecodeConfig decode;
  int fixed_response_length = 0;  // 0: per-sample minimal window, answer length + 1
  bool use_prefill = false;
  int limit = 0;  // 0: evaluate every sample
};

struct SampleOutcome {
  int index = 0;
  bool exact = false;
  bool complete = false;
  int iterations = 0;
  int remaining = 0;
  int prompt_len = 0;
  int response_length = 0;
  double ms = 0.0;
  int64_t score_entries = 0;
};

struct EvalResult {
  int n = 0;
  double exact_match = 0.0;
  double mean_iterations = 0.0;
  double mean_iteration_ratio = 0.0;  // iterations / remaining tokens
  double tps = 0.0;                   // committed tokens per second of decode loop
  double seconds = 0.0;
  int64_t score_entries = 0;
  std::vector<SampleOutcome> outcomes;
};

/// Exact-match evaluation under diffusion decoding. Each sample gets its own
/// seed derived from the configured one, so runs are reproducible but not
/// correlated across samples.
template <typename S>
EvalResult evaluate(const ModelParams<S>& params, const Corpus& corpus,
                    const EvalOptions& opt) {
  EvalResult out;
  double iter_sum = 0.0, ratio_sum = 0.0;
  int64_t committed = 0;
  const int n_total = int(corpus.samples.size());
  const int n = opt.limit > 0 ? std::min(opt.limit, n_total) : n_total;
  for (int i = 0; i < n; ++i) {
    const CorpusRecord& rec = corpus.samples[size_t(i)];
    const std::vector<int> ref =
        reference_answer(rec.kind, corpus.vocab, rec.turns.at(0).prompt);
    const std::vector<int> prompt = decode_prompt(rec, params.config.special);

    DecodeConfig cfg = opt.decode;
    cfg.response_length =
        opt.fixed_response_length > 0 ? opt.fixed_response_length : int(ref.size()) + 1;
    cfg.max_steps = 0;
    cfg.seed = hash_combine(opt.decode.seed, uint64_t(i));
    require(int(prompt.size()) + cfg.response_length <= params.config.max_seq_len,
            "evaluate: sample does not fit max_seq_len");

    DecodeResult res;
    if (opt.use_prefill) {
      std::vector<int> with_window(prompt);
      with_window.insert(with_window.end(), size_t(cfg.response_length),
                         params.config.special.mask);
      auto [cache, first_logits] = build_cache(params, std::span<const int>(with_window),
                                               int(prompt.size()), AttentionMode::Full,
                                               nullptr);
      res = decode(params, std::span<const int>(prompt), cfg, {}, cache);
    } else {
      res = decode(params, std::span<const int>(prompt), cfg);
    }

    SampleOutcome o;
    o.index = i;
    o.exact = res.complete && res.answer_tokens == ref;
    o.complete = res.complete;
    o.iterations = res.history.actual_iterations;
    o.remaining = res.history.remaining_tokens;
    o.prompt_len = int(prompt.size());
    o.response_length = cfg.response_length;
    o.ms = res.stats.total_ms;
    o.score_entries = res.stats.forward.score_entries;
    out.outcomes.push_back(o);

    out.exact_match += o.exact ? 1.0 : 0.0;
    iter_sum += o.iterations;
    ratio_sum += o.remaining > 0 ? double(o.iterations) / o.remaining : 0.0;
    committed += o.remaining;
    out.seconds += o.ms / 1000.0;
    out.score_entries += o.score_entries;
  }
  out.n = n;
  if (n > 0) {
    out.exact_match /= n;
    out.mean_iterations = iter_sum / n;
    out.mean_iteration_ratio = ratio_sum / n;
  }
  out.tps = out.seconds > 0.0 ? double(committed) / out.seconds : 0.0;
  return out;
}

// ---------------------------------------------------------------------------
// Sweeps
// ---------------------------------------------------------------------------

struct LengthBiasRow {
  int response_length = 0;
  double accuracy_hybrid = 0.0;
  double accuracy_pure = 0.0;
  int n = 0;
};

/// Accuracy as a function of the configured response length, for a
/// hybrid-trained and a pure-diffusion-trained model on the same samples.
/// Samples are restricted to answers that fit the shortest window.
template <typename S>
std::vector<LengthBiasRow> sweep_length_bias(const ModelParams<S>& hybrid,
                                             const ModelParams<S>& pure, const Corpus& corpus,
                                             const std::vector<int>& lengths,
                                             const EvalOptions& base) {
  require(!lengths.empty(), "sweep_length_bias: no lengths");
  const int min_len = *std::min_element(lengths.begin(), lengths.end());
  Corpus eligible;
  eligible.vocab = corpus.vocab;
  eligible.special = corpus.special;
  for (const CorpusRecord& rec : corpus.samples) {
    const auto ref = reference_answer(rec.kind, corpus.vocab, rec.turns.at(0).prompt);
    if (int(ref.size()) + 1 <= min_len) eligible.samples.push_back(rec);
  }
  require(!eligible.samples.empty(), "sweep_length_bias: no sample fits the shortest window");

  std::vector<LengthBiasRow> rows;
  for (int len : lengths) {
    EvalOptions opt = base;
    opt.fixed_response_length = len;
    LengthBiasRow row;
    row.response_length = len;
    EvalResult h = evaluate(hybrid, eligible, opt);
    EvalResult p = evaluate(pure, eligible, opt);
    row.accuracy_hybrid = h.exact_match;
    row.accuracy_pure = p.exact_match;
    row.n = h.n;
    rows.push_back(row);
  }
  return rows;
}

struct ThresholdRow {
  double gamma = 0.0;
  double accuracy = 0.0;
  double mean_iterations = 0.0;
  double mean_remaining = 0.0;
  double iteration_ratio = 0.0;
};

struct ThresholdSweep {
  double baseline_accuracy = 0.0;  // one token per step
  double baseline_iteration_ratio = 1.0;
  std::vector<ThresholdRow> rows;
};

/// Iterations and accuracy across a confidence-threshold grid, with the
/// one-token-per-step decoder as the quality baseline.
template <typename S>
ThresholdSweep sweep_confident_threshold(const ModelParams<S>& params, const Corpus& corpus,
                                         const std::vector<double>& gammas,
                                         const EvalOptions& base) {
  ThresholdSweep sweep;
  EvalOptions k1 = base;
  k1.decode.algorithm = DecodeAlgorithm::MaskGit;
  k1.decode.maskgit_k = 1;
  EvalResult baseline = evaluate(params, corpus, k1);
  sweep.baseline_accuracy = baseline.exact_match;
  sweep.baseline_iteration_ratio = baseline.mean_iteration_ratio;

  for (double gamma : gammas) {
    EvalOptions opt = base;
    opt.decode.algorithm = DecodeAlgorithm::Confident;
    opt.decode.gamma = gamma;
    EvalResult r = evaluate(params, corpus, opt);
    ThresholdRow row;
    row.gamma = gamma;
    row.accuracy = r.exact_match;
    row.mean_iterations = r.mean_iterations;
    row.mean_remaining = r.n > 0 && r.mean_iteration_ratio > 0.0
                             ? r.mean_iterations / r.mean_iteration_ratio
                             : 0.0;
    row.iteration_ratio = r.mean_iteration_ratio;
    sweep.rows.push_back(row);
  }
  return sweep;
}

struct PrefillReport {
  int n = 0;
  int response_length = 0;
  double mean_prompt_len = 0.0;
  double accuracy_without = 0.0;
  double accuracy_with = 0.0;
  double seconds_without = 0.0;
  double seconds_with = 0.0;  // includes the cache-building pass
  double tps_without = 0.0;
  double tps_with = 0.0;
  double speedup = 0.0;
  double analytic_score_ratio = 0.0;  // (P+A)^2 / (A*(P+A)) = (P+A)/A
  double measured_score_ratio = 0.0;
  bool per_step_counts_exact = true;  // every cached step cost A*(P+A) entries
};

/// Paired evaluation with and without prompt caching at a fixed response
/// length, reporting accuracy, wall-clock, and instrumented score-entry
/// counts against the analytic prediction.
template <typename S>
PrefillReport measure_prefill_effect(const ModelParams<S>& params, const Corpus& corpus,
                                     int response_length, const EvalOptions& base) {
  PrefillReport rep;
  rep.response_length = response_length;

  EvalOptions without = base;
  without.fixed_response_length = response_length;
  without.use_prefill = false;
  EvalResult plain = evaluate(params, corpus, without);

  EvalOptions with = base;
  with.fixed_response_length = response_length;
  with.use_prefill = true;
  const auto t0 = std::chrono::steady_clock::now();
  EvalResult cached = evaluate(params, corpus, with);
  (void)t0;

  rep.n = plain.n;
  rep.accuracy_without = plain.exact_match;
  rep.accuracy_with = cached.exact_match;
  rep.seconds_without = plain.seconds;
  rep.seconds_with = cached.seconds;
  rep.tps_without = plain.tps;
  rep.tps_with = cached.tps;
  rep.speedup = cached.seconds > 0.0 ? plain.seconds / cached.seconds : 0.0;

  double prompt_sum = 0.0, analytic = 0.0, measured = 0.0;
  for (int i = 0; i < plain.n; ++i) {
    const SampleOutcome& u = plain.outcomes[size_t(i)];
    const SampleOutcome& c = cached.outcomes[size_t(i)];
    const int64_t P = u.prompt_len, A = response_length;
    prompt_sum += double(P);
    // Uncached: (P+A)^2 per step. Cached: A*(P+A) per step.
    if (u.iterations > 0)
      require(u.score_entries == int64_t(u.iterations) * (P + A) * (P + A),
              "measure_prefill_effect: uncached count mismatch");
    if (c.iterations > 0 && c.score_entries != int64_t(c.iterations) * A * (P + A))
      rep.per_step_counts_exact = false;
    analytic += double(P + A) / double(A);
    if (u.iterations > 0 && c.iterations > 0) {
      const double per_step_u = double(u.score_entries) / u.iterations;
      const double per_step_c = double(c.score_entries) / c.iterations;
      measured += per_step_u / per_step_c;
    }
  }
  if (plain.n > 0) {
    rep.mean_prompt_len = prompt_sum / plain.n;
    rep.analytic_score_ratio = analytic / plain.n;
    rep.measured_score_ratio = measured / plain.n;
  }
  return rep;
}

// ---------------------------------------------------------------------------
// Probes and small utilities
// ---------------------------------------------------------------------------

/// Greedy autoregressive generation with causal attention, for sanity checks
/// of the first training phase. Stops at EOS or after max_new tokens.
template <typename S>
std::vector<int> greedy_ar_decode(const ModelParams<S>& params, std::vector<int> tokens,
                                  int max_new) {
  std::vector<int> generated;
  for (int k = 0; k < max_new; ++k) {
    if (int(tokens.size()) >= params.config.max_seq_len) break;
    Matrix<S> logits = forward(params, std::span<const int>(tokens), AttentionMode::Causal);
    int best = 0;
    for (int v = 1; v < params.config.vocab_size; ++v)
      if (logits(logits.rows() - 1, v) > logits(logits.rows() - 1, best)) best = v;
    if (best == params.config.special.eos) break;
    generated.push_back(best);
    tokens.push_back(best);
  }
  return generated;
}

struct EarlyAnswerProbe {
  int n = 0;
  std::vector<double> commit_ratios;  // answer-commit iteration / actual iterations
  double mean_ratio = 0.0;
};

/// Decodes arithmetic samples in an oversized window whose trailing slots
/// are pinned to PAD by structure priors, and records how early the final
/// answer token commits relative to the whole decode.
template <typename S>
EarlyAnswerProbe early_answer_probe(const ModelParams<S>& params, const Corpus& corpus,
                                    int window, int pad_priors, const EvalOptions& base) {
  EarlyAnswerProbe probe;
  for (int i = 0; i < int(corpus.samples.size()); ++i) {
    const CorpusRecord& rec = corpus.samples[size_t(i)];
    if (rec.kind != TaskKind::Arithmetic) continue;
    const auto ref = reference_answer(rec.kind, corpus.vocab, rec.turns.at(0).prompt);
    if (int(ref.size()) + pad_priors >= window) continue;

    DecodeConfig cfg = base.decode;
    cfg.response_length = window;
    cfg.seed = hash_combine(base.decode.seed, uint64_t(i));
    StructurePrior priors;
    for (int k = 1; k <= pad_priors; ++k)
      priors.entries.emplace_back(-k, params.config.special.pad);
    const std::vector<int> prompt = decode_prompt(rec, params.config.special);
    DecodeResult res = decode(params, std::span<const int>(prompt), cfg, priors);
    if (!res.complete || res.history.actual_iterations == 0) continue;

    int last_answer_iter = 0;
    for (size_t s = 0; s < ref.size(); ++s) {
      const auto& slot = res.history.slots[s];
      if (slot.kind == GenerationHistory::SlotKind::Committed)
        last_answer_iter = std::max(last_answer_iter, slot.iteration);
    }
    if (last_answer_iter == 0) continue;
    probe.commit_ratios.push_back(double(last_answer_iter) / res.history.actual_iterations);
    ++probe.n;
  }
  for (double r : probe.commit_ratios) probe.mean_ratio += r;
  if (probe.n > 0) probe.mean_ratio /= probe.n;
  return probe;
}

inline void write_jsonl(const std::string& path, const std::vector<Json>& rows) {
  std::ofstream out(path, std::ios::trunc);
  require(out.good(), "write_jsonl: cannot open " + path);
  for (const Json& j : rows) out << j.dump() << "\n";
  require(out.good(), "write_jsonl: write failed");
}

}  // namespace ddlm
