#include <catch2/catch_amalgamated.hpp>

#include "ddlm/decoder.hpp"
#include "ddlm/prefill.hpp"

#include <vector>

using namespace ddlm;

namespace {

ModelConfig tiny_config() {
  ModelConfig cfg;
  cfg.vocab_size = 12;
  cfg.n_layers = 2;
  cfg.n_heads = 2;
  cfg.d_model = 8;
  cfg.d_ff = 16;
  cfg.max_seq_len = 40;
  return cfg;
}

std::vector<int> random_tokens(Rng& rng, int n, int vocab) {
  std::vector<int> out(static_cast<size_t>(n));
  for (int& t : out) t = int(rng.uniform_int(4, vocab - 1));
  return out;
}

}  // namespace

TEST_CASE("build_cache retains the pass's own prompt K/V bitwise") {
  ModelConfig cfg = tiny_config();
  auto params = ModelParams<float>::init(cfg, 31);
  Rng rng(1);
  std::vector<int> tokens = random_tokens(rng, 12, cfg.vocab_size);
  const int P = 8;

  Activations<float> acts;
  KVCache<float> cache;
  cache.prompt_length = P;
  forward_ex(params, std::span<const int>(tokens), AttentionMode::Full,
             ForwardHooks<float>{.acts = &acts, .build = &cache});

  REQUIRE(cache.prompt_length == P);
  REQUIRE(cache.prompt_tokens == std::vector<int>(tokens.begin(), tokens.begin() + P));
  for (int li = 0; li < cfg.n_layers; ++li) {
    REQUIRE(cache.k[size_t(li)] == acts.layers[size_t(li)].k.topRows(P));
    REQUIRE(cache.v[size_t(li)] == acts.layers[size_t(li)].v.topRows(P));
  }
}

TEST_CASE("under full attention the cached prompt K/V depend on the window") {
  // This is why cache reuse is approximate once the window changes.
  ModelConfig cfg = tiny_config();
  auto params = ModelParams<float>::init(cfg, 32);
  Rng rng(2);
  std::vector<int> tokens = random_tokens(rng, 12, cfg.vocab_size);
  const int P = 8;

  auto [cache_a, logits_a] =
      build_cache(params, std::span<const int>(tokens), P, AttentionMode::Full);
  std::vector<int> perturbed = tokens;
  perturbed[10] = (perturbed[10] + 1) % cfg.vocab_size;
  auto [cache_b, logits_b] =
      build_cache(params, std::span<const int>(perturbed), P, AttentionMode::Full);

  float max_diff = 0.0f;
  for (int li = 0; li < cfg.n_layers; ++li)
    max_diff = std::max(max_diff,
                        (cache_a.k[size_t(li)] - cache_b.k[size_t(li)]).cwiseAbs().maxCoeff());
  REQUIRE(max_diff > 0.0f);

  // Under causal attention the prompt K/V cannot see the window at all.
  auto [cc_a, cl_a] = build_cache(params, std::span<const int>(tokens), P, AttentionMode::Causal);
  auto [cc_b, cl_b] =
      build_cache(params, std::span<const int>(perturbed), P, AttentionMode::Causal);
  for (int li = 0; li < cfg.n_layers; ++li) {
    REQUIRE(cc_a.k[size_t(li)] == cc_b.k[size_t(li)]);
    REQUIRE(cc_a.v[size_t(li)] == cc_b.v[size_t(li)]);
  }
}

TEST_CASE("causal cached step equals the uncached suffix rows") {
  ModelConfig cfg = tiny_config();
  auto params = ModelParams<float>::init(cfg, 33);
  Rng rng(3);
  for (int trial = 0; trial < 100; ++trial) {
    const int P = int(rng.uniform_int(1, 20));
    const int A = int(rng.uniform_int(1, 8));
    std::vector<int> tokens = random_tokens(rng, P + A, cfg.vocab_size);

    auto [cache, build_logits] =
        build_cache(params, std::span<const int>(tokens), P, AttentionMode::Causal);
    // New window content; causality makes the cache exact anyway.
    std::vector<int> window = random_tokens(rng, A, cfg.vocab_size);
    Matrix<float> cached = step_with_cache(params, std::span<const int>(window), cache);

    std::vector<int> full(tokens.begin(), tokens.begin() + P);
    full.insert(full.end(), window.begin(), window.end());
    Matrix<float> plain =
        forward(params, std::span<const int>(full), AttentionMode::Causal);
    REQUIRE((cached - plain.bottomRows(A)).cwiseAbs().maxCoeff() < 1e-5f);
  }
}

TEST_CASE("full-attention cached step: exact at build, divergent after edits") {
  ModelConfig cfg = tiny_config();
  auto params = ModelParams<float>::init(cfg, 34);
  Rng rng(4);
  std::vector<int> tokens = random_tokens(rng, 14, cfg.vocab_size);
  const int P = 10, A = 4;

  auto [cache, build_logits] =
      build_cache(params, std::span<const int>(tokens), P, AttentionMode::Full);

  std::vector<int> window(tokens.begin() + P, tokens.end());
  Matrix<float> same = step_with_cache(params, std::span<const int>(window), cache);
  REQUIRE((same - build_logits).cwiseAbs().maxCoeff() < 1e-5f);

  std::vector<int> edited = window;
  edited[1] = (edited[1] + 3) % cfg.vocab_size;
  Matrix<float> cached = step_with_cache(params, std::span<const int>(edited), cache);

  std::vector<int> full(tokens.begin(), tokens.begin() + P);
  full.insert(full.end(), edited.begin(), edited.end());
  Matrix<float> exact = forward(params, std::span<const int>(full), AttentionMode::Full);
  const float divergence = (cached - exact.bottomRows(A)).cwiseAbs().maxCoeff();
  INFO("max |delta logit| = " << divergence);
  REQUIRE(divergence > 0.0f);
}

TEST_CASE("score-entry accounting: A*(P+A) per cached step, squares otherwise") {
  ModelConfig cfg = tiny_config();
  auto params = ModelParams<float>::init(cfg, 35);
  Rng rng(5);
  const int P = 12, A = 5;
  std::vector<int> tokens = random_tokens(rng, P + A, cfg.vocab_size);

  ForwardStats build_stats;
  auto [cache, logits] =
      build_cache(params, std::span<const int>(tokens), P, AttentionMode::Full, &build_stats);
  REQUIRE(build_stats.score_entries == int64_t(P + A) * (P + A));
  REQUIRE(build_stats.forward_passes == 1);

  std::vector<int> window(tokens.begin() + P, tokens.end());
  ForwardStats step_stats;
  step_with_cache(params, std::span<const int>(window), cache, &step_stats);
  REQUIRE(step_stats.score_entries == int64_t(A) * (P + A));
  REQUIRE(step_stats.forward_passes == 1);
}

TEST_CASE("degenerate empty prompt gives no caching benefit") {
  ModelConfig cfg = tiny_config();
  auto params = ModelParams<float>::init(cfg, 36);
  Rng rng(6);
  std::vector<int> tokens = random_tokens(rng, 6, cfg.vocab_size);

  ForwardStats stats;
  auto [cache, logits] =
      build_cache(params, std::span<const int>(tokens), 0, AttentionMode::Full, &stats);
  std::vector<int> window = tokens;
  ForwardStats step_stats;
  Matrix<float> cached = step_with_cache(params, std::span<const int>(window), cache, &step_stats);
  // Score work per step equals the full square: ratio exactly 1.
  REQUIRE(step_stats.score_entries == stats.score_entries);
  REQUIRE((cached - logits).cwiseAbs().maxCoeff() < 1e-6f);
}

TEST_CASE("cache validation rejects mismatches") {
  ModelConfig cfg = tiny_config();
  auto params = ModelParams<float>::init(cfg, 37);
  auto other = ModelParams<float>::init(cfg, 38);
  Rng rng(7);
  std::vector<int> tokens = random_tokens(rng, 10, cfg.vocab_size);
  auto [cache, logits] =
      build_cache(params, std::span<const int>(tokens), 6, AttentionMode::Full);

  std::vector<int> window(tokens.begin() + 6, tokens.end());
  REQUIRE_THROWS(step_with_cache(other, std::span<const int>(window), cache));

  KVCache<float> tampered = cache;
  tampered.prompt_tokens[0] ^= 1;
  std::vector<int> full(tampered.prompt_tokens);
  full.insert(full.end(), window.begin(), window.end());
  REQUIRE_THROWS(forward_with_cache(params, std::span<const int>(tokens), tampered));

  // Mode mismatch through the spec-level forward entry point.
  REQUIRE_THROWS(
      forward(params, std::span<const int>(tokens), AttentionMode::Causal, &cache));
}

TEST_CASE("decode with a prompt cache matches the analytic step cost") {
  ModelConfig cfg = tiny_config();
  auto params = ModelParams<float>::init(cfg, 39);
  Rng rng(8);
  std::vector<int> prompt = random_tokens(rng, 16, cfg.vocab_size);

  DecodeConfig dcfg;
  dcfg.response_length = 4;
  dcfg.algorithm = DecodeAlgorithm::MaskGit;
  dcfg.maskgit_k = 1;

  std::vector<int> with_window(prompt);
  with_window.insert(with_window.end(), size_t(dcfg.response_length), cfg.special.mask);
  auto [cache, logits] = build_cache(params, std::span<const int>(with_window),
                                     int(prompt.size()), AttentionMode::Full);
  DecodeResult res = decode(params, std::span<const int>(prompt), dcfg, {}, cache);
  REQUIRE(res.complete);
  REQUIRE(res.history.actual_iterations == 4);
  const int64_t per_step = int64_t(dcfg.response_length) * (16 + dcfg.response_length);
  REQUIRE(res.stats.forward.score_entries == 4 * per_step);
}
