#include <catch2/catch_amalgamated.hpp>

#include "ddlm/diffusion.hpp"
#include "ddlm/model.hpp"

#include <cmath>
#include <functional>

using namespace ddlm;

namespace {

ModelConfig tiny_config() {
  ModelConfig cfg;
  cfg.vocab_size = 12;
  cfg.n_layers = 2;
  cfg.n_heads = 2;
  cfg.d_model = 8;
  cfg.d_ff = 16;
  cfg.max_seq_len = 12;
  return cfg;
}

// tokens: [BOS p p | a a a a pad], one assistant-style turn layout
Sequence tiny_sequence() {
  Sequence s;
  s.tokens = {2, 4, 5, 6, 7, 8, 9, 1};
  s.segments = {Segment::Prompt, Segment::Prompt, Segment::Prompt, Segment::Answer,
                Segment::Answer, Segment::Answer, Segment::Answer, Segment::Pad};
  s.turns = {{0, 8, true}};
  return s;
}

// Central finite differences over every element of every parameter tensor,
// compared against the analytic gradient. Runs in double; the oracle needs
// the headroom.
void check_against_fd(const ModelParams<double>& params, const ModelParams<double>& analytic,
                      const std::function<double(const ModelParams<double>&)>& loss_fn,
                      double tol) {
  const double h = 1e-5;
  ModelParams<double> work = params;
  double worst = 0.0;
  work.for_each_tensor([&](const std::string& name, Matrix<double>& tensor) {
    const Matrix<double>* grad = nullptr;
    analytic.for_each_tensor([&](const std::string& n2, const Matrix<double>& g) {
      if (n2 == name) grad = &g;
    });
    REQUIRE(grad != nullptr);
    for (Eigen::Index r = 0; r < tensor.rows(); ++r) {
      for (Eigen::Index c = 0; c < tensor.cols(); ++c) {
        const double orig = tensor(r, c);
        tensor(r, c) = orig + h;
        const double lp = loss_fn(work);
        tensor(r, c) = orig - h;
        const double lm = loss_fn(work);
        tensor(r, c) = orig;
        const double fd = (lp - lm) / (2.0 * h);
        const double an = (*grad)(r, c);
        const double rel = std::abs(an - fd) / std::max({std::abs(an), std::abs(fd), 1e-8});
        worst = std::max(worst, rel);
      }
    }
  });
  INFO("worst relative error " << worst);
  REQUIRE(worst < tol);
}

}  // namespace

TEST_CASE("forward shape contract and determinism") {
  ModelConfig cfg = tiny_config();
  auto params = ModelParams<float>::init(cfg, 11);
  std::vector<int> one = {4};
  Matrix<float> logits = forward(params, std::span<const int>(one), AttentionMode::Full);
  REQUIRE(logits.rows() == 1);
  REQUIRE(logits.cols() == cfg.vocab_size);
  REQUIRE(logits.allFinite());

  Sequence s = tiny_sequence();
  Matrix<float> a = forward(params, std::span<const int>(s.tokens), AttentionMode::Causal);
  Matrix<float> b = forward(params, std::span<const int>(s.tokens), AttentionMode::Causal);
  REQUIRE(a == b);
}

TEST_CASE("forward validates inputs") {
  ModelConfig cfg = tiny_config();
  auto params = ModelParams<float>::init(cfg, 3);
  std::vector<int> too_long(size_t(cfg.max_seq_len) + 1, 4);
  REQUIRE_THROWS(forward(params, std::span<const int>(too_long), AttentionMode::Full));
  std::vector<int> bad_id = {cfg.vocab_size};
  REQUIRE_THROWS(forward(params, std::span<const int>(bad_id), AttentionMode::Full));
}

TEST_CASE("causal forward is bitwise invariant to suffix edits") {
  ModelConfig cfg = tiny_config();
  auto params = ModelParams<float>::init(cfg, 5);
  Sequence s = tiny_sequence();
  Matrix<float> base = forward(params, std::span<const int>(s.tokens), AttentionMode::Causal);
  for (int j = 1; j < s.size(); ++j) {
    std::vector<int> edited = s.tokens;
    edited[size_t(j)] = (edited[size_t(j)] + 3) % cfg.vocab_size;
    Matrix<float> out = forward(params, std::span<const int>(edited), AttentionMode::Causal);
    for (int i = 0; i < j; ++i) {
      REQUIRE(out.row(i) == base.row(i));  // exact, not approximate
    }
  }

  // Full attention must not have this property: the first row should move
  // when a later token changes.
  std::vector<int> edited = s.tokens;
  edited[5] = (edited[5] + 1) % cfg.vocab_size;
  Matrix<float> f0 = forward(params, std::span<const int>(s.tokens), AttentionMode::Full);
  Matrix<float> f1 = forward(params, std::span<const int>(edited), AttentionMode::Full);
  REQUIRE((f0.row(0) - f1.row(0)).cwiseAbs().maxCoeff() > 0.0f);
}

TEST_CASE("attention probability rows sum to 1") {
  ModelConfig cfg = tiny_config();
  auto params = ModelParams<float>::init(cfg, 7);
  Sequence s = tiny_sequence();
  for (AttentionMode mode : {AttentionMode::Causal, AttentionMode::Full}) {
    AttentionCapture<float> cap;
    forward_ex(params, std::span<const int>(s.tokens), mode,
               ForwardHooks<float>{.capture = &cap});
    REQUIRE(cap.probs.size() == size_t(cfg.n_layers));
    for (const auto& layer : cap.probs) {
      REQUIRE(layer.size() == size_t(cfg.n_heads));
      for (const auto& p : layer) {
        for (Eigen::Index r = 0; r < p.rows(); ++r) {
          REQUIRE(std::abs(p.row(r).sum() - 1.0f) < 1e-6f);
        }
      }
    }
  }
}

TEST_CASE("analytic gradient matches finite differences: next-token loss") {
  ModelConfig cfg = tiny_config();
  auto params = ModelParams<double>::init(cfg, 42);
  Sequence x0 = tiny_sequence();

  ModelParams<double> grads = ModelParams<double>::zeros(cfg);
  backward_ar(params, x0, grads);
  auto loss_fn = [&](const ModelParams<double>& p) {
    return ar_loss(forward(p, std::span<const int>(x0.tokens), AttentionMode::Causal), x0);
  };
  check_against_fd(params, grads, loss_fn, 1e-4);
}

TEST_CASE("analytic gradient matches finite differences: masked-denoise loss") {
  ModelConfig cfg = tiny_config();
  auto params = ModelParams<double>::init(cfg, 43);
  Sequence x0 = tiny_sequence();

  CorruptedSample sample;
  sample.t = 0.37;
  sample.tokens = x0.tokens;
  sample.mask.assign(x0.tokens.size(), 0);
  for (int n : {4, 6, 7}) {
    sample.tokens[size_t(n)] = cfg.special.mask;
    sample.mask[size_t(n)] = 1;
  }

  ModelParams<double> grads = ModelParams<double>::zeros(cfg);
  backward_diffusion(params, x0, sample, grads);
  auto loss_fn = [&](const ModelParams<double>& p) {
    return diffusion_loss(forward(p, std::span<const int>(sample.tokens), AttentionMode::Full),
                          sample, x0);
  };
  check_against_fd(params, grads, loss_fn, 1e-4);
}

TEST_CASE("no masked positions yields zero loss and zero gradients") {
  ModelConfig cfg = tiny_config();
  auto params = ModelParams<float>::init(cfg, 9);
  Sequence x0 = tiny_sequence();
  CorruptedSample sample;
  sample.t = 0.5;
  sample.tokens = x0.tokens;
  sample.mask.assign(x0.tokens.size(), 0);

  ModelParams<float> grads = ModelParams<float>::zeros(cfg);
  float loss = backward_diffusion(params, x0, sample, grads);
  REQUIRE(loss == 0.0f);
  grads.for_each_tensor([&](const std::string&, const Matrix<float>& g) {
    REQUIRE(g.cwiseAbs().maxCoeff() == 0.0f);
  });
}

TEST_CASE("single supervised position drives lm_head gradient through one hidden state") {
  ModelConfig cfg = tiny_config();
  auto params = ModelParams<double>::init(cfg, 10);
  Sequence x0 = tiny_sequence();
  CorruptedSample sample;
  sample.t = 0.5;
  sample.tokens = x0.tokens;
  sample.mask.assign(x0.tokens.size(), 0);
  sample.tokens[5] = cfg.special.mask;
  sample.mask[5] = 1;

  Activations<double> acts;
  Matrix<double> logits = forward_ex(params, std::span<const int>(sample.tokens),
                                     AttentionMode::Full, ForwardHooks<double>{.acts = &acts});
  Matrix<double> d = diffusion_loss_grad(logits, sample, x0);
  ModelParams<double> grads = ModelParams<double>::zeros(cfg);
  backprop(params, std::span<const int>(sample.tokens), AttentionMode::Full, acts, d, grads);

  // d(lm_head) must equal the outer product of that position's hidden state
  // with its logit gradient row.
  Matrix<double> expected = acts.final_norm.row(5).transpose() * d.row(5);
  REQUIRE((grads.lm_head - expected).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("params fingerprint tracks content") {
  ModelConfig cfg = tiny_config();
  auto a = ModelParams<float>::init(cfg, 1);
  auto b = ModelParams<float>::init(cfg, 1);
  auto c = ModelParams<float>::init(cfg, 2);
  REQUIRE(a.fingerprint() == b.fingerprint());
  REQUIRE(a.fingerprint() != c.fingerprint());
}
