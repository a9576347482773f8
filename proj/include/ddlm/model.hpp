#pragma once

#include "ddlm/common.hpp"
#include "ddlm/rng.hpp"

#include <optional>
#include <string>
#include <vector>

namespace ddlm {

enum class AttentionMode { Causal, Full };

inline const char* to_string(AttentionMode m) {
  return m == AttentionMode::Causal ? "causal" : "full";
}

struct SpecialTokens {
  int mask = 0;
  int pad = 1;
  int bos = 2;
  int eos = 3;
};

struct ModelConfig {
  int vocab_size = 0;
  int n_layers = 0;
  int n_heads = 0;
  int d_model = 0;
  int d_ff = 0;
  int max_seq_len = 0;
  SpecialTokens special;

  int head_dim() const { return d_model / n_heads; }

  void validate() const {
    require(vocab_size > 0 && n_layers > 0 && n_heads > 0 && d_model > 0 && d_ff > 0 &&
                max_seq_len > 0,
            "ModelConfig: dimensions must be positive");
    require(d_model % n_heads == 0, "ModelConfig: d_model must be divisible by n_heads");
    const int ids[4] = {special.mask, special.pad, special.bos, special.eos};
    for (int i = 0; i < 4; ++i) {
      require(ids[i] >= 0 && ids[i] < vocab_size, "ModelConfig: special token id out of range");
      for (int j = i + 1; j < 4; ++j)
        require(ids[i] != ids[j], "ModelConfig: special token ids must be distinct");
    }
  }
};

template <typename S>
struct LayerParams {
  Matrix<S> wq, wk, wv, wo;  // d_model x d_model
  Matrix<S> w1;              // d_model x d_ff
  Matrix<S> w2;              // d_ff x d_model
};

/// All trainable tensors. Shapes are fully determined by the config; the
/// tensor directory order fixed by for_each_tensor is the serialization and
/// optimizer-state order.
template <typename S>
struct ModelParams {
  ModelConfig config;
  Matrix<S> tok_emb;  // vocab x d_model
  Matrix<S> pos_emb;  // max_seq_len x d_model
  std::vector<LayerParams<S>> layers;
  Matrix<S> lm_head;  // d_model x vocab

  static ModelParams<S> zeros(const ModelConfig& cfg) {
    cfg.validate();
    ModelParams<S> p;
    p.config = cfg;
    p.tok_emb = Matrix<S>::Zero(cfg.vocab_size, cfg.d_model);
    p.pos_emb = Matrix<S>::Zero(cfg.max_seq_len, cfg.d_model);
    p.layers.resize(size_t(cfg.n_layers));
    for (auto& l : p.layers) {
      l.wq = Matrix<S>::Zero(cfg.d_model, cfg.d_model);
      l.wk = Matrix<S>::Zero(cfg.d_model, cfg.d_model);
      l.wv = Matrix<S>::Zero(cfg.d_model, cfg.d_model);
      l.wo = Matrix<S>::Zero(cfg.d_model, cfg.d_model);
      l.w1 = Matrix<S>::Zero(cfg.d_model, cfg.d_ff);
      l.w2 = Matrix<S>::Zero(cfg.d_ff, cfg.d_model);
    }
    p.lm_head = Matrix<S>::Zero(cfg.d_model, cfg.vocab_size);
    return p;
  }

  /// Scaled-uniform init, each weight on [-1/sqrt(fan_in), 1/sqrt(fan_in)).
  static ModelParams<S> init(const ModelConfig& cfg, uint64_t seed) {
    ModelParams<S> p = zeros(cfg);
    Rng rng(seed);
    auto fill = [&](Matrix<S>& m, int fan_in) {
      const double a = 1.0 / std::sqrt(double(fan_in));
      for (Eigen::Index r = 0; r < m.rows(); ++r)
        for (Eigen::Index c = 0; c < m.cols(); ++c) m(r, c) = S(rng.uniform(-a, a));
    };
    fill(p.tok_emb, cfg.d_model);
    fill(p.pos_emb, cfg.d_model);
    for (auto& l : p.layers) {
      fill(l.wq, cfg.d_model);
      fill(l.wk, cfg.d_model);
      fill(l.wv, cfg.d_model);
      fill(l.wo, cfg.d_model);
      fill(l.w1, cfg.d_model);
      fill(l.w2, cfg.d_ff);
    }
    fill(p.lm_head, cfg.d_model);
    return p;
  }

  template <typename Fn>
  void for_each_tensor(Fn&& fn) {
    fn("tok_emb", tok_emb);
    fn("pos_emb", pos_emb);
    for (size_t i = 0; i < layers.size(); ++i) {
      const std::string b = "layers." + std::to_string(i) + ".";
      fn(b + "wq", layers[i].wq);
      fn(b + "wk", layers[i].wk);
      fn(b + "wv", layers[i].wv);
      fn(b + "wo", layers[i].wo);
      fn(b + "w1", layers[i].w1);
      fn(b + "w2", layers[i].w2);
    }
    fn("lm_head", lm_head);
  }

  template <typename Fn>
  void for_each_tensor(Fn&& fn) const {
    const_cast<ModelParams<S>*>(this)->for_each_tensor(
        [&](const std::string& name, Matrix<S>& m) { fn(name, const_cast<const Matrix<S>&>(m)); });
  }

  bool all_finite() const {
    bool ok = true;
    for_each_tensor([&](const std::string&, const Matrix<S>& m) { ok = ok && m.allFinite(); });
    return ok;
  }

  void set_zero() {
    for_each_tensor([](const std::string&, Matrix<S>& m) { m.setZero(); });
  }

  /// Hash of config dims plus raw tensor bytes in directory order.
  uint64_t fingerprint() const {
    uint64_t h = fnv1a64(&config.vocab_size, sizeof(int));
    h = fnv1a64(&config.n_layers, sizeof(int), h);
    h = fnv1a64(&config.d_model, sizeof(int), h);
    for_each_tensor([&](const std::string& name, const Matrix<S>& m) {
      h = fnv1a64(name.data(), name.size(), h);
      h = fnv1a64(m.data(), sizeof(S) * size_t(m.size()), h);
    });
    return h;
  }

  template <typename T>
  ModelParams<T> cast() const {
    ModelParams<T> out = ModelParams<T>::zeros(config);
    auto src = *this;
    out.for_each_tensor([&](const std::string& name, Matrix<T>& dst) {
      src.for_each_tensor([&](const std::string& n2, Matrix<S>& s) {
        if (n2 == name) dst = s.template cast<T>();
      });
    });
    return out;
  }
};

/// Prompt key/value blocks retained from the first decode pass. Immutable
/// after build; valid only for the params/prompt it was built from.
template <typename S>
struct KVCache {
  AttentionMode mode = AttentionMode::Full;
  int prompt_length = 0;
  uint64_t params_fingerprint = 0;
  std::vector<int> prompt_tokens;
  std::vector<Matrix<S>> k;  // per layer, prompt_length x d_model
  std::vector<Matrix<S>> v;
};

/// Attention score entries are counted as query-key position pairs once per
/// forward pass (the pair set is identical across layers and heads).
struct ForwardStats {
  int64_t score_entries = 0;
  int64_t forward_passes = 0;
};

/// Per-layer attention probability matrices (heads stacked), for inspection.
template <typename S>
struct AttentionCapture {
  std::vector<std::vector<Matrix<S>>> probs;  // [layer][head], rows sum to 1
};

template <typename S>
struct LayerActs {
  Matrix<S> attn_in, n1;
  ColVec<S> inv_rms1;
  Matrix<S> q, k, v;
  std::vector<Matrix<S>> probs;  // per head
  Matrix<S> ctx;
  Matrix<S> mlp_in, n2;
  ColVec<S> inv_rms2;
  Matrix<S> h1, h1_act;
};

template <typename S>
struct Activations {
  std::vector<LayerActs<S>> layers;
  Matrix<S> final_in, final_norm;
  ColVec<S> inv_rms_f;
};

namespace detail {

template <typename S>
Matrix<S> rmsnorm_rows(const Matrix<S>& x, ColVec<S>* inv_rms_out) {
  const S eps = S(1e-5);
  Matrix<S> y(x.rows(), x.cols());
  ColVec<S> inv(x.rows());
  for (Eigen::Index r = 0; r < x.rows(); ++r) {
    const S ms = x.row(r).squaredNorm() / S(x.cols());
    const S ir = S(1) / std::sqrt(ms + eps);
    y.row(r) = x.row(r) * ir;
    inv(r) = ir;
  }
  if (inv_rms_out) *inv_rms_out = std::move(inv);
  return y;
}

// d/dx of rmsnorm given upstream dy and the forward row inputs.
template <typename S>
Matrix<S> rmsnorm_backward(const Matrix<S>& dy, const Matrix<S>& x, const ColVec<S>& inv_rms) {
  Matrix<S> dx(x.rows(), x.cols());
  const S n = S(x.cols());
  for (Eigen::Index r = 0; r < x.rows(); ++r) {
    const S ir = inv_rms(r);
    const S dot = dy.row(r).dot(x.row(r));
    dx.row(r) = ir * (dy.row(r) - x.row(r) * (ir * ir * dot / n));
  }
  return dx;
}

template <typename S>
S gelu(S x) {
  const S c = S(0.7978845608028654);  // sqrt(2/pi)
  const S a = S(0.044715);
  return S(0.5) * x * (S(1) + std::tanh(c * (x + a * x * x * x)));
}

template <typename S>
S gelu_grad(S x) {
  const S c = S(0.7978845608028654);
  const S a = S(0.044715);
  const S u = c * (x + a * x * x * x);
  const S t = std::tanh(u);
  const S du = c * (S(1) + S(3) * a * x * x);
  return S(0.5) * (S(1) + t) + S(0.5) * x * (S(1) - t * t) * du;
}

// Softmax over each row of a score matrix whose masked entries hold -inf.
template <typename S>
void softmax_rows_inplace(Matrix<S>& m) {
  for (Eigen::Index r = 0; r < m.rows(); ++r) m.row(r) = softmax_row(m.row(r));
}

inline void check_tokens(const ModelConfig& cfg, std::span<const int> tokens) {
  require(!tokens.empty(), "forward: empty token sequence");
  require(int(tokens.size()) <= cfg.max_seq_len, "forward: sequence exceeds max_seq_len");
  for (int t : tokens)
    require(t >= 0 && t < cfg.vocab_size, "forward: token id out of vocab range");
}

}  // namespace detail

/// Optional side outputs of a forward pass: recorded activations (for
/// backprop), prompt K/V retention into `build` (prompt_length must be
/// preset), score-entry counting, attention-probability capture.
template <typename S>
struct ForwardHooks {
  Activations<S>* acts = nullptr;
  KVCache<S>* build = nullptr;
  ForwardStats* stats = nullptr;
  AttentionCapture<S>* capture = nullptr;
};

template <typename S>
Matrix<S> forward_ex(const ModelParams<S>& p, std::span<const int> tokens, AttentionMode mode,
                     const ForwardHooks<S>& hooks) {
  Activations<S>* acts = hooks.acts;
  KVCache<S>* build = hooks.build;
  ForwardStats* stats = hooks.stats;
  AttentionCapture<S>* capture = hooks.capture;
  const ModelConfig& cfg = p.config;
  detail::check_tokens(cfg, tokens);
  const int T = int(tokens.size());
  const int d = cfg.d_model;
  const int hd = cfg.head_dim();
  const S scale = S(1) / std::sqrt(S(hd));

  if (stats) {
    stats->score_entries += int64_t(T) * T;
    stats->forward_passes += 1;
  }
  if (acts) acts->layers.assign(size_t(cfg.n_layers), {});
  if (capture) capture->probs.assign(size_t(cfg.n_layers), {});
  if (build) {
    require(build->prompt_length >= 0 && build->prompt_length <= T,
            "build cache: prompt length out of range");
    build->mode = mode;
    build->params_fingerprint = p.fingerprint();
    build->prompt_tokens.assign(tokens.begin(), tokens.begin() + build->prompt_length);
    build->k.clear();
    build->v.clear();
  }

  Matrix<S> x(T, d);
  for (int i = 0; i < T; ++i) x.row(i) = p.tok_emb.row(tokens[size_t(i)]) + p.pos_emb.row(i);

  for (int li = 0; li < cfg.n_layers; ++li) {
    const LayerParams<S>& L = p.layers[size_t(li)];
    LayerActs<S>* la = acts ? &acts->layers[size_t(li)] : nullptr;

    if (la) la->attn_in = x;
    ColVec<S> ir1;
    Matrix<S> n1 = detail::rmsnorm_rows(x, &ir1);
    Matrix<S> q = n1 * L.wq;
    Matrix<S> k = n1 * L.wk;
    Matrix<S> v = n1 * L.wv;
    if (build) {
      build->k.push_back(k.topRows(build->prompt_length));
      build->v.push_back(v.topRows(build->prompt_length));
    }

    Matrix<S> ctx(T, d);
    for (int h = 0; h < cfg.n_heads; ++h) {
      auto qh = q.middleCols(h * hd, hd);
      auto kh = k.middleCols(h * hd, hd);
      auto vh = v.middleCols(h * hd, hd);
      Matrix<S> s = qh * kh.transpose() * scale;
      if (mode == AttentionMode::Causal) {
        for (int i = 0; i < T; ++i)
          for (int j = i + 1; j < T; ++j) s(i, j) = neg_inf<S>();
      }
      detail::softmax_rows_inplace(s);
      ctx.middleCols(h * hd, hd).noalias() = s * vh;
      if (la) la->probs.push_back(s);
      if (capture) capture->probs[size_t(li)].push_back(s);
    }
    Matrix<S> attn_out = ctx * L.wo;
    if (la) {
      la->n1 = std::move(n1);
      la->inv_rms1 = std::move(ir1);
      la->q = std::move(q);
      la->k = std::move(k);
      la->v = std::move(v);
      la->ctx = ctx;
    }
    x += attn_out;

    if (la) la->mlp_in = x;
    ColVec<S> ir2;
    Matrix<S> n2 = detail::rmsnorm_rows(x, &ir2);
    Matrix<S> h1 = n2 * L.w1;
    Matrix<S> h1_act = h1.unaryExpr([](S v_) { return detail::gelu(v_); });
    x += h1_act * L.w2;
    if (la) {
      la->n2 = std::move(n2);
      la->inv_rms2 = std::move(ir2);
      la->h1 = std::move(h1);
      la->h1_act = std::move(h1_act);
    }
  }

  if (acts) acts->final_in = x;
  ColVec<S> irf;
  Matrix<S> nf = detail::rmsnorm_rows(x, &irf);
  Matrix<S> logits = nf * p.lm_head;
  if (acts) {
    acts->final_norm = std::move(nf);
    acts->inv_rms_f = std::move(irf);
  }
  return logits;
}

/// Forward over the suffix of `full_tokens` not covered by the cache. Keys
/// and values for prompt positions come from the cache; only suffix rows are
/// computed. Returns logits for the suffix positions.
template <typename S>
Matrix<S> forward_with_cache(const ModelParams<S>& p, std::span<const int> full_tokens,
                             const KVCache<S>& cache, ForwardStats* stats = nullptr) {
  const ModelConfig& cfg = p.config;
  detail::check_tokens(cfg, full_tokens);
  const int T = int(full_tokens.size());
  const int P = cache.prompt_length;
  require(P < T, "forward_with_cache: cache must cover a strict prefix");
  require(int(cache.k.size()) == cfg.n_layers, "forward_with_cache: cache layer count mismatch");
  require(cache.params_fingerprint == p.fingerprint(),
          "forward_with_cache: cache built from different params");
  for (int i = 0; i < P; ++i)
    require(full_tokens[size_t(i)] == cache.prompt_tokens[size_t(i)],
            "forward_with_cache: prompt tokens differ from cached prompt");

  const int A = T - P;
  const int d = cfg.d_model;
  const int hd = cfg.head_dim();
  const S scale = S(1) / std::sqrt(S(hd));
  if (stats) {
    stats->score_entries += int64_t(A) * T;
    stats->forward_passes += 1;
  }

  Matrix<S> x(A, d);
  for (int r = 0; r < A; ++r)
    x.row(r) = p.tok_emb.row(full_tokens[size_t(P + r)]) + p.pos_emb.row(P + r);

  Matrix<S> kall(T, d), vall(T, d);
  for (int li = 0; li < cfg.n_layers; ++li) {
    const LayerParams<S>& L = p.layers[size_t(li)];
    Matrix<S> n1 = detail::rmsnorm_rows<S>(x, nullptr);
    Matrix<S> q = n1 * L.wq;
    kall.topRows(P) = cache.k[size_t(li)];
    vall.topRows(P) = cache.v[size_t(li)];
    kall.bottomRows(A).noalias() = n1 * L.wk;
    vall.bottomRows(A).noalias() = n1 * L.wv;

    Matrix<S> ctx(A, d);
    for (int h = 0; h < cfg.n_heads; ++h) {
      auto qh = q.middleCols(h * hd, hd);
      auto kh = kall.middleCols(h * hd, hd);
      auto vh = vall.middleCols(h * hd, hd);
      Matrix<S> s = qh * kh.transpose() * scale;  // A x T
      if (cache.mode == AttentionMode::Causal) {
        for (int r = 0; r < A; ++r)
          for (int j = P + r + 1; j < T; ++j) s(r, j) = neg_inf<S>();
      }
      detail::softmax_rows_inplace(s);
      ctx.middleCols(h * hd, hd).noalias() = s * vh;
    }
    x += ctx * L.wo;

    Matrix<S> n2 = detail::rmsnorm_rows<S>(x, nullptr);
    Matrix<S> h1 = n2 * L.w1;
    x += h1.unaryExpr([](S v_) { return detail::gelu(v_); }) * L.w2;
  }
  Matrix<S> nf = detail::rmsnorm_rows<S>(x, nullptr);
  return nf * p.lm_head;
}

template <typename S>
Matrix<S> forward(const ModelParams<S>& p, std::span<const int> tokens, AttentionMode mode) {
  return forward_ex(p, tokens, mode, ForwardHooks<S>{});
}

/// With a cache, returns one logit row per non-cached position; without,
/// one row per position.
template <typename S>
Matrix<S> forward(const ModelParams<S>& p, std::span<const int> tokens, AttentionMode mode,
                  const KVCache<S>* cache, ForwardStats* stats = nullptr) {
  if (!cache) return forward_ex(p, tokens, mode, ForwardHooks<S>{.stats = stats});
  require(cache->mode == mode, "forward: cache attention mode mismatch");
  return forward_with_cache(p, tokens, *cache, stats);
}

/// Reverse pass. Accumulates parameter gradients for the loss whose
/// d(loss)/d(logits) is `dlogits`, using activations from the matching
/// forward call.
template <typename S>
void backprop(const ModelParams<S>& p, std::span<const int> tokens, AttentionMode mode,
              const Activations<S>& acts, const Matrix<S>& dlogits, ModelParams<S>& grads) {
  const ModelConfig& cfg = p.config;
  const int T = int(tokens.size());
  const int d = cfg.d_model;
  const int hd = cfg.head_dim();
  const S scale = S(1) / std::sqrt(S(hd));
  (void)mode;  // masking is baked into the stored probabilities

  grads.lm_head.noalias() += acts.final_norm.transpose() * dlogits;
  Matrix<S> dnf = dlogits * p.lm_head.transpose();
  Matrix<S> dx = detail::rmsnorm_backward(dnf, acts.final_in, acts.inv_rms_f);

  for (int li = cfg.n_layers - 1; li >= 0; --li) {
    const LayerParams<S>& L = p.layers[size_t(li)];
    const LayerActs<S>& la = acts.layers[size_t(li)];
    LayerParams<S>& G = grads.layers[size_t(li)];

    // MLP block: x_out = mlp_in + gelu(n2 * w1) * w2
    Matrix<S> dg = dx * L.w2.transpose();
    G.w2.noalias() += la.h1_act.transpose() * dx;
    Matrix<S> dh1 =
        dg.binaryExpr(la.h1, [](S g, S x_) { return g * detail::gelu_grad(x_); });
    Matrix<S> dn2 = dh1 * L.w1.transpose();
    G.w1.noalias() += la.n2.transpose() * dh1;
    Matrix<S> dmlp_in = dx + detail::rmsnorm_backward(dn2, la.mlp_in, la.inv_rms2);

    // Attention block: mlp_in = attn_in + (ctx * wo)
    Matrix<S> dctx = dmlp_in * L.wo.transpose();
    G.wo.noalias() += la.ctx.transpose() * dmlp_in;

    Matrix<S> dq = Matrix<S>::Zero(T, d), dk = Matrix<S>::Zero(T, d), dv = Matrix<S>::Zero(T, d);
    for (int h = 0; h < cfg.n_heads; ++h) {
      const Matrix<S>& ph = la.probs[size_t(h)];
      auto dctxh = dctx.middleCols(h * hd, hd);
      auto kh = la.k.middleCols(h * hd, hd);
      auto qh = la.q.middleCols(h * hd, hd);
      auto vh = la.v.middleCols(h * hd, hd);

      Matrix<S> dp = dctxh * vh.transpose();
      dv.middleCols(h * hd, hd).noalias() = ph.transpose() * dctxh;
      // softmax backward per row; masked entries have p == 0 so ds == 0 there
      Matrix<S> ds(T, T);
      for (int r = 0; r < T; ++r) {
        const S inner = dp.row(r).dot(ph.row(r));
        ds.row(r) = ph.row(r).cwiseProduct((dp.row(r).array() - inner).matrix());
      }
      dq.middleCols(h * hd, hd).noalias() = ds * kh * scale;
      dk.middleCols(h * hd, hd).noalias() = ds.transpose() * qh * scale;
    }
    Matrix<S> dn1 = dq * L.wq.transpose() + dk * L.wk.transpose() + dv * L.wv.transpose();
    G.wq.noalias() += la.n1.transpose() * dq;
    G.wk.noalias() += la.n1.transpose() * dk;
    G.wv.noalias() += la.n1.transpose() * dv;
    dx = dmlp_in + detail::rmsnorm_backward(dn1, la.attn_in, la.inv_rms1);
  }

  for (int i = 0; i < T; ++i) {
    grads.tok_emb.row(tokens[size_t(i)]) += dx.row(i);
    grads.pos_emb.row(i) += dx.row(i);
  }
}

}  // namespace ddlm
