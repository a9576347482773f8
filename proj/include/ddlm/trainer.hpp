#pragma once

#include "ddlm/diffusion.hpp"
#include "ddlm/serialize.hpp"
#include "ddlm/tasks.hpp"

#include <chrono>
#include <numeric>
#include <string>
#include <vector>

namespace ddlm {

enum class PhaseKind { Autoregressive, Diffusion };
enum class Recipe { Hybrid, PureDiffusion };

inline const char* to_string(PhaseKind p) {
  return p == PhaseKind::Autoregressive ? "autoregressive" : "diffusion";
}

struct TrainConfig {
  PhaseKind phase = PhaseKind::Autoregressive;
  double learning_rate = 1e-3;
  int batch_size = 16;
  int epochs = 1;
  double warmup_ratio = 0.03;
  double max_grad_norm = 1.0;
  uint64_t seed = 1;
  double t_floor = 0.01;  // lower bound when sampling the diffusion time
  // AdamW
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  double weight_decay = 0.0;

  void validate() const {
    require(learning_rate >= 0.0, "TrainConfig: learning rate must be >= 0");
    require(batch_size >= 1 && epochs >= 1, "TrainConfig: batch size and epochs must be >= 1");
    require(warmup_ratio >= 0.0 && warmup_ratio < 1.0, "TrainConfig: warmup ratio in [0, 1)");
    require(max_grad_norm > 0.0, "TrainConfig: max grad norm must be positive");
    require(t_floor > 0.0 && t_floor < 1.0, "TrainConfig: t_floor in (0, 1)");
  }
};

/// Aborts a phase when the loss goes non-finite; carries the offending step
/// and batch for diagnosis.
struct TrainAbort : std::runtime_error {
  int step;
  std::vector<int> batch_ids;
  TrainAbort(int step_, std::vector<int> ids, const std::string& what_)
      : std::runtime_error(what_), step(step_), batch_ids(std::move(ids)) {}
};

struct TrainReport {
  std::string phase;
  std::vector<float> loss_trace;        // batch-mean loss per step
  std::vector<float> grad_norm_trace;   // post-clip global norm per step
  int steps = 0;
  double wall_seconds = 0.0;
  std::string checkpoint_path;
};

/// Linear warmup from 0 to the peak over the warmup span, then linear decay
/// hitting 0 at the final step.
inline double lr_at(double peak, int step, int total_steps, double warmup_ratio) {
  require(total_steps >= 1 && step >= 0 && step < total_steps, "lr_at: step out of range");
  const int warm = int(warmup_ratio * total_steps);
  if (step < warm) return peak * double(step + 1) / double(warm);
  if (total_steps - 1 == warm) return 0.0;
  return peak * double(total_steps - 1 - step) / double(total_steps - 1 - warm);
}

namespace detail {

template <typename S>
std::vector<Matrix<S>*> tensor_list(ModelParams<S>& p) {
  std::vector<Matrix<S>*> out;
  p.for_each_tensor([&](const std::string&, Matrix<S>& m) { out.push_back(&m); });
  return out;
}

}  // namespace detail

template <typename S>
class AdamW {
 public:
  explicit AdamW(const ModelConfig& cfg)
      : m_(ModelParams<S>::zeros(cfg)), v_(ModelParams<S>::zeros(cfg)) {}

  void update(ModelParams<S>& params, ModelParams<S>& grads, double lr, const TrainConfig& hp) {
    ++t_;
    const S b1 = S(hp.beta1), b2 = S(hp.beta2);
    const S bc1 = S(1) - S(std::pow(hp.beta1, t_));
    const S bc2 = S(1) - S(std::pow(hp.beta2, t_));
    auto ps = detail::tensor_list(params);
    auto gs = detail::tensor_list(grads);
    auto ms = detail::tensor_list(m_);
    auto vs = detail::tensor_list(v_);
    for (size_t i = 0; i < ps.size(); ++i) {
      auto& p = *ps[i];
      auto& g = *gs[i];
      auto& m = *ms[i];
      auto& v = *vs[i];
      m = b1 * m + (S(1) - b1) * g;
      v = (b2 * v.array() + (S(1) - b2) * g.array().square()).matrix();
      auto m_hat = m.array() / bc1;
      auto v_hat = v.array() / bc2;
      p.array() -= S(lr) * (m_hat / (v_hat.sqrt() + S(hp.adam_eps)) +
                            S(hp.weight_decay) * p.array());
    }
  }

  int step_count() const { return t_; }

 private:
  ModelParams<S> m_, v_;
  int t_ = 0;
};

/// Scales all gradients so the global norm is at most max_norm. Returns the
/// post-clip norm.
template <typename S>
double clip_gradients(ModelParams<S>& grads, double max_norm) {
  double sq = 0.0;
  grads.for_each_tensor(
      [&](const std::string&, const Matrix<S>& g) { sq += double(g.squaredNorm()); });
  const double norm = std::sqrt(sq);
  if (norm > max_norm && norm > 0.0) {
    const S scale = S(max_norm / norm);
    grads.for_each_tensor([&](const std::string&, Matrix<S>& g) { g *= scale; });
    return max_norm;
  }
  return norm;
}

/// One training phase over the corpus. The phase decides both the attention
/// mode and the loss: autoregressive trains on the raw EOS-terminated form
/// with causal attention, diffusion trains on freshly padded and corrupted
/// samples with full attention. Deterministic for a fixed config.
template <typename S>
TrainReport train_phase(ModelParams<S>& params, const Corpus& corpus, const TrainConfig& cfg) {
  cfg.validate();
  require(!corpus.samples.empty(), "train_phase: empty corpus");
  const auto t_begin = std::chrono::steady_clock::now();

  std::vector<Sequence> raw;
  raw.reserve(corpus.samples.size());
  for (const CorpusRecord& rec : corpus.samples) {
    raw.push_back(build_raw_sequence(rec, params.config.special));
    raw.back().validate(params.config.vocab_size);
  }

  const int n = int(raw.size());
  const int steps_per_epoch = (n + cfg.batch_size - 1) / cfg.batch_size;
  const int total_steps = cfg.epochs * steps_per_epoch;

  TrainReport report;
  report.phase = to_string(cfg.phase);
  report.steps = total_steps;

  Rng rng(cfg.seed);
  AdamW<S> opt(params.config);
  ModelParams<S> grads = ModelParams<S>::zeros(params.config);
  MaskSchedule schedule;

  std::vector<int> order(raw.size());
  std::iota(order.begin(), order.end(), 0);

  int step = 0;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    Rng erng = rng.child(uint64_t(epoch));
    erng.shuffle(order);
    for (int b = 0; b < steps_per_epoch; ++b, ++step) {
      std::vector<int> batch;
      for (int i = b * cfg.batch_size; i < std::min(n, (b + 1) * cfg.batch_size); ++i)
        batch.push_back(order[size_t(i)]);

      grads.set_zero();
      const S scale = S(1) / S(batch.size());
      double loss_sum = 0.0;
      try {
        for (size_t bi = 0; bi < batch.size(); ++bi) {
          const Sequence& x0 = raw[size_t(batch[bi])];
          if (cfg.phase == PhaseKind::Autoregressive) {
            loss_sum += double(backward_ar(params, x0, grads, scale));
          } else {
            Rng srng = rng.child(0x0d1f * uint64_t(step) + 7919 + uint64_t(bi));
            Sequence padded = prepare_diffusion_sample(x0, params.config.special, srng);
            const double t = srng.uniform(cfg.t_floor, 1.0);
            CorruptedSample sample =
                corrupt(padded, schedule, t, params.config.special.mask, srng);
            loss_sum += double(backward_diffusion(params, padded, sample, grads, scale));
          }
        }
      } catch (const std::exception& e) {
        throw TrainAbort(step, batch,
                         "train_phase: aborted at step " + std::to_string(step) + ": " +
                             e.what());
      }
      const double loss = loss_sum / double(batch.size());
      if (!std::isfinite(loss)) {
        throw TrainAbort(step, batch,
                         "train_phase: non-finite loss at step " + std::to_string(step));
      }
      report.loss_trace.push_back(float(loss));
      report.grad_norm_trace.push_back(float(clip_gradients(grads, cfg.max_grad_norm)));
      opt.update(params, grads, lr_at(cfg.learning_rate, step, total_steps, cfg.warmup_ratio),
                 cfg);
    }
  }
  require(params.all_finite(), "train_phase: parameters went non-finite");
  report.wall_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t_begin).count();
  return report;
}

/// Full recipe: Hybrid runs the autoregressive phase then the diffusion
/// phase; PureDiffusion runs diffusion only. Optimizer state is fresh in
/// each phase. Checkpoints are written after every phase when out_dir is
/// set (requires float params).
inline std::vector<TrainReport> run_pipeline(ModelParams<float>& params, const Corpus& corpus,
                                             Recipe recipe, const TrainConfig& ar_cfg,
                                             const TrainConfig& diff_cfg,
                                             const std::string& out_dir = "") {
  require(ar_cfg.phase == PhaseKind::Autoregressive && diff_cfg.phase == PhaseKind::Diffusion,
          "run_pipeline: phase configs are swapped");
  std::vector<TrainReport> reports;
  auto checkpoint = [&](TrainReport& rep, const std::string& tag) {
    if (out_dir.empty()) return;
    rep.checkpoint_path = out_dir + "/" + tag + ".ddlm";
    save_checkpoint(rep.checkpoint_path, params, &corpus.vocab);
  };
  if (recipe == Recipe::Hybrid) {
    if (ar_cfg.epochs > 0) {
      reports.push_back(train_phase(params, corpus, ar_cfg));
      checkpoint(reports.back(), "phase-ar");
    }
    if (diff_cfg.epochs > 0) {
      reports.push_back(train_phase(params, corpus, diff_cfg));
      checkpoint(reports.back(), "phase-diffusion");
    }
  } else {
    reports.push_back(train_phase(params, corpus, diff_cfg));
    checkpoint(reports.back(), "phase-diffusion");
  }
  return reports;
}

}  // namespace ddlm
