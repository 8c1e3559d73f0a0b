#pragma once

// Pretraining: random masking, EMA-teacher targets, alignment and
// reconstruction losses, the combined objective, and the AdamW training
// loop over synthetic or loaded corpora.

#include <chrono>
#include <functional>

#include "rae/config.hpp"
#include "rae/data.hpp"
#include "rae/model.hpp"
#include "rae/optim.hpp"

namespace rae {

struct MaskPlan {
  std::vector<std::size_t> visible_idx;
  std::vector<std::size_t> masked_idx;
};

// Uniform without-replacement masking. S_m = floor(ratio * S); both sides of
// the partition must stay non-empty.
inline MaskPlan sample_mask(std::size_t patch_count, double ratio, std::uint64_t seed) {
  if (!(ratio > 0.0 && ratio < 1.0)) throw ContractError("sample_mask: ratio must be in (0,1)");
  const std::size_t masked =
      static_cast<std::size_t>(std::floor(ratio * static_cast<double>(patch_count)));
  if (masked < 1 || masked >= patch_count)
    throw ContractError("sample_mask: ratio " + std::to_string(ratio) + " degenerate for S=" +
                        std::to_string(patch_count));
  std::vector<std::size_t> order(patch_count);
  for (std::size_t i = 0; i < patch_count; ++i) order[i] = i;
  Rng rng(seed);
  rng.shuffle(order);
  MaskPlan plan;
  plan.masked_idx.assign(order.begin(), order.begin() + masked);
  plan.visible_idx.assign(order.begin() + masked, order.end());
  std::sort(plan.masked_idx.begin(), plan.masked_idx.end());
  std::sort(plan.visible_idx.begin(), plan.visible_idx.end());
  return plan;
}

inline PatchSet build_patches(const PointCloud& cloud, const ModelConfig& cfg, std::uint64_t fps_seed) {
  const auto centers = farthest_point_sample(cloud, cfg.patch_count, fps_seed);
  return knn_group(cloud, centers, cfg.neighbors);
}

inline Tensor<double> gather_center_rows(const Tensor<double>& centers,
                                         const std::vector<std::size_t>& idx) {
  Tensor<double> out({idx.size(), 3});
  for (std::size_t i = 0; i < idx.size(); ++i)
    for (std::size_t d = 0; d < 3; ++d) out[i * 3 + d] = centers[idx[i] * 3 + d];
  return out;
}

inline PatchSet gather_patch_rows(const PatchSet& set, const std::vector<std::size_t>& idx) {
  const std::size_t k = set.neighbors();
  PatchSet out;
  out.centers = gather_center_rows(set.centers, idx);
  out.patches = Tensor<double>({idx.size(), k, 3});
  for (std::size_t i = 0; i < idx.size(); ++i)
    for (std::size_t j = 0; j < k * 3; ++j) out.patches[i * k * 3 + j] = set.patches[idx[i] * k * 3 + j];
  return out;
}

// Teacher path: EMA embed + encode over the FULL patch set, masked rows
// extracted. Runs on a no-grad session, so nothing is recorded on the tape
// and no gradient can reach teacher parameters.
template <class T>
Tensor<T> teacher_targets(Session<T>& teacher_sess, const ModelConfig& cfg, const PatchSet& patches,
                          const MaskPlan& plan) {
  TokenSet<T> tokens = embed_patches(teacher_sess, cfg, patches);
  TokenSet<T> encoded = encode(teacher_sess, cfg, tokens);
  const std::size_t d = cfg.dim;
  Tensor<T> out({plan.masked_idx.size(), d});
  const Tensor<T>& all = encoded.tokens.value();
  for (std::size_t i = 0; i < plan.masked_idx.size(); ++i)
    for (std::size_t j = 0; j < d; ++j) out[i * d + j] = all[plan.masked_idx[i] * d + j];
  return out;
}

// 1 - cosine per vector, in [0,2]; used by both losses.
template <class T>
Var<T> mean_cosine_loss_rows(const Var<T>& rows, const Var<T>& target_rows) {
  Var<T> np = l2_normalize_rows(rows);
  Var<T> nt = l2_normalize_rows(target_rows);
  Var<T> dots = sum_over_cols(mul(np, nt));
  return add_scalar(scale(reduce_mean(dots), T{-1}), T{1});
}

// Alignment between predicted masked tokens and (stop-gradient) teacher
// targets. The default is mean cosine loss per masked slot; MSE, InfoNCE and
// NT-Xent are selectable for the alignment-target comparison. InfoNCE treats
// slot i's teacher row as the positive among all teacher rows; NT-Xent is
// the symmetric variant over the combined 2*S_m set.
template <class T>
Var<T> alignment_loss(const Var<T>& predicted, const Var<T>& teacher_rows, AlignTarget target,
                      double infonce_tau, double ntxent_tau) {
  if (!predicted.value().same_shape(teacher_rows.value()))
    throw ShapeError("alignment_loss: shape mismatch");
  Var<T> t = stop_gradient(teacher_rows);
  switch (target) {
    case AlignTarget::cosine:
      return mean_cosine_loss_rows(predicted, t);
    case AlignTarget::mse:
      return mse_mean(predicted, t);
    case AlignTarget::infonce: {
      const std::size_t m = predicted.value().rows();
      Var<T> logits = scale(matmul(l2_normalize_rows(predicted), transpose2d(l2_normalize_rows(t))),
                            static_cast<T>(1.0 / infonce_tau));
      std::vector<std::size_t> labels(m);
      for (std::size_t i = 0; i < m; ++i) labels[i] = i;
      return cross_entropy(logits, labels);
    }
    case AlignTarget::ntxent: {
      const std::size_t m = predicted.value().rows();
      Var<T> z = concat_rows({l2_normalize_rows(predicted), l2_normalize_rows(t)});
      Var<T> sim = scale(matmul(z, transpose2d(z)), static_cast<T>(1.0 / ntxent_tau));
      Tensor<T> diag_mask({2 * m, 2 * m});
      for (std::size_t i = 0; i < 2 * m; ++i) diag_mask[i * (2 * m) + i] = T{-1e9};
      std::vector<std::size_t> labels(2 * m);
      for (std::size_t i = 0; i < 2 * m; ++i) labels[i] = (i + m) % (2 * m);
      return cross_entropy(add_constant(sim, diag_mask), labels);
    }
  }
  throw ContractError("alignment_loss: unknown target");
}

// Mean per-patch Chamfer between predicted local coordinates [S_m, k*3] and
// the ground-truth local patches.
template <class T>
Var<T> reconstruction_loss_coords(Session<T>& sess, const Var<T>& predictions,
                                  const Tensor<double>& gt_local) {
  const std::size_t s_m = gt_local.dim(0), k = gt_local.dim(1);
  if (predictions.value().rows() != s_m || predictions.value().cols() != k * 3)
    throw ContractError("reconstruction_loss: prediction shape mismatch");
  Var<T> acc = sess.tape().constant(Tensor<T>::scalar(T{}));
  for (std::size_t i = 0; i < s_m; ++i) {
    Var<T> pred_pts = reshape(slice_rows(predictions, i, 1), Shape{k, 3});
    Tensor<T> gt({k, 3});
    for (std::size_t j = 0; j < k * 3; ++j) gt[j] = static_cast<T>(gt_local[i * k * 3 + j]);
    acc = add(acc, chamfer_l2(pred_pts, sess.input(std::move(gt))));
  }
  return scale(acc, T{1} / static_cast<T>(s_m));
}

// Mean cosine loss between predicted features and fixed external targets.
template <class T>
Var<T> reconstruction_loss_features(Session<T>& sess, const Var<T>& predictions,
                                    const Tensor<T>& targets) {
  if (!predictions.value().same_shape(targets))
    throw ContractError("reconstruction_loss: target shape mismatch");
  return mean_cosine_loss_rows(predictions, sess.input(targets));
}

// ---------------------------------------------------------------------------
// one-cloud forward
// ---------------------------------------------------------------------------

template <class T>
struct CloudForward {
  MaskPlan plan;
  PatchSet patches;
  Var<T> loss_rec;
  Var<T> loss_align_raw;   // unweighted; zero constant when no regressor runs
  Tensor<T> predictions;   // reconstruction-head output values [S_m, ...]
};

// Full pretraining dataflow for one cloud under the configured pipeline
// variant. `external_targets`, when present, holds per-patch feature targets
// [S, feature_dim] for the external reconstruction mode.
template <class T>
CloudForward<T> pretrain_forward_cloud(Session<T>& sess, Session<T>& teacher_sess,
                                       const ModelConfig& cfg, const PointCloud& cloud,
                                       std::uint64_t fps_seed, std::uint64_t mask_seed,
                                       AlignTarget align_target, double infonce_tau, double ntxent_tau,
                                       const Tensor<T>* external_targets = nullptr) {
  CloudForward<T> out;
  out.patches = build_patches(cloud, cfg, fps_seed);
  out.plan = sample_mask(cfg.patch_count, cfg.mask_ratio, mask_seed);
  const std::size_t s_m = out.plan.masked_idx.size();

  const PatchSet visible = gather_patch_rows(out.patches, out.plan.visible_idx);
  const PatchSet masked = gather_patch_rows(out.patches, out.plan.masked_idx);

  TokenSet<T> decoded;
  out.loss_align_raw = sess.tape().constant(Tensor<T>::scalar(T{}));

  if (cfg.variant == PipelineVariant::both || cfg.variant == PipelineVariant::regressor_only) {
    TokenSet<T> visible_encoded = encode(sess, cfg, embed_patches(sess, cfg, visible));
    TokenSet<T> predicted = regress(sess, cfg, visible_encoded, masked.centers);
    const Tensor<T> targets = teacher_targets(teacher_sess, cfg, out.patches, out.plan);
    out.loss_align_raw = alignment_loss(predicted.tokens, sess.input(targets), align_target,
                                        infonce_tau, ntxent_tau);
    if (cfg.variant == PipelineVariant::both)
      decoded = decode(sess, cfg, predicted);
    else
      decoded = {predicted.tokens, predicted.centers, TokenRole::decoded_masked};
  } else if (cfg.variant == PipelineVariant::decoder_only) {
    // Masked-autoencoder baseline: the decoder self-attends over encoded
    // visible tokens plus positioned mask queries and the masked rows feed
    // the head. No latent prediction, no alignment.
    TokenSet<T> visible_encoded = encode(sess, cfg, embed_patches(sess, cfg, visible));
    Var<T> queries = repeat_rows(sess.param("mask_query"), s_m);
    Tensor<double> all_centers({cfg.patch_count, 3});
    const std::size_t s_v = out.plan.visible_idx.size();
    for (std::size_t i = 0; i < s_v * 3; ++i) all_centers[i] = visible.centers[i];
    for (std::size_t i = 0; i < s_m * 3; ++i) all_centers[s_v * 3 + i] = masked.centers[i];
    Var<T> x = add(concat_rows({visible_encoded.tokens, queries}), pos_embed<T>(sess, all_centers));
    for (std::size_t i = 0; i < cfg.dec_depth; ++i)
      x = encoder_block(sess, "dec.b" + std::to_string(i), x, cfg.heads);
    decoded = {slice_rows(x, s_v, s_m), masked.centers, TokenRole::decoded_masked};
  } else {  // PipelineVariant::neither
    // BERT-style: the encoder sees every slot, with masked slots carrying
    // the shared query token; masked outputs feed the head directly.
    TokenSet<T> emb = embed_patches(sess, cfg, visible);
    Var<T> queries = repeat_rows(sess.param("mask_query"), s_m);
    const std::size_t s_v = out.plan.visible_idx.size();
    Tensor<double> all_centers({cfg.patch_count, 3});
    for (std::size_t i = 0; i < s_v * 3; ++i) all_centers[i] = visible.centers[i];
    for (std::size_t i = 0; i < s_m * 3; ++i) all_centers[s_v * 3 + i] = masked.centers[i];
    TokenSet<T> full{concat_rows({emb.tokens, queries}), all_centers, TokenRole::embedded};
    TokenSet<T> enc = encode(sess, cfg, full);
    decoded = {slice_rows(enc.tokens, s_v, s_m), masked.centers, TokenRole::decoded_masked};
  }

  Var<T> predictions = reconstruct_head(sess, cfg, decoded);
  out.predictions = predictions.value();
  if (cfg.recon_target == ReconTarget::coordinates) {
    out.loss_rec = reconstruction_loss_coords(sess, predictions, masked.patches);
  } else {
    if (!external_targets) throw ContractError("pretrain: external feature targets missing");
    Tensor<T> target_rows({s_m, cfg.feature_dim});
    for (std::size_t i = 0; i < s_m; ++i)
      for (std::size_t j = 0; j < cfg.feature_dim; ++j)
        target_rows[i * cfg.feature_dim + j] =
            (*external_targets)[out.plan.masked_idx[i] * cfg.feature_dim + j];
    out.loss_rec = reconstruction_loss_features(sess, predictions, target_rows);
  }
  return out;
}

// ---------------------------------------------------------------------------
// training loop
// ---------------------------------------------------------------------------

struct LossReport {
  long step = 0;
  double l_rec = 0;
  double l_align = 0;  // weighted contribution, so l_total == l_rec + l_align
  double l_total = 0;
  double lr = 0;
  double grad_norm = 0;
  double seconds = 0;
};

template <class T>
std::vector<LossReport> pretrain_run(ModelState<T>& state, AdamW<T>& opt,
                                     const std::vector<PointCloud>& clouds, const RunConfig& rc,
                                     const std::vector<Tensor<T>>* external_targets = nullptr,
                                     const std::function<void(const LossReport&)>& on_step = nullptr) {
  if (clouds.empty()) throw ContractError("pretrain: empty corpus");
  const ModelConfig& cfg = state.cfg;
  const AlignTarget align = rc.align_target_enum();
  const std::size_t n = clouds.size();
  const long steps_per_epoch = static_cast<long>((n + rc.batch_size - 1) / rc.batch_size);
  LrSchedule schedule{rc.lr, 0.01 * rc.lr, rc.warmup_epochs * steps_per_epoch,
                      rc.epochs * steps_per_epoch};
  AugmentSpec aug;
  aug.kind = rc.augment_enum();

  std::vector<LossReport> log;
  long step = 0;
  for (long epoch = 0; epoch < rc.epochs; ++epoch) {
    std::vector<std::size_t> order(n);
    for (std::size_t i = 0; i < n; ++i) order[i] = i;
    Rng shuffle_rng(fold_seed(rc.seed, {0xE0u, static_cast<std::uint64_t>(epoch)}));
    shuffle_rng.shuffle(order);
    for (long b = 0; b < steps_per_epoch; ++b, ++step) {
      const auto t0 = std::chrono::steady_clock::now();
      const std::size_t begin = static_cast<std::size_t>(b) * rc.batch_size;
      const std::size_t end = std::min(n, begin + rc.batch_size);
      Tape<T> tape;
      Session<T> sess(tape, state.params, Session<T>::all());
      Session<T> teacher_sess(tape, state.teacher, Session<T>::none());
      Var<T> total = tape.constant(Tensor<T>::scalar(T{}));
      double sum_rec = 0, sum_align = 0;
      try {
        for (std::size_t bi = begin; bi < end; ++bi) {
          const std::size_t ci = order[bi];
          PointCloud cloud = clouds[ci];
          if (aug.kind != AugmentKind::none)
            cloud = augment(cloud, aug,
                            fold_seed(rc.seed, {0xA9u, static_cast<std::uint64_t>(epoch), ci}));
          auto fwd = pretrain_forward_cloud(
              sess, teacher_sess, cfg, cloud, fold_seed(rc.seed, {0xF5u, ci}),
              fold_seed(rc.seed, {0x3Au, static_cast<std::uint64_t>(step), ci}), align, rc.infonce_tau,
              rc.ntxent_tau, external_targets ? &(*external_targets)[ci] : nullptr);
          Var<T> weighted_align = scale(fwd.loss_align_raw, static_cast<T>(rc.align_weight));
          total = add(total, add(fwd.loss_rec, weighted_align));
          sum_rec += static_cast<double>(fwd.loss_rec.value().item());
          sum_align += static_cast<double>(weighted_align.value().item());
        }
        const std::size_t batch_n = end - begin;
        total = scale(total, T{1} / static_cast<T>(batch_n));
        tape.backward(total);
      } catch (const NumericsError& e) {
        throw NumericsError("pretrain aborted at step " + std::to_string(step) + ": " + e.what());
      }
      const auto grads = sess.gradients();
      double sq_norm = 0;
      for (const auto& [name, g] : grads) {
        (void)name;
        for (std::size_t i = 0; i < g.size(); ++i)
          sq_norm += static_cast<double>(g[i]) * static_cast<double>(g[i]);
      }
      const double lr_now = schedule.at(step);
      opt.step(state.params, grads, lr_now);
      ema_update(state.teacher, state.params, rc.ema_momentum);

      const std::size_t batch_n = end - begin;
      LossReport report;
      report.step = step;
      report.l_rec = sum_rec / static_cast<double>(batch_n);
      report.l_align = sum_align / static_cast<double>(batch_n);
      report.l_total = report.l_rec + report.l_align;
      report.lr = lr_now;
      report.grad_norm = std::sqrt(sq_norm);
      report.seconds =
          std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
      log.push_back(report);
      if (on_step) on_step(report);
    }
  }
  return log;
}

}  // namespace rae
