#pragma once

// Named finite-difference checks covering every differentiable op, every
// block type, every loss, and the four end-to-end pipeline variants. Used by
// the gradcheck command and the verification suites.

#include <string>
#include <vector>

#include "rae/finetune.hpp"
#include "rae/gradcheck.hpp"
#include "rae/pretrain.hpp"

namespace rae {

struct CheckRow {
  std::string name;
  double rel_err = 0;
  bool pass = false;
};

namespace detail {

// Finite-difference check against parameters living in a ParamStore, for
// forwards that pull weights through Sessions. `coords` lists the probed
// (name, flat index) pairs.
template <class T, class F>
double store_grad_check(ParamStore<T>& store, ParamStore<T>& teacher, const F& forward,
                        const std::vector<std::pair<std::string, std::size_t>>& coords,
                        double eps = 1e-5, double floor = 1e-4) {
  std::map<std::string, Tensor<T>> analytic;
  {
    Tape<T> tape;
    Session<T> sess(tape, store, Session<T>::all());
    Session<T> teacher_sess(tape, teacher, Session<T>::none());
    Var<T> loss = forward(sess, teacher_sess);
    tape.backward(loss);
    analytic = sess.gradients();
  }
  auto eval = [&]() {
    Tape<T> tape;
    Session<T> sess(tape, store, Session<T>::none());
    Session<T> teacher_sess(tape, teacher, Session<T>::none());
    return static_cast<double>(forward(sess, teacher_sess).value().item());
  };
  double worst = 0;
  for (const auto& [name, idx] : coords) {
    Tensor<T>& p = store.at(name);
    const T saved = p[idx];
    p[idx] = saved + static_cast<T>(eps);
    const double up = eval();
    p[idx] = saved - static_cast<T>(eps);
    const double down = eval();
    p[idx] = saved;
    const double numeric = (up - down) / (2.0 * eps);
    const double a = analytic.count(name) ? static_cast<double>(analytic.at(name)[idx]) : 0.0;
    const double denom = std::max({std::abs(a), std::abs(numeric), floor});
    worst = std::max(worst, std::abs(a - numeric) / denom);
  }
  return worst;
}

template <class T>
std::vector<std::pair<std::string, std::size_t>> sample_coords(const ParamStore<T>& store,
                                                               std::size_t count, std::uint64_t seed,
                                                               const std::string& prefix = "") {
  std::vector<std::string> names;
  for (const auto& n : store.names())
    if (!is_buffer_name(n) && (prefix.empty() || n.rfind(prefix, 0) == 0)) names.push_back(n);
  Rng rng(seed);
  std::vector<std::pair<std::string, std::size_t>> coords;
  for (std::size_t i = 0; i < count; ++i) {
    const std::string& name = names[rng.randint(names.size())];
    coords.emplace_back(name, static_cast<std::size_t>(rng.randint(store.at(name).size())));
  }
  return coords;
}

}  // namespace detail

// Runs the full catalog at f64 with eps = 1e-5. Every row must come in under
// `threshold` relative error.
inline std::vector<CheckRow> run_gradcheck_catalog(double threshold = 1e-4) {
  using T = double;
  std::vector<CheckRow> rows;
  Rng rng(0xCA7A106);
  auto probe = [&](Shape s) { return Tensor<T>::randn(s, rng); };
  auto add_row = [&](const std::string& name, double err) {
    rows.push_back({name, err, err < threshold});
  };

  // Primitive ops.
  {
    const Tensor<T> pr = probe({4, 3});
    add_row("op:linear", grad_check<T>(
                             [pr](Tape<T>& tp, std::vector<Var<T>>& p) {
                               return reduce_sum(mul(linear(p[0], p[1], p[2]), tp.constant(pr)));
                             },
                             {probe({4, 5}), probe({5, 3}), probe({3})}));
  }
  {
    const Tensor<T> pr = probe({3, 6});
    add_row("op:softmax_lastdim", grad_check<T>(
                                      [pr](Tape<T>& tp, std::vector<Var<T>>& p) {
                                        return reduce_sum(mul(softmax_lastdim(p[0]), tp.constant(pr)));
                                      },
                                      {probe({3, 6})}));
  }
  {
    const Tensor<T> pr = probe({3, 5});
    add_row("op:layer_norm", grad_check<T>(
                                 [pr](Tape<T>& tp, std::vector<Var<T>>& p) {
                                   return reduce_sum(mul(layer_norm(p[0], p[1], p[2]), tp.constant(pr)));
                                 },
                                 {probe({3, 5}), probe({5}), probe({5})}));
  }
  {
    const Tensor<T> pr = probe({11});
    add_row("op:gelu", grad_check<T>(
                           [pr](Tape<T>& tp, std::vector<Var<T>>& p) {
                             return reduce_sum(mul(gelu(p[0]), tp.constant(pr)));
                           },
                           {probe({11})}));
  }
  {
    const Tensor<T> pr = probe({9});
    add_row("op:relu", grad_check<T>(
                           [pr](Tape<T>& tp, std::vector<Var<T>>& p) {
                             return reduce_sum(mul(relu(p[0]), tp.constant(pr)));
                           },
                           {probe({9})}));
  }
  {
    const Tensor<T> pr = probe({3, 4});
    add_row("op:matmul", grad_check<T>(
                             [pr](Tape<T>& tp, std::vector<Var<T>>& p) {
                               return reduce_sum(mul(matmul(p[0], p[1]), tp.constant(pr)));
                             },
                             {probe({3, 5}), probe({5, 4})}));
  }
  {
    const Tensor<T> pr = probe({6, 4});
    add_row("op:batch_norm(train)",
            grad_check<T>(
                [pr](Tape<T>& tp, std::vector<Var<T>>& p) {
                  Tensor<T> rm({4}), rv = Tensor<T>::ones({4});
                  return reduce_sum(
                      mul(batch_norm(p[0], p[1], p[2], &rm, &rv, true), tp.constant(pr)));
                },
                {probe({6, 4}), probe({4}), probe({4})}));
  }
  {
    const Tensor<T> pr = probe({5, 3});
    add_row("op:dropout", grad_check<T>(
                              [pr](Tape<T>& tp, std::vector<Var<T>>& p) {
                                Rng drop(99);
                                return reduce_sum(mul(dropout(p[0], 0.4, drop, true), tp.constant(pr)));
                              },
                              {probe({5, 3})}));
  }
  add_row("op:cross_entropy",
          grad_check<T>([](Tape<T>&, std::vector<Var<T>>& p) { return cross_entropy(p[0], {2, 0, 1, 2}); },
                        {probe({4, 3})}));
  add_row("op:chamfer_l2",
          grad_check<T>([](Tape<T>&, std::vector<Var<T>>& p) { return chamfer_l2(p[0], p[1]); },
                        {probe({6, 3}), probe({5, 3})}));
  add_row("op:cosine_loss",
          grad_check<T>([](Tape<T>&, std::vector<Var<T>>& p) { return cosine_loss(p[0], p[1]); },
                        {probe({7}), probe({7})}));

  // Blocks, checked through a small model's parameter store.
  ModelConfig cfg;
  cfg.dim = 16;
  cfg.heads = 2;
  cfg.enc_depth = 1;
  cfg.reg_depth = 2;
  cfg.dec_depth = 1;
  cfg.patch_count = 6;
  cfg.neighbors = 5;
  cfg.mask_ratio = 0.5;
  ModelState<T> state;
  state.cfg = cfg;
  state.init(0xB10C);
  const PointCloud cloud = gen_shape(ShapeClass::torus, 64, 0.02, 0x10AD);
  const PatchSet patches = build_patches(cloud, cfg, 3);
  const MaskPlan plan = sample_mask(cfg.patch_count, cfg.mask_ratio, 5);
  const PatchSet visible = gather_patch_rows(patches, plan.visible_idx);
  const PatchSet masked = gather_patch_rows(patches, plan.masked_idx);
  const Tensor<T> pooled_probe = probe({2 * cfg.dim});
  const Tensor<T> token_probe = probe({cfg.patch_count, cfg.dim});
  const Tensor<T> vis_probe = probe({plan.visible_idx.size(), cfg.dim});
  const Tensor<T> masked_probe = probe({plan.masked_idx.size(), cfg.dim});
  const Tensor<T> recon_probe = probe({plan.masked_idx.size(), cfg.recon_width()});

  {
    auto fwd = [&](Session<T>& sess, Session<T>&) {
      TokenSet<T> tokens = embed_patches(sess, cfg, patches);
      return reduce_sum(mul(tokens.tokens, sess.input(token_probe)));
    };
    add_row("block:patch_embed",
            detail::store_grad_check(state.params, state.teacher, fwd,
                                     detail::sample_coords(state.params, 24, 1, "embed.")));
  }
  {
    auto fwd = [&](Session<T>& sess, Session<T>&) {
      return reduce_sum(mul(pos_embed<T>(sess, patches.centers),
                            sess.input(token_probe)));
    };
    add_row("block:pos_embed",
            detail::store_grad_check(state.params, state.teacher, fwd,
                                     detail::sample_coords(state.params, 16, 2, "pos.")));
  }
  {
    auto fwd = [&](Session<T>& sess, Session<T>&) {
      TokenSet<T> enc = encode(sess, cfg, embed_patches(sess, cfg, visible));
      return reduce_sum(mul(enc.tokens, sess.input(vis_probe)));
    };
    add_row("block:encoder",
            detail::store_grad_check(state.params, state.teacher, fwd,
                                     detail::sample_coords(state.params, 24, 3, "enc.")));
  }
  for (KvMode mode : {KvMode::previous_layer, KvMode::visible_always}) {
    ModelConfig cfg2 = cfg;
    cfg2.kv_mode = mode;
    auto fwd = [&, cfg2](Session<T>& sess, Session<T>&) {
      TokenSet<T> enc = encode(sess, cfg2, embed_patches(sess, cfg2, visible));
      TokenSet<T> pred = regress(sess, cfg2, enc, masked.centers);
      return reduce_sum(mul(pred.tokens, sess.input(masked_probe)));
    };
    auto coords = detail::sample_coords(state.params, 20, 4, "reg.");
    coords.emplace_back("mask_query", 0);
    coords.emplace_back("mask_query", cfg.dim / 2);
    add_row(std::string("block:regressor(") +
                (mode == KvMode::previous_layer ? "previous_layer" : "visible_always") + ")",
            detail::store_grad_check(state.params, state.teacher, fwd, coords));
  }
  {
    auto fwd = [&](Session<T>& sess, Session<T>&) {
      TokenSet<T> enc = encode(sess, cfg, embed_patches(sess, cfg, visible));
      TokenSet<T> pred = regress(sess, cfg, enc, masked.centers);
      TokenSet<T> dec = decode(sess, cfg, pred);
      return reduce_sum(mul(dec.tokens, sess.input(masked_probe)));
    };
    add_row("block:decoder",
            detail::store_grad_check(state.params, state.teacher, fwd,
                                     detail::sample_coords(state.params, 20, 5, "dec.")));
  }
  {
    auto fwd = [&](Session<T>& sess, Session<T>&) {
      TokenSet<T> enc = encode(sess, cfg, embed_patches(sess, cfg, visible));
      TokenSet<T> pred = regress(sess, cfg, enc, masked.centers);
      Var<T> out = reconstruct_head(sess, cfg, decode(sess, cfg, pred));
      return reduce_sum(mul(out, sess.input(recon_probe)));
    };
    auto coords = detail::sample_coords(state.params, 12, 6, "recon.");
    add_row("block:reconstruct_head",
            detail::store_grad_check(state.params, state.teacher, fwd, coords));
  }
  {
    auto fwd = [&](Session<T>& sess, Session<T>&) {
      TokenSet<T> enc = encode(sess, cfg, embed_patches(sess, cfg, visible));
      return reduce_sum(mul(pool_concat(enc.tokens), sess.input(pooled_probe)));
    };
    add_row("block:pool_concat",
            detail::store_grad_check(state.params, state.teacher, fwd,
                                     detail::sample_coords(state.params, 16, 7, "enc.")));
  }

  // Heads over fixed features.
  for (Protocol protocol : {Protocol::FULL, Protocol::LINEAR, Protocol::MLP3}) {
    ModelState<T> head_state;
    head_state.cfg = cfg;
    head_state.init(0x6EAD);
    head_state.ensure_head(0xF00D, 2 * cfg.dim, 24, 3, protocol);
    const Tensor<T> feats = probe({4, 2 * cfg.dim});
    auto fwd = [&, protocol](Session<T>& sess, Session<T>&) {
      return cross_entropy(head_forward(sess, sess.input(feats), protocol), {0, 2, 1, 0});
    };
    const char* pname = protocol == Protocol::FULL ? "FULL" : protocol == Protocol::LINEAR ? "LINEAR"
                                                                                           : "MLP3";
    add_row(std::string("head:") + pname,
            detail::store_grad_check(head_state.params, head_state.teacher, fwd,
                                     detail::sample_coords(head_state.params, 16, 8, "head.")));
  }

  // Losses on live predictions.
  {
    auto fwd = [&](Session<T>& sess, Session<T>& teacher_sess) {
      auto f = pretrain_forward_cloud(sess, teacher_sess, cfg, cloud, 3, 5, AlignTarget::cosine, 0.07,
                                      0.1);
      return f.loss_rec;
    };
    add_row("loss:reconstruction(chamfer)",
            detail::store_grad_check(state.params, state.teacher, fwd,
                                     detail::sample_coords(state.params, 24, 9)));
  }
  {
    ModelConfig ext_cfg = cfg;
    ext_cfg.recon_target = ReconTarget::external_features;
    ext_cfg.feature_dim = 10;
    ModelState<T> ext_state;
    ext_state.cfg = ext_cfg;
    ext_state.init(0xE47);
    Rng trng(0x7A6);
    const Tensor<T> targets = Tensor<T>::randn({ext_cfg.patch_count, ext_cfg.feature_dim}, trng);
    auto fwd = [&](Session<T>& sess, Session<T>& teacher_sess) {
      auto f = pretrain_forward_cloud(sess, teacher_sess, ext_cfg, cloud, 3, 5, AlignTarget::cosine,
                                      0.07, 0.1, &targets);
      return f.loss_rec;
    };
    add_row("loss:reconstruction(features)",
            detail::store_grad_check(ext_state.params, ext_state.teacher, fwd,
                                     detail::sample_coords(ext_state.params, 24, 10)));
  }
  for (AlignTarget target : {AlignTarget::cosine, AlignTarget::mse, AlignTarget::infonce,
                             AlignTarget::ntxent}) {
    auto fwd = [&, target](Session<T>& sess, Session<T>& teacher_sess) {
      auto f = pretrain_forward_cloud(sess, teacher_sess, cfg, cloud, 3, 5, target, 0.07, 0.1);
      return f.loss_align_raw;
    };
    const char* tname = target == AlignTarget::cosine    ? "cosine"
                        : target == AlignTarget::mse     ? "mse"
                        : target == AlignTarget::infonce ? "infonce"
                                                         : "ntxent";
    add_row(std::string("loss:align(") + tname + ")",
            detail::store_grad_check(state.params, state.teacher, fwd,
                                     detail::sample_coords(state.params, 20, 11)));
  }

  // Full pretraining objective, all four pipeline variants, sampled
  // parameter subset across every submodule.
  for (PipelineVariant variant : {PipelineVariant::both, PipelineVariant::regressor_only,
                                  PipelineVariant::decoder_only, PipelineVariant::neither}) {
    ModelConfig vcfg = cfg;
    vcfg.variant = variant;
    auto fwd = [&, vcfg](Session<T>& sess, Session<T>& teacher_sess) {
      auto f = pretrain_forward_cloud(sess, teacher_sess, vcfg, cloud, 3, 5, AlignTarget::cosine, 0.07,
                                      0.1);
      return add(f.loss_rec, f.loss_align_raw);
    };
    const char* vname = variant == PipelineVariant::both             ? "both"
                        : variant == PipelineVariant::regressor_only ? "regressor_only"
                        : variant == PipelineVariant::decoder_only   ? "decoder_only"
                                                                     : "neither";
    add_row(std::string("pipeline:") + vname,
            detail::store_grad_check(state.params, state.teacher, fwd,
                                     detail::sample_coords(state.params, 32, 12)));
  }

  return rows;
}

}  // namespace rae
