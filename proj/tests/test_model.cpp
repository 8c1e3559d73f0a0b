#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "rae/check_catalog.hpp"
#include "rae/finetune.hpp"
#include "rae/pretrain.hpp"

using namespace rae;

namespace {

ModelConfig small_cfg() {
  ModelConfig cfg;
  cfg.dim = 16;
  cfg.heads = 2;
  cfg.enc_depth = 2;
  cfg.reg_depth = 2;
  cfg.dec_depth = 1;
  cfg.patch_count = 8;
  cfg.neighbors = 6;
  cfg.mask_ratio = 0.5;
  return cfg;
}

ModelState<double> small_state(std::uint64_t seed = 1) {
  ModelState<double> state;
  state.cfg = small_cfg();
  state.init(seed);
  return state;
}

PatchSet sample_patches(const ModelConfig& cfg, std::uint64_t seed = 2) {
  const PointCloud cloud = gen_shape(ShapeClass::torus, 128, 0.02, seed);
  return build_patches(cloud, cfg, seed);
}

}  // namespace

TEST_CASE("embed_patches: shape, intra-patch permutation invariance, duplicated point") {
  auto state = small_state();
  const auto cfg = state.cfg;
  PatchSet patches = sample_patches(cfg);

  Tape<double> tape;
  Session<double> sess(tape, state.params, Session<double>::none());
  TokenSet<double> tokens = embed_patches(sess, cfg, patches);
  CHECK(tokens.tokens.value().rows() == cfg.patch_count);
  CHECK(tokens.tokens.value().cols() == cfg.dim);
  CHECK(tokens.role == TokenRole::embedded);

  // Permute the points inside each patch: tokens must be bit-identical.
  PatchSet shuffled = patches;
  Rng rng(3);
  const std::size_t k = cfg.neighbors;
  for (std::size_t p = 0; p < cfg.patch_count; ++p) {
    std::vector<std::size_t> perm(k);
    for (std::size_t i = 0; i < k; ++i) perm[i] = i;
    rng.shuffle(perm);
    for (std::size_t i = 0; i < k; ++i)
      for (std::size_t d = 0; d < 3; ++d)
        shuffled.patches[(p * k + i) * 3 + d] = patches.patches[(p * k + perm[i]) * 3 + d];
  }
  TokenSet<double> tokens_shuffled = embed_patches(sess, cfg, shuffled);
  CHECK(bitwise_equal(tokens.tokens.value(), tokens_shuffled.tokens.value()));

  // A patch extended by a repeat of one of its own points embeds identically.
  PatchSet widened;
  widened.centers = patches.centers;
  widened.patches = Tensor<double>({cfg.patch_count, k + 1, 3});
  for (std::size_t p = 0; p < cfg.patch_count; ++p) {
    for (std::size_t i = 0; i < k; ++i)
      for (std::size_t d = 0; d < 3; ++d)
        widened.patches[(p * (k + 1) + i) * 3 + d] = patches.patches[(p * k + i) * 3 + d];
    for (std::size_t d = 0; d < 3; ++d)
      widened.patches[(p * (k + 1) + k) * 3 + d] = patches.patches[(p * k + 2) * 3 + d];
  }
  TokenSet<double> tokens_widened = embed_patches(sess, cfg, widened);
  CHECK(bitwise_equal(tokens.tokens.value(), tokens_widened.tokens.value()));
}

TEST_CASE("pos_embed: shape, zero weights, distinct centers") {
  auto state = small_state();
  Tape<double> tape;
  Session<double> sess(tape, state.params, Session<double>::none());
  PatchSet patches = sample_patches(state.cfg);
  Var<double> pe = pos_embed<double>(sess, patches.centers);
  CHECK(pe.value().rows() == state.cfg.patch_count);
  CHECK(pe.value().cols() == state.cfg.dim);

  // Distinct centers map to distinct embeddings under random weights.
  for (std::size_t i = 0; i < patches.centers.rows(); ++i)
    for (std::size_t j = i + 1; j < patches.centers.rows(); ++j) {
      double diff = 0;
      for (std::size_t d = 0; d < state.cfg.dim; ++d)
        diff += std::abs(pe.value()[i * state.cfg.dim + d] - pe.value()[j * state.cfg.dim + d]);
      CHECK(diff > 0);
    }

  auto zero_state = small_state();
  for (const char* name : {"pos.l0.w", "pos.l0.b", "pos.l1.w", "pos.l1.b"})
    zero_state.params.at(name).fill(0.0);
  Session<double> zsess(tape, zero_state.params, Session<double>::none());
  Var<double> zero_pe = pos_embed<double>(zsess, patches.centers);
  for (std::size_t i = 0; i < zero_pe.value().size(); ++i) CHECK(zero_pe.value()[i] == 0.0);
}

TEST_CASE("encode: depth 0 identity plus positions; permutation equivariance") {
  auto state = small_state();
  const auto cfg = state.cfg;
  PatchSet patches = sample_patches(cfg);

  ModelConfig cfg0 = cfg;
  cfg0.enc_depth = 0;
  Tape<double> tape;
  Session<double> sess(tape, state.params, Session<double>::none());
  TokenSet<double> emb = embed_patches(sess, cfg0, patches);
  TokenSet<double> enc0 = encode(sess, cfg0, emb);
  Var<double> expected = add(emb.tokens, pos_embed<double>(sess, patches.centers));
  CHECK(bitwise_equal(enc0.tokens.value(), expected.value()));
  CHECK(enc0.role == TokenRole::encoded_visible);

  // Permuting tokens together with their positions permutes outputs.
  TokenSet<double> enc = encode(sess, cfg, emb);
  std::vector<std::size_t> perm{3, 1, 7, 0, 5, 2, 6, 4};
  PatchSet permuted;
  permuted.centers = Tensor<double>({cfg.patch_count, 3});
  permuted.patches = Tensor<double>({cfg.patch_count, cfg.neighbors, 3});
  for (std::size_t i = 0; i < perm.size(); ++i) {
    for (std::size_t d = 0; d < 3; ++d) permuted.centers[i * 3 + d] = patches.centers[perm[i] * 3 + d];
    for (std::size_t j = 0; j < cfg.neighbors * 3; ++j)
      permuted.patches[i * cfg.neighbors * 3 + j] = patches.patches[perm[i] * cfg.neighbors * 3 + j];
  }
  TokenSet<double> enc_perm = encode(sess, cfg, embed_patches(sess, cfg, permuted));
  for (std::size_t i = 0; i < perm.size(); ++i)
    for (std::size_t d = 0; d < cfg.dim; ++d)
      CHECK(std::abs(enc_perm.tokens.value()[i * cfg.dim + d] -
                     enc.tokens.value()[perm[i] * cfg.dim + d]) < 1e-10);
}

TEST_CASE("regress: shape, shared-query symmetry, equivariance, contract") {
  auto state = small_state();
  const auto cfg = state.cfg;
  PatchSet patches = sample_patches(cfg);
  const MaskPlan plan = sample_mask(cfg.patch_count, cfg.mask_ratio, 4);
  const PatchSet visible = gather_patch_rows(patches, plan.visible_idx);
  const Tensor<double> masked_centers = gather_center_rows(patches.centers, plan.masked_idx);

  Tape<double> tape;
  Session<double> sess(tape, state.params, Session<double>::none());
  TokenSet<double> enc = encode(sess, cfg, embed_patches(sess, cfg, visible));
  TokenSet<double> pred = regress(sess, cfg, enc, masked_centers);
  CHECK(pred.tokens.value().rows() == plan.masked_idx.size());
  CHECK(pred.tokens.value().cols() == cfg.dim);
  CHECK(pred.role == TokenRole::predicted_masked);

  // Two identical masked positions produce identical predictions (shared
  // learnable query), at any depth.
  ModelConfig cfg1 = cfg;
  cfg1.reg_depth = 1;
  Tensor<double> twin({2, 3});
  for (std::size_t d = 0; d < 3; ++d) twin[d] = twin[3 + d] = masked_centers[d];
  TokenSet<double> twin_pred = regress(sess, cfg1, enc, twin);
  for (std::size_t d = 0; d < cfg.dim; ++d)
    CHECK(twin_pred.tokens.value()[d] == twin_pred.tokens.value()[cfg.dim + d]);

  // Permuting masked positions permutes predictions identically.
  const std::size_t s_m = plan.masked_idx.size();
  std::vector<std::size_t> perm(s_m);
  for (std::size_t i = 0; i < s_m; ++i) perm[i] = (i + 2) % s_m;
  Tensor<double> shuffled({s_m, 3});
  for (std::size_t i = 0; i < s_m; ++i)
    for (std::size_t d = 0; d < 3; ++d) shuffled[i * 3 + d] = masked_centers[perm[i] * 3 + d];
  TokenSet<double> pred_perm = regress(sess, cfg, enc, shuffled);
  for (std::size_t i = 0; i < s_m; ++i)
    for (std::size_t d = 0; d < cfg.dim; ++d)
      CHECK(std::abs(pred_perm.tokens.value()[i * cfg.dim + d] -
                     pred.tokens.value()[perm[i] * cfg.dim + d]) < 1e-10);

  CHECK_THROWS_AS(regress(sess, cfg, enc, Tensor<double>({0, 3})), ContractError);
}

TEST_CASE("regress: kv_mode variants differ beyond the first block") {
  auto state = small_state();
  PatchSet patches = sample_patches(state.cfg);
  const MaskPlan plan = sample_mask(state.cfg.patch_count, 0.5, 4);
  const PatchSet visible = gather_patch_rows(patches, plan.visible_idx);
  const Tensor<double> centers = gather_center_rows(patches.centers, plan.masked_idx);

  Tape<double> tape;
  Session<double> sess(tape, state.params, Session<double>::none());
  TokenSet<double> enc = encode(sess, state.cfg, embed_patches(sess, state.cfg, visible));

  ModelConfig prev = state.cfg;
  prev.kv_mode = KvMode::previous_layer;
  ModelConfig always = state.cfg;
  always.kv_mode = KvMode::visible_always;
  const auto out_prev = regress(sess, prev, enc, centers).tokens.value();
  const auto out_always = regress(sess, always, enc, centers).tokens.value();
  CHECK(max_abs_diff(out_prev, out_always) > 1e-8);

  prev.reg_depth = always.reg_depth = 1;
  const auto one_prev = regress(sess, prev, enc, centers).tokens.value();
  const auto one_always = regress(sess, always, enc, centers).tokens.value();
  CHECK(bitwise_equal(one_prev, one_always));
}

TEST_CASE("decode: depth-0 identity, shape, isolation from visible tokens") {
  auto state = small_state();
  const auto cfg = state.cfg;
  PatchSet patches = sample_patches(cfg);
  const MaskPlan plan = sample_mask(cfg.patch_count, cfg.mask_ratio, 4);
  const PatchSet visible = gather_patch_rows(patches, plan.visible_idx);
  const Tensor<double> masked_centers = gather_center_rows(patches.centers, plan.masked_idx);

  Tape<double> tape;
  Session<double> sess(tape, state.params, Session<double>::none());
  TokenSet<double> enc = encode(sess, cfg, embed_patches(sess, cfg, visible));
  TokenSet<double> pred = regress(sess, cfg, enc, masked_centers);

  ModelConfig cfg0 = cfg;
  cfg0.dec_depth = 0;
  TokenSet<double> dec0 = decode(sess, cfg0, pred);
  CHECK(bitwise_equal(dec0.tokens.value(), pred.tokens.value()));
  CHECK(dec0.role == TokenRole::decoded_masked);

  TokenSet<double> dec = decode(sess, cfg, pred);
  CHECK(dec.tokens.value().rows() == plan.masked_idx.size());

  // The decoder consumes only the predicted tokens: rerunning it after
  // arbitrarily perturbing the visible path changes nothing.
  TokenSet<double> pred_fixed{sess.input(pred.tokens.value()), pred.centers,
                              TokenRole::predicted_masked};
  TokenSet<double> dec_a = decode(sess, cfg, pred_fixed);
  Var<double> perturbed = scale(enc.tokens, -123.0);  // visible stream mangled
  (void)perturbed;
  TokenSet<double> dec_b = decode(sess, cfg, pred_fixed);
  CHECK(bitwise_equal(dec_a.tokens.value(), dec_b.tokens.value()));
}

TEST_CASE("reconstruct_head: output shapes, zero-weight pipeline oracle") {
  auto state = small_state();
  const auto cfg = state.cfg;
  PatchSet patches = sample_patches(cfg);
  const MaskPlan plan = sample_mask(cfg.patch_count, cfg.mask_ratio, 4);
  const PatchSet visible = gather_patch_rows(patches, plan.visible_idx);
  const PatchSet masked = gather_patch_rows(patches, plan.masked_idx);

  Tape<double> tape;
  Session<double> sess(tape, state.params, Session<double>::none());
  TokenSet<double> enc = encode(sess, cfg, embed_patches(sess, cfg, visible));
  TokenSet<double> dec = decode(sess, cfg, regress(sess, cfg, enc, masked.centers));
  Var<double> coords = reconstruct_head(sess, cfg, dec);
  CHECK(coords.value().rows() == plan.masked_idx.size());
  CHECK(coords.value().cols() == cfg.neighbors * 3);

  ModelConfig ext = cfg;
  ext.recon_target = ReconTarget::external_features;
  ext.feature_dim = 12;
  ModelState<double> ext_state;
  ext_state.cfg = ext;
  ext_state.init(9);
  Session<double> ext_sess(tape, ext_state.params, Session<double>::none());
  TokenSet<double> ext_enc = encode(ext_sess, ext, embed_patches(ext_sess, ext, visible));
  TokenSet<double> ext_dec = decode(ext_sess, ext, regress(ext_sess, ext, ext_enc, masked.centers));
  CHECK(reconstruct_head(ext_sess, ext, ext_dec).value().cols() == 12);

  // Zero head weights -> all-zero predicted patches; the loss must equal the
  // plain Chamfer between a zero set and each ground-truth patch.
  state.params.at("recon.w").fill(0.0);
  state.params.at("recon.b").fill(0.0);
  Session<double> zsess(tape, state.params, Session<double>::none());
  TokenSet<double> zenc = encode(zsess, cfg, embed_patches(zsess, cfg, visible));
  TokenSet<double> zdec = decode(zsess, cfg, regress(zsess, cfg, zenc, masked.centers));
  Var<double> zpred = reconstruct_head(zsess, cfg, zdec);
  Var<double> loss = reconstruction_loss_coords(zsess, zpred, masked.patches);
  double expected = 0;
  const std::size_t k = cfg.neighbors;
  for (std::size_t i = 0; i < plan.masked_idx.size(); ++i) {
    std::vector<Vec3> zero_set(k, Vec3{0, 0, 0});
    std::vector<Vec3> gt(k);
    for (std::size_t j = 0; j < k; ++j)
      gt[j] = {masked.patches[(i * k + j) * 3], masked.patches[(i * k + j) * 3 + 1],
               masked.patches[(i * k + j) * 3 + 2]};
    expected += chamfer_l2(zero_set, gt);
  }
  expected /= static_cast<double>(plan.masked_idx.size());
  CHECK(loss.value().item() == doctest::Approx(expected).epsilon(1e-12));
}

TEST_CASE("pool_concat: single token, width, permutation invariance") {
  Tape<double> tape;
  Rng rng(12);
  Tensor<double> one({1, 5});
  for (std::size_t i = 0; i < 5; ++i) one[i] = rng.normal();
  Var<double> pooled_one = pool_concat(tape.constant(one));
  CHECK(pooled_one.value().size() == 10);
  for (std::size_t i = 0; i < 5; ++i) {
    CHECK(pooled_one.value()[i] == one[i]);
    CHECK(pooled_one.value()[5 + i] == one[i]);
  }

  Tensor<double> many = Tensor<double>::randn({7, 384}, rng);
  CHECK(pool_concat(tape.constant(many)).value().size() == 768);

  // The max half is exactly invariant; the mean half re-orders a floating
  // sum, so compare to rounding noise.
  std::vector<std::size_t> perm{4, 2, 6, 0, 1, 5, 3};
  Tensor<double> shuffled({7, 384});
  for (std::size_t i = 0; i < 7; ++i)
    for (std::size_t j = 0; j < 384; ++j) shuffled[i * 384 + j] = many[perm[i] * 384 + j];
  CHECK(max_abs_diff(pool_concat(tape.constant(many)).value(),
                     pool_concat(tape.constant(shuffled)).value()) < 1e-12);
}

TEST_CASE("head_forward: logits shape, frozen-backbone gradients, eval determinism") {
  auto state = small_state();
  state.ensure_head(7, 2 * state.cfg.dim, 24, 5, Protocol::FULL);
  Rng rng(3);
  const Tensor<double> feats = Tensor<double>::randn({4, 2 * state.cfg.dim}, rng);

  {
    Rng drop(1);
    Tape<double> tape;
    Session<double> sess(tape, state.params, Session<double>::prefix("head."), true, &drop);
    Var<double> logits = head_forward(sess, sess.input(feats), Protocol::FULL);
    CHECK(logits.value().rows() == 4);
    CHECK(logits.value().cols() == 5);
    tape.backward(cross_entropy(logits, {0, 1, 2, 3}));
    // Only head parameters can carry gradient under a frozen lease.
    for (const auto& [name, grad] : sess.gradients()) CHECK(name.rfind("head.", 0) == 0);
  }

  // Eval passes are dropout-free and bit-identical.
  auto eval_once = [&]() {
    Tape<double> tape;
    Session<double> sess(tape, state.params, Session<double>::none(), false);
    return head_forward(sess, sess.input(feats), Protocol::FULL).value();
  };
  CHECK(bitwise_equal(eval_once(), eval_once()));
}

TEST_CASE("teacher: shape congruence holds after an optimizer step") {
  auto state = small_state();
  AdamW<double> opt(0.9, 0.999, 1e-8, 0.05);
  const PointCloud cloud = gen_shape(ShapeClass::sphere, 96, 0.01, 5);

  Tape<double> tape;
  Session<double> sess(tape, state.params, Session<double>::all());
  Session<double> teacher_sess(tape, state.teacher, Session<double>::none());
  auto fwd = pretrain_forward_cloud(sess, teacher_sess, state.cfg, cloud, 1, 2, AlignTarget::cosine,
                                    0.07, 0.1);
  tape.backward(add(fwd.loss_rec, fwd.loss_align_raw));
  opt.step(state.params, sess.gradients(), 1e-3);
  ema_update(state.teacher, state.params, 0.999);
  for (const auto& name : state.teacher.names())
    CHECK(state.teacher.at(name).shape() == state.params.at(name).shape());
}

TEST_CASE("gradcheck catalog: every block type under 1e-4 at f64") {
  const auto rows = run_gradcheck_catalog(1e-4);
  CHECK(rows.size() >= 25);
  for (const auto& row : rows) {
    CAPTURE(row.name);
    CAPTURE(row.rel_err);
    CHECK(row.pass);
  }
}
