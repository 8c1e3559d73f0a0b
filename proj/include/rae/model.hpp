#pragma once

// The backbone: mini-PointNet patch embedding, positional MLP, self-attention
// encoder, cross-attention mask regressor with a shared learnable query,
// lightweight decoder, reconstruction head, and pooled classification heads.
// The teacher store mirrors the encoding path (patch embed, positional MLP,
// encoder) and is only ever written by EMA updates.

#include <cstdint>
#include <string>

#include "rae/geometry.hpp"
#include "rae/nn.hpp"

namespace rae {

enum class KvMode { previous_layer, visible_always };
enum class ReconTarget { coordinates, external_features };

// Pretraining dataflow variants (ablation grid): the full pipeline, the
// regressor without a decoder, a decoder-only masked autoencoder, and a
// BERT-style encoder that sees masked slots directly.
enum class PipelineVariant { both, regressor_only, decoder_only, neither };

enum class Protocol { FULL, LINEAR, MLP3 };

struct ModelConfig {
  std::size_t dim = 64;
  std::size_t heads = 4;
  std::size_t enc_depth = 3;
  std::size_t reg_depth = 2;
  std::size_t dec_depth = 1;
  std::size_t patch_count = 16;  // S
  std::size_t neighbors = 16;    // k
  double mask_ratio = 0.8;
  KvMode kv_mode = KvMode::previous_layer;
  ReconTarget recon_target = ReconTarget::coordinates;
  std::size_t feature_dim = 0;  // width of external reconstruction targets
  PipelineVariant variant = PipelineVariant::both;

  std::size_t recon_width() const {
    return recon_target == ReconTarget::coordinates ? neighbors * 3 : feature_dim;
  }

  void validate() const {
    if (dim == 0 || heads == 0 || dim % heads != 0)
      throw ConfigError("model.dim must be a positive multiple of model.heads");
    if (patch_count == 0) throw ConfigError("model.patches must be positive");
    if (neighbors == 0) throw ConfigError("model.neighbors must be positive");
    if (!(mask_ratio > 0.0 && mask_ratio < 1.0)) throw ConfigError("model.mask_ratio must be in (0,1)");
    if (recon_target == ReconTarget::external_features && feature_dim == 0)
      throw ConfigError("model.feature_dim required for external_features target");
  }
};

enum class TokenRole { embedded, encoded_visible, teacher_masked, predicted_masked, decoded_masked };

// Tokens plus the patch centers they are anchored to.
template <class T>
struct TokenSet {
  Var<T> tokens;           // [S', d]
  Tensor<double> centers;  // [S', 3]
  TokenRole role = TokenRole::embedded;
};

template <class T>
struct ModelState {
  ModelConfig cfg;
  ParamStore<T> params;
  ParamStore<T> teacher;

  static bool in_teacher_scope(const std::string& name) {
    return name.rfind("embed.", 0) == 0 || name.rfind("pos.", 0) == 0 || name.rfind("enc.", 0) == 0;
  }

  void init(std::uint64_t seed) {
    cfg.validate();
    Rng rng(fold_seed(seed, {0x1217u}));
    const std::size_t d = cfg.dim;
    const std::size_t half = d / 2;
    init_linear(params, rng, "embed.mlp1.l0", 3, half);
    init_linear(params, rng, "embed.mlp1.l1", half, half);
    init_linear(params, rng, "embed.mlp2.l0", d, d);
    init_linear(params, rng, "embed.mlp2.l1", d, d);
    init_linear(params, rng, "pos.l0", 3, d);
    init_linear(params, rng, "pos.l1", d, d);
    for (std::size_t i = 0; i < cfg.enc_depth; ++i)
      init_encoder_block(params, rng, "enc.b" + std::to_string(i), d);
    params.add("mask_query", Tensor<T>::randn({1, d}, rng, kInitStd));
    for (std::size_t i = 0; i < cfg.reg_depth; ++i)
      init_cross_block(params, rng, "reg.b" + std::to_string(i), d);
    for (std::size_t i = 0; i < cfg.dec_depth; ++i)
      init_encoder_block(params, rng, "dec.b" + std::to_string(i), d);
    init_linear(params, rng, "recon", d, cfg.recon_width());
    reset_teacher_from_student();
  }

  void reset_teacher_from_student() {
    teacher = ParamStore<T>();
    for (const auto& name : params.names())
      if (in_teacher_scope(name)) teacher.add(name, params.at(name));
  }

  // Registers classification-head parameters sized for `in_dim` features.
  // Re-registering with a different geometry is a config error.
  void ensure_head(std::uint64_t seed, std::size_t in_dim, std::size_t hidden, std::size_t n_classes,
                   Protocol protocol) {
    const bool mlp = protocol != Protocol::LINEAR;
    if (params.contains("head.out.w")) {
      const auto& w = params.at(mlp ? "head.l0.w" : "head.out.w");
      const std::size_t have_in = w.dim(0);
      const std::size_t have_out = params.at("head.out.w").dim(1);
      if (have_in != in_dim || have_out != n_classes ||
          params.contains("head.l0.w") != mlp)
        throw ConfigError("checkpoint head does not match requested protocol/topology geometry");
      return;
    }
    Rng rng(fold_seed(seed, {0x4EADu}));
    if (mlp) {
      init_linear(params, rng, "head.l0", in_dim, hidden);
      init_batch_norm(params, "head.bn0", hidden);
      init_linear(params, rng, "head.l1", hidden, hidden);
      init_batch_norm(params, "head.bn1", hidden);
      init_linear(params, rng, "head.out", hidden, n_classes);
    } else {
      init_linear(params, rng, "head.out", in_dim, n_classes);
    }
  }
};

// ---------------------------------------------------------------------------
// pipeline stages
// ---------------------------------------------------------------------------

namespace detail {

template <class T>
void require_role(const TokenSet<T>& ts, TokenRole want, const char* op) {
  if (ts.role != want) throw ContractError(std::string(op) + ": token set has the wrong role");
}

}  // namespace detail

// Mini-PointNet over center-relative patches [S, k, 3]: shared point MLP,
// per-patch max pool, pooled feature concatenated back onto every point,
// second shared MLP, final max pool. Permutation-invariant within each patch.
template <class T>
TokenSet<T> embed_patches(Session<T>& sess, const ModelConfig& cfg, const PatchSet& patches) {
  const std::size_t s = patches.patch_count();
  const std::size_t k = patches.neighbors();
  Var<T> pts = sess.input(patches.patches.template cast<T>().reshaped({s * k, 3}));
  Var<T> h = linear_layer(sess, "embed.mlp1.l1", gelu(linear_layer(sess, "embed.mlp1.l0", pts)));
  Var<T> pooled = segment_max_rows(h, k);                       // [S, d/2]
  Var<T> joined = concat_cols({h, repeat_rows(pooled, k)});     // [S*k, d]
  Var<T> h2 = linear_layer(sess, "embed.mlp2.l1", gelu(linear_layer(sess, "embed.mlp2.l0", joined)));
  (void)cfg;
  return {segment_max_rows(h2, k), patches.centers, TokenRole::embedded};
}

// Two-layer MLP on raw 3-D centers.
template <class T>
Var<T> pos_embed(Session<T>& sess, const Tensor<double>& centers) {
  Var<T> c = sess.input(centers.template cast<T>());
  return linear_layer(sess, "pos.l1", gelu(linear_layer(sess, "pos.l0", c)));
}

// Self-attention encoder over the given tokens; positions are added before
// the first block. Depth 0 degenerates to tokens + positions.
template <class T>
TokenSet<T> encode(Session<T>& sess, const ModelConfig& cfg, const TokenSet<T>& input) {
  detail::require_role(input, TokenRole::embedded, "encode");
  Var<T> x = add(input.tokens, pos_embed<T>(sess, input.centers));
  for (std::size_t i = 0; i < cfg.enc_depth; ++i)
    x = encoder_block(sess, "enc.b" + std::to_string(i), x, cfg.heads);
  return {x, input.centers, TokenRole::encoded_visible};
}

// Cross-attention mask regressor. Queries are the shared mask query
// broadcast per masked slot plus the positional embedding of the masked
// centers. Keys/values start from the encoded visible tokens; later blocks
// follow cfg.kv_mode.
template <class T>
TokenSet<T> regress(Session<T>& sess, const ModelConfig& cfg, const TokenSet<T>& visible_encoded,
                    const Tensor<double>& masked_centers) {
  detail::require_role(visible_encoded, TokenRole::encoded_visible, "regress");
  const std::size_t s_m = masked_centers.dim(0);
  if (s_m == 0) throw ContractError("regress: no masked positions");
  Var<T> queries = add(repeat_rows(sess.param("mask_query"), s_m), pos_embed<T>(sess, masked_centers));
  Var<T> kv = visible_encoded.tokens;
  for (std::size_t i = 0; i < cfg.reg_depth; ++i) {
    queries = cross_block(sess, "reg.b" + std::to_string(i), queries, kv, cfg.heads);
    if (cfg.kv_mode == KvMode::previous_layer) kv = queries;
  }
  return {queries, masked_centers, TokenRole::predicted_masked};
}

// Lightweight self-attention decoder over exactly the predicted masked
// tokens. Depth 0 passes the predictions through unchanged.
template <class T>
TokenSet<T> decode(Session<T>& sess, const ModelConfig& cfg, const TokenSet<T>& predicted) {
  detail::require_role(predicted, TokenRole::predicted_masked, "decode");
  if (cfg.dec_depth == 0) return {predicted.tokens, predicted.centers, TokenRole::decoded_masked};
  Var<T> x = add(predicted.tokens, pos_embed<T>(sess, predicted.centers));
  for (std::size_t i = 0; i < cfg.dec_depth; ++i)
    x = encoder_block(sess, "dec.b" + std::to_string(i), x, cfg.heads);
  return {x, predicted.centers, TokenRole::decoded_masked};
}

// Single fully connected prediction head: d -> k*3 local coordinates or
// d -> feature_dim, depending on the reconstruction target.
template <class T>
Var<T> reconstruct_head(Session<T>& sess, const ModelConfig& cfg, const TokenSet<T>& decoded) {
  detail::require_role(decoded, TokenRole::decoded_masked, "reconstruct_head");
  (void)cfg;
  return linear_layer(sess, "recon", decoded.tokens);
}

// concat(max-pool, mean-pool) over tokens -> 2d feature vector.
template <class T>
Var<T> pool_concat(const Var<T>& tokens) {
  return concat_flat({max_over_rows(tokens), mean_over_rows(tokens)});
}

// Classification head over a batch of pooled features [B, F].
// FULL and MLP3 share the 3-layer architecture (linear, batch norm, ReLU,
// dropout 0.5 twice, then the output linear); LINEAR is a single layer.
template <class T>
Var<T> head_forward(Session<T>& sess, const Var<T>& features, Protocol protocol) {
  if (protocol == Protocol::LINEAR) return linear_layer(sess, "head.out", features);
  auto block = [&](const std::string& lin, const std::string& bn, const Var<T>& x) {
    Var<T> y = linear_layer(sess, lin, x);
    y = batch_norm(y, sess.param(bn + ".g"), sess.param(bn + ".b"), &sess.store().at(bn + ".running_mean"),
                   &sess.store().at(bn + ".running_var"), sess.training());
    y = relu(y);
    return sess.training() ? dropout(y, 0.5, sess.rng(), true) : y;
  };
  Var<T> h = block("head.l0", "head.bn0", features);
  h = block("head.l1", "head.bn1", h);
  return linear_layer(sess, "head.out", h);
}

}  // namespace rae
