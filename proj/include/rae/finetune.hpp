#pragma once

// Fine-tuning: the four backbone feature topologies, protocol-aware
// classification training (with frozen-backbone feature caching), and
// few-shot episodes.

#include <functional>

#include "rae/pretrain.hpp"

namespace rae {

// Feature construction variants:
//   a) pool encoder tokens only (vanilla pipeline)
//   b) pool the regressor's predictions at virtual query positions
//   c) concatenate encoder tokens and predictions into one stream, then pool
//   d) pool each stream separately and combine (concat or add)
enum class Topology { a, b, c, d };
enum class CombineOp { concat, add };

struct TopologySpec {
  Topology variant = Topology::b;
  std::size_t virtual_queries = 8;
  CombineOp combine = CombineOp::concat;
};

inline Topology topology_from(const std::string& s) {
  if (s == "a") return Topology::a;
  if (s == "b") return Topology::b;
  if (s == "c") return Topology::c;
  if (s == "d") return Topology::d;
  throw ConfigError("finetune.topology: unknown value '" + s + "'");
}

inline TopologySpec topology_spec_from(const RunConfig& rc) {
  TopologySpec spec;
  spec.variant = topology_from(rc.topology);
  spec.virtual_queries = rc.resolved_virtual_queries();
  spec.combine = rc.combine == "add" ? CombineOp::add : CombineOp::concat;
  return spec;
}

inline std::size_t feature_width(const TopologySpec& spec, std::size_t dim) {
  if (spec.variant == Topology::d && spec.combine == CombineOp::concat) return 4 * dim;
  return 2 * dim;
}

// Encodes ALL patches (no masking at fine-tune time) and assembles the
// topology's feature vector. Virtual query positions come from a second FPS
// pass over the raw cloud with an offset seed, so they need not coincide
// with patch centers.
template <class T>
Var<T> backbone_features(Session<T>& sess, const ModelConfig& cfg, const TopologySpec& spec,
                         const PointCloud& cloud, std::uint64_t fps_seed) {
  const PatchSet patches = build_patches(cloud, cfg, fps_seed);
  TokenSet<T> encoded = encode(sess, cfg, embed_patches(sess, cfg, patches));
  if (spec.variant == Topology::a) return pool_concat(encoded.tokens);

  if (spec.virtual_queries == 0) throw ContractError("backbone_features: topology needs virtual queries");
  const std::size_t q = std::min(spec.virtual_queries, cloud.size());
  const auto query_idx = farthest_point_sample(cloud, q, fold_seed(fps_seed, {0xBEEFu}));
  Tensor<double> query_pos({q, 3});
  for (std::size_t i = 0; i < q; ++i)
    for (std::size_t d = 0; d < 3; ++d) query_pos[i * 3 + d] = cloud.points[query_idx[i]][d];
  TokenSet<T> predicted = regress(sess, cfg, encoded, query_pos);

  switch (spec.variant) {
    case Topology::b:
      return pool_concat(predicted.tokens);
    case Topology::c:
      return pool_concat(concat_rows({encoded.tokens, predicted.tokens}));
    case Topology::d: {
      Var<T> enc_pooled = pool_concat(encoded.tokens);
      Var<T> pred_pooled = pool_concat(predicted.tokens);
      return spec.combine == CombineOp::concat ? concat_flat({enc_pooled, pred_pooled})
                                               : add(enc_pooled, pred_pooled);
    }
    default:
      throw ContractError("backbone_features: unreachable");
  }
}

struct FinetuneEpoch {
  long epoch = 0;
  double train_loss = 0;
  double train_acc = 0;
  double test_acc = 0;
};

namespace detail {

// Batch boundaries; a trailing singleton is folded into the previous batch
// because the MLP heads batch-normalize over the batch dimension.
inline std::vector<std::pair<std::size_t, std::size_t>> batch_ranges(std::size_t n, std::size_t batch,
                                                                     bool needs_pairs) {
  std::vector<std::pair<std::size_t, std::size_t>> out;
  for (std::size_t b = 0; b < n; b += batch) out.emplace_back(b, std::min(n, b + batch));
  if (needs_pairs && out.size() >= 2 && out.back().second - out.back().first < 2) {
    out[out.size() - 2].second = out.back().second;
    out.pop_back();
  }
  return out;
}

template <class T>
std::size_t argmax_row(const Tensor<T>& m, std::size_t row) {
  const std::size_t c = m.cols();
  std::size_t best = 0;
  for (std::size_t j = 1; j < c; ++j)
    if (m[row * c + j] > m[row * c + best]) best = j;
  return best;
}

}  // namespace detail

// Classification fine-tuning. FULL updates every parameter touched by the
// topology's forward pass plus the head; LINEAR and MLP3 freeze the backbone
// (features are computed once and cached) and update only the head.
template <class T>
std::vector<FinetuneEpoch> finetune_run(ModelState<T>& state, const Dataset& train, const Dataset& test,
                                        const RunConfig& rc, long epochs,
                                        const std::function<void(const FinetuneEpoch&)>& on_epoch =
                                            nullptr) {
  if (train.size() == 0) throw ContractError("finetune: empty training set");
  const std::size_t n_classes = train.n_classes();
  for (const PointCloud& c : train.clouds)
    if (c.label < 0 || static_cast<std::size_t>(c.label) >= n_classes)
      throw ContractError("finetune: label out of range for declared class count");
  const Protocol protocol = rc.protocol_enum();
  const TopologySpec spec = topology_spec_from(rc);
  const ModelConfig& cfg = state.cfg;
  const std::size_t feat_w = feature_width(spec, cfg.dim);
  state.ensure_head(rc.seed, feat_w, rc.head_hidden, n_classes, protocol);

  const bool frozen = protocol != Protocol::FULL;
  auto trainable = frozen ? Session<T>::prefix("head.") : Session<T>::all();

  auto cloud_fps_seed = [&](bool is_test, std::size_t i) {
    return fold_seed(rc.seed, {is_test ? 0xFE57u : 0xF17Eu, i});
  };

  // Frozen protocols: backbone features are constant, compute them once.
  auto cache_features = [&](const Dataset& ds, bool is_test) {
    std::vector<Tensor<T>> feats(ds.size());
    for (std::size_t i = 0; i < ds.size(); ++i) {
      Tape<T> tape;
      Session<T> sess(tape, state.params, Session<T>::none());
      feats[i] = backbone_features(sess, cfg, spec, ds.clouds[i], cloud_fps_seed(is_test, i)).value();
    }
    return feats;
  };
  std::vector<Tensor<T>> train_feats, test_feats;
  if (frozen) {
    train_feats = cache_features(train, false);
    test_feats = cache_features(test, true);
  }

  auto batch_logits = [&](Session<T>& sess, const Dataset& ds, const std::vector<Tensor<T>>& cache,
                          const std::vector<std::size_t>& idx, std::size_t lo, std::size_t hi,
                          bool is_test) {
    std::vector<Var<T>> rows;
    rows.reserve(hi - lo);
    for (std::size_t i = lo; i < hi; ++i) {
      const std::size_t ci = idx[i];
      if (frozen)
        rows.push_back(as_row(sess.input(cache[ci])));
      else
        rows.push_back(as_row(
            backbone_features(sess, cfg, spec, ds.clouds[ci], cloud_fps_seed(is_test, ci))));
    }
    return head_forward(sess, concat_rows(rows), protocol);
  };

  auto evaluate = [&](const Dataset& ds, const std::vector<Tensor<T>>& cache, bool is_test) {
    if (ds.size() == 0) return 0.0;
    std::size_t correct = 0;
    std::vector<std::size_t> idx(ds.size());
    for (std::size_t i = 0; i < ds.size(); ++i) idx[i] = i;
    for (auto [lo, hi] : detail::batch_ranges(ds.size(), rc.batch_size, false)) {
      Tape<T> tape;
      Session<T> sess(tape, state.params, Session<T>::none(), /*training=*/false);
      Var<T> logits = batch_logits(sess, ds, cache, idx, lo, hi, is_test);
      for (std::size_t i = lo; i < hi; ++i)
        correct += detail::argmax_row(logits.value(), i - lo) ==
                   static_cast<std::size_t>(ds.clouds[idx[i]].label);
    }
    return static_cast<double>(correct) / static_cast<double>(ds.size());
  };

  AdamW<T> opt(0.9, 0.999, 1e-8, rc.weight_decay);
  const double base_lr = frozen ? rc.head_lr : rc.lr;
  const bool bn_batches = protocol != Protocol::LINEAR;
  const auto ranges = detail::batch_ranges(train.size(), rc.batch_size, bn_batches);
  LrSchedule schedule{base_lr, 0.0, 0, epochs * static_cast<long>(ranges.size())};

  std::vector<FinetuneEpoch> history;
  long step = 0;
  for (long epoch = 0; epoch < epochs; ++epoch) {
    std::vector<std::size_t> order(train.size());
    for (std::size_t i = 0; i < train.size(); ++i) order[i] = i;
    Rng shuffle_rng(fold_seed(rc.seed, {0xF7u, static_cast<std::uint64_t>(epoch)}));
    shuffle_rng.shuffle(order);

    double loss_sum = 0;
    for (auto [lo, hi] : ranges) {
      Rng drop_rng(fold_seed(rc.seed, {0xD0u, static_cast<std::uint64_t>(step)}));
      Tape<T> tape;
      Session<T> sess(tape, state.params, trainable, /*training=*/true, &drop_rng);
      Var<T> logits = batch_logits(sess, train, train_feats, order, lo, hi, false);
      std::vector<std::size_t> labels;
      labels.reserve(hi - lo);
      for (std::size_t i = lo; i < hi; ++i)
        labels.push_back(static_cast<std::size_t>(train.clouds[order[i]].label));
      Var<T> loss = cross_entropy(logits, labels);
      tape.backward(loss);
      opt.step(state.params, sess.gradients(), schedule.at(step));
      ++step;
      loss_sum += static_cast<double>(loss.value().item()) * static_cast<double>(hi - lo);
    }

    FinetuneEpoch row;
    row.epoch = epoch;
    row.train_loss = loss_sum / static_cast<double>(train.size());
    // Accuracies come from clean eval passes (dropout off, running BN stats).
    row.train_acc = evaluate(train, train_feats, false);
    row.test_acc = evaluate(test, test_feats, true);
    history.push_back(row);
    if (on_epoch) on_epoch(row);
  }
  return history;
}

// ---------------------------------------------------------------------------
// few-shot episodes
// ---------------------------------------------------------------------------

struct EpisodeSplit {
  std::vector<std::size_t> support_idx;
  std::vector<std::size_t> query_idx;
  std::vector<int> classes;  // original labels in episode order
};

// Label-stratified n-way sampling: each chosen class contributes exactly
// k_shot support and n_query query samples, disjoint by construction.
inline EpisodeSplit few_shot_episode(const Dataset& ds, std::size_t n_way, std::size_t k_shot,
                                     std::size_t n_query, std::uint64_t seed) {
  std::vector<std::vector<std::size_t>> by_class(ds.n_classes());
  for (std::size_t i = 0; i < ds.size(); ++i) by_class[ds.clouds[i].label].push_back(i);
  std::vector<int> eligible;
  for (std::size_t c = 0; c < by_class.size(); ++c)
    if (by_class[c].size() >= k_shot + n_query) eligible.push_back(static_cast<int>(c));
  if (eligible.size() < n_way)
    throw ContractError("few_shot_episode: only " + std::to_string(eligible.size()) +
                        " classes have k_shot + n_query samples");
  Rng rng(fold_seed(seed, {0xE915u}));
  rng.shuffle(eligible);
  EpisodeSplit split;
  for (std::size_t w = 0; w < n_way; ++w) {
    const int cls = eligible[w];
    split.classes.push_back(cls);
    auto& pool = by_class[cls];
    rng.shuffle(pool);
    for (std::size_t i = 0; i < k_shot; ++i) split.support_idx.push_back(pool[i]);
    for (std::size_t i = 0; i < n_query; ++i) split.query_idx.push_back(pool[k_shot + i]);
  }
  return split;
}

struct FewShotResult {
  double mean_acc = 0;
  double std_acc = 0;  // sample standard deviation over episodes
  std::vector<double> per_episode;
};

// Runs R independent episodes; each trains a fresh head (and, under FULL, a
// fresh copy of the backbone) on the support set and reports query accuracy.
template <class T>
FewShotResult few_shot_eval(const ModelState<T>& base, const Dataset& pool, const RunConfig& rc,
                            const std::function<void(std::size_t, double)>& on_episode = nullptr) {
  FewShotResult result;
  for (std::size_t e = 0; e < rc.episodes; ++e) {
    const EpisodeSplit split =
        few_shot_episode(pool, rc.n_way, rc.k_shot, rc.n_query, fold_seed(rc.seed, {0xE9u, e}));
    std::vector<int> remap(pool.n_classes(), -1);
    for (std::size_t w = 0; w < split.classes.size(); ++w) remap[split.classes[w]] = static_cast<int>(w);
    auto subset = [&](const std::vector<std::size_t>& idx, const char* tag) {
      Dataset ds;
      ds.name = pool.name + ":" + tag;
      ds.split = tag;
      for (std::size_t w = 0; w < split.classes.size(); ++w)
        ds.class_names.push_back(pool.class_names[split.classes[w]]);
      for (std::size_t i : idx) {
        PointCloud c = pool.clouds[i];
        c.label = remap[c.label];
        ds.clouds.push_back(std::move(c));
      }
      return ds;
    };
    const Dataset support = subset(split.support_idx, "support");
    const Dataset query = subset(split.query_idx, "query");
    ModelState<T> episode_state = base;
    RunConfig episode_rc = rc;
    episode_rc.seed = fold_seed(rc.seed, {0x5E7u, e});
    const auto history = finetune_run(episode_state, support, query, episode_rc, rc.finetune_epochs);
    const double acc = history.empty() ? 0.0 : history.back().test_acc;
    result.per_episode.push_back(acc);
    if (on_episode) on_episode(e, acc);
  }
  double mean = 0;
  for (double a : result.per_episode) mean += a;
  mean /= static_cast<double>(result.per_episode.size());
  double var = 0;
  for (double a : result.per_episode) var += (a - mean) * (a - mean);
  result.mean_acc = mean;
  result.std_acc = result.per_episode.size() > 1
                       ? std::sqrt(var / static_cast<double>(result.per_episode.size() - 1))
                       : 0.0;
  return result;
}

}  // namespace rae
