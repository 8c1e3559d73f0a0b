#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <set>

#include "rae/finetune.hpp"

using namespace rae;

namespace {

RunConfig small_rc() {
  RunConfig rc;
  rc.model.dim = 16;
  rc.model.heads = 2;
  rc.model.enc_depth = 2;
  rc.model.reg_depth = 1;
  rc.model.dec_depth = 1;
  rc.model.patch_count = 8;
  rc.model.neighbors = 6;
  rc.model.mask_ratio = 0.5;
  rc.data.points = 64;
  rc.batch_size = 8;
  rc.head_hidden = 24;
  rc.seed = 5;
  return rc;
}

ModelState<double> small_state(const RunConfig& rc, std::uint64_t seed = 3) {
  ModelState<double> state;
  state.cfg = rc.model;
  state.init(seed);
  return state;
}

Dataset two_class(std::size_t per_class, const char* split) {
  return make_synthetic_dataset({ShapeClass::sphere, ShapeClass::plane}, per_class, 64, 0.01, 21, split);
}

}  // namespace

TEST_CASE("backbone_features: widths per topology and combine op") {
  RunConfig rc = small_rc();
  auto state = small_state(rc);
  const PointCloud cloud = gen_shape(ShapeClass::torus, 64, 0.01, 2);
  const std::size_t d = rc.model.dim;

  auto width_of = [&](const std::string& topo, const std::string& comb) {
    RunConfig r = rc;
    r.topology = topo;
    r.combine = comb;
    const TopologySpec spec = topology_spec_from(r);
    Tape<double> tape;
    Session<double> sess(tape, state.params, Session<double>::none());
    Var<double> f = backbone_features(sess, rc.model, spec, cloud, 7);
    CHECK(f.value().size() == feature_width(spec, d));
    return f.value().size();
  };
  CHECK(width_of("a", "concat") == 2 * d);
  CHECK(width_of("b", "concat") == 2 * d);
  CHECK(width_of("c", "concat") == 2 * d);
  CHECK(width_of("d", "concat") == 4 * d);
  CHECK(width_of("d", "add") == 2 * d);
}

TEST_CASE("backbone_features: variant c invariant to stream concat order of tokens") {
  // Pooling over the concatenated stream ignores token order; swap the two
  // streams and compare to rounding noise.
  RunConfig rc = small_rc();
  auto state = small_state(rc);
  const PointCloud cloud = gen_shape(ShapeClass::cube, 64, 0.01, 4);
  const TopologySpec spec = topology_spec_from(rc);

  Tape<double> tape;
  Session<double> sess(tape, state.params, Session<double>::none());
  const PatchSet patches = build_patches(cloud, rc.model, 7);
  TokenSet<double> enc = encode(sess, rc.model, embed_patches(sess, rc.model, patches));
  const auto qidx = farthest_point_sample(cloud, spec.virtual_queries, fold_seed(7, {0xBEEFu}));
  Tensor<double> qpos({spec.virtual_queries, 3});
  for (std::size_t i = 0; i < spec.virtual_queries; ++i)
    for (std::size_t dd = 0; dd < 3; ++dd) qpos[i * 3 + dd] = cloud.points[qidx[i]][dd];
  TokenSet<double> pred = regress(sess, rc.model, enc, qpos);
  Var<double> fwd_order = pool_concat(concat_rows({enc.tokens, pred.tokens}));
  Var<double> rev_order = pool_concat(concat_rows({pred.tokens, enc.tokens}));
  CHECK(max_abs_diff(fwd_order.value(), rev_order.value()) < 1e-12);
}

TEST_CASE("backbone_features: identical virtual query positions collapse to one token") {
  // All-equal query positions + the shared mask query mean every predicted
  // token is identical, so pooling equals the single-token case.
  RunConfig rc = small_rc();
  auto state = small_state(rc);
  const PointCloud cloud = gen_shape(ShapeClass::sphere, 64, 0.0, 6);

  Tape<double> tape;
  Session<double> sess(tape, state.params, Session<double>::none());
  const PatchSet patches = build_patches(cloud, rc.model, 7);
  TokenSet<double> enc = encode(sess, rc.model, embed_patches(sess, rc.model, patches));
  Tensor<double> same({4, 3}), one({1, 3});
  for (std::size_t i = 0; i < 4; ++i)
    for (std::size_t d = 0; d < 3; ++d) same[i * 3 + d] = cloud.points[11][d];
  for (std::size_t d = 0; d < 3; ++d) one[d] = cloud.points[11][d];
  Var<double> pooled_many = pool_concat(regress(sess, rc.model, enc, same).tokens);
  Var<double> pooled_one = pool_concat(regress(sess, rc.model, enc, one).tokens);
  CHECK(max_abs_diff(pooled_many.value(), pooled_one.value()) < 1e-12);
}

TEST_CASE("finetune: LINEAR freezes every non-head parameter bit-exactly") {
  RunConfig rc = small_rc();
  rc.protocol = "LINEAR";
  rc.topology = "b";
  auto state = small_state(rc);
  const Dataset train = two_class(8, "train");
  const Dataset test = two_class(4, "test");

  const std::uint64_t backbone_before = state.params.checksum();
  const auto history = finetune_run(state, train, test, rc, 3);
  CHECK(history.size() == 3);

  // Re-checksum everything except head parameters.
  ParamStore<double> non_head;
  for (const auto& name : state.params.names())
    if (name.rfind("head.", 0) != 0) non_head.add(name, state.params.at(name));
  ModelState<double> fresh_state = small_state(rc);
  CHECK(non_head.checksum() == fresh_state.params.checksum());
  (void)backbone_before;
}

TEST_CASE("finetune: MLP3 freezes the backbone; FULL moves it") {
  RunConfig rc = small_rc();
  rc.protocol = "MLP3";
  auto state = small_state(rc);
  const Dataset train = two_class(8, "train");
  const Dataset test = two_class(4, "test");
  finetune_run(state, train, test, rc, 2);
  ModelState<double> fresh = small_state(rc);
  for (const auto& name : fresh.params.names())
    if (name.rfind("head.", 0) != 0)
      CHECK(bitwise_equal(state.params.at(name), fresh.params.at(name)));

  RunConfig rc_full = small_rc();
  rc_full.protocol = "FULL";
  auto state_full = small_state(rc_full);
  finetune_run(state_full, train, test, rc_full, 2);
  ModelState<double> fresh2 = small_state(rc_full);
  CHECK(!bitwise_equal(state_full.params.at("enc.b0.attn.q.w"), fresh2.params.at("enc.b0.attn.q.w")));
}

TEST_CASE("finetune: FULL on separable two-class data reaches 100% train accuracy") {
  RunConfig rc = small_rc();
  rc.protocol = "FULL";
  rc.topology = "b";
  rc.lr = 5e-4;
  auto state = small_state(rc);
  const Dataset train = two_class(10, "train");
  const Dataset test = two_class(4, "test");
  const auto history = finetune_run(state, train, test, rc, 50);
  REQUIRE(history.size() == 50);
  bool hit = false;
  for (const auto& row : history) hit = hit || row.train_acc == 1.0;
  CHECK(hit);
  CHECK(history.size() == 50);  // metrics history length == epochs
}

TEST_CASE("finetune: label/class-count mismatch is a contract error") {
  RunConfig rc = small_rc();
  auto state = small_state(rc);
  Dataset train = two_class(4, "train");
  train.clouds[0].label = 7;  // outside declared class set
  CHECK_THROWS_AS(finetune_run(state, train, two_class(2, "test"), rc, 1), ContractError);
}

TEST_CASE("few_shot_episode: arithmetic, disjointness, stratification, determinism") {
  const Dataset pool = make_synthetic_dataset(
      {ShapeClass::sphere, ShapeClass::cube, ShapeClass::torus, ShapeClass::cylinder,
       ShapeClass::cone, ShapeClass::plane},
      25, 64, 0.01, 9, "train");

  const EpisodeSplit ep = few_shot_episode(pool, 5, 10, 10, 77);
  CHECK(ep.support_idx.size() == 50);  // 5-way 10-shot
  CHECK(ep.query_idx.size() == 50);
  std::set<std::size_t> support(ep.support_idx.begin(), ep.support_idx.end());
  for (std::size_t q : ep.query_idx) CHECK(support.count(q) == 0);

  // Stratified: each chosen class contributes exactly k + q samples.
  std::map<int, int> counts;
  for (std::size_t i : ep.support_idx) counts[pool.clouds[i].label]++;
  for (std::size_t i : ep.query_idx) counts[pool.clouds[i].label]++;
  CHECK(counts.size() == 5);
  for (const auto& [cls, n] : counts) CHECK(n == 20);

  const EpisodeSplit again = few_shot_episode(pool, 5, 10, 10, 77);
  CHECK(again.support_idx == ep.support_idx);
  CHECK(again.query_idx == ep.query_idx);

  CHECK_THROWS_AS(few_shot_episode(pool, 5, 20, 10, 1), ContractError);
}

TEST_CASE("few_shot_eval: summary over episodes") {
  RunConfig rc = small_rc();
  rc.protocol = "LINEAR";
  rc.topology = "d";
  rc.combine = "add";
  rc.n_way = 2;
  rc.k_shot = 5;
  rc.n_query = 5;
  rc.episodes = 3;
  rc.finetune_epochs = 5;
  auto state = small_state(rc);
  const Dataset pool = make_synthetic_dataset({ShapeClass::sphere, ShapeClass::cube, ShapeClass::plane},
                                              12, 64, 0.01, 4, "train");
  const FewShotResult result = few_shot_eval(state, pool, rc);
  CHECK(result.per_episode.size() == 3);
  CHECK(result.mean_acc >= 0.0);
  CHECK(result.mean_acc <= 1.0);
  CHECK(result.std_acc >= 0.0);
}
