#include <gtest/gtest.h>

#include <random>

#include "mslam/keyframing.hpp"
#include "test_support.hpp"

namespace mslam {
namespace {

using fixtures::room_scene;

TEST(Keyframing, InsertionRule) {
  EXPECT_FALSE(should_insert_keyframe({0.5, 1000}, 0.33, 345));
  EXPECT_TRUE(should_insert_keyframe({0.32, 1000}, 0.33, 345));
  EXPECT_TRUE(should_insert_keyframe({0.5, 344}, 0.33, 345));
  EXPECT_FALSE(should_insert_keyframe({0.33, 345}, 0.33, 345));
}

TEST(Keyframing, DescriptorIsUnitNormAndConfidenceWeighted) {
  FeatureMap f(1, 2, 2);
  f.descriptor(0)[0] = 1.0;
  f.descriptor(1)[1] = 1.0;
  f.set_confidence(0, 3.0);
  f.set_confidence(1, 4.0);
  const auto d = compute_retrieval_descriptor(f);
  EXPECT_NEAR(d[0], 0.6, 1e-15);
  EXPECT_NEAR(d[1], 0.8, 1e-15);
  const auto z = compute_retrieval_descriptor(FeatureMap(2, 2, 3));
  EXPECT_EQ(z, std::vector<double>(3, 0.0));
}

TEST(Keyframing, RetrievalSeparatesViewpoints) {
  const auto scene = room_scene(40, 180.0);
  OraclePredictor a(scene, NoiseModel{0.01, 0.05, 0.0}, 1);
  OraclePredictor b(scene, NoiseModel{0.01, 0.05, 0.0}, 99);
  for (std::uint32_t i : {0u, 10u, 25u}) {
    const auto da = compute_retrieval_descriptor(a.monocular_init({1, i}).features);
    const auto db = compute_retrieval_descriptor(b.monocular_init({1, i}).features);
    EXPECT_GT(cosine_similarity(da, db), 0.99);
  }
  // 180 degrees apart: no shared surface.
  const auto d0 = compute_retrieval_descriptor(a.monocular_init({1, 0}).features);
  const auto d39 = compute_retrieval_descriptor(a.monocular_init({1, 39}).features);
  EXPECT_LT(cosine_similarity(d0, d39), 0.5);
}

TEST(Keyframing, RetrievalDatabaseQuery) {
  RetrievalDatabase db;
  auto unit = [](double angle) { return std::vector<double>{std::cos(angle), std::sin(angle)}; };
  db.add({1, 0}, unit(0.0));
  db.add({1, 1}, unit(0.1));
  db.add({1, 2}, unit(0.2));
  db.add({1, 3}, unit(0.3));
  db.add({2, 0}, unit(0.31));
  db.add({2, 1}, unit(1.5));
  const auto hits = db.query({1, 3}, unit(0.3), 3, 0.9);
  ASSERT_EQ(hits.size(), 3u);
  EXPECT_EQ(hits[0].id, (KeyframeId{2, 0}));
  EXPECT_EQ(hits[1].id, (KeyframeId{1, 1}));
  EXPECT_EQ(hits[2].id, (KeyframeId{1, 0}));
  for (const auto& h : hits) {
    EXPECT_NE(h.id, (KeyframeId{1, 3}));
    EXPECT_NE(h.id, (KeyframeId{1, 2}));
  }
  EXPECT_TRUE(db.query({1, 3}, unit(0.3), 3, 0.99999).empty());
  EXPECT_EQ(db.query({1, 3}, unit(0.3), 10, -1.0).size(), 4u);
}

TEST(Keyframing, RevisitedViewpointRanksFirst) {
  // 44 frames over 396 degrees: frame 40 revisits frame 0.
  const auto scene = room_scene(44, 396.0);
  OraclePredictor pred(scene, NoiseModel{0.01, 0.05, 0.0}, 5);
  RetrievalDatabase db;
  EXPECT_TRUE(db.query({1, 0}, std::vector<double>(24, 0.0), 3, 0.0).empty());
  for (std::uint32_t s = 0; s <= 9; ++s) {
    db.add({1, s}, compute_retrieval_descriptor(pred.monocular_init({1, 4 * s}).features));
  }
  const auto d = compute_retrieval_descriptor(pred.monocular_init({1, 40}).features);
  const auto hits = db.query({1, 10}, d, 3, 0.85);
  ASSERT_FALSE(hits.empty());
  EXPECT_EQ(hits[0].id, (KeyframeId{1, 0}));
  EXPECT_TRUE(db.query({1, 10}, d, 3, 1.0 + 1e-9).empty());
}

MatchSet n_matches(std::size_t n) {
  MatchSet m;
  for (std::uint32_t i = 0; i < n; ++i) m.matches.push_back({i, i, Vec2(i, 0), 1.0});
  return m;
}

TEST(Keyframing, EdgeGatingAndReplacement) {
  FactorGraph g;
  g.add_node({1, 0}, {});
  g.add_node({1, 1}, {});
  g.add_node({1, 2}, {});
  EXPECT_EQ(g.anchor, (KeyframeId{1, 0}));
  EXPECT_TRUE(g.add_edge({{1, 1}, {1, 0}, n_matches(5), EdgeKind::temporal}, 100));
  EXPECT_FALSE(g.add_edge({{1, 2}, {1, 0}, n_matches(99), EdgeKind::intra_loop}, 100));
  EXPECT_TRUE(g.add_edge({{1, 2}, {1, 0}, n_matches(100), EdgeKind::intra_loop}, 100));
  EXPECT_TRUE(g.add_edge({{1, 0}, {1, 2}, n_matches(150), EdgeKind::intra_loop}, 100));
  ASSERT_EQ(g.edges.size(), 2u);
  EXPECT_EQ(g.edges[1].matches.size(), 150u);
  EXPECT_EQ(g.edges[1].query, (KeyframeId{1, 0}));
  EXPECT_THROW(g.add_edge({{1, 5}, {1, 0}, n_matches(200), EdgeKind::intra_loop}, 100), LookupError);
  EXPECT_THROW(g.add_edge({{1, 1}, {1, 1}, n_matches(200), EdgeKind::intra_loop}, 100), ConfigError);
}

struct GraphFixture {
  SyntheticScene scene;
  std::vector<KeyframeId> ids;
  std::map<KeyframeId, CanonicalPointmap> canon;
  std::map<KeyframeId, SimilarityTransform> truth;
  FactorGraph graph;

  std::map<KeyframeId, const Pointmap*> points() const {
    std::map<KeyframeId, const Pointmap*> out;
    for (const auto& [id, c] : canon) out[id] = &c.points;
    return out;
  }
};

Edge make_edge(OraclePredictor& pred, KeyframeId q, std::uint32_t qf, KeyframeId r, std::uint32_t rf,
               EdgeKind kind) {
  const auto p = pred.predict({1, rf}, {1, qf});
  return {q, r, refine_with_features(match_rays(p.x_ii, p.x_ij), p.f_ii, p.f_ij, 5), kind};
}

GraphFixture graph_fixture(NoiseModel noise) {
  GraphFixture fx;
  fx.scene = room_scene(40, 120.0);
  OraclePredictor pred(fx.scene, noise, 4);
  const std::vector<std::uint32_t> frames{0, 4, 8, 12, 16};
  for (std::uint32_t s = 0; s < frames.size(); ++s) {
    const KeyframeId id{1, s};
    const auto m = pred.monocular_init({1, frames[s]});
    fx.ids.push_back(id);
    fx.canon[id] = {m.points, m.confidence};
    fx.truth[id] = fx.scene.pose({1, frames[s]});
    fx.graph.add_node(id, fx.truth[id]);
  }
  for (std::uint32_t s = 1; s < frames.size(); ++s) {
    fx.graph.add_edge(make_edge(pred, fx.ids[s], frames[s], fx.ids[s - 1], frames[s - 1], EdgeKind::temporal), 100);
  }
  fx.graph.add_edge(make_edge(pred, fx.ids[3], frames[3], fx.ids[1], frames[1], EdgeKind::intra_loop), 100);
  return fx;
}

double relative_error(const SimilarityTransform& a, const SimilarityTransform& b) {
  return (a.inverse() * b).log().norm();
}

TEST(Keyframing, GraphRecoversPerturbedPoses) {
  auto fx = graph_fixture(NoiseModel{});
  std::mt19937_64 rng(8);
  std::normal_distribution<double> g(0.0, 1.0);
  for (std::size_t s = 1; s < fx.ids.size(); ++s) {
    TangentVector t;
    for (int k = 0; k < 7; ++k) t(k) = 0.03 * g(rng);
    fx.graph.nodes[fx.ids[s]] = retract(t, fx.truth[fx.ids[s]]);
  }
  const SimilarityTransform anchor = fx.graph.nodes[fx.ids[0]];
  const auto res = optimize_graph(fx.graph, fx.points());
  EXPECT_GT(res.initial_energy, res.final_energy);
  for (std::size_t i = 1; i < res.energy_trace.size(); ++i) {
    EXPECT_LE(res.energy_trace[i], res.energy_trace[i - 1]);
  }
  const auto& a = fx.graph.nodes[fx.ids[0]];
  EXPECT_EQ(a.scale(), anchor.scale());
  EXPECT_EQ(a.translation(), anchor.translation());
  EXPECT_EQ(a.rotation().quaternion().coeffs(), anchor.rotation().quaternion().coeffs());
  for (std::size_t s = 1; s < fx.ids.size(); ++s) {
    EXPECT_LT(relative_error(fx.truth[fx.ids[s]], fx.graph.nodes[fx.ids[s]]), 1e-4) << s;
  }
}

TEST(Keyframing, NoiselessChainIsAlreadyOptimal) {
  auto fx = graph_fixture(NoiseModel{});
  const auto before = fx.graph.nodes;
  const auto res = optimize_graph(fx.graph, fx.points());
  // Only cells straddling creases carry residual energy at the truth.
  std::size_t matches = 0;
  for (const auto& e : fx.graph.edges) matches += std::min<std::size_t>(e.matches.size(), 1500);
  EXPECT_LT(res.initial_energy / static_cast<double>(matches), 1e-6);
  EXPECT_LE(res.final_energy, res.initial_energy);
  for (const auto& [id, pose] : before) EXPECT_LT(relative_error(pose, fx.graph.nodes[id]), 1e-4);
}

TEST(Keyframing, SingleNodeIsNoOp) {
  FactorGraph g;
  const SimilarityTransform t(2.0, Rotation::exp(Vec3(0.1, 0, 0)), Vec3(1, 2, 3));
  g.add_node({1, 0}, t);
  const auto res = optimize_graph(g, {});
  EXPECT_EQ(res.iterations, 0);
  EXPECT_EQ(g.nodes.begin()->second.translation(), t.translation());
}

double positions_ate(const std::map<KeyframeId, SimilarityTransform>& est,
                     const std::map<KeyframeId, SimilarityTransform>& truth) {
  Eigen::Matrix3Xd a(3, est.size()), b(3, est.size());
  int i = 0;
  for (const auto& [id, pose] : est) {
    a.col(i) = pose.translation();
    b.col(i++) = truth.at(id).translation();
  }
  const Eigen::Matrix4d m = Eigen::umeyama(a, b, true);
  const Eigen::Matrix3Xd aligned = (m.topLeftCorner<3, 3>() * a).colwise() + m.topRightCorner<3, 1>();
  return std::sqrt((aligned - b).colwise().squaredNorm().mean());
}

TEST(Keyframing, LoopEdgeCorrectsInjectedDrift) {
  const auto scene = room_scene(40, 360.0);
  OraclePredictor pred(scene, NoiseModel{}, 4);
  FactorGraph g;
  std::map<KeyframeId, CanonicalPointmap> canon;
  std::map<KeyframeId, SimilarityTransform> truth;
  const Vec7 drift = (Vec7() << 0.01, 0.0, -0.01, 0.004, 0.008, -0.003, 0.01).finished();
  SimilarityTransform chained;
  for (std::uint32_t s = 0; s < 10; ++s) {
    const KeyframeId id{1, s};
    const auto m = pred.monocular_init({1, 4 * s});
    canon[id] = {m.points, m.confidence};
    truth[id] = scene.pose({1, 4 * s});
    chained = s == 0 ? truth[id] : SimilarityTransform::exp(drift) * chained * (truth[{1, s - 1}].inverse() * truth[id]);
    g.add_node(id, chained);
    if (s > 0) g.add_edge(make_edge(pred, id, 4 * s, {1, s - 1}, 4 * (s - 1), EdgeKind::temporal), 100);
  }
  Edge loop = make_edge(pred, {1, 9}, 36, {1, 0}, 0, EdgeKind::intra_loop);
  ASSERT_TRUE(g.add_edge(loop, 100));
  std::map<KeyframeId, const Pointmap*> pts;
  for (const auto& [id, c] : canon) pts[id] = &c.points;
  FactorGraph loop_only = g;
  loop_only.edges = {loop};
  const double loop_before = graph_energy(loop_only, pts);
  const double ate_before = positions_ate(g.nodes, truth);
  optimize_graph(g, pts);
  loop_only.nodes = g.nodes;
  const double loop_after = graph_energy(loop_only, pts);
  const double ate_after = positions_ate(g.nodes, truth);
  EXPECT_LT(ate_after, ate_before);
  EXPECT_LT(ate_after, 1e-3);
  EXPECT_LT(10.0 * loop_after, loop_before);
}

TEST(Keyframing, GraphEnergyInvariantToGlobalSimilarity) {
  auto fx = graph_fixture(NoiseModel{0.02, 0.05, 0.0});
  const double e0 = graph_energy(fx.graph, fx.points());
  const SimilarityTransform w(1.7, Rotation::exp(Vec3(0.3, -0.2, 0.9)), Vec3(1, 2, 3));
  for (auto& [id, pose] : fx.graph.nodes) pose = w * pose;
  EXPECT_NEAR(graph_energy(fx.graph, fx.points()), e0, 1e-9 * std::max(1.0, e0));
}

TEST(Keyframing, GraphAnchorIsBitIdenticalUnderNoise) {
  auto fx = graph_fixture(NoiseModel{0.02, 0.05, 0.1});
  fx.graph.anchor = fx.ids[2];
  const SimilarityTransform before = fx.graph.nodes[fx.ids[2]];
  const auto res = optimize_graph(fx.graph, fx.points());
  const auto& after = fx.graph.nodes[fx.ids[2]];
  EXPECT_EQ(after.scale(), before.scale());
  EXPECT_EQ(after.translation(), before.translation());
  EXPECT_EQ(after.rotation().quaternion().coeffs(), before.rotation().quaternion().coeffs());
  EXPECT_LE(res.final_energy, res.initial_energy);
  for (std::size_t i = 1; i < res.energy_trace.size(); ++i) {
    EXPECT_LE(res.energy_trace[i], res.energy_trace[i - 1]);
  }
}

TEST(Keyframing, DisconnectedGraphThrows) {
  auto fx = graph_fixture(NoiseModel{});
  fx.graph.add_node({2, 0}, {});
  fx.canon[{2, 0}] = fx.canon[fx.ids[0]];
  EXPECT_THROW(optimize_graph(fx.graph, fx.points()), PartitionError);
  EXPECT_EQ(fx.graph.components().size(), 2u);
}

Submap sample_submap() {
  OraclePredictor pred(room_scene(), NoiseModel{0.01, 0.05, 0.1}, 2);
  Submap s;
  s.agent = 3;
  for (std::uint32_t i = 0; i < 2; ++i) {
    const auto m = pred.monocular_init({1, 5 * i});
    Keyframe kf;
    kf.id = {3, i};
    kf.frame = 5 * i;
    kf.canon = {m.points, m.confidence};
    kf.features = m.features;
    kf.pose = SimilarityTransform(1.0 + 0.1 * i, Rotation::exp(Vec3(0.1, 0.2, 0.3 * i)), Vec3(i, 2, 3));
    kf.descriptor = compute_retrieval_descriptor(kf.features);
    s.keyframes.push_back(std::move(kf));
  }
  s.frames.push_back({0, 0, {}});
  s.frames.push_back({3, 0, SimilarityTransform(1.01, Rotation::exp(Vec3(0.0, 0.05, 0.0)), Vec3(0.1, 0, 0))});
  return s;
}

TEST(Keyframing, SubmapRoundTrip) {
  const Submap s = sample_submap();
  const auto bytes = serialize_submap(s);
  const Submap t = deserialize_submap(bytes);
  ASSERT_EQ(t.agent, 3u);
  ASSERT_EQ(t.keyframes.size(), 2u);
  for (std::size_t i = 0; i < 2; ++i) {
    const auto& a = s.keyframes[i];
    const auto& b = t.keyframes[i];
    EXPECT_EQ(a.id, b.id);
    EXPECT_EQ(a.frame, b.frame);
    EXPECT_EQ(a.descriptor, b.descriptor);
    EXPECT_LT(relative_error(a.pose, b.pose), 1e-12);
    ASSERT_EQ(b.canon.points.valid_count(), a.canon.points.valid_count());
    for (std::size_t n = 0; n < a.canon.points.size(); ++n) {
      if (!a.canon.points.valid(n)) continue;
      EXPECT_LT((a.canon.points.point(n) - b.canon.points.point(n)).norm(), 1e-5);
    }
  }
  ASSERT_EQ(t.frames.size(), 2u);
  EXPECT_EQ(t.frames[1].frame, 3u);
  EXPECT_LT(relative_error(t.frames[1].relative, s.frames[1].relative), 1e-12);
  EXPECT_EQ(serialize_submap(t), bytes);
}

TEST(Keyframing, SubmapRejectsCorruptInput) {
  auto bytes = serialize_submap(sample_submap());
  EXPECT_THROW(deserialize_submap(std::span(bytes).first(bytes.size() - 1)), ParseError);
  auto extra = bytes;
  extra.push_back(0);
  EXPECT_THROW(deserialize_submap(extra), ParseError);
  auto magic = bytes;
  magic[0] = 'X';
  EXPECT_THROW(deserialize_submap(magic), ParseError);
  auto version = bytes;
  version[4] = 9;
  EXPECT_THROW(deserialize_submap(version), ParseError);
  auto agent = bytes;
  agent[8] = 4;  // submap agent no longer matches its keyframes
  EXPECT_THROW(deserialize_submap(agent), ParseError);
}

}  // namespace
}  // namespace mslam
