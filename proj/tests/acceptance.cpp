// Acceptance suite: one PASS/FAIL line per criterion, non-zero exit on any failure.

#include <unistd.h>

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <limits>
#include <numbers>
#include <random>
#include <string>
#include <vector>

#include "mslam/pipeline.hpp"
#include "test_support.hpp"

namespace {

using namespace mslam;
namespace fs = std::filesystem;

struct Outcome {
  bool pass = false;
  std::string detail;
};

struct Criterion {
  const char* name;
  double time_limit;  // seconds; infinity when unbounded
  std::function<Outcome()> run;
};

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

TangentVector random_tangent(std::mt19937_64& rng, double max_norm) {
  std::normal_distribution<double> n(0.0, 1.0);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  TangentVector tau;
  for (int i = 0; i < 7; ++i) tau(i) = n(rng);
  return tau.normalized() * (max_norm * u(rng));
}

std::vector<std::uint32_t> frame_range(std::uint32_t n) {
  std::vector<std::uint32_t> f(n);
  for (std::uint32_t i = 0; i < n; ++i) f[i] = i;
  return f;
}

Trajectory ground_truth(const SyntheticScene& scene, std::uint32_t agent) {
  Trajectory t;
  const auto& poses = scene.trajectories.at(agent);
  for (std::size_t i = 0; i < poses.size(); ++i) t.push_back(i / 30.0, poses[i]);
  return t;
}

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("mslam_acceptance_" + std::to_string(::getpid())) / name;
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

Outcome lie_group() {
  std::mt19937_64 rng(101);
  double roundtrip = 0.0;
  for (int i = 0; i < 1000; ++i) {
    const TangentVector tau = random_tangent(rng, 1.0);
    roundtrip = std::max(roundtrip, (log(exp(tau)) - tau).norm());
  }
  std::normal_distribution<double> n(0.0, 2.0);
  double homomorphism = 0.0;
  for (int i = 0; i < 100; ++i) {
    TangentVector ta = random_tangent(rng, 3.0), tb = random_tangent(rng, 3.0);
    ta(6) *= 0.3;
    tb(6) *= 0.3;
    const auto a = exp(ta), b = exp(tb);
    const auto ab = compose(a, b);
    for (int k = 0; k < 100; ++k) {
      const Vec3 x(n(rng), n(rng), n(rng));
      homomorphism = std::max(homomorphism, (act(ab, x) - act(a, act(b, x))).norm());
    }
  }
  double ray = 0.0;
  std::normal_distribution<double> g(0.0, 1.0);
  for (int i = 0; i < 10000; ++i) {
    const auto p = normalize_ray(Vec3(g(rng), g(rng), g(rng)));
    const auto q = normalize_ray(Vec3(g(rng), g(rng), g(rng)));
    ray = std::max(ray, std::abs(ray_sq_error(p, q) - 2.0 * (1.0 - p.dot(q))));
  }
  return {roundtrip < 1e-9 && homomorphism < 1e-9 && ray < 1e-12,
          fmt("exp/log %.2e, compose/act %.2e m, ray identity %.2e", roundtrip, homomorphism, ray)};
}

Outcome jacobian() {
  std::mt19937_64 rng(202);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  const double h = 1e-6;
  double worst = 0.0;
  for (int state = 0; state < 100; ++state) {
    TangentVector tau;
    for (int i = 0; i < 7; ++i) tau(i) = 0.8 * u(rng);
    const SimilarityTransform t = exp(tau);
    const Vec3 b(u(rng), u(rng), 2.0 + u(rng));
    const Vec3 a = t.act(b) + 0.1 * Vec3(u(rng), u(rng), u(rng));
    const double lambda = 0.03;
    const ResidualJacobian analytic = residual_jacobian(t.act(b), lambda);
    ResidualJacobian numeric;
    for (int k = 0; k < 7; ++k) {
      TangentVector d = TangentVector::Zero();
      d(k) = h;
      numeric.col(k) =
          (ray_residual(a, retract(d, t).act(b), lambda) - ray_residual(a, retract(-d, t).act(b), lambda)) / (2.0 * h);
    }
    worst = std::max(worst, (numeric - analytic).norm() / analytic.norm());
  }
  return {worst < 1e-5, fmt("max relative error %.2e over 100 states", worst)};
}

Outcome noiseless_single_agent() {
  const auto scene = fixtures::room_scene(200, 400.0);
  OraclePredictor pred(scene, NoiseModel{}, 1);
  const auto r = run_agent(pred, 1, frame_range(200), AgentConfig{});
  const double a = ate_rmse(r.trajectory, ground_truth(scene, 1));
  const bool ok = a < 1e-3 && r.stats.tracking_energy_monotone && r.stats.frames_tracked == 200;
  return {ok, fmt("ATE %.2e m, %zu keyframes, %zu loop edges, energy monotone: %s", a, r.stats.keyframes,
                  r.stats.loop_edges, r.stats.tracking_energy_monotone ? "yes" : "no")};
}

Outcome drift_reduction() {
  const auto scene = fixtures::room_scene(200, 400.0);
  int wins = 0;
  std::string detail;
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    double ates[2];
    for (int opt = 0; opt < 2; ++opt) {
      OraclePredictor pred(scene, NoiseModel{0.01, 0.05, 0.0}, seed);
      AgentConfig cfg;
      cfg.graph_optimization = opt == 1;
      cfg.loop_closure = opt == 1;
      ates[opt] = ate_rmse(run_agent(pred, 1, frame_range(200), cfg).trajectory, ground_truth(scene, 1));
    }
    wins += ates[1] < ates[0];
    detail += fmt("%s%llu: %.4f<%.4f", seed == 1 ? "" : ", ", static_cast<unsigned long long>(seed), ates[1], ates[0]);
  }
  return {wins == 5, fmt("%d/5 seeds improved (opt<no-opt ATE m) ", wins) + detail};
}

RunConfig two_agent_config(std::uint64_t seed, double sigma, const std::string& out) {
  RunConfig cfg = default_run_config();
  cfg.seed = seed;
  cfg.noise.depth_sigma = sigma;
  cfg.output_dir = out;
  return cfg;
}

Outcome two_agent_fusion() {
  int improved = 0, linked = 0, scaled = 0;
  std::string detail;
  double worst_scale = 0.0;
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    RunConfig cfg = two_agent_config(seed, 0.01, scratch("fusion_" + std::to_string(seed)).string());
    for (auto& a : cfg.scene->agents) {
      a.bias << 0.005, 0, 0, 0, 0.005, 0, 0;
      a.bias_max_frame_gap = 30;
      if (a.id == 2) a.scale = 1.05;
    }
    const SystemResult r = run_system(cfg);
    fs::remove_all(cfg.output_dir);
    if (!r.fusion || !r.fusion->fused) {
      detail += fmt("%s%llu: not fused", seed == 1 ? "" : ", ", static_cast<unsigned long long>(seed));
      continue;
    }
    const auto& f = *r.fusion;
    const std::size_t inter = f.edge_counts.contains(EdgeKind::inter_loop) ? f.edge_counts.at(EdgeKind::inter_loop) : 0;
    linked += inter >= 1;
    const double pre = r.metrics.at("ate.combined.pre_fusion");
    const double post = r.metrics.at("ate.combined");
    improved += post < pre;
    const double ratio = f.trajectories.at(2)[0].pose.scale() / f.trajectories.at(1)[0].pose.scale();
    const double err = std::abs(ratio * 1.05 - 1.0);
    worst_scale = std::max(worst_scale, err);
    scaled += err < 0.01;
    detail += fmt("%s%llu: %zu inter, %.4f->%.4f", seed == 1 ? "" : ", ", static_cast<unsigned long long>(seed), inter,
                  pre, post);
  }
  return {improved == 5 && linked == 5 && scaled == 5,
          fmt("inter-loop on %d/5, post<pre ATE on %d/5, scale within 1%% on %d/5 (worst %.3f%%); ", linked, improved,
              scaled, 100.0 * worst_scale) +
              detail};
}

Outcome fusion_oracle() {
  std::mt19937_64 rng(303);
  std::uniform_real_distribution<double> u(-2.0, 2.0);
  std::uniform_real_distribution<double> cdist(0.01, 3.0);
  std::uniform_int_distribution<int> ndist(1, 50);
  double worst = 0.0;
  for (int trial = 0; trial < 50; ++trial) {
    const int steps = ndist(rng);
    CanonicalPointmap canon{Pointmap(4, 5), ConfidenceMap(4, 5)};
    std::vector<Vec3> num(20, Vec3::Zero());
    std::vector<double> den(20, 0.0);
    for (int s = 0; s < steps; ++s) {
      Pointmap obs(4, 5);
      ConfidenceMap conf(4, 5);
      for (std::size_t i = 0; i < obs.size(); ++i) {
        obs.set(i, Vec3(u(rng), u(rng), u(rng)));
        conf[i] = cdist(rng);
      }
      TangentVector tau;
      for (int k = 0; k < 7; ++k) tau(k) = u(rng);
      tau(6) *= 0.1;
      const SimilarityTransform t = exp(tau);
      canon = fuse_canonical(canon, obs, conf, t);
      for (std::size_t i = 0; i < obs.size(); ++i) {
        num[i] += conf[i] * t.act(obs.point(i));
        den[i] += conf[i];
      }
    }
    for (std::size_t i = 0; i < num.size(); ++i) {
      worst = std::max(worst, (canon.points.point(i) - num[i] / den[i]).norm());
    }
  }
  return {worst < 1e-9, fmt("max deviation %.2e m over 50 sequences of 1..50 steps", worst)};
}

Outcome metrics_suite() {
  std::mt19937_64 rng(404);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  auto cloud = [&](int n, double spread) {
    PointCloud c;
    for (int i = 0; i < n; ++i) c.points.emplace_back(spread * u(rng), spread * u(rng), spread * u(rng));
    return c;
  };
  // chamfer identity
  const PointCloud a = cloud(2000, 1.0), b = cloud(1500, 1.0);
  const auto m = geometry_metrics(a, b, 0.5);
  const bool chamfer_ok = m.chamfer == (m.accuracy + m.completion) / 2.0;

  // planted outlier
  PointCloud grid;
  for (int i = 0; i <= 20; ++i) {
    for (int j = 0; j <= 20; ++j) grid.points.emplace_back(0.05 * i, 0.05 * j, 0.0);
  }
  PointCloud planted = grid;
  planted.points.emplace_back(0.5, 0.5, 10.0);
  const auto mo = geometry_metrics(planted, grid, 0.5);
  const bool outlier_ok = mo.accuracy == 0.0 && mo.completion == 0.0;

  // nearest neighbours
  const KdTree tree(a.points);
  bool nn_ok = true;
  for (const auto& q : b.points) {
    double best = std::numeric_limits<double>::infinity();
    std::uint32_t bi = 0;
    for (std::uint32_t i = 0; i < a.points.size(); ++i) {
      const double d = (a.points[i] - q).squaredNorm();
      if (d < best) best = d, bi = i;
    }
    const auto hit = tree.nearest(q);
    nn_ok = nn_ok && hit.sq_dist == best && hit.index == bi;
  }

  // ICP on a closed ellipsoid
  PointCloud ell;
  const double golden = std::numbers::pi * (3.0 - std::sqrt(5.0));
  for (int i = 0; i < 5000; ++i) {
    const double y = 1.0 - 2.0 * (i + 0.5) / 5000;
    const double r = std::sqrt(1.0 - y * y);
    ell.points.emplace_back(r * std::cos(golden * i), 0.7 * y, 0.5 * r * std::sin(golden * i));
  }
  const Vec3 shift = Vec3(0.03, -0.02, 0.035).normalized() * 0.05;
  const auto icp = icp_align(ell, ell.transformed(SimilarityTransform(1.0, Rotation(), shift)));
  const double icp_err = (icp.transform.translation() - shift).norm();

  return {chamfer_ok && outlier_ok && nn_ok && icp_err < 1e-6,
          fmt("chamfer identity %s, 10 m outlier excluded %s, NN == brute force %s, ICP error %.2e m",
              chamfer_ok ? "yes" : "no", outlier_ok ? "yes" : "no", nn_ok ? "yes" : "no", icp_err)};
}

Outcome dense_geometry() {
  const RunConfig cfg = two_agent_config(1, 0.0, scratch("geometry").string());
  const SystemResult r = run_system(cfg);
  fs::remove_all(cfg.output_dir);
  if (!r.metrics.contains("geometry.chamfer")) return {false, "no geometry metrics produced"};
  const double c = r.metrics.at("geometry.chamfer");
  return {c < 0.01, fmt("chamfer %.5f m (accuracy %.5f, completion %.5f)", c, r.metrics.at("geometry.accuracy"),
                        r.metrics.at("geometry.completion"))};
}

Outcome determinism() {
  const RunConfig a = two_agent_config(7, 0.01, scratch("det_a").string());
  RunConfig b = a;
  b.output_dir = scratch("det_b").string();
  run_system(a);
  run_system(b);
  int same = 0, total = 0;
  for (const char* f : {"agent_1.tum", "agent_2.tum", "agent_1.ply", "agent_2.ply", "global.ply"}) {
    ++total;
    const fs::path pa = fs::path(a.output_dir) / f, pb = fs::path(b.output_dir) / f;
    if (fs::exists(pa) && fs::exists(pb) && io::read_file(pa.string()) == io::read_file(pb.string()) &&
        fs::file_size(pa) > 0) {
      ++same;
    }
  }
  fs::remove_all(a.output_dir);
  fs::remove_all(b.output_dir);
  return {same == total, fmt("%d/%d TUM/PLY files byte-identical", same, total)};
}

}  // namespace

int main() {
  const double inf = std::numeric_limits<double>::infinity();
  const std::vector<Criterion> criteria{
      {"Lie-group suite", 5.0, lie_group},
      {"Tracking Jacobian vs central differences", 10.0, jacobian},
      {"Noiseless single-agent run", 60.0, noiseless_single_agent},
      {"Drift reduction with local graph optimization", 300.0, drift_reduction},
      {"Two-agent fusion", 300.0, two_agent_fusion},
      {"Fusion oracle", inf, fusion_oracle},
      {"Metrics suite", inf, metrics_suite},
      {"Dense-geometry sanity", 300.0, dense_geometry},
      {"Determinism", inf, determinism},
  };
  int failed = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    const auto& c = criteria[i];
    const auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = c.run();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    const bool in_time = secs < c.time_limit;
    const bool pass = o.pass && in_time;
    failed += !pass;
    std::string limit = std::isinf(c.time_limit) ? "" : fmt(" (limit %.0f s)", c.time_limit);
    std::printf("%s [%zu] %s: %s; %.1f s%s%s\n", pass ? "PASS" : "FAIL", i + 1, c.name, o.detail.c_str(), secs,
                limit.c_str(), in_time ? "" : " TOO SLOW");
    std::fflush(stdout);
  }
  fs::remove_all(fs::temp_directory_path() / ("mslam_acceptance_" + std::to_string(::getpid())));
  std::printf("%zu/%zu criteria passed\n", criteria.size() - failed, criteria.size());
  return failed == 0 ? 0 : 1;
}
