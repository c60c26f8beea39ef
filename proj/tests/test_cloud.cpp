#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include "spreg/cloud.hpp"
#include "spreg/io.hpp"
#include "spreg/metrics.hpp"
#include "test_support.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>

using namespace spreg;
using spreg::test::random_points;
using spreg::test::random_transform;

namespace {

PointCloud cube_corners() {
  Points p(8, 3);
  int r = 0;
  for (int x = 0; x <= 1; ++x)
    for (int y = 0; y <= 1; ++y)
      for (int z = 0; z <= 1; ++z) p.row(r++) << x, y, z;
  return PointCloud(p);
}

std::vector<std::pair<int, double>> brute_knn(const Points& pts,
                                              const Vec3& query, int k) {
  std::vector<std::pair<double, int>> all;
  for (Index i = 0; i < pts.rows(); ++i)
    all.emplace_back((pts.row(i).transpose() - query).squaredNorm(),
                     static_cast<int>(i));
  std::sort(all.begin(), all.end());
  all.resize(std::min<size_t>(static_cast<size_t>(k), all.size()));
  std::vector<std::pair<int, double>> out;
  for (const auto& [d2, i] : all) out.emplace_back(i, std::sqrt(d2));
  return out;
}

}  // namespace

TEST_CASE("voxel_downsample: spec examples") {
  const PointCloud cube = cube_corners();

  SUBCASE("one voxel swallows the cube") {
    const PointCloud out = voxel_downsample(cube, 2.0);
    REQUIRE(out.size() == 1);
    CHECK((Vec3(out.points.row(0)) - Vec3(0.5, 0.5, 0.5)).norm() < 1e-15);
  }
  SUBCASE("one point per voxel passes through") {
    const PointCloud out = voxel_downsample(cube, 0.5);
    REQUIRE(out.size() == 8);
    // Output is cell-sorted; compare as sets.
    for (Index i = 0; i < 8; ++i) {
      bool found = false;
      for (Index j = 0; j < 8; ++j)
        if ((cube.points.row(i) - out.points.row(j)).norm() == 0.0) found = true;
      CHECK(found);
    }
  }
  SUBCASE("empty cloud") {
    CHECK(voxel_downsample(PointCloud{}, 1.0).empty());
  }
  SUBCASE("non-positive voxel size") {
    CHECK_THROWS_AS(voxel_downsample(cube, 0.0), ParameterError);
    CHECK_THROWS_AS(voxel_downsample(cube, -1.0), ParameterError);
  }
  SUBCASE("idempotent once each voxel holds one point") {
    Xoshiro256 rng(4);
    const PointCloud cloud(random_points(500, rng, 20.0));
    const PointCloud once = voxel_downsample(cloud, 1.7);
    const PointCloud twice = voxel_downsample(once, 1.7);
    REQUIRE(once.size() == twice.size());
    CHECK((once.points - twice.points).cwiseAbs().maxCoeff() == 0.0);
  }
  SUBCASE("attributes are averaged") {
    PointCloud c = cube_corners();
    c.attributes.resize(8);
    for (int i = 0; i < 8; ++i) c.attributes[i] = i;
    const PointCloud out = voxel_downsample(c, 2.0);
    CHECK(out.attributes[0] == doctest::Approx(3.5));
  }
}

TEST_CASE("knn: spec examples and brute-force equivalence") {
  SUBCASE("self match") {
    Xoshiro256 rng(5);
    const Points pts = random_points(64, rng);
    const SpatialIndex index{pts};
    const auto r = index.knn(pts.row(17), 1);
    CHECK(r[0].first == 17);
    CHECK(r[0].second == 0.0);
  }
  SUBCASE("1-d line instance") {
    Points pts(3, 3);
    pts << 0, 0, 0, 1, 0, 0, 3, 0, 0;
    const SpatialIndex index{pts};
    const auto r = index.knn({0.9, 0, 0}, 2);
    REQUIRE(r.size() == 2);
    CHECK(r[0].first == 1);
    CHECK(r[0].second == doctest::Approx(0.1));
    CHECK(r[1].first == 0);
    CHECK(r[1].second == doctest::Approx(0.9));
  }
  SUBCASE("k larger than the cloud") {
    Points pts(3, 3);
    pts << 0, 0, 0, 1, 0, 0, 3, 0, 0;
    const SpatialIndex index{pts};
    CHECK(index.knn({0, 0, 0}, 10).size() == 3);
  }
  SUBCASE("empty index is a state error") {
    SpatialIndex index;
    CHECK_THROWS_AS(index.knn({0, 0, 0}, 1), StateError);
  }
  SUBCASE("matches brute force on 1000 random clouds") {
    Xoshiro256 rng(6);
    for (int trial = 0; trial < 1000; ++trial) {
      const Index n = 8 + static_cast<Index>(rng.below(120));
      // Quantized coordinates force plenty of exact distance ties.
      Points pts(n, 3);
      for (Index i = 0; i < n; ++i)
        for (int c = 0; c < 3; ++c)
          pts(i, c) = static_cast<double>(rng.below(12)) * 0.5;
      const SpatialIndex index{pts};
      const Vec3 query(static_cast<double>(rng.below(12)) * 0.5,
                       static_cast<double>(rng.below(12)) * 0.5,
                       rng.uniform(-1, 7));
      const int k = 1 + static_cast<int>(rng.below(9));
      const auto got = index.knn(query, k);
      const auto want = brute_knn(pts, query, k);
      REQUIRE(got.size() == want.size());
      for (size_t i = 0; i < got.size(); ++i) {
        CHECK(got[i].first == want[i].first);
        CHECK(got[i].second == doctest::Approx(want[i].second).epsilon(1e-12));
      }
    }
  }
  SUBCASE("radius search equals brute force") {
    Xoshiro256 rng(7);
    const Points pts = random_points(200, rng, 5.0);
    const SpatialIndex index{pts};
    for (int trial = 0; trial < 50; ++trial) {
      const Vec3 q = random_points(1, rng, 5.0).row(0);
      const double radius = rng.uniform(0.5, 4.0);
      const auto got = index.radius_search(q, radius);
      std::vector<std::pair<int, double>> want;
      for (Index i = 0; i < pts.rows(); ++i) {
        const double d = (pts.row(i).transpose() - q).norm();
        if (d <= radius) want.emplace_back(static_cast<int>(i), d);
      }
      std::sort(want.begin(), want.end(), [](const auto& a, const auto& b) {
        return a.second != b.second ? a.second < b.second : a.first < b.first;
      });
      REQUIRE(got.size() == want.size());
      for (size_t i = 0; i < got.size(); ++i) CHECK(got[i].first == want[i].first);
    }
  }
}

TEST_CASE("apply_transform") {
  SUBCASE("identity") {
    const PointCloud c = cube_corners();
    const PointCloud out = apply_transform(c, RigidTransform::identity());
    CHECK((out.points - c.points).cwiseAbs().maxCoeff() == 0.0);
  }
  SUBCASE("90 degrees about z") {
    Points p(1, 3);
    p << 1, 0, 0;
    const auto T = RigidTransform::from_yaw_pitch_roll(M_PI / 2, 0, 0);
    const Points out = apply_transform(p, T);
    CHECK((Vec3(out.row(0)) - Vec3(0, 1, 0)).norm() < 1e-15);
  }
  SUBCASE("compose with inverse returns the original") {
    Xoshiro256 rng(8);
    const PointCloud c(random_points(100, rng));
    const RigidTransform T = random_transform(rng);
    const PointCloud back = apply_transform(apply_transform(c, T), T.inverse());
    CHECK((back.points - c.points).cwiseAbs().maxCoeff() < 1e-9);
  }
  SUBCASE("isometry: pairwise distances preserved") {
    Xoshiro256 rng(9);
    for (int trial = 0; trial < 20; ++trial) {
      const Points p = random_points(40, rng);
      const RigidTransform T = random_transform(rng);
      const Points moved = apply_transform(p, T);
      for (Index i = 0; i < p.rows(); i += 7)
        for (Index j = 0; j < p.rows(); j += 5) {
          const double before = (p.row(i) - p.row(j)).norm();
          const double after = (moved.row(i) - moved.row(j)).norm();
          CHECK(std::abs(before - after) < 1e-9);
        }
    }
  }
  SUBCASE("attributes preserved") {
    PointCloud c = cube_corners();
    c.attributes = Vector::LinSpaced(8, 0, 7);
    const PointCloud out = apply_transform(c, RigidTransform::from_axis_angle(
                                                  {0, 0, 1}, 0.3, {1, 2, 3}));
    CHECK(out.attributes == c.attributes);
  }
}

TEST_CASE("weighted_procrustes") {
  Xoshiro256 rng(10);

  SUBCASE("identity on identical sets") {
    const Points p = random_points(20, rng);
    const auto T = weighted_procrustes(p, p, Vector::Ones(20));
    CHECK((T.rotation - Mat3::Identity()).cwiseAbs().maxCoeff() < 1e-12);
    CHECK(T.translation.norm() < 1e-12);
  }
  SUBCASE("exact recovery of random transforms") {
    for (int trial = 0; trial < 200; ++trial) {
      const Index n = 3 + static_cast<Index>(rng.below(40));
      const Points src = random_points(n, rng);
      const RigidTransform T = random_transform(rng);
      const Points tgt = apply_transform(src, T);
      Vector w(n);
      for (Index i = 0; i < n; ++i) w(i) = rng.uniform(0.1, 2.0);
      const RigidTransform est = weighted_procrustes(src, tgt, w);
      CHECK(rotation_error_stable_deg(est.rotation, T.rotation) < 1e-7);
      CHECK((est.translation - T.translation).norm() < 1e-9);
      CHECK(est.valid(1e-9));
    }
  }
  SUBCASE("collinear points are degenerate") {
    Points src(5, 3), tgt(5, 3);
    for (int i = 0; i < 5; ++i) {
      src.row(i) << i, 2.0 * i, -i;
      tgt.row(i) << i, 2.0 * i, -i;
    }
    CHECK_THROWS_AS(weighted_procrustes(src, tgt, Vector::Ones(5)),
                    DegenerateGeometryError);
  }
  SUBCASE("contract errors") {
    const Points p = random_points(2, rng);
    CHECK_THROWS_AS(weighted_procrustes(p, p, Vector::Ones(2)), ContractError);
    const Points p3 = random_points(3, rng);
    CHECK_THROWS_AS(weighted_procrustes(p3, p3, Vector::Zero(3)), ContractError);
  }
}

TEST_CASE("icp_refine") {
  Xoshiro256 rng(11);
  // A structured cloud with enough shape to lock all six degrees of freedom.
  Points base = random_points(400, rng, 8.0);
  for (Index i = 0; i < 100; ++i) base(i, 2) = 0.0;
  const PointCloud source{base};

  SUBCASE("construction oracle: recovers a known transform") {
    const RigidTransform T_true = RigidTransform::from_yaw_pitch_roll(
        0.4, 0.1, -0.05, Vec3(1.0, -2.0, 0.5));
    const PointCloud target = apply_transform(source, T_true);
    const RigidTransform init = RigidTransform::from_yaw_pitch_roll(
        0.4 + 0.04, 0.1 - 0.03, -0.05, Vec3(1.3, -1.8, 0.6));
    const IcpResult r = icp_refine(source, target, init, 50, 1.0);
    CHECK(!r.no_progress);
    CHECK(rotation_error_deg(r.transform.rotation, T_true.rotation) < 0.01);
    CHECK((r.transform.translation - T_true.translation).norm() < 1e-3);
  }
  SUBCASE("fixed point: identical clouds from identity") {
    const IcpResult r =
        icp_refine(source, source, RigidTransform::identity(), 50, 1.0);
    CHECK((r.transform.rotation - Mat3::Identity()).cwiseAbs().maxCoeff() < 1e-9);
    CHECK(r.transform.translation.norm() < 1e-9);
  }
  SUBCASE("disjoint clouds return init flagged") {
    PointCloud far = source;
    far.points.col(0).array() += 1000.0;
    const RigidTransform init = RigidTransform::from_axis_angle({0, 0, 1}, 0.1);
    const IcpResult r = icp_refine(source, far, init, 20, 1.0);
    CHECK(r.no_progress);
    CHECK((r.transform.rotation - init.rotation).cwiseAbs().maxCoeff() == 0.0);
  }
  SUBCASE("residual history is non-increasing") {
    const RigidTransform T_true =
        RigidTransform::from_yaw_pitch_roll(0.2, 0.0, 0.0, Vec3(0.5, 0.5, 0));
    const PointCloud target = apply_transform(source, T_true);
    const IcpResult r =
        icp_refine(source, target, RigidTransform::identity(), 50, 2.0);
    for (size_t i = 1; i < r.residual_history.size(); ++i)
      CHECK(r.residual_history[i] <= r.residual_history[i - 1] + 1e-15);
  }
}

TEST_CASE("file formats") {
  namespace fs = std::filesystem;
  const std::string dir = (fs::temp_directory_path() / "spreg_io_test").string();
  fs::create_directories(dir);
  Xoshiro256 rng(12);

  SUBCASE("KITTI bin round trip and length check") {
    PointCloud c(random_points(50, rng));
    c.attributes = Vector::LinSpaced(50, 0, 1);
    const std::string path = dir + "/scan.bin";
    write_kitti_bin(path, c);
    const PointCloud back = read_kitti_bin(path);
    REQUIRE(back.size() == 50);
    CHECK((back.points - c.points).cwiseAbs().maxCoeff() < 1e-5);
    CHECK(back.has_attributes());

    std::ofstream bad(dir + "/bad.bin", std::ios::binary);
    bad.write("12345", 5);
    bad.close();
    CHECK_THROWS_AS(read_kitti_bin(dir + "/bad.bin"), IoError);
  }

  SUBCASE("PLY ascii and binary round trips") {
    PointCloud c(random_points(30, rng));
    c.attributes = Vector::LinSpaced(30, -1, 1);
    for (const bool binary : {false, true}) {
      const std::string path = dir + (binary ? "/c_b.ply" : "/c_a.ply");
      write_ply(path, c, binary);
      const PointCloud back = read_ply(path);
      REQUIRE(back.size() == 30);
      CHECK((back.points - c.points).cwiseAbs().maxCoeff() < 1e-5);
      REQUIRE(back.has_attributes());
      CHECK((back.attributes - c.attributes).cwiseAbs().maxCoeff() < 1e-6);
    }
  }

  SUBCASE("skeleton PLY carries a radius property") {
    const Points pts = random_points(5, rng);
    const Vector radii = Vector::LinSpaced(5, 0.1, 0.5);
    const std::string path = dir + "/skel.ply";
    write_skeleton_ply(path, pts, radii);
    std::ifstream in(path);
    std::string text((std::istreambuf_iterator<char>(in)),
                     std::istreambuf_iterator<char>());
    CHECK(text.find("property float radius") != std::string::npos);
    const PointCloud back = read_ply(path);  // radius skipped, points kept
    CHECK(back.size() == 5);
  }

  SUBCASE("pose file round trip") {
    std::vector<RigidTransform> poses;
    for (int i = 0; i < 4; ++i) poses.push_back(random_transform(rng));
    const std::string path = dir + "/poses.txt";
    write_pose_file(path, poses);
    const auto back = read_pose_file(path);
    REQUIRE(back.size() == 4);
    for (size_t i = 0; i < 4; ++i) {
      CHECK((back[i].rotation - poses[i].rotation).cwiseAbs().maxCoeff() < 1e-15);
      CHECK((back[i].translation - poses[i].translation).norm() < 1e-15);
    }
  }

  SUBCASE("manifest round trip") {
    std::vector<PairSpec> pairs(2);
    pairs[0] = {"a.ply", "b.ply", random_transform(rng), "train", 0.7};
    pairs[1] = {"c.bin", "d.bin", random_transform(rng), "test", -1.0};
    const std::string path = dir + "/manifest.tsv";
    write_manifest(path, pairs);
    const auto back = read_manifest(path);
    REQUIRE(back.size() == 2);
    CHECK(back[0].split == "train");
    CHECK(back[0].overlap == doctest::Approx(0.7));
    CHECK(back[1].split == "test");
    CHECK(back[1].overlap == -1.0);
    CHECK((back[0].gt.rotation - pairs[0].gt.rotation).cwiseAbs().maxCoeff() <
          1e-15);
  }
}

TEST_CASE("RigidTransform validity") {
  RigidTransform t;
  CHECK(t.valid());
  t.rotation(0, 0) = 1.5;
  CHECK(!t.valid());
  Xoshiro256 rng(13);
  const RigidTransform r = random_transform(rng);
  CHECK(r.valid(1e-12));
  CHECK(r.compose(r.inverse()).valid(1e-9));
}
