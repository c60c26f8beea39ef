#pragma once

#include "spreg/types.hpp"

#include <utility>
#include <vector>

namespace spreg {

/// kd-tree over a point cloud. Median split on the widest axis, leaf size 16.
/// Immutable after construction; queries are safe to run concurrently.
/// Distance ties always break toward the lower point index so that results
/// are identical to a brute-force scan ordered by (distance, index).
class SpatialIndex {
 public:
  SpatialIndex() = default;
  explicit SpatialIndex(const PointCloud& cloud) { build(cloud.points); }
  explicit SpatialIndex(const Points& pts) { build(pts); }

  Index size() const { return pts_.rows(); }
  bool empty() const { return pts_.rows() == 0; }
  const Points& points() const { return pts_; }

  /// k nearest neighbors, sorted by ascending distance (ties by lower index).
  /// Returns all points when k exceeds the cloud size. Throws StateError on
  /// an empty index.
  std::vector<std::pair<int, double>> knn(const Vec3& query, int k) const;

  /// All points within radius, sorted by (distance, index).
  std::vector<std::pair<int, double>> radius_search(const Vec3& query,
                                                    double radius) const;

  /// Nearest single neighbor; (-1, inf) never occurs (StateError if empty).
  std::pair<int, double> nearest(const Vec3& query) const;

 private:
  struct Node {
    int left = -1;
    int right = -1;
    int axis = -1;            // -1 marks a leaf
    double split = 0.0;
    int begin = 0, end = 0;   // range into order_ for leaves
  };

  static constexpr int kLeafSize = 16;

  void build(const Points& pts);
  int build_range(int begin, int end);

  Points pts_{0, 3};
  std::vector<int> order_;
  std::vector<Node> nodes_;
  int root_ = -1;
};

}  // namespace spreg
