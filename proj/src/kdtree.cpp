#include "spreg/kdtree.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

namespace spreg {

namespace {

// Candidate ordering: squared distance first, index as the tie break.
struct Cand {
  double d2;
  int idx;
  bool operator<(const Cand& o) const {
    return d2 != o.d2 ? d2 < o.d2 : idx < o.idx;
  }
};

}  // namespace

void SpatialIndex::build(const Points& pts) {
  pts_ = pts;
  order_.resize(static_cast<size_t>(pts.rows()));
  std::iota(order_.begin(), order_.end(), 0);
  nodes_.clear();
  if (pts.rows() > 0) root_ = build_range(0, static_cast<int>(pts.rows()));
}

int SpatialIndex::build_range(int begin, int end) {
  const int id = static_cast<int>(nodes_.size());
  nodes_.push_back({});
  if (end - begin <= kLeafSize) {
    nodes_[id].begin = begin;
    nodes_[id].end = end;
    return id;
  }

  Vec3 lo = Vec3::Constant(std::numeric_limits<double>::infinity());
  Vec3 hi = -lo;
  for (int i = begin; i < end; ++i) {
    const Vec3 p = pts_.row(order_[i]);
    lo = lo.cwiseMin(p);
    hi = hi.cwiseMax(p);
  }
  int axis = 0;
  (hi - lo).maxCoeff(&axis);

  const int mid = begin + (end - begin) / 2;
  std::nth_element(order_.begin() + begin, order_.begin() + mid,
                   order_.begin() + end, [&](int a, int b) {
                     const double va = pts_(a, axis), vb = pts_(b, axis);
                     return va != vb ? va < vb : a < b;
                   });
  // Capture before recursing: the children's nth_element calls permute order_.
  const double split = pts_(order_[mid], axis);

  const int left = build_range(begin, mid);
  const int right = build_range(mid, end);
  nodes_[id].axis = axis;
  nodes_[id].split = split;
  nodes_[id].left = left;
  nodes_[id].right = right;
  return id;
}

std::vector<std::pair<int, double>> SpatialIndex::knn(const Vec3& query,
                                                      int k) const {
  if (empty()) throw StateError("knn: index is empty");
  if (k < 1) throw ParameterError("knn: k must be >= 1");
  k = std::min<int>(k, static_cast<int>(pts_.rows()));

  // Bounded max-heap of the k best candidates under (d2, idx) order.
  std::vector<Cand> heap;
  heap.reserve(static_cast<size_t>(k) + 1);
  auto worst = [&]() { return heap.front(); };
  auto push = [&](const Cand& c) {
    if (static_cast<int>(heap.size()) < k) {
      heap.push_back(c);
      std::push_heap(heap.begin(), heap.end());
    } else if (c < worst()) {
      std::pop_heap(heap.begin(), heap.end());
      heap.back() = c;
      std::push_heap(heap.begin(), heap.end());
    }
  };

  // Iterative traversal, near side first.
  std::vector<int> stack;
  stack.push_back(root_);
  while (!stack.empty()) {
    const int id = stack.back();
    stack.pop_back();
    const Node& n = nodes_[id];
    if (n.axis < 0) {
      for (int i = n.begin; i < n.end; ++i) {
        const int idx = order_[i];
        const double d2 = (pts_.row(idx).transpose() - query).squaredNorm();
        push({d2, idx});
      }
      continue;
    }
    const double delta = query[n.axis] - n.split;
    const int near = delta < 0 ? n.left : n.right;
    const int far = delta < 0 ? n.right : n.left;
    // Far side can still contain ties on the splitting plane, so prune with
    // <= rather than <.
    if (static_cast<int>(heap.size()) < k || delta * delta <= worst().d2) {
      stack.push_back(far);
    }
    stack.push_back(near);
  }

  std::sort(heap.begin(), heap.end());
  std::vector<std::pair<int, double>> out;
  out.reserve(heap.size());
  for (const Cand& c : heap) out.emplace_back(c.idx, std::sqrt(c.d2));
  return out;
}

std::vector<std::pair<int, double>> SpatialIndex::radius_search(
    const Vec3& query, double radius) const {
  if (empty()) throw StateError("radius_search: index is empty");
  if (radius < 0) throw ParameterError("radius_search: radius must be >= 0");
  const double r2 = radius * radius;

  std::vector<Cand> found;
  std::vector<int> stack;
  stack.push_back(root_);
  while (!stack.empty()) {
    const int id = stack.back();
    stack.pop_back();
    const Node& n = nodes_[id];
    if (n.axis < 0) {
      for (int i = n.begin; i < n.end; ++i) {
        const int idx = order_[i];
        const double d2 = (pts_.row(idx).transpose() - query).squaredNorm();
        if (d2 <= r2) found.push_back({d2, idx});
      }
      continue;
    }
    const double delta = query[n.axis] - n.split;
    const int near = delta < 0 ? n.left : n.right;
    const int far = delta < 0 ? n.right : n.left;
    if (delta * delta <= r2) stack.push_back(far);
    stack.push_back(near);
  }

  std::sort(found.begin(), found.end());
  std::vector<std::pair<int, double>> out;
  out.reserve(found.size());
  for (const Cand& c : found) out.emplace_back(c.idx, std::sqrt(c.d2));
  return out;
}

std::pair<int, double> SpatialIndex::nearest(const Vec3& query) const {
  return knn(query, 1).front();
}

}  // namespace spreg
