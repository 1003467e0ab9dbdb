#pragma once

#include <algorithm>
#include <cstdint>
#include <numeric>
#include <utility>
#include <vector>

#include "simcbct/core.hpp"

namespace simcbct {

/// Static 3-D k-d tree over a point set; answers exact K-nearest queries.
/// Equal distances are ordered by point index, so results are deterministic.
class KdTree {
 public:
  struct Neighbor {
    double dist2;
    std::uint32_t index;
    bool operator<(const Neighbor& o) const {
      return dist2 < o.dist2 || (dist2 == o.dist2 && index < o.index);
    }
  };

  explicit KdTree(std::vector<Vec3> points) : pts_(std::move(points)) {
    order_.resize(pts_.size());
    std::iota(order_.begin(), order_.end(), 0u);
    if (!pts_.empty()) nodes_.reserve(2 * pts_.size() / kLeaf + 2), build(0, order_.size(), 0);
  }

  std::size_t size() const { return pts_.size(); }
  const Vec3& point(std::size_t i) const { return pts_[i]; }

  /// K nearest points to q, sorted by distance. `out` is reused storage.
  void knn(Vec3 q, std::size_t k, std::vector<Neighbor>& out) const {
    out.clear();
    if (pts_.empty() || k == 0) return;
    k = std::min(k, pts_.size());
    search(0, q, k, out);
    std::sort_heap(out.begin(), out.end());
  }

 private:
  static constexpr std::size_t kLeaf = 12;

  struct Node {
    std::uint32_t begin, end;  // range in order_
    int axis;                  // -1 for leaf
    double split;
    std::int32_t left, right;
  };

  std::int32_t build(std::size_t begin, std::size_t end, int depth) {
    const auto id = static_cast<std::int32_t>(nodes_.size());
    nodes_.push_back({static_cast<std::uint32_t>(begin), static_cast<std::uint32_t>(end), -1, 0, -1, -1});
    if (end - begin <= kLeaf) return id;

    // split on the widest axis
    Vec3 lo = pts_[order_[begin]], hi = lo;
    for (std::size_t i = begin; i < end; ++i)
      for (int a = 0; a < 3; ++a) {
        lo[a] = std::min(lo[a], pts_[order_[i]][a]);
        hi[a] = std::max(hi[a], pts_[order_[i]][a]);
      }
    int axis = 0;
    for (int a = 1; a < 3; ++a)
      if (hi[a] - lo[a] > hi[axis] - lo[axis]) axis = a;
    (void)depth;

    const std::size_t mid = begin + (end - begin) / 2;
    std::nth_element(order_.begin() + begin, order_.begin() + mid, order_.begin() + end,
                     [&](std::uint32_t a, std::uint32_t b) {
                       return pts_[a][axis] < pts_[b][axis] ||
                              (pts_[a][axis] == pts_[b][axis] && a < b);
                     });
    const double split = pts_[order_[mid]][axis];
    const std::int32_t l = build(begin, mid, depth + 1);
    const std::int32_t r = build(mid, end, depth + 1);
    nodes_[id].axis = axis;
    nodes_[id].split = split;
    nodes_[id].left = l;
    nodes_[id].right = r;
    return id;
  }

  void offer(std::vector<Neighbor>& heap, std::size_t k, Neighbor n) const {
    if (heap.size() < k) {
      heap.push_back(n);
      std::push_heap(heap.begin(), heap.end());
    } else if (n < heap.front()) {
      std::pop_heap(heap.begin(), heap.end());
      heap.back() = n;
      std::push_heap(heap.begin(), heap.end());
    }
  }

  void search(std::int32_t id, Vec3 q, std::size_t k, std::vector<Neighbor>& heap) const {
    const Node& nd = nodes_[id];
    if (nd.axis < 0) {
      for (std::uint32_t i = nd.begin; i < nd.end; ++i) {
        const std::uint32_t p = order_[i];
        const Vec3 d = pts_[p] - q;
        offer(heap, k, {dot(d, d), p});
      }
      return;
    }
    const double diff = q[nd.axis] - nd.split;
    const std::int32_t near = diff < 0 ? nd.left : nd.right;
    const std::int32_t far = diff < 0 ? nd.right : nd.left;
    search(near, q, k, heap);
    if (heap.size() < k || diff * diff <= heap.front().dist2) search(far, q, k, heap);
  }

  std::vector<Vec3> pts_;
  std::vector<std::uint32_t> order_;
  std::vector<Node> nodes_;
};

}  // namespace simcbct
