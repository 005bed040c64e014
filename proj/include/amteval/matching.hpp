// Tolerance-based one-to-one matching of estimated notes to reference notes.

#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <queue>
#include <stdexcept>
#include <utility>
#include <vector>

#include "amteval/midi.hpp"

namespace amteval {

struct Tolerances {
  double onset_tol = 0.050;
  double offset_min_tol = 0.050;
  double offset_ratio = 0.20;
  double pitch_tol = 0.0;  // semitones

  void check() const {
    if (onset_tol < 0 || offset_min_tol < 0 || offset_ratio < 0 || pitch_tol < 0) {
      throw std::invalid_argument("tolerances must be non-negative");
    }
  }
};

using IndexPair = std::pair<std::size_t, std::size_t>;  // (reference, estimate)

struct MatchResult {
  std::vector<IndexPair> pairs;  // sorted by reference index
  std::size_t tp = 0;
  std::size_t fp = 0;
  std::size_t fn = 0;
};

struct WeightedEdge {
  std::size_t left;
  std::size_t right;
  std::int64_t cost;
};

/// Hopcroft-Karp. Adjacency order follows the edge list, so the result is
/// deterministic for a fixed input. Returned pairs are sorted by left index.
inline std::vector<IndexPair> max_bipartite_matching(std::size_t n_left, std::size_t n_right,
                                                     const std::vector<IndexPair>& edges) {
  constexpr std::size_t kNone = std::numeric_limits<std::size_t>::max();
  std::vector<std::vector<std::size_t>> adj(n_left);
  for (const auto& [l, r] : edges) {
    if (l >= n_left || r >= n_right) throw std::out_of_range("matching edge index out of range");
    adj[l].push_back(r);
  }
  std::vector<std::size_t> match_l(n_left, kNone), match_r(n_right, kNone), dist(n_left);

  auto bfs = [&] {
    std::queue<std::size_t> q;
    bool found = false;
    for (std::size_t l = 0; l < n_left; ++l) {
      if (match_l[l] == kNone) {
        dist[l] = 0;
        q.push(l);
      } else {
        dist[l] = kNone;
      }
    }
    while (!q.empty()) {
      const std::size_t l = q.front();
      q.pop();
      for (std::size_t r : adj[l]) {
        const std::size_t next = match_r[r];
        if (next == kNone) {
          found = true;
        } else if (dist[next] == kNone) {
          dist[next] = dist[l] + 1;
          q.push(next);
        }
      }
    }
    return found;
  };

  // Iterative DFS along the BFS layering.
  std::vector<std::size_t> it(n_left);
  auto augment = [&](std::size_t root) {
    std::vector<std::size_t> stack{root};
    while (!stack.empty()) {
      const std::size_t l = stack.back();
      if (it[l] == adj[l].size()) {
        dist[l] = kNone;
        stack.pop_back();
        continue;
      }
      const std::size_t r = adj[l][it[l]];
      const std::size_t next = match_r[r];
      if (next == kNone) {
        // Flip the alternating path held on the stack.
        for (std::size_t i = stack.size(); i-- > 0;) {
          const std::size_t u = stack[i];
          const std::size_t v = adj[u][it[u]];
          match_r[v] = u;
          match_l[u] = v;
        }
        return true;
      }
      if (dist[next] == dist[l] + 1) {
        stack.push_back(next);
      } else {
        ++it[l];
      }
    }
    return false;
  };

  while (bfs()) {
    std::fill(it.begin(), it.end(), 0);
    for (std::size_t l = 0; l < n_left; ++l) {
      if (match_l[l] == kNone) augment(l);
    }
  }

  std::vector<IndexPair> pairs;
  for (std::size_t l = 0; l < n_left; ++l) {
    if (match_l[l] != kNone) pairs.emplace_back(l, match_l[l]);
  }
  return pairs;
}

/// Maximum-cardinality matching of minimum total cost, via successive
/// shortest augmenting paths with Dijkstra on reduced costs. Costs must be
/// non-negative.
inline std::vector<IndexPair> min_cost_max_matching(std::size_t n_left, std::size_t n_right,
                                                    const std::vector<WeightedEdge>& edges) {
  constexpr std::int64_t kInf = std::numeric_limits<std::int64_t>::max() / 4;
  constexpr std::size_t kNone = std::numeric_limits<std::size_t>::max();

  // Node layout: source, left nodes, right nodes, sink.
  const std::size_t source = 0, sink = n_left + n_right + 1, n_nodes = n_left + n_right + 2;
  struct Arc {
    std::size_t to;
    std::size_t rev;
    int cap;
    std::int64_t cost;
  };
  std::vector<std::vector<Arc>> g(n_nodes);
  auto add_arc = [&](std::size_t from, std::size_t to, std::int64_t cost) {
    g[from].push_back({to, g[to].size(), 1, cost});
    g[to].push_back({from, g[from].size() - 1, 0, -cost});
  };
  for (std::size_t l = 0; l < n_left; ++l) add_arc(source, 1 + l, 0);
  for (const auto& e : edges) {
    if (e.left >= n_left || e.right >= n_right) throw std::out_of_range("matching edge index out of range");
    if (e.cost < 0) throw std::invalid_argument("matching edge cost must be non-negative");
    add_arc(1 + e.left, 1 + n_left + e.right, e.cost);
  }
  for (std::size_t r = 0; r < n_right; ++r) add_arc(1 + n_left + r, sink, 0);

  std::vector<std::int64_t> potential(n_nodes, 0), dist(n_nodes);
  std::vector<std::size_t> prev_node(n_nodes), prev_arc(n_nodes);
  using Item = std::pair<std::int64_t, std::size_t>;
  while (true) {
    std::fill(dist.begin(), dist.end(), kInf);
    std::fill(prev_node.begin(), prev_node.end(), kNone);
    std::priority_queue<Item, std::vector<Item>, std::greater<>> pq;
    dist[source] = 0;
    pq.push({0, source});
    while (!pq.empty()) {
      const auto [d, u] = pq.top();
      pq.pop();
      if (d != dist[u]) continue;
      for (std::size_t i = 0; i < g[u].size(); ++i) {
        const Arc& a = g[u][i];
        if (a.cap == 0) continue;
        const std::int64_t nd = d + a.cost + potential[u] - potential[a.to];
        if (nd < dist[a.to]) {
          dist[a.to] = nd;
          prev_node[a.to] = u;
          prev_arc[a.to] = i;
          pq.push({nd, a.to});
        }
      }
    }
    if (dist[sink] >= kInf) break;
    for (std::size_t v = 0; v < n_nodes; ++v) {
      if (dist[v] < kInf) potential[v] += dist[v];
    }
    for (std::size_t v = sink; v != source; v = prev_node[v]) {
      Arc& a = g[prev_node[v]][prev_arc[v]];
      a.cap -= 1;
      g[v][a.rev].cap += 1;
    }
  }

  std::vector<IndexPair> pairs;
  for (std::size_t l = 0; l < n_left; ++l) {
    for (const Arc& a : g[1 + l]) {
      if (a.to > n_left && a.to < sink && a.cap == 0 && a.cost >= 0) {
        pairs.emplace_back(l, a.to - 1 - n_left);
      }
    }
  }
  return pairs;
}

namespace detail {

// Distances are rounded to 7 decimals before comparison so that values
// derived from tick arithmetic (0.55 - 0.5) sit exactly on the tolerance.
inline double rounded_distance(double a, double b) { return std::round(std::abs(a - b) * 1e7) / 1e7; }

inline MatchResult match_notes(const std::vector<Note>& ref, const std::vector<Note>& est, const Tolerances& tol,
                               bool with_offset) {
  tol.check();
  std::vector<WeightedEdge> edges;
  for (std::size_t r = 0; r < ref.size(); ++r) {
    const Note& rn = ref[r];
    const double offset_window = std::max(tol.offset_min_tol, tol.offset_ratio * rn.duration());
    for (std::size_t e = 0; e < est.size(); ++e) {
      const Note& en = est[e];
      if (std::abs(rn.pitch - en.pitch) > tol.pitch_tol) continue;
      const double onset_dist = rounded_distance(rn.onset, en.onset);
      if (onset_dist > tol.onset_tol) continue;
      if (with_offset && rounded_distance(rn.offset, en.offset) > offset_window) continue;
      edges.push_back({r, e, std::llround(onset_dist * 1e9)});
    }
  }
  MatchResult result;
  result.pairs = min_cost_max_matching(ref.size(), est.size(), edges);
  result.tp = result.pairs.size();
  result.fp = est.size() - result.tp;
  result.fn = ref.size() - result.tp;
  return result;
}

}  // namespace detail

/// Pairs notes with equal pitch (within pitch_tol) and onsets within
/// onset_tol. Maximum cardinality; ties prefer smaller onset differences.
inline MatchResult match_onset(const std::vector<Note>& ref, const std::vector<Note>& est,
                               const Tolerances& tol = {}) {
  return detail::match_notes(ref, est, tol, false);
}

/// As match_onset, and offsets must agree within
/// max(offset_min_tol, offset_ratio * reference duration).
inline MatchResult match_onset_offset(const std::vector<Note>& ref, const std::vector<Note>& est,
                                      const Tolerances& tol = {}) {
  return detail::match_notes(ref, est, tol, true);
}

}  // namespace amteval
