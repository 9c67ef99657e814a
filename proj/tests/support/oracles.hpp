#pragma once

// Test-only oracles, independent of the library implementations they check:
// exhaustive path enumeration, quad-tree walks, brute-force medoids and a
// Mann-Kendall trend test.

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <optional>
#include <span>
#include <vector>

#include "marlroute/netgraph.hpp"

namespace oracle {

struct BestPath {
    double cost = std::numeric_limits<double>::infinity();
    std::vector<int> roads;
};

// Depth-first enumeration of every road sequence from src (exclusive) to dst
// with at most max_hops roads, no repeated roads. Keeps the cheapest cost and,
// among equal costs, the lexicographically smallest road-id sequence.
inline BestPath brute_force_shortest(const marl::net::RoadNetwork& net,
                                     std::span<const double> weights, int src_road,
                                     int dst, int max_hops) {
    BestPath best;
    if (net.road(src_road).tail == dst) {
        best.cost = 0.0;
        best.roads = {};
        return best;
    }
    std::vector<int> stack;
    std::vector<uint8_t> used(net.num_roads(), 0);
    const double eps = 1e-12;

    std::function<void(int, double)> dfs = [&](int road, double cost) {
        if (static_cast<int>(stack.size()) > max_hops) return;
        if (!stack.empty() && net.road(road).tail == dst) {
            if (cost < best.cost - eps ||
                (std::abs(cost - best.cost) <= eps && stack < best.roads)) {
                best.cost = cost;
                best.roads = stack;
            }
            return;
        }
        for (int nx : net.road(road).allowed_next) {
            if (used[nx]) continue;
            used[nx] = 1;
            stack.push_back(nx);
            dfs(nx, cost + weights[nx]);
            stack.pop_back();
            used[nx] = 0;
        }
    };
    dfs(src_road, 0.0);
    return best;
}

// Random small strongly-connectable network: a random cycle through all
// intersections plus extra random roads.
inline marl::net::RoadNetwork random_network(int n, int extra_roads, marl::Rng& rng) {
    using namespace marl::net;
    std::vector<Intersection> xs(n);
    for (int i = 0; i < n; ++i) {
        xs[i].id = i;
        xs[i].x = rng.uniform(0.0, 1000.0);
        xs[i].y = rng.uniform(0.0, 1000.0);
    }
    std::vector<int> order(n);
    for (int i = 0; i < n; ++i) order[i] = i;
    for (int i = n - 1; i > 0; --i) std::swap(order[i], order[rng.uniform_int(i + 1)]);

    std::vector<Road> roads;
    std::vector<std::pair<int, int>> seen;
    auto add_road = [&](int a, int b) {
        if (a == b) return;
        for (auto [x, y] : seen)
            if (x == a && y == b) return;
        seen.emplace_back(a, b);
        Road r;
        r.id = static_cast<int>(roads.size());
        r.head = a;
        r.tail = b;
        r.length = 50.0 + 10.0 * rng.uniform_int(100);
        r.lanes = 1;
        r.free_flow_speed = 10.0;
        roads.push_back(r);
    };
    for (int i = 0; i < n; ++i) add_road(order[i], order[(i + 1) % n]);
    for (int e = 0; e < extra_roads; ++e) add_road(rng.uniform_int(n), rng.uniform_int(n));

    std::vector<std::vector<int>> out(n);
    for (const auto& r : roads) out[r.head].push_back(r.id);
    for (auto& r : roads) {
        for (int nx : out[r.tail]) {
            const auto& cand = roads[nx];
            const bool reverse = cand.head == r.tail && cand.tail == r.head;
            if (reverse && out[r.tail].size() > 1) continue;
            r.allowed_next.push_back(nx);
        }
        std::sort(r.allowed_next.begin(), r.allowed_next.end());
    }
    return RoadNetwork::from_parts(std::move(xs), std::move(roads));
}

// Z traversal of a 2^b x 2^b lattice as an explicit depth-first quad-tree
// walk; returns (x, y) cells in visit order. Quadrant order matches the
// y-before-x bit interleaving: (0,0), (1,0), (0,1), (1,1).
inline void quad_walk(int x0, int y0, int size, std::vector<std::pair<int, int>>& out) {
    if (size == 1) {
        out.emplace_back(x0, y0);
        return;
    }
    const int h = size / 2;
    quad_walk(x0, y0, h, out);
    quad_walk(x0 + h, y0, h, out);
    quad_walk(x0, y0 + h, h, out);
    quad_walk(x0 + h, y0 + h, h, out);
}

inline std::vector<std::pair<int, int>> quadtree_order(int bits) {
    std::vector<std::pair<int, int>> out;
    quad_walk(0, 0, 1 << bits, out);
    return out;
}

// Exhaustive optimal K-medoids over an explicit distance matrix.
inline double brute_force_medoid_cost(const std::vector<std::vector<double>>& d, int k) {
    const int n = static_cast<int>(d.size());
    std::vector<int> pick(k);
    double best = std::numeric_limits<double>::infinity();
    std::function<void(int, int)> rec = [&](int start, int depth) {
        if (depth == k) {
            double total = 0.0;
            for (int c = 0; c < n; ++c) {
                double m = std::numeric_limits<double>::infinity();
                for (int mi : pick) m = std::min(m, d[c][mi]);
                total += m;
            }
            best = std::min(best, total);
            return;
        }
        for (int i = start; i < n; ++i) {
            pick[depth] = i;
            rec(i + 1, depth + 1);
        }
    };
    rec(0, 0);
    return best;
}

// Candidate-to-candidate free-flow time matrix, the metric select_hubs uses.
inline std::vector<std::vector<double>> candidate_distance_matrix(
    const marl::net::RoadNetwork& net, const std::vector<int>& candidates) {
    const auto weights = net.free_flow_weights();
    const int n = static_cast<int>(candidates.size());
    std::vector<std::vector<double>> d(n, std::vector<double>(n, 0.0));
    for (int j = 0; j < n; ++j) {
        marl::net::RouteTable table(net, weights, candidates[j]);
        for (int i = 0; i < n; ++i)
            d[i][j] = i == j ? 0.0 : table.cost_from_intersection(candidates[i]);
    }
    return d;
}

inline double medoid_cost_of(const std::vector<std::vector<double>>& d,
                             const std::vector<int>& medoid_positions) {
    double total = 0.0;
    for (size_t c = 0; c < d.size(); ++c) {
        double m = std::numeric_limits<double>::infinity();
        for (int mi : medoid_positions) m = std::min(m, d[c][mi]);
        total += m;
    }
    return total;
}

// Mann-Kendall trend test; returns the z statistic (negative = decreasing).
inline double mann_kendall_z(std::span<const double> x) {
    const int n = static_cast<int>(x.size());
    long long s = 0;
    for (int i = 0; i < n - 1; ++i)
        for (int j = i + 1; j < n; ++j) {
            if (x[j] > x[i]) ++s;
            else if (x[j] < x[i]) --s;
        }
    const double var = n * (n - 1.0) * (2.0 * n + 5.0) / 18.0;
    if (s > 0) return (s - 1) / std::sqrt(var);
    if (s < 0) return (s + 1) / std::sqrt(var);
    return 0.0;
}

// Chi-squared 0.99 quantiles for small degrees of freedom.
inline double chi2_crit_99(int df) {
    static const double table[] = {0, 6.635, 9.210, 11.345, 13.277, 15.086, 16.812};
    return table[df];
}

}  // namespace oracle
