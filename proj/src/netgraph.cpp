#include "marlroute/netgraph.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <istream>
#include <limits>
#include <queue>
#include <sstream>

namespace marl::net {

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();
constexpr int kMaxZorderBits = 24;

bool is_reverse(const Road& a, const Road& b) {
    return a.head == b.tail && a.tail == b.head;
}

// Quantize intersection coordinates onto a 2^b x 2^b cell grid over the
// bounding box, then interleave y before x, MSB first.
std::vector<std::pair<uint32_t, uint32_t>> quantize_cells(
    const std::vector<Intersection>& xs, int bits) {
    double min_x = kInf, max_x = -kInf, min_y = kInf, max_y = -kInf;
    for (const auto& it : xs) {
        min_x = std::min(min_x, it.x);
        max_x = std::max(max_x, it.x);
        min_y = std::min(min_y, it.y);
        max_y = std::max(max_y, it.y);
    }
    const double cells = static_cast<double>(1u << bits);
    const double ex = max_x - min_x;
    const double ey = max_y - min_y;
    std::vector<std::pair<uint32_t, uint32_t>> out;
    out.reserve(xs.size());
    for (const auto& it : xs) {
        const uint32_t cx =
            ex > 0 ? std::min<uint32_t>((1u << bits) - 1,
                                        static_cast<uint32_t>((it.x - min_x) / ex * cells))
                   : 0;
        const uint32_t cy =
            ey > 0 ? std::min<uint32_t>((1u << bits) - 1,
                                        static_cast<uint32_t>((it.y - min_y) / ey * cells))
                   : 0;
        out.emplace_back(cx, cy);
    }
    return out;
}

std::vector<uint8_t> interleave_bits(uint32_t cx, uint32_t cy, int bits) {
    std::vector<uint8_t> v(2 * bits);
    for (int level = bits - 1, pos = 0; level >= 0; --level) {
        v[pos++] = static_cast<uint8_t>((cy >> level) & 1u);
        v[pos++] = static_cast<uint8_t>((cx >> level) & 1u);
    }
    return v;
}

bool assign_zorder(std::vector<Intersection>& xs, int bits) {
    auto cells = quantize_cells(xs, bits);
    std::vector<uint64_t> codes;
    codes.reserve(cells.size());
    for (auto [cx, cy] : cells) {
        uint64_t code = 0;
        for (int level = bits - 1; level >= 0; --level) {
            code = (code << 2) | (((cy >> level) & 1u) << 1) | ((cx >> level) & 1u);
        }
        codes.push_back(code);
    }
    auto sorted = codes;
    std::sort(sorted.begin(), sorted.end());
    if (std::adjacent_find(sorted.begin(), sorted.end()) != sorted.end()) return false;
    for (size_t i = 0; i < xs.size(); ++i) {
        xs[i].zorder = interleave_bits(cells[i].first, cells[i].second, bits);
    }
    return true;
}

std::string fmt_double(double v) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

}  // namespace

RoadNetwork RoadNetwork::from_parts(std::vector<Intersection> intersections,
                                    std::vector<Road> roads) {
    RoadNetwork net;
    const int n = static_cast<int>(intersections.size());
    const int m = static_cast<int>(roads.size());
    if (n == 0) throw LoadError("network has no intersections");

    for (int i = 0; i < n; ++i) {
        const auto& it = intersections[i];
        if (it.id != i) throw LoadError("intersection ids must be dense 0..N-1, got id=" +
                                        std::to_string(it.id) + " at position " + std::to_string(i));
        if (!std::isfinite(it.x) || !std::isfinite(it.y) || it.x < 0 || it.y < 0)
            throw LoadError("intersection " + std::to_string(i) +
                            ": coordinates must be finite and non-negative");
    }
    for (int r = 0; r < m; ++r) {
        const auto& rd = roads[r];
        if (rd.id != r) throw LoadError("road ids must be dense 0..M-1, got id=" +
                                        std::to_string(rd.id) + " at position " + std::to_string(r));
        if (rd.head < 0 || rd.head >= n || rd.tail < 0 || rd.tail >= n)
            throw LoadError("road " + std::to_string(r) + ": dangling endpoint");
        if (rd.head == rd.tail) throw LoadError("road " + std::to_string(r) + ": self-loop");
        if (!(rd.length > 0) || !std::isfinite(rd.length))
            throw LoadError("road " + std::to_string(r) + ": non-positive length");
        if (rd.lanes < 1) throw LoadError("road " + std::to_string(r) + ": lanes must be >= 1");
        if (!(rd.free_flow_speed > 0) || !std::isfinite(rd.free_flow_speed))
            throw LoadError("road " + std::to_string(r) + ": non-positive free_flow_speed");
    }

    net.out_roads_.assign(n, {});
    net.in_roads_.assign(n, {});
    for (int r = 0; r < m; ++r) {
        net.out_roads_[roads[r].head].push_back(r);
        net.in_roads_[roads[r].tail].push_back(r);
    }

    for (int r = 0; r < m; ++r) {
        auto& rd = roads[r];
        std::sort(rd.allowed_next.begin(), rd.allowed_next.end());
        if (std::adjacent_find(rd.allowed_next.begin(), rd.allowed_next.end()) !=
            rd.allowed_next.end())
            throw LoadError("road " + std::to_string(r) + ": duplicate allowed_next entry");
        for (int nx : rd.allowed_next) {
            if (nx < 0 || nx >= m)
                throw LoadError("road " + std::to_string(r) +
                                ": allowed_next references missing road " + std::to_string(nx));
            const auto& nxt = roads[nx];
            if (nxt.head != rd.tail)
                throw LoadError("road " + std::to_string(r) + ": allowed_next road " +
                                std::to_string(nx) + " does not start at the tail intersection");
            if (is_reverse(rd, nxt) && net.out_roads_[rd.tail].size() > 1)
                throw LoadError("road " + std::to_string(r) +
                                ": U-turn in allowed_next at a multi-exit intersection");
        }
    }

    net.max_out_degree_ = 0;
    net.action_slot_.assign(m, -1);
    for (int i = 0; i < n; ++i) {
        net.max_out_degree_ = std::max(net.max_out_degree_,
                                       static_cast<int>(net.out_roads_[i].size()));
        for (size_t s = 0; s < net.out_roads_[i].size(); ++s)
            net.action_slot_[net.out_roads_[i][s]] = static_cast<int>(s);
    }

    for (int i = 0; i < n; ++i)
        intersections[i].agent_controlled = net.out_roads_[i].size() >= 3;

    int bits = 1;
    for (; bits <= kMaxZorderBits; ++bits) {
        if (assign_zorder(intersections, bits)) break;
    }
    if (bits > kMaxZorderBits)
        throw EncodingCollision("no collision-free Z-order encoding up to " +
                                std::to_string(kMaxZorderBits) + " bits per axis");
    net.zorder_bits_ = bits;

    net.neighborhood_.assign(n, {});
    for (int i = 0; i < n; ++i) {
        std::vector<int> nb{i};
        for (int r : net.out_roads_[i]) nb.push_back(roads[r].tail);
        for (int r : net.in_roads_[i]) nb.push_back(roads[r].head);
        std::sort(nb.begin(), nb.end());
        nb.erase(std::unique(nb.begin(), nb.end()), nb.end());
        net.neighborhood_[i] = std::move(nb);
    }

    net.intersections_ = std::move(intersections);
    net.roads_ = std::move(roads);
    return net;
}

RoadNetwork build_grid(int rows, int cols, double edge_len, double speed, int lanes) {
    if (rows < 2 || cols < 2) throw std::invalid_argument("grid dimensions must be >= 2");
    if (!(edge_len > 0)) throw std::invalid_argument("edge_len must be > 0");

    std::vector<Intersection> xs;
    xs.reserve(static_cast<size_t>(rows) * cols);
    for (int r = 0; r < rows; ++r) {
        for (int c = 0; c < cols; ++c) {
            Intersection it;
            it.id = r * cols + c;
            it.x = c * edge_len;
            it.y = r * edge_len;
            xs.push_back(it);
        }
    }

    std::vector<Road> roads;
    auto add_pair = [&](int a, int b) {
        Road f;
        f.id = static_cast<int>(roads.size());
        f.head = a;
        f.tail = b;
        f.length = edge_len;
        f.lanes = lanes;
        f.free_flow_speed = speed;
        roads.push_back(f);
        Road g = f;
        g.id = static_cast<int>(roads.size());
        g.head = b;
        g.tail = a;
        roads.push_back(g);
    };
    for (int r = 0; r < rows; ++r) {
        for (int c = 0; c < cols; ++c) {
            const int id = r * cols + c;
            if (c + 1 < cols) add_pair(id, id + 1);
            if (r + 1 < rows) add_pair(id, id + cols);
        }
    }

    std::vector<std::vector<int>> out(xs.size());
    for (const auto& rd : roads) out[rd.head].push_back(rd.id);
    for (auto& rd : roads) {
        for (int nx : out[rd.tail]) {
            if (is_reverse(rd, roads[nx]) && out[rd.tail].size() > 1) continue;
            rd.allowed_next.push_back(nx);
        }
        std::sort(rd.allowed_next.begin(), rd.allowed_next.end());
    }

    return RoadNetwork::from_parts(std::move(xs), std::move(roads));
}

std::vector<double> RoadNetwork::free_flow_weights() const {
    std::vector<double> w(roads_.size());
    for (size_t r = 0; r < roads_.size(); ++r) w[r] = roads_[r].free_flow_time();
    return w;
}

bool RoadNetwork::strongly_connected() const {
    const int n = num_intersections();
    const int m = num_roads();
    for (int src = 0; src < n; ++src) {
        std::vector<uint8_t> road_seen(m, 0);
        std::vector<uint8_t> node_seen(n, 0);
        std::queue<int> q;
        node_seen[src] = 1;
        for (int r : out_roads_[src]) {
            road_seen[r] = 1;
            q.push(r);
        }
        while (!q.empty()) {
            const int r = q.front();
            q.pop();
            node_seen[roads_[r].tail] = 1;
            for (int nx : roads_[r].allowed_next) {
                if (!road_seen[nx]) {
                    road_seen[nx] = 1;
                    q.push(nx);
                }
            }
        }
        for (int i = 0; i < n; ++i)
            if (!node_seen[i]) return false;
    }
    return true;
}

double RoadNetwork::euclidean(int a, int b) const {
    const auto& pa = intersections_.at(a);
    const auto& pb = intersections_.at(b);
    return std::hypot(pa.x - pb.x, pa.y - pb.y);
}

double RoadNetwork::bounding_box_diagonal() const {
    double min_x = kInf, max_x = -kInf, min_y = kInf, max_y = -kInf;
    for (const auto& it : intersections_) {
        min_x = std::min(min_x, it.x);
        max_x = std::max(max_x, it.x);
        min_y = std::min(min_y, it.y);
        max_y = std::max(max_y, it.y);
    }
    return std::hypot(max_x - min_x, max_y - min_y);
}

const std::vector<int>& next_hops(const RoadNetwork& net, int road) {
    return net.road(road).allowed_next;
}

std::vector<uint8_t> zorder_id(const RoadNetwork& net, int i, int bits_per_axis) {
    if (bits_per_axis < 1) throw std::invalid_argument("bits_per_axis must be >= 1");
    auto xs = net.intersections();
    auto cells = quantize_cells(xs, bits_per_axis);
    std::vector<uint64_t> codes;
    codes.reserve(cells.size());
    for (auto [cx, cy] : cells)
        codes.push_back((static_cast<uint64_t>(cy) << 32) | cx);
    auto sorted = codes;
    std::sort(sorted.begin(), sorted.end());
    if (std::adjacent_find(sorted.begin(), sorted.end()) != sorted.end())
        throw EncodingCollision("two intersections quantize to the same cell at " +
                                std::to_string(bits_per_axis) + " bits per axis");
    return interleave_bits(cells[i].first, cells[i].second, bits_per_axis);
}

std::vector<uint8_t> bits_of(uint64_t value, int width) {
    std::vector<uint8_t> v(width);
    for (int i = 0; i < width; ++i)
        v[width - 1 - i] = static_cast<uint8_t>((value >> i) & 1u);
    return v;
}

uint64_t zorder_value(std::span<const uint8_t> bits) {
    uint64_t v = 0;
    for (uint8_t b : bits) v = (v << 1) | (b & 1u);
    return v;
}

RouteTable::RouteTable(const RoadNetwork& net, std::span<const double> weights,
                       int dst_intersection)
    : net_(net), dst_(dst_intersection), cost_(net.num_roads(), kInf) {
    const int m = net.num_roads();
    if (static_cast<int>(weights.size()) != m)
        throw std::invalid_argument("weights size must equal road count");
    for (int r = 0; r < m; ++r)
        if (!(weights[r] > 0) || !std::isfinite(weights[r]))
            throw std::invalid_argument("weights must be positive and finite");

    std::vector<std::vector<int>> pred(m);
    for (int r = 0; r < m; ++r)
        for (int nx : net.road(r).allowed_next) pred[nx].push_back(r);

    using Item = std::pair<double, int>;  // (cost incl. road, road id)
    std::priority_queue<Item, std::vector<Item>, std::greater<>> heap;
    std::vector<uint8_t> done(m, 0);
    for (int r = 0; r < m; ++r) {
        if (net.road(r).tail == dst_) {
            cost_[r] = weights[r];
            heap.emplace(cost_[r], r);
        }
    }
    while (!heap.empty()) {
        auto [c, r] = heap.top();
        heap.pop();
        if (done[r]) continue;
        done[r] = 1;
        for (int p : pred[r]) {
            const double cand = weights[p] + cost_[r];
            if (cand < cost_[p]) {
                cost_[p] = cand;
                heap.emplace(cand, p);
            }
        }
    }
}

bool RouteTable::reachable_via(int road) const { return std::isfinite(cost_.at(road)); }

double RouteTable::cost_from_intersection(int i) const {
    if (i == dst_) return 0.0;
    double best = kInf;
    for (int r : net_.out_roads(i)) best = std::min(best, cost_[r]);
    return best;
}

int RouteTable::next_road_after(int road) const {
    const Road& rd = net_.road(road);
    if (rd.tail == dst_) return -1;
    int best = -1;
    double best_cost = kInf;
    for (int nx : rd.allowed_next) {
        if (cost_[nx] < best_cost) {
            best_cost = cost_[nx];
            best = nx;
        }
    }
    return best;
}

std::vector<int> RouteTable::extract_path(int src_road) const {
    std::vector<int> path;
    int cur = src_road;
    const int limit = net_.num_roads() + 2;
    for (int steps = 0; steps <= limit; ++steps) {
        const int nx = next_road_after(cur);
        if (nx == -1) return path;
        if (nx == -2 || !std::isfinite(cost_[nx]))
            throw NoPathError("destination " + std::to_string(dst_) +
                              " unreachable from road " + std::to_string(src_road));
        path.push_back(nx);
        cur = nx;
    }
    throw NoPathError("path extraction exceeded road count; inconsistent weights");
}

std::vector<int> shortest_path(const RoadNetwork& net, std::span<const double> weights,
                               int src_road, int dst_intersection) {
    RouteTable table(net, weights, dst_intersection);
    if (net.road(src_road).tail != dst_intersection &&
        !std::isfinite(table.cost_from_intersection(net.road(src_road).tail)))
        throw NoPathError("destination " + std::to_string(dst_intersection) +
                          " unreachable from road " + std::to_string(src_road));
    return table.extract_path(src_road);
}

std::vector<double> intersection_time_matrix(const RoadNetwork& net,
                                             std::span<const double> weights) {
    const int n = net.num_intersections();
    std::vector<double> m(static_cast<size_t>(n) * n, kInf);
    for (int dst = 0; dst < n; ++dst) {
        RouteTable table(net, weights, dst);
        for (int src = 0; src < n; ++src)
            m[static_cast<size_t>(src) * n + dst] = table.cost_from_intersection(src);
    }
    return m;
}

std::vector<int> filter_hub_candidates(const RoadNetwork& net) {
    std::vector<int> out;
    for (int i = 0; i < net.num_intersections(); ++i)
        if (net.in_degree(i) >= 3 && net.out_degree(i) >= 3) out.push_back(i);
    return out;
}

namespace {

double medoid_cost(const std::vector<std::vector<double>>& d, const std::vector<int>& medoids) {
    double total = 0.0;
    for (size_t c = 0; c < d.size(); ++c) {
        double best = kInf;
        for (int m : medoids) best = std::min(best, d[c][m]);
        total += best;
    }
    return total;
}

}  // namespace

namespace {

// PAM swap descent (best improvement, capped iterations) from a given start.
double pam_descend(const std::vector<std::vector<double>>& d, std::vector<int>& medoids,
                   std::vector<uint8_t>& chosen) {
    const int nc = static_cast<int>(d.size());
    double cur_cost = medoid_cost(d, medoids);
    for (int iter = 0; iter < 100; ++iter) {
        int best_out = -1, best_in = -1;
        double best_cost = cur_cost;
        for (size_t mi = 0; mi < medoids.size(); ++mi) {
            const int saved = medoids[mi];
            for (int cand = 0; cand < nc; ++cand) {
                if (chosen[cand]) continue;
                medoids[mi] = cand;
                const double c = medoid_cost(d, medoids);
                if (c < best_cost) {
                    best_cost = c;
                    best_out = static_cast<int>(mi);
                    best_in = cand;
                }
                medoids[mi] = saved;
            }
        }
        if (best_in < 0) break;
        chosen[medoids[best_out]] = 0;
        chosen[best_in] = 1;
        medoids[best_out] = best_in;
        cur_cost = best_cost;
    }
    return cur_cost;
}

}  // namespace

std::vector<int> select_hubs(const RoadNetwork& net, const std::vector<int>& candidates,
                             int k, uint64_t seed) {
    const int nc = static_cast<int>(candidates.size());
    if (k < 1 || k > nc) throw std::invalid_argument("select_hubs: K must be in [1, |candidates|]");

    // Pairwise free-flow shortest-path times between candidates.
    const auto weights = net.free_flow_weights();
    std::vector<std::vector<double>> d(nc, std::vector<double>(nc, 0.0));
    for (int j = 0; j < nc; ++j) {
        RouteTable table(net, weights, candidates[j]);
        for (int i = 0; i < nc; ++i)
            d[i][j] = i == j ? 0.0 : table.cost_from_intersection(candidates[i]);
    }

    // Greedy BUILD start.
    std::vector<int> medoids;
    std::vector<uint8_t> chosen(nc, 0);
    for (int round = 0; round < k; ++round) {
        int best = -1;
        double best_cost = kInf;
        for (int cand = 0; cand < nc; ++cand) {
            if (chosen[cand]) continue;
            medoids.push_back(cand);
            const double c = medoid_cost(d, medoids);
            medoids.pop_back();
            if (c < best_cost) {
                best_cost = c;
                best = cand;
            }
        }
        medoids.push_back(best);
        chosen[best] = 1;
    }

    double best_cost = pam_descend(d, medoids, chosen);
    std::vector<int> best_medoids = medoids;

    // Seeded random restarts: single swaps cannot always escape the BUILD
    // basin, restart descents reliably reach the optimum at these sizes.
    Rng rng(splitmix64(seed ^ 0x5ee3c7a9));
    const int restarts = 40;
    for (int r = 0; r < restarts; ++r) {
        std::vector<int> idx(nc);
        for (int i = 0; i < nc; ++i) idx[i] = i;
        for (int i = 0; i < k; ++i) std::swap(idx[i], idx[i + rng.uniform_int(nc - i)]);
        std::vector<int> start(idx.begin(), idx.begin() + k);
        std::vector<uint8_t> mask(nc, 0);
        for (int m : start) mask[m] = 1;
        const double c = pam_descend(d, start, mask);
        std::sort(start.begin(), start.end());
        std::sort(best_medoids.begin(), best_medoids.end());
        if (c < best_cost - 1e-12 ||
            (std::abs(c - best_cost) <= 1e-12 && start < best_medoids)) {
            best_cost = c;
            best_medoids = start;
        }
    }

    std::vector<int> out;
    out.reserve(best_medoids.size());
    for (int m : best_medoids) out.push_back(candidates[m]);
    std::sort(out.begin(), out.end());
    return out;
}

double default_d_max(const RoadNetwork& net) { return 0.5 * net.bounding_box_diagonal(); }

int HubGraph::hub_index_of(int intersection_id) const {
    for (size_t i = 0; i < hubs.size(); ++i)
        if (hubs[i] == intersection_id) return static_cast<int>(i);
    return -1;
}

HubGraph connect_hubs(const RoadNetwork& net, const std::vector<int>& hubs, int k,
                      double d_max) {
    const int nh = static_cast<int>(hubs.size());
    if (nh < 2) throw std::invalid_argument("connect_hubs: need at least 2 hubs");

    const auto weights = net.free_flow_weights();
    std::vector<std::vector<double>> time(nh, std::vector<double>(nh, kInf));
    for (int j = 0; j < nh; ++j) {
        RouteTable table(net, weights, hubs[j]);
        for (int i = 0; i < nh; ++i)
            if (i != j) time[i][j] = table.cost_from_intersection(hubs[i]);
    }

    HubGraph g;
    g.hubs = hubs;
    g.d_max = d_max;
    g.out_neighbors.assign(nh, {});
    g.edge_time.assign(nh, {});
    for (int i = 0; i < nh; ++i) {
        std::vector<std::pair<double, int>> order;
        for (int j = 0; j < nh; ++j) {
            if (j == i) continue;
            if (net.euclidean(hubs[i], hubs[j]) > d_max) continue;
            if (!std::isfinite(time[i][j])) continue;
            order.emplace_back(time[i][j], j);
        }
        std::sort(order.begin(), order.end());
        const int take = std::min<int>(k, static_cast<int>(order.size()));
        std::vector<std::pair<int, double>> picked;
        for (int t = 0; t < take; ++t) picked.emplace_back(order[t].second, order[t].first);
        std::sort(picked.begin(), picked.end());
        for (auto [j, tt] : picked) {
            g.out_neighbors[i].push_back(j);
            g.edge_time[i].push_back(tt);
        }
    }

    // Strong connectivity over hub edges.
    for (int src = 0; src < nh; ++src) {
        std::vector<uint8_t> seen(nh, 0);
        std::queue<int> q;
        seen[src] = 1;
        q.push(src);
        int count = 1;
        while (!q.empty()) {
            const int cur = q.front();
            q.pop();
            for (int j : g.out_neighbors[cur]) {
                if (!seen[j]) {
                    seen[j] = 1;
                    ++count;
                    q.push(j);
                }
            }
        }
        if (count != nh)
            throw HubConnectivityError(
                "hub graph not strongly connected; raise d_max or change K");
    }

    double min_dist = kInf;
    for (int i = 0; i < nh; ++i)
        for (int j : g.out_neighbors[i])
            min_dist = std::min(min_dist, net.euclidean(hubs[i], hubs[j]));
    g.r_vic = 0.5 * min_dist;
    return g;
}

namespace {

struct LineReader {
    std::istream& in;
    std::string origin;
    int line_no = 0;

    bool next(std::string& line) {
        while (std::getline(in, line)) {
            ++line_no;
            const auto pos = line.find_first_not_of(" \t\r");
            if (pos == std::string::npos) continue;
            if (line[pos] == '#') continue;
            return true;
        }
        return false;
    }

    [[noreturn]] void fail(const std::string& msg) const {
        throw LoadError(origin + ":" + std::to_string(line_no) + ": " + msg);
    }
};

std::vector<std::string> split_ws(const std::string& s) {
    std::vector<std::string> out;
    std::istringstream is(s);
    std::string tok;
    while (is >> tok) out.push_back(tok);
    return out;
}

}  // namespace

RoadNetwork parse_network(std::istream& in, const std::string& origin) {
    LineReader reader{in, origin};
    std::string line;

    if (!reader.next(line)) throw LoadError(origin + ": empty file");
    {
        auto toks = split_ws(line);
        std::string joined;
        for (const auto& t : toks) joined += t;
        if (joined != "format_version=1")
            reader.fail("expected 'format_version = 1', got '" + line + "'");
    }

    std::vector<Intersection> xs;
    std::vector<Road> roads;
    while (reader.next(line)) {
        auto toks = split_ws(line);
        const std::string kind = toks[0];
        auto get = [&](const std::string& key) -> std::string {
            const std::string prefix = key + "=";
            for (size_t i = 1; i < toks.size(); ++i)
                if (toks[i].rfind(prefix, 0) == 0) return toks[i].substr(prefix.size());
            reader.fail("missing field '" + key + "' in " + kind + " record");
        };
        auto get_int = [&](const std::string& key) {
            const std::string v = get(key);
            try {
                size_t pos = 0;
                const int out = std::stoi(v, &pos);
                if (pos != v.size()) throw std::invalid_argument(v);
                return out;
            } catch (const std::exception&) {
                reader.fail("field '" + key + "': invalid integer '" + v + "'");
            }
        };
        auto get_double = [&](const std::string& key) {
            const std::string v = get(key);
            char* end = nullptr;
            const double out = std::strtod(v.c_str(), &end);
            if (end != v.c_str() + v.size() || v.empty())
                reader.fail("field '" + key + "': invalid number '" + v + "'");
            return out;
        };

        if (kind == "intersection") {
            Intersection it;
            it.id = get_int("id");
            it.x = get_double("x");
            it.y = get_double("y");
            xs.push_back(it);
        } else if (kind == "road") {
            Road rd;
            rd.id = get_int("id");
            rd.head = get_int("head");
            rd.tail = get_int("tail");
            rd.length = get_double("length");
            rd.lanes = get_int("lanes");
            rd.free_flow_speed = get_double("free_flow_speed");
            const std::string list = get("allowed_next");
            if (!list.empty()) {
                std::istringstream ls(list);
                std::string item;
                while (std::getline(ls, item, ',')) {
                    try {
                        rd.allowed_next.push_back(std::stoi(item));
                    } catch (const std::exception&) {
                        reader.fail("field 'allowed_next': invalid entry '" + item + "'");
                    }
                }
            }
            roads.push_back(rd);
        } else {
            reader.fail("unknown record type '" + kind + "'");
        }
    }

    try {
        return RoadNetwork::from_parts(std::move(xs), std::move(roads));
    } catch (const LoadError& e) {
        throw LoadError(origin + ": " + e.what());
    }
}

RoadNetwork load_network(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw LoadError(path + ": cannot open file");
    return parse_network(in, path);
}

void write_network(const RoadNetwork& net, std::ostream& out) {
    out << "format_version = 1\n";
    for (const auto& it : net.intersections())
        out << "intersection id=" << it.id << " x=" << fmt_double(it.x)
            << " y=" << fmt_double(it.y) << "\n";
    for (const auto& rd : net.roads()) {
        out << "road id=" << rd.id << " head=" << rd.head << " tail=" << rd.tail
            << " length=" << fmt_double(rd.length) << " lanes=" << rd.lanes
            << " free_flow_speed=" << fmt_double(rd.free_flow_speed) << " allowed_next=";
        for (size_t i = 0; i < rd.allowed_next.size(); ++i) {
            if (i) out << ",";
            out << rd.allowed_next[i];
        }
        out << "\n";
    }
}

void save_network(const RoadNetwork& net, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw LoadError(path + ": cannot open file for writing");
    write_network(net, out);
}

}  // namespace marl::net
