#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "marlroute/common.hpp"

namespace marl::net {

struct Intersection {
    int id = -1;
    double x = 0.0;
    double y = 0.0;
    // Morton bits, y before x per level, most significant first; length 2*b.
    std::vector<uint8_t> zorder;
    // True where a routing agent is placed: out-degree >= 3, i.e. the
    // intersection offers more than one legal continuation.
    bool agent_controlled = false;
};

struct Road {
    int id = -1;
    int head = -1;  // origin intersection
    int tail = -1;  // destination intersection
    double length = 0.0;
    int lanes = 1;
    double free_flow_speed = 0.0;
    std::vector<int> allowed_next;  // ascending road ids

    double free_flow_time() const { return length / free_flow_speed; }
};

// Immutable after construction; safe for shared reads.
class RoadNetwork {
public:
    static RoadNetwork from_parts(std::vector<Intersection> intersections,
                                  std::vector<Road> roads);

    int num_intersections() const { return static_cast<int>(intersections_.size()); }
    int num_roads() const { return static_cast<int>(roads_.size()); }
    int max_out_degree() const { return max_out_degree_; }
    int zorder_bits_per_axis() const { return zorder_bits_; }

    const Intersection& intersection(int i) const { return intersections_.at(i); }
    const Road& road(int r) const { return roads_.at(r); }
    const std::vector<Intersection>& intersections() const { return intersections_; }
    const std::vector<Road>& roads() const { return roads_; }

    // Outgoing / incoming road ids of an intersection, ascending.
    const std::vector<int>& out_roads(int i) const { return out_roads_.at(i); }
    const std::vector<int>& in_roads(int i) const { return in_roads_.at(i); }
    int out_degree(int i) const { return static_cast<int>(out_roads_.at(i).size()); }
    int in_degree(int i) const { return static_cast<int>(in_roads_.at(i).size()); }

    // Intersections adjacent by a road in either direction, self included,
    // ascending. This is the GAT neighborhood N_i.
    const std::vector<int>& neighborhood(int i) const { return neighborhood_.at(i); }

    // Position of the slot of road r within out_roads(road(r).head).
    int action_slot(int r) const { return action_slot_.at(r); }

    std::vector<double> free_flow_weights() const;

    bool strongly_connected() const;

    double euclidean(int a, int b) const;
    double bounding_box_diagonal() const;

private:
    std::vector<Intersection> intersections_;
    std::vector<Road> roads_;
    std::vector<std::vector<int>> out_roads_;
    std::vector<std::vector<int>> in_roads_;
    std::vector<std::vector<int>> neighborhood_;
    std::vector<int> action_slot_;
    int max_out_degree_ = 0;
    int zorder_bits_ = 0;
};

RoadNetwork build_grid(int rows, int cols, double edge_len, double speed, int lanes);

RoadNetwork load_network(const std::string& path);
void save_network(const RoadNetwork& net, const std::string& path);
RoadNetwork parse_network(std::istream& in, const std::string& origin);
void write_network(const RoadNetwork& net, std::ostream& out);

// Legal continuations from road r, ascending road id (canonical action order).
const std::vector<int>& next_hops(const RoadNetwork& net, int road);

// Morton bits of intersection i at an explicit resolution; throws
// EncodingCollision when two intersections land in the same cell.
std::vector<uint8_t> zorder_id(const RoadNetwork& net, int i, int bits_per_axis);

// Express a nonnegative integer as a fixed-width bit vector, MSB first.
std::vector<uint8_t> bits_of(uint64_t value, int width);
uint64_t zorder_value(std::span<const uint8_t> bits);

// Minimal-weight road sequence from road(src).tail to intersection dst,
// excluding src itself; ties resolved to the lexicographically smallest
// road-id sequence. Throws NoPathError when unreachable.
std::vector<int> shortest_path(const RoadNetwork& net, std::span<const double> weights,
                               int src_road, int dst_intersection);

// Backward cost table for one destination under fixed weights: cost_from(r)
// is the total weight of the best sequence that enters road r and ends at
// the destination (inclusive of r). Reused by routers to extract many paths.
class RouteTable {
public:
    RouteTable(const RoadNetwork& net, std::span<const double> weights, int dst_intersection);

    int destination() const { return dst_; }
    bool reachable_via(int road) const;
    double cost_via(int road) const { return cost_.at(road); }

    // Best cost of any path departing intersection i (entering some out-road).
    double cost_from_intersection(int i) const;

    // Greedy min-cost continuation: the lexicographically smallest optimal
    // next road from `road`, or -1 when road.tail is the destination.
    int next_road_after(int road) const;

    std::vector<int> extract_path(int src_road) const;

private:
    const RoadNetwork& net_;
    int dst_;
    std::vector<double> cost_;
};

// Free-flow travel time between intersections honoring turn restrictions.
// row-major matrix [N x N]; entry infinity when unreachable.
std::vector<double> intersection_time_matrix(const RoadNetwork& net,
                                             std::span<const double> weights);

std::vector<int> filter_hub_candidates(const RoadNetwork& net);

std::vector<int> select_hubs(const RoadNetwork& net, const std::vector<int>& candidates,
                             int k, uint64_t seed);

struct HubGraph {
    std::vector<int> hubs;  // intersection ids
    // out_neighbors[k] = indices into hubs, ascending; parallel edge times.
    std::vector<std::vector<int>> out_neighbors;
    std::vector<std::vector<double>> edge_time;
    double r_vic = 0.0;   // meters
    double d_max = 0.0;   // meters

    int hub_index_of(int intersection_id) const;
};

double default_d_max(const RoadNetwork& net);

HubGraph connect_hubs(const RoadNetwork& net, const std::vector<int>& hubs, int k,
                      double d_max);

}  // namespace marl::net
