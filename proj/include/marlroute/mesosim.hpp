#pragma once

#include <deque>
#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

#include "marlroute/netgraph.hpp"

namespace marl::sim {

struct TripSpec {
    int vc = -1;
    int origin_road = -1;
    int dest_intersection = -1;
    int depart_time = 0;
    int t_max = -1;  // -1: defaulted to depart + trip horizon at insertion
};

enum class TripStatus { EnRoute, Arrived, Failed };

struct RoutingQuery {
    int t = 0;
    int vc = -1;
    int u = -1;   // agent id, = road(r_c).tail
    int r_c = -1;
    int i_d = -1;
    int t_max = 0;
};

struct RoutingResponse {
    enum class Kind { Success, Fail, NextRoad };
    Kind kind = Kind::Fail;
    int road = -1;

    static RoutingResponse success() { return {Kind::Success, -1}; }
    static RoutingResponse fail() { return {Kind::Fail, -1}; }
    static RoutingResponse next(int road) { return {Kind::NextRoad, road}; }
};

using Router = std::function<RoutingResponse(const RoutingQuery&)>;

struct TripRecord {
    int vc = -1;
    int origin_road = -1;
    int dest = -1;
    int depart = 0;
    int end_t = -1;
    TripStatus status = TripStatus::EnRoute;
    double travel_time = 0.0;
    int hops = 0;  // number of road transitions
    double freeflow_time = 0.0;
};

struct MetricsReport {
    std::optional<double> avtt;
    double rsr = 0.0;
    int64_t completed = 0;
    int64_t total = 0;  // vehicles introduced into the network
    double mean_congested_fraction = 0.0;
    int64_t generated = 0;
    int64_t dropped_at_queue = 0;
    int steps = 0;
    std::vector<TripRecord> trips;

    std::string to_json() const;
    void write_trip_csv(std::ostream& out) const;
};

struct SimConfig {
    double demand_rate = 0.0;  // vehicles per second
    int vehicle_cap = 200;
    int max_waiting_vehicles = 40;
    double congestion_speed_factor = 0.5;
    double rho_jam = 1.0 / 7.5;  // vehicles per meter per lane
    double v_min_frac = 0.1;
    int demand_duration_steps = -1;  // -1: demand active for the whole episode
    int trip_horizon = -1;           // default t_max = depart + horizon; -1: episode end
    uint64_t seed = 0;
};

// Greenshields speed for a road holding `count` vehicles.
double edge_speed(const net::Road& road, int count, const SimConfig& cfg);
bool is_congested(double speed, double free_flow_speed, double csf);

struct StepEvents {
    int queries = 0;
    int arrivals = 0;
    int failures = 0;
    int inserted = 0;
    double congested_fraction = 0.0;
};

struct Counters {
    int64_t generated = 0;
    int64_t dropped = 0;
    int64_t waiting = 0;
    int64_t active = 0;
    int64_t arrived = 0;
    int64_t failed = 0;
    int64_t started = 0;
};

struct SystemSummary {
    int active_vehicles = 0;
    double throughput_ratio = 0.0;
    double mean_trip_inefficiency = 1.0;
    double vicinity_speed_stddev = 0.0;
};

// Window deltas for epoch-style reward computation.
struct FlowCounters {
    int64_t started = 0;
    int64_t completed = 0;
    double inefficiency_sum = 0.0;  // over completions
    double congested_fraction_sum = 0.0;
    int steps = 0;
};

class Simulation {
public:
    Simulation(std::shared_ptr<const net::RoadNetwork> net, SimConfig cfg);

    const net::RoadNetwork& network() const { return *net_; }
    const SimConfig& config() const { return cfg_; }
    int now() const { return t_; }
    int max_steps() const { return max_steps_; }

    void inject_trip(TripSpec spec);
    void register_hubs(std::vector<int> hub_intersections, double r_vic);

    // Declares the episode length; pins default t_max and the demand window.
    void begin_episode(int max_steps);
    StepEvents step(const Router& router);
    // Retires everything still en-route as failed and closes accounting.
    void finish();
    MetricsReport report() const;

    // Convenience: begin_episode + max_steps x step + finish.
    MetricsReport run_episode(const Router& router, int max_steps);

    // --- traffic state ---
    int road_count(int r) const { return road_count_[r]; }
    double road_speed(int r) const { return road_speed_[r]; }
    bool road_congested(int r) const;
    std::vector<uint8_t> intersection_state(int i) const;
    std::vector<uint8_t> network_state() const;
    // network_state packed into 64-bit words, for compact replay snapshots.
    std::vector<uint64_t> network_state_words() const;

    double vicinity_speed(int hub_intersection, double r_vic) const;
    double congestion_ratio(int hub_intersection, double r_vic) const;
    SystemSummary system_summary() const;
    double congested_fraction() const;

    Counters counters() const;
    FlowCounters flow_counters() const;

    int active_count() const { return static_cast<int>(active_.size()); }
    double freeflow_trip_time(int origin_road, int dest) const;
    const std::vector<TripRecord>& trip_log() const { return records_; }

private:
    struct Vehicle {
        int vc = -1;
        int road = -1;
        double pos = 0.0;
        int dest = -1;
        int depart = 0;
        int t_max = 0;
        int hops = 0;
        double freeflow_time = 0.0;
        TripStatus status = TripStatus::EnRoute;
    };

    void recompute_speeds();
    void insert_vehicle(const TripSpec& spec, StepEvents& ev);
    void insert_from_queues(StepEvents& ev);
    void spawn_demand();
    void retire(Vehicle& v, TripStatus status);
    const net::RouteTable& freeflow_table(int dest) const;

    std::shared_ptr<const net::RoadNetwork> net_;
    SimConfig cfg_;
    Rng rng_;
    int t_ = 0;
    int steps_done_ = 0;
    int max_steps_ = -1;
    bool finished_ = false;

    std::vector<int> road_count_;
    std::vector<double> road_speed_;
    std::vector<double> move_speed_;
    std::vector<Vehicle> vehicles_;
    std::vector<int> active_;  // vehicle ids in insertion order
    std::deque<TripSpec> waiting_;
    std::deque<TripSpec> injected_;
    std::vector<TripRecord> records_;

    int64_t generated_ = 0;
    int64_t dropped_ = 0;
    int64_t started_ = 0;
    int64_t completed_ = 0;
    int64_t failed_ = 0;
    double inefficiency_sum_ = 0.0;
    double congested_fraction_sum_ = 0.0;

    std::vector<int> hubs_;
    double hub_r_vic_ = 0.0;
    std::vector<std::vector<int>> hub_vicinity_roads_;

    std::vector<double> freeflow_weights_;
    mutable std::unordered_map<int, std::unique_ptr<net::RouteTable>> freeflow_tables_;
};

}  // namespace marl::sim
