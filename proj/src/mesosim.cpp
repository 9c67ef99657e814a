#include "marlroute/mesosim.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <ostream>
#include <sstream>

namespace marl::sim {

namespace {
constexpr double kEps = 1e-9;
constexpr int kMaxTransitionsPerStep = 1000;

std::string fmt(double v) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}
}  // namespace

double edge_speed(const net::Road& road, int count, const SimConfig& cfg) {
    const double rho = count / (road.length * road.lanes);
    const double factor = std::max(cfg.v_min_frac, 1.0 - rho / cfg.rho_jam);
    return road.free_flow_speed * factor;
}

bool is_congested(double speed, double free_flow_speed, double csf) {
    return speed < csf * free_flow_speed;
}

Simulation::Simulation(std::shared_ptr<const net::RoadNetwork> net, SimConfig cfg)
    : net_(std::move(net)),
      cfg_(cfg),
      rng_(cfg.seed),
      road_count_(net_->num_roads(), 0),
      road_speed_(net_->num_roads(), 0.0),
      move_speed_(net_->num_roads(), 0.0),
      freeflow_weights_(net_->free_flow_weights()) {
    recompute_speeds();
}

void Simulation::inject_trip(TripSpec spec) {
    if (spec.origin_road < 0 || spec.origin_road >= net_->num_roads())
        throw std::invalid_argument("inject_trip: bad origin road");
    if (spec.dest_intersection < 0 || spec.dest_intersection >= net_->num_intersections())
        throw std::invalid_argument("inject_trip: bad destination");
    if (spec.t_max >= 0 && spec.t_max <= spec.depart_time)
        throw std::invalid_argument("inject_trip: t_max must exceed depart_time");
    ++generated_;
    injected_.push_back(spec);
}

void Simulation::register_hubs(std::vector<int> hub_intersections, double r_vic) {
    hubs_ = std::move(hub_intersections);
    hub_r_vic_ = r_vic;
    hub_vicinity_roads_.assign(hubs_.size(), {});
    for (size_t k = 0; k < hubs_.size(); ++k) {
        for (int r = 0; r < net_->num_roads(); ++r) {
            const auto& rd = net_->road(r);
            if (net_->euclidean(rd.head, hubs_[k]) <= r_vic &&
                net_->euclidean(rd.tail, hubs_[k]) <= r_vic)
                hub_vicinity_roads_[k].push_back(r);
        }
    }
}

void Simulation::begin_episode(int max_steps) {
    if (t_ != 0 || steps_done_ != 0)
        throw std::logic_error("begin_episode requires a fresh simulation");
    max_steps_ = max_steps;
}

void Simulation::recompute_speeds() {
    for (int r = 0; r < net_->num_roads(); ++r) {
        road_speed_[r] = edge_speed(net_->road(r), road_count_[r], cfg_);
        // A vehicle is slowed by the OTHER vehicles on its road: a single
        // vehicle on an empty road travels at free flow.
        move_speed_[r] =
            edge_speed(net_->road(r), std::max(0, road_count_[r] - 1), cfg_);
    }
}

const net::RouteTable& Simulation::freeflow_table(int dest) const {
    auto it = freeflow_tables_.find(dest);
    if (it == freeflow_tables_.end()) {
        it = freeflow_tables_
                 .emplace(dest, std::make_unique<net::RouteTable>(*net_, freeflow_weights_, dest))
                 .first;
    }
    return *it->second;
}

double Simulation::freeflow_trip_time(int origin_road, int dest) const {
    const auto& rd = net_->road(origin_road);
    double t = rd.free_flow_time();
    if (rd.tail != dest) t += freeflow_table(dest).cost_from_intersection(rd.tail);
    return t;
}

void Simulation::retire(Vehicle& v, TripStatus status) {
    v.status = status;
    --road_count_[v.road];
    TripRecord rec;
    rec.vc = v.vc;
    rec.origin_road = records_[v.vc].origin_road;
    rec.dest = v.dest;
    rec.depart = v.depart;
    rec.end_t = t_;
    rec.status = status;
    rec.travel_time = static_cast<double>(t_ - v.depart);
    rec.hops = v.hops;
    rec.freeflow_time = v.freeflow_time;
    records_[v.vc] = rec;
    if (status == TripStatus::Arrived) {
        ++completed_;
        if (v.freeflow_time > 0) inefficiency_sum_ += rec.travel_time / v.freeflow_time;
    } else {
        ++failed_;
    }
}

void Simulation::insert_vehicle(const TripSpec& spec, StepEvents& ev) {
    Vehicle v;
    v.vc = static_cast<int>(vehicles_.size());
    v.road = spec.origin_road;
    v.pos = 0.0;
    v.dest = spec.dest_intersection;
    v.depart = t_;
    const int horizon =
        cfg_.trip_horizon >= 0 ? cfg_.trip_horizon : (max_steps_ >= 0 ? max_steps_ : 1 << 29);
    v.t_max = spec.t_max >= 0 ? spec.t_max : t_ + horizon;
    v.freeflow_time = freeflow_trip_time(spec.origin_road, spec.dest_intersection);
    ++road_count_[v.road];
    ++started_;
    ++ev.inserted;
    active_.push_back(v.vc);
    TripRecord rec;
    rec.vc = v.vc;
    rec.origin_road = spec.origin_road;
    rec.dest = v.dest;
    rec.depart = v.depart;
    rec.freeflow_time = v.freeflow_time;
    records_.push_back(rec);
    vehicles_.push_back(v);
}

void Simulation::insert_from_queues(StepEvents& ev) {
    // Scripted trips are placed at their exact depart time when capacity allows.
    while (!injected_.empty() && injected_.front().depart_time <= t_ &&
           static_cast<int>(active_.size()) < cfg_.vehicle_cap) {
        TripSpec spec = injected_.front();
        injected_.pop_front();
        insert_vehicle(spec, ev);
    }
    while (!waiting_.empty() && static_cast<int>(active_.size()) < cfg_.vehicle_cap) {
        TripSpec spec = waiting_.front();
        waiting_.pop_front();
        insert_vehicle(spec, ev);
    }
}

void Simulation::spawn_demand() {
    const bool window_open =
        cfg_.demand_duration_steps < 0 || steps_done_ <= cfg_.demand_duration_steps;
    if (!window_open || cfg_.demand_rate <= 0) return;
    const int whole = static_cast<int>(cfg_.demand_rate);
    const double frac = cfg_.demand_rate - whole;
    int births = whole + (rng_.bernoulli(frac) ? 1 : 0);
    for (int i = 0; i < births; ++i) {
        int origin, dest;
        do {
            origin = rng_.uniform_int(net_->num_roads());
            const int dest_road = rng_.uniform_int(net_->num_roads());
            dest = net_->road(dest_road).tail;
        } while (net_->road(origin).tail == dest);
        ++generated_;
        if (static_cast<int>(waiting_.size()) >= cfg_.max_waiting_vehicles) {
            ++dropped_;
            continue;
        }
        TripSpec spec;
        spec.origin_road = origin;
        spec.dest_intersection = dest;
        spec.depart_time = t_;
        waiting_.push_back(spec);
    }
}

StepEvents Simulation::step(const Router& router) {
    if (finished_) throw std::logic_error("step after finish");
    StepEvents ev{};

    insert_from_queues(ev);  // scripted departures at the current time

    // (1) speeds from current occupancy
    recompute_speeds();
    int congested = 0;
    for (int r = 0; r < net_->num_roads(); ++r)
        if (road_congested(r)) ++congested;
    ev.congested_fraction = static_cast<double>(congested) / net_->num_roads();
    congested_fraction_sum_ += ev.congested_fraction;

    // (2) movement
    for (int vc : active_) {
        Vehicle& v = vehicles_[vc];
        v.pos += move_speed_[v.road];  // dt = 1 s
    }

    // (3) queries at road ends
    t_ += 1;
    std::vector<int> still_active;
    still_active.reserve(active_.size());
    for (int vc : active_) {
        Vehicle& v = vehicles_[vc];
        int transitions = 0;
        while (v.status == TripStatus::EnRoute &&
               v.pos >= net_->road(v.road).length - kEps) {
            if (++transitions > kMaxTransitionsPerStep)
                throw ProtocolViolation("vehicle " + std::to_string(vc) +
                                        " exceeded per-step transition limit");
            RoutingQuery q;
            q.t = t_;
            q.vc = vc;
            q.r_c = v.road;
            q.u = net_->road(v.road).tail;
            q.i_d = v.dest;
            q.t_max = v.t_max;
            ++ev.queries;
            const RoutingResponse resp = router(q);
            if (resp.kind == RoutingResponse::Kind::Success) {
                if (q.u != q.i_d)
                    throw ProtocolViolation("router returned success away from destination");
                retire(v, TripStatus::Arrived);
                ++ev.arrivals;
            } else if (resp.kind == RoutingResponse::Kind::Fail) {
                retire(v, TripStatus::Failed);
                ++ev.failures;
            } else {
                const auto& nh = net::next_hops(*net_, v.road);
                if (!std::binary_search(nh.begin(), nh.end(), resp.road))
                    throw ProtocolViolation("router returned road " +
                                            std::to_string(resp.road) +
                                            " outside NH(" + std::to_string(v.road) + ")");
                const double overshoot = std::max(0.0, v.pos - net_->road(v.road).length);
                --road_count_[v.road];
                ++road_count_[resp.road];
                v.road = resp.road;
                v.pos = overshoot;
                ++v.hops;
            }
        }
        if (v.status == TripStatus::EnRoute) still_active.push_back(vc);
    }
    active_ = std::move(still_active);

    // (4) demand
    spawn_demand();
    insert_from_queues(ev);

    ++steps_done_;
    return ev;
}

void Simulation::finish() {
    if (finished_) return;
    for (int vc : active_) retire(vehicles_[vc], TripStatus::Failed);
    active_.clear();
    finished_ = true;
}

MetricsReport Simulation::report() const {
    MetricsReport rep;
    rep.completed = completed_;
    rep.total = started_;
    rep.generated = generated_;
    rep.dropped_at_queue = dropped_;
    rep.steps = steps_done_;
    rep.rsr = started_ > 0 ? 100.0 * static_cast<double>(completed_) / started_ : 0.0;
    rep.mean_congested_fraction =
        steps_done_ > 0 ? congested_fraction_sum_ / steps_done_ : 0.0;
    double tt_sum = 0.0;
    for (const auto& rec : records_) {
        if (rec.status == TripStatus::Arrived) tt_sum += rec.travel_time;
    }
    if (completed_ > 0) rep.avtt = tt_sum / completed_;
    rep.trips = records_;
    return rep;
}

MetricsReport Simulation::run_episode(const Router& router, int steps) {
    begin_episode(steps);
    for (int s = 0; s < steps; ++s) step(router);
    finish();
    return report();
}

bool Simulation::road_congested(int r) const {
    return is_congested(road_speed_[r], net_->road(r).free_flow_speed,
                        cfg_.congestion_speed_factor);
}

std::vector<uint8_t> Simulation::intersection_state(int i) const {
    std::vector<uint8_t> s(net_->max_out_degree(), 0);
    const auto& out = net_->out_roads(i);
    for (size_t j = 0; j < out.size(); ++j) s[j] = road_congested(out[j]) ? 1 : 0;
    return s;
}

std::vector<uint8_t> Simulation::network_state() const {
    const int f = net_->max_out_degree();
    std::vector<uint8_t> s(static_cast<size_t>(net_->num_intersections()) * f, 0);
    for (int i = 0; i < net_->num_intersections(); ++i) {
        const auto& out = net_->out_roads(i);
        for (size_t j = 0; j < out.size(); ++j)
            s[static_cast<size_t>(i) * f + j] = road_congested(out[j]) ? 1 : 0;
    }
    return s;
}

std::vector<uint64_t> Simulation::network_state_words() const {
    const auto bits = network_state();
    std::vector<uint64_t> words((bits.size() + 63) / 64, 0);
    for (size_t i = 0; i < bits.size(); ++i)
        if (bits[i]) words[i / 64] |= (1ULL << (i % 64));
    return words;
}

double Simulation::vicinity_speed(int hub_intersection, double r_vic) const {
    const auto& hub = net_->intersection(hub_intersection);
    double sum = 0.0;
    int count = 0;
    for (int vc : active_) {
        const Vehicle& v = vehicles_[vc];
        const auto& rd = net_->road(v.road);
        const auto& a = net_->intersection(rd.head);
        const auto& b = net_->intersection(rd.tail);
        const double f = std::clamp(v.pos / rd.length, 0.0, 1.0);
        const double px = a.x + (b.x - a.x) * f;
        const double py = a.y + (b.y - a.y) * f;
        if (std::hypot(px - hub.x, py - hub.y) <= r_vic) {
            sum += road_speed_[v.road] / rd.free_flow_speed;
            ++count;
        }
    }
    return count == 0 ? 1.0 : sum / count;
}

double Simulation::congestion_ratio(int hub_intersection, double r_vic) const {
    // Prefer the precomputed set when it matches the registered radius.
    const std::vector<int>* roads = nullptr;
    std::vector<int> scratch;
    if (hub_r_vic_ == r_vic) {
        for (size_t k = 0; k < hubs_.size(); ++k)
            if (hubs_[k] == hub_intersection) roads = &hub_vicinity_roads_[k];
    }
    if (!roads) {
        for (int r = 0; r < net_->num_roads(); ++r) {
            const auto& rd = net_->road(r);
            if (net_->euclidean(rd.head, hub_intersection) <= r_vic &&
                net_->euclidean(rd.tail, hub_intersection) <= r_vic)
                scratch.push_back(r);
        }
        roads = &scratch;
    }
    if (roads->empty()) return 1.0;
    double sum = 0.0;
    for (int r : *roads) sum += net_->road(r).free_flow_speed / road_speed_[r];
    return sum / roads->size();
}

SystemSummary Simulation::system_summary() const {
    SystemSummary s;
    s.active_vehicles = static_cast<int>(active_.size());
    s.throughput_ratio =
        started_ > 0 ? static_cast<double>(completed_) / started_ : 0.0;
    s.mean_trip_inefficiency = completed_ > 0 ? inefficiency_sum_ / completed_ : 1.0;
    if (!hubs_.empty()) {
        std::vector<double> speeds;
        speeds.reserve(hubs_.size());
        for (int h : hubs_) speeds.push_back(vicinity_speed(h, hub_r_vic_));
        double mean = 0.0;
        for (double v : speeds) mean += v;
        mean /= speeds.size();
        double var = 0.0;
        for (double v : speeds) var += (v - mean) * (v - mean);
        s.vicinity_speed_stddev = std::sqrt(var / speeds.size());
    }
    return s;
}

double Simulation::congested_fraction() const {
    int congested = 0;
    for (int r = 0; r < net_->num_roads(); ++r)
        if (road_congested(r)) ++congested;
    return static_cast<double>(congested) / net_->num_roads();
}

Counters Simulation::counters() const {
    Counters c;
    c.generated = generated_;
    c.dropped = dropped_;
    c.waiting = static_cast<int64_t>(waiting_.size() + injected_.size());
    c.active = static_cast<int64_t>(active_.size());
    c.arrived = completed_;
    c.failed = failed_;
    c.started = started_;
    return c;
}

FlowCounters Simulation::flow_counters() const {
    FlowCounters f;
    f.started = started_;
    f.completed = completed_;
    f.inefficiency_sum = inefficiency_sum_;
    f.congested_fraction_sum = congested_fraction_sum_;
    f.steps = steps_done_;
    return f;
}

std::string MetricsReport::to_json() const {
    std::ostringstream os;
    os << "{\n";
    os << "  \"avtt\": " << (avtt ? fmt(*avtt) : "null") << ",\n";
    os << "  \"rsr\": " << fmt(rsr) << ",\n";
    os << "  \"completed\": " << completed << ",\n";
    os << "  \"total\": " << total << ",\n";
    os << "  \"mean_congested_fraction\": " << fmt(mean_congested_fraction) << ",\n";
    os << "  \"generated\": " << generated << ",\n";
    os << "  \"dropped_at_queue\": " << dropped_at_queue << ",\n";
    os << "  \"steps\": " << steps << "\n";
    os << "}";
    return os.str();
}

void MetricsReport::write_trip_csv(std::ostream& out) const {
    out << "vc,origin_road,dest,depart,end,status,travel_time,hops,freeflow_time\n";
    for (const auto& t : trips) {
        const char* st = t.status == TripStatus::Arrived
                             ? "arrived"
                             : (t.status == TripStatus::Failed ? "failed" : "en-route");
        out << t.vc << "," << t.origin_road << "," << t.dest << "," << t.depart << ","
            << t.end_t << "," << st << "," << fmt(t.travel_time) << "," << t.hops << ","
            << fmt(t.freeflow_time) << "\n";
    }
}

}  // namespace marl::sim
