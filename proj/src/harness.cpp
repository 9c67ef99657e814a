#include "marlroute/harness.hpp"

#include <json.hpp>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <sstream>

namespace marl::run {

namespace fs = std::filesystem;
using nlohmann::json;

std::string model_name(Model m) {
    switch (m) {
        case Model::SPF: return "SPF";
        case Model::SPFWR: return "SPFWR";
        case Model::QR: return "QR";
        case Model::AN_H0: return "AN-h0";
        case Model::AN_H1: return "AN-h1";
        case Model::AN_H2: return "AN-h2";
        case Model::HHAN: return "HHAN";
    }
    return "?";
}

Model parse_model(const std::string& name) {
    if (name == "SPF") return Model::SPF;
    if (name == "SPFWR") return Model::SPFWR;
    if (name == "QR") return Model::QR;
    if (name == "AN-h0") return Model::AN_H0;
    if (name == "AN-h1") return Model::AN_H1;
    if (name == "AN-h2") return Model::AN_H2;
    if (name == "HHAN") return Model::HHAN;
    throw ConfigError("unknown model '" + name +
                      "' (expected SPF, SPFWR, QR, AN-h0, AN-h1, AN-h2 or HHAN)");
}

bool ScenarioConfig::trains() const {
    return model == Model::QR || model == Model::AN_H0 || model == Model::AN_H1 ||
           model == Model::AN_H2 || model == Model::HHAN;
}

int ScenarioConfig::effective_episode_steps() const {
    if (episode_steps) return *episode_steps;
    return model == Model::HHAN ? hhan_max_steps_default : 2000;
}

int ScenarioConfig::effective_train_episodes() const {
    if (!trains()) return 0;
    if (train_episodes) return *train_episodes;
    return model == Model::HHAN ? hhan_num_episodes_default : 800;
}

int ScenarioConfig::effective_demand_duration() const {
    if (demand_duration_steps) return *demand_duration_steps;
    return static_cast<int>(0.7 * effective_episode_steps());
}

sim::SimConfig ScenarioConfig::sim_config(uint64_t seed) const {
    sim::SimConfig sc;
    sc.demand_rate = effective_rate();
    sc.vehicle_cap = vehicle_cap;
    sc.max_waiting_vehicles = hhan.max_waiting_vehicles;
    sc.congestion_speed_factor = congestion_speed_factor;
    sc.demand_duration_steps = effective_demand_duration();
    sc.seed = seed;
    return sc;
}

uint64_t train_seed(uint64_t master, int episode) {
    return derive_seed(master, 0x7117, episode);
}

uint64_t eval_seed(int label) { return derive_seed(0xE7A1, 0xE7, label); }

// ---------------------------------------------------------------------------
// Config parsing

namespace {

std::string trim(const std::string& s) {
    const auto a = s.find_first_not_of(" \t\r");
    if (a == std::string::npos) return "";
    const auto b = s.find_last_not_of(" \t\r");
    return s.substr(a, b - a + 1);
}

bool parse_bool(const std::string& v, const std::string& key) {
    if (v == "True" || v == "true" || v == "1") return true;
    if (v == "False" || v == "false" || v == "0") return false;
    throw ConfigError("key '" + key + "': expected True/False, got '" + v + "'");
}

double parse_double(const std::string& v, const std::string& key) {
    char* end = nullptr;
    const double out = std::strtod(v.c_str(), &end);
    if (v.empty() || end != v.c_str() + v.size())
        throw ConfigError("key '" + key + "': invalid number '" + v + "'");
    return out;
}

int parse_int(const std::string& v, const std::string& key) {
    try {
        size_t pos = 0;
        const int out = std::stoi(v, &pos);
        if (pos != v.size()) throw std::invalid_argument(v);
        return out;
    } catch (const std::exception&) {
        throw ConfigError("key '" + key + "': invalid integer '" + v + "'");
    }
}

std::vector<int> parse_int_list(const std::string& v, const std::string& key) {
    std::string body = trim(v);
    if (!body.empty() && body.front() == '[') {
        if (body.back() != ']') throw ConfigError("key '" + key + "': unbalanced brackets");
        body = body.substr(1, body.size() - 2);
    }
    std::vector<int> out;
    if (const auto dots = body.find(".."); dots != std::string::npos) {
        const int lo = parse_int(trim(body.substr(0, dots)), key);
        const int hi = parse_int(trim(body.substr(dots + 2)), key);
        for (int i = lo; i <= hi; ++i) out.push_back(i);
        return out;
    }
    std::istringstream ss(body);
    std::string item;
    while (std::getline(ss, item, ',')) {
        item = trim(item);
        if (!item.empty()) out.push_back(parse_int(item, key));
    }
    return out;
}

std::string int_list_to_string(const std::vector<int>& v) {
    std::string out = "[";
    for (size_t i = 0; i < v.size(); ++i) {
        if (i) out += ",";
        out += std::to_string(v[i]);
    }
    return out + "]";
}

std::string fmt_double(double v) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

}  // namespace

ScenarioConfig parse_config(std::istream& in, const std::string& origin) {
    ScenarioConfig cfg;
    std::vector<int> hidden_by_hops[3] = {{8, 6}, {10, 6}, {12, 9, 6}};
    std::string line;
    int line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        const std::string stripped = trim(line);
        if (stripped.empty() || stripped[0] == '#') continue;
        const auto eq = stripped.find('=');
        if (eq == std::string::npos)
            throw ConfigError(origin + ":" + std::to_string(line_no) +
                              ": expected 'key = value'");
        const std::string key = trim(stripped.substr(0, eq));
        const std::string val = trim(stripped.substr(eq + 1));
        auto fail = [&](const std::string& msg) {
            throw ConfigError(origin + ":" + std::to_string(line_no) + ": " + msg);
        };
        try {
            // scenario
            if (key == "model") cfg.model = parse_model(val);
            else if (key == "network") cfg.network_path = val;
            else if (key == "grid-rows") cfg.grid_rows = parse_int(val, key);
            else if (key == "grid-cols") cfg.grid_cols = parse_int(val, key);
            else if (key == "grid-edge-len") cfg.grid_edge_len = parse_double(val, key);
            else if (key == "grid-speed-mps") cfg.grid_speed = parse_double(val, key);
            else if (key == "grid-lanes") cfg.grid_lanes = parse_int(val, key);
            else if (key == "demand-rate") cfg.demand_rate = parse_double(val, key);
            else if (key == "vehicle-cap") cfg.vehicle_cap = parse_int(val, key);
            else if (key == "congestion-speed-factor")
                cfg.congestion_speed_factor = parse_double(val, key);
            else if (key == "heavy-traffic") cfg.heavy_traffic = parse_bool(val, key);
            else if (key == "episode-steps") cfg.episode_steps = parse_int(val, key);
            else if (key == "train-episodes") cfg.train_episodes = parse_int(val, key);
            else if (key == "demand-duration-steps")
                cfg.demand_duration_steps = parse_int(val, key);
            else if (key == "eval-seeds") cfg.eval_seeds = parse_int_list(val, key);
            else if (key == "master-seed")
                cfg.master_seed = static_cast<uint64_t>(std::stoull(val));
            else if (key == "spfwr-period") cfg.spfwr_period = parse_double(val, key);
            else if (key == "qr-alpha") cfg.qr_alpha = parse_double(val, key);
            else if (key == "qr-gamma") cfg.qr_gamma = parse_double(val, key);
            else if (key == "epsilon-decay-episodes") {
                cfg.an.eps_decay_episodes = parse_int(val, key);
            }
            // Table 1 (AN)
            else if (key == "Optimizer") {
                if (val != "Adam") fail("only the Adam optimizer is supported");
            } else if (key == "Optimizer eps") {
                cfg.an.adam_eps = parse_double(val, key);
            } else if (key == "learning rate") {
                cfg.an.lr = parse_double(val, key);
                cfg.an.gat_lr = cfg.an.lr;  // Tables 1 and 2 share the name and value
            } else if (key == "batch-size") cfg.an.batch_size = parse_int(val, key);
            else if (key == "batch-norm") {
                if (parse_bool(val, key)) fail("batch-norm is not supported");
            } else if (key == "gradient-clipping-norm")
                cfg.an.grad_clip = parse_double(val, key);
            else if (key == "buffer-size") cfg.an.buffer_size = parse_int(val, key);
            else if (key == "num-new-exp-to-learn")
                cfg.an.num_new_exp_to_learn = parse_int(val, key);
            else if (key == "tau") cfg.an.tau = parse_double(val, key);
            else if (key == "discount rate") cfg.an.gamma = parse_double(val, key);
            else if (key == "epsilon-decay-rate-denom" || key == "stop-exploration-episode")
                cfg.recorded.emplace_back(key, val);  // non-operative, see docs
            else if (key == "linear-hidden-units-size AN(0hop)")
                hidden_by_hops[0] = parse_int_list(val, key);
            else if (key == "linear-hidden-units-size AN(1hop)")
                hidden_by_hops[1] = parse_int_list(val, key);
            else if (key == "linear-hidden-units-size AN(2hop)")
                hidden_by_hops[2] = parse_int_list(val, key);
            // Table 2 (GAT)
            else if (key == "num-heads-per-layer") {
                if (parse_int(val, key) != 3) fail("the GAT stack is fixed at 3 heads");
            } else if (key == "add-skip-connection") {
                if (parse_bool(val, key)) fail("skip connections are not supported");
            } else if (key == "bias") {
                if (!parse_bool(val, key)) fail("bias-free GAT layers are not supported");
            } else if (key == "dropout") cfg.an.gat_dropout = parse_double(val, key);
            else if (key == "layer-0 output dimension") {
                if (parse_int(val, key) != 7) fail("layer-0 output dimension is fixed at 7");
            } else if (key == "layer-1 output dimension") {
                if (parse_int(val, key) != 10) fail("layer-1 output dimension is fixed at 10");
            } else if (key == "intersection state dimension") {
                cfg.recorded.emplace_back(key, val);  // derived from the network
            }
            // Table 3 (HHAN)
            else if (key == "num_hubs") cfg.hhan.num_hubs = parse_int(val, key);
            else if (key == "hub_agent_dim") cfg.hhan.hub_agent_dim = parse_int(val, key);
            else if (key == "max_waiting_vehicles")
                cfg.hhan.max_waiting_vehicles = parse_int(val, key);
            else if (key == "z_order_embedding_dim")
                cfg.hhan.z_order_embedding_dim = parse_int(val, key);
            else if (key == "num_episodes") cfg.hhan_num_episodes_default = parse_int(val, key);
            else if (key == "max_steps_per_episode")
                cfg.hhan_max_steps_default = parse_int(val, key);
            else if (key == "lr") cfg.hhan.lr = parse_double(val, key);
            else if (key == "gamma") cfg.hhan.gamma = parse_double(val, key);
            else if (key == "epsilon_start") cfg.hhan.eps_start = parse_double(val, key);
            else if (key == "epsilon_end") cfg.hhan.eps_end = parse_double(val, key);
            else if (key == "epsilon_decay") cfg.hhan.eps_decay = parse_double(val, key);
            else if (key == "polyak") cfg.hhan.polyak = parse_double(val, key);
            else if (key == "min_gce_buffer_size")
                cfg.hhan.min_gce_buffer_size = parse_int(val, key);
            else if (key == "gce_buffer_capacity")
                cfg.hhan.gce_buffer_capacity = parse_int(val, key);
            else if (key == "qmix_batch_size") cfg.hhan.qmix_batch_size = parse_int(val, key);
            else if (key == "qmix_update_frequency_steps")
                cfg.hhan.qmix_update_frequency_steps = parse_int(val, key);
            else if (key == "mixing_hidden_dim")
                cfg.hhan.mixing_hidden_dim = parse_int(val, key);
            else if (key == "mixing_lr") cfg.hhan.mixing_lr = parse_double(val, key);
            else if (key == "gce_size") cfg.hhan.gce_size = parse_int(val, key);
            else if (key == "gce_max_sim_time") cfg.hhan.gce_max_sim_time = parse_int(val, key);
            else if (key == "clip_grad_norm") cfg.hhan.clip_grad_norm = parse_double(val, key);
            else fail("unknown key '" + key + "'");
        } catch (const ConfigError&) {
            throw;
        } catch (const std::exception& e) {
            fail(e.what());
        }
    }

    switch (cfg.model) {
        case Model::AN_H0: cfg.an.hops = 0; cfg.an.hidden = hidden_by_hops[0]; break;
        case Model::AN_H1: cfg.an.hops = 1; cfg.an.hidden = hidden_by_hops[1]; break;
        case Model::AN_H2: cfg.an.hops = 2; cfg.an.hidden = hidden_by_hops[2]; break;
        default: break;
    }
    if (cfg.eval_seeds.empty()) {
        for (int i = 0; i < 50; ++i) cfg.eval_seeds.push_back(i);
    }
    cfg.an.seed = cfg.master_seed;
    cfg.hhan.seed = cfg.master_seed;

    if (cfg.demand_rate < 0) throw ConfigError("demand-rate must be >= 0");
    if (cfg.vehicle_cap < 1) throw ConfigError("vehicle-cap must be >= 1");
    if (cfg.effective_episode_steps() < 1) throw ConfigError("episode-steps must be >= 1");
    if (cfg.hhan.num_hubs < 2) throw ConfigError("num_hubs must be >= 2");
    return cfg;
}

ScenarioConfig load_config(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError(path + ": cannot open config file");
    return parse_config(in, path);
}

std::string serialize_config(const ScenarioConfig& cfg) {
    std::ostringstream os;
    os << "model = " << model_name(cfg.model) << "\n";
    if (!cfg.network_path.empty()) os << "network = " << cfg.network_path << "\n";
    os << "grid-rows = " << cfg.grid_rows << "\n";
    os << "grid-cols = " << cfg.grid_cols << "\n";
    os << "grid-edge-len = " << fmt_double(cfg.grid_edge_len) << "\n";
    os << "grid-speed-mps = " << fmt_double(cfg.grid_speed) << "\n";
    os << "grid-lanes = " << cfg.grid_lanes << "\n";
    os << "demand-rate = " << fmt_double(cfg.demand_rate) << "\n";
    os << "vehicle-cap = " << cfg.vehicle_cap << "\n";
    os << "congestion-speed-factor = " << fmt_double(cfg.congestion_speed_factor) << "\n";
    os << "heavy-traffic = " << (cfg.heavy_traffic ? "True" : "False") << "\n";
    os << "episode-steps = " << cfg.effective_episode_steps() << "\n";
    os << "demand-duration-steps = " << cfg.effective_demand_duration() << "\n";
    os << "train-episodes = " << cfg.effective_train_episodes() << "\n";
    os << "eval-seeds = " << int_list_to_string(cfg.eval_seeds) << "\n";
    os << "master-seed = " << cfg.master_seed << "\n";
    os << "spfwr-period = " << fmt_double(cfg.spfwr_period) << "\n";
    os << "qr-alpha = " << fmt_double(cfg.qr_alpha) << "\n";
    os << "qr-gamma = " << fmt_double(cfg.qr_gamma) << "\n";
    os << "Optimizer = Adam\n";
    os << "Optimizer eps = " << fmt_double(cfg.an.adam_eps) << "\n";
    os << "learning rate = " << fmt_double(cfg.an.lr) << "\n";
    os << "batch-size = " << cfg.an.batch_size << "\n";
    os << "batch-norm = False\n";
    os << "gradient-clipping-norm = " << fmt_double(cfg.an.grad_clip) << "\n";
    os << "buffer-size = " << cfg.an.buffer_size << "\n";
    os << "num-new-exp-to-learn = " << cfg.an.num_new_exp_to_learn << "\n";
    os << "tau = " << fmt_double(cfg.an.tau) << "\n";
    os << "discount rate = " << fmt_double(cfg.an.gamma) << "\n";
    os << "epsilon-decay-episodes = " << cfg.an.eps_decay_episodes << "\n";
    os << "linear-hidden-units-size AN(0hop) = [8,6]\n";
    os << "linear-hidden-units-size AN(1hop) = [10,6]\n";
    os << "linear-hidden-units-size AN(2hop) = [12,9,6]\n";
    os << "num-heads-per-layer = 3\n";
    os << "add-skip-connection = False\n";
    os << "bias = True\n";
    os << "dropout = " << fmt_double(cfg.an.gat_dropout) << "\n";
    os << "layer-0 output dimension = 7\n";
    os << "layer-1 output dimension = 10\n";
    os << "num_hubs = " << cfg.hhan.num_hubs << "\n";
    os << "hub_agent_dim = " << cfg.hhan.hub_agent_dim << "\n";
    os << "max_waiting_vehicles = " << cfg.hhan.max_waiting_vehicles << "\n";
    os << "z_order_embedding_dim = " << cfg.hhan.z_order_embedding_dim << "\n";
    os << "num_episodes = " << cfg.hhan_num_episodes_default << "\n";
    os << "max_steps_per_episode = " << cfg.hhan_max_steps_default << "\n";
    os << "lr = " << fmt_double(cfg.hhan.lr) << "\n";
    os << "gamma = " << fmt_double(cfg.hhan.gamma) << "\n";
    os << "epsilon_start = " << fmt_double(cfg.hhan.eps_start) << "\n";
    os << "epsilon_end = " << fmt_double(cfg.hhan.eps_end) << "\n";
    os << "epsilon_decay = " << fmt_double(cfg.hhan.eps_decay) << "\n";
    os << "polyak = " << fmt_double(cfg.hhan.polyak) << "\n";
    os << "min_gce_buffer_size = " << cfg.hhan.min_gce_buffer_size << "\n";
    os << "gce_buffer_capacity = " << cfg.hhan.gce_buffer_capacity << "\n";
    os << "qmix_batch_size = " << cfg.hhan.qmix_batch_size << "\n";
    os << "qmix_update_frequency_steps = " << cfg.hhan.qmix_update_frequency_steps << "\n";
    os << "mixing_hidden_dim = " << cfg.hhan.mixing_hidden_dim << "\n";
    os << "gce_size = " << cfg.hhan.gce_size << "\n";
    os << "gce_max_sim_time = " << cfg.hhan.gce_max_sim_time << "\n";
    os << "mixing_lr = " << fmt_double(cfg.hhan.mixing_lr) << "\n";
    os << "clip_grad_norm = " << fmt_double(cfg.hhan.clip_grad_norm) << "\n";
    for (const auto& [k, v] : cfg.recorded) os << k << " = " << v << "\n";
    return os.str();
}

// ---------------------------------------------------------------------------
// Baselines

SpfRouter::SpfRouter(std::shared_ptr<const net::RoadNetwork> net)
    : net_(std::move(net)), weights_(net_->free_flow_weights()) {}

sim::RoutingResponse SpfRouter::route(const sim::RoutingQuery& q) {
    if (q.u == q.i_d) {
        plans_.erase(q.vc);
        return sim::RoutingResponse::success();
    }
    if (q.t > q.t_max) {
        plans_.erase(q.vc);
        return sim::RoutingResponse::fail();
    }
    auto it = plans_.find(q.vc);
    if (it == plans_.end()) {
        auto tit = tables_.find(q.i_d);
        if (tit == tables_.end())
            tit = tables_
                      .emplace(q.i_d,
                               std::make_unique<net::RouteTable>(*net_, weights_, q.i_d))
                      .first;
        auto path = tit->second->extract_path(q.r_c);
        it = plans_.emplace(q.vc, std::deque<int>(path.begin(), path.end())).first;
    }
    const int road = it->second.front();
    it->second.pop_front();
    return sim::RoutingResponse::next(road);
}

sim::Router SpfRouter::router() {
    return [this](const sim::RoutingQuery& q) { return route(q); };
}

SpfwrRouter::SpfwrRouter(std::shared_ptr<const net::RoadNetwork> net, const sim::Simulation& s,
                         double period)
    : net_(std::move(net)), sim_(s), period_(period), freeflow_(net_->free_flow_weights()) {}

sim::RoutingResponse SpfwrRouter::route(const sim::RoutingQuery& q) {
    if (q.u == q.i_d) {
        cache_.erase(q.vc);
        return sim::RoutingResponse::success();
    }
    if (q.t > q.t_max) {
        cache_.erase(q.vc);
        return sim::RoutingResponse::fail();
    }
    auto it = cache_.find(q.vc);
    if (it == cache_.end()) {
        // First path matches the static SPF baseline.
        auto tit = freeflow_tables_.find(q.i_d);
        if (tit == freeflow_tables_.end())
            tit = freeflow_tables_
                      .emplace(q.i_d,
                               std::make_unique<net::RouteTable>(*net_, freeflow_, q.i_d))
                      .first;
        auto path = tit->second->extract_path(q.r_c);
        Cached c;
        c.plan.assign(path.begin(), path.end());
        c.computed_at = q.t;
        it = cache_.emplace(q.vc, std::move(c)).first;
    } else if (static_cast<double>(q.t - it->second.computed_at) > period_) {
        std::vector<double> live(net_->num_roads());
        for (int r = 0; r < net_->num_roads(); ++r)
            live[r] = net_->road(r).length / sim_.road_speed(r);
        auto path = net::shortest_path(*net_, live, q.r_c, q.i_d);
        it->second.plan.assign(path.begin(), path.end());
        it->second.computed_at = q.t;
    }
    const int road = it->second.plan.front();
    it->second.plan.pop_front();
    return sim::RoutingResponse::next(road);
}

sim::Router SpfwrRouter::router() {
    return [this](const sim::RoutingQuery& q) { return route(q); };
}

an::TabularQRouter q_routing_router(std::shared_ptr<const net::RoadNetwork> net,
                                    const ScenarioConfig& cfg) {
    an::TabularConfig tc;
    tc.alpha = cfg.qr_alpha;
    tc.gamma = cfg.qr_gamma;
    tc.eps_start = cfg.an.eps_start;
    tc.eps_end = cfg.an.eps_end;
    tc.eps_decay_episodes = cfg.an.eps_decay_episodes;
    tc.seed = cfg.master_seed;
    return an::TabularQRouter(std::move(net), tc);
}

// ---------------------------------------------------------------------------
// Experiments

std::shared_ptr<const net::RoadNetwork> make_network(const ScenarioConfig& cfg) {
    if (!cfg.network_path.empty())
        return std::make_shared<const net::RoadNetwork>(net::load_network(cfg.network_path));
    return std::make_shared<const net::RoadNetwork>(net::build_grid(
        cfg.grid_rows, cfg.grid_cols, cfg.grid_edge_len, cfg.grid_speed, cfg.grid_lanes));
}

net::HubGraph make_hub_graph(const ScenarioConfig& cfg, const net::RoadNetwork& network) {
    auto candidates = net::filter_hub_candidates(network);
    if (static_cast<int>(candidates.size()) < cfg.hhan.num_hubs)
        throw ConfigError("network has only " + std::to_string(candidates.size()) +
                          " hub candidates; num_hubs = " + std::to_string(cfg.hhan.num_hubs));
    auto hubs = net::select_hubs(network, candidates, cfg.hhan.num_hubs, cfg.master_seed);
    return net::connect_hubs(network, hubs, 3, net::default_d_max(network));
}

namespace {

json report_to_json_value(const sim::MetricsReport& r) {
    json j;
    if (r.avtt) j["avtt"] = *r.avtt;
    else j["avtt"] = nullptr;
    j["rsr"] = r.rsr;
    j["completed"] = r.completed;
    j["total"] = r.total;
    j["mean_congested_fraction"] = r.mean_congested_fraction;
    j["generated"] = r.generated;
    j["dropped_at_queue"] = r.dropped_at_queue;
    j["steps"] = r.steps;
    return j;
}

void write_text_file(const std::string& path, const std::string& text) {
    std::ofstream out(path);
    if (!out) throw ConfigError(path + ": cannot open for writing");
    out << text;
}

}  // namespace

std::string RunReport::to_json(bool include_wall_clock) const {
    json j;
    j["config_text"] = config_text;
    j["model"] = model;
    json curve_json = json::array();
    for (const auto& p : curve) {
        curve_json.push_back({{"episode", p.episode},
                              {"mean_loss", p.mean_loss},
                              {"epsilon", p.epsilon},
                              {"avtt", p.avtt},
                              {"rsr", p.rsr}});
    }
    j["curve"] = std::move(curve_json);
    json evals_json = json::array();
    for (const auto& e : evals) {
        json ej = report_to_json_value(e.report);
        ej["seed"] = e.seed_label;
        evals_json.push_back(std::move(ej));
    }
    j["evals"] = std::move(evals_json);
    j["train_sim_seeds"] = train_sim_seeds;
    j["eval_sim_seeds"] = eval_sim_seeds;
    if (include_wall_clock) j["wall_clock_sec"] = wall_clock_sec;
    return j.dump(2);
}

namespace {

std::optional<double> median_opt(std::vector<double> v) {
    if (v.empty()) return std::nullopt;
    std::sort(v.begin(), v.end());
    const size_t n = v.size();
    return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

}  // namespace

std::optional<double> RunReport::median_avtt() const {
    std::vector<double> v;
    for (const auto& e : evals) {
        if (!e.report.avtt) return std::nullopt;  // a gridlocked seed poisons the median
        v.push_back(*e.report.avtt);
    }
    return median_opt(std::move(v));
}

double RunReport::median_rsr() const {
    std::vector<double> v;
    for (const auto& e : evals) v.push_back(e.report.rsr);
    const auto m = median_opt(std::move(v));
    return m ? *m : 0.0;
}

RunReport run_experiment(const ScenarioConfig& cfg, const std::string& out_dir) {
    const auto t0 = std::chrono::steady_clock::now();
    auto network = make_network(cfg);
    if (!out_dir.empty()) fs::create_directories(out_dir);

    RunReport report;
    report.config_text = serialize_config(cfg);
    report.model = model_name(cfg.model);

    const int steps = cfg.effective_episode_steps();
    const int episodes = cfg.effective_train_episodes();

    std::unique_ptr<an::AnSystem> an_sys;
    std::unique_ptr<an::TabularQRouter> qr_sys;
    std::unique_ptr<hub::HhanSystem> hh_sys;
    net::HubGraph hub_graph;

    if (cfg.model == Model::AN_H0 || cfg.model == Model::AN_H1 || cfg.model == Model::AN_H2) {
        an_sys = std::make_unique<an::AnSystem>(network, cfg.an);
    } else if (cfg.model == Model::QR) {
        qr_sys = std::make_unique<an::TabularQRouter>(q_routing_router(network, cfg));
    } else if (cfg.model == Model::HHAN) {
        hub_graph = make_hub_graph(cfg, *network);
        hh_sys = std::make_unique<hub::HhanSystem>(network, hub_graph, cfg.hhan);
        hh_sys->set_trace(true);
    }

    // ---- training ----
    for (int e = 0; e < episodes; ++e) {
        const uint64_t seed = train_seed(cfg.master_seed, e);
        report.train_sim_seeds.push_back(seed);
        sim::Simulation s(network, cfg.sim_config(seed));
        s.begin_episode(steps);

        EpisodePoint pt;
        pt.episode = e;
        if (an_sys) {
            an_sys->set_training(true);
            an_sys->on_episode_start(e);
            auto router = an_sys->router(s);
            for (int k = 0; k < steps; ++k) {
                s.step(router);
                an_sys->end_step_training();
            }
            an_sys->on_episode_end(s.now());
            s.finish();
            pt.mean_loss = an_sys->episode_stats().mean_loss;
            pt.epsilon = an_sys->epsilon();
        } else if (qr_sys) {
            qr_sys->set_training(true);
            qr_sys->on_episode_start(e);
            auto router = qr_sys->router();
            for (int k = 0; k < steps; ++k) s.step(router);
            qr_sys->on_episode_end(s.now());
            s.finish();
            pt.epsilon = qr_sys->epsilon();
        } else if (hh_sys) {
            s.register_hubs(hub_graph.hubs, hub_graph.r_vic);
            hh_sys->set_training(true);
            hh_sys->on_episode_start(e, s);
            auto router = hh_sys->router(s);
            for (int k = 0; k < steps; ++k) {
                s.step(router);
                hh_sys->after_step(s);
            }
            hh_sys->on_episode_end(s);
            s.finish();
            pt.mean_loss = hh_sys->mean_episode_loss();
            pt.epsilon = hh_sys->epsilon();
        }
        const auto rep = s.report();
        pt.avtt = rep.avtt.value_or(0.0);
        pt.rsr = rep.rsr;
        report.curve.push_back(pt);
    }

    // ---- checkpoints ----
    std::string ckpt_path;
    if (!out_dir.empty()) {
        if (an_sys) {
            ckpt_path = (fs::path(out_dir) / "checkpoint.txt").string();
            an_sys->save_checkpoint(ckpt_path);
        } else if (hh_sys) {
            ckpt_path = (fs::path(out_dir) / "checkpoint.txt").string();
            hh_sys->save_checkpoint(ckpt_path);
        }
    }

    // ---- evaluation with frozen parameters ----
    if (an_sys) an_sys->set_training(false);
    if (qr_sys) qr_sys->set_training(false);
    if (hh_sys) hh_sys->set_training(false);

    for (int label : cfg.eval_seeds) {
        const uint64_t seed = eval_seed(label);
        report.eval_sim_seeds.push_back(seed);
        sim::Simulation s(network, cfg.sim_config(seed));
        s.begin_episode(steps);
        if (an_sys) {
            an_sys->on_episode_start(0);
            auto router = an_sys->router(s);
            for (int k = 0; k < steps; ++k) s.step(router);
            an_sys->on_episode_end(s.now());
        } else if (qr_sys) {
            qr_sys->on_episode_start(0);
            auto router = qr_sys->router();
            for (int k = 0; k < steps; ++k) s.step(router);
            qr_sys->on_episode_end(s.now());
        } else if (hh_sys) {
            s.register_hubs(hub_graph.hubs, hub_graph.r_vic);
            hh_sys->on_episode_start(0, s);
            auto router = hh_sys->router(s);
            for (int k = 0; k < steps; ++k) s.step(router);
            hh_sys->on_episode_end(s);
        } else if (cfg.model == Model::SPF) {
            SpfRouter router(network);
            auto fn = router.router();
            for (int k = 0; k < steps; ++k) s.step(fn);
        } else {
            SpfwrRouter router(network, s, cfg.spfwr_period);
            auto fn = router.router();
            for (int k = 0; k < steps; ++k) s.step(fn);
        }
        s.finish();
        EvalResult res;
        res.seed_label = label;
        res.report = s.report();
        if (!out_dir.empty()) {
            std::ofstream csv(fs::path(out_dir) /
                              ("eval_seed" + std::to_string(label) + "_trips.csv"));
            res.report.write_trip_csv(csv);
            write_text_file((fs::path(out_dir) /
                             ("eval_seed" + std::to_string(label) + "_metrics.json"))
                                .string(),
                            res.report.to_json());
        }
        report.evals.push_back(std::move(res));
    }

    report.wall_clock_sec =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();

    if (!out_dir.empty()) {
        write_text_file((fs::path(out_dir) / "config.txt").string(), report.config_text);
        write_text_file((fs::path(out_dir) / "report.json").string(), report.to_json());
        std::ostringstream curve_csv;
        curve_csv << "episode,mean_loss,epsilon,avtt,rsr\n";
        for (const auto& p : report.curve)
            curve_csv << p.episode << "," << fmt_double(p.mean_loss) << ","
                      << fmt_double(p.epsilon) << "," << fmt_double(p.avtt) << ","
                      << fmt_double(p.rsr) << "\n";
        write_text_file((fs::path(out_dir) / "training_log.csv").string(), curve_csv.str());
        if (hh_sys) {
            std::ostringstream gce;
            gce << "epoch,open_t,close_t,decisions,reward,throughput_term,"
                   "inefficiency_term,congestion_term\n";
            for (const auto& row : hh_sys->trace())
                gce << row.id << "," << row.open_t << "," << row.close_t << ","
                    << row.decisions << "," << fmt_double(row.r) << ","
                    << fmt_double(row.r_throughput) << "," << fmt_double(row.r_inefficiency)
                    << "," << fmt_double(row.r_congestion) << "\n";
            write_text_file((fs::path(out_dir) / "gce_trace.csv").string(), gce.str());
        }
    }
    return report;
}

// ---------------------------------------------------------------------------
// Comparison

ReportSummary summarize_report_json(const std::string& json_text) {
    const json j = json::parse(json_text);
    ReportSummary s;
    s.model = j.at("model").get<std::string>();
    std::vector<double> avtts;
    std::vector<double> rsrs;
    bool all_avtt = true;
    for (const auto& e : j.at("evals")) {
        std::optional<double> avtt;
        if (!e.at("avtt").is_null()) avtt = e.at("avtt").get<double>();
        s.per_seed_avtt.emplace_back(e.at("seed").get<int>(), avtt);
        if (avtt) avtts.push_back(*avtt);
        else all_avtt = false;
        rsrs.push_back(e.at("rsr").get<double>());
    }
    if (all_avtt && !avtts.empty()) s.median_avtt = median_opt(std::move(avtts));
    const auto m = median_opt(std::move(rsrs));
    s.median_rsr = m ? *m : 0.0;
    return s;
}

double improvement_percent(double ours, double baseline) {
    return 100.0 * (baseline - ours) / baseline;
}

std::string compare_table(const std::vector<ReportSummary>& reports) {
    std::ostringstream os;
    os << "method,median_avtt,median_rsr";
    for (const auto& r : reports) os << ",impr_vs_" << r.model;
    os << "\n";
    char buf[64];
    for (const auto& r : reports) {
        os << r.model << ",";
        if (r.median_avtt) {
            std::snprintf(buf, sizeof(buf), "%.2f", *r.median_avtt);
            os << buf;
        } else {
            os << "inf";
        }
        std::snprintf(buf, sizeof(buf), "%.2f", r.median_rsr);
        os << "," << buf;
        for (const auto& base : reports) {
            os << ",";
            if (r.median_avtt && base.median_avtt) {
                std::snprintf(buf, sizeof(buf), "%.2f",
                              improvement_percent(*r.median_avtt, *base.median_avtt));
                os << buf;
            } else if (base.median_avtt && !r.median_avtt) {
                os << "-inf";
            } else if (!base.median_avtt && r.median_avtt) {
                os << "inf";
            } else {
                os << "nan";
            }
        }
        os << "\n";
    }
    return os.str();
}

}  // namespace marl::run
