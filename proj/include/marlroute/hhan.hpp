#pragma once

#include <deque>
#include <memory>
#include <unordered_map>
#include <vector>

#include "marlroute/mesosim.hpp"
#include "marlroute/netgraph.hpp"
#include "marlroute/tensorcore.hpp"

namespace marl::hub {

struct HhanConfig {
    int num_hubs = 4;
    int hub_agent_dim = 64;
    int max_waiting_vehicles = 40;  // consumed by the simulator's insertion queue
    int z_order_embedding_dim = 8;
    double lr = 5e-4;
    double mixing_lr = 5e-4;
    double adam_eps = 1e-4;
    double gamma = 0.99;
    double eps_start = 1.0;
    double eps_end = 0.05;
    double eps_decay = 0.99;  // multiplicative per episode
    double polyak = 0.995;
    int min_gce_buffer_size = 200;
    int gce_buffer_capacity = 10000;
    int qmix_batch_size = 64;
    int qmix_update_frequency_steps = 32;  // agent decisions between updates
    int mixing_hidden_dim = 128;
    int gce_size = 10;
    int gce_max_sim_time = 100;
    double clip_grad_norm = 10.0;
    int neighbor_slots = 3;
    uint64_t seed = 0;
};

// Raw flow-aware observation; the destination-hub embedding happens inside
// the agent net so gradients reach the embedder.
struct LocalObservation {
    int dest_hub = -1;
    std::vector<uint8_t> dest_bits;       // Z-order bits of the destination hub
    double hub_features[2] = {0, 0};      // vicinity speed, outgoing congestion
    double neighbor_features[3][3] = {};  // per slot: est tt, congestion, dist to dest
    uint8_t mask[3] = {0, 0, 0};
};

struct DecisionRecord {
    int agent = -1;  // hub index
    int vc = -1;
    int t = 0;
    LocalObservation obs;
    int action = -1;
    double q_value = 0.0;
    // Successor link, filled when the vehicle makes its next hub decision or
    // its trip terminates.
    enum class Next { Open, Decision, Terminal };
    Next next = Next::Open;
    int next_agent = -1;
    LocalObservation next_obs;
};

struct GceTransition {
    int id = 0;
    int open_t = 0;
    int close_t = 0;
    std::vector<double> s;
    std::vector<double> s_next;
    std::vector<std::vector<std::shared_ptr<DecisionRecord>>> decisions;  // per hub
    double r = 0.0;
    double r_throughput = 0.0;
    double r_inefficiency = 0.0;
    double r_congestion = 0.0;
    int decision_count = 0;
};

struct GceTraceRow {
    int id = 0;
    int open_t = 0;
    int close_t = 0;
    int decisions = 0;
    double r = 0.0;
    double r_throughput = 0.0;
    double r_inefficiency = 0.0;
    double r_congestion = 0.0;
};

// Destination embedder (linear+ReLU) -> hidden ReLU layer -> 3-slot head.
class HubAgentNet {
public:
    HubAgentNet() = default;
    HubAgentNet(int dest_bits, int emb_dim, int hidden, int slots, uint64_t seed);

    tc::ParamSet& params() { return params_; }
    const tc::ParamSet& params() const { return params_; }

    int tau_dim() const { return emb_dim_ + 11; }
    int slots() const { return slots_; }

    struct Tape {
        tc::Tensor dest, feats, emb, tau, hidden, q;
    };

    // feats is [B, 11]: hub features plus 3 padded neighbor blocks.
    tc::Tensor forward(const tc::Tensor& dest_bits, const tc::Tensor& feats, Tape* tape) const;
    const tc::Tensor& tau_of(const Tape& tape) const { return tape.tau; }
    // dtau_extra (optional) carries gradients arriving at tau from outside
    // (the attention aggregator input path).
    void backward(const Tape& tape, const tc::Tensor& dq, const tc::Tensor* dtau_extra);

private:
    tc::ParamSet params_;
    int dest_dim_ = 0, emb_dim_ = 0, hidden_ = 0, slots_ = 0;
};

// Softmax attention over one agent's decisions within an epoch.
class AttnAggregator {
public:
    AttnAggregator() = default;
    AttnAggregator(int state_dim, int tau_dim, int hidden, uint64_t seed);

    tc::ParamSet& params() { return params_; }
    const tc::ParamSet& params() const { return params_; }

    struct Tape {
        std::vector<std::vector<double>> u;    // per decision: [s; tau; q]
        std::vector<std::vector<double>> th;   // tanh(W1 u)
        std::vector<double> scores;
        std::vector<double> alpha;
        std::vector<double> q;
    };

    double forward(std::span<const double> s, const std::vector<std::vector<double>>& taus,
                   std::span<const double> q_values, Tape* tape) const;
    // Returns d(tau_i) and d(q_i) for each decision.
    void backward(const Tape& tape, double d_qstar, std::vector<std::vector<double>>* dtaus,
                  std::vector<double>* dqs);

    const std::vector<double>& last_alpha(const Tape& tape) const { return tape.alpha; }

private:
    tc::ParamSet params_;
    int state_dim_ = 0, tau_dim_ = 0, hidden_ = 0;
};

// Monotonic two-layer mixer with state-conditioned |.|-transformed weights.
class MixingNet {
public:
    MixingNet() = default;
    MixingNet(int num_agents, int state_dim, int hidden, uint64_t seed);

    tc::ParamSet& params() { return params_; }
    const tc::ParamSet& params() const { return params_; }

    struct Tape {
        std::vector<double> s;
        std::vector<double> qstar;
        std::vector<double> w1_pre, w1;  // [hidden x K]
        std::vector<double> b1, h_pre, h;
        std::vector<double> w2_pre, w2;  // [hidden]
        std::vector<double> v_pre, v_act;
        double qtot = 0.0;
    };

    double forward(std::span<const double> s, std::span<const double> qstar, Tape* tape) const;
    void backward(const Tape& tape, double d_qtot, std::vector<double>* d_qstar);

private:
    tc::ParamSet params_;
    int k_ = 0, state_dim_ = 0, hidden_ = 0;
};

// Reward over a flow window: throughput - excess inefficiency - congestion.
double gce_reward(const sim::FlowCounters& open, const sim::FlowCounters& close,
                  double* throughput_term = nullptr, double* inefficiency_term = nullptr,
                  double* congestion_term = nullptr);

class HhanSystem {
public:
    HhanSystem(std::shared_ptr<const net::RoadNetwork> net, net::HubGraph hub_graph,
               HhanConfig cfg);

    const net::HubGraph& hub_graph() const { return hubs_; }
    const HhanConfig& config() const { return cfg_; }
    int state_dim() const { return 2 * static_cast<int>(hubs_.hubs.size()) + 4; }

    void set_training(bool on) { training_ = on; }
    void set_trace(bool on) { trace_on_ = on; }
    double epsilon() const { return epsilon_; }

    void on_episode_start(int episode, const sim::Simulation& s);
    void on_episode_end(const sim::Simulation& s);
    // Epoch timeout checks and the every-32-decisions training trigger.
    void after_step(const sim::Simulation& s);

    sim::RoutingResponse route(const sim::RoutingQuery& q, const sim::Simulation& s);
    sim::Router router(const sim::Simulation& s);

    std::vector<double> build_global_state(const sim::Simulation& s) const;
    LocalObservation build_local_observation(const sim::Simulation& s, int hub_idx,
                                             int dest_hub) const;
    int destination_hub(int dest_intersection) const;

    double qmix_train_step();
    int buffer_size() const { return static_cast<int>(buffer_.size()); }
    int64_t decisions_logged() const { return decision_counter_total_; }
    int64_t train_steps() const { return train_steps_; }
    double last_loss() const { return last_loss_; }
    double mean_episode_loss() const;
    const std::vector<GceTraceRow>& trace() const { return trace_; }
    const std::deque<GceTransition>& replay_buffer() const { return buffer_; }

    void save_checkpoint(const std::string& path) const;
    void load_checkpoint(const std::string& path);

private:
    struct RouteState {
        int dest_hub = -1;
        std::deque<int> plan;
        std::shared_ptr<DecisionRecord> open;
    };

    struct Epoch {
        bool active = false;
        int open_t = 0;
        std::vector<double> s;
        sim::FlowCounters flow;
        std::vector<std::shared_ptr<DecisionRecord>> decisions;
    };

    int hub_within_vicinity(int intersection) const;
    static double norm_congestion(const sim::Simulation& s, double ratio);
    void append_leg(RouteState& st, const sim::RoutingQuery& q, int target_intersection,
                    bool from_last_plan_road) const;
    void resolve_open(RouteState& st, DecisionRecord::Next kind, int next_agent,
                      const LocalObservation* next_obs);
    void open_epoch(const sim::Simulation& s);
    void close_epoch(const sim::Simulation& s);
    void flush_mature();
    double clip_all();

    std::shared_ptr<const net::RoadNetwork> net_;
    net::HubGraph hubs_;
    HhanConfig cfg_;
    int dest_dim_ = 0;
    double diameter_time_ = 0.0;
    std::vector<std::vector<double>> hub_time_;  // free-flow hub-to-hub times
    std::vector<double> freeflow_weights_;
    mutable std::unordered_map<int, std::unique_ptr<net::RouteTable>> dest_tables_;
    std::vector<std::unique_ptr<net::RouteTable>> hub_tables_;  // to each hub

    std::vector<HubAgentNet> online_;
    std::vector<HubAgentNet> target_;
    AttnAggregator attn_;
    AttnAggregator attn_target_;
    MixingNet mixer_;
    MixingNet mixer_target_;
    std::vector<tc::Adam> agent_adam_;
    tc::Adam attn_adam_;
    tc::Adam mixer_adam_;

    bool training_ = true;
    bool trace_on_ = false;
    double epsilon_ = 1.0;
    Rng act_rng_;
    Rng sample_rng_;

    std::unordered_map<int, RouteState> route_states_;
    Epoch epoch_;
    std::deque<GceTransition> maturing_;
    std::deque<GceTransition> buffer_;
    int epoch_counter_ = 0;
    int64_t decision_counter_total_ = 0;
    int decisions_since_update_ = 0;
    int64_t train_steps_ = 0;
    double last_loss_ = 0.0;
    double episode_loss_sum_ = 0.0;
    int episode_loss_count_ = 0;
    std::vector<GceTraceRow> trace_;
};

}  // namespace marl::hub
