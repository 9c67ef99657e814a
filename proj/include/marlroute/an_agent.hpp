#pragma once

#include <map>
#include <memory>
#include <optional>
#include <unordered_map>
#include <vector>

#include "marlroute/gatnet.hpp"
#include "marlroute/mesosim.hpp"
#include "marlroute/netgraph.hpp"
#include "marlroute/tensorcore.hpp"

namespace marl::an {

struct AnConfig {
    int hops = 1;
    double lr = 0.01;
    double adam_eps = 1e-4;
    int batch_size = 64;
    double grad_clip = 5.0;
    int buffer_size = 10000;
    int num_new_exp_to_learn = 1;
    double tau = 0.01;
    double gamma = 0.99;
    double eps_start = 1.0;
    double eps_end = 0.05;
    int eps_decay_episodes = 600;
    std::vector<int> hidden;  // defaulted from hops when empty
    double gat_lr = 0.01;
    double gat_dropout = 0.6;
    bool control_all = false;  // place an agent at every intersection
    uint64_t seed = 0;

    std::vector<int> hidden_for_hops() const;
};

using StateWords = std::vector<uint64_t>;

inline bool state_bit(const StateWords& w, int idx) {
    return (w[idx / 64] >> (idx % 64)) & 1ULL;
}

// Compact record of what an agent saw when it answered a query. The context
// the Q-net consumes (GAT row, or the raw intersection state at hops = 0) is
// recomputed from `state` so training gradients reach the shared GAT.
struct AgentObservation {
    int node = -1;  // observing agent's intersection
    int dest = -1;  // destination intersection (Z-order bits derived)
    StateWords state;
};

struct Experience {
    int vc = -1;
    AgentObservation obs;
    int action_slot = -1;
    double reward = 0.0;  // -(t' - t), <= 0
    bool terminal = false;
    int next_node = -1;
    AgentObservation next_obs;
    uint32_t next_valid_mask = 0;
};

// Per-agent ring buffer with uniform seeded sampling.
class ReplayBuffer {
public:
    explicit ReplayBuffer(int capacity) : capacity_(capacity) {}
    void push(Experience e);
    int size() const { return static_cast<int>(data_.size()); }
    const Experience& at(int i) const { return data_[i]; }
    std::vector<int> sample_indices(int n, Rng& rng) const;

private:
    int capacity_;
    int write_ = 0;
    std::vector<Experience> data_;
};

// Q-network: destination embedder (linear+ReLU) -> concat with context ->
// hidden ReLU stack -> linear head of width F.
class QNet {
public:
    QNet() = default;
    QNet(int dest_bits, int ctx_dim, const std::vector<int>& hidden, int out_dim,
         uint64_t init_seed);

    tc::ParamSet& params() { return params_; }
    const tc::ParamSet& params() const { return params_; }

    struct Tape {
        tc::Tensor dest, emb, ctx, x0;
        std::vector<tc::Tensor> acts;  // hidden activations
        tc::Tensor q;
    };

    tc::Tensor forward(const tc::Tensor& dest_bits, const tc::Tensor& ctx, Tape* tape) const;
    // Accumulates parameter grads; optionally returns dL/d(ctx).
    void backward(const Tape& tape, const tc::Tensor& dq, tc::Tensor* dctx);
    tc::Tensor embed_destination(const tc::Tensor& dest_bits) const;

    int ctx_dim() const { return ctx_dim_; }
    int out_dim() const { return out_dim_; }

private:
    tc::ParamSet params_;
    int dest_dim_ = 0, ctx_dim_ = 0, out_dim_ = 0;
    std::vector<int> hidden_;
};

struct TrainStats {
    double mean_loss = 0.0;
    int batches = 0;
};

class AnSystem {
public:
    AnSystem(std::shared_ptr<const net::RoadNetwork> net, AnConfig cfg);

    const AnConfig& config() const { return cfg_; }
    int num_agents() const { return static_cast<int>(agent_nodes_.size()); }
    const std::vector<int>& agent_nodes() const { return agent_nodes_; }
    bool is_agent(int intersection) const { return agent_of_[intersection] >= 0; }

    void set_training(bool on) { training_ = on; }
    void on_episode_start(int episode);
    // Closes dangling experience chains at episode end (terminal failures).
    void on_episode_end(int end_time);
    double epsilon() const { return epsilon_; }

    sim::RoutingResponse route(const sim::RoutingQuery& q, const sim::Simulation& s);
    sim::Router router(const sim::Simulation& s);

    // Algorithm-2 tick: trains every agent that gained experiences this step.
    TrainStats end_step_training();

    TrainStats episode_stats() const { return episode_stats_; }
    int open_pending() const { return static_cast<int>(pending_.size()); }
    const ReplayBuffer& buffer_of_node(int intersection) const;

    void save_checkpoint(const std::string& path) const;
    void load_checkpoint(const std::string& path);

    // Mean destination-embedder output per intersection, one row each.
    std::vector<std::vector<double>> destination_embeddings() const;
    std::vector<gat::AttentionRecord> attention_snapshot(const sim::Simulation& s) const;

    gat::GatStack* gat() { return gat_ ? gat_.get() : nullptr; }
    const gat::Graph& graph() const { return graph_; }

private:
    struct Agent {
        int node = -1;
        QNet online;
        QNet target;
        tc::Adam adam;
        ReplayBuffer buffer;
        gat::Plan plan;  // GAT subgraph plan centered on `node`
        int new_exp = 0;

        Agent(int capacity) : buffer(capacity) {}
    };

    struct Pending {
        int node = -1;
        int agent_idx = -1;
        int action_slot = -1;
        int t = 0;
        AgentObservation obs;
    };

    tc::Tensor dest_bits_tensor(const std::vector<int>& dests) const;
    // Per-step network embedding cache for acting.
    void refresh_embeddings(const sim::Simulation& s) const;
    std::vector<double> context_row(const sim::Simulation& s, int node) const;
    uint32_t valid_mask(const sim::RoutingQuery& q) const;
    void close_pending(int vc, int t, bool terminal, int next_node, uint32_t next_mask,
                       const AgentObservation* next_obs);
    double train_agent(Agent& agent);
    std::vector<tc::Tensor> gather_features(const gat::Plan& plan,
                                            const std::vector<const StateWords*>& states) const;
    tc::Tensor context_batch(Agent& agent, const std::vector<const Experience*>& batch,
                             gat::Tape* tape);

    std::shared_ptr<const net::RoadNetwork> net_;
    AnConfig cfg_;
    gat::Graph graph_;
    std::unique_ptr<gat::GatStack> gat_;
    tc::Adam gat_adam_;
    int ctx_dim_ = 0;
    int dest_dim_ = 0;

    std::vector<int> agent_nodes_;
    std::vector<int> agent_of_;  // intersection -> agent idx or -1
    std::vector<std::unique_ptr<Agent>> agents_;

    std::unordered_map<int, Pending> pending_;
    std::vector<int> touched_;  // agent idx, insertion order, deduped

    bool training_ = true;
    double epsilon_ = 1.0;
    Rng act_rng_;
    Rng sample_rng_;
    Rng dropout_rng_;

    mutable int emb_step_ = -1;
    mutable std::vector<double> emb_cache_;
    mutable StateWords words_cache_;

    mutable std::unordered_map<int, std::unique_ptr<net::RouteTable>> fallback_tables_;
    std::vector<double> freeflow_weights_;

    TrainStats episode_stats_;
};

// Shared tabular Q learner: per-intersection Q[destination][out-road slot]
// updated online with the -dt reward. Covers both the exact-telescoping
// oracle configuration (alpha = gamma = 1) and the Q-Routing baseline.
struct TabularConfig {
    double alpha = 0.5;
    double gamma = 0.99;
    double eps_start = 1.0;
    double eps_end = 0.05;
    int eps_decay_episodes = 600;
    uint64_t seed = 0;
};

class TabularQRouter {
public:
    TabularQRouter(std::shared_ptr<const net::RoadNetwork> net, TabularConfig cfg);

    void set_training(bool on) { training_ = on; }
    void on_episode_start(int episode);
    void on_episode_end(int end_time);

    sim::RoutingResponse route(const sim::RoutingQuery& q);
    sim::Router router();

    double q_value(int node, int dest, int slot) const;
    bool visited(int node, int dest, int slot) const;
    double epsilon() const { return epsilon_; }

private:
    struct Pending {
        int node = -1;
        int slot = -1;
        int t = 0;
        int dest = -1;
    };

    double max_q(int node, int dest, uint32_t mask) const;
    void close(int vc, int t, bool terminal, int next_node, uint32_t next_mask);

    std::shared_ptr<const net::RoadNetwork> net_;
    TabularConfig cfg_;
    bool training_ = true;
    double epsilon_ = 1.0;
    Rng rng_;
    // q_[node][dest * F + slot]
    std::vector<std::vector<double>> q_;
    std::vector<std::vector<uint8_t>> seen_;
    std::unordered_map<int, Pending> pending_;
};

}  // namespace marl::an
