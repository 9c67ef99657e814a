#pragma once

#include <optional>
#include <vector>

#include "marlroute/tensorcore.hpp"

namespace marl::gat {

// Self-inclusive, ascending one-hop neighbor lists.
struct Graph {
    std::vector<std::vector<int>> neighbors;
    int size() const { return static_cast<int>(neighbors.size()); }
};

struct LayerSpec {
    int in_dim = 0;
    int out_dim = 0;  // per head
    int heads = 3;
    bool concat = true;  // false: average (final layer)
    bool elu = true;     // false: identity (final layer)
};

struct StackConfig {
    int hops = 0;
    int in_dim = 0;
    double dropout = 0.6;
    std::vector<LayerSpec> layers;

    int output_dim() const;
};

// Paper stack: 0 hops -> raw intersection state; 1 hop -> one layer (in->7,
// 3 heads, averaged); 2 hops -> in->7 concat x3 -> 21 -> 10 averaged.
StackConfig stack_config(int hops, int in_dim);

// Attention snapshot of one (layer, head): weights parallel the graph's
// neighbor lists and sum to 1 per node.
struct AttentionRecord {
    int layer = 0;
    int head = 0;
    std::vector<std::vector<double>> weights;  // [node][neighbor position]
};

double attention_entropy(std::span<const double> weights);
std::vector<double> attention_entropies(const AttentionRecord& rec);

// Node sets needed per layer to produce the outputs of a set of centers.
struct Plan {
    std::vector<std::vector<int>> sets;               // sets[l]: global node ids, ascending
    std::vector<std::vector<std::vector<int>>> nbrs;  // [l][center pos] -> positions in sets[l]
};

struct Tape;

class GatStack {
public:
    GatStack(StackConfig cfg, uint64_t init_seed);

    const StackConfig& config() const { return cfg_; }
    tc::ParamSet& params() { return params_; }
    const tc::ParamSet& params() const { return params_; }

    Plan make_plan(const Graph& g, const std::vector<int>& centers) const;

    // Batched forward for the plan's center set. x0[s] is the [B, in_dim]
    // feature block of node plan.sets[0][s]. Returns one [B, out] block per
    // center. `tape` must be kept alive for backward.
    std::vector<tc::Tensor> forward(const Plan& plan, const std::vector<tc::Tensor>& x0,
                                    bool training, Rng* rng, Tape* tape,
                                    std::vector<AttentionRecord>* records = nullptr) const;

    // Accumulates parameter gradients from d(center outputs).
    void backward(const Plan& plan, const Tape& tape,
                  const std::vector<tc::Tensor>& d_out);

    // Single-state convenience over the whole graph (inference path).
    std::vector<double> forward_all(const Graph& g, const std::vector<double>& features,
                                    std::vector<AttentionRecord>* records = nullptr) const;

private:
    StackConfig cfg_;
    tc::ParamSet params_;
    mutable std::optional<Plan> full_plan_;
    mutable int full_plan_nodes_ = -1;
};

struct Tape {
    int batch = 0;
    bool training = false;
    std::vector<std::vector<tc::Tensor>> x;  // x[l][s]: [B, dim_l] inputs of layer l
    struct Layer {
        std::vector<std::vector<tc::Tensor>> h;      // [head][s in sets[l]]: [B, out]
        std::vector<std::vector<tc::Tensor>> epre;   // [head][c]: [B, |nbrs|] pre-LeakyReLU
        std::vector<std::vector<tc::Tensor>> alpha;  // raw softmax weights
        std::vector<std::vector<tc::Tensor>> mult;   // dropout multipliers (training only)
        std::vector<std::vector<tc::Tensor>> act;    // per-head activated outputs [B, out]
    };
    std::vector<Layer> layers;
};

}  // namespace marl::gat
