#include "marlroute/hhan.hpp"

#include <algorithm>
#include <cmath>

namespace marl::hub {

namespace {
constexpr double kNegInf = -std::numeric_limits<double>::infinity();

double clampd(double v, double lo, double hi) { return std::min(hi, std::max(lo, v)); }
}  // namespace

// ---------------------------------------------------------------------------
// HubAgentNet

HubAgentNet::HubAgentNet(int dest_bits, int emb_dim, int hidden, int slots, uint64_t seed)
    : dest_dim_(dest_bits), emb_dim_(emb_dim), hidden_(hidden), slots_(slots) {
    Rng rng(seed);
    auto& we = params_.add("emb.W", {emb_dim_, dest_dim_});
    tc::xavier_uniform(we, dest_dim_, emb_dim_, rng);
    params_.add("emb.b", {emb_dim_});
    auto& wf = params_.add("fc.W", {hidden_, tau_dim()});
    tc::xavier_uniform(wf, tau_dim(), hidden_, rng);
    params_.add("fc.b", {hidden_});
    auto& wh = params_.add("head.W", {slots_, hidden_});
    tc::xavier_uniform(wh, hidden_, slots_, rng);
    params_.add("head.b", {slots_});
}

tc::Tensor HubAgentNet::forward(const tc::Tensor& dest_bits, const tc::Tensor& feats,
                                Tape* tape) const {
    const int b = dest_bits.rows();
    tc::Tensor emb =
        tc::relu(tc::linear_forward(dest_bits, params_.get("emb.W"), params_.get("emb.b")));
    tc::Tensor tau({b, tau_dim()});
    for (int i = 0; i < b; ++i) {
        std::copy_n(emb.v.data() + static_cast<size_t>(i) * emb_dim_, emb_dim_,
                    tau.v.data() + static_cast<size_t>(i) * tau_dim());
        std::copy_n(feats.v.data() + static_cast<size_t>(i) * feats.cols(), feats.cols(),
                    tau.v.data() + static_cast<size_t>(i) * tau_dim() + emb_dim_);
    }
    tc::Tensor hidden =
        tc::relu(tc::linear_forward(tau, params_.get("fc.W"), params_.get("fc.b")));
    tc::Tensor q = tc::linear_forward(hidden, params_.get("head.W"), params_.get("head.b"));
    if (tape) {
        tape->dest = dest_bits;
        tape->feats = feats;
        tape->emb = std::move(emb);
        tape->tau = std::move(tau);
        tape->hidden = std::move(hidden);
        tape->q = q;
    }
    return q;
}

void HubAgentNet::backward(const Tape& tape, const tc::Tensor& dq,
                           const tc::Tensor* dtau_extra) {
    const int b = dq.rows();
    tc::Tensor dhidden({b, hidden_});
    tc::linear_backward(tape.hidden, params_.get("head.W"), params_.get("head.b"), dq,
                        &dhidden);
    tc::Tensor dpre({b, hidden_});
    tc::relu_backward(tape.hidden, dhidden, dpre);
    tc::Tensor dtau({b, tau_dim()});
    tc::linear_backward(tape.tau, params_.get("fc.W"), params_.get("fc.b"), dpre, &dtau);
    if (dtau_extra)
        for (size_t i = 0; i < dtau.v.size(); ++i) dtau.v[i] += dtau_extra->v[i];
    tc::Tensor demb({b, emb_dim_});
    for (int i = 0; i < b; ++i)
        for (int d = 0; d < emb_dim_; ++d)
            demb.at(i, d) = tape.emb.at(i, d) > 0 ? dtau.at(i, d) : 0.0;
    tc::linear_backward(tape.dest, params_.get("emb.W"), params_.get("emb.b"), demb, nullptr);
}

// ---------------------------------------------------------------------------
// AttnAggregator

AttnAggregator::AttnAggregator(int state_dim, int tau_dim, int hidden, uint64_t seed)
    : state_dim_(state_dim), tau_dim_(tau_dim), hidden_(hidden) {
    Rng rng(seed);
    const int in = state_dim_ + tau_dim_ + 1;
    auto& w1 = params_.add("W1", {hidden_, in});
    tc::xavier_uniform(w1, in, hidden_, rng);
    auto& w = params_.add("w", {hidden_});
    tc::xavier_uniform(w, hidden_, 1, rng);
}

double AttnAggregator::forward(std::span<const double> s,
                               const std::vector<std::vector<double>>& taus,
                               std::span<const double> q_values, Tape* tape) const {
    const int n = static_cast<int>(taus.size());
    if (n == 0) throw std::invalid_argument("AttnAggregator: empty decision set");
    const auto& w1 = params_.get("W1");
    const auto& w = params_.get("w");
    const int in = state_dim_ + tau_dim_ + 1;

    std::vector<std::vector<double>> u(n), th(n);
    std::vector<double> scores(n);
    for (int i = 0; i < n; ++i) {
        u[i].resize(in);
        std::copy(s.begin(), s.end(), u[i].begin());
        std::copy(taus[i].begin(), taus[i].end(), u[i].begin() + state_dim_);
        u[i][in - 1] = q_values[i];
        th[i].resize(hidden_);
        double score = 0.0;
        for (int h = 0; h < hidden_; ++h) {
            double acc = 0.0;
            const double* row = w1.v.data() + static_cast<size_t>(h) * in;
            for (int j = 0; j < in; ++j) acc += row[j] * u[i][j];
            th[i][h] = std::tanh(acc);
            score += w.v[h] * th[i][h];
        }
        scores[i] = score;
    }
    const auto alpha = tc::softmax_masked(scores, nullptr);
    double qstar = 0.0;
    for (int i = 0; i < n; ++i) qstar += alpha[i] * q_values[i];
    if (tape) {
        tape->u = std::move(u);
        tape->th = std::move(th);
        tape->scores = std::move(scores);
        tape->alpha = alpha;
        tape->q.assign(q_values.begin(), q_values.end());
    }
    return qstar;
}

void AttnAggregator::backward(const Tape& tape, double d_qstar,
                              std::vector<std::vector<double>>* dtaus,
                              std::vector<double>* dqs) {
    const int n = static_cast<int>(tape.alpha.size());
    const int in = state_dim_ + tau_dim_ + 1;
    auto& w1 = params_.get("W1");
    auto& w = params_.get("w");

    std::vector<double> dalpha(n), dq(n, 0.0);
    for (int i = 0; i < n; ++i) {
        dalpha[i] = d_qstar * tape.q[i];
        dq[i] = d_qstar * tape.alpha[i];
    }
    const auto dscore = tc::softmax_backward(tape.alpha, dalpha);
    dtaus->assign(n, std::vector<double>(tau_dim_, 0.0));
    for (int i = 0; i < n; ++i) {
        for (int h = 0; h < hidden_; ++h) {
            w.g[h] += dscore[i] * tape.th[i][h];
            const double dth = dscore[i] * w.v[h];
            const double dpre = dth * (1.0 - tape.th[i][h] * tape.th[i][h]);
            double* w1row = w1.g.data() + static_cast<size_t>(h) * in;
            const double* w1v = w1.v.data() + static_cast<size_t>(h) * in;
            for (int j = 0; j < in; ++j) w1row[j] += dpre * tape.u[i][j];
            for (int j = 0; j < tau_dim_; ++j)
                (*dtaus)[i][j] += dpre * w1v[state_dim_ + j];
            dq[i] += dpre * w1v[in - 1];
        }
    }
    *dqs = std::move(dq);
}

// ---------------------------------------------------------------------------
// MixingNet

MixingNet::MixingNet(int num_agents, int state_dim, int hidden, uint64_t seed)
    : k_(num_agents), state_dim_(state_dim), hidden_(hidden) {
    Rng rng(seed);
    auto& a1 = params_.add("A1", {hidden_ * k_, state_dim_});
    tc::xavier_uniform(a1, state_dim_, hidden_ * k_, rng);
    params_.add("c1", {hidden_ * k_});
    auto& b1 = params_.add("B1", {hidden_, state_dim_});
    tc::xavier_uniform(b1, state_dim_, hidden_, rng);
    params_.add("d1", {hidden_});
    auto& a2 = params_.add("A2", {hidden_, state_dim_});
    tc::xavier_uniform(a2, state_dim_, hidden_, rng);
    params_.add("c2", {hidden_});
    auto& v1 = params_.add("V1", {hidden_, state_dim_});
    tc::xavier_uniform(v1, state_dim_, hidden_, rng);
    params_.add("e1", {hidden_});
    auto& v2 = params_.add("v2", {hidden_});
    tc::xavier_uniform(v2, hidden_, 1, rng);
    params_.add("e2", {1});
}

double MixingNet::forward(std::span<const double> s, std::span<const double> qstar,
                          Tape* tape) const {
    const auto& a1 = params_.get("A1");
    const auto& c1 = params_.get("c1");
    const auto& b1m = params_.get("B1");
    const auto& d1 = params_.get("d1");
    const auto& a2 = params_.get("A2");
    const auto& c2 = params_.get("c2");
    const auto& v1 = params_.get("V1");
    const auto& e1 = params_.get("e1");
    const auto& v2 = params_.get("v2");
    const auto& e2 = params_.get("e2");

    std::vector<double> w1_pre(hidden_ * k_), w1(hidden_ * k_);
    for (int i = 0; i < hidden_ * k_; ++i) {
        double acc = c1.v[i];
        const double* row = a1.v.data() + static_cast<size_t>(i) * state_dim_;
        for (int j = 0; j < state_dim_; ++j) acc += row[j] * s[j];
        w1_pre[i] = acc;
        w1[i] = std::abs(acc);
    }
    std::vector<double> b1(hidden_), h_pre(hidden_), h(hidden_);
    for (int i = 0; i < hidden_; ++i) {
        double acc = d1.v[i];
        const double* row = b1m.v.data() + static_cast<size_t>(i) * state_dim_;
        for (int j = 0; j < state_dim_; ++j) acc += row[j] * s[j];
        b1[i] = acc;
        double hp = acc;
        for (int k = 0; k < k_; ++k) hp += w1[i * k_ + k] * qstar[k];
        h_pre[i] = hp;
        h[i] = tc::elu_scalar(hp);
    }
    std::vector<double> w2_pre(hidden_), w2(hidden_), v_pre(hidden_), v_act(hidden_);
    double qtot = e2.v[0];
    for (int i = 0; i < hidden_; ++i) {
        double acc = c2.v[i];
        const double* row = a2.v.data() + static_cast<size_t>(i) * state_dim_;
        for (int j = 0; j < state_dim_; ++j) acc += row[j] * s[j];
        w2_pre[i] = acc;
        w2[i] = std::abs(acc);
        qtot += w2[i] * h[i];

        double vp = e1.v[i];
        const double* vrow = v1.v.data() + static_cast<size_t>(i) * state_dim_;
        for (int j = 0; j < state_dim_; ++j) vp += vrow[j] * s[j];
        v_pre[i] = vp;
        v_act[i] = vp > 0 ? vp : 0.0;
        qtot += v2.v[i] * v_act[i];
    }
    if (tape) {
        tape->s.assign(s.begin(), s.end());
        tape->qstar.assign(qstar.begin(), qstar.end());
        tape->w1_pre = std::move(w1_pre);
        tape->w1 = std::move(w1);
        tape->b1 = std::move(b1);
        tape->h_pre = std::move(h_pre);
        tape->h = std::move(h);
        tape->w2_pre = std::move(w2_pre);
        tape->w2 = std::move(w2);
        tape->v_pre = std::move(v_pre);
        tape->v_act = std::move(v_act);
        tape->qtot = qtot;
    }
    return qtot;
}

void MixingNet::backward(const Tape& tape, double d, std::vector<double>* d_qstar) {
    auto& a1 = params_.get("A1");
    auto& c1 = params_.get("c1");
    auto& b1m = params_.get("B1");
    auto& d1 = params_.get("d1");
    auto& a2 = params_.get("A2");
    auto& c2 = params_.get("c2");
    auto& v1 = params_.get("V1");
    auto& e1 = params_.get("e1");
    auto& v2 = params_.get("v2");
    auto& e2 = params_.get("e2");

    d_qstar->assign(k_, 0.0);
    e2.g[0] += d;
    for (int i = 0; i < hidden_; ++i) {
        // value head
        v2.g[i] += d * tape.v_act[i];
        const double dv_pre = tape.v_pre[i] > 0 ? d * v2.v[i] : 0.0;
        if (dv_pre != 0.0) {
            double* vrow = v1.g.data() + static_cast<size_t>(i) * state_dim_;
            for (int j = 0; j < state_dim_; ++j) vrow[j] += dv_pre * tape.s[j];
            e1.g[i] += dv_pre;
        }
        // second mixing layer
        const double dw2 = d * tape.h[i];
        const double sgn2 = tape.w2_pre[i] > 0 ? 1.0 : (tape.w2_pre[i] < 0 ? -1.0 : 0.0);
        const double dw2_pre = dw2 * sgn2;
        double* a2row = a2.g.data() + static_cast<size_t>(i) * state_dim_;
        for (int j = 0; j < state_dim_; ++j) a2row[j] += dw2_pre * tape.s[j];
        c2.g[i] += dw2_pre;

        const double dh = d * tape.w2[i];
        const double dh_pre = dh * tc::elu_grad_from_output(tape.h[i]);
        double* b1row = b1m.g.data() + static_cast<size_t>(i) * state_dim_;
        for (int j = 0; j < state_dim_; ++j) b1row[j] += dh_pre * tape.s[j];
        d1.g[i] += dh_pre;
        for (int k = 0; k < k_; ++k) {
            const int w1i = i * k_ + k;
            const double dw1 = dh_pre * tape.qstar[k];
            const double sgn1 =
                tape.w1_pre[w1i] > 0 ? 1.0 : (tape.w1_pre[w1i] < 0 ? -1.0 : 0.0);
            const double dw1_pre = dw1 * sgn1;
            double* a1row = a1.g.data() + static_cast<size_t>(w1i) * state_dim_;
            for (int j = 0; j < state_dim_; ++j) a1row[j] += dw1_pre * tape.s[j];
            c1.g[w1i] += dw1_pre;
            (*d_qstar)[k] += dh_pre * tape.w1[w1i];
        }
    }
}

// ---------------------------------------------------------------------------
// Reward

double gce_reward(const sim::FlowCounters& open, const sim::FlowCounters& close,
                  double* throughput_term, double* inefficiency_term,
                  double* congestion_term) {
    const auto starts = close.started - open.started;
    const auto comps = close.completed - open.completed;
    const double thr = static_cast<double>(comps) / std::max<int64_t>(1, starts);
    double ineff = 0.0;
    if (comps > 0)
        ineff = (close.inefficiency_sum - open.inefficiency_sum) / comps - 1.0;
    const int steps = close.steps - open.steps;
    const double cong =
        steps > 0 ? (close.congested_fraction_sum - open.congested_fraction_sum) / steps : 0.0;
    if (throughput_term) *throughput_term = thr;
    if (inefficiency_term) *inefficiency_term = ineff;
    if (congestion_term) *congestion_term = cong;
    return 1.0 * thr - 1.0 * ineff - 0.5 * cong;
}

// ---------------------------------------------------------------------------
// HhanSystem

HhanSystem::HhanSystem(std::shared_ptr<const net::RoadNetwork> net, net::HubGraph hub_graph,
                       HhanConfig cfg)
    : net_(std::move(net)),
      hubs_(std::move(hub_graph)),
      cfg_(cfg),
      act_rng_(derive_seed(cfg.seed, 0xB1, 0)),
      sample_rng_(derive_seed(cfg.seed, 0xB2, 0)) {
    const int k = static_cast<int>(hubs_.hubs.size());
    dest_dim_ = 2 * net_->zorder_bits_per_axis();
    freeflow_weights_ = net_->free_flow_weights();

    const auto matrix = net::intersection_time_matrix(*net_, freeflow_weights_);
    for (double v : matrix)
        if (std::isfinite(v)) diameter_time_ = std::max(diameter_time_, v);

    hub_time_.assign(k, std::vector<double>(k, 0.0));
    hub_tables_.reserve(k);
    for (int j = 0; j < k; ++j)
        hub_tables_.push_back(
            std::make_unique<net::RouteTable>(*net_, freeflow_weights_, hubs_.hubs[j]));
    for (int i = 0; i < k; ++i)
        for (int j = 0; j < k; ++j)
            hub_time_[i][j] =
                i == j ? 0.0 : hub_tables_[j]->cost_from_intersection(hubs_.hubs[i]);

    online_.reserve(k);
    for (int i = 0; i < k; ++i)
        online_.emplace_back(dest_dim_, cfg_.z_order_embedding_dim, cfg_.hub_agent_dim,
                             cfg_.neighbor_slots, derive_seed(cfg_.seed, 0xB5, i));
    target_ = online_;
    const int tau_dim = cfg_.z_order_embedding_dim + 11;
    attn_ = AttnAggregator(state_dim(), tau_dim, cfg_.hub_agent_dim,
                           derive_seed(cfg_.seed, 0xB6, 0));
    attn_target_ = attn_;
    mixer_ = MixingNet(k, state_dim(), cfg_.mixing_hidden_dim, derive_seed(cfg_.seed, 0xB7, 0));
    mixer_target_ = mixer_;

    for (int i = 0; i < k; ++i)
        agent_adam_.emplace_back(tc::AdamConfig{cfg_.lr, 0.9, 0.999, cfg_.adam_eps});
    attn_adam_ = tc::Adam({cfg_.lr, 0.9, 0.999, cfg_.adam_eps});
    mixer_adam_ = tc::Adam({cfg_.mixing_lr, 0.9, 0.999, cfg_.adam_eps});
}

int HhanSystem::destination_hub(int dest_intersection) const {
    int best = -1;
    double best_t = std::numeric_limits<double>::infinity();
    for (size_t k = 0; k < hubs_.hubs.size(); ++k) {
        auto it = dest_tables_.find(dest_intersection);
        if (it == dest_tables_.end())
            it = dest_tables_
                     .emplace(dest_intersection,
                              std::make_unique<net::RouteTable>(*net_, freeflow_weights_,
                                                                dest_intersection))
                     .first;
        const double t = hubs_.hubs[k] == dest_intersection
                             ? 0.0
                             : it->second->cost_from_intersection(hubs_.hubs[k]);
        if (t < best_t) {
            best_t = t;
            best = static_cast<int>(k);
        }
    }
    return best;
}

int HhanSystem::hub_within_vicinity(int intersection) const {
    int best = -1;
    double best_d = std::numeric_limits<double>::infinity();
    for (size_t k = 0; k < hubs_.hubs.size(); ++k) {
        const double d = net_->euclidean(intersection, hubs_.hubs[k]);
        if (d <= hubs_.r_vic && d < best_d) {
            best_d = d;
            best = static_cast<int>(k);
        }
    }
    return best;
}

void HhanSystem::append_leg(RouteState& st, const sim::RoutingQuery& q,
                            int target_intersection, bool from_last_plan_road) const {
    const int src =
        from_last_plan_road && !st.plan.empty() ? st.plan.back() : q.r_c;
    if (net_->road(src).tail == target_intersection) return;
    auto it = dest_tables_.find(target_intersection);
    if (it == dest_tables_.end())
        it = dest_tables_
                 .emplace(target_intersection,
                          std::make_unique<net::RouteTable>(*net_, freeflow_weights_,
                                                            target_intersection))
                 .first;
    for (int road : it->second->extract_path(src)) st.plan.push_back(road);
}

double HhanSystem::norm_congestion(const sim::Simulation& s, double ratio) {
    const double span = 1.0 / s.config().v_min_frac - 1.0;
    return clampd((ratio - 1.0) / span, 0.0, 1.0);
}

std::vector<double> HhanSystem::build_global_state(const sim::Simulation& s) const {
    std::vector<double> out;
    out.reserve(state_dim());
    for (int h : hubs_.hubs) {
        out.push_back(s.vicinity_speed(h, hubs_.r_vic));
        out.push_back(norm_congestion(s, s.congestion_ratio(h, hubs_.r_vic)));
    }
    const auto sum = s.system_summary();
    out.push_back(static_cast<double>(sum.active_vehicles) / s.config().vehicle_cap);
    out.push_back(sum.throughput_ratio);
    out.push_back(clampd((sum.mean_trip_inefficiency - 1.0) / 4.0, 0.0, 1.0));
    out.push_back(sum.vicinity_speed_stddev);
    return out;
}

LocalObservation HhanSystem::build_local_observation(const sim::Simulation& s, int hub_idx,
                                                     int dest_hub) const {
    LocalObservation obs;
    obs.dest_hub = dest_hub;
    obs.dest_bits = net_->intersection(hubs_.hubs[dest_hub]).zorder;
    obs.hub_features[0] = s.vicinity_speed(hubs_.hubs[hub_idx], hubs_.r_vic);
    obs.hub_features[1] = norm_congestion(s, s.congestion_ratio(hubs_.hubs[hub_idx], hubs_.r_vic));

    std::vector<double> live(net_->num_roads());
    for (int r = 0; r < net_->num_roads(); ++r)
        live[r] = net_->road(r).length / s.road_speed(r);

    const auto& nbrs = hubs_.out_neighbors[hub_idx];
    for (size_t slot = 0; slot < nbrs.size() && slot < 3; ++slot) {
        const int j = nbrs[slot];
        net::RouteTable table(*net_, live, hubs_.hubs[j]);
        const double live_t = table.cost_from_intersection(hubs_.hubs[hub_idx]);
        const double ff_t = hubs_.edge_time[hub_idx][slot];
        obs.neighbor_features[slot][0] =
            std::isfinite(live_t) ? clampd(live_t / (5.0 * ff_t), 0.0, 1.0) : 1.0;
        obs.neighbor_features[slot][1] =
            norm_congestion(s, s.congestion_ratio(hubs_.hubs[j], hubs_.r_vic));
        obs.neighbor_features[slot][2] =
            clampd(hub_time_[j][dest_hub] / diameter_time_, 0.0, 1.0);
        obs.mask[slot] = 1;
    }
    return obs;
}

namespace {

tc::Tensor obs_dest_tensor(const std::vector<const LocalObservation*>& obs, int dest_dim) {
    tc::Tensor t({static_cast<int>(obs.size()), dest_dim});
    for (size_t i = 0; i < obs.size(); ++i)
        for (int d = 0; d < dest_dim; ++d)
            t.at(static_cast<int>(i), d) = obs[i]->dest_bits[d];
    return t;
}

tc::Tensor obs_feat_tensor(const std::vector<const LocalObservation*>& obs) {
    tc::Tensor t({static_cast<int>(obs.size()), 11});
    for (size_t i = 0; i < obs.size(); ++i) {
        const auto* o = obs[i];
        int c = 0;
        t.at(static_cast<int>(i), c++) = o->hub_features[0];
        t.at(static_cast<int>(i), c++) = o->hub_features[1];
        for (int slot = 0; slot < 3; ++slot)
            for (int f = 0; f < 3; ++f)
                t.at(static_cast<int>(i), c++) = o->neighbor_features[slot][f];
    }
    return t;
}

}  // namespace

void HhanSystem::resolve_open(RouteState& st, DecisionRecord::Next kind, int next_agent,
                              const LocalObservation* next_obs) {
    if (!st.open) return;
    st.open->next = kind;
    if (kind == DecisionRecord::Next::Decision) {
        st.open->next_agent = next_agent;
        st.open->next_obs = *next_obs;
    }
    st.open.reset();
}

void HhanSystem::open_epoch(const sim::Simulation& s) {
    epoch_.active = true;
    epoch_.open_t = s.now();
    epoch_.s = build_global_state(s);
    epoch_.flow = s.flow_counters();
    epoch_.decisions.clear();
}

void HhanSystem::close_epoch(const sim::Simulation& s) {
    if (!epoch_.active) return;
    if (epoch_.decisions.empty()) {
        open_epoch(s);  // discarded
        return;
    }
    GceTransition tr;
    tr.id = epoch_counter_++;
    tr.open_t = epoch_.open_t;
    tr.close_t = s.now();
    tr.s = epoch_.s;
    tr.s_next = build_global_state(s);
    tr.r = gce_reward(epoch_.flow, s.flow_counters(), &tr.r_throughput, &tr.r_inefficiency,
                      &tr.r_congestion);
    tr.decisions.assign(hubs_.hubs.size(), {});
    for (auto& d : epoch_.decisions) tr.decisions[d->agent].push_back(d);
    tr.decision_count = static_cast<int>(epoch_.decisions.size());
    if (trace_on_)
        trace_.push_back({tr.id, tr.open_t, tr.close_t, tr.decision_count, tr.r,
                          tr.r_throughput, tr.r_inefficiency, tr.r_congestion});
    maturing_.push_back(std::move(tr));
    open_epoch(s);
}

void HhanSystem::flush_mature() {
    while (!maturing_.empty()) {
        const auto& front = maturing_.front();
        bool ready = true;
        for (const auto& per_agent : front.decisions)
            for (const auto& d : per_agent)
                if (d->next == DecisionRecord::Next::Open) ready = false;
        if (!ready) break;
        buffer_.push_back(std::move(maturing_.front()));
        maturing_.pop_front();
        if (static_cast<int>(buffer_.size()) > cfg_.gce_buffer_capacity) buffer_.pop_front();
    }
}

void HhanSystem::on_episode_start(int episode, const sim::Simulation& s) {
    epsilon_ = training_
                   ? std::max(cfg_.eps_end, cfg_.eps_start * std::pow(cfg_.eps_decay, episode))
                   : 0.0;
    route_states_.clear();
    episode_loss_sum_ = 0.0;
    episode_loss_count_ = 0;
    if (training_) open_epoch(s);
}

void HhanSystem::on_episode_end(const sim::Simulation& s) {
    std::vector<int> vcs;
    vcs.reserve(route_states_.size());
    for (auto& [vc, _] : route_states_) vcs.push_back(vc);
    std::sort(vcs.begin(), vcs.end());
    for (int vc : vcs)
        resolve_open(route_states_[vc], DecisionRecord::Next::Terminal, -1, nullptr);
    route_states_.clear();
    if (training_) {
        close_epoch(s);
        epoch_.active = false;
        flush_mature();
    }
}

void HhanSystem::after_step(const sim::Simulation& s) {
    if (!training_) return;
    if (epoch_.active && s.now() - epoch_.open_t >= cfg_.gce_max_sim_time) close_epoch(s);
    flush_mature();
    while (decisions_since_update_ >= cfg_.qmix_update_frequency_steps) {
        decisions_since_update_ -= cfg_.qmix_update_frequency_steps;
        if (static_cast<int>(buffer_.size()) >=
            std::max(cfg_.qmix_batch_size, cfg_.min_gce_buffer_size)) {
            const double loss = qmix_train_step();
            episode_loss_sum_ += loss;
            ++episode_loss_count_;
        }
    }
}

double HhanSystem::mean_episode_loss() const {
    return episode_loss_count_ > 0 ? episode_loss_sum_ / episode_loss_count_ : 0.0;
}

sim::RoutingResponse HhanSystem::route(const sim::RoutingQuery& q, const sim::Simulation& s) {
    if (q.u == q.i_d) {
        auto it = route_states_.find(q.vc);
        if (it != route_states_.end()) {
            resolve_open(it->second, DecisionRecord::Next::Terminal, -1, nullptr);
            route_states_.erase(it);
        }
        return sim::RoutingResponse::success();
    }
    if (q.t > q.t_max) {
        auto it = route_states_.find(q.vc);
        if (it != route_states_.end()) {
            resolve_open(it->second, DecisionRecord::Next::Terminal, -1, nullptr);
            route_states_.erase(it);
        }
        return sim::RoutingResponse::fail();
    }

    RouteState& st = route_states_[q.vc];
    if (st.dest_hub < 0) st.dest_hub = destination_hub(q.i_d);

    for (int guard = 0; st.plan.empty(); ++guard) {
        if (guard > static_cast<int>(hubs_.hubs.size()) + 2)
            throw ProtocolViolation("hub routing failed to produce a plan");
        const int k = hub_within_vicinity(q.u);
        if (k < 0) {
            // Plumbing: head for the nearest hub first.
            int best = -1;
            double best_t = std::numeric_limits<double>::infinity();
            for (size_t h = 0; h < hubs_.hubs.size(); ++h) {
                const double t = hub_tables_[h]->cost_from_intersection(q.u);
                if (t < best_t) {
                    best_t = t;
                    best = static_cast<int>(h);
                }
            }
            append_leg(st, q, hubs_.hubs[best], false);
            continue;
        }
        if (k == st.dest_hub) {
            append_leg(st, q, q.i_d, false);
            break;
        }

        LocalObservation obs = build_local_observation(s, k, st.dest_hub);
        const std::vector<const LocalObservation*> one{&obs};
        const tc::Tensor qv =
            online_[k].forward(obs_dest_tensor(one, dest_dim_), obs_feat_tensor(one), nullptr);
        int slot = -1;
        double best = kNegInf;
        for (int a = 0; a < cfg_.neighbor_slots; ++a) {
            if (!obs.mask[a]) continue;
            if (qv.v[a] > best) {
                best = qv.v[a];
                slot = a;
            }
        }
        const bool explore = training_ && epsilon_ > 0 && act_rng_.uniform() < epsilon_;
        if (explore) {
            std::vector<int> valid;
            for (int a = 0; a < cfg_.neighbor_slots; ++a)
                if (obs.mask[a]) valid.push_back(a);
            slot = valid[act_rng_.uniform_int(static_cast<int>(valid.size()))];
        }

        if (training_) {
            resolve_open(st, DecisionRecord::Next::Decision, k, &obs);
            auto rec = std::make_shared<DecisionRecord>();
            rec->agent = k;
            rec->vc = q.vc;
            rec->t = q.t;
            rec->obs = obs;
            rec->action = slot;
            rec->q_value = qv.v[slot];
            st.open = rec;
            epoch_.decisions.push_back(rec);
            ++decision_counter_total_;
            ++decisions_since_update_;
            if (static_cast<int>(epoch_.decisions.size()) >= cfg_.gce_size) close_epoch(s);
        }

        const int j = hubs_.out_neighbors[k][slot];
        append_leg(st, q, hubs_.hubs[j], false);
        if (j == st.dest_hub) append_leg(st, q, q.i_d, true);
        break;
    }

    const int road = st.plan.front();
    st.plan.pop_front();
    return sim::RoutingResponse::next(road);
}

sim::Router HhanSystem::router(const sim::Simulation& s) {
    return [this, &s](const sim::RoutingQuery& q) { return route(q, s); };
}

double HhanSystem::clip_all() {
    double sq = 0.0;
    auto add = [&](const tc::ParamSet& p) {
        for (const auto& name : p.names())
            for (double g : p.get(name).g) sq += g * g;
    };
    for (const auto& a : online_) add(a.params());
    add(attn_.params());
    add(mixer_.params());
    const double norm = std::sqrt(sq);
    if (norm <= cfg_.clip_grad_norm || norm == 0.0) return 1.0;
    const double scale = cfg_.clip_grad_norm / norm;
    auto apply = [&](tc::ParamSet& p) {
        for (const auto& name : p.names())
            for (double& g : p.get(name).g) g *= scale;
    };
    for (auto& a : online_) apply(a.params());
    apply(attn_.params());
    apply(mixer_.params());
    return scale;
}

double HhanSystem::qmix_train_step() {
    const int k = static_cast<int>(hubs_.hubs.size());
    const int bs = std::min<int>(cfg_.qmix_batch_size, static_cast<int>(buffer_.size()));
    std::vector<int> idx(buffer_.size());
    for (size_t i = 0; i < idx.size(); ++i) idx[i] = static_cast<int>(i);
    for (int i = 0; i < bs; ++i) {
        const int j = i + sample_rng_.uniform_int(static_cast<int>(idx.size()) - i);
        std::swap(idx[i], idx[j]);
    }

    for (auto& a : online_) a.params().zero_grad();
    attn_.params().zero_grad();
    mixer_.params().zero_grad();

    double loss = 0.0;
    for (int bi = 0; bi < bs; ++bi) {
        const GceTransition& tr = buffer_[idx[bi]];

        // Online pass.
        std::vector<double> qstar(k, 0.0);
        std::vector<HubAgentNet::Tape> agent_tapes(k);
        std::vector<AttnAggregator::Tape> attn_tapes(k);
        std::vector<bool> has(k, false);
        for (int a = 0; a < k; ++a) {
            const auto& decs = tr.decisions[a];
            if (decs.empty()) continue;
            has[a] = true;
            std::vector<const LocalObservation*> obs;
            obs.reserve(decs.size());
            for (const auto& d : decs) obs.push_back(&d->obs);
            const tc::Tensor qv = online_[a].forward(obs_dest_tensor(obs, dest_dim_),
                                                     obs_feat_tensor(obs), &agent_tapes[a]);
            std::vector<std::vector<double>> taus(decs.size());
            std::vector<double> chosen(decs.size());
            for (size_t i = 0; i < decs.size(); ++i) {
                const auto& tau = agent_tapes[a].tau;
                taus[i].assign(tau.v.begin() + static_cast<size_t>(i) * tau.cols(),
                               tau.v.begin() + static_cast<size_t>(i + 1) * tau.cols());
                chosen[i] = qv.at(static_cast<int>(i), decs[i]->action);
            }
            qstar[a] = attn_.forward(tr.s, taus, chosen, &attn_tapes[a]);
        }
        MixingNet::Tape mtape;
        const double qtot = mixer_.forward(tr.s, qstar, &mtape);

        // Target pass over successor observations.
        double y = tr.r;
        bool any_successor = false;
        for (int a = 0; a < k && !any_successor; ++a)
            for (const auto& d : tr.decisions[a])
                if (d->next == DecisionRecord::Next::Decision) {
                    any_successor = true;
                    break;
                }
        if (any_successor) {
            std::vector<double> qstar_next(k, 0.0);
            for (int a = 0; a < k; ++a) {
                std::vector<std::vector<double>> taus;
                std::vector<double> values;
                for (const auto& d : tr.decisions[a]) {
                    if (d->next != DecisionRecord::Next::Decision) continue;
                    const std::vector<const LocalObservation*> one{&d->next_obs};
                    HubAgentNet::Tape ttape;
                    const tc::Tensor nq =
                        target_[d->next_agent].forward(obs_dest_tensor(one, dest_dim_),
                                                       obs_feat_tensor(one), &ttape);
                    double best = kNegInf;
                    for (int s2 = 0; s2 < cfg_.neighbor_slots; ++s2)
                        if (d->next_obs.mask[s2]) best = std::max(best, nq.v[s2]);
                    taus.push_back(std::vector<double>(
                        ttape.tau.v.begin(), ttape.tau.v.begin() + ttape.tau.cols()));
                    values.push_back(best);
                }
                if (!taus.empty())
                    qstar_next[a] = attn_target_.forward(tr.s_next, taus, values, nullptr);
            }
            y += cfg_.gamma * mixer_target_.forward(tr.s_next, qstar_next, nullptr);
        }

        const double diff = qtot - y;
        loss += diff * diff;
        const double d_qtot = 2.0 * diff / bs;

        std::vector<double> d_qstar;
        mixer_.backward(mtape, d_qtot, &d_qstar);
        for (int a = 0; a < k; ++a) {
            if (!has[a]) continue;
            std::vector<std::vector<double>> dtaus;
            std::vector<double> dqs;
            attn_.backward(attn_tapes[a], d_qstar[a], &dtaus, &dqs);
            const int n = static_cast<int>(tr.decisions[a].size());
            tc::Tensor dq({n, cfg_.neighbor_slots});
            tc::Tensor dtau({n, online_[a].tau_dim()});
            for (int i = 0; i < n; ++i) {
                dq.at(i, tr.decisions[a][i]->action) = dqs[i];
                for (int j = 0; j < online_[a].tau_dim(); ++j) dtau.at(i, j) = dtaus[i][j];
            }
            online_[a].backward(agent_tapes[a], dq, &dtau);
        }
    }
    loss /= bs;

    clip_all();
    for (int a = 0; a < k; ++a) agent_adam_[a].step(online_[a].params());
    attn_adam_.step(attn_.params());
    mixer_adam_.step(mixer_.params());

    const double tau_mix = 1.0 - cfg_.polyak;
    for (int a = 0; a < k; ++a)
        tc::polyak_update(target_[a].params(), online_[a].params(), tau_mix);
    tc::polyak_update(attn_target_.params(), attn_.params(), tau_mix);
    tc::polyak_update(mixer_target_.params(), mixer_.params(), tau_mix);

    ++train_steps_;
    last_loss_ = loss;
    return loss;
}

void HhanSystem::save_checkpoint(const std::string& path) const {
    tc::ParamSet bundle;
    const int k = static_cast<int>(hubs_.hubs.size());
    for (int a = 0; a < k; ++a)
        bundle.absorb(online_[a].params(), "hub" + std::to_string(a) + ".");
    bundle.absorb(attn_.params(), "attn.");
    bundle.absorb(mixer_.params(), "mixer.");
    auto& ids = bundle.add("hubgraph.ids", {k});
    for (int a = 0; a < k; ++a) ids.v[a] = hubs_.hubs[a];
    auto& nb = bundle.add("hubgraph.neighbors", {k, cfg_.neighbor_slots});
    auto& et = bundle.add("hubgraph.edge_time", {k, cfg_.neighbor_slots});
    nb.fill(-1);
    for (int a = 0; a < k; ++a)
        for (size_t s = 0; s < hubs_.out_neighbors[a].size(); ++s) {
            nb.at(a, static_cast<int>(s)) = hubs_.out_neighbors[a][s];
            et.at(a, static_cast<int>(s)) = hubs_.edge_time[a][s];
        }
    auto& rv = bundle.add("hubgraph.r_vic", {1});
    rv.v[0] = hubs_.r_vic;
    auto& dm = bundle.add("hubgraph.d_max", {1});
    dm.v[0] = hubs_.d_max;
    bundle.save_file(path);
}

void HhanSystem::load_checkpoint(const std::string& path) {
    tc::ParamSet bundle;
    bundle.load_file(path);
    const int k = static_cast<int>(hubs_.hubs.size());
    const auto& ids = bundle.get("hubgraph.ids");
    for (int a = 0; a < k; ++a)
        if (static_cast<int>(ids.v[a]) != hubs_.hubs[a])
            throw LoadError("checkpoint hub set does not match the constructed hub graph");
    for (int a = 0; a < k; ++a) {
        const std::string prefix = "hub" + std::to_string(a) + ".";
        for (const auto& name : online_[a].params().names())
            online_[a].params().get(name).v = bundle.get(prefix + name).v;
    }
    for (const auto& name : attn_.params().names())
        attn_.params().get(name).v = bundle.get("attn." + name).v;
    for (const auto& name : mixer_.params().names())
        mixer_.params().get(name).v = bundle.get("mixer." + name).v;
    target_ = online_;
    attn_target_ = attn_;
    mixer_target_ = mixer_;
}

}  // namespace marl::hub
