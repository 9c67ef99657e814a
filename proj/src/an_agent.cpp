#include "marlroute/an_agent.hpp"

#include <algorithm>
#include <cmath>
#include <map>

namespace marl::an {

std::vector<int> AnConfig::hidden_for_hops() const {
    if (!hidden.empty()) return hidden;
    switch (hops) {
        case 0: return {8, 6};
        case 1: return {10, 6};
        case 2: return {12, 9, 6};
        default: throw std::invalid_argument("AnConfig: hops must be 0, 1 or 2");
    }
}

void ReplayBuffer::push(Experience e) {
    if (static_cast<int>(data_.size()) < capacity_) {
        data_.push_back(std::move(e));
    } else {
        data_[write_] = std::move(e);
        write_ = (write_ + 1) % capacity_;
    }
}

std::vector<int> ReplayBuffer::sample_indices(int n, Rng& rng) const {
    const int sz = size();
    std::vector<int> idx(sz);
    for (int i = 0; i < sz; ++i) idx[i] = i;
    std::vector<int> out;
    out.reserve(n);
    for (int i = 0; i < n && i < sz; ++i) {
        const int j = i + rng.uniform_int(sz - i);
        std::swap(idx[i], idx[j]);
        out.push_back(idx[i]);
    }
    return out;
}

QNet::QNet(int dest_bits, int ctx_dim, const std::vector<int>& hidden, int out_dim,
           uint64_t init_seed)
    : dest_dim_(dest_bits), ctx_dim_(ctx_dim), out_dim_(out_dim), hidden_(hidden) {
    Rng rng(init_seed);
    const int emb_dim = hidden_.front();
    auto& we = params_.add("emb.W", {emb_dim, dest_dim_});
    tc::xavier_uniform(we, dest_dim_, emb_dim, rng);
    params_.add("emb.b", {emb_dim});
    int in = emb_dim + ctx_dim_;
    for (size_t k = 0; k < hidden_.size(); ++k) {
        auto& w = params_.add("fc" + std::to_string(k) + ".W", {hidden_[k], in});
        tc::xavier_uniform(w, in, hidden_[k], rng);
        params_.add("fc" + std::to_string(k) + ".b", {hidden_[k]});
        in = hidden_[k];
    }
    auto& wh = params_.add("head.W", {out_dim_, in});
    tc::xavier_uniform(wh, in, out_dim_, rng);
    params_.add("head.b", {out_dim_});
}

tc::Tensor QNet::embed_destination(const tc::Tensor& dest_bits) const {
    return tc::relu(tc::linear_forward(dest_bits, params_.get("emb.W"), params_.get("emb.b")));
}

tc::Tensor QNet::forward(const tc::Tensor& dest_bits, const tc::Tensor& ctx, Tape* tape) const {
    const int b = dest_bits.rows();
    tc::Tensor emb = embed_destination(dest_bits);
    tc::Tensor x0({b, emb.cols() + ctx_dim_});
    for (int i = 0; i < b; ++i) {
        std::copy_n(emb.v.data() + static_cast<size_t>(i) * emb.cols(), emb.cols(),
                    x0.v.data() + static_cast<size_t>(i) * x0.cols());
        std::copy_n(ctx.v.data() + static_cast<size_t>(i) * ctx_dim_, ctx_dim_,
                    x0.v.data() + static_cast<size_t>(i) * x0.cols() + emb.cols());
    }
    std::vector<tc::Tensor> acts;
    tc::Tensor cur = x0;
    for (size_t k = 0; k < hidden_.size(); ++k) {
        cur = tc::relu(tc::linear_forward(cur, params_.get("fc" + std::to_string(k) + ".W"),
                                          params_.get("fc" + std::to_string(k) + ".b")));
        acts.push_back(cur);
    }
    tc::Tensor q = tc::linear_forward(cur, params_.get("head.W"), params_.get("head.b"));
    if (tape) {
        tape->dest = dest_bits;
        tape->emb = std::move(emb);
        tape->ctx = ctx;
        tape->x0 = std::move(x0);
        tape->acts = std::move(acts);
        tape->q = q;
    }
    return q;
}

void QNet::backward(const Tape& tape, const tc::Tensor& dq, tc::Tensor* dctx) {
    const int b = dq.rows();
    const tc::Tensor* below = tape.acts.empty() ? &tape.x0 : &tape.acts.back();
    tc::Tensor dcur({b, below->cols()});
    tc::linear_backward(*below, params_.get("head.W"), params_.get("head.b"), dq, &dcur);
    for (int k = static_cast<int>(hidden_.size()) - 1; k >= 0; --k) {
        tc::Tensor dpre({b, tape.acts[k].cols()});
        tc::relu_backward(tape.acts[k], dcur, dpre);
        const tc::Tensor* input = k == 0 ? &tape.x0 : &tape.acts[k - 1];
        tc::Tensor dinput({b, input->cols()});
        tc::linear_backward(*input, params_.get("fc" + std::to_string(k) + ".W"),
                            params_.get("fc" + std::to_string(k) + ".b"), dpre, &dinput);
        dcur = std::move(dinput);
    }
    // dcur is d(x0): split into embedding part and context part.
    const int emb_dim = tape.emb.cols();
    tc::Tensor demb({b, emb_dim});
    for (int i = 0; i < b; ++i) {
        for (int d = 0; d < emb_dim; ++d)
            demb.at(i, d) = tape.emb.at(i, d) > 0 ? dcur.at(i, d) : 0.0;
        if (dctx)
            for (int d = 0; d < ctx_dim_; ++d) dctx->at(i, d) += dcur.at(i, emb_dim + d);
    }
    tc::linear_backward(tape.dest, params_.get("emb.W"), params_.get("emb.b"), demb, nullptr);
}

AnSystem::AnSystem(std::shared_ptr<const net::RoadNetwork> net, AnConfig cfg)
    : net_(std::move(net)),
      cfg_(std::move(cfg)),
      act_rng_(derive_seed(cfg_.seed, 0xA1, 0)),
      sample_rng_(derive_seed(cfg_.seed, 0xA2, 0)),
      dropout_rng_(derive_seed(cfg_.seed, 0xA3, 0)) {
    const int n = net_->num_intersections();
    const int f = net_->max_out_degree();
    if (f > 32) throw std::invalid_argument("AnSystem supports out-degree up to 32");
    dest_dim_ = 2 * net_->zorder_bits_per_axis();
    freeflow_weights_ = net_->free_flow_weights();

    graph_.neighbors.resize(n);
    for (int i = 0; i < n; ++i) graph_.neighbors[i] = net_->neighborhood(i);

    if (cfg_.hops > 0) {
        auto gcfg = gat::stack_config(cfg_.hops, f);
        gcfg.dropout = cfg_.gat_dropout;
        gat_ = std::make_unique<gat::GatStack>(gcfg, derive_seed(cfg_.seed, 0xA6, 0));
        ctx_dim_ = gcfg.output_dim();
        gat_adam_ = tc::Adam({cfg_.gat_lr, 0.9, 0.999, cfg_.adam_eps});
    } else {
        ctx_dim_ = f;
    }

    agent_of_.assign(n, -1);
    const auto hidden = cfg_.hidden_for_hops();
    for (int i = 0; i < n; ++i) {
        if (!cfg_.control_all && !net_->intersection(i).agent_controlled) continue;
        const int idx = static_cast<int>(agents_.size());
        agent_of_[i] = idx;
        agent_nodes_.push_back(i);
        auto agent = std::make_unique<Agent>(cfg_.buffer_size);
        agent->node = i;
        agent->online = QNet(dest_dim_, ctx_dim_, hidden, f, derive_seed(cfg_.seed, 0xA9, i));
        agent->target = agent->online;
        agent->adam = tc::Adam({cfg_.lr, 0.9, 0.999, cfg_.adam_eps});
        if (gat_) agent->plan = gat_->make_plan(graph_, {i});
        agents_.push_back(std::move(agent));
    }
    if (agents_.empty())
        throw std::invalid_argument("AnSystem: network has no controlled intersections");
}

void AnSystem::on_episode_start(int episode) {
    const double span = cfg_.eps_start - cfg_.eps_end;
    const double frac = cfg_.eps_decay_episodes > 0
                            ? std::min(1.0, static_cast<double>(episode) / cfg_.eps_decay_episodes)
                            : 1.0;
    epsilon_ = training_ ? cfg_.eps_start - span * frac : 0.0;
    episode_stats_ = {};
    emb_step_ = -1;
}

void AnSystem::on_episode_end(int end_time) {
    std::vector<int> vcs;
    vcs.reserve(pending_.size());
    for (const auto& [vc, _] : pending_) vcs.push_back(vc);
    std::sort(vcs.begin(), vcs.end());
    for (int vc : vcs) close_pending(vc, end_time, true, -1, 0, nullptr);
    pending_.clear();
    emb_step_ = -1;
}

const ReplayBuffer& AnSystem::buffer_of_node(int intersection) const {
    const int idx = agent_of_.at(intersection);
    if (idx < 0) throw std::invalid_argument("no agent at intersection");
    return agents_[idx]->buffer;
}

tc::Tensor AnSystem::dest_bits_tensor(const std::vector<int>& dests) const {
    tc::Tensor t({static_cast<int>(dests.size()), dest_dim_});
    for (size_t i = 0; i < dests.size(); ++i) {
        const auto& bits = net_->intersection(dests[i]).zorder;
        for (int d = 0; d < dest_dim_; ++d)
            t.at(static_cast<int>(i), d) = bits[d];
    }
    return t;
}

void AnSystem::refresh_embeddings(const sim::Simulation& s) const {
    if (emb_step_ == s.now()) return;
    const auto bits = s.network_state();
    std::vector<double> feats(bits.size());
    for (size_t i = 0; i < bits.size(); ++i) feats[i] = bits[i];
    if (gat_) {
        emb_cache_ = gat_->forward_all(graph_, feats);
    } else {
        emb_cache_ = std::move(feats);
    }
    words_cache_ = s.network_state_words();
    emb_step_ = s.now();
}

std::vector<double> AnSystem::context_row(const sim::Simulation& s, int node) const {
    refresh_embeddings(s);
    std::vector<double> row(ctx_dim_);
    std::copy_n(emb_cache_.data() + static_cast<size_t>(node) * ctx_dim_, ctx_dim_, row.data());
    return row;
}

uint32_t AnSystem::valid_mask(const sim::RoutingQuery& q) const {
    const auto& out = net_->out_roads(q.u);
    const auto& nh = net::next_hops(*net_, q.r_c);
    uint32_t mask = 0;
    for (size_t slot = 0; slot < out.size(); ++slot)
        if (std::binary_search(nh.begin(), nh.end(), out[slot]))
            mask |= (1u << slot);
    return mask;
}

void AnSystem::close_pending(int vc, int t, bool terminal, int next_node, uint32_t next_mask,
                             const AgentObservation* next_obs) {
    auto it = pending_.find(vc);
    if (it == pending_.end()) return;
    const Pending& p = it->second;
    Experience e;
    e.vc = vc;
    e.obs = p.obs;
    e.action_slot = p.action_slot;
    e.reward = -static_cast<double>(t - p.t);
    e.terminal = terminal;
    if (!terminal) {
        e.next_node = next_node;
        e.next_obs = *next_obs;
        e.next_valid_mask = next_mask;
    }
    Agent& agent = *agents_[p.agent_idx];
    agent.buffer.push(std::move(e));
    ++agent.new_exp;
    if (std::find(touched_.begin(), touched_.end(), p.agent_idx) == touched_.end())
        touched_.push_back(p.agent_idx);
    pending_.erase(it);
}

sim::RoutingResponse AnSystem::route(const sim::RoutingQuery& q, const sim::Simulation& s) {
    if (q.u == q.i_d) {
        if (training_) close_pending(q.vc, q.t, true, -1, 0, nullptr);
        return sim::RoutingResponse::success();
    }
    if (q.t > q.t_max) {
        if (training_) close_pending(q.vc, q.t, true, -1, 0, nullptr);
        return sim::RoutingResponse::fail();
    }

    const int agent_idx = agent_of_[q.u];
    if (agent_idx < 0) {
        // Uncontrolled intersection: static free-flow shortest-path fallback.
        auto it = fallback_tables_.find(q.i_d);
        if (it == fallback_tables_.end())
            it = fallback_tables_
                     .emplace(q.i_d, std::make_unique<net::RouteTable>(*net_, freeflow_weights_,
                                                                       q.i_d))
                     .first;
        const int nx = it->second->next_road_after(q.r_c);
        if (nx < 0 || !it->second->reachable_via(nx))
            throw NoPathError("fallback: destination unreachable");
        return sim::RoutingResponse::next(nx);
    }

    const uint32_t mask = valid_mask(q);
    if (mask == 0) throw ProtocolViolation("query with empty next-hop set");
    Agent& agent = *agents_[agent_idx];

    AgentObservation obs;
    if (training_) {
        refresh_embeddings(s);
        obs.node = q.u;
        obs.dest = q.i_d;
        obs.state = words_cache_;
    }

    int slot;
    const bool explore = training_ && epsilon_ > 0 && act_rng_.uniform() < epsilon_;
    if (explore) {
        std::vector<int> valid;
        for (int b = 0; b < 32; ++b)
            if (mask & (1u << b)) valid.push_back(b);
        slot = valid[act_rng_.uniform_int(static_cast<int>(valid.size()))];
    } else {
        const auto ctx_row = context_row(s, q.u);
        tc::Tensor ctx({1, ctx_dim_});
        std::copy(ctx_row.begin(), ctx_row.end(), ctx.v.begin());
        const tc::Tensor dest = dest_bits_tensor({q.i_d});
        const tc::Tensor qv = agent.online.forward(dest, ctx, nullptr);
        slot = -1;
        double best = -std::numeric_limits<double>::infinity();
        for (int b = 0; b < agent.online.out_dim(); ++b) {
            if (!(mask & (1u << b))) continue;
            if (qv.v[b] > best) {
                best = qv.v[b];
                slot = b;
            }
        }
    }

    if (training_) {
        close_pending(q.vc, q.t, false, q.u, mask, &obs);
        Pending p;
        p.node = q.u;
        p.agent_idx = agent_idx;
        p.action_slot = slot;
        p.t = q.t;
        p.obs = std::move(obs);
        pending_[q.vc] = std::move(p);
    }

    return sim::RoutingResponse::next(net_->out_roads(q.u)[slot]);
}

sim::Router AnSystem::router(const sim::Simulation& s) {
    return [this, &s](const sim::RoutingQuery& q) { return route(q, s); };
}

std::vector<tc::Tensor> AnSystem::gather_features(
    const gat::Plan& plan, const std::vector<const StateWords*>& states) const {
    const int f = net_->max_out_degree();
    const int b = static_cast<int>(states.size());
    std::vector<tc::Tensor> x0;
    x0.reserve(plan.sets[0].size());
    for (int node : plan.sets[0]) {
        tc::Tensor t({b, f});
        for (int bi = 0; bi < b; ++bi)
            for (int d = 0; d < f; ++d)
                t.at(bi, d) = state_bit(*states[bi], node * f + d) ? 1.0 : 0.0;
        x0.push_back(std::move(t));
    }
    return x0;
}

tc::Tensor AnSystem::context_batch(Agent& agent, const std::vector<const Experience*>& batch,
                                   gat::Tape* tape) {
    const int b = static_cast<int>(batch.size());
    if (!gat_) {
        const int f = net_->max_out_degree();
        tc::Tensor ctx({b, f});
        for (int bi = 0; bi < b; ++bi)
            for (int d = 0; d < f; ++d)
                ctx.at(bi, d) =
                    state_bit(batch[bi]->obs.state, agent.node * f + d) ? 1.0 : 0.0;
        return ctx;
    }
    std::vector<const StateWords*> states;
    states.reserve(b);
    for (const auto* e : batch) states.push_back(&e->obs.state);
    auto x0 = gather_features(agent.plan, states);
    auto rows = gat_->forward(agent.plan, x0, /*training=*/true, &dropout_rng_, tape);
    return rows[0];
}

double AnSystem::train_agent(Agent& agent) {
    const int b = cfg_.batch_size;
    const auto idx = agent.buffer.sample_indices(b, sample_rng_);
    std::vector<const Experience*> batch;
    batch.reserve(idx.size());
    for (int i : idx) batch.push_back(&agent.buffer.at(i));
    const int bs = static_cast<int>(batch.size());

    // Online forward.
    gat::Tape gat_tape;
    tc::Tensor ctx = context_batch(agent, batch, gat_ ? &gat_tape : nullptr);
    std::vector<int> dests(bs);
    for (int i = 0; i < bs; ++i) dests[i] = batch[i]->obs.dest;
    const tc::Tensor dest = dest_bits_tensor(dests);
    QNet::Tape qtape;
    const tc::Tensor qv = agent.online.forward(dest, ctx, &qtape);

    // Targets: bootstrap through the NEXT agent's target network.
    std::vector<double> y(bs);
    std::map<int, std::vector<int>> by_next;  // next agent idx -> sample positions
    for (int i = 0; i < bs; ++i) {
        y[i] = batch[i]->reward;
        if (!batch[i]->terminal) by_next[agent_of_[batch[i]->next_node]].push_back(i);
    }
    for (const auto& [next_idx, samples] : by_next) {
        Agent& next_agent = *agents_[next_idx];
        const int nb = static_cast<int>(samples.size());
        tc::Tensor nctx;
        if (!gat_) {
            const int f = net_->max_out_degree();
            nctx = tc::Tensor({nb, f});
            for (int s = 0; s < nb; ++s)
                for (int d = 0; d < f; ++d)
                    nctx.at(s, d) = state_bit(batch[samples[s]]->next_obs.state,
                                              next_agent.node * f + d)
                                        ? 1.0
                                        : 0.0;
        } else {
            std::vector<const StateWords*> states;
            states.reserve(nb);
            for (int s : samples) states.push_back(&batch[s]->next_obs.state);
            auto x0 = gather_features(next_agent.plan, states);
            nctx = gat_->forward(next_agent.plan, x0, /*training=*/false, nullptr, nullptr)[0];
        }
        std::vector<int> ndests(nb);
        for (int s = 0; s < nb; ++s) ndests[s] = batch[samples[s]]->next_obs.dest;
        const tc::Tensor ndest = dest_bits_tensor(ndests);
        const tc::Tensor nq = next_agent.target.forward(ndest, nctx, nullptr);
        for (int s = 0; s < nb; ++s) {
            const uint32_t mask = batch[samples[s]]->next_valid_mask;
            double best = -std::numeric_limits<double>::infinity();
            for (int a = 0; a < next_agent.target.out_dim(); ++a)
                if (mask & (1u << a)) best = std::max(best, nq.at(s, a));
            y[samples[s]] += cfg_.gamma * best;
        }
    }

    // Loss on chosen slots.
    tc::Tensor dq({bs, qv.cols()});
    double loss = 0.0;
    for (int i = 0; i < bs; ++i) {
        const double diff = qv.at(i, batch[i]->action_slot) - y[i];
        loss += diff * diff;
        dq.at(i, batch[i]->action_slot) = 2.0 * diff / bs;
    }
    loss /= bs;

    agent.online.params().zero_grad();
    tc::Tensor dctx({bs, ctx_dim_});
    agent.online.backward(qtape, dq, &dctx);
    if (gat_) gat_->backward(agent.plan, gat_tape, {dctx});

    tc::clip_grad_norm(agent.online.params(), cfg_.grad_clip);
    agent.adam.step(agent.online.params());
    tc::polyak_update(agent.target.params(), agent.online.params(), cfg_.tau);
    return loss;
}

TrainStats AnSystem::end_step_training() {
    TrainStats stats;
    if (!training_ || touched_.empty()) {
        touched_.clear();
        return stats;
    }
    std::sort(touched_.begin(), touched_.end());
    if (gat_) gat_->params().zero_grad();
    bool gat_dirty = false;
    for (int idx : touched_) {
        Agent& agent = *agents_[idx];
        if (agent.new_exp < cfg_.num_new_exp_to_learn) continue;
        if (agent.buffer.size() < cfg_.batch_size) continue;
        stats.mean_loss += train_agent(agent);
        ++stats.batches;
        agent.new_exp = 0;
        gat_dirty = true;
    }
    if (gat_ && gat_dirty) {
        tc::clip_grad_norm(gat_->params(), cfg_.grad_clip);
        gat_adam_.step(gat_->params());
        emb_step_ = -1;  // embeddings stale after the update
    }
    touched_.clear();
    if (stats.batches > 0) stats.mean_loss /= stats.batches;
    episode_stats_.mean_loss =
        (episode_stats_.mean_loss * episode_stats_.batches + stats.mean_loss * stats.batches);
    episode_stats_.batches += stats.batches;
    if (episode_stats_.batches > 0) episode_stats_.mean_loss /= episode_stats_.batches;
    return stats;
}

void AnSystem::save_checkpoint(const std::string& path) const {
    tc::ParamSet bundle;
    for (const auto& agent : agents_)
        bundle.absorb(agent->online.params(), "agent" + std::to_string(agent->node) + ".");
    if (gat_) bundle.absorb(gat_->params(), "gat.");
    bundle.save_file(path);
}

void AnSystem::load_checkpoint(const std::string& path) {
    tc::ParamSet bundle;
    bundle.load_file(path);
    for (auto& agent : agents_) {
        const std::string prefix = "agent" + std::to_string(agent->node) + ".";
        for (const auto& name : agent->online.params().names()) {
            const auto& src = bundle.get(prefix + name);
            agent->online.params().get(name).v = src.v;
        }
        agent->target = agent->online;
    }
    if (gat_) {
        for (const auto& name : gat_->params().names())
            gat_->params().get(name).v = bundle.get("gat." + name).v;
    }
}

std::vector<std::vector<double>> AnSystem::destination_embeddings() const {
    const int n = net_->num_intersections();
    std::vector<std::vector<double>> out(n);
    for (int d = 0; d < n; ++d) {
        const tc::Tensor bits = dest_bits_tensor({d});
        std::vector<double> mean;
        for (const auto& agent : agents_) {
            const tc::Tensor emb = agent->online.embed_destination(bits);
            if (mean.empty()) mean.assign(emb.v.size(), 0.0);
            for (size_t i = 0; i < emb.v.size(); ++i) mean[i] += emb.v[i];
        }
        for (auto& v : mean) v /= agents_.size();
        out[d] = std::move(mean);
    }
    return out;
}

std::vector<gat::AttentionRecord> AnSystem::attention_snapshot(const sim::Simulation& s) const {
    std::vector<gat::AttentionRecord> records;
    if (!gat_) return records;
    const auto bits = s.network_state();
    std::vector<double> feats(bits.size());
    for (size_t i = 0; i < bits.size(); ++i) feats[i] = bits[i];
    gat_->forward_all(graph_, feats, &records);
    return records;
}

// ---------------------------------------------------------------------------
// TabularQRouter

TabularQRouter::TabularQRouter(std::shared_ptr<const net::RoadNetwork> net, TabularConfig cfg)
    : net_(std::move(net)), cfg_(cfg), rng_(derive_seed(cfg.seed, 0x7B, 0)) {
    const int n = net_->num_intersections();
    const int f = net_->max_out_degree();
    q_.assign(n, std::vector<double>(static_cast<size_t>(n) * f, 0.0));
    seen_.assign(n, std::vector<uint8_t>(static_cast<size_t>(n) * f, 0));
}

void TabularQRouter::on_episode_start(int episode) {
    const double span = cfg_.eps_start - cfg_.eps_end;
    const double frac = cfg_.eps_decay_episodes > 0
                            ? std::min(1.0, static_cast<double>(episode) / cfg_.eps_decay_episodes)
                            : 1.0;
    epsilon_ = training_ ? cfg_.eps_start - span * frac : 0.0;
}

void TabularQRouter::on_episode_end(int end_time) {
    std::vector<int> vcs;
    vcs.reserve(pending_.size());
    for (const auto& [vc, _] : pending_) vcs.push_back(vc);
    std::sort(vcs.begin(), vcs.end());
    for (int vc : vcs) close(vc, end_time, true, -1, 0);
    pending_.clear();
}

double TabularQRouter::q_value(int node, int dest, int slot) const {
    const int f = net_->max_out_degree();
    return q_[node][static_cast<size_t>(dest) * f + slot];
}

bool TabularQRouter::visited(int node, int dest, int slot) const {
    const int f = net_->max_out_degree();
    return seen_[node][static_cast<size_t>(dest) * f + slot] != 0;
}

double TabularQRouter::max_q(int node, int dest, uint32_t mask) const {
    const int f = net_->max_out_degree();
    double best = -std::numeric_limits<double>::infinity();
    for (int a = 0; a < f; ++a)
        if (mask & (1u << a)) best = std::max(best, q_[node][static_cast<size_t>(dest) * f + a]);
    return best;
}

void TabularQRouter::close(int vc, int t, bool terminal, int next_node, uint32_t next_mask) {
    auto it = pending_.find(vc);
    if (it == pending_.end()) return;
    const Pending& p = it->second;
    const int f = net_->max_out_degree();
    const double r = -static_cast<double>(t - p.t);
    double target = r;
    if (!terminal) target += cfg_.gamma * max_q(next_node, p.dest, next_mask);
    double& q = q_[p.node][static_cast<size_t>(p.dest) * f + p.slot];
    q += cfg_.alpha * (target - q);
    seen_[p.node][static_cast<size_t>(p.dest) * f + p.slot] = 1;
    pending_.erase(it);
}

sim::RoutingResponse TabularQRouter::route(const sim::RoutingQuery& q) {
    if (q.u == q.i_d) {
        if (training_) close(q.vc, q.t, true, -1, 0);
        return sim::RoutingResponse::success();
    }
    if (q.t > q.t_max) {
        if (training_) close(q.vc, q.t, true, -1, 0);
        return sim::RoutingResponse::fail();
    }

    const auto& out = net_->out_roads(q.u);
    const auto& nh = net::next_hops(*net_, q.r_c);
    uint32_t mask = 0;
    for (size_t slot = 0; slot < out.size(); ++slot)
        if (std::binary_search(nh.begin(), nh.end(), out[slot])) mask |= (1u << slot);
    if (mask == 0) throw ProtocolViolation("query with empty next-hop set");

    int slot = -1;
    const bool explore = training_ && epsilon_ > 0 && rng_.uniform() < epsilon_;
    if (explore) {
        std::vector<int> valid;
        for (int b = 0; b < 32; ++b)
            if (mask & (1u << b)) valid.push_back(b);
        slot = valid[rng_.uniform_int(static_cast<int>(valid.size()))];
    } else {
        const int f = net_->max_out_degree();
        double best = -std::numeric_limits<double>::infinity();
        for (int a = 0; a < f; ++a) {
            if (!(mask & (1u << a))) continue;
            const double v = q_[q.u][static_cast<size_t>(q.i_d) * f + a];
            if (v > best) {
                best = v;
                slot = a;
            }
        }
    }

    if (training_) {
        close(q.vc, q.t, false, q.u, mask);
        Pending p;
        p.node = q.u;
        p.slot = slot;
        p.t = q.t;
        p.dest = q.i_d;
        pending_[q.vc] = p;
    }
    return sim::RoutingResponse::next(out[slot]);
}

sim::Router TabularQRouter::router() {
    return [this](const sim::RoutingQuery& q) { return route(q); };
}

}  // namespace marl::an
