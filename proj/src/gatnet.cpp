#include "marlroute/gatnet.hpp"

#include <algorithm>
#include <cmath>
#include <set>

namespace marl::gat {

namespace {

constexpr double kLeakySlope = 0.2;

std::string pname(int layer, int head, const char* what) {
    return "l" + std::to_string(layer) + ".h" + std::to_string(head) + "." + what;
}

}  // namespace

int StackConfig::output_dim() const {
    if (layers.empty()) return in_dim;
    const auto& last = layers.back();
    return last.concat ? last.out_dim * last.heads : last.out_dim;
}

StackConfig stack_config(int hops, int in_dim) {
    if (hops < 0 || hops > 2) throw std::invalid_argument("stack_config: hops must be 0, 1 or 2");
    StackConfig cfg;
    cfg.hops = hops;
    cfg.in_dim = in_dim;
    if (hops == 1) {
        cfg.layers.push_back({in_dim, 7, 3, /*concat=*/false, /*elu=*/false});
    } else if (hops == 2) {
        cfg.layers.push_back({in_dim, 7, 3, /*concat=*/true, /*elu=*/true});
        cfg.layers.push_back({21, 10, 3, /*concat=*/false, /*elu=*/false});
    }
    return cfg;
}

double attention_entropy(std::span<const double> weights) {
    double h = 0.0;
    for (double w : weights)
        if (w > 0) h -= w * std::log(w);
    return h;
}

std::vector<double> attention_entropies(const AttentionRecord& rec) {
    std::vector<double> out;
    out.reserve(rec.weights.size());
    for (const auto& row : rec.weights) out.push_back(attention_entropy(row));
    return out;
}

GatStack::GatStack(StackConfig cfg, uint64_t init_seed) : cfg_(std::move(cfg)) {
    Rng rng(init_seed);
    for (size_t l = 0; l < cfg_.layers.size(); ++l) {
        const auto& spec = cfg_.layers[l];
        for (int h = 0; h < spec.heads; ++h) {
            auto& w = params_.add(pname(static_cast<int>(l), h, "W"),
                                  {spec.out_dim, spec.in_dim});
            tc::xavier_uniform(w, spec.in_dim, spec.out_dim, rng);
            params_.add(pname(static_cast<int>(l), h, "b"), {spec.out_dim});
            auto& a = params_.add(pname(static_cast<int>(l), h, "a"), {2 * spec.out_dim});
            tc::xavier_uniform(a, 2 * spec.out_dim, 1, rng);
        }
    }
}

Plan GatStack::make_plan(const Graph& g, const std::vector<int>& centers) const {
    const int depth = static_cast<int>(cfg_.layers.size());
    Plan plan;
    plan.sets.resize(depth + 1);
    plan.sets[depth] = centers;
    for (int l = depth - 1; l >= 0; --l) {
        std::set<int> need;
        for (int i : plan.sets[l + 1])
            for (int j : g.neighbors[i]) need.insert(j);
        plan.sets[l].assign(need.begin(), need.end());
    }
    plan.nbrs.resize(depth);
    for (int l = 0; l < depth; ++l) {
        plan.nbrs[l].resize(plan.sets[l + 1].size());
        for (size_t c = 0; c < plan.sets[l + 1].size(); ++c) {
            for (int j : g.neighbors[plan.sets[l + 1][c]]) {
                const auto it =
                    std::lower_bound(plan.sets[l].begin(), plan.sets[l].end(), j);
                plan.nbrs[l][c].push_back(static_cast<int>(it - plan.sets[l].begin()));
            }
        }
    }
    return plan;
}

std::vector<tc::Tensor> GatStack::forward(const Plan& plan, const std::vector<tc::Tensor>& x0,
                                          bool training, Rng* rng, Tape* tape,
                                          std::vector<AttentionRecord>* records) const {
    const int depth = static_cast<int>(cfg_.layers.size());
    const int batch = x0.empty() ? 0 : x0[0].rows();
    const bool use_dropout = training && cfg_.dropout > 0 && rng;
    Tape local;
    Tape& tp = tape ? *tape : local;
    tp.batch = batch;
    tp.training = training;
    tp.x.assign(depth + 1, {});
    tp.layers.assign(depth, {});
    tp.x[0] = x0;

    for (int l = 0; l < depth; ++l) {
        const auto& spec = cfg_.layers[l];
        auto& lt = tp.layers[l];
        const auto& in_nodes = plan.sets[l];
        const auto& out_nodes = plan.sets[l + 1];
        lt.h.assign(spec.heads, std::vector<tc::Tensor>(in_nodes.size()));
        lt.epre.assign(spec.heads, std::vector<tc::Tensor>(out_nodes.size()));
        lt.alpha.assign(spec.heads, std::vector<tc::Tensor>(out_nodes.size()));
        if (use_dropout)
            lt.mult.assign(spec.heads, std::vector<tc::Tensor>(out_nodes.size()));
        lt.act.assign(spec.heads, std::vector<tc::Tensor>(out_nodes.size()));

        for (int h = 0; h < spec.heads; ++h) {
            const auto& w = params_.get(pname(l, h, "W"));
            const auto& b = params_.get(pname(l, h, "b"));
            const auto& a = params_.get(pname(l, h, "a"));
            for (size_t s = 0; s < in_nodes.size(); ++s)
                lt.h[h][s] = tc::linear_forward(tp.x[l][s], w, b);

            // Split attention vector into source/destination halves.
            const double* a_src = a.v.data();
            const double* a_dst = a.v.data() + spec.out_dim;

            std::vector<std::vector<double>> dst_score(in_nodes.size());
            std::vector<std::vector<double>> src_score(in_nodes.size());
            for (size_t s = 0; s < in_nodes.size(); ++s) {
                const auto& hm = lt.h[h][s];
                src_score[s].assign(batch, 0.0);
                dst_score[s].assign(batch, 0.0);
                for (int bi = 0; bi < batch; ++bi) {
                    double sv = 0.0, dv = 0.0;
                    const double* row = hm.v.data() + static_cast<size_t>(bi) * spec.out_dim;
                    for (int d = 0; d < spec.out_dim; ++d) {
                        sv += a_src[d] * row[d];
                        dv += a_dst[d] * row[d];
                    }
                    src_score[s][bi] = sv;
                    dst_score[s][bi] = dv;
                }
            }

            AttentionRecord rec;
            if (records) {
                rec.layer = l;
                rec.head = h;
                rec.weights.resize(out_nodes.size());
            }

            for (size_t c = 0; c < out_nodes.size(); ++c) {
                const auto& nb = plan.nbrs[l][c];
                const int nn = static_cast<int>(nb.size());
                const int self_pos = static_cast<int>(
                    std::lower_bound(in_nodes.begin(), in_nodes.end(), out_nodes[c]) -
                    in_nodes.begin());
                tc::Tensor epre({batch, nn});
                tc::Tensor alpha({batch, nn});
                tc::Tensor* mult = nullptr;
                if (use_dropout) {
                    lt.mult[h][c] = tc::Tensor({batch, nn});
                    mult = &lt.mult[h][c];
                }
                tc::Tensor act({batch, spec.out_dim});
                for (int bi = 0; bi < batch; ++bi) {
                    double mx = -std::numeric_limits<double>::infinity();
                    for (int j = 0; j < nn; ++j) {
                        const double raw =
                            src_score[self_pos][bi] + dst_score[nb[j]][bi];
                        const double e = tc::leaky_relu_scalar(raw, kLeakySlope);
                        epre.at(bi, j) = raw;
                        alpha.at(bi, j) = e;
                        mx = std::max(mx, e);
                    }
                    double denom = 0.0;
                    for (int j = 0; j < nn; ++j) {
                        const double ex = std::exp(alpha.at(bi, j) - mx);
                        alpha.at(bi, j) = ex;
                        denom += ex;
                    }
                    for (int j = 0; j < nn; ++j) alpha.at(bi, j) /= denom;
                    double* out_row = act.v.data() + static_cast<size_t>(bi) * spec.out_dim;
                    for (int j = 0; j < nn; ++j) {
                        double wgt = alpha.at(bi, j);
                        if (mult) {
                            const double m =
                                rng->bernoulli(cfg_.dropout) ? 0.0 : 1.0 / (1.0 - cfg_.dropout);
                            mult->at(bi, j) = m;
                            wgt *= m;
                        }
                        if (wgt == 0.0) continue;
                        const double* hrow =
                            lt.h[h][nb[j]].v.data() + static_cast<size_t>(bi) * spec.out_dim;
                        for (int d = 0; d < spec.out_dim; ++d) out_row[d] += wgt * hrow[d];
                    }
                }
                if (spec.elu)
                    for (auto& vv : act.v) vv = tc::elu_scalar(vv);
                if (records && batch == 1) {
                    rec.weights[c].assign(alpha.v.begin(), alpha.v.end());
                }
                lt.epre[h][c] = std::move(epre);
                lt.alpha[h][c] = std::move(alpha);
                lt.act[h][c] = std::move(act);
            }
            if (records) records->push_back(std::move(rec));
        }

        // Combine heads.
        tp.x[l + 1].resize(out_nodes.size());
        const int comb_dim = spec.concat ? spec.out_dim * spec.heads : spec.out_dim;
        for (size_t c = 0; c < out_nodes.size(); ++c) {
            tc::Tensor comb({batch, comb_dim});
            if (spec.concat) {
                for (int h = 0; h < spec.heads; ++h)
                    for (int bi = 0; bi < batch; ++bi)
                        std::copy_n(lt.act[h][c].v.data() + static_cast<size_t>(bi) * spec.out_dim,
                                    spec.out_dim,
                                    comb.v.data() + static_cast<size_t>(bi) * comb_dim +
                                        static_cast<size_t>(h) * spec.out_dim);
            } else {
                for (int h = 0; h < spec.heads; ++h)
                    for (size_t i = 0; i < comb.v.size(); ++i)
                        comb.v[i] += lt.act[h][c].v[i] / spec.heads;
            }
            tp.x[l + 1][c] = std::move(comb);
        }
    }
    return tp.x[depth];
}

void GatStack::backward(const Plan& plan, const Tape& tape,
                        const std::vector<tc::Tensor>& d_out) {
    const int depth = static_cast<int>(cfg_.layers.size());
    const int batch = tape.batch;
    std::vector<tc::Tensor> dx_next(d_out);

    for (int l = depth - 1; l >= 0; --l) {
        const auto& spec = cfg_.layers[l];
        const auto& lt = tape.layers[l];
        const auto& in_nodes = plan.sets[l];
        const auto& out_nodes = plan.sets[l + 1];
        auto& w_list = params_;

        // Gradients w.r.t. each in-node's head projection.
        std::vector<std::vector<tc::Tensor>> dh(
            spec.heads, std::vector<tc::Tensor>(in_nodes.size()));
        for (int h = 0; h < spec.heads; ++h)
            for (size_t s = 0; s < in_nodes.size(); ++s)
                dh[h][s] = tc::Tensor({batch, spec.out_dim});

        for (int h = 0; h < spec.heads; ++h) {
            auto& a = w_list.get(pname(l, h, "a"));
            const double* a_src = a.v.data();
            const double* a_dst = a.v.data() + spec.out_dim;

            for (size_t c = 0; c < out_nodes.size(); ++c) {
                const auto& nb = plan.nbrs[l][c];
                const int nn = static_cast<int>(nb.size());
                const int self_pos = static_cast<int>(
                    std::lower_bound(in_nodes.begin(), in_nodes.end(), out_nodes[c]) -
                    in_nodes.begin());
                const auto& act = lt.act[h][c];
                const auto& alpha = lt.alpha[h][c];
                const auto& epre = lt.epre[h][c];
                const tc::Tensor* mult =
                    lt.mult.empty() ? nullptr : &lt.mult[h][c];
                std::vector<double> dz(spec.out_dim);
                std::vector<double> dalpha_used(nn);
                std::vector<double> dalpha_raw(nn);

                for (int bi = 0; bi < batch; ++bi) {
                    // split combined gradient into this head's share
                    const double* dcomb =
                        dx_next[c].v.data() + static_cast<size_t>(bi) * dx_next[c].cols();
                    for (int d = 0; d < spec.out_dim; ++d) {
                        double g = spec.concat ? dcomb[h * spec.out_dim + d]
                                               : dcomb[d] / spec.heads;
                        if (spec.elu)
                            g *= tc::elu_grad_from_output(act.at(bi, d));
                        dz[d] = g;
                    }
                    // dz w.r.t. weighted sum of H_j
                    for (int j = 0; j < nn; ++j) {
                        const double* hrow = lt.h[h][nb[j]].v.data() +
                                             static_cast<size_t>(bi) * spec.out_dim;
                        double dot = 0.0;
                        for (int d = 0; d < spec.out_dim; ++d) dot += dz[d] * hrow[d];
                        dalpha_used[j] = dot;
                        const double wgt =
                            alpha.at(bi, j) * (mult ? mult->at(bi, j) : 1.0);
                        if (wgt != 0.0) {
                            double* dhrow = dh[h][nb[j]].v.data() +
                                            static_cast<size_t>(bi) * spec.out_dim;
                            for (int d = 0; d < spec.out_dim; ++d)
                                dhrow[d] += wgt * dz[d];
                        }
                    }
                    // through dropout and softmax
                    for (int j = 0; j < nn; ++j)
                        dalpha_raw[j] =
                            dalpha_used[j] * (mult ? mult->at(bi, j) : 1.0);
                    double dot = 0.0;
                    for (int j = 0; j < nn; ++j) dot += alpha.at(bi, j) * dalpha_raw[j];
                    for (int j = 0; j < nn; ++j) {
                        const double de = alpha.at(bi, j) * (dalpha_raw[j] - dot);
                        const double dpre =
                            de * tc::leaky_relu_grad_scalar(epre.at(bi, j), kLeakySlope);
                        // e = a_src . H_self + a_dst . H_j
                        const double* hself = lt.h[h][self_pos].v.data() +
                                              static_cast<size_t>(bi) * spec.out_dim;
                        const double* hj = lt.h[h][nb[j]].v.data() +
                                           static_cast<size_t>(bi) * spec.out_dim;
                        double* dhself = dh[h][self_pos].v.data() +
                                         static_cast<size_t>(bi) * spec.out_dim;
                        double* dhj = dh[h][nb[j]].v.data() +
                                      static_cast<size_t>(bi) * spec.out_dim;
                        for (int d = 0; d < spec.out_dim; ++d) {
                            a.g[d] += dpre * hself[d];
                            a.g[spec.out_dim + d] += dpre * hj[d];
                            dhself[d] += dpre * a_src[d];
                            dhj[d] += dpre * a_dst[d];
                        }
                    }
                }
            }
        }

        // Projection backward; accumulate input grads only when another layer is below.
        std::vector<tc::Tensor> dx_cur;
        if (l > 0) {
            dx_cur.resize(in_nodes.size());
            for (size_t s = 0; s < in_nodes.size(); ++s)
                dx_cur[s] = tc::Tensor({batch, spec.in_dim});
        }
        for (int h = 0; h < spec.heads; ++h) {
            auto& w = w_list.get(pname(l, h, "W"));
            auto& b = w_list.get(pname(l, h, "b"));
            for (size_t s = 0; s < in_nodes.size(); ++s)
                tc::linear_backward(tape.x[l][s], w, b, dh[h][s],
                                    l > 0 ? &dx_cur[s] : nullptr);
        }
        dx_next = std::move(dx_cur);
    }
}

std::vector<double> GatStack::forward_all(const Graph& g, const std::vector<double>& features,
                                          std::vector<AttentionRecord>* records) const {
    const int n = g.size();
    if (cfg_.layers.empty()) return features;
    if (!full_plan_ || full_plan_nodes_ != n) {
        std::vector<int> all(n);
        for (int i = 0; i < n; ++i) all[i] = i;
        full_plan_ = make_plan(g, all);
        full_plan_nodes_ = n;
    }
    std::vector<tc::Tensor> x0(n);
    for (int i = 0; i < n; ++i) {
        x0[i] = tc::Tensor({1, cfg_.in_dim});
        std::copy_n(features.data() + static_cast<size_t>(i) * cfg_.in_dim, cfg_.in_dim,
                    x0[i].v.data());
    }
    Tape tape;
    auto rows = forward(*full_plan_, x0, false, nullptr, &tape, records);
    const int out_dim = cfg_.output_dim();
    std::vector<double> out(static_cast<size_t>(n) * out_dim);
    for (int i = 0; i < n; ++i)
        std::copy_n(rows[i].v.data(), out_dim, out.data() + static_cast<size_t>(i) * out_dim);
    return out;
}

}  // namespace marl::gat
