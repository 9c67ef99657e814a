#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "marlroute/gatnet.hpp"

using namespace marl;
using namespace marl::gat;

namespace {

Graph ring_graph(int n) {
    Graph g;
    g.neighbors.resize(n);
    for (int i = 0; i < n; ++i) {
        std::vector<int> nb{(i + n - 1) % n, i, (i + 1) % n};
        std::sort(nb.begin(), nb.end());
        nb.erase(std::unique(nb.begin(), nb.end()), nb.end());
        g.neighbors[i] = nb;
    }
    return g;
}

std::vector<tc::Tensor> features_to_blocks(const std::vector<double>& feats, int n, int f,
                                           const std::vector<int>& nodes) {
    std::vector<tc::Tensor> out;
    (void)n;
    for (int node : nodes) {
        tc::Tensor t({1, f});
        std::copy_n(feats.data() + static_cast<size_t>(node) * f, f, t.v.data());
        out.push_back(std::move(t));
    }
    return out;
}

}  // namespace

TEST_CASE("stack_config dimensions follow the hop count") {
    CHECK(stack_config(0, 4).layers.empty());
    CHECK(stack_config(0, 4).output_dim() == 4);
    CHECK(stack_config(1, 4).output_dim() == 7);
    CHECK(stack_config(2, 4).output_dim() == 10);
    CHECK(stack_config(2, 4).layers[0].concat);
    CHECK_FALSE(stack_config(2, 4).layers[1].concat);
    CHECK_THROWS_AS(stack_config(3, 4), std::invalid_argument);
}

TEST_CASE("single node with identity projection returns sigma of its features") {
    StackConfig cfg;
    cfg.hops = 1;
    cfg.in_dim = 3;
    cfg.dropout = 0.0;
    cfg.layers.push_back({3, 3, 1, false, false});
    GatStack stack(cfg, 1);
    auto& w = stack.params().get("l0.h0.W");
    w.fill(0.0);
    for (int i = 0; i < 3; ++i) w.at(i, i) = 1.0;
    stack.params().get("l0.h0.b").fill(0.0);

    Graph g;
    g.neighbors = {{0}};
    std::vector<AttentionRecord> records;
    const auto out = stack.forward_all(g, {0.5, -1.0, 2.0}, &records);
    CHECK(out[0] == doctest::Approx(0.5));
    CHECK(out[1] == doctest::Approx(-1.0));
    CHECK(out[2] == doctest::Approx(2.0));
    REQUIRE(records.size() == 1);
    CHECK(records[0].weights[0] == std::vector<double>{1.0});
}

TEST_CASE("equal features with a zero attention vector give uniform weights") {
    auto cfg = stack_config(1, 4);
    cfg.dropout = 0.0;
    GatStack stack(cfg, 2);
    for (int h = 0; h < 3; ++h)
        stack.params().get("l0.h" + std::to_string(h) + ".a").fill(0.0);

    const Graph g = ring_graph(5);
    std::vector<double> feats(5 * 4, 0.7);
    std::vector<AttentionRecord> records;
    stack.forward_all(g, feats, &records);
    for (const auto& rec : records)
        for (const auto& row : rec.weights)
            for (double wgt : row) CHECK(wgt == doctest::Approx(1.0 / row.size()));
}

TEST_CASE("attention rows are stochastic on random inputs") {
    Rng rng(3);
    for (int hops = 1; hops <= 2; ++hops) {
        auto cfg = stack_config(hops, 4);
        cfg.dropout = 0.0;
        GatStack stack(cfg, 100 + hops);
        const Graph g = ring_graph(7);
        std::vector<double> feats(7 * 4);
        for (auto& v : feats) v = rng.bernoulli(0.4) ? 1.0 : 0.0;
        std::vector<AttentionRecord> records;
        stack.forward_all(g, feats, &records);
        for (const auto& rec : records) {
            for (const auto& row : rec.weights) {
                double sum = 0.0;
                for (double wgt : row) {
                    CHECK(wgt >= 0.0);
                    sum += wgt;
                }
                CHECK(std::abs(sum - 1.0) < 1e-9);
            }
        }
    }
}

TEST_CASE("attention entropy: one-hot, uniform and recomputation") {
    CHECK(attention_entropy(std::vector<double>{1.0, 0.0, 0.0}) == 0.0);
    CHECK(attention_entropy(std::vector<double>{0.25, 0.25, 0.25, 0.25}) ==
          doctest::Approx(std::log(4.0)));
    Rng rng(8);
    for (int trial = 0; trial < 10; ++trial) {
        std::vector<double> row(5);
        double sum = 0.0;
        for (auto& v : row) sum += (v = rng.uniform(0.01, 1.0));
        for (auto& v : row) v /= sum;
        double direct = 0.0;
        for (double v : row) direct -= v * std::log(v);
        CHECK(attention_entropy(row) == doctest::Approx(direct));
    }
}

TEST_CASE("gradients through the full attention chain match finite differences") {
    Rng rng(17);
    for (int hops = 1; hops <= 2; ++hops) {
        auto cfg = stack_config(hops, 4);
        cfg.dropout = 0.0;  // finite differences need a deterministic forward
        GatStack stack(cfg, 31 * hops + 1);
        const Graph g = ring_graph(6);
        const auto plan = stack.make_plan(g, {2});

        const int batch = 3;
        std::vector<tc::Tensor> x0;
        for (size_t s = 0; s < plan.sets[0].size(); ++s) {
            tc::Tensor t({batch, 4});
            for (auto& v : t.v) v = rng.bernoulli(0.5) ? 1.0 : 0.0;
            x0.push_back(std::move(t));
        }
        tc::Tensor target({batch, cfg.output_dim()});
        for (auto& v : target.v) v = rng.uniform(-1, 1);

        auto loss = [&](bool grads) {
            Tape tape;
            auto rows = stack.forward(plan, x0, false, nullptr, &tape);
            tc::Tensor grad({batch, cfg.output_dim()});
            const double l = tc::mse_loss(rows[0].v, target.v, grad.v);
            if (grads) stack.backward(plan, tape, {grad});
            return l;
        };
        const auto res = tc::gradient_check(stack.params(), loss);
        INFO("hops ", hops, " worst ", res.worst_param);
        CHECK(res.max_rel_err < 1e-4);
    }
}

TEST_CASE("locality: node embeddings ignore features beyond the hop radius") {
    Rng rng(23);
    for (int hops = 1; hops <= 2; ++hops) {
        auto cfg = stack_config(hops, 4);
        cfg.dropout = 0.0;
        GatStack stack(cfg, 7 * hops + 5);
        const Graph g = ring_graph(9);  // diameter 4 > 2 hops
        std::vector<double> feats(9 * 4);
        for (auto& v : feats) v = rng.bernoulli(0.5) ? 1.0 : 0.0;
        const auto base = stack.forward_all(g, feats);

        // Perturb a node farther than `hops` from node 0 along the ring.
        auto poked = feats;
        const int far = 4;
        for (int d = 0; d < 4; ++d) poked[far * 4 + d] = 1.0 - poked[far * 4 + d];
        const auto out = stack.forward_all(g, poked);
        const int dim = cfg.output_dim();
        for (int d = 0; d < dim; ++d)
            CHECK(out[d] == doctest::Approx(base[d]).epsilon(1e-12));
        // ...and a node inside the radius does change it.
        auto near = feats;
        for (int d = 0; d < 4; ++d) near[1 * 4 + d] = 1.0 - near[1 * 4 + d];
        const auto out2 = stack.forward_all(g, near);
        double delta = 0.0;
        for (int d = 0; d < dim; ++d) delta += std::abs(out2[d] - base[d]);
        CHECK(delta > 1e-9);
    }
}

TEST_CASE("permutation equivariance: relabeling nodes permutes outputs") {
    Rng rng(29);
    auto cfg = stack_config(1, 4);
    cfg.dropout = 0.0;
    GatStack stack(cfg, 77);
    const int n = 6;
    const Graph g = ring_graph(n);
    std::vector<double> feats(n * 4);
    for (auto& v : feats) v = rng.bernoulli(0.5) ? 1.0 : 0.0;
    const auto base = stack.forward_all(g, feats);

    // Rotate labels by 2 around the ring (a graph automorphism composed with
    // relabeling): perm[i] is the new label of old node i.
    std::vector<int> perm(n);
    for (int i = 0; i < n; ++i) perm[i] = (i + 2) % n;
    Graph pg;
    pg.neighbors.resize(n);
    for (int i = 0; i < n; ++i) {
        std::vector<int> nb;
        for (int j : g.neighbors[i]) nb.push_back(perm[j]);
        std::sort(nb.begin(), nb.end());
        pg.neighbors[perm[i]] = nb;
    }
    std::vector<double> pfeats(n * 4);
    for (int i = 0; i < n; ++i)
        for (int d = 0; d < 4; ++d) pfeats[perm[i] * 4 + d] = feats[i * 4 + d];
    const auto out = stack.forward_all(pg, pfeats);
    const int dim = cfg.output_dim();
    for (int i = 0; i < n; ++i)
        for (int d = 0; d < dim; ++d)
            CHECK(out[perm[i] * dim + d] == doctest::Approx(base[i * dim + d]).epsilon(1e-12));
}

TEST_CASE("center-batch forward agrees with the full-graph forward") {
    Rng rng(31);
    for (int hops = 1; hops <= 2; ++hops) {
        auto cfg = stack_config(hops, 4);
        cfg.dropout = 0.0;
        GatStack stack(cfg, 400 + hops);
        const Graph g = ring_graph(8);
        std::vector<double> feats(8 * 4);
        for (auto& v : feats) v = rng.bernoulli(0.5) ? 1.0 : 0.0;
        const auto full = stack.forward_all(g, feats);
        const int dim = cfg.output_dim();
        for (int center = 0; center < 8; ++center) {
            const auto plan = stack.make_plan(g, {center});
            auto x0 = features_to_blocks(feats, 8, 4, plan.sets[0]);
            Tape tape;
            const auto rows = stack.forward(plan, x0, false, nullptr, &tape);
            for (int d = 0; d < dim; ++d)
                CHECK(rows[0].v[d] ==
                      doctest::Approx(full[center * dim + d]).epsilon(1e-12));
        }
    }
}

TEST_CASE("dropout only fires in training mode and rescales surviving weights") {
    auto cfg = stack_config(1, 4);
    cfg.dropout = 0.6;
    GatStack stack(cfg, 5);
    const Graph g = ring_graph(5);
    const auto plan = stack.make_plan(g, {0});
    Rng rng(9);
    std::vector<tc::Tensor> x0;
    for (size_t s = 0; s < plan.sets[0].size(); ++s) {
        tc::Tensor t({1, 4});
        for (auto& v : t.v) v = 1.0;
        x0.push_back(std::move(t));
    }
    Tape eval_tape;
    const auto eval_rows = stack.forward(plan, x0, false, nullptr, &eval_tape);
    Tape train_tape;
    const auto train_rows = stack.forward(plan, x0, true, &rng, &train_tape);
    CHECK_FALSE(train_tape.layers[0].mult.empty());
    CHECK(eval_tape.layers[0].mult.empty());
    double diff = 0.0;
    for (size_t i = 0; i < eval_rows[0].v.size(); ++i)
        diff += std::abs(eval_rows[0].v[i] - train_rows[0].v[i]);
    CHECK(diff > 1e-12);  // with p = 0.6 on 5 neighbors, some mask fires w.h.p.
}
