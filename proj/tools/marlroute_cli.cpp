#include <CLI11.hpp>

#include <cstdio>
#include <fstream>
#include <iostream>

#include "marlroute/harness.hpp"

namespace {

constexpr int kExitConfig = 2;
constexpr int kExitProtocol = 3;

marl::run::ScenarioConfig load_cfg(const std::string& path) {
    return marl::run::load_config(path);
}

int cmd_gen_net(int rows, int cols, double edge_len, double speed, int lanes,
                const std::string& out) {
    const auto net = marl::net::build_grid(rows, cols, edge_len, speed, lanes);
    marl::net::save_network(net, out);
    std::cout << "wrote " << out << " (" << net.num_intersections() << " intersections, "
              << net.num_roads() << " roads)\n";
    return 0;
}

int cmd_train(const std::string& config_path, const std::string& out_dir) {
    const auto cfg = load_cfg(config_path);
    const auto report = marl::run::run_experiment(cfg, out_dir);
    const auto avtt = report.median_avtt();
    std::cout << report.model << ": median AVTT "
              << (avtt ? std::to_string(*avtt) : std::string("inf")) << " s, median RSR "
              << report.median_rsr() << " %\n";
    if (!out_dir.empty()) std::cout << "artifacts in " << out_dir << "\n";
    return 0;
}

int cmd_eval(const std::string& config_path, const std::string& checkpoint,
             const std::string& out_dir) {
    auto cfg = load_cfg(config_path);
    using marl::run::Model;
    if (cfg.model == Model::QR)
        throw marl::ConfigError("QR has no checkpoint format; run 'train' instead");
    const bool learned = cfg.model != Model::SPF && cfg.model != Model::SPFWR;
    if (learned && checkpoint.empty())
        throw marl::ConfigError("eval of a learned model requires --checkpoint");
    cfg.train_episodes = 0;

    auto network = marl::run::make_network(cfg);
    marl::run::RunReport report;
    report.config_text = marl::run::serialize_config(cfg);
    report.model = marl::run::model_name(cfg.model);

    std::unique_ptr<marl::an::AnSystem> an_sys;
    std::unique_ptr<marl::hub::HhanSystem> hh_sys;
    marl::net::HubGraph hub_graph;
    if (cfg.model == Model::AN_H0 || cfg.model == Model::AN_H1 || cfg.model == Model::AN_H2) {
        an_sys = std::make_unique<marl::an::AnSystem>(network, cfg.an);
        an_sys->load_checkpoint(checkpoint);
        an_sys->set_training(false);
    } else if (cfg.model == Model::HHAN) {
        hub_graph = marl::run::make_hub_graph(cfg, *network);
        hh_sys = std::make_unique<marl::hub::HhanSystem>(network, hub_graph, cfg.hhan);
        hh_sys->load_checkpoint(checkpoint);
        hh_sys->set_training(false);
    }

    const int steps = cfg.effective_episode_steps();
    for (int label : cfg.eval_seeds) {
        marl::sim::Simulation s(network, cfg.sim_config(marl::run::eval_seed(label)));
        s.begin_episode(steps);
        if (an_sys) {
            an_sys->on_episode_start(0);
            auto router = an_sys->router(s);
            for (int k = 0; k < steps; ++k) s.step(router);
            an_sys->on_episode_end(s.now());
        } else if (hh_sys) {
            s.register_hubs(hub_graph.hubs, hub_graph.r_vic);
            hh_sys->on_episode_start(0, s);
            auto router = hh_sys->router(s);
            for (int k = 0; k < steps; ++k) s.step(router);
            hh_sys->on_episode_end(s);
        } else if (cfg.model == Model::SPF) {
            marl::run::SpfRouter router(network);
            auto fn = router.router();
            for (int k = 0; k < steps; ++k) s.step(fn);
        } else {
            marl::run::SpfwrRouter router(network, s, cfg.spfwr_period);
            auto fn = router.router();
            for (int k = 0; k < steps; ++k) s.step(fn);
        }
        s.finish();
        marl::run::EvalResult res;
        res.seed_label = label;
        res.report = s.report();
        report.eval_sim_seeds.push_back(marl::run::eval_seed(label));
        report.evals.push_back(std::move(res));
    }

    const auto avtt = report.median_avtt();
    std::cout << report.model << ": median AVTT "
              << (avtt ? std::to_string(*avtt) : std::string("inf")) << " s, median RSR "
              << report.median_rsr() << " %\n";
    if (!out_dir.empty()) {
        std::filesystem::create_directories(out_dir);
        std::ofstream out(std::filesystem::path(out_dir) / "report.json");
        out << report.to_json();
        for (const auto& e : report.evals) {
            std::ofstream csv(std::filesystem::path(out_dir) /
                              ("eval_seed" + std::to_string(e.seed_label) + "_trips.csv"));
            e.report.write_trip_csv(csv);
        }
    }
    return 0;
}

int cmd_compare(const std::vector<std::string>& paths, const std::string& out) {
    std::vector<marl::run::ReportSummary> summaries;
    for (const auto& p : paths) {
        std::ifstream in(p);
        if (!in) throw marl::ConfigError(p + ": cannot open report");
        std::string text((std::istreambuf_iterator<char>(in)),
                         std::istreambuf_iterator<char>());
        summaries.push_back(marl::run::summarize_report_json(text));
    }
    const std::string table = marl::run::compare_table(summaries);
    std::cout << table;
    if (!out.empty()) {
        std::ofstream f(out);
        f << table;
    }
    return 0;
}

int cmd_dump_embeddings(const std::string& config_path, const std::string& checkpoint,
                        const std::string& out) {
    auto cfg = load_cfg(config_path);
    auto network = marl::run::make_network(cfg);
    marl::an::AnSystem sys(network, cfg.an);
    if (!checkpoint.empty()) sys.load_checkpoint(checkpoint);
    const auto rows = sys.destination_embeddings();
    std::ofstream f(out);
    if (!f) throw marl::ConfigError(out + ": cannot open for writing");
    f << "node,x,y";
    for (size_t d = 0; d < rows[0].size(); ++d) f << ",e" << d;
    f << "\n";
    char buf[64];
    for (size_t i = 0; i < rows.size(); ++i) {
        const auto& it = network->intersection(static_cast<int>(i));
        f << i << "," << it.x << "," << it.y;
        for (double v : rows[i]) {
            std::snprintf(buf, sizeof(buf), "%.17g", v);
            f << "," << buf;
        }
        f << "\n";
    }
    std::cout << "wrote " << out << " (" << rows.size() << " rows)\n";
    return 0;
}

int cmd_dump_attention(const std::string& config_path, const std::string& checkpoint,
                       int seed_label, int every, const std::string& out) {
    auto cfg = load_cfg(config_path);
    if (cfg.an.hops < 1)
        throw marl::ConfigError("dump-attention requires an AN model with GAT layers");
    auto network = marl::run::make_network(cfg);
    marl::an::AnSystem sys(network, cfg.an);
    if (!checkpoint.empty()) sys.load_checkpoint(checkpoint);
    sys.set_training(false);
    sys.on_episode_start(0);

    const int steps = cfg.effective_episode_steps();
    marl::sim::Simulation s(network, cfg.sim_config(marl::run::eval_seed(seed_label)));
    s.begin_episode(steps);
    auto router = sys.router(s);

    std::ofstream f(out);
    if (!f) throw marl::ConfigError(out + ": cannot open for writing");
    f << "t,layer,head,node,neighbor,weight,entropy\n";
    char buf[64];
    for (int k = 0; k < steps; ++k) {
        s.step(router);
        if (k % every != 0) continue;
        for (const auto& rec : sys.attention_snapshot(s)) {
            for (size_t node = 0; node < rec.weights.size(); ++node) {
                const auto& nbrs = sys.graph().neighbors[node];
                const double h = marl::gat::attention_entropy(rec.weights[node]);
                for (size_t j = 0; j < nbrs.size(); ++j) {
                    std::snprintf(buf, sizeof(buf), "%.10g", rec.weights[node][j]);
                    f << s.now() << "," << rec.layer << "," << rec.head << "," << node << ","
                      << nbrs[j] << "," << buf << ",";
                    std::snprintf(buf, sizeof(buf), "%.10g", h);
                    f << buf << "\n";
                }
            }
        }
    }
    sys.on_episode_end(s.now());
    std::cout << "wrote " << out << "\n";
    return 0;
}

int cmd_dump_gce(const std::string& config_path, int episodes, const std::string& out) {
    auto cfg = load_cfg(config_path);
    cfg.model = marl::run::Model::HHAN;
    if (episodes > 0) cfg.train_episodes = episodes;
    cfg.eval_seeds = {0};  // training artifacts are the point here

    auto network = marl::run::make_network(cfg);
    auto hub_graph = marl::run::make_hub_graph(cfg, *network);
    marl::hub::HhanSystem sys(network, hub_graph, cfg.hhan);
    sys.set_trace(true);
    const int steps = cfg.effective_episode_steps();
    for (int e = 0; e < cfg.effective_train_episodes(); ++e) {
        marl::sim::Simulation s(network,
                                cfg.sim_config(marl::run::train_seed(cfg.master_seed, e)));
        s.begin_episode(steps);
        s.register_hubs(hub_graph.hubs, hub_graph.r_vic);
        sys.on_episode_start(e, s);
        auto router = sys.router(s);
        for (int k = 0; k < steps; ++k) {
            s.step(router);
            sys.after_step(s);
        }
        sys.on_episode_end(s);
        s.finish();
    }

    std::ofstream f(out);
    if (!f) throw marl::ConfigError(out + ": cannot open for writing");
    f << "epoch,open_t,close_t,decisions,reward,throughput_term,inefficiency_term,"
         "congestion_term\n";
    char buf[64];
    for (const auto& row : sys.trace()) {
        f << row.id << "," << row.open_t << "," << row.close_t << "," << row.decisions << ",";
        std::snprintf(buf, sizeof(buf), "%.10g", row.r);
        f << buf << ",";
        std::snprintf(buf, sizeof(buf), "%.10g", row.r_throughput);
        f << buf << ",";
        std::snprintf(buf, sizeof(buf), "%.10g", row.r_inefficiency);
        f << buf << ",";
        std::snprintf(buf, sizeof(buf), "%.10g", row.r_congestion);
        f << buf << "\n";
    }
    std::cout << "wrote " << out << " (" << sys.trace().size() << " epochs)\n";
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"mesoscopic traffic simulator with multi-agent adaptive routing"};
    app.require_subcommand(1);

    // gen-net
    auto* gen = app.add_subcommand("gen-net", "generate a synthetic grid network file");
    int rows = 5, cols = 6, lanes = 2;
    double edge_len = 200.0, speed = 13.89;
    std::string gen_out = "grid.net";
    gen->add_option("--rows", rows);
    gen->add_option("--cols", cols);
    gen->add_option("--edge-len", edge_len, "edge length in meters");
    gen->add_option("--speed", speed, "free-flow speed in m/s");
    gen->add_option("--lanes", lanes);
    gen->add_option("-o,--out", gen_out)->required();

    // train
    auto* train = app.add_subcommand("train", "train (when applicable) and evaluate a model");
    std::string train_cfg, train_out;
    train->add_option("--config", train_cfg)->required();
    train->add_option("--out", train_out, "output directory")->required();

    // eval
    auto* eval = app.add_subcommand("eval", "evaluate a model with frozen parameters");
    std::string eval_cfg, eval_ckpt, eval_out;
    eval->add_option("--config", eval_cfg)->required();
    eval->add_option("--checkpoint", eval_ckpt);
    eval->add_option("--out", eval_out);

    // compare
    auto* cmp = app.add_subcommand("compare", "tabulate AVTT/RSR across report.json files");
    std::vector<std::string> cmp_paths;
    std::string cmp_out;
    cmp->add_option("reports", cmp_paths)->required()->expected(-1);
    cmp->add_option("-o,--out", cmp_out);

    // dump-embeddings
    auto* de = app.add_subcommand("dump-embeddings", "per-intersection destination embeddings");
    std::string de_cfg, de_ckpt, de_out;
    de->add_option("--config", de_cfg)->required();
    de->add_option("--checkpoint", de_ckpt);
    de->add_option("-o,--out", de_out)->required();

    // dump-attention
    auto* da = app.add_subcommand("dump-attention", "GAT attention snapshots over an episode");
    std::string da_cfg, da_ckpt, da_out;
    int da_seed = 0, da_every = 10;
    da->add_option("--config", da_cfg)->required();
    da->add_option("--checkpoint", da_ckpt);
    da->add_option("--seed", da_seed);
    da->add_option("--every", da_every, "snapshot period in steps");
    da->add_option("-o,--out", da_out)->required();

    // dump-gce
    auto* dg = app.add_subcommand("dump-gce", "GCE trace from a HHAN training run");
    std::string dg_cfg, dg_out;
    int dg_episodes = 0;
    dg->add_option("--config", dg_cfg)->required();
    dg->add_option("--episodes", dg_episodes, "override training episode count");
    dg->add_option("-o,--out", dg_out)->required();

    CLI11_PARSE(app, argc, argv);

    try {
        if (*gen) return cmd_gen_net(rows, cols, edge_len, speed, lanes, gen_out);
        if (*train) return cmd_train(train_cfg, train_out);
        if (*eval) return cmd_eval(eval_cfg, eval_ckpt, eval_out);
        if (*cmp) return cmd_compare(cmp_paths, cmp_out);
        if (*de) return cmd_dump_embeddings(de_cfg, de_ckpt, de_out);
        if (*da) return cmd_dump_attention(da_cfg, da_ckpt, da_seed, da_every, da_out);
        if (*dg) return cmd_dump_gce(dg_cfg, dg_episodes, dg_out);
    } catch (const marl::ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return kExitConfig;
    } catch (const marl::LoadError& e) {
        std::cerr << "load error: " << e.what() << "\n";
        return kExitConfig;
    } catch (const marl::ProtocolViolation& e) {
        std::cerr << "protocol violation: " << e.what() << "\n";
        return kExitProtocol;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
