#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <sstream>

#include "marlroute/harness.hpp"

namespace py = pybind11;
using namespace marl;

namespace {

using NetPtr = std::shared_ptr<const net::RoadNetwork>;

// Python-facing handle; the underlying network is immutable and shared.
struct Network {
    NetPtr ptr;
    const net::RoadNetwork& get() const { return *ptr; }
};

py::dict metrics_to_dict(const sim::MetricsReport& r) {
    py::dict d;
    d["avtt"] = r.avtt ? py::cast(*r.avtt) : py::none();
    d["rsr"] = r.rsr;
    d["completed"] = r.completed;
    d["total"] = r.total;
    d["mean_congested_fraction"] = r.mean_congested_fraction;
    d["generated"] = r.generated;
    d["dropped_at_queue"] = r.dropped_at_queue;
    d["steps"] = r.steps;
    return d;
}

run::ScenarioConfig config_from_text(const std::string& text) {
    std::istringstream in(text);
    return run::parse_config(in, "<string>");
}

}  // namespace

PYBIND11_MODULE(_core, m) {
    m.doc() = "mesoscopic traffic simulation with multi-agent adaptive routing";

    py::register_exception<ConfigError>(m, "ConfigError");
    py::register_exception<LoadError>(m, "LoadError");
    py::register_exception<ProtocolViolation>(m, "ProtocolViolation");
    py::register_exception<NoPathError>(m, "NoPathError");

    py::class_<Network>(m, "RoadNetwork")
        .def_property_readonly("num_intersections",
                               [](const Network& n) { return n.get().num_intersections(); })
        .def_property_readonly("num_roads",
                               [](const Network& n) { return n.get().num_roads(); })
        .def_property_readonly("max_out_degree",
                               [](const Network& n) { return n.get().max_out_degree(); })
        .def_property_readonly("zorder_bits_per_axis",
                               [](const Network& n) { return n.get().zorder_bits_per_axis(); })
        .def("position",
             [](const Network& n, int i) {
                 const auto& it = n.get().intersection(i);
                 return py::make_tuple(it.x, it.y);
             })
        .def("agent_controlled",
             [](const Network& n, int i) { return n.get().intersection(i).agent_controlled; })
        .def("zorder",
             [](const Network& n, int i) {
                 std::vector<int> bits;
                 for (auto b : n.get().intersection(i).zorder) bits.push_back(b);
                 return bits;
             })
        .def("next_hops", [](const Network& n, int road) { return net::next_hops(n.get(), road); })
        .def("road_endpoints",
             [](const Network& n, int road) {
                 return py::make_tuple(n.get().road(road).head, n.get().road(road).tail);
             })
        .def("free_flow_weights", [](const Network& n) { return n.get().free_flow_weights(); })
        .def("strongly_connected", [](const Network& n) { return n.get().strongly_connected(); });

    m.def(
        "build_grid",
        [](int rows, int cols, double edge_len, double speed, int lanes) {
            return Network{std::make_shared<const net::RoadNetwork>(
                net::build_grid(rows, cols, edge_len, speed, lanes))};
        },
        py::arg("rows"), py::arg("cols"), py::arg("edge_len") = 200.0,
        py::arg("speed") = 13.89, py::arg("lanes") = 2);
    m.def("load_network", [](const std::string& path) {
        return Network{std::make_shared<const net::RoadNetwork>(net::load_network(path))};
    });
    m.def("save_network", [](const Network& n, const std::string& path) {
        net::save_network(n.get(), path);
    });

    m.def(
        "shortest_path",
        [](const Network& n, int src_road, int dst,
           std::optional<std::vector<double>> weights) {
            const auto w = weights ? *weights : n.get().free_flow_weights();
            return net::shortest_path(n.get(), w, src_road, dst);
        },
        py::arg("net"), py::arg("src_road"), py::arg("dst"), py::arg("weights") = py::none());
    m.def("filter_hub_candidates",
          [](const Network& n) { return net::filter_hub_candidates(n.get()); });
    m.def(
        "select_hubs",
        [](const Network& n, const std::vector<int>& candidates, int k, uint64_t seed) {
            return net::select_hubs(n.get(), candidates, k, seed);
        },
        py::arg("net"), py::arg("candidates"), py::arg("k"), py::arg("seed") = 0);
    m.def(
        "connect_hubs",
        [](const Network& n, const std::vector<int>& hubs, int k, double d_max) {
            const auto hg = net::connect_hubs(n.get(), hubs, k,
                                              d_max > 0 ? d_max : net::default_d_max(n.get()));
            py::dict d;
            d["hubs"] = hg.hubs;
            d["out_neighbors"] = hg.out_neighbors;
            d["edge_time"] = hg.edge_time;
            d["r_vic"] = hg.r_vic;
            d["d_max"] = hg.d_max;
            return d;
        },
        py::arg("net"), py::arg("hubs"), py::arg("k") = 3, py::arg("d_max") = -1.0);

    m.def(
        "run_baseline_episode",
        [](const Network& n, const std::string& model, double demand_rate, int cap, int steps,
           int demand_duration, uint64_t seed, double spfwr_period) {
            sim::SimConfig sc;
            sc.demand_rate = demand_rate;
            sc.vehicle_cap = cap;
            sc.demand_duration_steps = demand_duration;
            sc.seed = seed;
            sim::Simulation s(n.ptr, sc);
            s.begin_episode(steps);
            if (model == "SPF") {
                run::SpfRouter router(n.ptr);
                auto fn = router.router();
                for (int k = 0; k < steps; ++k) s.step(fn);
            } else if (model == "SPFWR") {
                run::SpfwrRouter router(n.ptr, s, spfwr_period);
                auto fn = router.router();
                for (int k = 0; k < steps; ++k) s.step(fn);
            } else {
                throw ConfigError("run_baseline_episode supports SPF and SPFWR");
            }
            s.finish();
            return metrics_to_dict(s.report());
        },
        py::arg("net"), py::arg("model"), py::arg("demand_rate"), py::arg("cap") = 200,
        py::arg("steps") = 500, py::arg("demand_duration") = -1, py::arg("seed") = 0,
        py::arg("spfwr_period") = 30.0);

    m.def(
        "run_experiment",
        [](const std::string& config_text, const std::string& out_dir) {
            const auto cfg = config_from_text(config_text);
            const auto report = run::run_experiment(cfg, out_dir);
            return report.to_json();
        },
        py::arg("config_text"), py::arg("out_dir") = std::string(),
        "Parse a scenario config, train when applicable, evaluate, and return "
        "the report as a JSON string.");
    m.def("default_config_text", []() {
        return run::serialize_config(run::ScenarioConfig{});
    });
    m.def("compare_reports", [](const std::vector<std::string>& report_jsons) {
        std::vector<run::ReportSummary> summaries;
        for (const auto& text : report_jsons)
            summaries.push_back(run::summarize_report_json(text));
        return run::compare_table(summaries);
    });
}
