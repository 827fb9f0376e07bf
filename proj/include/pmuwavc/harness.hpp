#pragma once

// Experiment orchestration: scenario/experiment files, the
// ambient -> estimate -> disturb -> score pipeline, report and CSV
// artifacts, and PMU placement ranking.

#include <pmuwavc/case_io.hpp>
#include <pmuwavc/controller.hpp>

#include <chrono>
#include <cstdio>
#include <set>

namespace pmuwavc {

inline constexpr int report_schema_version = 1;

/// One disturbance experiment as read from a scenario file. Topology
/// events are applied before the ambient window, so estimation and the
/// updated model both see the post-event grid; `events` are timed from the
/// start of the controlled run.
struct ScenarioSpec {
    std::string name = "scenario";
    double ambient_s = 300.0;
    double duration_s = 100.0;
    double dt_s = 1.0 / 600.0;
    double sample_rate_hz = 60.0;
    bool process_noise = true;
    NoiseKind noise = NoiseKind::none;
    std::vector<ScenarioEvent> topology_events;
    std::vector<ScenarioEvent> events;
    ControllerConfig controller;
};

struct PmuPlacement {
    enum class Kind { all, best, worst, explicit_list };
    Kind kind = Kind::all;
    int budget = 0;
    double step_fraction = 0.25;
    std::vector<int> buses;
};

struct ExperimentSpec {
    std::filesystem::path case_file;
    std::filesystem::path scenario_file;
    std::vector<ControlMode> modes;
    std::vector<std::uint64_t> seeds;
    std::filesystem::path outputs;
    std::optional<std::vector<int>> controlled_buses; // installed SVCs; all of the case's when absent
    PmuPlacement pmu_placement;
    EstimationOptions estimation;

    void validate() const {
        if (modes.empty()) throw Error(ErrorCode::invalid_argument, "experiment needs at least one mode");
        if (seeds.empty()) throw Error(ErrorCode::invalid_argument, "experiment needs at least one seed");
    }
};

namespace detail {

inline BusSelector parse_selector(const Json &j) {
    if (j.is_string()) {
        const auto s = j.get<std::string>();
        if (s == "all") return {BusSelector::Kind::all, {}};
        if (s == "uncontrolled") return {BusSelector::Kind::uncontrolled, {}};
        throw Error(ErrorCode::invalid_argument, "bus selector must be 'all', 'uncontrolled' or a list, got '" + s + "'");
    }
    return {BusSelector::Kind::list, j.get<std::vector<int>>()};
}

inline Json selector_to_json(const BusSelector &s) {
    switch (s.kind) {
    case BusSelector::Kind::all: return "all";
    case BusSelector::Kind::uncontrolled: return "uncontrolled";
    case BusSelector::Kind::list: break;
    }
    return s.ids;
}

inline Json bounds_to_json(const std::map<int, Bounds> &m) {
    Json j = Json::object();
    for (const auto &[bus, b] : m) j[std::to_string(bus)] = {b.lo, b.hi};
    return j;
}

inline std::map<int, Bounds> parse_bounds(const Json &j) {
    std::map<int, Bounds> out;
    for (const auto &[key, val] : j.items()) {
        const auto pair = val.get<std::vector<double>>();
        if (pair.size() != 2) throw Error(ErrorCode::invalid_argument, "bounds for bus " + key + " must be [min, max]");
        out[std::stoi(key)] = {pair[0], pair[1]};
    }
    return out;
}

inline RegressionForm parse_regression_form(const std::string &s) {
    if (s == "sample") return RegressionForm::sample;
    if (s == "interval_average") return RegressionForm::interval_average;
    throw Error(ErrorCode::invalid_argument, "unknown regression form '" + s + "'");
}

inline const char *to_string(RegressionForm f) { return f == RegressionForm::sample ? "sample" : "interval_average"; }

inline std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t stream) {
    std::uint64_t z = seed * 0x9e3779b97f4a7c15ULL + stream * 0xbf58476d1ce4e5b9ULL + 0x94d049bb133111ebULL;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

template <class F> auto wrap_json(const char *what, F &&f) {
    try {
        return f();
    } catch (const Json::exception &e) {
        throw Error(ErrorCode::invalid_argument, std::string("malformed ") + what + ": " + e.what());
    }
}

} // namespace detail

inline ScenarioEvent event_from_json(const Json &j) {
    return detail::wrap_json("event", [&] {
        const auto kind = j.at("kind").get<std::string>();
        const double at = j.value("at", 0.0);
        if (kind == "load_step")
            return ScenarioEvent::load_step(at, detail::parse_selector(j.at("buses")), j.value("dp", 0.0), j.value("dq", 0.0));
        if (kind == "line_trip") return ScenarioEvent::line_trip(at, j.at("from").get<int>(), j.at("to").get<int>());
        if (kind == "set_vref") return ScenarioEvent::set_vref(at, j.at("bus").get<int>(), j.at("value").get<double>());
        throw Error(ErrorCode::invalid_argument, "unknown event kind '" + kind + "'");
    });
}

inline Json event_to_json(const ScenarioEvent &e) {
    Json j{{"at", e.at}, {"kind", detail::event_name(e.kind)}};
    switch (e.kind) {
    case ScenarioEvent::Kind::load_step:
        j["buses"] = detail::selector_to_json(e.buses);
        j["dp"] = e.dp;
        j["dq"] = e.dq;
        break;
    case ScenarioEvent::Kind::line_trip:
        j["from"] = e.from;
        j["to"] = e.to;
        break;
    case ScenarioEvent::Kind::set_vref:
        j["bus"] = e.bus;
        j["value"] = e.value;
        break;
    }
    return j;
}

inline ControllerConfig controller_from_json(const Json &j, const ControllerConfig &defaults = {}) {
    return detail::wrap_json("controller section", [&] {
        ControllerConfig c = defaults;
        if (j.contains("mode")) c.mode = parse_control_mode(j.at("mode").get<std::string>());
        c.d1 = j.value("d1_s", c.d1);
        c.d2 = j.value("d2_s", c.d2);
        c.threshold = j.value("threshold_pu", c.threshold);
        c.ss_window = j.value("ss_window_s", c.ss_window);
        if (j.contains("vc_bounds")) c.vc_bounds = detail::parse_bounds(j.at("vc_bounds"));
        if (j.contains("qc_bounds")) c.qc_bounds = detail::parse_bounds(j.at("qc_bounds"));
        c.validate();
        return c;
    });
}

inline Json controller_to_json(const ControllerConfig &c) {
    return {{"mode", to_string(c.mode)},
            {"d1_s", c.d1},
            {"d2_s", c.d2},
            {"threshold_pu", c.threshold},
            {"ss_window_s", c.ss_window},
            {"vc_bounds", detail::bounds_to_json(c.vc_bounds)},
            {"qc_bounds", detail::bounds_to_json(c.qc_bounds)}};
}

inline ScenarioSpec scenario_from_json(const Json &j) {
    return detail::wrap_json("scenario", [&] {
        ScenarioSpec s;
        s.name = j.value("name", s.name);
        s.ambient_s = j.value("ambient_s", s.ambient_s);
        s.duration_s = j.value("duration_s", s.duration_s);
        s.dt_s = j.value("dt_s", s.dt_s);
        s.sample_rate_hz = j.value("sample_rate_hz", s.sample_rate_hz);
        s.process_noise = j.value("process_noise", s.process_noise);
        s.noise = parse_noise_kind(j.value("noise", std::string("none")));
        if (j.contains("topology_events"))
            for (const auto &e : j.at("topology_events")) s.topology_events.push_back(event_from_json(e));
        if (j.contains("events"))
            for (const auto &e : j.at("events")) s.events.push_back(event_from_json(e));
        if (j.contains("controller")) s.controller = controller_from_json(j.at("controller"));
        for (const auto &e : s.topology_events)
            if (e.kind == ScenarioEvent::Kind::set_vref)
                throw Error(ErrorCode::invalid_argument, "set_vref is not a topology event");
        if (!(s.duration_s > s.controller.ss_window))
            throw Error(ErrorCode::invalid_argument, "duration_s must exceed the steady-state window");
        return s;
    });
}

inline Json scenario_to_json(const ScenarioSpec &s) {
    Json j{{"name", s.name},         {"ambient_s", s.ambient_s},           {"duration_s", s.duration_s},
           {"dt_s", s.dt_s},         {"sample_rate_hz", s.sample_rate_hz}, {"process_noise", s.process_noise},
           {"noise", to_string(s.noise)}, {"controller", controller_to_json(s.controller)}};
    j["topology_events"] = Json::array();
    for (const auto &e : s.topology_events) j["topology_events"].push_back(event_to_json(e));
    j["events"] = Json::array();
    for (const auto &e : s.events) j["events"].push_back(event_to_json(e));
    return j;
}

/// Relative paths in the experiment file resolve against its directory.
inline ExperimentSpec experiment_from_json(const Json &j, const std::filesystem::path &base_dir = {}) {
    return detail::wrap_json("experiment", [&] {
        auto resolve = [&](const std::string &p) {
            std::filesystem::path path(p);
            return path.is_absolute() || base_dir.empty() ? path : base_dir / path;
        };
        ExperimentSpec e;
        e.case_file = resolve(j.at("case_file").get<std::string>());
        e.scenario_file = resolve(j.at("scenario_file").get<std::string>());
        for (const auto &m : j.at("modes")) e.modes.push_back(parse_control_mode(m.get<std::string>()));
        e.seeds = j.at("seeds").get<std::vector<std::uint64_t>>();
        e.outputs = resolve(j.value("outputs", std::string("out")));
        if (j.contains("controlled_buses")) e.controlled_buses = j.at("controlled_buses").get<std::vector<int>>();
        if (j.contains("pmu_placement")) {
            const auto &jp = j.at("pmu_placement");
            const auto kind = jp.value("kind", std::string("all"));
            if (kind == "all") e.pmu_placement.kind = PmuPlacement::Kind::all;
            else if (kind == "best") e.pmu_placement.kind = PmuPlacement::Kind::best;
            else if (kind == "worst") e.pmu_placement.kind = PmuPlacement::Kind::worst;
            else if (kind == "list") e.pmu_placement.kind = PmuPlacement::Kind::explicit_list;
            else throw Error(ErrorCode::invalid_argument, "unknown pmu_placement kind '" + kind + "'");
            e.pmu_placement.budget = jp.value("budget", 0);
            e.pmu_placement.step_fraction = jp.value("step_fraction", 0.25);
            if (jp.contains("buses")) e.pmu_placement.buses = jp.at("buses").get<std::vector<int>>();
        }
        if (j.contains("estimation")) {
            const auto &je = j.at("estimation");
            e.estimation.lag = je.value("lag", 1);
            if (je.contains("regression_points") && !je.at("regression_points").is_null())
                e.estimation.regression_points = je.at("regression_points").get<Eigen::Index>();
            e.estimation.regression_start = je.value("regression_start", Eigen::Index{0});
            e.estimation.regression_form =
                detail::parse_regression_form(je.value("regression_form", std::string("interval_average")));
        }
        e.validate();
        return e;
    });
}

inline Json experiment_to_json(const ExperimentSpec &e) {
    Json j{{"case_file", e.case_file.string()}, {"scenario_file", e.scenario_file.string()}, {"outputs", e.outputs.string()}};
    j["modes"] = Json::array();
    for (auto m : e.modes) j["modes"].push_back(to_string(m));
    j["seeds"] = e.seeds;
    j["controlled_buses"] = e.controlled_buses ? Json(*e.controlled_buses) : Json(nullptr);
    const char *kinds[] = {"all", "best", "worst", "list"};
    j["pmu_placement"] = {{"kind", kinds[static_cast<int>(e.pmu_placement.kind)]},
                          {"budget", e.pmu_placement.budget},
                          {"step_fraction", e.pmu_placement.step_fraction},
                          {"buses", e.pmu_placement.buses}};
    j["estimation"] = {{"lag", e.estimation.lag},
                       {"regression_points", e.estimation.regression_points ? Json(*e.estimation.regression_points) : Json(nullptr)},
                       {"regression_start", e.estimation.regression_start},
                       {"regression_form", detail::to_string(e.estimation.regression_form)}};
    return j;
}

inline ScenarioSpec load_scenario(const std::filesystem::path &p) { return scenario_from_json(read_json_file(p)); }

inline ExperimentSpec load_experiment(const std::filesystem::path &p) {
    return experiment_from_json(read_json_file(p), p.parent_path());
}

// ---------------------------------------------------------------- CSV

inline std::string format_double(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

/// Columns t, theta_<id>..., v_<id>..., p_<id>..., q_<id>...; values
/// printed with 17 significant digits so they read back bit-exactly.
inline std::string trajectory_csv(const PmuWindow &w) {
    std::string out = "t";
    for (const char *ch : {"theta", "v", "p", "q"})
        for (int id : w.bus_ids) out += std::string(",") + ch + "_" + std::to_string(id);
    out += '\n';
    const Matrix zero = Matrix::Zero(w.samples(), w.buses());
    const Matrix &p = w.p ? *w.p : zero, &q = w.q ? *w.q : zero;
    for (Eigen::Index i = 0; i < w.samples(); ++i) {
        out += format_double(w.t0 + static_cast<double>(i) / w.sample_rate);
        for (const Matrix *m : {&w.theta, &w.v, &p, &q})
            for (Eigen::Index k = 0; k < w.buses(); ++k) {
                out += ',';
                out += format_double((*m)(i, k));
            }
        out += '\n';
    }
    return out;
}

struct CsvTable {
    std::vector<std::string> header;
    std::vector<std::vector<double>> rows;

    std::size_t column(const std::string &name) const {
        auto it = std::find(header.begin(), header.end(), name);
        if (it == header.end()) throw Error(ErrorCode::invalid_argument, "CSV has no column '" + name + "'");
        return static_cast<std::size_t>(it - header.begin());
    }
};

inline CsvTable read_csv(const std::filesystem::path &path) {
    std::ifstream in(path);
    if (!in) throw Error(ErrorCode::io, "cannot open " + path.string());
    CsvTable t;
    std::string line;
    auto split = [](const std::string &s) {
        std::vector<std::string> out;
        std::stringstream ss(s);
        std::string cell;
        while (std::getline(ss, cell, ',')) out.push_back(cell);
        return out;
    };
    if (!std::getline(in, line)) throw Error(ErrorCode::io, path.string() + " is empty");
    t.header = split(line);
    std::size_t lineno = 1;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        const auto cells = split(line);
        if (cells.size() != t.header.size())
            throw Error(ErrorCode::io, path.string() + ":" + std::to_string(lineno) + ": expected " +
                                           std::to_string(t.header.size()) + " fields");
        std::vector<double> row;
        row.reserve(cells.size());
        for (const auto &c : cells) {
            char *end = nullptr;
            const double v = std::strtod(c.c_str(), &end);
            if (end == c.c_str() || *end != '\0')
                throw Error(ErrorCode::io, path.string() + ":" + std::to_string(lineno) + ": bad number '" + c + "'");
            row.push_back(v);
        }
        t.rows.push_back(std::move(row));
    }
    return t;
}

/// Rebuilds a PmuWindow from a trajectory CSV; P and Q are optional.
inline PmuWindow read_trajectory_csv(const std::filesystem::path &path) {
    const CsvTable t = read_csv(path);
    std::vector<int> ids;
    for (const auto &h : t.header)
        if (h.rfind("theta_", 0) == 0) ids.push_back(std::stoi(h.substr(6)));
    const auto n = static_cast<Eigen::Index>(t.rows.size());
    if (n < 2 || ids.empty()) throw Error(ErrorCode::insufficient_data, path.string() + " holds too few samples or buses");
    const std::size_t tc = t.column("t");
    const double dt = t.rows[1][tc] - t.rows[0][tc];
    if (!(dt > 0)) throw Error(ErrorCode::io, path.string() + ": time column is not increasing");
    const auto m = static_cast<Eigen::Index>(ids.size());
    PmuWindow w{1.0 / dt, t.rows[0][tc], Matrix(n, m), Matrix(n, m), std::nullopt, std::nullopt, ids};
    auto fill = [&](Matrix &dst, const char *prefix) {
        for (Eigen::Index k = 0; k < m; ++k) {
            const auto c = t.column(std::string(prefix) + std::to_string(ids[static_cast<std::size_t>(k)]));
            for (Eigen::Index i = 0; i < n; ++i) dst(i, k) = t.rows[static_cast<std::size_t>(i)][c];
        }
    };
    fill(w.theta, "theta_");
    fill(w.v, "v_");
    const bool has_pq = std::find(t.header.begin(), t.header.end(), "p_" + std::to_string(ids[0])) != t.header.end();
    if (has_pq) {
        w.p = Matrix(n, m);
        w.q = Matrix(n, m);
        fill(*w.p, "p_");
        fill(*w.q, "q_");
    }
    return w;
}

// ---------------------------------------------------------------- PMU ranking

struct BusScore {
    int bus = 0;
    double score = 0.0;
};

/// Sensitivity of each load bus to a uniform load increase: the largest
/// rise in apparent branch flow per unit of added active load among the
/// branches incident to the bus. Sorted by score, ties by ascending id.
inline std::vector<BusScore> rank_pmu_locations(const GridCase &c, double step_fraction) {
    if (!std::isfinite(step_fraction)) throw Error(ErrorCode::invalid_argument, "step fraction must be finite");
    const ReducedNetwork net = reduce_network(c);
    const auto base = solve_power_flow(c);
    GridCase stepped = c;
    double added = 0.0;
    for (auto &b : stepped.buses)
        if (b.load) {
            added += step_fraction * b.load->ps;
            b.load->ps *= 1.0 + step_fraction;
            b.load->qs *= 1.0 + step_fraction;
        }
    PowerFlowSolution after;
    try {
        after = solve_power_flow(stepped);
    } catch (const Error &e) {
        throw Error(e.code(), "power flow after a " + std::to_string(step_fraction) +
                                  " load step failed (" + e.detail() + "); try a smaller fraction");
    }
    const auto f0 = branch_apparent_flows(c, all_bus_voltages(net, base.theta, base.v));
    const auto f1 = branch_apparent_flows(stepped, all_bus_voltages(net, after.theta, after.v));
    const double lowest = -std::numeric_limits<double>::infinity();
    std::map<int, double> score;
    for (int id : net.load_ids) score[id] = lowest;
    for (std::size_t i = 0; i < c.branches.size(); ++i) {
        if (!c.branches[i].in_service) continue;
        const double s = added != 0.0 ? (f1[i] - f0[i]) / std::abs(added) : 0.0;
        for (int end : {c.branches[i].from, c.branches[i].to}) {
            auto it = score.find(end);
            if (it != score.end()) it->second = std::max(it->second, s);
        }
    }
    std::vector<BusScore> out;
    for (const auto &[bus, s] : score) out.push_back({bus, s == lowest ? 0.0 : s});
    std::stable_sort(out.begin(), out.end(), [](const BusScore &a, const BusScore &b) {
        return a.score != b.score ? a.score > b.score : a.bus < b.bus;
    });
    return out;
}

/// Buses that keep a PMU under `placement`, in load-bus order.
inline std::vector<int> pmu_buses(const GridCase &c, const PmuPlacement &placement) {
    const ReducedNetwork net = reduce_network(c);
    const auto &loads = net.load_ids;
    std::set<int> keep;
    switch (placement.kind) {
    case PmuPlacement::Kind::all: keep.insert(loads.begin(), loads.end()); break;
    case PmuPlacement::Kind::explicit_list:
        for (int b : placement.buses) {
            if (std::find(loads.begin(), loads.end(), b) == loads.end())
                throw Error(ErrorCode::unknown_bus, "PMU bus " + std::to_string(b) + " is not a dynamic load bus");
            keep.insert(b);
        }
        break;
    case PmuPlacement::Kind::best:
    case PmuPlacement::Kind::worst: {
        const auto rank = rank_pmu_locations(c, placement.step_fraction);
        const auto budget = static_cast<std::size_t>(placement.budget);
        if (placement.budget < 1 || budget > rank.size())
            throw Error(ErrorCode::invalid_argument, "PMU budget must be between 1 and " + std::to_string(rank.size()));
        for (std::size_t i = 0; i < budget; ++i)
            keep.insert(placement.kind == PmuPlacement::Kind::best ? rank[i].bus : rank[rank.size() - 1 - i].bus);
        break;
    }
    }
    std::vector<int> out;
    for (int b : loads)
        if (keep.count(b)) out.push_back(b);
    return out;
}

// ---------------------------------------------------------------- cells

/// Analytic sensitivities of `plant` at `x` (network Jacobian only: SVC
/// outputs enter as reactive injections, exactly as in the estimate).
inline Matrix analytic_sensitivity(const GridDynamics &plant, const SystemState &x) {
    return plant.jacobian(x.theta, x.v).assembled().inverse();
}

inline double relative_frobenius(const Matrix &est, const Matrix &truth) {
    const double n = truth.norm();
    return n > 0 ? (est - truth).norm() / n : (est - truth).norm();
}

struct CellResult {
    ControlMode mode = ControlMode::none;
    std::uint64_t seed = 0;
    bool ok = false;
    std::string error;
    double lambda = std::numeric_limits<double>::quiet_NaN();
    int actions = 0;
    bool controller_enabled = true;
    std::vector<int> controlled;    // dispatched SVC buses
    std::vector<int> uncontrolled;  // scored buses (all uncontrolled load buses)
    std::vector<int> pmu_buses;
    Vector v_ref_u;
    std::vector<std::string> log;
    std::optional<Json> estimation;
    double estimation_s = 0.0;
    double solve_max_s = 0.0;
    double solve_mean_s = 0.0;
    std::optional<PmuWindow> trajectory; // noise-free, every load bus
    std::vector<ControlAction> actions_taken;
};

/// Per-cell context shared by every mode of a seed.
struct CellInputs {
    GridCase grid;
    ScenarioSpec scenario;
    std::optional<std::vector<int>> installed;
    std::vector<int> pmus; // empty means every load bus
    EstimationOptions estimation;
};

/// Ambient window, estimation (model-free), controlled disturbance run and
/// lambda for one (mode, seed). Every random stream depends on the seed
/// only, so modes see identical noise.
inline CellResult run_cell(const CellInputs &in, ControlMode mode, std::uint64_t seed) {
    using clock = std::chrono::steady_clock;
    CellResult r;
    r.mode = mode;
    r.seed = seed;
    try {
        const ScenarioSpec &sc = in.scenario;
        GridDynamics original(in.grid, in.installed);
        GridDynamics plant = original;
        SystemState x0 = plant.initial_state();
        for (const auto &e : sc.topology_events) {
            detail::apply_event(plant, x0, e);
            x0 = plant.equilibrium(x0.svc_vref, &x0);
        }
        const auto &loads = plant.load_ids();
        r.pmu_buses = in.pmus.empty() ? loads : in.pmus;
        r.uncontrolled = plant.uncontrolled_ids();
        {
            const auto all_u = initial_control_state(plant, x0, {}, r.uncontrolled, sc.controller);
            r.v_ref_u = all_u.v_ref_u;
        }
        auto has_pmu = [&](int b) { return std::find(r.pmu_buses.begin(), r.pmu_buses.end(), b) != r.pmu_buses.end(); };
        std::vector<int> ctrl_all = plant.svc_bus_ids(), ctrl, unc;
        for (int b : ctrl_all)
            if (has_pmu(b)) ctrl.push_back(b);
        for (int b : r.uncontrolled)
            if (has_pmu(b)) unc.push_back(b);

        // Ambient window on the (post-topology) grid.
        Scenario amb;
        amb.duration_s = sc.ambient_s;
        amb.dt_s = sc.dt_s;
        amb.sample_rate_hz = sc.sample_rate_hz;
        amb.process_noise = sc.process_noise;
        amb.seed = detail::mix_seed(seed, 1);
        amb.noise = {sc.noise, detail::mix_seed(seed, 2), Vector()};
        NoiseModel control_noise{sc.noise, detail::mix_seed(seed, 3), Vector()};
        std::optional<PmuWindow> ambient;
        if (mode == ControlMode::model_free || sc.noise == NoiseKind::low) {
            GridDynamics ap = plant;
            auto res = run(ap, amb, {}, x0);
            if (sc.noise == NoiseKind::low) control_noise.low_scale = calibrate_low_noise(res.truth, 0).low_scale;
            ambient = std::move(res.measured);
        }

        // Sensitivity blocks for the selected mode.
        PartitionedS blocks;
        if (mode != ControlMode::none) {
            Matrix s;
            std::vector<int> ids;
            if (mode == ControlMode::model_free) {
                const auto t0 = clock::now();
                const auto est = estimate_sensitivities(ambient->subset(r.pmu_buses), in.estimation);
                r.estimation_s = std::chrono::duration<double>(clock::now() - t0).count();
                s = est.s_hat;
                ids = est.bus_ids;
                for (const auto &w : est.warnings) r.log.push_back("estimation: " + w);
                const auto truth = reduce_for_missing(analytic_sensitivity(plant, x0), loads, r.pmu_buses);
                Vector tt(static_cast<Eigen::Index>(ids.size())), tv(tt.size());
                for (std::size_t k = 0; k < ids.size(); ++k) {
                    tt(static_cast<Eigen::Index>(k)) = plant.tau_theta()(plant.load_index(ids[k]));
                    tv(static_cast<Eigen::Index>(k)) = plant.tau_v()(plant.load_index(ids[k]));
                }
                const Matrix j_true = truth.s.inverse();
                r.estimation = Json{{"log_residual", est.log_residual},
                                    {"roundtrip_residual", est.roundtrip_residual},
                                    {"condition", est.condition},
                                    {"stable", est.stable},
                                    {"warnings", est.warnings},
                                    {"tau_theta_max_rel_error", ((est.t_theta - tt).array() / tt.array()).abs().maxCoeff()},
                                    {"tau_v_max_rel_error", ((est.t_v - tv).array() / tv.array()).abs().maxCoeff()},
                                    {"j_rel_error", relative_frobenius(est.j_hat, j_true)}};
            } else {
                const bool stale = mode == ControlMode::model_based_stale;
                const GridDynamics &model = stale ? original : plant;
                const SystemState xm = stale ? original.initial_state() : x0;
                const auto red = reduce_for_missing(analytic_sensitivity(model, xm), model.load_ids(), r.pmu_buses);
                s = red.s;
                ids = red.bus_ids;
            }
            blocks = partition(s, ids, ctrl, unc);
        }
        r.controlled = mode == ControlMode::none ? std::vector<int>{} : ctrl;
        r.controller_enabled = mode != ControlMode::none && !ctrl.empty();
        if (mode != ControlMode::none && ctrl.empty()) r.log.push_back("no controlled bus has a PMU; controller disabled");

        // Controlled disturbance run from the pre-disturbance steady state.
        ControlState st = initial_control_state(plant, x0, r.controlled, unc, sc.controller);
        st.disturbance_t = std::numeric_limits<double>::infinity();
        for (const auto &e : sc.events)
            if (e.kind != ScenarioEvent::Kind::set_vref) st.disturbance_t = std::min(st.disturbance_t, x0.t + e.at);
        Scenario run_sc;
        run_sc.duration_s = sc.duration_s;
        run_sc.dt_s = sc.dt_s;
        run_sc.sample_rate_hz = sc.sample_rate_hz;
        run_sc.process_noise = sc.process_noise;
        run_sc.seed = detail::mix_seed(seed, 4);
        run_sc.events = sc.events;
        if (sc.noise == NoiseKind::low && control_noise.low_scale.size() == 0)
            throw Error(ErrorCode::invalid_argument, "low noise requires an ambient window for calibration");
        run_sc.noise = control_noise;
        ControllerConfig cfg = sc.controller;
        cfg.mode = mode;
        double solve_total = 0.0;
        int solves = 0;
        GridDynamics live = plant;
        SampleObserver observer = [&](const SystemState &x, const MeasurementRow &row) {
            std::vector<ScenarioEvent> out;
            if (!r.controller_enabled) return out;
            const auto cm = control_measurement(live, x, row, st);
            if (!should_act(x.t, cm.dv_u, st, cfg)) return out;
            const auto t0 = clock::now();
            const auto act = tick(x.t, cm, blocks, st, cfg);
            const double el = std::chrono::duration<double>(clock::now() - t0).count();
            solve_total += el;
            ++solves;
            r.solve_max_s = std::max(r.solve_max_s, el);
            if (act) {
                for (std::size_t i = 0; i < act->buses.size(); ++i)
                    out.push_back(ScenarioEvent::set_vref(x.t, act->buses[i], act->vref(static_cast<Eigen::Index>(i))));
                r.actions_taken.push_back(*act);
            }
            return out;
        };
        auto res = run(live, run_sc, observer, x0);
        r.solve_mean_s = solves ? solve_total / solves : 0.0;
        r.actions = st.actions;
        for (auto &l : st.log) r.log.push_back(std::move(l));
        Matrix vu(res.truth.samples(), static_cast<Eigen::Index>(r.uncontrolled.size()));
        for (std::size_t i = 0; i < r.uncontrolled.size(); ++i)
            vu.col(static_cast<Eigen::Index>(i)) = res.truth.v.col(res.truth.column_of(r.uncontrolled[i]));
        r.lambda = performance_index(vu, sc.sample_rate_hz, r.v_ref_u, cfg.ss_window);
        r.trajectory = std::move(res.truth);
        r.ok = true;
    } catch (const Error &e) {
        r.ok = false;
        r.error = e.what();
    }
    return r;
}

inline std::string trajectory_name(ControlMode m, std::uint64_t seed) {
    return std::string("trajectory_") + to_string(m) + "_" + std::to_string(seed) + ".csv";
}

inline Json cell_to_json(const CellResult &r, const std::string &trajectory_file) {
    Json j{{"mode", to_string(r.mode)},
           {"seed", r.seed},
           {"status", r.ok ? "ok" : "error"},
           {"error", r.ok ? Json(nullptr) : Json(r.error)},
           {"lambda", r.ok ? Json(r.lambda) : Json(nullptr)},
           {"actions", r.actions},
           {"controller_enabled", r.controller_enabled},
           {"controlled", r.controlled},
           {"uncontrolled", r.uncontrolled},
           {"pmu_buses", r.pmu_buses},
           {"v_ref_u", std::vector<double>(r.v_ref_u.data(), r.v_ref_u.data() + r.v_ref_u.size())},
           {"log", r.log},
           {"estimation", r.estimation ? *r.estimation : Json(nullptr)},
           {"trajectory", r.trajectory ? Json(trajectory_file) : Json(nullptr)},
           {"timing", {{"estimation_s", r.estimation_s}, {"solve_max_s", r.solve_max_s}, {"solve_mean_s", r.solve_mean_s}}}};
    return j;
}

/// Throws invalid_argument describing the first schema violation.
inline void validate_report(const Json &j) {
    auto fail = [](const std::string &what) { throw Error(ErrorCode::invalid_argument, "report schema: " + what); };
    if (!j.is_object()) fail("top level must be an object");
    if (j.value("schema", std::string()) != "pmuwavc.report") fail("missing schema tag");
    if (!j.contains("schema_version") || j.at("schema_version") != report_schema_version) fail("unsupported schema_version");
    for (const char *k : {"experiment", "scenario", "case"})
        if (!j.contains(k)) fail(std::string("missing '") + k + "'");
    if (!j.contains("cells") || !j.at("cells").is_array()) fail("'cells' must be an array");
    for (const auto &c : j.at("cells")) {
        for (const char *k : {"mode", "seed", "status", "lambda", "actions", "uncontrolled", "v_ref_u", "trajectory", "timing"})
            if (!c.contains(k)) fail(std::string("cell lacks '") + k + "'");
        parse_control_mode(c.at("mode").get<std::string>());
        const auto status = c.at("status").get<std::string>();
        if (status != "ok" && status != "error") fail("cell status must be ok or error");
        if (status == "ok") {
            if (!c.at("lambda").is_number() || c.at("lambda").get<double>() < 0) fail("lambda must be a non-negative number");
            if (c.at("uncontrolled").size() != c.at("v_ref_u").size()) fail("v_ref_u does not match uncontrolled buses");
        } else if (!c.at("error").is_string()) {
            fail("failed cell needs an error message");
        }
    }
}

/// Runs every (mode, seed) cell, writes trajectories and report.json under
/// spec.outputs, and returns the report. Failed cells are recorded and the
/// experiment goes on.
inline Json run_experiment(const ExperimentSpec &spec) {
    spec.validate();
    CellInputs in;
    in.grid = load_case(spec.case_file);
    in.scenario = load_scenario(spec.scenario_file);
    in.installed = spec.controlled_buses;
    in.estimation = spec.estimation;
    if (spec.pmu_placement.kind != PmuPlacement::Kind::all) in.pmus = pmu_buses(in.grid, spec.pmu_placement);
    std::filesystem::create_directories(spec.outputs);
    Json report{{"schema", "pmuwavc.report"},
                {"schema_version", report_schema_version},
                {"experiment", experiment_to_json(spec)},
                {"scenario", scenario_to_json(in.scenario)},
                {"case", in.grid.name},
                {"cells", Json::array()}};
    for (std::uint64_t seed : spec.seeds)
        for (ControlMode mode : spec.modes) {
            const auto r = run_cell(in, mode, seed);
            const std::string file = trajectory_name(mode, seed);
            if (r.trajectory) write_text_file(spec.outputs / file, trajectory_csv(*r.trajectory));
            report["cells"].push_back(cell_to_json(r, file));
        }
    validate_report(report);
    write_text_file(spec.outputs / "report.json", report.dump(2) + "\n");
    return report;
}

/// Voltage at `bus` for every mode of `seed` (the report's first seed when
/// absent), one column per mode on the shared time grid. Writes
/// plot_<bus>.csv next to the trajectories and returns its path.
inline std::filesystem::path emit_plot_data(const Json &report, const std::filesystem::path &dir, int bus,
                                            std::optional<std::uint64_t> seed = std::nullopt) {
    validate_report(report);
    std::vector<std::pair<std::string, CsvTable>> cols;
    for (const auto &c : report.at("cells")) {
        if (c.at("trajectory").is_null()) continue;
        const auto s = c.at("seed").get<std::uint64_t>();
        if (!seed) seed = s;
        if (s != *seed) continue;
        cols.emplace_back(c.at("mode").get<std::string>(), read_csv(dir / c.at("trajectory").get<std::string>()));
    }
    if (cols.empty()) throw Error(ErrorCode::invalid_argument, "report has no trajectories for the requested seed");
    const auto &first = cols.front().second;
    const std::string name = "v_" + std::to_string(bus);
    if (std::find(first.header.begin(), first.header.end(), name) == first.header.end()) {
        std::string valid;
        for (const auto &h : first.header)
            if (h.rfind("v_", 0) == 0) valid += (valid.empty() ? "" : ", ") + h.substr(2);
        throw Error(ErrorCode::unknown_bus, "bus " + std::to_string(bus) + " has no trajectory; valid ids: " + valid);
    }
    std::string out = "t";
    for (const auto &[mode, t] : cols) out += cols.size() == 1 ? ",v" : ",v_" + mode;
    out += '\n';
    const std::size_t tc = first.column("t");
    for (std::size_t i = 0; i < first.rows.size(); ++i) {
        out += format_double(first.rows[i][tc]);
        for (const auto &[mode, t] : cols) {
            if (t.rows.size() != first.rows.size() || t.rows[i][tc] != first.rows[i][tc])
                throw Error(ErrorCode::invalid_argument, "trajectories do not share a time grid");
            out += ',' + format_double(t.rows[i][t.column(name)]);
        }
        out += '\n';
    }
    const auto path = dir / ("plot_" + std::to_string(bus) + ".csv");
    write_text_file(path, out);
    return path;
}

} // namespace pmuwavc
