#pragma once

// JSON (de)serialization of GridCase. Schema documented in docs/case_schema.md.

#include <pmuwavc/netmodel.hpp>

#include <json.hpp>

#include <filesystem>
#include <fstream>
#include <sstream>

namespace pmuwavc {

using Json = nlohmann::json;

namespace detail {

inline BusKind parse_kind(const std::string &s) {
    if (s == "generator") return BusKind::generator;
    if (s == "dynamic_load") return BusKind::dynamic_load;
    if (s == "static") return BusKind::static_bus;
    throw Error(ErrorCode::invalid_case, "unknown bus kind '" + s + "'");
}

template <class T> T value_or(const Json &j, const char *key, T fallback) {
    return j.contains(key) && !j.at(key).is_null() ? j.at(key).get<T>() : fallback;
}

} // namespace detail

inline Json read_json_file(const std::filesystem::path &path) {
    std::ifstream in(path);
    if (!in) throw Error(ErrorCode::io, "cannot open " + path.string());
    try {
        return Json::parse(in);
    } catch (const Json::exception &e) {
        throw Error(ErrorCode::io, path.string() + ": " + e.what());
    }
}

inline void write_text_file(const std::filesystem::path &path, const std::string &text) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary);
    if (!out) throw Error(ErrorCode::io, "cannot write " + path.string());
    out << text;
}

inline GridCase case_from_json(const Json &j) {
    using detail::value_or;
    GridCase c;
    try {
        c.name = value_or<std::string>(j, "name", "case");
        c.base_mva = j.at("base_mva").get<double>();
        for (const auto &jb : j.at("buses")) {
            Bus b;
            b.id = jb.at("id").get<int>();
            b.kind = detail::parse_kind(jb.at("kind").get<std::string>());
            b.v0 = value_or(jb, "v0", 1.0);
            b.theta0 = value_or(jb, "theta0", 0.0);
            b.gs = value_or(jb, "gs", 0.0);
            b.bs = value_or(jb, "bs", 0.0);
            if (jb.contains("load") && !jb.at("load").is_null()) {
                const auto &jl = jb.at("load");
                LoadParams l;
                l.tau_theta = jl.at("tau_theta").get<double>();
                l.tau_v = jl.at("tau_v").get<double>();
                l.ps = jl.at("ps").get<double>();
                l.qs = jl.at("qs").get<double>();
                l.sigma_p = value_or(jl, "sigma_p", 0.0);
                l.sigma_q = value_or(jl, "sigma_q", 0.0);
                b.load = l;
            }
            c.buses.push_back(b);
        }
        for (const auto &jb : j.at("branches")) {
            Branch br;
            br.from = jb.at("from").get<int>();
            br.to = jb.at("to").get<int>();
            br.r = value_or(jb, "r", 0.0);
            br.x = jb.at("x").get<double>();
            br.b_shunt = value_or(jb, "b_shunt", 0.0);
            br.in_service = value_or(jb, "in_service", true);
            c.branches.push_back(br);
        }
        if (j.contains("svcs")) {
            for (const auto &js : j.at("svcs")) {
                SvcParams s;
                s.bus = js.at("bus").get<int>();
                s.k = value_or(js, "k", s.k);
                s.k_m = value_or(js, "k_m", s.k_m);
                s.k_d = value_or(js, "k_d", s.k_d);
                s.t_m = value_or(js, "t_m", s.t_m);
                s.t1 = value_or(js, "t1", s.t1);
                s.t2 = value_or(js, "t2", s.t2);
                s.x_l = value_or(js, "x_l", s.x_l);
                s.x_c = value_or(js, "x_c", s.x_c);
                s.alpha_min = value_or(js, "alpha_min", s.alpha_min);
                s.alpha_max = value_or(js, "alpha_max", s.alpha_max);
                if (js.contains("vref0") && !js.at("vref0").is_null()) s.vref0 = js.at("vref0").get<double>();
                c.svcs.push_back(s);
            }
        }
        for (const auto &jg : j.at("generators"))
            c.generators.push_back({jg.at("bus").get<int>(), jg.at("v").get<double>(), value_or(jg, "theta", 0.0)});
        if (j.contains("reference_bus")) {
            c.reference_bus = j.at("reference_bus").get<int>();
        } else if (!c.generators.empty()) {
            c.reference_bus = c.generators.front().bus;
        }
        if (j.contains("solver")) {
            c.solver.tolerance = value_or(j.at("solver"), "tolerance", c.solver.tolerance);
            c.solver.max_iterations = value_or(j.at("solver"), "max_iterations", c.solver.max_iterations);
        }
    } catch (const Json::exception &e) {
        throw Error(ErrorCode::invalid_case, std::string("malformed case document: ") + e.what());
    }
    c.validate();
    return c;
}

inline Json case_to_json(const GridCase &c) {
    Json j;
    j["name"] = c.name;
    j["base_mva"] = c.base_mva;
    j["reference_bus"] = c.reference_bus;
    j["buses"] = Json::array();
    for (const auto &b : c.buses) {
        Json jb{{"id", b.id}, {"kind", to_string(b.kind)}, {"v0", b.v0}, {"theta0", b.theta0}};
        if (b.gs != 0.0) jb["gs"] = b.gs;
        if (b.bs != 0.0) jb["bs"] = b.bs;
        if (b.load) {
            const auto &l = *b.load;
            jb["load"] = {{"tau_theta", l.tau_theta}, {"tau_v", l.tau_v}, {"ps", l.ps},
                          {"qs", l.qs},               {"sigma_p", l.sigma_p}, {"sigma_q", l.sigma_q}};
        }
        j["buses"].push_back(jb);
    }
    j["branches"] = Json::array();
    for (const auto &br : c.branches)
        j["branches"].push_back({{"from", br.from}, {"to", br.to}, {"r", br.r}, {"x", br.x},
                                 {"b_shunt", br.b_shunt}, {"in_service", br.in_service}});
    j["svcs"] = Json::array();
    for (const auto &s : c.svcs) {
        Json js{{"bus", s.bus}, {"k", s.k}, {"k_m", s.k_m}, {"k_d", s.k_d}, {"t_m", s.t_m}, {"t1", s.t1},
                {"t2", s.t2}, {"x_l", s.x_l}, {"x_c", s.x_c}, {"alpha_min", s.alpha_min}, {"alpha_max", s.alpha_max}};
        if (s.vref0) js["vref0"] = *s.vref0;
        j["svcs"].push_back(js);
    }
    j["generators"] = Json::array();
    for (const auto &g : c.generators) j["generators"].push_back({{"bus", g.bus}, {"v", g.v}, {"theta", g.theta}});
    j["solver"] = {{"tolerance", c.solver.tolerance}, {"max_iterations", c.solver.max_iterations}};
    return j;
}

inline GridCase load_case(const std::filesystem::path &path) { return case_from_json(read_json_file(path)); }

} // namespace pmuwavc
