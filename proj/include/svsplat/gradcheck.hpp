#pragma once

#include "svsplat/config.hpp"
#include "svsplat/pipeline.hpp"

#include <functional>
#include <map>
#include <sstream>
#include <string>
#include <vector>

namespace svsplat {

// Central-difference verification of every analytic gradient path, run in
// f64 with h = 1e-5. Entries where both gradients are below 1e-8 in
// magnitude carry no signal and are skipped.

inline constexpr double kFdStep = 1e-5;
inline constexpr double kFdGradFloor = 1e-8;
inline constexpr double kFdTolerance = 1e-5;
inline constexpr double kFdToleranceEndToEnd = 1e-4;

struct GroupReport {
    std::string name;
    double max_rel_err = 0;
    int64_t checked = 0;
};

struct GradcheckReport {
    std::string component;
    double tolerance = kFdTolerance;
    std::vector<GroupReport> groups;

    bool passed() const {
        for (const auto& g : groups)
            if (g.max_rel_err > tolerance) return false;
        return true;
    }
    std::string to_text() const {
        std::ostringstream os;
        for (const auto& g : groups)
            os << "group=" << g.name << " checked=" << g.checked
               << " max_rel_err=" << format_double(g.max_rel_err)
               << (g.max_rel_err <= tolerance ? " ok" : " FAIL") << "\n";
        os << "component=" << component << " tolerance=" << format_double(tolerance) << " "
           << (passed() ? "PASS" : "FAIL") << "\n";
        return os.str();
    }
};

namespace fd_detail {

struct Suite {
    Params<double> params;
    std::function<double(Params<double>&)> eval;
    std::map<std::string, TArr<double>> analytic;
};

inline std::vector<int64_t> sample_indices(int64_t numel, int64_t max_elems, Rng& rng) {
    std::vector<int64_t> idx;
    if (numel <= max_elems) {
        for (int64_t i = 0; i < numel; ++i) idx.push_back(i);
        return idx;
    }
    for (int64_t k = 0; k < max_elems; ++k)
        idx.push_back(static_cast<int64_t>(rng.index(static_cast<uint64_t>(numel))));
    return idx;
}

inline std::vector<GroupReport> run(Suite& suite, int64_t max_per_tensor, Rng sample_rng,
                                    double h = kFdStep) {
    std::vector<GroupReport> reports;
    for (auto& [name, tensor] : suite.params.tensors) {
        GroupReport rep;
        rep.name = name;
        const auto ait = suite.analytic.find(name);
        if (ait == suite.analytic.end())
            throw StateError("gradcheck: no analytic gradient for group " + name);
        Rng r = sample_rng.split(name);
        for (const int64_t i : sample_indices(tensor.numel(), max_per_tensor, r)) {
            const double saved = tensor[i];
            tensor[i] = saved + h;
            const double fp = suite.eval(suite.params);
            tensor[i] = saved - h;
            const double fm = suite.eval(suite.params);
            tensor[i] = saved;
            const double fd = (fp - fm) / (2.0 * h);
            const double an = ait->second[i];
            const double mag = std::max(std::abs(fd), std::abs(an));
            if (mag <= kFdGradFloor) continue;
            rep.max_rel_err = std::max(rep.max_rel_err, std::abs(fd - an) / mag);
            ++rep.checked;
        }
        reports.push_back(std::move(rep));
    }
    return reports;
}

inline TArr<double> random_array(Shape dims, Rng& rng, double lo, double hi) {
    TArr<double> a(std::move(dims));
    for (auto& x : a.v) x = rng.uniform(lo, hi);
    return a;
}

inline TArr<double> random_probe(Shape dims, Rng& rng) {
    TArr<double> a(std::move(dims));
    for (auto& x : a.v) x = rng.uniform(-1.0, 1.0);
    return a;
}

inline void perturb_params(Params<double>& p, Rng rng, double scale) {
    for (auto& [name, t] : p.tensors) {
        Rng r = rng.split(name);
        for (auto& x : t.v) x += scale * r.normal();
    }
}

inline double probe_dot(const TArr<double>& probe, const TArr<double>& value) {
    double s = 0;
    for (int64_t i = 0; i < probe.numel(); ++i) s += probe[i] * value[i];
    return s;
}

} // namespace fd_detail

// ---------------------------------------------------------------------------
// Component suites

GradcheckReport gradcheck_geometry(uint64_t seed);
GradcheckReport gradcheck_point_encoder(uint64_t seed);
GradcheckReport gradcheck_transformer(uint64_t seed);
GradcheckReport gradcheck_heads(uint64_t seed);
GradcheckReport gradcheck_rasterizer(uint64_t seed);
GradcheckReport gradcheck_losses(uint64_t seed);
GradcheckReport gradcheck_end_to_end(uint64_t seed);

/// Dispatch by component name; unknown names raise UsageError.
GradcheckReport gradcheck_component(const std::string& component, uint64_t seed);

} // namespace svsplat
