#pragma once

#include <istream>
#include <ostream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "sahr/attention.hpp"

namespace sahr {

enum class PlanProvenance { threshold, topmost, manual };

inline const char* provenance_name(PlanProvenance p) {
    switch (p) {
        case PlanProvenance::threshold: return "threshold";
        case PlanProvenance::topmost: return "topmost";
        case PlanProvenance::manual: return "manual";
    }
    return "?";
}

// Static keep/remove decision per (layer, head) of one attention site. A
// removed head contributes nothing in training and evaluation alike.
struct PrunePlan {
    Site site = Site::encoder_self;
    std::size_t layers = 0;
    std::size_t heads = 0;
    std::vector<bool> keep;  // row-major [layers x heads]
    PlanProvenance provenance = PlanProvenance::manual;
    double tau = 0.0;  // meaningful for threshold plans

    static PrunePlan keep_all(std::size_t layers, std::size_t heads, Site site = Site::encoder_self) {
        return {site, layers, heads, std::vector<bool>(layers * heads, true), PlanProvenance::manual, 0.0};
    }

    bool at(std::size_t layer, std::size_t head) const { return keep[layer * heads + head]; }
    void set(std::size_t layer, std::size_t head, bool k) { keep[layer * heads + head] = k; }

    std::vector<bool> layer_keep(std::size_t layer) const {
        return {keep.begin() + static_cast<std::ptrdiff_t>(layer * heads),
                keep.begin() + static_cast<std::ptrdiff_t>((layer + 1) * heads)};
    }

    std::size_t total() const { return layers * heads; }
    std::size_t remaining() const {
        std::size_t n = 0;
        for (bool k : keep) n += k;
        return n;
    }
    std::size_t removed() const { return total() - remaining(); }
};

// Removes every head of the last (output-side) layer.
inline PrunePlan plan_remove_topmost(std::size_t layers, std::size_t heads, Site site = Site::encoder_self) {
    if (layers == 0 || heads == 0) throw std::invalid_argument("plan_remove_topmost: empty grid");
    PrunePlan plan = PrunePlan::keep_all(layers, heads, site);
    for (std::size_t h = 0; h < heads; ++h) plan.set(layers - 1, h, false);
    plan.provenance = PlanProvenance::topmost;
    return plan;
}

// Text format:
//   site <name>
//   provenance <threshold|topmost|manual> [tau]
//   grid <layers> <heads>
//   <layer> <head> <keep 0|1>     one line per cell
// Lines starting with '#' are comments.
inline void write_prune_plan(std::ostream& os, const PrunePlan& plan) {
    os << "# layer head keep\n";
    os << "site " << site_name(plan.site) << '\n';
    os << "provenance " << provenance_name(plan.provenance);
    if (plan.provenance == PlanProvenance::threshold) os << ' ' << plan.tau;
    os << '\n';
    os << "grid " << plan.layers << ' ' << plan.heads << '\n';
    for (std::size_t l = 0; l < plan.layers; ++l)
        for (std::size_t h = 0; h < plan.heads; ++h) os << l << ' ' << h << ' ' << (plan.at(l, h) ? 1 : 0) << '\n';
}

inline PrunePlan read_prune_plan(std::istream& is) {
    PrunePlan plan;
    std::vector<bool> seen;
    std::string line;
    std::size_t lineno = 0;
    auto fail = [&](const std::string& why) {
        throw std::invalid_argument("prune plan line " + std::to_string(lineno) + ": " + why);
    };
    while (std::getline(is, line)) {
        ++lineno;
        if (line.empty() || line[0] == '#') continue;
        std::istringstream ls(line);
        std::string first;
        ls >> first;
        if (first == "site") {
            std::string name;
            ls >> name;
            try {
                plan.site = parse_site(name);
            } catch (const std::invalid_argument& e) {
                fail(e.what());
            }
        } else if (first == "provenance") {
            std::string p;
            ls >> p;
            if (p == "threshold") {
                plan.provenance = PlanProvenance::threshold;
                if (!(ls >> plan.tau)) fail("threshold provenance needs tau");
            } else if (p == "topmost") {
                plan.provenance = PlanProvenance::topmost;
            } else if (p == "manual") {
                plan.provenance = PlanProvenance::manual;
            } else {
                fail("unknown provenance '" + p + "'");
            }
        } else if (first == "grid") {
            if (!(ls >> plan.layers >> plan.heads) || plan.layers == 0 || plan.heads == 0) fail("bad grid line");
            plan.keep.assign(plan.layers * plan.heads, true);
            seen.assign(plan.layers * plan.heads, false);
        } else {
            if (plan.keep.empty()) fail("cell before grid line");
            std::size_t layer = 0, head = 0;
            int keep = 0;
            try {
                layer = std::stoul(first);
            } catch (const std::exception&) {
                fail("unexpected token '" + first + "'");
            }
            if (!(ls >> head >> keep) || (keep != 0 && keep != 1)) fail("expected '<layer> <head> <0|1>'");
            if (layer >= plan.layers || head >= plan.heads) fail("cell outside grid");
            plan.set(layer, head, keep == 1);
            seen[layer * plan.heads + head] = true;
        }
    }
    if (plan.keep.empty()) throw std::invalid_argument("prune plan: missing grid line");
    for (std::size_t i = 0; i < seen.size(); ++i)
        if (!seen[i])
            throw std::invalid_argument("prune plan: no entry for layer " + std::to_string(i / plan.heads) +
                                        " head " + std::to_string(i % plan.heads));
    return plan;
}

}  // namespace sahr
