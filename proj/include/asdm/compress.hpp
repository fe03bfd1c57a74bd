#pragma once

#include <algorithm>
#include <map>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include "asdm/unet.hpp"

namespace asdm {

// ---------------------------------------------------------------------------
// Layer pruning
// ---------------------------------------------------------------------------

// Removals are (block id, layer identity). Identity means the layer's index in
// the original unpruned spec (source_layer when set, position otherwise), so
// plans with disjoint entries commute and stay valid across repeated pruning.
struct PrunePlan {
    std::vector<std::pair<std::string, int>> removals;

    // keep only the first layer of the shallowest down and up blocks
    static PrunePlan default_shallow(const UNetSpec& s) {
        PrunePlan p;
        if (!s.down_blocks.empty()) {
            for (std::size_t li = 1; li < s.down_blocks.front().layers.size(); ++li)
                p.removals.emplace_back(down_block_id(0), static_cast<int>(li));
        }
        if (!s.up_blocks.empty()) {
            std::size_t last = s.up_blocks.size() - 1;
            for (std::size_t li = 1; li < s.up_blocks[last].layers.size(); ++li)
                p.removals.emplace_back(up_block_id(last), static_cast<int>(li));
        }
        return p;
    }
};

namespace detail {

inline int layer_identity(const LayerSpec& l, std::size_t position) {
    return l.source_layer >= 0 ? l.source_layer : static_cast<int>(position);
}

}  // namespace detail

inline UNetSpec prune_layers(const UNetSpec& spec, const PrunePlan& plan) {
    // validate the whole plan first so the error lists every offender
    std::vector<std::string> offenders;
    std::set<std::pair<std::string, int>> seen;
    for (const auto& [bid, li] : plan.removals) {
        if (!seen.insert({bid, li}).second) {
            offenders.push_back(msg(bid, ".l", li, " (duplicate)"));
            continue;
        }
        const BlockSpec* b = find_block(spec, bid);
        if (!b) {
            offenders.push_back(msg(bid, ".l", li, " (no such block)"));
            continue;
        }
        bool found = false;
        for (std::size_t p = 0; p < b->layers.size(); ++p)
            if (detail::layer_identity(b->layers[p], p) == li) found = true;
        if (!found) offenders.push_back(msg(bid, ".l", li, " (block has ", b->layers.size(), " layers)"));
    }
    if (!offenders.empty()) {
        std::string list;
        for (std::size_t i = 0; i < offenders.size(); ++i) list += (i ? ", " : "") + offenders[i];
        throw ConfigError("invalid prune plan entries: " + list);
    }

    UNetSpec out = spec;
    for (const std::string& bid : block_ids(out)) {
        BlockSpec* b = find_block(out, bid);
        std::vector<LayerSpec> kept;
        for (std::size_t p = 0; p < b->layers.size(); ++p) {
            int id = detail::layer_identity(b->layers[p], p);
            bool removed = false;
            for (const auto& [rb, rl] : plan.removals)
                if (rb == bid && rl == id) removed = true;
            if (removed) continue;
            LayerSpec l = b->layers[p];
            // record identity only once the layer has moved
            if (id != static_cast<int>(kept.size())) l.source_layer = id;
            kept.push_back(l);
        }
        if (bid == "mid" && kept.empty())
            throw ConfigError("prune plan would empty the mid block; it must keep at least one layer");
        b->layers = std::move(kept);
    }
    resolve_channels(out);
    validate_spec(out);
    return out;
}

// ---------------------------------------------------------------------------
// Weight transplant: initialize a pruned student from the teacher
// ---------------------------------------------------------------------------

struct TransplantReport {
    std::vector<std::string> fresh;      // freshly initialized (no teacher source or shape mismatch)
    std::vector<std::string> inherited;  // copied from the teacher bitwise
};

namespace detail {

// student parameter name -> teacher parameter name, following source_layer
inline std::string teacher_param_name(const UNetSpec& student_spec, const std::string& name) {
    auto dot = name.find('.');
    if (dot == std::string::npos) return name;
    std::string bid = name.substr(0, dot);
    const BlockSpec* b = find_block(student_spec, bid);
    if (!b) return name;  // aux parameter
    if (name.compare(dot, 2, ".l") != 0) return name;  // block resample conv
    auto dot2 = name.find('.', dot + 2);
    if (dot2 == std::string::npos) return name;
    int li = std::stoi(name.substr(dot + 2, dot2 - dot - 2));
    if (li < 0 || li >= static_cast<int>(b->layers.size())) return name;
    int src = layer_identity(b->layers[li], static_cast<std::size_t>(li));
    if (src == li) return name;
    return bid + ".l" + std::to_string(src) + name.substr(dot2);
}

}  // namespace detail

inline UNetModel transplant_weights(const UNetSpec& pruned_spec, const UNetModel& teacher, std::uint64_t seed,
                                    TransplantReport* report = nullptr) {
    UNetModel student = UNetModel::build(pruned_spec, seed);
    for (const std::string& name : student.order) {
        Param& p = student.param(name);
        std::string tname = detail::teacher_param_name(student.spec, name);
        if (teacher.has_param(tname) && teacher.param(tname).tensor().shape == p.tensor().shape) {
            p.tensor() = teacher.param(tname).tensor();
            p.prov = Provenance::teacher;
            if (report) report->inherited.push_back(name);
        } else {
            p.prov = Provenance::fresh;
            if (report) report->fresh.push_back(name);
        }
    }
    return student;
}

// ---------------------------------------------------------------------------
// Recombination: stitch teacher and student blocks into one model
// ---------------------------------------------------------------------------

struct CombinationPlan {
    std::map<std::string, std::string> assignments;  // block id -> "teacher" | "student"
    bool freeze_teacher_part = false;

    static CombinationPlan all_teacher(const UNetSpec& s, bool frozen = false) {
        CombinationPlan p;
        for (const std::string& id : block_ids(s)) p.assignments[id] = "teacher";
        p.freeze_teacher_part = frozen;
        return p;
    }
    static CombinationPlan all_student(const UNetSpec& s) {
        CombinationPlan p;
        for (const std::string& id : block_ids(s)) p.assignments[id] = "student";
        return p;
    }
    // student supplies the shallow blocks, teacher the deep half plus mid
    static CombinationPlan shallow_student(const UNetSpec& s, bool frozen) {
        CombinationPlan p;
        std::size_t nd = s.down_blocks.size(), nu = s.up_blocks.size();
        for (std::size_t i = 0; i < nd; ++i)
            p.assignments[down_block_id(i)] = (i + 1 < nd) ? "student" : "teacher";
        p.assignments["mid"] = "teacher";
        for (std::size_t i = 0; i < nu; ++i) p.assignments[up_block_id(i)] = (i == 0) ? "teacher" : "student";
        p.freeze_teacher_part = frozen;
        return p;
    }
};

struct FreezeMask {
    std::map<std::string, bool> values;  // one entry per parameter

    bool at(const std::string& name) const {
        auto it = values.find(name);
        if (it == values.end()) throw ContractError(msg("freeze mask has no entry for ", name));
        return it->second;
    }
    void apply(UNetModel& m) const {
        if (values.size() != m.params.size())
            throw ContractError(msg("freeze mask covers ", values.size(), " parameters, model has ",
                                    m.params.size()));
        for (const auto& [name, frozen] : values) m.set_frozen(name, frozen);
    }
};

inline std::pair<UNetModel, FreezeMask> recombine(const UNetModel& teacher, const UNetModel& student,
                                                  const CombinationPlan& plan) {
    std::vector<std::string> ids = block_ids(teacher.spec);
    if (block_ids(student.spec) != ids)
        throw ConfigError("teacher and student block layouts differ; cannot recombine");
    for (const std::string& id : ids) {
        auto it = plan.assignments.find(id);
        if (it == plan.assignments.end()) throw ConfigError(msg("combination plan misses block ", id));
        if (it->second != "teacher" && it->second != "student")
            throw ConfigError(msg("combination plan block ", id, ": source must be teacher or student, got ",
                                  it->second));
    }
    for (const auto& [id, src] : plan.assignments)
        if (std::find(ids.begin(), ids.end(), id) == ids.end())
            throw ConfigError(msg("combination plan names unknown block ", id));

    auto source_model = [&](const std::string& id) -> const UNetModel& {
        return plan.assignments.at(id) == "teacher" ? teacher : student;
    };

    // architecture: each block verbatim from its source, everything else teacher
    UNetSpec spec = teacher.spec;
    for (const std::string& id : ids) *find_block(spec, id) = *find_block(source_model(id).spec, id);
    UNetSpec declared = spec;  // per-layer channels as the sources declared them
    resolve_channels(spec);

    // boundary check: resolving must reproduce the channels each source block
    // was built with, otherwise adjacent blocks disagree at the seam
    std::string prev = "stem";
    for (const std::string& id : ids) {
        const BlockSpec* want = find_block(declared, id);
        const BlockSpec* got = find_block(spec, id);
        for (std::size_t li = 0; li < want->layers.size(); ++li) {
            const ResNetUnitSpec& a = want->layers[li].resnet;
            const ResNetUnitSpec& b = got->layers[li].resnet;
            if (a.in_ch != b.in_ch || a.out_ch != b.out_ch)
                throw ShapeError(msg("block boundary mismatch between ", prev, " and ", id, ": ", id, ".l", li,
                                     " was built for ", a.in_ch, "->", a.out_ch, " channels but receives ",
                                     b.in_ch, "->", b.out_ch));
        }
        if (!want->layers.empty()) prev = id;
    }
    validate_spec(spec);

    UNetModel combined;
    combined.spec = spec;
    FreezeMask mask;
    for (const ParamInfo& info : enumerate_params(spec)) {
        bool from_teacher = info.block_id == "aux" || plan.assignments.at(info.block_id) == "teacher";
        const UNetModel& src = from_teacher ? teacher : student;
        if (!src.has_param(info.name))
            throw ContractError(msg("recombine: ", from_teacher ? "teacher" : "student", " has no parameter ",
                                    info.name));
        const Param& sp = src.param(info.name);
        if (!(sp.tensor().shape == info.shape))
            throw ShapeError(msg("recombine: parameter ", info.name, " is ", shape_str(sp.tensor().shape),
                                 " in the ", from_teacher ? "teacher" : "student", ", combined model needs ",
                                 shape_str(info.shape)));
        Param p;
        p.info = info;
        p.prov = from_teacher ? Provenance::teacher : Provenance::student;
        p.frozen = from_teacher && plan.freeze_teacher_part;
        p.var = make_var(sp.tensor(), !p.frozen);
        mask.values[info.name] = p.frozen;
        combined.order.push_back(info.name);
        combined.params.emplace(info.name, std::move(p));
    }
    return {std::move(combined), std::move(mask)};
}

// Walk per-parameter provenance back into the plan that produced the model.
inline CombinationPlan recover_plan(const UNetModel& m) {
    CombinationPlan plan;
    bool any_teacher = false, all_teacher_frozen = true;
    for (const std::string& id : block_ids(m.spec)) {
        int teacher_n = 0, student_n = 0, total = 0;
        for (const std::string& name : m.order) {
            const Param& p = m.param(name);
            if (p.info.block_id != id) continue;
            ++total;
            if (p.prov == Provenance::teacher) {
                ++teacher_n;
                any_teacher = true;
                if (!p.frozen) all_teacher_frozen = false;
            } else if (p.prov == Provenance::student) {
                ++student_n;
            }
        }
        if (total == 0 || teacher_n + student_n != total || (teacher_n > 0 && student_n > 0))
            throw ContractError(msg("block ", id, " has mixed or missing provenance (", teacher_n,
                                    " teacher / ", student_n, " student of ", total, ")"));
        plan.assignments[id] = teacher_n == total ? "teacher" : "student";
    }
    plan.freeze_teacher_part = any_teacher && all_teacher_frozen;
    return plan;
}

// ---------------------------------------------------------------------------
// CondConv inheritance: turn a block's 3x3 convs into multi-expert units
// ---------------------------------------------------------------------------

inline UNetModel inherit_condconv(const UNetModel& teacher, const std::string& block_id, int n_experts,
                                  std::uint64_t seed) {
    if (n_experts < 1) throw ConfigError(msg("n_experts must be >= 1, got ", n_experts));
    UNetSpec spec = teacher.spec;
    BlockSpec* block = find_block(spec, block_id);
    if (!block) throw ConfigError(msg("no block named ", block_id));
    CondConvSpec cc;
    cc.n_experts = n_experts;
    for (LayerSpec& l : block->layers) l.resnet.condconv = cc;
    resolve_channels(spec);
    validate_spec(spec);

    UNetModel out = UNetModel::build(spec, seed);
    std::size_t L = block->layers.size();
    for (const std::string& name : out.order) {
        Param& p = out.param(name);
        // unchanged parameters copy across by name
        if (teacher.has_param(name) && teacher.param(name).tensor().shape == p.tensor().shape) {
            p.tensor() = teacher.param(name).tensor();
            p.prov = Provenance::teacher;
            continue;
        }
        auto epos = name.rfind(".experts");
        if (epos != std::string::npos && epos + 8 == name.size()) {
            // name is "<block>.l<li>.res.conv<k>.experts"
            auto lpos = name.find(".l");
            auto ldot = name.find('.', lpos + 2);
            int li = std::stoi(name.substr(lpos + 2, ldot - lpos - 2));
            std::string conv_tail = name.substr(ldot, epos - ldot);  // ".res.conv<k>"
            const Tensor& ex = p.tensor();                           // (E, O, I, 3, 3)
            std::int64_t slice = ex.numel() / ex.dim(0);
            bool all_inherited = true;
            for (int e = 0; e < n_experts; ++e) {
                int src_layer = (li + e) % static_cast<int>(L);
                std::string src = block_id + ".l" + std::to_string(src_layer) + conv_tail + ".weight";
                const Tensor* sw = teacher.has_param(src) ? &teacher.param(src).tensor() : nullptr;
                double* dst = p.tensor().data.data() + e * slice;
                if (sw && sw->numel() == slice) {
                    std::copy(sw->data.begin(), sw->data.end(), dst);
                } else {
                    // shape mismatch across layers: keep the seeded init, damped
                    for (std::int64_t i = 0; i < slice; ++i) dst[i] *= 0.1;
                    all_inherited = false;
                }
            }
            p.prov = all_inherited ? Provenance::teacher : Provenance::fresh;
            continue;
        }
        // routing parameters keep their seeded init
        p.prov = Provenance::fresh;
    }
    return out;
}

}  // namespace asdm
