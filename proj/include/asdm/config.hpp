#pragma once

#include <set>
#include <string>
#include <vector>

#include "asdm/compress.hpp"
#include "asdm/distill.hpp"
#include "asdm/sampler.hpp"
#include "asdm/unet.hpp"

namespace asdm {

// ---------------------------------------------------------------------------
// Run configuration: one JSON document describes one reproducible experiment.
// Parsing is strict: every unknown key is rejected with its full path, so a
// misspelled setting can never silently fall back to a default.
// ---------------------------------------------------------------------------

namespace detail {

inline void check_keys(const Json& j, const std::string& path, const std::set<std::string>& allowed) {
    if (!j.is_object()) throw ConfigError(msg("config: ", path, " must be an object"));
    for (const auto& [key, value] : j.items()) {
        (void)value;
        if (!allowed.count(key)) throw ConfigError(msg("config: unknown key ", path, ".", key));
    }
}

inline void check_spec_keys(const Json& j, const std::string& path) {
    check_keys(j, path,
               {"down_blocks", "mid_block", "up_blocks", "base_channels", "channel_multipliers",
                "latent_channels", "latent_size", "cond_dim", "cond_seq_len", "cond_vocab",
                "time_embed_dim", "norm_groups", "time_steps"});
    auto check_block = [&](const Json& b, const std::string& bpath) {
        check_keys(b, bpath, {"layers", "resample"});
        if (b.contains("layers")) {
            int li = 0;
            for (const Json& l : b.at("layers")) {
                std::string lpath = msg(bpath, ".layers[", li++, "]");
                check_keys(l, lpath, {"in_ch", "out_ch", "condconv", "transformer", "source_layer"});
                if (l.contains("condconv"))
                    check_keys(l["condconv"], lpath + ".condconv", {"n_experts", "expert0_logit_bias"});
                if (l.contains("transformer"))
                    check_keys(l["transformer"], lpath + ".transformer", {"heads", "head_dim"});
            }
        }
    };
    if (j.contains("down_blocks")) {
        int i = 0;
        for (const Json& b : j.at("down_blocks")) check_block(b, msg(path, ".down_blocks[", i++, "]"));
    }
    if (j.contains("mid_block")) check_block(j.at("mid_block"), path + ".mid_block");
    if (j.contains("up_blocks")) {
        int i = 0;
        for (const Json& b : j.at("up_blocks")) check_block(b, msg(path, ".up_blocks[", i++, "]"));
    }
}

}  // namespace detail

struct SamplerConfig {
    int total_steps = 25;
    double guidance_scale = 8.0;  // classifier-free guidance default
    std::vector<ScheduleSegment> segments;  // empty: single segment, model "default"
    std::uint64_t seed = 0;
};

struct DistillConfig {
    LossWeights weights;
    double lr = 1e-3;
    int teacher_steps = 2000;
    int stage1_steps = 400;
    int stage2_steps = 2000;
    int batch_size = 1;  // single-core budget: smallest batch keeps steps cheap
    std::uint64_t seed = 0;
};

struct DataConfig {
    std::uint64_t seed = 0;
    int size = 64;
    int batch = 2;
};

struct RunConfig {
    UNetSpec architecture = UNetSpec::desk_default();
    PrunePlan prune_plan = PrunePlan::default_shallow(architecture);
    CombinationPlan combination_plan = CombinationPlan::shallow_student(architecture, true);
    CondConvParams condconv;
    SamplerConfig sampler;
    DistillConfig distill;
    DataConfig data;
    std::uint64_t seed = 0;  // model build / transplant seed
    std::string teacher_checkpoint;  // required by incubate and sample

    void validate() const {
        validate_spec(architecture);
        distill.weights.validate();
        if (distill.lr <= 0) throw ConfigError("config: distill.lr must be positive");
        if (distill.teacher_steps < 0 || distill.stage1_steps < 0 || distill.stage2_steps < 0)
            throw ConfigError("config: distill step counts must be nonnegative");
        if (distill.batch_size < 1) throw ConfigError("config: distill.batch_size must be >= 1");
        if (data.size < 1) throw ConfigError("config: data.size must be >= 1");
        if (data.batch < 1 || data.batch > data.size)
            throw ConfigError(msg("config: data.batch must be in [1, ", data.size, "]"));
        if (sampler.total_steps < 1) throw ConfigError("config: sampler.total_steps must be >= 1");
        if (sampler.guidance_scale < 0) throw ConfigError("config: sampler.guidance_scale must be >= 0");
        if (condconv.enabled) {
            if (condconv.n_experts < 1) throw ConfigError("config: condconv.n_experts must be >= 1");
            for (const std::string& b : condconv.target_blocks)
                if (!find_block(architecture, b))
                    throw ConfigError(msg("config: condconv.target_blocks names unknown block ", b));
        }
        for (const auto& [bid, li] : prune_plan.removals)
            (void)li, (void)bid;  // plan contents validated by prune_layers at use
    }

    Json to_json() const {
        Json j;
        j["architecture"] = asdm::to_json(architecture);
        Json removals = Json::array();
        for (const auto& [bid, li] : prune_plan.removals) removals.push_back(Json::array({bid, li}));
        j["prune_plan"] = {{"removals", removals}};
        j["combination_plan"] = {{"assignments", combination_plan.assignments},
                                 {"freeze_teacher_part", combination_plan.freeze_teacher_part}};
        j["condconv"] = {{"enabled", condconv.enabled},
                         {"n_experts", condconv.n_experts},
                         {"target_blocks", condconv.target_blocks}};
        Json segs = Json::array();
        for (const ScheduleSegment& s : sampler.segments)
            segs.push_back({{"model", s.model}, {"n_steps", s.n_steps}});
        j["sampler"] = {{"total_steps", sampler.total_steps},
                        {"guidance_scale", sampler.guidance_scale},
                        {"segments", segs},
                        {"seed", sampler.seed}};
        j["distill"] = {{"weights",
                         {{"task", distill.weights.lambda_task},
                          {"out", distill.weights.lambda_out},
                          {"mid", distill.weights.lambda_mid},
                          {"feat", distill.weights.lambda_feat}}},
                        {"lr", distill.lr},
                        {"teacher_steps", distill.teacher_steps},
                        {"stage1_steps", distill.stage1_steps},
                        {"stage2_steps", distill.stage2_steps},
                        {"batch_size", distill.batch_size},
                        {"seed", distill.seed}};
        j["data"] = {{"seed", data.seed}, {"size", data.size}, {"batch", data.batch}};
        j["seed"] = seed;
        j["teacher_checkpoint"] = teacher_checkpoint;
        return j;
    }

    static RunConfig from_json(const Json& j) {
        detail::check_keys(j, "$",
                           {"architecture", "prune_plan", "combination_plan", "condconv", "sampler",
                            "distill", "data", "seed", "teacher_checkpoint"});
        RunConfig c;
        if (j.contains("architecture")) {
            detail::check_spec_keys(j["architecture"], "$.architecture");
            c.architecture = spec_from_json(j["architecture"]);
            // defaults for the dependent plans track the configured architecture
            c.prune_plan = PrunePlan::default_shallow(c.architecture);
            c.combination_plan = CombinationPlan::shallow_student(c.architecture, true);
        }
        if (j.contains("prune_plan")) {
            detail::check_keys(j["prune_plan"], "$.prune_plan", {"removals"});
            c.prune_plan.removals.clear();
            for (const Json& r : j["prune_plan"].value("removals", Json::array())) {
                if (!r.is_array() || r.size() != 2 || !r[0].is_string() || !r[1].is_number_integer())
                    throw ConfigError("config: $.prune_plan.removals entries must be [block_id, layer] pairs");
                c.prune_plan.removals.emplace_back(r[0].get<std::string>(), r[1].get<int>());
            }
        }
        if (j.contains("combination_plan")) {
            detail::check_keys(j["combination_plan"], "$.combination_plan",
                               {"assignments", "freeze_teacher_part"});
            if (j["combination_plan"].contains("assignments")) {
                c.combination_plan.assignments.clear();
                for (const auto& [bid, src] : j["combination_plan"]["assignments"].items()) {
                    if (!src.is_string())
                        throw ConfigError(msg("config: $.combination_plan.assignments.", bid,
                                              " must be \"teacher\" or \"student\""));
                    c.combination_plan.assignments[bid] = src.get<std::string>();
                }
            }
            c.combination_plan.freeze_teacher_part =
                j["combination_plan"].value("freeze_teacher_part", c.combination_plan.freeze_teacher_part);
        }
        if (j.contains("condconv")) {
            detail::check_keys(j["condconv"], "$.condconv", {"enabled", "n_experts", "target_blocks"});
            c.condconv.enabled = j["condconv"].value("enabled", false);
            c.condconv.n_experts = j["condconv"].value("n_experts", 2);
            c.condconv.target_blocks =
                j["condconv"].value("target_blocks", std::vector<std::string>{});
        }
        if (j.contains("sampler")) {
            detail::check_keys(j["sampler"], "$.sampler",
                               {"total_steps", "guidance_scale", "segments", "seed"});
            c.sampler.total_steps = j["sampler"].value("total_steps", 25);
            c.sampler.guidance_scale = j["sampler"].value("guidance_scale", 8.0);
            c.sampler.seed = j["sampler"].value("seed", std::uint64_t{0});
            c.sampler.segments.clear();
            if (j["sampler"].contains("segments")) {
                int i = 0;
                for (const Json& s : j["sampler"]["segments"]) {
                    detail::check_keys(s, msg("$.sampler.segments[", i++, "]"), {"model", "n_steps"});
                    ScheduleSegment seg;
                    seg.model = s.value("model", std::string{});
                    seg.n_steps = s.value("n_steps", 0);
                    c.sampler.segments.push_back(seg);
                }
            }
        }
        if (j.contains("distill")) {
            detail::check_keys(j["distill"], "$.distill",
                               {"weights", "lr", "teacher_steps", "stage1_steps", "stage2_steps",
                                "batch_size", "seed"});
            if (j["distill"].contains("weights")) {
                detail::check_keys(j["distill"]["weights"], "$.distill.weights",
                                   {"task", "out", "mid", "feat"});
                c.distill.weights.lambda_task = j["distill"]["weights"].value("task", 1.0);
                c.distill.weights.lambda_out = j["distill"]["weights"].value("out", 1.0);
                c.distill.weights.lambda_mid = j["distill"]["weights"].value("mid", 0.5);
                c.distill.weights.lambda_feat = j["distill"]["weights"].value("feat", 0.1);
            }
            c.distill.lr = j["distill"].value("lr", 1e-3);
            c.distill.teacher_steps = j["distill"].value("teacher_steps", 2000);
            c.distill.stage1_steps = j["distill"].value("stage1_steps", 400);
            c.distill.stage2_steps = j["distill"].value("stage2_steps", 2000);
            c.distill.batch_size = j["distill"].value("batch_size", 1);
            c.distill.seed = j["distill"].value("seed", std::uint64_t{0});
        }
        if (j.contains("data")) {
            detail::check_keys(j["data"], "$.data", {"seed", "size", "batch"});
            c.data.seed = j["data"].value("seed", std::uint64_t{0});
            c.data.size = j["data"].value("size", 64);
            c.data.batch = j["data"].value("batch", 2);
        }
        c.seed = j.value("seed", std::uint64_t{0});
        c.teacher_checkpoint = j.value("teacher_checkpoint", std::string{});
        c.validate();
        return c;
    }
};

}  // namespace asdm
