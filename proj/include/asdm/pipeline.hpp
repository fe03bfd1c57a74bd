#pragma once

#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "asdm/checkpoint.hpp"
#include "asdm/config.hpp"
#include "asdm/data.hpp"
#include "asdm/distill.hpp"
#include "asdm/profiler.hpp"
#include "asdm/sampler.hpp"

// ---------------------------------------------------------------------------
// Command implementations behind the CLI. Everything here is a plain function
// of (config, output directory) so tests can drive commands in-process.
// ---------------------------------------------------------------------------

namespace asdm {

namespace detail {

inline void ensure_dir(const std::string& dir) {
    std::error_code ec;
    std::filesystem::create_directories(dir, ec);
    if (ec) throw IoError(msg("cannot create output directory ", dir, ": ", ec.message()));
}

inline void write_text(const std::string& path, const std::string& content) {
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw IoError(msg("cannot open ", path, " for writing"));
    f << content;
    if (!f) throw IoError(msg("write failed for ", path));
}

inline void write_jsonl(const std::string& path, const std::vector<Json>& records) {
    std::ostringstream os;
    for (const Json& r : records) os << r.dump() << "\n";
    write_text(path, os.str());
}

}  // namespace detail

// probe weights are part of the experiment definition, pinned to the config
inline PerceptualProbe make_probe(const RunConfig& cfg) { return PerceptualProbe(cfg.distill.seed + 211); }

// --- profile ---------------------------------------------------------------

inline Json cmd_profile(const RunConfig& cfg, const UNetSpec* compare = nullptr) {
    ProfileReport rep = profile(cfg.architecture);
    Json j;
    j["profile"] = rep.to_json();
    if (compare) {
        ProfileReport other = profile(*compare, cfg.architecture.latent_size);
        SpeedupEstimate est = speedup_estimate(cfg.architecture, *compare, cfg.architecture.latent_size);
        j["compare"] = other.to_json();
        j["speedup"] = {{"unet_flop_reduction", est.unet_flop_reduction},
                        {"pipeline_reduction", est.pipeline_reduction}};
    }
    return j;
}

// --- train-teacher ---------------------------------------------------------

// Noise-prediction pretraining of the teacher at the configured architecture.
// Emits teacher.ckpt and a line-delimited metrics log.
inline std::vector<StepMetrics> cmd_train_teacher(const RunConfig& cfg, const std::string& out_dir) {
    detail::ensure_dir(out_dir);
    UNetModel model = UNetModel::build(cfg.architecture, cfg.seed);
    auto dataset = data::gen_dataset(cfg.data.seed, cfg.data.size);
    NoiseSchedule ns = NoiseSchedule::linear(cfg.architecture.time_steps);

    TrainState st(model, model, cfg.distill.seed);
    data::BatchIter it(&dataset, cfg.distill.batch_size, cfg.distill.seed + 1);
    std::vector<StepMetrics> log;
    std::vector<Json> lines;
    for (int i = 0; i < cfg.distill.teacher_steps; ++i) {
        StepMetrics m = train_noise_step(st, it.next(), ns, cfg.distill.lr);
        log.push_back(m);
        lines.push_back(m.to_json());
    }
    detail::write_jsonl(out_dir + "/teacher_metrics.jsonl", lines);
    save_checkpoint(model, out_dir + "/teacher.ckpt");
    return log;
}

// --- incubate --------------------------------------------------------------

struct IncubateArtifacts {
    IncubationResult result;
    std::vector<StepMetrics> stage1_log, stage2_log;
};

inline IncubateArtifacts cmd_incubate(const RunConfig& cfg, const std::string& out_dir) {
    if (cfg.teacher_checkpoint.empty())
        throw ConfigError("incubate requires teacher_checkpoint in the config");
    detail::ensure_dir(out_dir);
    UNetModel teacher = load_checkpoint(cfg.teacher_checkpoint);
    teacher.set_all_frozen(true);

    auto dataset = data::gen_dataset(cfg.data.seed, cfg.data.size);
    NoiseSchedule ns = NoiseSchedule::linear(cfg.architecture.time_steps);
    PerceptualProbe probe = make_probe(cfg);

    StageParams stage1{cfg.distill.stage1_steps, cfg.distill.weights, cfg.distill.lr,
                       cfg.distill.batch_size, cfg.distill.seed};
    StageParams stage2{cfg.distill.stage2_steps, cfg.distill.weights, cfg.distill.lr,
                       cfg.distill.batch_size, cfg.distill.seed + 1};

    IncubateArtifacts art;
    art.result = incubation_run(teacher, cfg.prune_plan, cfg.combination_plan, cfg.condconv, dataset, ns,
                                probe, stage1, stage2, cfg.seed,
                                [&](int stage, const StepMetrics& m) {
                                    (stage == 1 ? art.stage1_log : art.stage2_log).push_back(m);
                                });

    auto dump = [](const std::vector<StepMetrics>& log) {
        std::vector<Json> lines;
        for (const StepMetrics& m : log) lines.push_back(m.to_json());
        return lines;
    };
    detail::write_jsonl(out_dir + "/stage1_metrics.jsonl", dump(art.stage1_log));
    detail::write_jsonl(out_dir + "/stage2_metrics.jsonl", dump(art.stage2_log));
    save_checkpoint(art.result.stage1, out_dir + "/stage1.ckpt");
    save_checkpoint(art.result.stage2, out_dir + "/stage2.ckpt");
    Json report{{"divergence_before", art.result.divergence_before.to_json()},
                {"divergence_after", art.result.divergence_after.to_json()}};
    detail::write_text(out_dir + "/divergence.json", report.dump(2) + "\n");
    return art;
}

// --- sample ----------------------------------------------------------------

// 8-bit portable graymap of latent channel 0, min-max normalized
inline std::string latent_to_pgm(const Tensor& latent) {
    if (latent.ndim() != 3) throw ContractError(msg("preview expects a (C,H,W) latent, got ",
                                                    shape_str(latent.shape)));
    std::int64_t h = latent.dim(1), w = latent.dim(2), n = h * w;
    double lo = latent.data[0], hi = latent.data[0];
    for (std::int64_t i = 0; i < n; ++i) {
        lo = std::min(lo, latent.data[i]);
        hi = std::max(hi, latent.data[i]);
    }
    double range = hi > lo ? hi - lo : 1.0;
    std::string out = msg("P5\n", w, " ", h, "\n255\n");
    for (std::int64_t i = 0; i < n; ++i) {
        int v = static_cast<int>(std::lround((latent.data[i] - lo) / range * 255.0));
        out.push_back(static_cast<char>(std::clamp(v, 0, 255)));
    }
    return out;
}

inline std::string latent_to_f64le(const Tensor& latent) {
    std::string out;
    for (double v : latent.data) detail::put_f64(out, v);
    return out;
}

struct SampleArtifacts {
    SampleResult result;
    std::vector<std::vector<int>> tokens;
};

// Draws conditioning from the dataset generator, runs the configured schedule
// and writes sample_000.f64 (raw doubles), trace.jsonl and preview_000.pgm.
inline SampleArtifacts cmd_sample(const RunConfig& cfg, const std::string& out_dir) {
    detail::ensure_dir(out_dir);

    // schedule segments name checkpoint files; an empty list means one segment
    // over the teacher checkpoint
    SamplerSchedule sched;
    if (cfg.sampler.segments.empty()) {
        if (cfg.teacher_checkpoint.empty())
            throw ConfigError("sample requires teacher_checkpoint or explicit sampler.segments");
        sched.segments.push_back({cfg.teacher_checkpoint, cfg.sampler.total_steps});
    } else {
        sched.segments = cfg.sampler.segments;
        if (sched.total_steps() != cfg.sampler.total_steps)
            throw ConfigError(msg("sampler.segments cover ", sched.total_steps(), " steps, total_steps is ",
                                  cfg.sampler.total_steps));
    }

    std::vector<UNetModel> loaded;
    loaded.reserve(sched.segments.size());  // stable addresses for the registry
    ModelRegistry registry;
    for (const ScheduleSegment& seg : sched.segments) {
        if (!registry.count(seg.model)) {
            loaded.push_back(load_checkpoint(seg.model));
            registry[seg.model] = &loaded.back();
        }
    }

    const UNetModel& first = *registry.at(sched.segments.front().model);
    NoiseSchedule ns = NoiseSchedule::linear(first.spec.time_steps);

    auto cond = data::gen_dataset(cfg.data.seed, 1);
    SampleArtifacts art;
    art.tokens = {cond[0].tokens};
    art.result = ddim_sample(sched, registry, ns, art.tokens, cfg.sampler.guidance_scale, cfg.sampler.seed);

    // per-sample latent (batch of one)
    Tensor lat({first.spec.latent_channels, first.spec.latent_size, first.spec.latent_size});
    std::copy(art.result.latent.data.begin(), art.result.latent.data.begin() + lat.numel(),
              lat.data.begin());
    detail::write_text(out_dir + "/sample_000.f64", latent_to_f64le(lat));
    detail::write_text(out_dir + "/preview_000.pgm", latent_to_pgm(lat));
    std::vector<Json> trace;
    for (const TraceEntry& e : art.result.trace)
        trace.push_back({{"step", e.step}, {"timestep", e.timestep}, {"model", e.model},
                         {"latent_norm", e.latent_norm}});
    detail::write_jsonl(out_dir + "/trace.jsonl", trace);
    return art;
}

// --- inspect ---------------------------------------------------------------

inline std::string cmd_inspect(const std::string& ckpt_path) {
    UNetModel m = load_checkpoint(ckpt_path);
    std::ostringstream os;
    os << ckpt_path << ": format version " << kCheckpointVersion << ", " << m.order.size() << " tensors, "
       << m.param_count() << " parameters\n";
    for (const std::string& name : m.order) {
        const Param& p = m.param(name);
        os << "  " << name << "  " << shape_str(p.tensor().shape) << "  " << provenance_str(p.prov)
           << (p.frozen ? "  frozen" : "") << "\n";
    }
    return os.str();
}

// --- gen-data --------------------------------------------------------------

inline std::vector<data::Sample> cmd_gen_data(const RunConfig& cfg, const std::string& out_dir) {
    detail::ensure_dir(out_dir);
    auto dataset = data::gen_dataset(cfg.data.seed, cfg.data.size);
    std::string latents;
    std::vector<Json> lines;
    for (std::size_t i = 0; i < dataset.size(); ++i) {
        latents += latent_to_f64le(dataset[i].latent);
        lines.push_back({{"index", i}, {"tokens", dataset[i].tokens}});
    }
    detail::write_text(out_dir + "/latents.f64", latents);
    detail::write_jsonl(out_dir + "/tokens.jsonl", lines);
    detail::write_text(out_dir + "/preview_000.pgm", latent_to_pgm(dataset[0].latent));
    return dataset;
}

}  // namespace asdm
