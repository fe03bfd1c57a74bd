#pragma once

#include <cmath>
#include <map>
#include <string>
#include <vector>

#include "asdm/profiler.hpp"
#include "asdm/unet.hpp"

namespace asdm {

// ---------------------------------------------------------------------------
// Forward-process noise schedule (linear betas)
// ---------------------------------------------------------------------------

struct NoiseSchedule {
    int T = 0;
    std::vector<double> betas;
    std::vector<double> alphas;
    std::vector<double> alpha_bar;  // cumulative product, strictly decreasing

    static NoiseSchedule linear(int T = 1000, double beta_start = 1e-4, double beta_end = 2e-2) {
        if (T < 1) throw ConfigError(msg("noise schedule needs T >= 1, got ", T));
        NoiseSchedule s;
        s.T = T;
        s.betas.resize(T);
        s.alphas.resize(T);
        s.alpha_bar.resize(T);
        double prod = 1.0;
        for (int t = 0; t < T; ++t) {
            double b = T == 1 ? beta_start : beta_start + (beta_end - beta_start) * t / (T - 1);
            if (b <= 0.0 || b >= 1.0) throw ConfigError(msg("beta_", t, " = ", b, " outside (0, 1)"));
            s.betas[t] = b;
            s.alphas[t] = 1.0 - b;
            prod *= s.alphas[t];
            s.alpha_bar[t] = prod;
        }
        return s;
    }
};

// ---------------------------------------------------------------------------
// Multi-model step schedule
// ---------------------------------------------------------------------------

struct ScheduleSegment {
    std::string model;  // handle resolved via the model registry
    int n_steps = 0;
};

struct SamplerSchedule {
    std::vector<ScheduleSegment> segments;

    int total_steps() const {
        int n = 0;
        for (const auto& seg : segments) n += seg.n_steps;
        return n;
    }
    void validate() const {
        if (segments.empty()) throw ConfigError("sampler schedule has no segments");
        for (const auto& seg : segments)
            if (seg.n_steps < 1)
                throw ConfigError(msg("schedule segment for ", seg.model, " has n_steps = ", seg.n_steps));
    }
};

// Earliest inference step first; step_index counts from the start of sampling.
inline const std::string& select_model(const SamplerSchedule& sched, int step_index) {
    sched.validate();
    if (step_index < 0 || step_index >= sched.total_steps())
        throw ContractError(msg("step index ", step_index, " outside [0, ", sched.total_steps(), ")"));
    int acc = 0;
    for (const auto& seg : sched.segments) {
        acc += seg.n_steps;
        if (step_index < acc) return seg.model;
    }
    throw ContractError("unreachable: schedule exhausted");  // guarded by the range check
}

// ---------------------------------------------------------------------------
// DDIM sampling with classifier-free guidance
// ---------------------------------------------------------------------------

struct TraceEntry {
    int step = 0;
    int timestep = 0;
    std::string model;
    double latent_norm = 0.0;
};

struct SampleResult {
    Tensor latent;
    std::vector<TraceEntry> trace;
};

using ModelRegistry = std::map<std::string, const UNetModel*>;

namespace detail {

inline const UNetModel& resolve_model(const ModelRegistry& models, const std::string& handle) {
    auto it = models.find(handle);
    if (it == models.end() || !it->second) throw ConfigError(msg("schedule names unknown model ", handle));
    return *it->second;
}

}  // namespace detail

// Timestep subsequence for S inference steps: t_i = i*T/S, used in descending
// order (largest t first).
inline std::vector<int> ddim_timesteps(int T, int S) {
    std::vector<int> ts(S);
    for (int i = 0; i < S; ++i) ts[i] = static_cast<int>((static_cast<std::int64_t>(i) * T) / S);
    return ts;
}

inline SampleResult ddim_sample(const SamplerSchedule& sched, const ModelRegistry& models,
                                const NoiseSchedule& ns, const std::vector<std::vector<int>>& cond_tokens,
                                double guidance_scale, std::uint64_t seed, double eta = 0.0) {
    sched.validate();
    if (eta != 0.0) throw ConfigError(msg("only deterministic DDIM (eta = 0) is supported, got eta = ", eta));
    if (guidance_scale < 0.0) throw ConfigError(msg("guidance scale must be >= 0, got ", guidance_scale));

    const UNetModel& first = detail::resolve_model(models, sched.segments.front().model);
    for (const auto& seg : sched.segments) {
        const UNetModel& m = detail::resolve_model(models, seg.model);
        if (m.spec.latent_channels != first.spec.latent_channels ||
            m.spec.latent_size != first.spec.latent_size)
            throw ShapeError(msg("model ", seg.model, " latent shape ", m.spec.latent_channels, "x",
                                 m.spec.latent_size, " differs from ", sched.segments.front().model));
        if (ns.T != m.spec.time_steps)
            throw ConfigError(msg("noise schedule T=", ns.T, " does not match model ", seg.model,
                                  " (time_steps=", m.spec.time_steps, ")"));
    }

    std::int64_t N = static_cast<std::int64_t>(cond_tokens.size());
    if (N < 1) throw ContractError("ddim_sample needs at least one token sequence");

    int S = sched.total_steps();
    std::vector<int> ts = ddim_timesteps(ns.T, S);

    Rng rng(seed);
    Tensor x = Tensor::randn({N, first.spec.latent_channels, first.spec.latent_size, first.spec.latent_size},
                             rng);

    SampleResult res;
    for (int step = 0; step < S; ++step) {
        int t = ts[S - 1 - step];
        const std::string& handle = select_model(sched, step);
        const UNetModel& model = detail::resolve_model(models, handle);

        Tensor eps_c = model.forward(x, t, cond_tokens)->value;
        Tensor eps_hat = eps_c;
        if (guidance_scale != 1.0) {
            // s == 1 collapses to the conditional branch exactly, so the
            // unconditional forward is skipped in that case
            Tensor eps_u = model.forward(x, t, null_tokens(model.spec, N))->value;
            for (std::int64_t i = 0; i < eps_hat.numel(); ++i)
                eps_hat.data[i] = eps_u.data[i] + guidance_scale * (eps_c.data[i] - eps_u.data[i]);
        }

        double ab_t = ns.alpha_bar[t];
        int t_prev = S - 1 - step > 0 ? ts[S - 2 - step] : -1;
        double ab_prev = t_prev >= 0 ? ns.alpha_bar[t_prev] : 1.0;
        double sa = std::sqrt(ab_t), sn = std::sqrt(1.0 - ab_t);
        double sap = std::sqrt(ab_prev), snp = std::sqrt(1.0 - ab_prev);
        double norm2 = 0.0;
        for (std::int64_t i = 0; i < x.numel(); ++i) {
            double x0 = (x.data[i] - sn * eps_hat.data[i]) / sa;
            x.data[i] = sap * x0 + snp * eps_hat.data[i];
            norm2 += x.data[i] * x.data[i];
        }
        if (!std::isfinite(norm2))
            throw DivergenceError(msg("latent became non-finite at sampling step ", step, " (timestep ", t, ")"));
        for (double v : x.data)
            if (!std::isfinite(v))
                throw DivergenceError(msg("latent became non-finite at sampling step ", step, " (timestep ", t,
                                          ")"));
        res.trace.push_back({step, t, handle, std::sqrt(norm2)});
    }
    res.latent = std::move(x);
    return res;
}

// ---------------------------------------------------------------------------
// Cost accounting: FLOPs of a full sampling run
// ---------------------------------------------------------------------------

inline double schedule_cost(const SamplerSchedule& sched, const std::map<std::string, ProfileReport>& reports,
                            double guidance_scale) {
    sched.validate();
    double factor = guidance_scale != 1.0 ? 2.0 : 1.0;
    double total = 0.0;
    for (const auto& seg : sched.segments) {
        auto it = reports.find(seg.model);
        if (it == reports.end()) throw ConfigError(msg("no profile report for model ", seg.model));
        total += seg.n_steps * it->second.total_flops.total() * factor;
    }
    return total;
}

}  // namespace asdm
