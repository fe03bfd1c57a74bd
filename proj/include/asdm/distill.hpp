#pragma once

#include <cmath>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "asdm/compress.hpp"
#include "asdm/data.hpp"
#include "asdm/sampler.hpp"
#include "asdm/unet.hpp"

namespace asdm {

// ---------------------------------------------------------------------------
// Loss terms
// ---------------------------------------------------------------------------

struct LossWeights {
    double lambda_task = 1.0;
    double lambda_out = 1.0;
    double lambda_mid = 0.5;
    double lambda_feat = 0.1;

    void validate() const {
        if (lambda_task < 0 || lambda_out < 0 || lambda_mid < 0 || lambda_feat < 0)
            throw ConfigError("loss weights must be nonnegative");
        if (lambda_task == 0 && lambda_out == 0 && lambda_mid == 0 && lambda_feat == 0)
            throw ConfigError("at least one loss weight must be positive");
    }
};

inline Var task_loss(const Var& pred_noise, const Var& true_noise) { return mse(pred_noise, true_noise); }

inline Var output_kd_loss(const Var& student_pred, const Var& teacher_pred) {
    return mse(student_pred, teacher_pred);
}

inline Var midblock_loss(const Var& student_mid, const Var& teacher_mid) {
    if (!(student_mid->value.shape == teacher_mid->value.shape))
        throw ShapeError(msg("mid-block features misaligned: student ", shape_str(student_mid->value.shape),
                             " vs teacher ", shape_str(teacher_mid->value.shape)));
    return mse(student_mid, teacher_mid);
}

// ---------------------------------------------------------------------------
// Frozen multi-stage perceptual probe
// ---------------------------------------------------------------------------

class PerceptualProbe {
public:
    std::vector<double> stage_weights;  // per-stage contribution, default 1

    PerceptualProbe(std::uint64_t seed, int in_ch = 4, int base_ch = 8, int n_stages = 4) {
        if (n_stages < 1) throw ConfigError(msg("probe needs >= 1 stage, got ", n_stages));
        Rng rng(seed);
        int ic = in_ch;
        for (int s = 0; s < n_stages; ++s) {
            int oc = base_ch << s;
            Shape ws{oc, ic, 3, 3};
            double gain = 1.0 / std::sqrt(static_cast<double>(ic) * 9);
            w_.push_back(make_var(Tensor::randn(ws, rng, gain), false));  // frozen
            b_.push_back(make_var(Tensor::zeros({oc}), false));
            ic = oc;
        }
        stage_weights.assign(static_cast<std::size_t>(n_stages), 1.0);
    }

    int stages() const { return static_cast<int>(w_.size()); }

    std::vector<Var> features(const Var& x) const {
        std::vector<Var> taps;
        Var h = x;
        for (std::size_t s = 0; s < w_.size(); ++s) {
            h = silu(conv2d(h, w_[s], b_[s], 2, 1));
            taps.push_back(h);
        }
        return taps;
    }

    const Tensor& stage_kernel(int s) const { return w_.at(s)->value; }

private:
    std::vector<Var> w_, b_;
};

inline Var perceptual_loss(const PerceptualProbe& probe, const Var& student_out, const Var& teacher_out) {
    if (!(student_out->value.shape == teacher_out->value.shape))
        throw ShapeError(msg("perceptual inputs differ: ", shape_str(student_out->value.shape), " vs ",
                             shape_str(teacher_out->value.shape)));
    std::vector<Var> fs = probe.features(student_out);
    std::vector<Var> ft = probe.features(teacher_out);
    Var total;
    for (int s = 0; s < probe.stages(); ++s) {
        double w = probe.stage_weights[s];
        if (w == 0.0) continue;
        Var term = scale(mse(fs[s], ft[s]), w);
        total = total ? add(total, term) : term;
    }
    if (!total) total = make_var(Tensor::scalar(0.0), false);
    return total;
}

struct LossTerms {
    Var task, out, mid, feat;
};

// lambda_task*L_task + lambda_out*L_out + lambda_mid*L_mid + lambda_feat*L_feat;
// zero-weight terms are skipped entirely (no gradient flows through them)
inline Var total_loss(const LossWeights& w, const LossTerms& t) {
    w.validate();
    Var total;
    auto acc = [&](const Var& term, double lambda) {
        if (lambda == 0.0 || !term) return;
        Var scaled = scale(term, lambda);
        total = total ? add(total, scaled) : scaled;
    };
    acc(t.task, w.lambda_task);
    acc(t.out, w.lambda_out);
    acc(t.mid, w.lambda_mid);
    acc(t.feat, w.lambda_feat);
    if (!total) total = make_var(Tensor::scalar(0.0), false);
    return total;
}

// ---------------------------------------------------------------------------
// Training state: Adam moments for trainable parameters only
// ---------------------------------------------------------------------------

struct AdamMoments {
    Tensor m, v;
};

struct StepMetrics {
    int step = 0;
    double task = 0.0, out = 0.0, mid = 0.0, feat = 0.0, total = 0.0;

    Json to_json() const {
        return Json{{"step", step}, {"L_task", task}, {"L_out", out},
                    {"L_mid", mid}, {"L_feat", feat}, {"total", total}};
    }
};

struct TrainState {
    UNetModel* student = nullptr;
    const UNetModel* teacher = nullptr;
    std::map<std::string, AdamMoments> moments;  // trainable parameters only
    int step = 0;
    Rng rng;  // timestep + noise draws

    TrainState(UNetModel& s, const UNetModel& t, std::uint64_t seed) : student(&s), teacher(&t), rng(seed) {
        for (const std::string& name : s.order) {
            const Param& p = s.param(name);
            if (p.frozen) continue;
            moments[name] = {Tensor::zeros(p.tensor().shape), Tensor::zeros(p.tensor().shape)};
        }
    }
};

constexpr double kAdamBeta1 = 0.9;
constexpr double kAdamBeta2 = 0.999;
constexpr double kAdamEps = 1e-8;

namespace detail {

// bias-corrected Adam over the state's trainable set; call after ++st.step
inline void adam_apply(TrainState& st, double lr) {
    double c1 = 1.0 - std::pow(kAdamBeta1, st.step);
    double c2 = 1.0 - std::pow(kAdamBeta2, st.step);
    for (auto& [name, mo] : st.moments) {
        Param& p = st.student->param(name);
        const Tensor* g = p.var->has_grad ? &p.var->grad : nullptr;
        for (std::int64_t i = 0; i < p.tensor().numel(); ++i) {
            double gi = g ? g->data[i] : 0.0;
            mo.m.data[i] = kAdamBeta1 * mo.m.data[i] + (1.0 - kAdamBeta1) * gi;
            mo.v.data[i] = kAdamBeta2 * mo.v.data[i] + (1.0 - kAdamBeta2) * gi * gi;
            double mhat = mo.m.data[i] / c1;
            double vhat = mo.v.data[i] / c2;
            p.tensor().data[i] -= lr * mhat / (std::sqrt(vhat) + kAdamEps);
        }
    }
}

// shared noising step: draw t then eps from the state rng
inline int noise_batch(TrainState& st, const data::Batch& batch, const NoiseSchedule& ns, Tensor& eps,
                       Tensor& x_t) {
    int t = data::draw_index(st.rng, ns.T);
    eps = Tensor::randn(batch.latents.shape, st.rng);
    double sa = std::sqrt(ns.alpha_bar[t]), sn = std::sqrt(1.0 - ns.alpha_bar[t]);
    x_t = Tensor(batch.latents.shape);
    for (std::int64_t i = 0; i < x_t.numel(); ++i)
        x_t.data[i] = sa * batch.latents.data[i] + sn * eps.data[i];
    return t;
}

}  // namespace detail

// One optimization step. Draw order from the state rng: timestep first, then
// the noise tensor; identical state + batch reproduces the result bitwise.
inline StepMetrics train_step(TrainState& st, const data::Batch& batch, const NoiseSchedule& ns,
                              const PerceptualProbe& probe, const LossWeights& w, double lr) {
    w.validate();
    UNetModel& student = *st.student;
    const UNetModel& teacher = *st.teacher;

    Tensor eps, x_t;
    int t = detail::noise_batch(st, batch, ns, eps, x_t);

    ForwardResult tf = teacher.forward_with_taps(x_t, t, batch.tokens);
    ForwardResult sf = student.forward_with_taps(x_t, t, batch.tokens);
    // teacher targets are constants for the student's backward pass
    Var t_pred = make_var(tf.noise_pred->value, false);
    Var t_mid = make_var(tf.mid_features->value, false);

    LossTerms terms;
    terms.task = task_loss(sf.noise_pred, make_var(eps, false));
    terms.out = output_kd_loss(sf.noise_pred, t_pred);
    terms.mid = midblock_loss(sf.mid_features, t_mid);
    terms.feat = perceptual_loss(probe, sf.noise_pred, t_pred);
    Var loss = total_loss(w, terms);

    StepMetrics m;
    m.step = st.step;
    m.task = terms.task->value[0];
    m.out = terms.out->value[0];
    m.mid = terms.mid->value[0];
    m.feat = terms.feat->value[0];
    m.total = loss->value[0];
    if (!std::isfinite(m.total))
        throw DivergenceError(msg("training loss became non-finite at step ", st.step));

    student.clear_grads();
    if (loss->requires_grad) backward(loss);

    ++st.step;
    detail::adam_apply(st, lr);
    return m;
}

// Task-only pretraining step: the model learns to predict the injected noise.
// Construct the state with the model as its own teacher; no teacher forward
// pass is run here.
inline StepMetrics train_noise_step(TrainState& st, const data::Batch& batch, const NoiseSchedule& ns,
                                    double lr) {
    UNetModel& model = *st.student;
    Tensor eps, x_t;
    int t = detail::noise_batch(st, batch, ns, eps, x_t);

    Var pred = model.forward(x_t, t, batch.tokens);
    Var loss = task_loss(pred, make_var(eps, false));

    StepMetrics m;
    m.step = st.step;
    m.task = m.total = loss->value[0];
    if (!std::isfinite(m.total))
        throw DivergenceError(msg("training loss became non-finite at step ", st.step));

    model.clear_grads();
    if (loss->requires_grad) backward(loss);
    ++st.step;
    detail::adam_apply(st, lr);
    return m;
}

// ---------------------------------------------------------------------------
// Held-out divergence: output and mid-feature MSE against the teacher
// ---------------------------------------------------------------------------

struct DivergenceReport {
    double output_mse = 0.0;
    double mid_mse = 0.0;

    Json to_json() const { return Json{{"output_mse", output_mse}, {"mid_mse", mid_mse}}; }
};

inline DivergenceReport eval_divergence(const UNetModel& student, const UNetModel& teacher,
                                        const NoiseSchedule& ns, const Tensor& latents,
                                        const std::vector<std::vector<int>>& tokens, std::uint64_t seed) {
    Rng rng(seed);
    // a few spread-out timesteps with fixed noise, averaged
    std::vector<int> ts{ns.T / 8, ns.T / 2, (ns.T * 7) / 8};
    double out_acc = 0.0, mid_acc = 0.0;
    for (int t : ts) {
        Tensor eps = Tensor::randn(latents.shape, rng);
        double sa = std::sqrt(ns.alpha_bar[t]), sn = std::sqrt(1.0 - ns.alpha_bar[t]);
        Tensor x_t(latents.shape);
        for (std::int64_t i = 0; i < x_t.numel(); ++i)
            x_t.data[i] = sa * latents.data[i] + sn * eps.data[i];
        ForwardResult sf = student.forward_with_taps(x_t, t, tokens);
        ForwardResult tf = teacher.forward_with_taps(x_t, t, tokens);
        const Tensor& so = sf.noise_pred->value;
        const Tensor& to = tf.noise_pred->value;
        double acc = 0.0;
        for (std::int64_t i = 0; i < so.numel(); ++i) {
            double d = so.data[i] - to.data[i];
            acc += d * d;
        }
        out_acc += acc / so.numel();
        const Tensor& sm = sf.mid_features->value;
        const Tensor& tm = tf.mid_features->value;
        acc = 0.0;
        for (std::int64_t i = 0; i < sm.numel(); ++i) {
            double d = sm.data[i] - tm.data[i];
            acc += d * d;
        }
        mid_acc += acc / sm.numel();
    }
    return {out_acc / ts.size(), mid_acc / ts.size()};
}

// ---------------------------------------------------------------------------
// Progressive incubation: stage 1 trains the pruned transplant, stage 2
// recombines with the teacher under a freeze mask and distills again
// ---------------------------------------------------------------------------

struct StageParams {
    int steps = 0;
    LossWeights weights;
    double lr = 1e-3;
    int batch_size = 2;
    std::uint64_t seed = 0;
};

struct CondConvParams {
    bool enabled = false;
    int n_experts = 2;
    std::vector<std::string> target_blocks;
};

struct IncubationResult {
    UNetModel stage1;
    UNetModel stage2;
    FreezeMask mask;
    std::vector<StepMetrics> stage1_log, stage2_log;
    DivergenceReport divergence_before, divergence_after;
};

inline IncubationResult incubation_run(const UNetModel& teacher, const PrunePlan& prune_plan,
                                       const CombinationPlan& comb_plan, const CondConvParams& condconv,
                                       const std::vector<data::Sample>& dataset, const NoiseSchedule& ns,
                                       const PerceptualProbe& probe, const StageParams& stage1,
                                       const StageParams& stage2, std::uint64_t transplant_seed,
                                       const std::function<void(int, const StepMetrics&)>& on_step = {}) {
    UNetSpec pruned = prune_layers(teacher.spec, prune_plan);
    UNetModel student = transplant_weights(pruned, teacher, transplant_seed);
    if (condconv.enabled) {
        std::uint64_t s = transplant_seed;
        for (const std::string& block : condconv.target_blocks)
            student = inherit_condconv(student, block, condconv.n_experts, ++s);
    }

    // stage 1: train the compressed model against the teacher
    {
        TrainState st(student, teacher, stage1.seed);
        data::BatchIter it(&dataset, stage1.batch_size, stage1.seed + 1);
        for (int i = 0; i < stage1.steps; ++i) {
            StepMetrics m = train_step(st, it.next(), ns, probe, stage1.weights, stage1.lr);
            if (on_step) on_step(1, m);
        }
    }

    IncubationResult res;
    res.stage1 = student.clone();

    // stage 2: recombine and train only what the mask leaves unfrozen
    auto [combined, mask] = recombine(teacher, student, comb_plan);
    res.mask = mask;

    // held-out probe batch, disjoint seed from training
    std::uint64_t eval_seed = stage2.seed + 7919;
    auto eval_set = data::gen_dataset(eval_seed, 8);
    Tensor eval_lat({static_cast<std::int64_t>(eval_set.size()), data::kLatentCh, data::kLatentHW,
                     data::kLatentHW});
    std::vector<std::vector<int>> eval_toks;
    for (std::size_t i = 0; i < eval_set.size(); ++i) {
        std::copy(eval_set[i].latent.data.begin(), eval_set[i].latent.data.end(),
                  eval_lat.data.begin() + static_cast<std::size_t>(i) * eval_set[i].latent.numel());
        eval_toks.push_back(eval_set[i].tokens);
    }
    res.divergence_before = eval_divergence(combined, teacher, ns, eval_lat, eval_toks, eval_seed);

    {
        TrainState st(combined, teacher, stage2.seed);
        data::BatchIter it(&dataset, stage2.batch_size, stage2.seed + 1);
        for (int i = 0; i < stage2.steps; ++i) {
            StepMetrics m = train_step(st, it.next(), ns, probe, stage2.weights, stage2.lr);
            if (on_step) on_step(2, m);
        }
    }
    res.divergence_after = eval_divergence(combined, teacher, ns, eval_lat, eval_toks, eval_seed);
    res.stage2 = std::move(combined);
    return res;
}

}  // namespace asdm
