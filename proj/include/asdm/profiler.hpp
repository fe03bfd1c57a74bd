#pragma once

#include <iomanip>

#include "asdm/unet.hpp"

namespace asdm {

// Static per-block parameter and FLOP accounting over a UNetSpec. FLOPs are
// per forward pass at batch 1: multiply-accumulates count as 2, elementwise
// math (norms, activations, softmax) at the documented per-element constants
// under "other". The conv/linear/attention categories mirror the runtime
// counters in ops.hpp term for term.

struct BlockProfile {
    std::string block_id;
    std::int64_t layer_count = 0;
    std::int64_t params = 0;
    FlopCounts flops;
    double share_params = 0.0;
    double share_flops = 0.0;
};

struct ProfileReport {
    std::vector<BlockProfile> blocks;  // dn*, mid, up*, aux
    std::int64_t total_params = 0;
    FlopCounts total_flops;
    // per-unit-kind breakdown
    std::int64_t params_resnet = 0, params_transformer = 0, params_aux = 0;
    double flops_resnet = 0.0, flops_transformer = 0.0, flops_aux = 0.0;

    BlockProfile& block(const std::string& id) {
        for (auto& b : blocks)
            if (b.block_id == id) return b;
        throw ContractError(msg("no block ", id, " in profile report"));
    }
    const BlockProfile& block(const std::string& id) const {
        return const_cast<ProfileReport*>(this)->block(id);
    }

    Json to_json() const {
        Json rows = Json::array();
        for (const auto& b : blocks) {
            rows.push_back({{"block", b.block_id},
                            {"layers", b.layer_count},
                            {"params", b.params},
                            {"flops", b.flops.total()},
                            {"flops_conv", b.flops.conv},
                            {"flops_linear", b.flops.linear},
                            {"flops_attention", b.flops.attention},
                            {"flops_other", b.flops.other},
                            {"share_params", b.share_params},
                            {"share_flops", b.share_flops}});
        }
        Json totals = {{"params", total_params},
                       {"flops", total_flops.total()},
                       {"params_resnet", params_resnet},
                       {"params_transformer", params_transformer},
                       {"params_aux", params_aux},
                       {"flops_resnet", flops_resnet},
                       {"flops_transformer", flops_transformer},
                       {"flops_aux", flops_aux}};
        return Json{{"blocks", rows}, {"totals", totals}};
    }

    std::string to_table() const {
        std::ostringstream os;
        os << std::left << std::setw(6) << "block" << std::right << std::setw(8) << "layers" << std::setw(14)
           << "params" << std::setw(16) << "flops" << std::setw(12) << "p-share" << std::setw(12) << "f-share"
           << "\n";
        for (const auto& b : blocks) {
            os << std::left << std::setw(6) << b.block_id << std::right << std::setw(8) << b.layer_count
               << std::setw(14) << b.params << std::setw(16) << std::fixed << std::setprecision(0)
               << b.flops.total() << std::setw(12) << std::setprecision(4) << b.share_params << std::setw(12)
               << b.share_flops << "\n";
        }
        os << std::left << std::setw(6) << "total" << std::right << std::setw(8) << "" << std::setw(14)
           << total_params << std::setw(16) << std::setprecision(0) << total_flops.total() << "\n";
        os << "by unit kind: resnet " << params_resnet << " / transformer " << params_transformer
           << " / aux " << params_aux << " params; resnet " << std::setprecision(0) << flops_resnet
           << " / transformer " << flops_transformer << " / aux " << flops_aux << " flops\n";
        return os.str();
    }
};

namespace detail {

struct FlopWalk {
    ProfileReport& rep;
    const UNetSpec& s;

    void add(const std::string& block, UnitKind kind, const FlopCounts& f) {
        FlopCounts& dst = rep.block(block).flops;
        dst += f;
        switch (kind) {
            case UnitKind::resnet: rep.flops_resnet += f.total(); break;
            case UnitKind::transformer: rep.flops_transformer += f.total(); break;
            default: rep.flops_aux += f.total(); break;
        }
    }

    static FlopCounts conv_f(std::int64_t k, std::int64_t ic, std::int64_t oc, std::int64_t hw) {
        FlopCounts f;
        f.conv = 2.0 * static_cast<double>(k * k) * ic * oc * hw;
        return f;
    }
    static FlopCounts linear_f(std::int64_t in, std::int64_t out, std::int64_t rows) {
        FlopCounts f;
        f.linear = 2.0 * static_cast<double>(in) * out * rows;
        return f;
    }
    static FlopCounts attn_f(double v) {
        FlopCounts f;
        f.attention = v;
        return f;
    }
    static FlopCounts other_f(double v) {
        FlopCounts f;
        f.other = v;
        return f;
    }

    void resnet_layer(const std::string& block, const ResNetUnitSpec& r, std::int64_t hw) {
        std::int64_t in = r.in_ch, oc = r.out_ch, D = s.time_embed_dim;
        add(block, UnitKind::resnet, other_f(2.0 * in * hw));  // gn1 + silu
        conv_unit(block, r, in, oc, hw);                       // conv1
        add(block, UnitKind::resnet, other_f(static_cast<double>(D)));  // silu(temb)
        add(block, UnitKind::resnet, linear_f(D, oc, 1));               // temb projection
        add(block, UnitKind::resnet, other_f(static_cast<double>(oc) * hw));        // channel bias
        add(block, UnitKind::resnet, other_f(2.0 * oc * hw));                       // gn2 + silu
        conv_unit(block, r, oc, oc, hw);                                            // conv2
        if (in != oc) add(block, UnitKind::resnet, conv_f(1, in, oc, hw));          // 1x1 shortcut
        add(block, UnitKind::resnet, other_f(static_cast<double>(oc) * hw));        // residual add
    }

    void conv_unit(const std::string& block, const ResNetUnitSpec& r, std::int64_t ic, std::int64_t oc,
                   std::int64_t hw) {
        if (r.condconv) {
            std::int64_t e = r.condconv->n_experts;
            add(block, UnitKind::resnet, other_f(static_cast<double>(ic) * hw));  // gap
            add(block, UnitKind::resnet, linear_f(ic, e, 1));                     // routing logits
            add(block, UnitKind::resnet, other_f(3.0 * e));                       // softmax
            add(block, UnitKind::resnet, other_f(2.0 * e * oc * ic * 9.0));       // kernel mix
        }
        add(block, UnitKind::resnet, conv_f(3, ic, oc, hw));
    }

    void transformer_layer(const std::string& block, const TransformerUnitSpec& t, std::int64_t c,
                           std::int64_t hw) {
        std::int64_t L = hw, inner = static_cast<std::int64_t>(t.heads) * t.head_dim;
        std::int64_t Lc = s.cond_seq_len, cd = s.cond_dim;
        auto ln = [&] { add(block, UnitKind::transformer, other_f(static_cast<double>(L) * c)); };
        auto res_add = ln;  // same element count
        // self-attention
        ln();
        add(block, UnitKind::transformer, linear_f(c, inner, L));  // q
        add(block, UnitKind::transformer, linear_f(c, inner, L));  // k
        add(block, UnitKind::transformer, linear_f(c, inner, L));  // v
        for (int h = 0; h < t.heads; ++h) {
            add(block, UnitKind::transformer, attn_f(2.0 * L * L * t.head_dim));  // q k^T
            add(block, UnitKind::transformer, other_f(4.0 * L * L));              // scale + softmax
            add(block, UnitKind::transformer, attn_f(2.0 * L * L * t.head_dim));  // weights v
        }
        add(block, UnitKind::transformer, linear_f(inner, c, L));  // out proj
        res_add();
        // cross-attention over cond tokens
        ln();
        add(block, UnitKind::transformer, linear_f(c, inner, L));    // cq
        add(block, UnitKind::transformer, linear_f(cd, inner, Lc));  // ck
        add(block, UnitKind::transformer, linear_f(cd, inner, Lc));  // cv
        for (int h = 0; h < t.heads; ++h) {
            add(block, UnitKind::transformer, attn_f(2.0 * L * Lc * t.head_dim));
            add(block, UnitKind::transformer, other_f(4.0 * L * Lc));
            add(block, UnitKind::transformer, attn_f(2.0 * L * Lc * t.head_dim));
        }
        add(block, UnitKind::transformer, linear_f(inner, c, L));
        res_add();
        // feed-forward
        ln();
        add(block, UnitKind::transformer, linear_f(c, 4 * c, L));
        add(block, UnitKind::transformer, other_f(4.0 * c * L));  // gelu
        add(block, UnitKind::transformer, linear_f(4 * c, c, L));
        res_add();
    }
};

}  // namespace detail

inline ProfileReport make_report_skeleton(const UNetSpec& s) {
    ProfileReport rep;
    for (const std::string& id : block_ids(s)) {
        BlockProfile b;
        b.block_id = id;
        b.layer_count = static_cast<std::int64_t>(find_block(s, id)->layers.size());
        rep.blocks.push_back(b);
    }
    BlockProfile aux;
    aux.block_id = "aux";
    rep.blocks.push_back(aux);
    return rep;
}

inline void fill_params(const UNetSpec& s, ProfileReport& rep) {
    for (const ParamInfo& p : enumerate_params(s)) {
        std::int64_t n = shape_numel(p.shape);
        rep.block(p.block_id).params += n;
        rep.total_params += n;
        switch (p.kind) {
            case UnitKind::resnet: rep.params_resnet += n; break;
            case UnitKind::transformer: rep.params_transformer += n; break;
            default: rep.params_aux += n; break;
        }
    }
    for (auto& b : rep.blocks)
        b.share_params = rep.total_params ? static_cast<double>(b.params) / rep.total_params : 0.0;
}

inline void fill_flops(const UNetSpec& s, ProfileReport& rep, int latent_hw) {
    detail::FlopWalk w{rep, s};
    std::int64_t side = latent_hw;
    std::int64_t hw = side * side;
    int ch0 = s.base_channels * s.channel_multipliers[0];
    std::int64_t D = s.time_embed_dim;
    // time MLP
    w.add("aux", UnitKind::aux, detail::FlopWalk::linear_f(D, D, 1));
    w.add("aux", UnitKind::aux, detail::FlopWalk::other_f(static_cast<double>(D)));  // silu
    w.add("aux", UnitKind::aux, detail::FlopWalk::linear_f(D, D, 1));
    // stem
    w.add("aux", UnitKind::aux, detail::FlopWalk::conv_f(3, s.latent_channels, ch0, hw));
    for (std::size_t i = 0; i < s.down_blocks.size(); ++i) {
        const BlockSpec& b = s.down_blocks[i];
        std::string id = down_block_id(i);
        for (const LayerSpec& l : b.layers) {
            w.resnet_layer(id, l.resnet, hw);
            if (l.transformer) w.transformer_layer(id, *l.transformer, l.resnet.out_ch, hw);
        }
        if (b.resample == Resample::down) {
            side /= 2;
            hw = side * side;
            w.add(id, UnitKind::resnet, detail::FlopWalk::conv_f(3, b.out_ch, b.out_ch, hw));
        }
    }
    for (const LayerSpec& l : s.mid_block.layers) {
        w.resnet_layer("mid", l.resnet, hw);
        if (l.transformer) w.transformer_layer("mid", *l.transformer, l.resnet.out_ch, hw);
    }
    for (std::size_t i = 0; i < s.up_blocks.size(); ++i) {
        const BlockSpec& b = s.up_blocks[i];
        std::string id = up_block_id(i);
        for (const LayerSpec& l : b.layers) {
            w.resnet_layer(id, l.resnet, hw);
            if (l.transformer) w.transformer_layer(id, *l.transformer, l.resnet.out_ch, hw);
        }
        if (b.resample == Resample::up) {
            side *= 2;
            hw = side * side;
            w.add(id, UnitKind::resnet, detail::FlopWalk::conv_f(3, b.out_ch, b.out_ch, hw));
        }
    }
    // output head
    std::int64_t chf = s.up_blocks.empty() ? ch0 : s.up_blocks.back().out_ch;
    w.add("aux", UnitKind::aux, detail::FlopWalk::other_f(2.0 * chf * hw));  // gn + silu
    w.add("aux", UnitKind::aux, detail::FlopWalk::conv_f(3, chf, s.latent_channels, hw));

    for (auto& b : rep.blocks) rep.total_flops += b.flops;
    double tot = rep.total_flops.total();
    for (auto& b : rep.blocks) b.share_flops = tot > 0 ? b.flops.total() / tot : 0.0;
}

inline ProfileReport count_params(const UNetSpec& s) {
    ProfileReport rep = make_report_skeleton(s);
    fill_params(s, rep);
    return rep;
}

inline ProfileReport estimate_flops(const UNetSpec& s, int latent_hw = 0) {
    ProfileReport rep = make_report_skeleton(s);
    fill_flops(s, rep, latent_hw > 0 ? latent_hw : s.latent_size);
    return rep;
}

inline ProfileReport profile(const UNetSpec& s, int latent_hw = 0) {
    ProfileReport rep = make_report_skeleton(s);
    fill_params(s, rep);
    fill_flops(s, rep, latent_hw > 0 ? latent_hw : s.latent_size);
    return rep;
}

struct SpeedupEstimate {
    double unet_flop_reduction = 0.0;
    double pipeline_reduction = 0.0;
};

// non_unet_overhead: fraction of end-to-end cost outside the UNet iteration
inline SpeedupEstimate speedup_estimate(const UNetSpec& before, const UNetSpec& after, int latent_hw = 0,
                                        double non_unet_overhead = 0.15) {
    double fb = estimate_flops(before, latent_hw).total_flops.total();
    double fa = estimate_flops(after, latent_hw).total_flops.total();
    SpeedupEstimate e;
    e.unet_flop_reduction = 1.0 - fa / fb;
    e.pipeline_reduction = (1.0 - non_unet_overhead) * e.unet_flop_reduction;
    return e;
}

}  // namespace asdm
