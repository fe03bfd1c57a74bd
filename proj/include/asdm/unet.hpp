#pragma once

#include <map>
#include <optional>
#include <string>
#include <vector>

#include "asdm/ops.hpp"

#include "json.hpp"

namespace asdm {

using Json = nlohmann::json;

// ---------------------------------------------------------------------------
// Architecture description: blocks -> layers -> units
// ---------------------------------------------------------------------------

enum class Resample { none, down, up };

struct CondConvSpec {
    int n_experts = 2;
    double expert0_logit_bias = 5.0;  // routing starts close to expert 0
};

struct TransformerUnitSpec {
    int heads = 2;
    int head_dim = 16;
};

struct ResNetUnitSpec {
    int in_ch = 0;   // resolved
    int out_ch = 0;  // resolved
    std::optional<CondConvSpec> condconv;
};

struct LayerSpec {
    ResNetUnitSpec resnet;
    std::optional<TransformerUnitSpec> transformer;
    int source_layer = -1;  // original layer index before pruning; -1 = self
};

struct BlockSpec {
    std::vector<LayerSpec> layers;
    Resample resample = Resample::none;
    int out_ch = 0;  // resolved: channels leaving the block
};

struct UNetSpec {
    std::vector<BlockSpec> down_blocks;
    BlockSpec mid_block;
    std::vector<BlockSpec> up_blocks;
    int base_channels = 32;
    std::vector<int> channel_multipliers{1, 2, 4};
    int latent_channels = 4;
    int latent_size = 16;  // H = W of the latent
    int cond_dim = 64;
    int cond_seq_len = 8;
    int cond_vocab = 32;
    int time_embed_dim = 64;
    int norm_groups = 8;
    int time_steps = 1000;  // training timestep range for the embedding

    static constexpr int null_token = 0;  // reserved for unconditional guidance

    static UNetSpec desk_default();
    static UNetSpec sd15_shaped();
};

inline std::string down_block_id(std::size_t i) { return "dn" + std::to_string(i); }
inline std::string up_block_id(std::size_t i) { return "up" + std::to_string(i); }

// All block ids of a spec in dataflow order: dn0.., mid, up0.. (up0 deepest).
inline std::vector<std::string> block_ids(const UNetSpec& s) {
    std::vector<std::string> ids;
    for (std::size_t i = 0; i < s.down_blocks.size(); ++i) ids.push_back(down_block_id(i));
    ids.push_back("mid");
    for (std::size_t i = 0; i < s.up_blocks.size(); ++i) ids.push_back(up_block_id(i));
    return ids;
}

inline BlockSpec* find_block(UNetSpec& s, const std::string& id) {
    for (std::size_t i = 0; i < s.down_blocks.size(); ++i)
        if (id == down_block_id(i)) return &s.down_blocks[i];
    if (id == "mid") return &s.mid_block;
    for (std::size_t i = 0; i < s.up_blocks.size(); ++i)
        if (id == up_block_id(i)) return &s.up_blocks[i];
    return nullptr;
}
inline const BlockSpec* find_block(const UNetSpec& s, const std::string& id) {
    return find_block(const_cast<UNetSpec&>(s), id);
}

inline TransformerUnitSpec default_transformer(int channels) {
    TransformerUnitSpec t;
    t.head_dim = 16;
    t.heads = std::max(1, channels / 16);
    return t;
}

// Recompute in/out channel arithmetic from block targets. The first layer of
// each up block absorbs the skip concat (and, after pruning, the block's
// channel transition).
inline void resolve_channels(UNetSpec& s) {
    if (s.channel_multipliers.size() != s.down_blocks.size())
        throw ConfigError(msg("channel_multipliers has ", s.channel_multipliers.size(), " entries for ",
                              s.down_blocks.size(), " down blocks"));
    if (s.down_blocks.size() != s.up_blocks.size())
        throw ConfigError("down/up block counts differ");
    int ch = s.base_channels * s.channel_multipliers[0];
    std::vector<int> skip_chs;
    for (std::size_t i = 0; i < s.down_blocks.size(); ++i) {
        int target = s.base_channels * s.channel_multipliers[i];
        BlockSpec& b = s.down_blocks[i];
        for (LayerSpec& l : b.layers) {
            l.resnet.in_ch = ch;
            l.resnet.out_ch = target;
            ch = target;
        }
        b.out_ch = ch;  // pass-through keeps ch if the block is empty
        skip_chs.push_back(ch);
    }
    for (LayerSpec& l : s.mid_block.layers) {
        l.resnet.in_ch = ch;
        l.resnet.out_ch = ch;
    }
    s.mid_block.out_ch = ch;
    std::size_t nd = s.down_blocks.size();
    for (std::size_t i = 0; i < s.up_blocks.size(); ++i) {
        BlockSpec& b = s.up_blocks[i];
        int target = s.base_channels * s.channel_multipliers[nd - 1 - i];
        if (!b.layers.empty()) {
            int skip = skip_chs[nd - 1 - i];
            bool first = true;
            for (LayerSpec& l : b.layers) {
                l.resnet.in_ch = first ? ch + skip : target;
                l.resnet.out_ch = target;
                first = false;
            }
            ch = target;
        }
        b.out_ch = ch;
    }
}

inline void validate_spec(const UNetSpec& s) {
    if (s.mid_block.layers.empty()) throw ConfigError("mid block must have at least one layer");
    if (s.base_channels <= 0 || s.latent_channels <= 0 || s.latent_size <= 0)
        throw ConfigError("base_channels, latent_channels and latent_size must be positive");
    if (s.time_embed_dim % 2 != 0) throw ConfigError("time_embed_dim must be even");
    if (s.cond_vocab < 2) throw ConfigError("cond_vocab must leave room for the null token");
    auto check_block = [&](const std::string& id, const BlockSpec& b) {
        for (std::size_t li = 0; li < b.layers.size(); ++li) {
            const LayerSpec& l = b.layers[li];
            if (l.resnet.in_ch <= 0 || l.resnet.out_ch <= 0)
                throw ConfigError(msg("unresolved channels in block ", id, " layer ", li));
            if (l.resnet.out_ch % s.norm_groups != 0 || l.resnet.in_ch % s.norm_groups != 0)
                throw ConfigError(msg("block ", id, " layer ", li, ": channels (", l.resnet.in_ch, "->",
                                      l.resnet.out_ch, ") not divisible by norm_groups=", s.norm_groups));
            if (l.transformer && (l.transformer->heads < 1 || l.transformer->head_dim < 1))
                throw ConfigError(msg("block ", id, " layer ", li, ": invalid transformer head config"));
            if (l.resnet.condconv && l.resnet.condconv->n_experts < 1)
                throw ConfigError(msg("block ", id, " layer ", li, ": n_experts must be >= 1"));
        }
    };
    for (std::size_t i = 0; i < s.down_blocks.size(); ++i) check_block(down_block_id(i), s.down_blocks[i]);
    check_block("mid", s.mid_block);
    for (std::size_t i = 0; i < s.up_blocks.size(); ++i) check_block(up_block_id(i), s.up_blocks[i]);
    // spatial arithmetic: every 'down' must be undone by an 'up'
    int downs = 0, ups = 0;
    for (auto& b : s.down_blocks) downs += b.resample == Resample::down ? 1 : 0;
    for (auto& b : s.up_blocks) ups += b.resample == Resample::up ? 1 : 0;
    if (downs != ups) throw ConfigError(msg("resampling mismatch: ", downs, " downs vs ", ups, " ups"));
}

inline UNetSpec UNetSpec::desk_default() {
    UNetSpec s;
    std::size_t nd = 3;
    for (std::size_t i = 0; i < nd; ++i) {
        BlockSpec b;
        int ch = s.base_channels * s.channel_multipliers[i];
        for (int l = 0; l < 2; ++l) {
            LayerSpec ls;
            if (i + 1 < nd) ls.transformer = default_transformer(ch);  // deepest down block: ResNet only
            b.layers.push_back(ls);
        }
        b.resample = (i + 1 < nd) ? Resample::down : Resample::none;
        s.down_blocks.push_back(b);
    }
    {
        int ch = s.base_channels * s.channel_multipliers.back();
        LayerSpec l0;
        l0.transformer = default_transformer(ch);
        LayerSpec l1;  // ResNet only
        s.mid_block.layers = {l0, l1};
    }
    for (std::size_t i = 0; i < nd; ++i) {
        BlockSpec b;
        int ch = s.base_channels * s.channel_multipliers[nd - 1 - i];
        for (int l = 0; l < 3; ++l) {
            LayerSpec ls;
            ls.transformer = default_transformer(ch);
            b.layers.push_back(ls);
        }
        b.resample = (i + 1 < nd) ? Resample::up : Resample::none;
        s.up_blocks.push_back(b);
    }
    resolve_channels(s);
    validate_spec(s);
    return s;
}

// Channel plan of Stable Diffusion v1.5 scale (320/640/1280); used only for
// static accounting, never built.
inline UNetSpec UNetSpec::sd15_shaped() {
    UNetSpec s;
    s.base_channels = 320;
    s.channel_multipliers = {1, 2, 4};
    s.latent_size = 64;
    s.cond_dim = 768;
    s.cond_seq_len = 77;
    s.cond_vocab = 49408;
    s.time_embed_dim = 1280;
    s.norm_groups = 32;
    std::size_t nd = 3;
    for (std::size_t i = 0; i < nd; ++i) {
        BlockSpec b;
        int ch = s.base_channels * s.channel_multipliers[i];
        for (int l = 0; l < 2; ++l) {
            LayerSpec ls;
            if (i + 1 < nd) {
                TransformerUnitSpec t;
                t.head_dim = 40;
                t.heads = ch / 40;
                ls.transformer = t;
            }
            b.layers.push_back(ls);
        }
        b.resample = (i + 1 < nd) ? Resample::down : Resample::none;
        s.down_blocks.push_back(b);
    }
    {
        LayerSpec l0;
        TransformerUnitSpec t;
        t.head_dim = 40;
        t.heads = s.base_channels * 4 / 40;
        l0.transformer = t;
        LayerSpec l1;
        s.mid_block.layers = {l0, l1};
    }
    for (std::size_t i = 0; i < nd; ++i) {
        BlockSpec b;
        int ch = s.base_channels * s.channel_multipliers[nd - 1 - i];
        for (int l = 0; l < 3; ++l) {
            LayerSpec ls;
            TransformerUnitSpec t;
            t.head_dim = 40;
            t.heads = ch / 40;
            ls.transformer = t;
            b.layers.push_back(ls);
        }
        b.resample = (i + 1 < nd) ? Resample::up : Resample::none;
        s.up_blocks.push_back(b);
    }
    resolve_channels(s);
    validate_spec(s);
    return s;
}

// ---------------------------------------------------------------------------
// Spec JSON (used by config files and checkpoints)
// ---------------------------------------------------------------------------

inline Json to_json(const BlockSpec& b) {
    Json layers = Json::array();
    for (const LayerSpec& l : b.layers) {
        Json jl;
        jl["in_ch"] = l.resnet.in_ch;
        jl["out_ch"] = l.resnet.out_ch;
        if (l.resnet.condconv) {
            jl["condconv"] = {{"n_experts", l.resnet.condconv->n_experts},
                              {"expert0_logit_bias", l.resnet.condconv->expert0_logit_bias}};
        }
        if (l.transformer)
            jl["transformer"] = {{"heads", l.transformer->heads}, {"head_dim", l.transformer->head_dim}};
        if (l.source_layer >= 0) jl["source_layer"] = l.source_layer;
        layers.push_back(jl);
    }
    std::string rs = b.resample == Resample::down ? "down" : b.resample == Resample::up ? "up" : "none";
    return Json{{"layers", layers}, {"resample", rs}};
}

inline BlockSpec block_from_json(const Json& j) {
    BlockSpec b;
    for (const Json& jl : j.at("layers")) {
        LayerSpec l;
        l.resnet.in_ch = jl.value("in_ch", 0);
        l.resnet.out_ch = jl.value("out_ch", 0);
        if (jl.contains("condconv")) {
            CondConvSpec cc;
            cc.n_experts = jl["condconv"].value("n_experts", 2);
            cc.expert0_logit_bias = jl["condconv"].value("expert0_logit_bias", 5.0);
            l.resnet.condconv = cc;
        }
        if (jl.contains("transformer")) {
            TransformerUnitSpec t;
            t.heads = jl["transformer"].value("heads", 1);
            t.head_dim = jl["transformer"].value("head_dim", 16);
            l.transformer = t;
        }
        l.source_layer = jl.value("source_layer", -1);
        b.layers.push_back(l);
    }
    std::string rs = j.value("resample", "none");
    b.resample = rs == "down" ? Resample::down : rs == "up" ? Resample::up : Resample::none;
    return b;
}

inline Json to_json(const UNetSpec& s) {
    Json j;
    Json dn = Json::array(), up = Json::array();
    for (auto& b : s.down_blocks) dn.push_back(to_json(b));
    for (auto& b : s.up_blocks) up.push_back(to_json(b));
    j["down_blocks"] = dn;
    j["mid_block"] = to_json(s.mid_block);
    j["up_blocks"] = up;
    j["base_channels"] = s.base_channels;
    j["channel_multipliers"] = s.channel_multipliers;
    j["latent_channels"] = s.latent_channels;
    j["latent_size"] = s.latent_size;
    j["cond_dim"] = s.cond_dim;
    j["cond_seq_len"] = s.cond_seq_len;
    j["cond_vocab"] = s.cond_vocab;
    j["time_embed_dim"] = s.time_embed_dim;
    j["norm_groups"] = s.norm_groups;
    j["time_steps"] = s.time_steps;
    return j;
}

inline UNetSpec spec_from_json(const Json& j) {
    UNetSpec s;
    s.down_blocks.clear();
    s.up_blocks.clear();
    for (const Json& b : j.at("down_blocks")) s.down_blocks.push_back(block_from_json(b));
    s.mid_block = block_from_json(j.at("mid_block"));
    for (const Json& b : j.at("up_blocks")) s.up_blocks.push_back(block_from_json(b));
    s.base_channels = j.at("base_channels").get<int>();
    s.channel_multipliers = j.at("channel_multipliers").get<std::vector<int>>();
    s.latent_channels = j.at("latent_channels").get<int>();
    s.latent_size = j.at("latent_size").get<int>();
    s.cond_dim = j.at("cond_dim").get<int>();
    s.cond_seq_len = j.at("cond_seq_len").get<int>();
    s.cond_vocab = j.at("cond_vocab").get<int>();
    s.time_embed_dim = j.at("time_embed_dim").get<int>();
    s.norm_groups = j.at("norm_groups").get<int>();
    s.time_steps = j.at("time_steps").get<int>();
    resolve_channels(s);
    validate_spec(s);
    return s;
}

// ---------------------------------------------------------------------------
// Parameter enumeration. Everything about a model's parameter set (names,
// shapes, block attribution, init) derives from this single walk, so the
// profiler's static census and the built model agree by construction.
// ---------------------------------------------------------------------------

enum class UnitKind { resnet, transformer, aux };
enum class InitKind { fan_in, zeros, ones, embed, route_w, route_bias };

struct ParamInfo {
    std::string name;
    Shape shape;
    std::string block_id;  // "dn0".."mid".."up2" or "aux"
    UnitKind kind = UnitKind::aux;
    InitKind init = InitKind::fan_in;
    double init_arg = 0.0;  // route_bias: expert-0 logit
};

namespace detail {

inline void enum_resnet(std::vector<ParamInfo>& out, const std::string& prefix, const std::string& block,
                        const ResNetUnitSpec& r, int time_embed_dim) {
    auto push = [&](const std::string& n, Shape s, InitKind init, double arg = 0.0) {
        out.push_back({prefix + n, std::move(s), block, UnitKind::resnet, init, arg});
    };
    std::int64_t in = r.in_ch, oc = r.out_ch;
    auto conv = [&](const std::string& n, std::int64_t ic, std::int64_t och) {
        if (r.condconv) {
            std::int64_t e = r.condconv->n_experts;
            push(n + ".experts", {e, och, ic, 3, 3}, InitKind::fan_in);
            push(n + ".bias", {och}, InitKind::zeros);
            push(n + ".route_w", {e, ic}, InitKind::route_w);
            push(n + ".route_b", {e}, InitKind::route_bias, r.condconv->expert0_logit_bias);
        } else {
            push(n + ".weight", {och, ic, 3, 3}, InitKind::fan_in);
            push(n + ".bias", {och}, InitKind::zeros);
        }
    };
    push("gn1.gamma", {in}, InitKind::ones);
    push("gn1.beta", {in}, InitKind::zeros);
    conv("conv1", in, oc);
    push("temb.weight", {oc, time_embed_dim}, InitKind::fan_in);
    push("temb.bias", {oc}, InitKind::zeros);
    push("gn2.gamma", {oc}, InitKind::ones);
    push("gn2.beta", {oc}, InitKind::zeros);
    conv("conv2", oc, oc);
    if (in != oc) {
        push("skip.weight", {oc, in, 1, 1}, InitKind::fan_in);
        push("skip.bias", {oc}, InitKind::zeros);
    }
}

inline void enum_transformer(std::vector<ParamInfo>& out, const std::string& prefix, const std::string& block,
                             const TransformerUnitSpec& t, int channels, int cond_dim) {
    auto push = [&](const std::string& n, Shape s, InitKind init) {
        out.push_back({prefix + n, std::move(s), block, UnitKind::transformer, init, 0.0});
    };
    std::int64_t c = channels, inner = static_cast<std::int64_t>(t.heads) * t.head_dim, cd = cond_dim;
    push("ln1.gamma", {c}, InitKind::ones);
    push("ln1.beta", {c}, InitKind::zeros);
    for (const char* n : {"q", "k", "v"}) {
        push(std::string(n) + ".weight", {inner, c}, InitKind::fan_in);
        push(std::string(n) + ".bias", {inner}, InitKind::zeros);
    }
    push("o.weight", {c, inner}, InitKind::fan_in);
    push("o.bias", {c}, InitKind::zeros);
    push("ln2.gamma", {c}, InitKind::ones);
    push("ln2.beta", {c}, InitKind::zeros);
    push("cq.weight", {inner, c}, InitKind::fan_in);
    push("cq.bias", {inner}, InitKind::zeros);
    push("ck.weight", {inner, cd}, InitKind::fan_in);
    push("ck.bias", {inner}, InitKind::zeros);
    push("cv.weight", {inner, cd}, InitKind::fan_in);
    push("cv.bias", {inner}, InitKind::zeros);
    push("co.weight", {c, inner}, InitKind::fan_in);
    push("co.bias", {c}, InitKind::zeros);
    push("ln3.gamma", {c}, InitKind::ones);
    push("ln3.beta", {c}, InitKind::zeros);
    push("ff1.weight", {4 * c, c}, InitKind::fan_in);
    push("ff1.bias", {4 * c}, InitKind::zeros);
    push("ff2.weight", {c, 4 * c}, InitKind::fan_in);
    push("ff2.bias", {c}, InitKind::zeros);
}

inline void enum_block(std::vector<ParamInfo>& out, const std::string& id, const BlockSpec& b,
                       const UNetSpec& s) {
    for (std::size_t li = 0; li < b.layers.size(); ++li) {
        const LayerSpec& l = b.layers[li];
        std::string prefix = id + ".l" + std::to_string(li) + ".";
        enum_resnet(out, prefix + "res.", id, l.resnet, s.time_embed_dim);
        if (l.transformer)
            enum_transformer(out, prefix + "attn.", id, *l.transformer, l.resnet.out_ch, s.cond_dim);
    }
    if (b.resample == Resample::down) {
        out.push_back({id + ".down.weight", {b.out_ch, b.out_ch, 3, 3}, id, UnitKind::resnet, InitKind::fan_in, 0.0});
        out.push_back({id + ".down.bias", {b.out_ch}, id, UnitKind::resnet, InitKind::zeros, 0.0});
    }
    if (b.resample == Resample::up) {
        out.push_back({id + ".up.weight", {b.out_ch, b.out_ch, 3, 3}, id, UnitKind::resnet, InitKind::fan_in, 0.0});
        out.push_back({id + ".up.bias", {b.out_ch}, id, UnitKind::resnet, InitKind::zeros, 0.0});
    }
}

}  // namespace detail

inline std::vector<ParamInfo> enumerate_params(const UNetSpec& s) {
    std::vector<ParamInfo> out;
    auto aux = [&](const std::string& n, Shape sh, InitKind init) {
        out.push_back({n, std::move(sh), "aux", UnitKind::aux, init, 0.0});
    };
    aux("cond.table", {s.cond_vocab, s.cond_dim}, InitKind::embed);
    aux("time.mlp1.weight", {s.time_embed_dim, s.time_embed_dim}, InitKind::fan_in);
    aux("time.mlp1.bias", {s.time_embed_dim}, InitKind::zeros);
    aux("time.mlp2.weight", {s.time_embed_dim, s.time_embed_dim}, InitKind::fan_in);
    aux("time.mlp2.bias", {s.time_embed_dim}, InitKind::zeros);
    int ch0 = s.base_channels * s.channel_multipliers[0];
    aux("stem.conv.weight", {ch0, s.latent_channels, 3, 3}, InitKind::fan_in);
    aux("stem.conv.bias", {ch0}, InitKind::zeros);
    for (std::size_t i = 0; i < s.down_blocks.size(); ++i)
        detail::enum_block(out, down_block_id(i), s.down_blocks[i], s);
    detail::enum_block(out, "mid", s.mid_block, s);
    for (std::size_t i = 0; i < s.up_blocks.size(); ++i)
        detail::enum_block(out, up_block_id(i), s.up_blocks[i], s);
    int chf = s.up_blocks.empty() ? ch0 : s.up_blocks.back().out_ch;
    aux("head.gn.gamma", {chf}, InitKind::ones);
    aux("head.gn.beta", {chf}, InitKind::zeros);
    aux("head.conv.weight", {s.latent_channels, chf, 3, 3}, InitKind::fan_in);
    aux("head.conv.bias", {s.latent_channels}, InitKind::zeros);
    return out;
}

inline Tensor init_param(const ParamInfo& info, Rng& rng) {
    switch (info.init) {
        case InitKind::zeros:
            return Tensor::zeros(info.shape);
        case InitKind::ones:
            return Tensor::full(info.shape, 1.0);
        case InitKind::embed:
            return Tensor::randn(info.shape, rng, 0.02);
        case InitKind::route_w:
            return Tensor::randn(info.shape, rng, 0.01);
        case InitKind::route_bias: {
            Tensor t = Tensor::zeros(info.shape);
            t[0] = info.init_arg;
            return t;
        }
        case InitKind::fan_in:
        default: {
            std::int64_t fan = 1;
            // experts tensors are (E, O, I, kh, kw): fan-in excludes both E and O
            std::size_t skip = info.shape.size() == 5 ? 2 : 1;
            for (std::size_t i = skip; i < info.shape.size(); ++i) fan *= info.shape[i];
            return Tensor::randn(info.shape, rng, 1.0 / std::sqrt(static_cast<double>(fan)));
        }
    }
}

// ---------------------------------------------------------------------------
// Timestep embedding: interleaved sin/cos with geometric frequencies
// ---------------------------------------------------------------------------

inline Tensor timestep_embed(int t, int dim, int t_max) {
    if (dim % 2 != 0) throw ConfigError(msg("timestep_embed dim must be even, got ", dim));
    if (t < 0 || t >= t_max) throw ContractError(msg("timestep ", t, " outside [0, ", t_max, ")"));
    Tensor out({dim});
    int half = dim / 2;
    for (int i = 0; i < half; ++i) {
        double freq = std::exp(-std::log(10000.0) * static_cast<double>(i) / static_cast<double>(half));
        out[2 * i] = std::sin(t * freq);
        out[2 * i + 1] = std::cos(t * freq);
    }
    return out;
}

// ---------------------------------------------------------------------------
// CondConv unit: per-sample softmax routing over expert kernels
// ---------------------------------------------------------------------------

struct CondConvUnit {
    Var experts;  // (E, O, I, 3, 3)
    Var bias;     // (O)
    Var route_w;  // (E, I)
    Var route_b;  // (E)
};

inline Var condconv_routing(const CondConvUnit& u, const Var& x) {
    return softmax_lastdim(linear(global_avg_pool(x), u.route_w, u.route_b));
}

inline Var condconv_forward(const CondConvUnit& u, const Var& x) {
    if (x->value.ndim() != 4 || x->value.dim(1) != u.experts->value.dim(2))
        throw ShapeError(msg("condconv input ", shape_str(x->value.shape), " incompatible with experts ",
                             shape_str(u.experts->value.shape)));
    Var r = condconv_routing(u, x);
    Var kernel = mix_kernels(r, u.experts);
    return conv2d_batched_kernels(x, kernel, u.bias, 1, 1);
}

// ---------------------------------------------------------------------------
// The model: parameter store + graph-building forward
// ---------------------------------------------------------------------------

enum class Provenance { fresh, teacher, student };

inline const char* provenance_str(Provenance p) {
    switch (p) {
        case Provenance::teacher: return "teacher";
        case Provenance::student: return "student";
        default: return "fresh";
    }
}

struct Param {
    Var var;
    Provenance prov = Provenance::fresh;
    bool frozen = false;
    ParamInfo info;

    Tensor& tensor() { return var->value; }
    const Tensor& tensor() const { return var->value; }
};

struct ForwardResult {
    Var noise_pred;
    Var mid_features;
};

class UNetModel {
public:
    UNetSpec spec;
    std::vector<std::string> order;  // enumeration order of parameter names
    std::map<std::string, Param> params;

    static UNetModel build(UNetSpec s, std::uint64_t seed) {
        resolve_channels(s);
        validate_spec(s);
        UNetModel m;
        m.spec = std::move(s);
        Rng rng(seed);
        for (const ParamInfo& info : enumerate_params(m.spec)) {
            Param p;
            p.info = info;
            p.var = make_var(init_param(info, rng), true);
            m.order.push_back(info.name);
            m.params.emplace(info.name, std::move(p));
        }
        return m;
    }

    UNetModel clone() const {
        UNetModel m;
        m.spec = spec;
        m.order = order;
        for (const auto& [name, p] : params) {
            Param q;
            q.info = p.info;
            q.prov = p.prov;
            q.frozen = p.frozen;
            q.var = make_var(p.var->value, !p.frozen);
            m.params.emplace(name, std::move(q));
        }
        return m;
    }

    Param& param(const std::string& name) {
        auto it = params.find(name);
        if (it == params.end()) throw ContractError(msg("unknown parameter ", name));
        return it->second;
    }
    const Param& param(const std::string& name) const {
        auto it = params.find(name);
        if (it == params.end()) throw ContractError(msg("unknown parameter ", name));
        return it->second;
    }
    bool has_param(const std::string& name) const { return params.count(name) != 0; }
    Var v(const std::string& name) const { return param(name).var; }

    std::int64_t param_count() const {
        std::int64_t n = 0;
        for (const auto& [name, p] : params) n += p.var->value.numel();
        return n;
    }

    void set_all_frozen(bool frozen) {
        for (auto& [name, p] : params) {
            p.frozen = frozen;
            p.var->requires_grad = !frozen;
        }
    }
    void set_frozen(const std::string& name, bool frozen) {
        Param& p = param(name);
        p.frozen = frozen;
        p.var->requires_grad = !frozen;
    }

    void clear_grads() {
        for (auto& [name, p] : params) p.var->has_grad = false;
    }

    // --- forward -----------------------------------------------------------

    ForwardResult forward_with_taps(const Tensor& latent, int timestep,
                                    const std::vector<std::vector<int>>& cond_tokens) const {
        if (latent.ndim() != 4 || latent.dim(1) != spec.latent_channels || latent.dim(2) != spec.latent_size ||
            latent.dim(3) != spec.latent_size)
            throw ShapeError(msg("latent shape ", shape_str(latent.shape), " does not match spec (",
                                 spec.latent_channels, "x", spec.latent_size, "x", spec.latent_size, ")"));
        std::int64_t N = latent.dim(0);
        if (static_cast<std::int64_t>(cond_tokens.size()) != N)
            throw ShapeError(msg("got ", cond_tokens.size(), " token sequences for batch of ", N));
        for (auto& seq : cond_tokens)
            if (static_cast<int>(seq.size()) != spec.cond_seq_len)
                throw ContractError(msg("token sequence length ", seq.size(), " != cond_seq_len ",
                                        spec.cond_seq_len));

        // time embedding: sinusoidal -> 2-layer MLP, shared across the batch
        Var temb = make_var(timestep_embed(timestep, spec.time_embed_dim, spec.time_steps));
        temb = linear(temb, v("time.mlp1.weight"), v("time.mlp1.bias"));
        temb = linear(silu(temb), v("time.mlp2.weight"), v("time.mlp2.bias"));

        Var cond = embed(v("cond.table"), cond_tokens);  // (N, L, cond_dim)

        Var h = conv2d(make_var(latent), v("stem.conv.weight"), v("stem.conv.bias"), 1, 1);

        std::vector<Var> skips;
        for (std::size_t i = 0; i < spec.down_blocks.size(); ++i) {
            const BlockSpec& b = spec.down_blocks[i];
            std::string id = down_block_id(i);
            for (std::size_t li = 0; li < b.layers.size(); ++li)
                h = layer_forward(id, li, b.layers[li], h, temb, cond);
            skips.push_back(h);
            if (b.resample == Resample::down)
                h = conv2d(h, v(id + ".down.weight"), v(id + ".down.bias"), 2, 1);
        }

        for (std::size_t li = 0; li < spec.mid_block.layers.size(); ++li)
            h = layer_forward("mid", li, spec.mid_block.layers[li], h, temb, cond);
        Var mid_tap = h;

        std::size_t nd = spec.down_blocks.size();
        for (std::size_t i = 0; i < spec.up_blocks.size(); ++i) {
            const BlockSpec& b = spec.up_blocks[i];
            std::string id = up_block_id(i);
            if (!b.layers.empty()) {
                h = concat_channels(h, skips[nd - 1 - i]);
                for (std::size_t li = 0; li < b.layers.size(); ++li)
                    h = layer_forward(id, li, b.layers[li], h, temb, cond);
            }
            if (b.resample == Resample::up)
                h = conv2d(upsample_nearest2x(h), v(id + ".up.weight"), v(id + ".up.bias"), 1, 1);
        }

        h = silu(group_norm(h, spec.norm_groups, v("head.gn.gamma"), v("head.gn.beta")));
        Var out = conv2d(h, v("head.conv.weight"), v("head.conv.bias"), 1, 1);
        return {out, mid_tap};
    }

    Var forward(const Tensor& latent, int timestep, const std::vector<std::vector<int>>& cond_tokens) const {
        return forward_with_taps(latent, timestep, cond_tokens).noise_pred;
    }

    CondConvUnit condconv_unit(const std::string& conv_prefix) const {
        return CondConvUnit{v(conv_prefix + ".experts"), v(conv_prefix + ".bias"),
                            v(conv_prefix + ".route_w"), v(conv_prefix + ".route_b")};
    }

private:
    Var apply_conv(const std::string& prefix, const ResNetUnitSpec& r, const Var& x) const {
        if (r.condconv) return condconv_forward(condconv_unit(prefix), x);
        return conv2d(x, v(prefix + ".weight"), v(prefix + ".bias"), 1, 1);
    }

    Var layer_forward(const std::string& block, std::size_t li, const LayerSpec& l, Var h, const Var& temb,
                      const Var& cond) const {
        std::string p = block + ".l" + std::to_string(li) + ".";
        // ResNet unit
        {
            std::string rp = p + "res.";
            Var rin = h;
            Var x = silu(group_norm(h, spec.norm_groups, v(rp + "gn1.gamma"), v(rp + "gn1.beta")));
            x = apply_conv(rp + "conv1", l.resnet, x);
            Var tb = linear(silu(temb), v(rp + "temb.weight"), v(rp + "temb.bias"));  // (out_ch)
            x = add_channel_bias(x, tb);
            x = silu(group_norm(x, spec.norm_groups, v(rp + "gn2.gamma"), v(rp + "gn2.beta")));
            ResNetUnitSpec conv2_spec = l.resnet;
            conv2_spec.in_ch = l.resnet.out_ch;
            x = apply_conv(rp + "conv2", conv2_spec, x);
            Var shortcut = rin;
            if (l.resnet.in_ch != l.resnet.out_ch)
                shortcut = conv2d(rin, v(rp + "skip.weight"), v(rp + "skip.bias"), 1, 0);
            h = add(x, shortcut);
        }
        // Transformer unit
        if (l.transformer) {
            std::string tp = p + "attn.";
            const TransformerUnitSpec& t = *l.transformer;
            std::int64_t N = h->value.dim(0), C = h->value.dim(1);
            std::int64_t HW = h->value.dim(2) * h->value.dim(3);
            std::int64_t H = h->value.dim(2), W = h->value.dim(3);
            Var tok = transpose_12(reshape(h, {N, C, HW}));  // (N, HW, C)

            auto mha = [&](const Var& qsrc, const Var& kvsrc, const std::string& qn, const std::string& kn,
                           const std::string& vn, const std::string& on) {
                Var q = linear(qsrc, v(tp + qn + ".weight"), v(tp + qn + ".bias"));
                Var k = linear(kvsrc, v(tp + kn + ".weight"), v(tp + kn + ".bias"));
                Var val = linear(kvsrc, v(tp + vn + ".weight"), v(tp + vn + ".bias"));
                std::vector<Var> heads;
                for (int hh = 0; hh < t.heads; ++hh) {
                    std::int64_t off = static_cast<std::int64_t>(hh) * t.head_dim;
                    heads.push_back(attention(narrow_lastdim(q, off, t.head_dim),
                                              narrow_lastdim(k, off, t.head_dim),
                                              narrow_lastdim(val, off, t.head_dim)));
                }
                Var cat = heads.size() == 1 ? heads[0] : concat_lastdim(heads);
                return linear(cat, v(tp + on + ".weight"), v(tp + on + ".bias"));
            };

            Var x = layer_norm(tok, v(tp + "ln1.gamma"), v(tp + "ln1.beta"));
            tok = add(tok, mha(x, x, "q", "k", "v", "o"));
            Var x2 = layer_norm(tok, v(tp + "ln2.gamma"), v(tp + "ln2.beta"));
            tok = add(tok, mha(x2, cond, "cq", "ck", "cv", "co"));
            Var x3 = layer_norm(tok, v(tp + "ln3.gamma"), v(tp + "ln3.beta"));
            Var ff = linear(gelu(linear(x3, v(tp + "ff1.weight"), v(tp + "ff1.bias"))), v(tp + "ff2.weight"),
                            v(tp + "ff2.bias"));
            tok = add(tok, ff);
            h = reshape(transpose_12(tok), {N, C, H, W});
        }
        return h;
    }
};

inline std::vector<std::vector<int>> null_tokens(const UNetSpec& s, std::int64_t n) {
    return std::vector<std::vector<int>>(n, std::vector<int>(s.cond_seq_len, UNetSpec::null_token));
}

}  // namespace asdm
