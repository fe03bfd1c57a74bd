#pragma once

#include <algorithm>
#include <cmath>
#include <vector>

#include "asdm/tensor.hpp"

namespace asdm {

// ---------------------------------------------------------------------------
// Procedural latent-space dataset: 1..3 geometric primitives per sample,
// token sequence encodes exactly what was rendered.
// ---------------------------------------------------------------------------

namespace data {

constexpr int kVocab = 32;
constexpr int kSeqLen = 8;
constexpr int kLatentCh = 4;
constexpr int kLatentHW = 16;
constexpr int kNullToken = 0;  // reserved for classifier-free guidance
constexpr int kPadToken = 1;
constexpr int kMaxPrimitives = 3;
constexpr int kGridCells = 8;   // 8x8 placement grid over the 16x16 latent
constexpr int kIntensities = 3;

enum class PrimitiveKind { bar = 0, blob = 1, checker = 2 };

struct Primitive {
    PrimitiveKind kind = PrimitiveKind::bar;
    int x_cell = 0;     // 0..7
    int y_cell = 0;     // 0..7
    int intensity = 0;  // 0..2 -> amplitude 0.4 / 0.7 / 1.0

    bool operator==(const Primitive&) const = default;
};

inline void check_primitive(const Primitive& p) {
    int k = static_cast<int>(p.kind);
    if (k < 0 || k > 2) throw ContractError(msg("primitive kind ", k, " out of range"));
    if (p.x_cell < 0 || p.x_cell >= kGridCells || p.y_cell < 0 || p.y_cell >= kGridCells)
        throw ContractError(msg("primitive cell (", p.x_cell, ",", p.y_cell, ") outside the ", kGridCells, "x",
                                kGridCells, " grid"));
    if (p.intensity < 0 || p.intensity >= kIntensities)
        throw ContractError(msg("primitive intensity ", p.intensity, " out of range"));
}

// Token layout (vocab 32, ids 0 and 1 reserved):
//   token 0        = 2 + primitive count          (3..5)
//   per primitive  = [2 + kind*8 + x_cell,        (2..25)
//                     2 + y_cell*3 + intensity]   (2..25)
//   remainder      = pad token 1
inline std::vector<int> encode_tokens(const std::vector<Primitive>& prims) {
    if (prims.empty() || prims.size() > kMaxPrimitives)
        throw ContractError(msg("sample must hold 1..", kMaxPrimitives, " primitives, got ", prims.size()));
    std::vector<int> toks;
    toks.push_back(2 + static_cast<int>(prims.size()));
    for (const Primitive& p : prims) {
        check_primitive(p);
        toks.push_back(2 + static_cast<int>(p.kind) * kGridCells + p.x_cell);
        toks.push_back(2 + p.y_cell * kIntensities + p.intensity);
    }
    while (toks.size() < kSeqLen) toks.push_back(kPadToken);
    return toks;
}

inline std::vector<Primitive> decode_tokens(const std::vector<int>& toks) {
    if (static_cast<int>(toks.size()) != kSeqLen)
        throw ContractError(msg("token sequence must have length ", kSeqLen, ", got ", toks.size()));
    int count = toks[0] - 2;
    if (count < 1 || count > kMaxPrimitives)
        throw ContractError(msg("count token ", toks[0], " decodes to invalid primitive count ", count));
    std::vector<Primitive> prims;
    for (int i = 0; i < count; ++i) {
        int ta = toks[1 + 2 * i], tb = toks[2 + 2 * i];
        if (ta < 2 || ta >= 2 + 3 * kGridCells || tb < 2 || tb >= 2 + kGridCells * kIntensities)
            throw ContractError(msg("primitive token pair (", ta, ",", tb, ") out of range"));
        Primitive p;
        p.kind = static_cast<PrimitiveKind>((ta - 2) / kGridCells);
        p.x_cell = (ta - 2) % kGridCells;
        p.y_cell = (tb - 2) / kIntensities;
        p.intensity = (tb - 2) % kIntensities;
        prims.push_back(p);
    }
    for (std::size_t i = 1 + 2 * count; i < toks.size(); ++i)
        if (toks[i] != kPadToken) throw ContractError(msg("expected pad token at position ", i));
    return prims;
}

// fixed per-kind channel weights: which latent channels a primitive excites
inline const double* kind_channel_weights(PrimitiveKind k) {
    static const double table[3][kLatentCh] = {
        {1.0, 0.5, -0.3, 0.0},   // bar
        {-0.4, 1.0, 0.6, 0.2},   // blob
        {0.3, -0.6, 0.9, -0.8},  // checker
    };
    return table[static_cast<int>(k)];
}

inline Tensor render_latent(const std::vector<Primitive>& prims) {
    if (prims.empty() || prims.size() > kMaxPrimitives)
        throw ContractError(msg("sample must hold 1..", kMaxPrimitives, " primitives, got ", prims.size()));
    Tensor out = Tensor::zeros({kLatentCh, kLatentHW, kLatentHW});
    for (const Primitive& p : prims) {
        check_primitive(p);
        double amp = 0.4 + 0.3 * p.intensity;
        const double* cw = kind_channel_weights(p.kind);
        double cx = 2.0 * p.x_cell + 1.0;  // cell center in pixel coordinates
        double cy = 2.0 * p.y_cell + 1.0;
        for (int y = 0; y < kLatentHW; ++y)
            for (int x = 0; x < kLatentHW; ++x) {
                double v = 0.0;
                switch (p.kind) {
                    case PrimitiveKind::bar:  // full-height vertical bar, 2 px wide
                        v = (x == 2 * p.x_cell || x == 2 * p.x_cell + 1) ? 1.0 : 0.0;
                        break;
                    case PrimitiveKind::blob: {  // soft radial bump
                        double d2 = (x - cx) * (x - cx) + (y - cy) * (y - cy);
                        v = std::exp(-d2 / 6.0);
                        break;
                    }
                    case PrimitiveKind::checker: {  // 6x6 alternating patch
                        if (std::abs(x - cx) <= 3.0 && std::abs(y - cy) <= 3.0)
                            v = ((x + y) % 2 == 0) ? 1.0 : -1.0;
                        break;
                    }
                }
                if (v == 0.0) continue;
                for (int c = 0; c < kLatentCh; ++c) {
                    double& slot = out.data[(c * kLatentHW + y) * kLatentHW + x];
                    slot += amp * cw[c] * v;
                }
            }
    }
    for (double& v : out.data) v = std::clamp(v, -1.0, 1.0);
    return out;
}

struct Sample {
    Tensor latent;            // (4, 16, 16)
    std::vector<int> tokens;  // length 8
};

inline int draw_index(Rng& rng, int n) {
    int i = static_cast<int>(rng.uniform() * n);
    return std::min(i, n - 1);
}

inline std::vector<Sample> gen_dataset(std::uint64_t seed, int n) {
    if (n < 1) throw ContractError(msg("dataset size must be >= 1, got ", n));
    Rng rng(seed);
    std::vector<Sample> out;
    out.reserve(n);
    for (int i = 0; i < n; ++i) {
        int count = 1 + draw_index(rng, kMaxPrimitives);
        std::vector<Primitive> prims;
        for (int j = 0; j < count; ++j) {
            Primitive p;
            p.kind = static_cast<PrimitiveKind>(draw_index(rng, 3));
            p.x_cell = draw_index(rng, kGridCells);
            p.y_cell = draw_index(rng, kGridCells);
            p.intensity = draw_index(rng, kIntensities);
            prims.push_back(p);
        }
        out.push_back({render_latent(prims), encode_tokens(prims)});
    }
    return out;
}

// ---------------------------------------------------------------------------
// Seeded epoch iterator: fresh permutation per epoch, remainder dropped
// ---------------------------------------------------------------------------

struct Batch {
    Tensor latents;                       // (B, 4, 16, 16)
    std::vector<std::vector<int>> tokens;  // B sequences
    std::vector<int> indices;              // dataset rows in this batch
};

class BatchIter {
public:
    BatchIter(const std::vector<Sample>* dataset, int batch_size, std::uint64_t seed)
        : data_(dataset), batch_(batch_size), rng_(seed) {
        if (batch_ == 0) throw ConfigError("batch size must be positive");
        if (batch_ < 0) throw ConfigError(msg("batch size must be positive, got ", batch_));
        if (!data_ || data_->empty()) throw ConfigError("batch iterator needs a nonempty dataset");
        if (batch_ > static_cast<int>(data_->size()))
            throw ConfigError(msg("batch size ", batch_, " exceeds dataset size ", data_->size()));
        reshuffle();
    }

    Batch next() {
        int n = static_cast<int>(data_->size());
        if (cursor_ + batch_ > n) reshuffle();  // drop the remainder, start a new epoch
        Batch b;
        b.latents = Tensor({batch_, kLatentCh, kLatentHW, kLatentHW});
        for (int i = 0; i < batch_; ++i) {
            int idx = order_[cursor_ + i];
            const Sample& s = (*data_)[idx];
            std::copy(s.latent.data.begin(), s.latent.data.end(),
                      b.latents.data.begin() + static_cast<std::size_t>(i) * s.latent.numel());
            b.tokens.push_back(s.tokens);
            b.indices.push_back(idx);
        }
        cursor_ += batch_;
        return b;
    }

private:
    void reshuffle() {
        int n = static_cast<int>(data_->size());
        order_.resize(n);
        for (int i = 0; i < n; ++i) order_[i] = i;
        // Fisher-Yates with our own rng: identical streams on every platform
        for (int i = n - 1; i > 0; --i) std::swap(order_[i], order_[draw_index(rng_, i + 1)]);
        cursor_ = 0;
    }

    const std::vector<Sample>* data_;
    int batch_;
    Rng rng_;
    std::vector<int> order_;
    int cursor_ = 0;
};

}  // namespace data

}  // namespace asdm
