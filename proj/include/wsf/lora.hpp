#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

#include "wsf/field.hpp"

namespace wsf {

// ---------------------------------------------------------------------------
// Low-rank adaptation of the square trunk matrices of a base field, in two
// flavours:
//   additive        W' = W + B A
//   multiplicative  W' = W ⊙ (B A)   (elementwise)
// with A (r x d_in) and B (d_out x r). The multiplicative delta decomposes as
// sum_i diag(b_i) W diag(a_i) over rank-one style pairs (a_i = i-th row of A,
// b_i = i-th column of B), which is what the token encoders exploit.
//
// Asymmetric variants freeze a fixed set of entries (positions + values) that
// is shared across every fit of a dataset and re-imposed after each
// optimizer step, shrinking the trainable representation.
// ---------------------------------------------------------------------------

enum class LoraMode { additive, multiplicative };

inline const char* to_string(LoraMode m) { return m == LoraMode::additive ? "additive" : "multiplicative"; }

struct LoraLayer {
    std::string layer; // name of the adapted base matrix
    Tensor A;          // r x d_in
    Tensor B;          // d_out x r
};

struct LoraParams {
    LoraMode mode = LoraMode::multiplicative;
    int rank = 16;
    std::vector<LoraLayer> layers;
};

// --- adapter algebra -----------------------------------------------------------

inline Tensor lora_delta(const Tensor& A, const Tensor& B) { return matmul_val(B, A); }

inline Tensor apply_additive(const Tensor& W, const Tensor& A, const Tensor& B) {
    Tensor d = lora_delta(A, B);
    if (!d.same_shape(W)) throw std::invalid_argument("apply_additive: B A shape does not match W");
    Tensor out = W;
    for (int64_t i = 0; i < out.numel(); ++i) out[i] += d[i];
    return out;
}

inline Tensor apply_multiplicative(const Tensor& W, const Tensor& A, const Tensor& B) {
    Tensor d = lora_delta(A, B);
    if (!d.same_shape(W)) throw std::invalid_argument("apply_multiplicative: B A shape does not match W");
    Tensor out = W;
    for (int64_t i = 0; i < out.numel(); ++i) out[i] *= d[i];
    return out;
}

/// Literal rank-one decomposition sum_i diag(b_i) W diag(a_i); equals
/// apply_multiplicative by construction and exists as the checkable form.
inline Tensor decompose_multiplicative(const Tensor& W, const Tensor& A, const Tensor& B) {
    const int r = A.rows(), din = A.cols(), dout = B.rows();
    if (B.cols() != r || W.rows() != dout || W.cols() != din)
        throw std::invalid_argument("decompose_multiplicative: shape mismatch");
    Tensor out({dout, din});
    for (int i = 0; i < r; ++i)
        for (int p = 0; p < dout; ++p)
            for (int q = 0; q < din; ++q) out.at(p, q) += B.at(p, i) * W.at(p, q) * A.at(i, q);
    return out;
}

/// Permute the rank dimension: rows of A and columns of B move together, so
/// B A (and therefore the adapted field) is invariant.
inline LoraParams permute_rank(const LoraParams& params, const std::vector<int>& perm) {
    if (int(perm.size()) != params.rank) throw std::invalid_argument("permute_rank: wrong permutation length");
    std::vector<bool> seen(perm.size(), false);
    for (int p : perm) {
        if (p < 0 || p >= params.rank || seen[size_t(p)]) throw std::invalid_argument("permute_rank: not a permutation");
        seen[size_t(p)] = true;
    }
    LoraParams out = params;
    for (size_t l = 0; l < params.layers.size(); ++l) {
        const auto& src = params.layers[l];
        auto& dst = out.layers[l];
        for (int i = 0; i < params.rank; ++i) {
            for (int q = 0; q < src.A.cols(); ++q) dst.A.at(i, q) = src.A.at(perm[size_t(i)], q);
            for (int p = 0; p < src.B.rows(); ++p) dst.B.at(p, i) = src.B.at(p, perm[size_t(i)]);
        }
    }
    return out;
}

// --- asymmetric masking ----------------------------------------------------------

/// Frozen entries of one matrix: parallel (row, col, value) triples.
struct LayerMask {
    std::string layer;
    std::vector<int> row, col;
    std::vector<float> value;
    int64_t count() const { return int64_t(row.size()); }
};

struct AsymMask {
    std::vector<LayerMask> layers;
    float kappa = 6.0f;
    uint64_t seed = 0;

    int64_t frozen_count() const {
        int64_t n = 0;
        for (const auto& l : layers) n += l.count();
        return n;
    }
    const LayerMask* find(const std::string& name) const {
        for (const auto& l : layers)
            if (l.layer == name) return &l;
        return nullptr;
    }
};

/// What a mask freezes: standalone hidden matrices, or the B factor of each
/// adapted layer.
enum class MaskTarget { standalone_weights, lora_b };

namespace detail {
/// Per row of an R x C matrix, freeze min(ceil(sqrt(R)), C-1) entries at
/// columns sampled without replacement; at least one entry per row stays
/// trainable.
inline void mask_matrix(LayerMask& lm, int rows, int cols, bool zero_values, float kappa, Rng& rng) {
    int per_row = std::min(int(std::ceil(std::sqrt(double(rows)))), cols - 1);
    if (per_row < 0) per_row = 0;
    std::vector<int> idx(static_cast<size_t>(cols));
    for (int i = 0; i < rows; ++i) {
        std::iota(idx.begin(), idx.end(), 0);
        for (int k = 0; k < per_row; ++k) { // partial Fisher-Yates
            int j = k + int(rng.next_below(uint64_t(cols - k)));
            std::swap(idx[size_t(k)], idx[size_t(j)]);
        }
        std::sort(idx.begin(), idx.begin() + per_row);
        for (int k = 0; k < per_row; ++k) {
            lm.row.push_back(i);
            lm.col.push_back(idx[size_t(k)]);
            lm.value.push_back(zero_values ? 0.0f : rng.normal(0.0f, std::sqrt(kappa)));
        }
    }
}
} // namespace detail

/// Sample frozen positions and values for an architecture. Frozen values are
/// zeros in multiplicative mode (killing those entries of every rank-one
/// term) and N(0, kappa) otherwise. Deterministic in (arch, target, seed).
inline AsymMask make_mask(const FieldArch& arch, MaskTarget target, LoraMode mode, int rank, float kappa,
                          uint64_t seed) {
    AsymMask mask;
    mask.kappa = kappa;
    mask.seed = seed;
    Rng rng = Rng(seed).stream(rng_purpose::mask, target == MaskTarget::standalone_weights ? 0 : 1);
    bool zeros = target == MaskTarget::lora_b && mode == LoraMode::multiplicative;
    if (target == MaskTarget::standalone_weights) {
        if (arch.kind != FieldKind::standalone) throw std::invalid_argument("make_mask: arch is not standalone");
        for (const auto& name : adaptable_layers(arch)) {
            LayerMask lm;
            lm.layer = name;
            detail::mask_matrix(lm, arch.hidden, arch.hidden, false, kappa, rng);
            mask.layers.push_back(std::move(lm));
        }
    } else {
        if (arch.kind != FieldKind::modulated) throw std::invalid_argument("make_mask: arch is not modulated");
        if (rank < 2) throw std::invalid_argument("make_mask: rank must be >= 2 to leave trainable entries");
        for (const auto& name : adaptable_layers(arch)) {
            LayerMask lm;
            lm.layer = name;
            detail::mask_matrix(lm, arch.hidden, rank, zeros, kappa, rng);
            mask.layers.push_back(std::move(lm));
        }
    }
    return mask;
}

/// Overwrite frozen entries of the B factors. Idempotent.
inline void apply_mask(LoraParams& params, const AsymMask& mask) {
    for (auto& l : params.layers) {
        const LayerMask* lm = mask.find(l.layer);
        if (!lm) continue;
        for (int64_t k = 0; k < lm->count(); ++k) l.B.at(lm->row[size_t(k)], lm->col[size_t(k)]) = lm->value[size_t(k)];
    }
}

/// Overwrite frozen entries of standalone weight matrices. Idempotent.
inline void apply_mask(WeightSet& ws, const AsymMask& mask) {
    for (auto& l : ws.layers) {
        const LayerMask* lm = mask.find(l.name);
        if (!lm) continue;
        for (int64_t k = 0; k < lm->count(); ++k) l.W.at(lm->row[size_t(k)], lm->col[size_t(k)]) = lm->value[size_t(k)];
    }
}

// --- trainable-representation layout ---------------------------------------------

/// One contiguous run of the flattened representation: all trainable entries
/// of one matrix (or bias), in row-major order, skipping frozen positions.
struct ReprSlice {
    std::string layer;
    char matrix;                // 'A', 'B', 'W' or 'b'
    int64_t offset = 0;         // position in the flat vector
    std::vector<int64_t> kept;  // row-major indices into the source matrix
};

/// Complete description of how trainable scalars map to a flat vector.
/// Order: layers ascending (weight-set order); within a layer A before B
/// (adapters) or W before b (standalone).
struct ReprLayout {
    enum class Kind { standalone, lora };
    Kind kind = Kind::standalone;
    FieldArch arch;
    LoraMode mode = LoraMode::multiplicative;
    int rank = 0;
    std::vector<ReprSlice> slices;
    int64_t length = 0;
};

namespace detail {
inline std::vector<int64_t> kept_indices(int rows, int cols, const LayerMask* lm) {
    std::vector<char> frozen;
    if (lm) {
        frozen.assign(size_t(rows) * size_t(cols), 0);
        for (int64_t k = 0; k < lm->count(); ++k)
            frozen[size_t(lm->row[size_t(k)]) * size_t(cols) + size_t(lm->col[size_t(k)])] = 1;
    }
    std::vector<int64_t> kept;
    kept.reserve(size_t(rows) * size_t(cols));
    for (int64_t i = 0; i < int64_t(rows) * cols; ++i)
        if (frozen.empty() || !frozen[size_t(i)]) kept.push_back(i);
    return kept;
}
} // namespace detail

inline ReprLayout layout_for_standalone(const FieldArch& arch, const AsymMask* mask) {
    if (arch.kind != FieldKind::standalone) throw std::invalid_argument("layout_for_standalone: wrong arch kind");
    ReprLayout lo;
    lo.kind = ReprLayout::Kind::standalone;
    lo.arch = arch;
    WeightSet ws = make_weight_set(arch);
    for (const auto& l : ws.layers) {
        ReprSlice sw{l.name, 'W', lo.length, detail::kept_indices(l.W.rows(), l.W.cols(), mask ? mask->find(l.name) : nullptr)};
        lo.length += int64_t(sw.kept.size());
        lo.slices.push_back(std::move(sw));
        ReprSlice sb{l.name, 'b', lo.length, detail::kept_indices(1, l.b.cols(), nullptr)};
        lo.length += int64_t(sb.kept.size());
        lo.slices.push_back(std::move(sb));
    }
    return lo;
}

inline ReprLayout layout_for_lora(const FieldArch& arch, LoraMode mode, int rank, const AsymMask* mask) {
    if (arch.kind != FieldKind::modulated) throw std::invalid_argument("layout_for_lora: wrong arch kind");
    ReprLayout lo;
    lo.kind = ReprLayout::Kind::lora;
    lo.arch = arch;
    lo.mode = mode;
    lo.rank = rank;
    for (const auto& name : adaptable_layers(arch)) {
        ReprSlice sa{name, 'A', lo.length, detail::kept_indices(rank, arch.hidden, nullptr)};
        lo.length += int64_t(sa.kept.size());
        lo.slices.push_back(std::move(sa));
        ReprSlice sb{name, 'B', lo.length, detail::kept_indices(arch.hidden, rank, mask ? mask->find(name) : nullptr)};
        lo.length += int64_t(sb.kept.size());
        lo.slices.push_back(std::move(sb));
    }
    return lo;
}

// --- flatten / unflatten -----------------------------------------------------------

inline std::vector<float> flatten(const LoraParams& params, const ReprLayout& lo) {
    if (lo.kind != ReprLayout::Kind::lora) throw std::invalid_argument("flatten: layout is not for adapters");
    std::vector<float> v(size_t(lo.length));
    size_t li = 0;
    for (const auto& s : lo.slices) {
        while (li < params.layers.size() && params.layers[li].layer != s.layer) ++li;
        if (li >= params.layers.size()) throw std::invalid_argument("flatten: layer missing: " + s.layer);
        const Tensor& src = s.matrix == 'A' ? params.layers[li].A : params.layers[li].B;
        for (size_t k = 0; k < s.kept.size(); ++k) v[size_t(s.offset) + k] = src[s.kept[k]];
    }
    return v;
}

inline std::vector<float> flatten(const WeightSet& ws, const ReprLayout& lo) {
    if (lo.kind != ReprLayout::Kind::standalone) throw std::invalid_argument("flatten: layout is not standalone");
    std::vector<float> v(size_t(lo.length));
    for (const auto& s : lo.slices) {
        const auto& l = ws.find(s.layer);
        const Tensor& src = s.matrix == 'W' ? l.W : l.b;
        for (size_t k = 0; k < s.kept.size(); ++k) v[size_t(s.offset) + k] = src[s.kept[k]];
    }
    return v;
}

/// Rebuild adapter parameters from a flat vector; frozen entries are filled
/// from the mask (or zero when no mask applies).
inline LoraParams unflatten_lora(const std::vector<float>& v, const ReprLayout& lo, const AsymMask* mask) {
    if (lo.kind != ReprLayout::Kind::lora) throw std::invalid_argument("unflatten_lora: wrong layout kind");
    if (int64_t(v.size()) != lo.length) throw std::invalid_argument("unflatten_lora: length mismatch");
    LoraParams params;
    params.mode = lo.mode;
    params.rank = lo.rank;
    for (const auto& name : adaptable_layers(lo.arch))
        params.layers.push_back({name, Tensor::zeros({lo.rank, lo.arch.hidden}), Tensor::zeros({lo.arch.hidden, lo.rank})});
    size_t li = 0;
    for (const auto& s : lo.slices) {
        while (li < params.layers.size() && params.layers[li].layer != s.layer) ++li;
        Tensor& dst = s.matrix == 'A' ? params.layers[li].A : params.layers[li].B;
        for (size_t k = 0; k < s.kept.size(); ++k) dst[s.kept[k]] = v[size_t(s.offset) + k];
    }
    if (mask) apply_mask(params, *mask);
    return params;
}

inline WeightSet unflatten_standalone(const std::vector<float>& v, const ReprLayout& lo, const AsymMask* mask) {
    if (lo.kind != ReprLayout::Kind::standalone) throw std::invalid_argument("unflatten_standalone: wrong layout kind");
    if (int64_t(v.size()) != lo.length) throw std::invalid_argument("unflatten_standalone: length mismatch");
    WeightSet ws = make_weight_set(lo.arch);
    for (const auto& s : lo.slices) {
        auto& l = ws.find(s.layer);
        Tensor& dst = s.matrix == 'W' ? l.W : l.b;
        for (size_t k = 0; k < s.kept.size(); ++k) dst[s.kept[k]] = v[size_t(s.offset) + k];
    }
    if (mask) apply_mask(ws, *mask);
    return ws;
}

// --- initialization from a shared random vector -------------------------------------

/// Deterministic transform from a raw N(0,1) vector (length = layout.length)
/// to initial parameters: params = template + scale * iota. Additive mode
/// starts the adapter at zero (B = 0, identity of the base field);
/// multiplicative mode starts near B A = 1-matrix (anchor column per row of
/// B placed at the first non-frozen position, all-ones A template).
inline LoraParams lora_init_from(const ReprLayout& lo, const std::vector<float>& iota, const AsymMask* mask) {
    if (int64_t(iota.size()) != lo.length) throw std::invalid_argument("lora_init_from: iota length mismatch");
    LoraParams params = unflatten_lora(iota, lo, nullptr); // values = raw iota
    const float sigma = 0.1f / std::sqrt(float(lo.rank));
    for (auto& l : params.layers) {
        const LayerMask* lm = mask ? mask->find(l.layer) : nullptr;
        if (lo.mode == LoraMode::additive) {
            float sa = 1.0f / std::sqrt(float(lo.rank));
            for (auto& x : l.A.vec()) x *= sa;
            std::fill(l.B.vec().begin(), l.B.vec().end(), 0.0f);
        } else {
            for (auto& x : l.A.vec()) x = 1.0f + sigma * x;
            for (auto& x : l.B.vec()) x = sigma * x;
            // one anchor per row, at the first column the mask leaves free
            for (int i = 0; i < l.B.rows(); ++i) {
                int anchor = 0;
                if (lm) {
                    std::vector<char> frozen(size_t(l.B.cols()), 0);
                    for (int64_t k = 0; k < lm->count(); ++k)
                        if (lm->row[size_t(k)] == i) frozen[size_t(lm->col[size_t(k)])] = 1;
                    while (anchor < l.B.cols() && frozen[size_t(anchor)]) ++anchor;
                    if (anchor == l.B.cols()) throw std::runtime_error("lora_init_from: fully frozen row");
                }
                l.B.at(i, anchor) += 1.0f;
            }
        }
    }
    if (mask) apply_mask(params, *mask);
    return params;
}

inline WeightSet standalone_init_from(const ReprLayout& lo, const std::vector<float>& iota, const AsymMask* mask) {
    WeightSet ws = unflatten_standalone(iota, lo, nullptr);
    for (auto& l : ws.layers) {
        float s = 1.0f / std::sqrt(float(l.W.cols()));
        for (auto& x : l.W.vec()) x *= s;
        for (auto& x : l.b.vec()) x *= s;
    }
    if (mask) apply_mask(ws, *mask);
    return ws;
}

// --- adapted forward ------------------------------------------------------------------

struct LoraVars {
    std::vector<Var> A, B; // aligned with adaptable_layers(arch)

    std::vector<Var> all() const {
        std::vector<Var> v;
        for (size_t i = 0; i < A.size(); ++i) {
            v.push_back(A[i]);
            v.push_back(B[i]);
        }
        return v;
    }
};

inline LoraVars lora_vars(const LoraParams& params, bool trainable) {
    LoraVars v;
    for (const auto& l : params.layers) {
        v.A.push_back(detail::lift(l.A, trainable));
        v.B.push_back(detail::lift(l.B, trainable));
    }
    return v;
}

inline void store_lora(const LoraVars& v, LoraParams& params) {
    for (size_t i = 0; i < params.layers.size(); ++i) {
        params.layers[i].A = v.A[i].value();
        params.layers[i].B = v.B[i].value();
    }
}

/// Fixed pieces of an adapted-field fit: base weights as constants and the
/// style vectors of the base mapping network at z = 0.
struct LoraContext {
    FieldArch arch;
    LoraMode mode = LoraMode::multiplicative;
    ModulatedVars base;
    std::vector<Var> styles0;
};

inline LoraContext make_lora_context(const FieldArch& arch, const WeightSet& base_ws, LoraMode mode) {
    LoraContext ctx;
    ctx.arch = arch;
    ctx.mode = mode;
    ctx.base = modulated_vars(arch, base_ws, false);
    Var z0 = Var::constant(Tensor::zeros({1, arch.latent_dim}));
    auto styles = mapping_styles(arch, ctx.base, z0);
    for (auto& s : styles) ctx.styles0.push_back(Var::constant(s.value()));
    return ctx;
}

/// Graph forward: base field at z = 0 with every trunk matrix W replaced by
/// the adapted W' before modulation/demodulation.
inline Var lora_forward(const LoraContext& ctx, const LoraVars& v, const Var& P) {
    if (v.A.size() != ctx.base.tW.size()) throw std::invalid_argument("lora_forward: adapter/trunk mismatch");
    std::vector<Var> adapted;
    adapted.reserve(v.A.size());
    for (size_t l = 0; l < v.A.size(); ++l) {
        Var delta = matmul(v.B[l], v.A[l]);
        adapted.push_back(ctx.mode == LoraMode::additive ? add(ctx.base.tW[l], delta) : mul(ctx.base.tW[l], delta));
    }
    return modulated_forward_with(ctx.arch, ctx.base, adapted, ctx.styles0, P);
}

/// Materialize the adapted weights as a plain weight set (for chunked
/// evaluation and export); the field equals lora_forward with z = 0.
inline WeightSet materialize_adapted(const FieldArch& arch, const WeightSet& base_ws, const LoraParams& params) {
    WeightSet ws = base_ws;
    auto names = adaptable_layers(arch);
    if (names.size() != params.layers.size()) throw std::invalid_argument("materialize_adapted: layer mismatch");
    for (size_t i = 0; i < names.size(); ++i) {
        auto& l = ws.find(names[i]);
        l.W = params.mode == LoraMode::additive ? apply_additive(l.W, params.layers[i].A, params.layers[i].B)
                                                : apply_multiplicative(l.W, params.layers[i].A, params.layers[i].B);
    }
    return ws;
}

inline Tensor lora_eval(const FieldArch& arch, const WeightSet& base_ws, const LoraParams& params, const Tensor& P,
                        int chunk = 32768) {
    WeightSet adapted = materialize_adapted(arch, base_ws, params);
    return field_eval(arch, adapted, Tensor::zeros({1, arch.latent_dim}), P, chunk);
}

} // namespace wsf
