#pragma once

#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

#include "wsf/autodiff.hpp"
#include "wsf/rng.hpp"

namespace wsf {

// ---------------------------------------------------------------------------
// Coordinate networks ("neural fields"): maps from R^n points to R^m signal
// values. Two trunk kinds share layer dimensions so their weights are
// directly comparable:
//   standalone  - Fourier feature layer, `hidden_layers` square ReLU layers,
//                 linear output head. One network per signal instance.
//   modulated   - Fourier feature layer, residual blocks of two modulated
//                 fully connected layers, linear output head; a mapping
//                 network turns a latent code into per-layer style vectors
//                 that scale the columns of each block weight matrix,
//                 followed by per-row demodulation.
// ---------------------------------------------------------------------------

enum class FieldKind { standalone, modulated };

struct FieldArch {
    FieldKind kind = FieldKind::standalone;
    int input_dim = 2;
    int output_dim = 1;
    float omega0 = 32.0f; // frequency scale of the Fourier feature layer
    int hidden = 64;      // trunk width
    int hidden_layers = 3; // standalone only: number of square hidden layers
    int blocks = 4;        // modulated only: residual blocks (2 layers each)
    int latent_dim = 32;   // modulated only
    int mapping_width = 64;
    int mapping_depth = 2;
    bool demodulate = true;
    float demod_eps = 1e-8f;

    int modulated_layers() const { return blocks * 2; }

    void validate() const {
        if (input_dim < 1 || output_dim < 1 || hidden < 1) throw std::invalid_argument("FieldArch: bad dims");
        if (kind == FieldKind::standalone && hidden_layers < 1)
            throw std::invalid_argument("FieldArch: standalone needs at least one hidden layer");
        if (kind == FieldKind::modulated && (blocks < 1 || latent_dim < 1 || mapping_depth < 1))
            throw std::invalid_argument("FieldArch: bad modulated config");
    }
};

/// Trunk defaults for 64x64 images: 2 -> 1, high-frequency Fourier layer.
inline FieldArch image_arch_2d(FieldKind kind) {
    FieldArch a;
    a.kind = kind;
    a.input_dim = 2;
    a.output_dim = 1;
    a.omega0 = 32.0f;
    a.hidden = 64;
    a.hidden_layers = 3;
    a.blocks = 4;
    a.latent_dim = 32;
    return a;
}

/// Trunk defaults for signed distance fields: 3 -> 1, low-frequency layer.
inline FieldArch sdf_arch_3d(FieldKind kind) {
    FieldArch a;
    a.kind = kind;
    a.input_dim = 3;
    a.output_dim = 1;
    a.omega0 = 1.0f;
    a.hidden = 64;
    a.hidden_layers = 3;
    a.blocks = 3;
    a.latent_dim = 32;
    return a;
}

struct NamedLayer {
    std::string name;
    Tensor W;
    Tensor b;
};

/// Ordered collection of layers; storage order is the canonical
/// serialization and flatten order (per layer: W row-major, then b).
struct WeightSet {
    std::vector<NamedLayer> layers;

    NamedLayer& find(const std::string& name) {
        for (auto& l : layers)
            if (l.name == name) return l;
        throw std::invalid_argument("WeightSet: no layer named " + name);
    }
    const NamedLayer& find(const std::string& name) const {
        return const_cast<WeightSet*>(this)->find(name);
    }

    int64_t param_count() const {
        int64_t n = 0;
        for (const auto& l : layers) n += l.W.numel() + l.b.numel();
        return n;
    }

    std::vector<float> flatten() const {
        std::vector<float> out;
        out.reserve(size_t(param_count()));
        for (const auto& l : layers) {
            out.insert(out.end(), l.W.vec().begin(), l.W.vec().end());
            out.insert(out.end(), l.b.vec().begin(), l.b.vec().end());
        }
        return out;
    }

    void unflatten(const std::vector<float>& v) {
        if (int64_t(v.size()) != param_count())
            throw std::invalid_argument("WeightSet::unflatten: length mismatch");
        size_t off = 0;
        for (auto& l : layers) {
            std::copy(v.begin() + long(off), v.begin() + long(off + size_t(l.W.numel())), l.W.vec().begin());
            off += size_t(l.W.numel());
            std::copy(v.begin() + long(off), v.begin() + long(off + size_t(l.b.numel())), l.b.vec().begin());
            off += size_t(l.b.numel());
        }
    }
};

// --- layer plans -------------------------------------------------------------

/// Zero-valued weight set with the canonical layer order for `arch`.
/// Standalone: fourier, hid0..hid{L-1}, out.
/// Modulated:  fourier, per block i and sublayer j: blk{i}.l{j} then style
///             affine blk{i}.s{j}, out, map0..map{D-1}.
inline WeightSet make_weight_set(const FieldArch& a) {
    a.validate();
    WeightSet ws;
    auto push = [&](const std::string& name, int rows, int cols) {
        ws.layers.push_back({name, Tensor::zeros({rows, cols}), Tensor::zeros({rows})});
    };
    push("fourier", a.hidden, a.input_dim);
    if (a.kind == FieldKind::standalone) {
        for (int l = 0; l < a.hidden_layers; ++l) push("hid" + std::to_string(l), a.hidden, a.hidden);
        push("out", a.output_dim, a.hidden);
    } else {
        for (int i = 0; i < a.blocks; ++i)
            for (int j = 0; j < 2; ++j) {
                push("blk" + std::to_string(i) + ".l" + std::to_string(j), a.hidden, a.hidden);
                push("blk" + std::to_string(i) + ".s" + std::to_string(j), a.hidden, a.mapping_width);
            }
        push("out", a.output_dim, a.hidden);
        for (int d = 0; d < a.mapping_depth; ++d)
            push("map" + std::to_string(d), a.mapping_width, d == 0 ? a.latent_dim : a.mapping_width);
    }
    return ws;
}

inline int64_t param_count(const FieldArch& a) { return make_weight_set(a).param_count(); }

/// Names of the square trunk matrices that adapters may modify.
inline std::vector<std::string> adaptable_layers(const FieldArch& a) {
    std::vector<std::string> names;
    if (a.kind == FieldKind::standalone) {
        for (int l = 0; l < a.hidden_layers; ++l) names.push_back("hid" + std::to_string(l));
    } else {
        for (int i = 0; i < a.blocks; ++i)
            for (int j = 0; j < 2; ++j) names.push_back("blk" + std::to_string(i) + ".l" + std::to_string(j));
    }
    return names;
}

/// He/SIREN-style initialization for training a base model from scratch.
/// Style affines start at the identity modulation (A = 0, bias = 1).
inline WeightSet init_weights(const FieldArch& a, Rng& rng) {
    WeightSet ws = make_weight_set(a);
    for (auto& l : ws.layers) {
        int fan_in = l.W.cols();
        if (l.name == "fourier") {
            for (auto& v : l.W.vec()) v = rng.normal();
            for (auto& v : l.b.vec()) v = rng.uniform(-3.14159265f, 3.14159265f);
        } else if (l.name.find(".s") != std::string::npos) {
            std::fill(l.W.vec().begin(), l.W.vec().end(), 0.0f);
            std::fill(l.b.vec().begin(), l.b.vec().end(), 1.0f);
        } else if (l.name == "out") {
            for (auto& v : l.W.vec()) v = rng.normal(0.0f, 1.0f / std::sqrt(float(fan_in)));
        } else {
            for (auto& v : l.W.vec()) v = rng.normal(0.0f, std::sqrt(2.0f / float(fan_in)));
        }
    }
    return ws;
}

// --- autodiff-facing parameter bundles ----------------------------------------

struct StandaloneVars {
    Var fW, fb;
    std::vector<Var> hW, hb;
    Var oW, ob;

    std::vector<Var> all() const {
        std::vector<Var> v{fW, fb};
        for (size_t i = 0; i < hW.size(); ++i) {
            v.push_back(hW[i]);
            v.push_back(hb[i]);
        }
        v.push_back(oW);
        v.push_back(ob);
        return v;
    }
};

struct ModulatedVars {
    Var fW, fb;
    std::vector<Var> tW, tb; // trunk, 2*blocks entries
    std::vector<Var> sA, sb; // style affines, aligned with tW
    Var oW, ob;
    std::vector<Var> mW, mb; // mapping net

    std::vector<Var> all() const {
        std::vector<Var> v{fW, fb};
        for (size_t i = 0; i < tW.size(); ++i) {
            v.push_back(tW[i]);
            v.push_back(tb[i]);
            v.push_back(sA[i]);
            v.push_back(sb[i]);
        }
        v.push_back(oW);
        v.push_back(ob);
        for (size_t i = 0; i < mW.size(); ++i) {
            v.push_back(mW[i]);
            v.push_back(mb[i]);
        }
        return v;
    }
};

namespace detail {
inline Var lift(const Tensor& t, bool trainable) { return trainable ? Var::param(t) : Var::constant(t); }
}

inline StandaloneVars standalone_vars(const FieldArch& a, const WeightSet& ws, bool trainable) {
    StandaloneVars v;
    v.fW = detail::lift(ws.find("fourier").W, trainable);
    v.fb = detail::lift(ws.find("fourier").b, trainable);
    for (int l = 0; l < a.hidden_layers; ++l) {
        const auto& lay = ws.find("hid" + std::to_string(l));
        v.hW.push_back(detail::lift(lay.W, trainable));
        v.hb.push_back(detail::lift(lay.b, trainable));
    }
    v.oW = detail::lift(ws.find("out").W, trainable);
    v.ob = detail::lift(ws.find("out").b, trainable);
    return v;
}

inline ModulatedVars modulated_vars(const FieldArch& a, const WeightSet& ws, bool trainable) {
    ModulatedVars v;
    v.fW = detail::lift(ws.find("fourier").W, trainable);
    v.fb = detail::lift(ws.find("fourier").b, trainable);
    for (int i = 0; i < a.blocks; ++i)
        for (int j = 0; j < 2; ++j) {
            const auto& t = ws.find("blk" + std::to_string(i) + ".l" + std::to_string(j));
            const auto& s = ws.find("blk" + std::to_string(i) + ".s" + std::to_string(j));
            v.tW.push_back(detail::lift(t.W, trainable));
            v.tb.push_back(detail::lift(t.b, trainable));
            v.sA.push_back(detail::lift(s.W, trainable));
            v.sb.push_back(detail::lift(s.b, trainable));
        }
    v.oW = detail::lift(ws.find("out").W, trainable);
    v.ob = detail::lift(ws.find("out").b, trainable);
    for (int d = 0; d < a.mapping_depth; ++d) {
        const auto& m = ws.find("map" + std::to_string(d));
        v.mW.push_back(detail::lift(m.W, trainable));
        v.mb.push_back(detail::lift(m.b, trainable));
    }
    return v;
}

/// Write current Var values back into a WeightSet (inverse of *_vars).
inline void store_standalone(const FieldArch& a, const StandaloneVars& v, WeightSet& ws) {
    ws.find("fourier").W = v.fW.value();
    ws.find("fourier").b = v.fb.value();
    for (int l = 0; l < a.hidden_layers; ++l) {
        ws.find("hid" + std::to_string(l)).W = v.hW[size_t(l)].value();
        ws.find("hid" + std::to_string(l)).b = v.hb[size_t(l)].value();
    }
    ws.find("out").W = v.oW.value();
    ws.find("out").b = v.ob.value();
}

/// Write a tensor list in ModulatedVars::all() order back into a WeightSet
/// (used for both live Var values and EMA shadow copies).
inline void store_modulated_values(const FieldArch& a, const std::vector<Tensor>& vals, WeightSet& ws) {
    size_t k = 0;
    auto next = [&]() -> const Tensor& { return vals.at(k++); };
    ws.find("fourier").W = next();
    ws.find("fourier").b = next();
    for (int i = 0; i < a.blocks; ++i)
        for (int j = 0; j < 2; ++j) {
            auto& t = ws.find("blk" + std::to_string(i) + ".l" + std::to_string(j));
            auto& s = ws.find("blk" + std::to_string(i) + ".s" + std::to_string(j));
            t.W = next();
            t.b = next();
            s.W = next();
            s.b = next();
        }
    ws.find("out").W = next();
    ws.find("out").b = next();
    for (int d = 0; d < a.mapping_depth; ++d) {
        auto& m = ws.find("map" + std::to_string(d));
        m.W = next();
        m.b = next();
    }
    if (k != vals.size()) throw std::invalid_argument("store_modulated_values: tensor count mismatch");
}

inline void store_modulated(const FieldArch& a, const ModulatedVars& v, WeightSet& ws) {
    std::vector<Tensor> vals;
    for (const auto& p : v.all()) vals.push_back(p.value());
    store_modulated_values(a, vals, ws);
}

// --- forward passes ------------------------------------------------------------

/// sin(omega0 * (P W^T + b)) for the Fourier feature layer.
inline Var fourier_layer(const FieldArch& a, const Var& W, const Var& b, const Var& P) {
    return sin_op(scale(add(matmul(P, W, false, true), b), a.omega0));
}

/// Standalone trunk: points (N x n) -> values (N x m).
inline Var standalone_forward(const FieldArch& a, const StandaloneVars& v, const Var& P) {
    Var x = fourier_layer(a, v.fW, v.fb, P);
    for (size_t l = 0; l < v.hW.size(); ++l) x = relu(add(matmul(x, v.hW[l], false, true), v.hb[l]));
    return add(matmul(x, v.oW, false, true), v.ob);
}

/// Column-modulate W by style s (1 x d_in), then optionally demodulate rows
/// to unit norm: w''_j = w'_j / sqrt(sum_k w'_jk^2 + eps).
inline Var modulate_weight(const FieldArch& a, const Var& W, const Var& s) {
    Var wp = mul(W, s);
    if (!a.demodulate) return wp;
    Var rs = sum_axis(mul(wp, wp), 1, true);
    return div(wp, sqrt_op(add_scalar(rs, a.demod_eps)));
}

/// Mapping network: latent z (1 x d_z) -> per-modulated-layer styles.
inline std::vector<Var> mapping_styles([[maybe_unused]] const FieldArch& a, const ModulatedVars& v, const Var& z) {
    Var h = z;
    for (size_t d = 0; d < v.mW.size(); ++d) h = relu(add(matmul(h, v.mW[d], false, true), v.mb[d]));
    std::vector<Var> styles;
    for (size_t l = 0; l < v.sA.size(); ++l) styles.push_back(add(matmul(h, v.sA[l], false, true), v.sb[l]));
    return styles;
}

/// Modulated trunk with externally supplied (possibly adapted) block weights.
/// `trunk_W` must align with v.tW; styles must align layer-for-layer.
inline Var modulated_forward_with(const FieldArch& a, const ModulatedVars& v, const std::vector<Var>& trunk_W,
                                  const std::vector<Var>& styles, const Var& P) {
    if (int(trunk_W.size()) != a.modulated_layers() || int(styles.size()) != a.modulated_layers())
        throw std::invalid_argument("modulated_forward: layer count mismatch");
    Var x = fourier_layer(a, v.fW, v.fb, P);
    for (int i = 0; i < a.blocks; ++i) {
        Var t = x;
        for (int j = 0; j < 2; ++j) {
            size_t l = size_t(2 * i + j);
            Var w = modulate_weight(a, trunk_W[l], styles[l]);
            x = relu(add(matmul(x, w, false, true), v.tb[l]));
        }
        x = add(x, t);
    }
    return add(matmul(x, v.oW, false, true), v.ob);
}

inline Var modulated_forward(const FieldArch& a, const ModulatedVars& v, const Var& z, const Var& P) {
    return modulated_forward_with(a, v, v.tW, mapping_styles(a, v, z), P);
}

// --- plain evaluation (no gradients, chunked) -----------------------------------

/// Evaluate a field on a point set without building a graph. `z` is ignored
/// for standalone archs. Chunked to bound peak memory on large grids.
inline Tensor field_eval(const FieldArch& a, const WeightSet& ws, const Tensor& z, const Tensor& P,
                         int chunk = 32768) {
    const int n = P.rows();
    Tensor out({n, a.output_dim});
    if (a.kind == FieldKind::standalone) {
        StandaloneVars v = standalone_vars(a, ws, false);
        for (int start = 0; start < n; start += chunk) {
            int cnt = std::min(chunk, n - start);
            Tensor block({cnt, a.input_dim});
            std::copy(P.data() + int64_t(start) * a.input_dim, P.data() + int64_t(start + cnt) * a.input_dim,
                      block.data());
            Tensor y = standalone_forward(a, v, Var::constant(std::move(block))).value();
            std::copy(y.data(), y.data() + y.numel(), out.data() + int64_t(start) * a.output_dim);
        }
    } else {
        ModulatedVars v = modulated_vars(a, ws, false);
        Var zc = Var::constant(z.ndim() == 1 ? z.reshaped({1, a.latent_dim}) : z);
        std::vector<Var> styles = mapping_styles(a, v, zc);
        for (int start = 0; start < n; start += chunk) {
            int cnt = std::min(chunk, n - start);
            Tensor block({cnt, a.input_dim});
            std::copy(P.data() + int64_t(start) * a.input_dim, P.data() + int64_t(start + cnt) * a.input_dim,
                      block.data());
            Tensor y = modulated_forward_with(a, v, v.tW, styles, Var::constant(std::move(block))).value();
            std::copy(y.data(), y.data() + y.numel(), out.data() + int64_t(start) * a.output_dim);
        }
    }
    return out;
}

} // namespace wsf
