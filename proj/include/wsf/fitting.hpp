#pragma once

#include <cmath>
#include <functional>
#include <mutex>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "wsf/autodiff.hpp"
#include "wsf/datastore.hpp"
#include "wsf/field.hpp"
#include "wsf/geometry.hpp"
#include "wsf/lora.hpp"
#include "wsf/optim.hpp"
#include "wsf/parallel.hpp"

namespace wsf {

// ---------------------------------------------------------------------------
// Per-instance fitting: produce one flattened representation per data
// instance under any of the six parameterizations, sharing a single random
// initialization (or the first instance's solution) across the dataset, and
// re-imposing mask-frozen entries after every optimizer step.
// ---------------------------------------------------------------------------

enum class ParamKind { mlp, mlp_asym, lora, lora_asym, mlora, mlora_asym };

inline const char* to_string(ParamKind k) {
    switch (k) {
    case ParamKind::mlp: return "mlp";
    case ParamKind::mlp_asym: return "mlp-asym";
    case ParamKind::lora: return "lora";
    case ParamKind::lora_asym: return "lora-asym";
    case ParamKind::mlora: return "mlora";
    case ParamKind::mlora_asym: return "mlora-asym";
    }
    throw std::logic_error("to_string: unknown ParamKind");
}

inline ParamKind param_kind_from(const std::string& s) {
    if (s == "mlp") return ParamKind::mlp;
    if (s == "mlp-asym") return ParamKind::mlp_asym;
    if (s == "lora") return ParamKind::lora;
    if (s == "lora-asym") return ParamKind::lora_asym;
    if (s == "mlora") return ParamKind::mlora;
    if (s == "mlora-asym") return ParamKind::mlora_asym;
    throw std::runtime_error("unknown parameterization: " + s);
}

inline bool kind_is_masked(ParamKind k) {
    return k == ParamKind::mlp_asym || k == ParamKind::lora_asym || k == ParamKind::mlora_asym;
}
inline bool kind_is_lora(ParamKind k) { return k != ParamKind::mlp && k != ParamKind::mlp_asym; }
inline LoraMode kind_mode(ParamKind k) {
    return (k == ParamKind::mlora || k == ParamKind::mlora_asym) ? LoraMode::multiplicative : LoraMode::additive;
}

struct FitConfig {
    ParamKind kind = ParamKind::mlp;
    int steps = 600;
    int points = 1024;
    float lr_start = 1e-2f;
    float lr_end = 1e-5f;
    int rank = 16;
    float kappa = 6.0f;
    uint64_t seed = 0;
    enum class Protocol { shared_random, first_instance };
    Protocol protocol = Protocol::shared_random;
    int eval_res = 24;        // marching-cubes resolution for the SDF metric
    int metric_points = 1024; // surface samples per side for the SDF metric

    void validate() const {
        if (steps < 1 || points < 1) throw std::invalid_argument("FitConfig: steps and points must be >= 1");
        if (lr_start <= 0 || lr_end <= 0) throw std::invalid_argument("FitConfig: learning rates must be > 0");
        if (kind_is_lora(kind) && rank < 1) throw std::invalid_argument("FitConfig: rank must be >= 1");
        if (protocol == Protocol::first_instance && kind_is_lora(kind))
            throw std::invalid_argument("FitConfig: first-instance protocol applies to standalone kinds only");
        if (kind_is_masked(kind) && kind != ParamKind::mlora_asym && kappa <= 0)
            throw std::invalid_argument("FitConfig: kappa must be > 0 for non-multiplicative masks");
    }
};

struct FitResult {
    std::vector<float> repr;
    double metric = 0.0;            // PSNR dB for images, chamfer for SDFs
    std::vector<double> loss_curve; // sampled across training
    int retries = 0;
};

// --- reconstruction metrics -------------------------------------------------

/// Peak signal-to-noise ratio on unit value range; a perfect (or >= 99 dB)
/// reconstruction reports the 99.0 sentinel.
inline double psnr(const Tensor& pred, const Tensor& gt) {
    if (!pred.same_shape(gt)) throw std::invalid_argument("psnr: shape mismatch");
    double se = 0.0;
    for (int64_t i = 0; i < pred.numel(); ++i) {
        double d = double(pred[i]) - double(gt[i]);
        se += d * d;
    }
    double mse = se / double(pred.numel());
    if (mse <= 0.0) return 99.0;
    double v = 10.0 * std::log10(1.0 / mse);
    return std::min(v, 99.0);
}

/// No-surface sentinel for the SDF chamfer metric: a fitted field whose zero
/// level set never crosses the sampling lattice gets this value.
inline constexpr double k_chamfer_no_surface = 1e3;

/// Chamfer between surface samples of a predicted field and of the analytic
/// ground truth, both meshed at the same lattice resolution.
inline double sdf_chamfer_metric(const std::vector<float>& pred_grid, const SdfDescriptor& gt, int res,
                                 int n_points, Rng pred_rng, Rng gt_rng) {
    Mesh pm = marching_cubes(pred_grid, res, 0.0f);
    if (pm.triangles.empty()) return k_chamfer_no_surface;
    Tensor coords = sdf_grid_coords(res);
    Tensor gt_vals = sdf_targets(gt, coords);
    Mesh gm = marching_cubes(gt_vals.vec(), res, 0.0f);
    if (gm.triangles.empty()) throw std::runtime_error("sdf_chamfer_metric: ground truth has no surface");
    Tensor pp = sample_surface(pm, n_points, pred_rng);
    Tensor gp = sample_surface(gm, n_points, gt_rng);
    return chamfer(pp, gp);
}

// --- coordinate sampling ------------------------------------------------------

struct CoordBatch {
    Tensor coords;
    Tensor targets;
};

/// Uniformly sampled pixel centers with their exact stored values.
inline CoordBatch sample_image_batch(const Image& im, int count, Rng& rng) {
    if (count < 1) throw std::invalid_argument("sample_image_batch: count must be >= 1");
    CoordBatch b{Tensor({count, 2}), Tensor({count, im.channels})};
    for (int i = 0; i < count; ++i) {
        int idx = int(rng.next_below(uint64_t(im.width) * uint64_t(im.height)));
        int r = idx / im.width, c = idx % im.width;
        b.coords.at(i, 0) = -1.0f + 2.0f * (float(c) + 0.5f) / float(im.width);
        b.coords.at(i, 1) = -1.0f + 2.0f * (float(r) + 0.5f) / float(im.height);
        for (int ch = 0; ch < im.channels; ++ch) b.targets.at(i, ch) = im.at(r, c, ch);
    }
    return b;
}

/// Half uniform-in-cube, half near-surface samples (|sdf| < band, found by
/// rejection), with exact analytic target values.
inline CoordBatch sample_sdf_batch(const SdfDescriptor& sdf, int count, Rng& rng, float band = 0.1f) {
    if (count < 1) throw std::invalid_argument("sample_sdf_batch: count must be >= 1");
    CoordBatch b{Tensor({count, 3}), Tensor({count, 1})};
    for (int i = 0; i < count; ++i) {
        float x = 0, y = 0, z = 0, v = 0;
        bool near = rng.uniform() < 0.5f;
        int attempts = near ? 64 : 1;
        for (int t = 0; t < attempts; ++t) {
            x = rng.uniform(-1.0f, 1.0f);
            y = rng.uniform(-1.0f, 1.0f);
            z = rng.uniform(-1.0f, 1.0f);
            v = sdf_eval(sdf, x, y, z);
            if (!near || std::fabs(v) < band) break;
        }
        b.coords.at(i, 0) = x;
        b.coords.at(i, 1) = y;
        b.coords.at(i, 2) = z;
        b.targets.at(i, 0) = v;
    }
    return b;
}

// --- masks and layouts ---------------------------------------------------------

inline AsymMask make_fit_mask(const FieldArch& arch, const FitConfig& cfg) {
    MaskTarget target = kind_is_lora(cfg.kind) ? MaskTarget::lora_b : MaskTarget::standalone_weights;
    return make_mask(arch, target, kind_mode(cfg.kind), cfg.rank, cfg.kappa, cfg.seed);
}

inline ReprLayout make_fit_layout(const FieldArch& arch, const FitConfig& cfg, const AsymMask* mask) {
    if (kind_is_lora(cfg.kind)) return layout_for_lora(arch, kind_mode(cfg.kind), cfg.rank, mask);
    return layout_for_standalone(arch, mask);
}

inline json mask_descriptor(const FitConfig& cfg, const AsymMask& mask) {
    return {{"target", kind_is_lora(cfg.kind) ? "lora_b" : "standalone"},
            {"mode", to_string(kind_mode(cfg.kind))},
            {"rank", cfg.rank},
            {"kappa", cfg.kappa},
            {"mask_seed", cfg.seed},
            {"frozen_count", mask.frozen_count()}};
}

/// Rebuilds the deterministic mask a dataset was produced with.
inline AsymMask mask_from_descriptor(const FieldArch& arch, const json& desc) {
    MaskTarget target =
        desc.at("target").get<std::string>() == "lora_b" ? MaskTarget::lora_b : MaskTarget::standalone_weights;
    LoraMode mode = desc.at("mode").get<std::string>() == std::string("multiplicative") ? LoraMode::multiplicative
                                                                                        : LoraMode::additive;
    return make_mask(arch, target, mode, desc.at("rank").get<int>(), desc.at("kappa").get<float>(),
                     desc.at("mask_seed").get<uint64_t>());
}

/// Shared raw initialization vector (length = representation length).
inline std::vector<float> draw_shared_init(const ReprLayout& layout, uint64_t seed) {
    Rng r = Rng(seed).stream(rng_purpose::init_vector, 0);
    std::vector<float> iota(size_t(layout.length));
    for (auto& v : iota) v = r.normal();
    return iota;
}

/// Transforms the raw shared vector into the initial representation.
inline std::vector<float> initial_representation(const ReprLayout& layout, const std::vector<float>& iota,
                                                 const AsymMask* mask) {
    if (layout.kind == ReprLayout::Kind::standalone) return flatten(standalone_init_from(layout, iota, mask), layout);
    return flatten(lora_init_from(layout, iota, mask), layout);
}

// --- per-instance fit ------------------------------------------------------------

namespace fit_detail {

struct MaskBinding {
    Var var;
    const LayerMask* mask;
};

inline void impose(const std::vector<MaskBinding>& bindings) {
    for (const auto& b : bindings) {
        Tensor& t = b.var.node()->val;
        const int cols = t.cols();
        for (int64_t k = 0; k < b.mask->count(); ++k)
            t[int64_t(b.mask->row[size_t(k)]) * cols + b.mask->col[size_t(k)]] = b.mask->value[size_t(k)];
    }
}

} // namespace fit_detail

/// Fits one instance from the given initial representation. Deterministic in
/// (config.seed, instance id); a non-finite loss or gradient triggers one
/// retry at a tenth of the learning rate before the fit fails.
inline FitResult fit_instance(const FieldArch& arch, const FitConfig& cfg, const ReprLayout& layout,
                              const InstanceRecord& inst, const std::vector<float>& init_repr,
                              const WeightSet* base_ws, const AsymMask* mask) {
    cfg.validate();
    if (int64_t(init_repr.size()) != layout.length)
        throw std::invalid_argument("fit_instance: init vector length does not match layout");
    if (kind_is_lora(cfg.kind) && !base_ws)
        throw std::invalid_argument("fit_instance: adapter fits need a base weight set");

    auto attempt = [&](double lr_scale, int retries) -> FitResult {
        // Build trainable variables (and mask bindings) for this kind.
        std::optional<StandaloneVars> svars;
        std::optional<LoraVars> lvars;
        std::optional<LoraContext> ctx;
        std::vector<Var> params;
        std::vector<fit_detail::MaskBinding> bindings;

        if (kind_is_lora(cfg.kind)) {
            LoraParams p0 = unflatten_lora(init_repr, layout, mask);
            ctx = make_lora_context(arch, *base_ws, kind_mode(cfg.kind));
            lvars = lora_vars(p0, true);
            params = lvars->all();
            if (mask) {
                auto names = adaptable_layers(arch);
                for (size_t i = 0; i < names.size(); ++i)
                    if (const LayerMask* lm = mask->find(names[i])) bindings.push_back({lvars->B[i], lm});
            }
        } else {
            WeightSet ws0 = unflatten_standalone(init_repr, layout, mask);
            svars = standalone_vars(arch, ws0, true);
            params = svars->all();
            if (mask) {
                for (int l = 0; l < arch.hidden_layers; ++l)
                    if (const LayerMask* lm = mask->find("hid" + std::to_string(l)))
                        bindings.push_back({svars->hW[size_t(l)], lm});
            }
        }

        Adam opt(params);
        LrSchedule sched = LrSchedule::cosine(double(cfg.lr_start) * lr_scale, double(cfg.lr_end) * lr_scale,
                                              cfg.steps);
        Rng sample_rng = Rng(cfg.seed).stream(rng_purpose::fit_sampling, uint64_t(inst.id));
        auto post = bindings.empty() ? std::function<void()>()
                                     : std::function<void()>([&]() { fit_detail::impose(bindings); });

        FitResult res;
        res.retries = retries;
        const int log_every = std::max(1, cfg.steps / 20);
        for (int step = 0; step < cfg.steps; ++step) {
            CoordBatch batch = inst.modality == Modality::image2d
                                   ? sample_image_batch(inst.image, cfg.points, sample_rng)
                                   : sample_sdf_batch(inst.sdf, cfg.points, sample_rng);
            Var P = Var::constant(std::move(batch.coords));
            Var pred = kind_is_lora(cfg.kind) ? lora_forward(*ctx, *lvars, P)
                                              : standalone_forward(arch, *svars, P);
            // SDF targets are clamped to the near-surface band; the raw
            // prediction regresses onto the clamped plateau, keeping the
            // gradient alive everywhere (clamping the prediction too lets a
            // field that overshoots the band die with zero gradient).
            if (inst.modality == Modality::sdf3d)
                for (auto& v : batch.targets.vec()) v = std::min(std::max(v, -0.1f), 0.1f);
            Var loss = mse(pred, Var::constant(std::move(batch.targets)));
            double lv = double(loss.value()[0]);
            if (!std::isfinite(lv))
                throw std::runtime_error("non-finite loss at step " + std::to_string(step));
            if (step % log_every == 0 || step + 1 == cfg.steps) res.loss_curve.push_back(lv);
            backward(loss);
            opt.step(sched.at(step), post);
            opt.zero_grad();
        }

        // Store the result and compute the reconstruction metric.
        if (kind_is_lora(cfg.kind)) {
            LoraParams out = unflatten_lora(init_repr, layout, mask); // shapes; values overwritten
            store_lora(*lvars, out);
            res.repr = flatten(out, layout);
            if (inst.modality == Modality::image2d) {
                Tensor grid = image_grid_coords(inst.image.width);
                res.metric = psnr(lora_eval(arch, *base_ws, out, grid), image_targets(inst.image));
            } else {
                Tensor vals = lora_eval(arch, *base_ws, out, sdf_grid_coords(cfg.eval_res));
                res.metric = sdf_chamfer_metric(vals.vec(), inst.sdf, cfg.eval_res, cfg.metric_points,
                                                Rng(cfg.seed).stream(rng_purpose::surface_sampling,
                                                                     uint64_t(inst.id) * 2),
                                                Rng(cfg.seed).stream(rng_purpose::surface_sampling,
                                                                     uint64_t(inst.id) * 2 + 1));
            }
        } else {
            WeightSet out = make_weight_set(arch);
            store_standalone(arch, *svars, out);
            res.repr = flatten(out, layout);
            Tensor z0 = Tensor::zeros({1, 1});
            if (inst.modality == Modality::image2d) {
                Tensor grid = image_grid_coords(inst.image.width);
                res.metric = psnr(field_eval(arch, out, z0, grid), image_targets(inst.image));
            } else {
                Tensor vals = field_eval(arch, out, z0, sdf_grid_coords(cfg.eval_res));
                res.metric = sdf_chamfer_metric(vals.vec(), inst.sdf, cfg.eval_res, cfg.metric_points,
                                                Rng(cfg.seed).stream(rng_purpose::surface_sampling,
                                                                     uint64_t(inst.id) * 2),
                                                Rng(cfg.seed).stream(rng_purpose::surface_sampling,
                                                                     uint64_t(inst.id) * 2 + 1));
            }
        }
        return res;
    };

    try {
        return attempt(1.0, 0);
    } catch (const std::runtime_error&) {
        try {
            return attempt(0.1, 1);
        } catch (const std::runtime_error& e2) {
            throw std::runtime_error("fit diverged for instance " + std::to_string(inst.id) + ": " + e2.what());
        }
    }
}

// --- dataset construction -----------------------------------------------------------

struct DatasetBuildReport {
    std::vector<int64_t> failed_ids;
    std::vector<double> metrics; // per successful record, in dataset order
};

/// Fits every instance and assembles a WeightDataset. All fits share one
/// initialization: a transformed random vector, or (first-instance protocol)
/// the fitted weights of instance 0. Instance order in the output matches
/// the input regardless of the worker count.
inline WeightDataset build_dataset(const FieldArch& arch, const FitConfig& cfg,
                                   const std::vector<InstanceRecord>& instances, const WeightSet* base_ws,
                                   const std::string& base_hash, int jobs = 1,
                                   DatasetBuildReport* report = nullptr) {
    cfg.validate();
    std::optional<AsymMask> mask;
    if (kind_is_masked(cfg.kind)) mask = make_fit_mask(arch, cfg);
    const AsymMask* mp = mask ? &*mask : nullptr;
    ReprLayout layout = make_fit_layout(arch, cfg, mp);

    std::vector<float> init = initial_representation(layout, draw_shared_init(layout, cfg.seed), mp);

    std::vector<std::optional<FitResult>> slots(instances.size());
    std::vector<int64_t> failed;
    std::mutex failed_mu;

    auto fit_one = [&](int i) {
        try {
            slots[size_t(i)] = fit_instance(arch, cfg, layout, instances[size_t(i)], init, base_ws, mp);
        } catch (const std::runtime_error& e) {
            std::lock_guard<std::mutex> lock(failed_mu);
            failed.push_back(instances[size_t(i)].id);
        }
    };

    int start = 0;
    if (cfg.protocol == FitConfig::Protocol::first_instance && !instances.empty()) {
        fit_one(0);
        start = 1;
        if (slots[0]) init = slots[0]->repr; // seed every later fit with instance 0's solution
    }
    parallel_for_indexed(int(instances.size()) - start, jobs, [&](int k) { fit_one(start + k); });

    WeightDataset ds;
    ds.arch = arch_manifest(arch);
    ds.parameterization = to_string(cfg.kind);
    if (mask) ds.mask = mask_descriptor(cfg, *mask);
    ds.record_len = int(layout.length);
    ds.extra = {{"protocol", cfg.protocol == FitConfig::Protocol::first_instance ? "first-instance" : "shared-random"},
                {"fit_seed", cfg.seed},
                {"steps", cfg.steps},
                {"points", cfg.points},
                {"rank", cfg.rank}};
    if (kind_is_lora(cfg.kind)) ds.extra["base_hash"] = base_hash;
    if (!failed.empty()) {
        std::sort(failed.begin(), failed.end());
        ds.extra["partial"] = true;
        ds.extra["failed_ids"] = failed;
    }
    for (size_t i = 0; i < instances.size(); ++i) {
        if (!slots[i]) continue;
        ds.append(instances[i].id, instances[i].label, slots[i]->metric, slots[i]->repr);
        if (report) report->metrics.push_back(slots[i]->metric);
    }
    if (report) report->failed_ids = failed;
    return ds;
}

} // namespace wsf
