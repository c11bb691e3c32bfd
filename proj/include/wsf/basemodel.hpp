#pragma once

#include <cmath>
#include <functional>
#include <stdexcept>
#include <string>
#include <vector>

#include "wsf/autodiff.hpp"
#include "wsf/datastore.hpp"
#include "wsf/field.hpp"
#include "wsf/fitting.hpp"
#include "wsf/optim.hpp"

namespace wsf {

// ---------------------------------------------------------------------------
// Base-model training: jointly optimize a modulated field's weights and one
// latent code per instance on a reconstruction + latent-regularization
// objective, under a progressive schedule that trades instance batch size
// for points per instance, with an EMA copy of the field weights.
// ---------------------------------------------------------------------------

struct StageConfig {
    int batch = 16;
    int points = 1024;
};

struct BaseTrainConfig {
    std::vector<StageConfig> stages = {{64, 256}, {16, 1024}, {8, 4096}};
    int steps_per_stage = 300;
    double lr_start = 1e-3;
    double lr_end = 1e-5;
    int lr_stages = 5;
    float lambda_r = 1e-4f;
    double ema_decay = 0.999;
    uint64_t seed = 0;

    int total_steps() const { return steps_per_stage * int(stages.size()); }

    void validate() const {
        if (stages.empty()) throw std::invalid_argument("progressive schedule: needs at least one stage");
        if (steps_per_stage < 1) throw std::invalid_argument("progressive schedule: steps_per_stage must be >= 1");
        for (size_t i = 0; i < stages.size(); ++i) {
            if (stages[i].batch < 1 || stages[i].points < 1)
                throw std::invalid_argument("progressive schedule: batch and points must be >= 1");
            if (i > 0 && stages[i].batch > stages[i - 1].batch)
                throw std::invalid_argument("progressive schedule: batch sizes must be non-increasing");
            if (i > 0 && stages[i].points < stages[i - 1].points)
                throw std::invalid_argument("progressive schedule: points must be non-decreasing");
        }
        if (lambda_r < 0) throw std::invalid_argument("BaseTrainConfig: lambda_r must be >= 0");
        if (ema_decay <= 0 || ema_decay >= 1) throw std::invalid_argument("BaseTrainConfig: ema_decay in (0,1)");
    }
};

struct BaseModel {
    FieldArch arch;
    WeightSet weights_raw;
    WeightSet weights_ema; // the copy used downstream
    Tensor latents;        // N x latent_dim
};

struct BaseTrainResult {
    BaseModel model;
    std::vector<double> loss_history; // one entry per step
};

/// Runs the full progressive schedule. Deterministic in cfg.seed; raises on
/// a non-finite loss with stage/step context.
inline BaseTrainResult train_base(const FieldArch& arch, const std::vector<InstanceRecord>& instances,
                                  const BaseTrainConfig& cfg,
                                  const std::function<void(int, double, double)>& log = nullptr) {
    cfg.validate();
    if (arch.kind != FieldKind::modulated)
        throw std::invalid_argument("train_base: architecture must be modulated");
    if (instances.empty()) throw std::invalid_argument("train_base: empty instance list");
    const int n = int(instances.size());

    Rng root(cfg.seed);
    Rng init_rng = root.stream(rng_purpose::model_init, 0);
    WeightSet ws0 = init_weights(arch, init_rng);
    ModulatedVars theta = modulated_vars(arch, ws0, true);
    std::vector<Var> theta_params = theta.all();

    // one latent per instance, z ~ N(0, 0.01 I)
    std::vector<Var> zs;
    zs.reserve(size_t(n));
    Rng z_rng = root.stream(rng_purpose::model_init, 1);
    for (int i = 0; i < n; ++i) {
        Tensor z({1, arch.latent_dim});
        for (auto& v : z.vec()) v = z_rng.normal(0.0f, 0.1f);
        zs.push_back(Var::param(std::move(z)));
    }

    std::vector<Var> all_params = theta_params;
    all_params.insert(all_params.end(), zs.begin(), zs.end());
    Adam opt(all_params);
    EmaTracker ema(theta_params, cfg.ema_decay);
    LrSchedule sched = LrSchedule::staged(cfg.lr_start, cfg.lr_end, cfg.total_steps(), cfg.lr_stages);

    BaseTrainResult out;
    out.loss_history.reserve(size_t(cfg.total_steps()));

    std::vector<int> order(static_cast<size_t>(n));
    for (int i = 0; i < n; ++i) order[size_t(i)] = i;

    for (int step = 0; step < cfg.total_steps(); ++step) {
        const int stage = step / cfg.steps_per_stage;
        const StageConfig& sc = cfg.stages[size_t(stage)];
        const int batch = std::min(sc.batch, n);
        Rng step_rng = root.stream(rng_purpose::base_training, uint64_t(step));

        // batch = a random prefix of a partially shuffled instance order
        for (int i = 0; i < batch; ++i) {
            int j = i + int(step_rng.next_below(uint64_t(n - i)));
            std::swap(order[size_t(i)], order[size_t(j)]);
        }

        Var total;
        for (int bi = 0; bi < batch; ++bi) {
            const InstanceRecord& inst = instances[size_t(order[size_t(bi)])];
            CoordBatch cb = inst.modality == Modality::image2d
                                ? sample_image_batch(inst.image, sc.points, step_rng)
                                : sample_sdf_batch(inst.sdf, sc.points, step_rng);
            Var P = Var::constant(std::move(cb.coords));
            const Var& z = zs[size_t(order[size_t(bi)])];
            Var pred = modulated_forward(arch, theta, z, P);
            // SDF targets clamped to the near-surface band; predictions stay
            // raw so the gradient cannot die outside the band.
            if (inst.modality == Modality::sdf3d)
                for (auto& v : cb.targets.vec()) v = std::min(std::max(v, -0.1f), 0.1f);
            Var rec = mse(pred, Var::constant(std::move(cb.targets)));
            Var li = add(rec, scale(sum(mul(z, z)), cfg.lambda_r));
            total = total.defined() ? add(total, li) : li;
        }
        Var loss = scale(total, 1.0f / float(batch));
        double lv = double(loss.value()[0]);
        if (!std::isfinite(lv))
            throw std::runtime_error("base training: non-finite loss at stage " + std::to_string(stage) +
                                     " step " + std::to_string(step));
        backward(loss);
        try {
            opt.step(sched.at(step));
        } catch (const std::runtime_error& e) {
            throw std::runtime_error("base training: stage " + std::to_string(stage) + " step " +
                                     std::to_string(step) + ": " + e.what());
        }
        opt.zero_grad();
        ema.update(theta_params);
        out.loss_history.push_back(lv);
        if (log) log(step, lv, sched.at(step));
    }

    out.model.arch = arch;
    out.model.weights_raw = make_weight_set(arch);
    store_modulated(arch, theta, out.model.weights_raw);
    out.model.weights_ema = make_weight_set(arch);
    store_modulated_values(arch, ema.values(), out.model.weights_ema);
    out.model.latents = Tensor({n, arch.latent_dim});
    for (int i = 0; i < n; ++i)
        std::copy(zs[size_t(i)].value().data(), zs[size_t(i)].value().data() + arch.latent_dim,
                  out.model.latents.data() + int64_t(i) * arch.latent_dim);
    return out;
}

// --- checkpoint IO --------------------------------------------------------------

/// Base-model checkpoint: one JSON header line (magic BMC1) followed by the
/// raw weights, EMA weights, and latent codes as little-endian float32.
inline void write_checkpoint(const std::string& path, const BaseModel& m) {
    std::vector<float> raw = m.weights_raw.flatten();
    std::vector<float> ema = m.weights_ema.flatten();
    if (raw.size() != ema.size()) throw std::invalid_argument("write_checkpoint: raw/EMA length mismatch");

    std::vector<float> payload;
    payload.reserve(raw.size() + ema.size() + m.latents.vec().size());
    payload.insert(payload.end(), raw.begin(), raw.end());
    payload.insert(payload.end(), ema.begin(), ema.end());
    payload.insert(payload.end(), m.latents.vec().begin(), m.latents.vec().end());

    std::vector<unsigned char> bytes(payload.size() * 4);
    if (!payload.empty()) std::memcpy(bytes.data(), payload.data(), bytes.size());
    wsd_detail::to_little_endian_inplace(bytes);

    json header = {{"magic", "BMC1"},
                   {"version", 1},
                   {"arch", arch_manifest(m.arch)},
                   {"arch_hash", arch_hash(m.arch)},
                   {"theta_len", raw.size()},
                   {"count", m.latents.rows()},
                   {"latent_dim", m.arch.latent_dim},
                   {"data_hash", content_hash(bytes.data(), bytes.size())}};
    std::string head = header.dump();
    head.push_back('\n');
    std::vector<unsigned char> out(head.begin(), head.end());
    out.insert(out.end(), bytes.begin(), bytes.end());
    write_file_bytes(path, out.data(), out.size());
}

inline BaseModel read_checkpoint(const std::string& path) {
    auto buf = read_file_bytes(path);
    auto nl = std::find(buf.begin(), buf.end(), static_cast<unsigned char>('\n'));
    if (nl == buf.end()) throw std::runtime_error("checkpoint " + path + ": missing header line");
    json header = json::parse(std::string(buf.begin(), nl));
    if (header.value("magic", "") != std::string("BMC1"))
        throw std::runtime_error("checkpoint " + path + ": bad magic, expected BMC1");
    if (header.value("version", 0) != 1) throw std::runtime_error("checkpoint " + path + ": unsupported version");

    BaseModel m;
    m.arch = arch_from_manifest(header.at("arch"));
    std::string expect_arch = header.at("arch_hash").get<std::string>();
    if (expect_arch != arch_hash(m.arch))
        throw std::runtime_error("checkpoint " + path + ": arch hash mismatch, expected " + expect_arch +
                                 " actual " + arch_hash(m.arch));

    size_t theta_len = header.at("theta_len").get<size_t>();
    int count = header.at("count").get<int>();
    int latent_dim = header.at("latent_dim").get<int>();
    if (latent_dim != m.arch.latent_dim)
        throw std::runtime_error("checkpoint " + path + ": latent_dim does not match arch");
    size_t total = theta_len * 2 + size_t(count) * size_t(latent_dim);

    size_t off = size_t(nl - buf.begin()) + 1;
    if (buf.size() - off != total * 4)
        throw std::runtime_error("checkpoint " + path + ": payload is " + std::to_string(buf.size() - off) +
                                 " bytes, expected " + std::to_string(total * 4));
    std::string expect = header.at("data_hash").get<std::string>();
    std::string actual = content_hash(buf.data() + off, total * 4);
    if (expect != actual)
        throw std::runtime_error("checkpoint " + path + ": data hash mismatch, expected " + expect + " actual " +
                                 actual);

    std::vector<unsigned char> bytes(buf.begin() + long(off), buf.end());
    wsd_detail::to_little_endian_inplace(bytes);
    std::vector<float> payload(total);
    if (total) std::memcpy(payload.data(), bytes.data(), bytes.size());

    m.weights_raw = make_weight_set(m.arch);
    m.weights_ema = make_weight_set(m.arch);
    if (size_t(m.weights_raw.param_count()) != theta_len)
        throw std::runtime_error("checkpoint " + path + ": theta_len does not match arch");
    m.weights_raw.unflatten(std::vector<float>(payload.begin(), payload.begin() + long(theta_len)));
    m.weights_ema.unflatten(
        std::vector<float>(payload.begin() + long(theta_len), payload.begin() + long(2 * theta_len)));
    m.latents = Tensor({count, latent_dim});
    std::copy(payload.begin() + long(2 * theta_len), payload.end(), m.latents.vec().begin());
    return m;
}

} // namespace wsf
