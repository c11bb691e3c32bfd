#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "wsf/fitting.hpp"

using namespace wsf;

namespace {

// small architectures keep unit-test fits fast
FieldArch tiny_standalone_2d() {
    FieldArch a = image_arch_2d(FieldKind::standalone);
    a.hidden = 32;
    a.hidden_layers = 2;
    return a;
}

FieldArch tiny_standalone_3d() {
    FieldArch a = sdf_arch_3d(FieldKind::standalone);
    a.hidden = 32;
    a.hidden_layers = 2;
    return a;
}

FieldArch tiny_modulated_2d() {
    FieldArch a = image_arch_2d(FieldKind::modulated);
    a.hidden = 32;
    a.blocks = 2;
    a.latent_dim = 8;
    a.mapping_width = 16;
    return a;
}

InstanceRecord constant_image(float value, int res, int64_t id = 0) {
    InstanceRecord r;
    r.id = id;
    r.modality = Modality::image2d;
    r.label = 0;
    r.image = make_image(res, res, 1);
    std::fill(r.image.pixels.begin(), r.image.pixels.end(), value);
    return r;
}

InstanceRecord sphere_instance(float radius, int64_t id = 0) {
    InstanceRecord r;
    r.id = id;
    r.modality = Modality::sdf3d;
    r.label = 0;
    r.sdf.prims.push_back({SdfPrimKind::sphere, {0, 0, 0}, {radius, 0, 0, 0}});
    return r;
}

double cosine(const std::vector<float>& a, const std::vector<float>& b) {
    double d = 0, na = 0, nb = 0;
    for (size_t i = 0; i < a.size(); ++i) {
        d += double(a[i]) * b[i];
        na += double(a[i]) * a[i];
        nb += double(b[i]) * b[i];
    }
    return d / (std::sqrt(na) * std::sqrt(nb));
}

} // namespace

TEST_CASE("psnr formula and sentinel", "[fitting]") {
    Tensor a({2, 2}, {0.1f, 0.2f, 0.3f, 0.4f});
    REQUIRE(psnr(a, a) == 99.0);
    // uniform error of 0.1 -> MSE 0.01 -> 20 dB
    Tensor b = a;
    for (auto& v : b.vec()) v += 0.1f;
    REQUIRE(psnr(a, b) == Catch::Approx(20.0).margin(1e-4));
    Tensor c({1, 3});
    REQUIRE_THROWS_AS(psnr(a, c), std::invalid_argument);
}

TEST_CASE("parameterization names round trip", "[fitting]") {
    for (ParamKind k : {ParamKind::mlp, ParamKind::mlp_asym, ParamKind::lora, ParamKind::lora_asym,
                        ParamKind::mlora, ParamKind::mlora_asym})
        REQUIRE(param_kind_from(to_string(k)) == k);
    REQUIRE_THROWS_AS(param_kind_from("dora"), std::runtime_error);
    REQUIRE(kind_mode(ParamKind::mlora_asym) == LoraMode::multiplicative);
    REQUIRE(kind_mode(ParamKind::lora) == LoraMode::additive);
    REQUIRE(kind_is_masked(ParamKind::mlp_asym));
    REQUIRE_FALSE(kind_is_masked(ParamKind::mlora));
}

TEST_CASE("image batch samples pixel centers with exact targets", "[fitting]") {
    ToyImageSpec spec;
    spec.res = 16;
    auto inst = gen_toy_images(spec, 1, 5)[0];
    Rng r(9);
    CoordBatch b = sample_image_batch(inst.image, 300, r);
    REQUIRE(b.coords.rows() == 300);
    for (int i = 0; i < 300; ++i) {
        float x = b.coords.at(i, 0), y = b.coords.at(i, 1);
        REQUIRE(x >= -1.0f);
        REQUIRE(x <= 1.0f);
        // invert the pixel-center map and compare against the stored value
        int c = int(std::lround((x + 1.0f) * 16 / 2.0f - 0.5f));
        int rr = int(std::lround((y + 1.0f) * 16 / 2.0f - 0.5f));
        REQUIRE(b.targets.at(i, 0) == inst.image.at(rr, c));
    }
}

TEST_CASE("sdf batch mixes near-surface and uniform samples", "[fitting]") {
    auto inst = sphere_instance(0.5f);
    Rng r(11);
    CoordBatch b = sample_sdf_batch(inst.sdf, 10000, r);
    int near = 0;
    for (int i = 0; i < b.coords.rows(); ++i) {
        float x = b.coords.at(i, 0), y = b.coords.at(i, 1), z = b.coords.at(i, 2);
        REQUIRE(std::fabs(x) <= 1.0f);
        REQUIRE(b.targets.at(i, 0) == sdf_eval(inst.sdf, x, y, z)); // exact supervision
        if (std::fabs(b.targets.at(i, 0)) < 0.1f) ++near;
    }
    // half the draws target the near-surface band (within binomial noise)
    REQUIRE(near >= 4500);
    REQUIRE(near <= 5800); // uniform draws can land in the band too
}

TEST_CASE("fit config validation", "[fitting]") {
    FitConfig cfg;
    cfg.kind = ParamKind::lora;
    cfg.protocol = FitConfig::Protocol::first_instance;
    REQUIRE_THROWS_AS(cfg.validate(), std::invalid_argument);
    cfg.protocol = FitConfig::Protocol::shared_random;
    cfg.steps = 0;
    REQUIRE_THROWS_AS(cfg.validate(), std::invalid_argument);
    cfg.steps = 10;
    cfg.kind = ParamKind::mlp_asym;
    cfg.kappa = 0.0f;
    REQUIRE_THROWS_AS(cfg.validate(), std::invalid_argument);
}

TEST_CASE("mask descriptors rebuild the identical mask", "[fitting]") {
    FieldArch arch = tiny_modulated_2d();
    FitConfig cfg;
    cfg.kind = ParamKind::mlora_asym;
    cfg.rank = 4;
    cfg.seed = 77;
    AsymMask m = make_fit_mask(arch, cfg);
    AsymMask back = mask_from_descriptor(arch, mask_descriptor(cfg, m));
    REQUIRE(back.layers.size() == m.layers.size());
    for (size_t l = 0; l < m.layers.size(); ++l) {
        REQUIRE(back.layers[l].layer == m.layers[l].layer);
        REQUIRE(back.layers[l].row == m.layers[l].row);
        REQUIRE(back.layers[l].col == m.layers[l].col);
        REQUIRE(back.layers[l].value == m.layers[l].value);
    }
}

TEST_CASE("mlp fit reaches high psnr on a constant image", "[fitting]") {
    FieldArch arch = tiny_standalone_2d();
    FitConfig cfg;
    cfg.kind = ParamKind::mlp;
    cfg.steps = 500;
    cfg.points = 256;
    cfg.seed = 3;
    auto inst = constant_image(0.5f, 16);
    ReprLayout layout = make_fit_layout(arch, cfg, nullptr);
    auto init = initial_representation(layout, draw_shared_init(layout, cfg.seed), nullptr);
    FitResult res = fit_instance(arch, cfg, layout, inst, init, nullptr, nullptr);
    REQUIRE(res.metric > 60.0);
    REQUIRE(res.loss_curve.front() > res.loss_curve.back());
    REQUIRE(int64_t(res.repr.size()) == layout.length);
}

TEST_CASE("fits are bit-deterministic given the seed", "[fitting]") {
    FieldArch arch = tiny_standalone_2d();
    FitConfig cfg;
    cfg.kind = ParamKind::mlp;
    cfg.steps = 50;
    cfg.points = 128;
    cfg.seed = 21;
    ToyImageSpec spec;
    spec.res = 16;
    auto inst = gen_toy_images(spec, 1, 13)[0];
    ReprLayout layout = make_fit_layout(arch, cfg, nullptr);
    auto init = initial_representation(layout, draw_shared_init(layout, cfg.seed), nullptr);
    FitResult a = fit_instance(arch, cfg, layout, inst, init, nullptr, nullptr);
    FitResult b = fit_instance(arch, cfg, layout, inst, init, nullptr, nullptr);
    REQUIRE(a.repr == b.repr);
    REQUIRE(a.metric == b.metric);
}

TEST_CASE("dataset builds are independent of the worker count", "[fitting]") {
    FieldArch arch = tiny_standalone_2d();
    FitConfig cfg;
    cfg.kind = ParamKind::mlp_asym;
    cfg.steps = 40;
    cfg.points = 128;
    cfg.seed = 8;
    ToyImageSpec spec;
    spec.res = 16;
    auto insts = gen_toy_images(spec, 5, 30);
    WeightDataset d1 = build_dataset(arch, cfg, insts, nullptr, "", 1);
    WeightDataset d4 = build_dataset(arch, cfg, insts, nullptr, "", 4);
    REQUIRE(d1.data == d4.data);
    REQUIRE(d1.ids == d4.ids);
    REQUIRE(d1.count() == 5);
    for (int i = 0; i < 5; ++i) REQUIRE(d1.ids[size_t(i)] == i); // input order
    REQUIRE(d1.mask.is_object());
    REQUIRE(d1.parameterization == "mlp-asym");
}

TEST_CASE("empty dataset build produces a valid header", "[fitting]") {
    FieldArch arch = tiny_standalone_2d();
    FitConfig cfg;
    cfg.kind = ParamKind::mlp;
    WeightDataset ds = build_dataset(arch, cfg, {}, nullptr, "", 1);
    REQUIRE(ds.count() == 0);
    REQUIRE(ds.record_len == int(make_fit_layout(arch, cfg, nullptr).length));
    REQUIRE(ds.parameterization == "mlp");
}

TEST_CASE("first-instance protocol seeds later fits with the first solution", "[fitting]") {
    FieldArch arch = tiny_standalone_2d();
    FitConfig cfg;
    cfg.kind = ParamKind::mlp;
    cfg.steps = 400;
    cfg.points = 256;
    cfg.lr_start = 3e-3f; // low enough that Adam's step-noise random walk stays small
    cfg.seed = 5;
    cfg.protocol = FitConfig::Protocol::first_instance;
    ToyImageSpec spec;
    spec.res = 16;
    auto one = gen_toy_images(spec, 1, 77)[0];
    InstanceRecord two = one; // identical duplicate
    two.id = 1;
    WeightDataset ds = build_dataset(arch, cfg, {one, two}, nullptr, "", 2);
    REQUIRE(ds.count() == 2);
    REQUIRE(cosine(ds.record_vec(0), ds.record_vec(1)) >= 0.99);
}

TEST_CASE("adapter fits improve over the base field", "[fitting]") {
    FieldArch arch = tiny_modulated_2d();
    // an untrained but nontrivial base
    Rng wr(41);
    WeightSet base = init_weights(arch, wr);
    ToyImageSpec spec;
    spec.res = 16;
    auto inst = gen_toy_images(spec, 1, 55)[0];

    for (ParamKind k : {ParamKind::lora, ParamKind::mlora_asym}) {
        FitConfig cfg;
        cfg.kind = k;
        cfg.steps = 250;
        cfg.points = 256;
        cfg.rank = 4;
        cfg.seed = 10;
        std::optional<AsymMask> mask;
        if (kind_is_masked(k)) mask = make_fit_mask(arch, cfg);
        const AsymMask* mp = mask ? &*mask : nullptr;
        ReprLayout layout = make_fit_layout(arch, cfg, mp);
        auto init = initial_representation(layout, draw_shared_init(layout, cfg.seed), mp);

        // the initial representation evaluates to (almost exactly) the base field
        LoraParams p0 = unflatten_lora(init, layout, mp);
        Tensor grid = image_grid_coords(16);
        double base_psnr = psnr(lora_eval(arch, base, p0, grid), image_targets(inst.image));

        FitResult res = fit_instance(arch, cfg, layout, inst, init, &base, mp);
        INFO(to_string(k) << ": base " << base_psnr << " dB -> fitted " << res.metric << " dB");
        REQUIRE(res.metric > base_psnr + 3.0);
        REQUIRE(int64_t(res.repr.size()) == layout.length);
    }
}

TEST_CASE("sdf fit recovers a sphere surface", "[fitting]") {
    FieldArch arch = tiny_standalone_3d();
    FitConfig cfg;
    cfg.kind = ParamKind::mlp;
    cfg.steps = 500;
    cfg.points = 512;
    cfg.seed = 6;
    cfg.eval_res = 24;
    auto inst = sphere_instance(0.55f);
    ReprLayout layout = make_fit_layout(arch, cfg, nullptr);
    auto init = initial_representation(layout, draw_shared_init(layout, cfg.seed), nullptr);
    FitResult res = fit_instance(arch, cfg, layout, inst, init, nullptr, nullptr);
    INFO("chamfer " << res.metric);
    REQUIRE(res.metric < 0.02); // sum of mean squared distances, both directions
}

TEST_CASE("diverging fits fail with the instance id after one retry", "[fitting]") {
    FieldArch arch = tiny_standalone_2d();
    FitConfig cfg;
    cfg.kind = ParamKind::mlp;
    cfg.steps = 30;
    cfg.points = 64;
    cfg.lr_start = 1e14f; // guaranteed blow-up, even after the lr/10 retry
    cfg.lr_end = 1e14f;
    cfg.seed = 2;
    auto inst = constant_image(0.5f, 8, 17);
    ReprLayout layout = make_fit_layout(arch, cfg, nullptr);
    auto init = initial_representation(layout, draw_shared_init(layout, cfg.seed), nullptr);
    REQUIRE_THROWS_WITH(fit_instance(arch, cfg, layout, inst, init, nullptr, nullptr),
                        Catch::Matchers::ContainsSubstring("instance 17"));

    // and build_dataset marks the dataset partial instead of aborting
    WeightDataset ds = build_dataset(arch, cfg, {inst}, nullptr, "", 1);
    REQUIRE(ds.count() == 0);
    REQUIRE(ds.extra.at("partial") == true);
    REQUIRE(ds.extra.at("failed_ids")[0] == 17);
}
