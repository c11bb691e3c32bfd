#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>

#include "wsf/datastore.hpp"

using namespace wsf;
namespace fs = std::filesystem;

namespace {

struct TempDir {
    fs::path path;
    TempDir() {
        path = fs::temp_directory_path() / ("wsf_test_" + std::to_string(::getpid()) + "_" +
                                            std::to_string(rand()));
        fs::create_directories(path);
    }
    ~TempDir() { fs::remove_all(path); }
    std::string file(const std::string& name) const { return (path / name).string(); }
};

} // namespace

TEST_CASE("fnv-1a 64-bit matches published reference values", "[datastore]") {
    // reference vectors for the FNV-1a 64-bit function
    REQUIRE(fnv1a64("", 0) == 14695981039346656037ull);
    REQUIRE(fnv1a64("a", 1) == 0xaf63dc4c8601ec8cull);
    REQUIRE(fnv1a64("foobar", 6) == 0x85944171f73967e8ull);
    REQUIRE(content_hash(std::string("foobar")) == "85944171f73967e8");
}

TEST_CASE("toy image generator is deterministic and balanced", "[datastore]") {
    ToyImageSpec spec;
    spec.res = 32;
    auto a = gen_toy_images(spec, 3, 42);
    REQUIRE(a.size() == 3);
    REQUIRE(a[0].label == 0);
    REQUIRE(a[1].label == 1);
    REQUIRE(a[2].label == 2);

    auto b = gen_toy_images(spec, 3, 42);
    for (int i = 0; i < 3; ++i) REQUIRE(a[size_t(i)].image.pixels == b[size_t(i)].image.pixels);
    auto c = gen_toy_images(spec, 3, 43);
    REQUIRE(a[0].image.pixels != c[0].image.pixels);

    auto ten = gen_toy_images(spec, 10, 7);
    int counts[3] = {0, 0, 0};
    for (const auto& r : ten) {
        counts[r.label]++;
        for (float v : r.image.pixels) {
            REQUIRE(v >= 0.0f);
            REQUIRE(v <= 1.0f);
        }
    }
    REQUIRE(counts[0] == 4);
    REQUIRE(counts[1] == 3);
    REQUIRE(counts[2] == 3);
}

TEST_CASE("centered disk covers the analytic pixel fraction", "[datastore]") {
    ShapeParams s;
    s.kind = ShapeKind::disk;
    s.cx = s.cy = 0.0f;
    s.p0 = 0.3f;
    s.intensity = 1.0f;
    Image im = render_shape(s, 64);
    int above = 0;
    for (float v : im.pixels) above += v > 0.5f;
    double frac = double(above) / (64.0 * 64.0);
    double analytic = 3.14159265358979 * 0.09 / 4.0;
    REQUIRE(std::fabs(frac - analytic) / analytic < 0.02);
}

TEST_CASE("renderer anti-aliases shape boundaries", "[datastore]") {
    ShapeParams s;
    s.kind = ShapeKind::disk;
    s.p0 = 0.4f;
    Image im = render_shape(s, 64);
    int partial = 0;
    for (float v : im.pixels) partial += v > 0.05f && v < 0.95f;
    REQUIRE(partial > 20); // boundary pixels carry fractional coverage
}

TEST_CASE("pgm round trip is lossless at 8-bit quantization", "[datastore]") {
    TempDir td;
    Image im = make_image(64, 64, 1);
    for (int r = 0; r < 64; ++r)
        for (int c = 0; c < 64; ++c) im.at(r, c) = (r * 64.0f + c) / 4095.0f;
    write_pnm(td.file("g.pgm"), im);
    Image back = read_pnm(td.file("g.pgm"));
    REQUIRE(back.width == 64);
    REQUIRE(back.height == 64);
    REQUIRE(back.channels == 1);
    for (size_t i = 0; i < im.pixels.size(); ++i)
        REQUIRE(std::fabs(back.pixels[i] - im.pixels[i]) <= 1.0f / 255.0f);
    // second write is byte-identical (deterministic quantization)
    write_pnm(td.file("g2.pgm"), back);
    write_pnm(td.file("g3.pgm"), back);
    REQUIRE(read_file_bytes(td.file("g2.pgm")) == read_file_bytes(td.file("g3.pgm")));
}

TEST_CASE("ppm round trip and ascii variants parse", "[datastore]") {
    TempDir td;
    Image im = make_image(5, 4, 3);
    for (size_t i = 0; i < im.pixels.size(); ++i) im.pixels[i] = float(i) / float(im.pixels.size());
    write_pnm(td.file("c.ppm"), im);
    Image back = read_pnm(td.file("c.ppm"));
    REQUIRE(back.channels == 3);
    REQUIRE(back.width == 5);
    for (size_t i = 0; i < im.pixels.size(); ++i)
        REQUIRE(std::fabs(back.pixels[i] - im.pixels[i]) <= 1.0f / 255.0f);

    {
        std::ofstream f(td.file("a.pgm"));
        f << "P2\n# a comment\n2 2\n255\n0 128\n# mid-raster comment\n255 64\n";
    }
    Image a = read_pnm(td.file("a.pgm"));
    REQUIRE(a.at(0, 0) == 0.0f);
    REQUIRE(a.at(0, 1) == Catch::Approx(128.0f / 255.0f));
    REQUIRE(a.at(1, 0) == 1.0f);

    {
        std::ofstream f(td.file("a.ppm"));
        f << "P3\n1 1\n255\n10 20 30\n";
    }
    Image rgb = read_pnm(td.file("a.ppm"));
    REQUIRE(rgb.channels == 3);
    REQUIRE(rgb.at(0, 0, 2) == Catch::Approx(30.0f / 255.0f));
}

TEST_CASE("malformed image files fail with a byte offset", "[datastore]") {
    TempDir td;
    {
        std::ofstream f(td.file("bad.pgm"), std::ios::binary);
        f << "P5\n4 4\n255\n\0\0"; // truncated raster
    }
    REQUIRE_THROWS_WITH(read_pnm(td.file("bad.pgm")),
                        Catch::Matchers::ContainsSubstring("byte") &&
                            Catch::Matchers::ContainsSubstring("truncated"));
    {
        std::ofstream f(td.file("bad16.pgm"), std::ios::binary);
        f << "P5\n2 2\n65535\n";
        for (int i = 0; i < 8; ++i) f.put(char(0));
    }
    REQUIRE_THROWS_WITH(read_pnm(td.file("bad16.pgm")), Catch::Matchers::ContainsSubstring("maxval"));
    {
        std::ofstream f(td.file("bad.magic"), std::ios::binary);
        f << "BM12345";
    }
    REQUIRE_THROWS_AS(read_pnm(td.file("bad.magic")), std::runtime_error);
    {
        std::ofstream f(td.file("badhdr.pgm"), std::ios::binary);
        f << "P5\nx 4\n255\n";
    }
    REQUIRE_THROWS_WITH(read_pnm(td.file("badhdr.pgm")), Catch::Matchers::ContainsSubstring("integer"));
}

TEST_CASE("sdf primitives evaluate exactly", "[datastore]") {
    SdfPrim sphere;
    sphere.kind = SdfPrimKind::sphere;
    sphere.params = {0.4f, 0, 0, 0};
    REQUIRE(sdf_prim_eval(sphere, 0, 0, 0) == -0.4f); // exact at the center

    SdfDescriptor d;
    d.prims = {sphere};
    REQUIRE(sdf_eval(d, 0.9f, 0, 0) == Catch::Approx(0.5f));

    SdfPrim box;
    box.kind = SdfPrimKind::box;
    box.params = {0.3f, 0.2f, 0.1f, 0};
    REQUIRE(sdf_prim_eval(box, 0, 0, 0) == Catch::Approx(-0.1f));      // nearest face
    REQUIRE(sdf_prim_eval(box, 0.5f, 0, 0) == Catch::Approx(0.2f));    // face distance
    REQUIRE(sdf_prim_eval(box, 0.3f + 0.3f, 0.2f + 0.4f, 0) == Catch::Approx(0.5f)); // edge distance

    SdfPrim torus;
    torus.kind = SdfPrimKind::torus;
    torus.params = {0.5f, 0.1f, 0, 0};
    REQUIRE(sdf_prim_eval(torus, 0.5f, 0, 0) == Catch::Approx(-0.1f)); // on the ring
    REQUIRE(sdf_prim_eval(torus, 0, 0, 0) == Catch::Approx(0.4f));

    SdfPrim cap;
    cap.kind = SdfPrimKind::capsule;
    cap.params = {0.3f, 0, 0, 0.15f}; // segment (-0.3,0,0)..(0.3,0,0)
    REQUIRE(sdf_prim_eval(cap, 0, 0, 0) == Catch::Approx(-0.15f));
    REQUIRE(sdf_prim_eval(cap, 0.6f, 0, 0) == Catch::Approx(0.15f));
    REQUIRE(sdf_prim_eval(cap, 0, 0.5f, 0) == Catch::Approx(0.35f));
}

TEST_CASE("smooth union stays below both components", "[datastore]") {
    Rng r(5);
    SdfDescriptor d;
    d.prims.push_back({SdfPrimKind::sphere, {-0.3f, 0, 0}, {0.35f, 0, 0, 0}});
    d.prims.push_back({SdfPrimKind::box, {0.3f, 0.1f, 0}, {0.25f, 0.3f, 0.2f, 0}});
    d.smooth_k = 0.1f;
    for (int i = 0; i < 500; ++i) {
        float x = r.uniform(-1, 1), y = r.uniform(-1, 1), z = r.uniform(-1, 1);
        float u = sdf_eval(d, x, y, z);
        REQUIRE(u <= sdf_prim_eval(d.prims[0], x, y, z) + 1e-6f);
        REQUIRE(u <= sdf_prim_eval(d.prims[1], x, y, z) + 1e-6f);
    }
    // k = 0 degrades to the hard minimum
    d.smooth_k = 0.0f;
    float v = sdf_eval(d, 0.1f, 0.2f, -0.4f);
    REQUIRE(v == std::min(sdf_prim_eval(d.prims[0], 0.1f, 0.2f, -0.4f),
                          sdf_prim_eval(d.prims[1], 0.1f, 0.2f, -0.4f)));
}

TEST_CASE("toy sdf generator is deterministic with balanced families", "[datastore]") {
    ToySdfSpec spec;
    auto a = gen_toy_sdfs(spec, 500, 11);
    auto b = gen_toy_sdfs(spec, 500, 11);
    REQUIRE(a.size() == 500);
    int counts[10] = {0};
    for (size_t i = 0; i < a.size(); ++i) {
        REQUIRE(a[i].label == int(i) % 10);
        counts[a[i].label]++;
        REQUIRE(a[i].sdf.prims.size() == (a[i].label < 4 ? 1u : 2u));
        // reproducibility: identical descriptor JSON
        REQUIRE(sdf_to_json(a[i].sdf) == sdf_to_json(b[i].sdf));
    }
    for (int c : counts) REQUIRE(c == 50);
}

TEST_CASE("generated sdfs keep their surface inside the unit cube", "[datastore]") {
    auto recs = gen_toy_sdfs(ToySdfSpec{}, 60, 3);
    for (const auto& r : recs) {
        // SDF must be positive on the domain boundary so meshes close
        for (float u = -1.0f; u <= 1.01f; u += 0.25f)
            for (float v = -1.0f; v <= 1.01f; v += 0.25f) {
                REQUIRE(sdf_eval(r.sdf, 1.0f, u, v) > 0.0f);
                REQUIRE(sdf_eval(r.sdf, -1.0f, u, v) > 0.0f);
                REQUIRE(sdf_eval(r.sdf, u, 1.0f, v) > 0.0f);
                REQUIRE(sdf_eval(r.sdf, u, -1.0f, v) > 0.0f);
                REQUIRE(sdf_eval(r.sdf, u, v, 1.0f) > 0.0f);
                REQUIRE(sdf_eval(r.sdf, u, v, -1.0f) > 0.0f);
            }
        // and negative somewhere inside
        bool inside = false;
        for (float u = -0.5f; u <= 0.51f && !inside; u += 0.05f)
            for (float v = -0.5f; v <= 0.51f && !inside; v += 0.05f)
                for (float w = -0.5f; w <= 0.51f && !inside; w += 0.05f)
                    inside = sdf_eval(r.sdf, u, v, w) < 0.0f;
        REQUIRE(inside);
    }
}

TEST_CASE("sdf descriptors round trip through json", "[datastore]") {
    auto recs = gen_toy_sdfs(ToySdfSpec{}, 10, 19);
    for (const auto& r : recs) {
        SdfDescriptor back = sdf_from_json(sdf_to_json(r.sdf));
        Rng rr(1);
        for (int i = 0; i < 50; ++i) {
            float x = rr.uniform(-1, 1), y = rr.uniform(-1, 1), z = rr.uniform(-1, 1);
            REQUIRE(sdf_eval(back, x, y, z) == sdf_eval(r.sdf, x, y, z));
        }
    }
    REQUIRE_THROWS_AS(sdf_prim_kind_from("cone"), std::runtime_error);
}

TEST_CASE("architecture manifests round trip and hash stably", "[datastore]") {
    for (FieldArch a : {image_arch_2d(FieldKind::standalone), image_arch_2d(FieldKind::modulated),
                        sdf_arch_3d(FieldKind::standalone), sdf_arch_3d(FieldKind::modulated)}) {
        FieldArch b = arch_from_manifest(arch_manifest(a));
        REQUIRE(arch_manifest(b) == arch_manifest(a));
        REQUIRE(arch_hash(b) == arch_hash(a));
        REQUIRE(arch_hash(a).size() == 16);
    }
    REQUIRE(arch_hash(image_arch_2d(FieldKind::standalone)) != arch_hash(sdf_arch_3d(FieldKind::standalone)));
    FieldArch tweaked = image_arch_2d(FieldKind::standalone);
    tweaked.omega0 = 33.0f;
    REQUIRE(arch_hash(tweaked) != arch_hash(image_arch_2d(FieldKind::standalone)));
}

TEST_CASE("weight dataset round trips bit-exactly", "[datastore]") {
    TempDir td;
    WeightDataset ds;
    ds.arch = arch_manifest(image_arch_2d(FieldKind::modulated));
    ds.parameterization = "mlora-asym";
    ds.mask = {{"mask_seed", 7}, {"rank", 16}};
    ds.extra = {{"base_hash", "0123456789abcdef"}};
    Rng r(2);
    for (int i = 0; i < 100; ++i) {
        std::vector<float> rec(37);
        for (auto& v : rec) v = r.normal();
        ds.append(i, i % 3, 20.0 + i * 0.25, rec);
    }
    std::string p = td.file("w.wsd");
    write_weightdataset(p, ds);
    WeightDataset back = read_weightdataset(p);
    REQUIRE(back.count() == 100);
    REQUIRE(back.record_len == 37);
    REQUIRE(back.data == ds.data); // bit-identical payload
    REQUIRE(back.ids == ds.ids);
    REQUIRE(back.labels == ds.labels);
    for (int i = 0; i < 100; ++i) REQUIRE(back.metrics[size_t(i)] == ds.metrics[size_t(i)]);
    REQUIRE(back.parameterization == "mlora-asym");
    REQUIRE(back.mask.at("rank") == 16);
    REQUIRE(back.extra.at("base_hash") == "0123456789abcdef");
    REQUIRE(back.arch == ds.arch);

    // repeated writes are byte-identical
    write_weightdataset(td.file("w2.wsd"), ds);
    REQUIRE(read_file_bytes(p) == read_file_bytes(td.file("w2.wsd")));
    REQUIRE(read_file_bytes(p + ".csv") == read_file_bytes(td.file("w2.wsd.csv")));
}

TEST_CASE("empty weight dataset round trips", "[datastore]") {
    TempDir td;
    WeightDataset ds;
    ds.arch = arch_manifest(sdf_arch_3d(FieldKind::standalone));
    ds.parameterization = "mlp";
    ds.record_len = 12;
    write_weightdataset(td.file("e.wsd"), ds);
    WeightDataset back = read_weightdataset(td.file("e.wsd"));
    REQUIRE(back.count() == 0);
    REQUIRE(back.record_len == 12);
    REQUIRE(back.data.empty());
}

TEST_CASE("weight dataset corruption is detected by hash", "[datastore]") {
    TempDir td;
    WeightDataset ds;
    ds.arch = arch_manifest(image_arch_2d(FieldKind::modulated));
    ds.parameterization = "lora";
    ds.append(0, -1, std::nan(""), std::vector<float>(8, 1.0f));
    std::string p = td.file("c.wsd");
    write_weightdataset(p, ds);

    auto bytes = read_file_bytes(p);
    bytes[bytes.size() - 3] ^= 0x40; // flip a payload bit
    write_file_bytes(p, bytes.data(), bytes.size());
    REQUIRE_THROWS_WITH(read_weightdataset(p), Catch::Matchers::ContainsSubstring("data hash mismatch") &&
                                                   Catch::Matchers::ContainsSubstring("expected") &&
                                                   Catch::Matchers::ContainsSubstring("actual"));

    // wrong magic
    write_weightdataset(p, ds);
    bytes = read_file_bytes(p);
    bytes[10] = 'X'; // inside the header JSON near the magic value
    std::string s(bytes.begin(), bytes.end());
    auto pos = s.find("WSD1");
    REQUIRE(pos != std::string::npos);
    s[pos] = 'X';
    write_file_bytes(p, s.data(), s.size());
    REQUIRE_THROWS_AS(read_weightdataset(p), std::runtime_error);

    // missing companion csv
    write_weightdataset(p, ds);
    fs::remove(p + ".csv");
    REQUIRE_THROWS_WITH(read_weightdataset(p), Catch::Matchers::ContainsSubstring("companion"));

    // metric NaN round trips as missing
    write_weightdataset(p, ds);
    REQUIRE(std::isnan(read_weightdataset(p).metrics[0]));
}

TEST_CASE("instance sets round trip through a directory", "[datastore]") {
    TempDir td;
    ToyImageSpec ispec;
    ispec.res = 16;
    auto imgs = gen_toy_images(ispec, 5, 21);
    write_instance_set(td.file("imgset"), imgs, {{"seed", 21}});
    auto back = read_instance_set(td.file("imgset"));
    REQUIRE(back.size() == 5);
    for (size_t i = 0; i < back.size(); ++i) {
        REQUIRE(back[i].id == imgs[i].id);
        REQUIRE(back[i].label == imgs[i].label);
        REQUIRE(back[i].modality == Modality::image2d);
        REQUIRE(back[i].image.pixels.size() == imgs[i].image.pixels.size());
        for (size_t k = 0; k < back[i].image.pixels.size(); ++k)
            REQUIRE(std::fabs(back[i].image.pixels[k] - imgs[i].image.pixels[k]) <= 1.0f / 255.0f);
    }

    auto sdfs = gen_toy_sdfs(ToySdfSpec{}, 7, 22);
    write_instance_set(td.file("sdfset"), sdfs, {{"seed", 22}});
    auto sback = read_instance_set(td.file("sdfset"));
    REQUIRE(sback.size() == 7);
    for (size_t i = 0; i < sback.size(); ++i) {
        REQUIRE(sback[i].modality == Modality::sdf3d);
        REQUIRE(sdf_to_json(sback[i].sdf) == sdf_to_json(sdfs[i].sdf));
    }
}

TEST_CASE("obj export writes valid ascii geometry", "[datastore]") {
    TempDir td;
    Mesh m;
    m.vertices = {{0, 0, 0}, {1, 0, 0}, {0, 1, 0}};
    m.triangles = {{0, 1, 2}};
    write_obj(td.file("t.obj"), m);
    std::ifstream f(td.file("t.obj"));
    std::string line;
    int vcount = 0, fcount = 0;
    std::string flane;
    while (std::getline(f, line)) {
        if (line.rfind("v ", 0) == 0) vcount++;
        if (line.rfind("f ", 0) == 0) {
            fcount++;
            flane = line;
        }
    }
    REQUIRE(vcount == 3);
    REQUIRE(fcount == 1);
    REQUIRE(flane == "f 1 2 3"); // 1-based indices

    Tensor pts({2, 3}, {0.5f, -1.25f, 3.0f, 0, 0, 0});
    write_pointcloud_csv(td.file("p.csv"), pts);
    std::ifstream pf(td.file("p.csv"));
    std::getline(pf, line);
    REQUIRE(line == "x,y,z");
    std::getline(pf, line);
    REQUIRE(line == "0.5,-1.25,3");
}

TEST_CASE("image target tensors match pixel order", "[datastore]") {
    Image im = make_image(3, 3, 1);
    im.at(1, 2) = 0.5f;
    Tensor t = image_targets(im);
    REQUIRE(t.rows() == 9);
    REQUIRE(t.at(1 * 3 + 2, 0) == 0.5f);
    Image back = image_from_targets(t, 3, 1);
    REQUIRE(back.pixels == im.pixels);
}

TEST_CASE("experiment manifests record and verify inputs", "[datastore]") {
    TempDir td;
    write_file_bytes(td.file("in.txt"), "hello", 5);
    ExperimentManifest m;
    m.config = {{"task", "fit"}, {"rank", 16}};
    m.seeds = {1, 2};
    m.add_input(td.file("in.txt"));
    m.outputs = {td.file("out.wsd")};
    write_manifest(td.file("manifest.json"), m);

    ExperimentManifest back = read_manifest(td.file("manifest.json"));
    REQUIRE(back.tool_version == wsf_version);
    REQUIRE(back.config.at("rank") == 16);
    REQUIRE(back.seeds == std::vector<uint64_t>{1, 2});
    REQUIRE(back.inputs.size() == 1);
    REQUIRE(manifest_stale_inputs(back).empty());

    write_file_bytes(td.file("in.txt"), "HELLO", 5);
    auto stale = manifest_stale_inputs(back);
    REQUIRE(stale.size() == 1);
    REQUIRE(stale[0] == td.file("in.txt"));
}
