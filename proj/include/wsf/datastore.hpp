#pragma once

#include <array>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"
#include "wsf/field.hpp"
#include "wsf/geometry.hpp"
#include "wsf/rng.hpp"
#include "wsf/tensor.hpp"
#include "wsf/version.hpp"

namespace wsf {

using nlohmann::json;

// ---------------------------------------------------------------------------
// Persistence and synthetic data: toy image / SDF generators, PGM/PPM and
// OBJ IO, the WSD1 weight-dataset format, experiment manifests, and the
// FNV-1a content hashing that binds artifacts together. File layouts are
// documented in docs/formats.md.
// ---------------------------------------------------------------------------

// --- content hashing -------------------------------------------------------

inline uint64_t fnv1a64(const void* data, size_t n, uint64_t h = 14695981039346656037ull) {
    const auto* p = static_cast<const unsigned char*>(data);
    for (size_t i = 0; i < n; ++i) {
        h ^= p[i];
        h *= 1099511628211ull;
    }
    return h;
}

inline std::string hash_hex(uint64_t h) {
    char buf[17];
    std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
    return buf;
}

inline std::string content_hash(const void* data, size_t n) { return hash_hex(fnv1a64(data, n)); }
inline std::string content_hash(const std::string& s) { return content_hash(s.data(), s.size()); }

inline std::vector<unsigned char> read_file_bytes(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot open file: " + path);
    f.seekg(0, std::ios::end);
    std::streamoff n = f.tellg();
    f.seekg(0);
    std::vector<unsigned char> buf(static_cast<size_t>(n));
    if (n > 0) f.read(reinterpret_cast<char*>(buf.data()), n);
    if (!f) throw std::runtime_error("short read: " + path);
    return buf;
}

inline void write_file_bytes(const std::string& path, const void* data, size_t n) {
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw std::runtime_error("cannot open file for write: " + path);
    f.write(static_cast<const char*>(data), std::streamsize(n));
    if (!f) throw std::runtime_error("short write: " + path);
}

inline std::string file_hash(const std::string& path) {
    auto b = read_file_bytes(path);
    return content_hash(b.data(), b.size());
}

// --- images ----------------------------------------------------------------

/// Row-major image with values in [0,1]; row 0 is the top (y = -1 side of the
/// coordinate grid), matching image_grid_coords order.
struct Image {
    int width = 0, height = 0, channels = 1;
    std::vector<float> pixels; // height*width*channels

    float& at(int r, int c, int ch = 0) { return pixels[(size_t(r) * width + size_t(c)) * channels + size_t(ch)]; }
    float at(int r, int c, int ch = 0) const {
        return pixels[(size_t(r) * width + size_t(c)) * channels + size_t(ch)];
    }
};

inline Image make_image(int width, int height, int channels = 1) {
    Image im;
    im.width = width;
    im.height = height;
    im.channels = channels;
    im.pixels.assign(size_t(width) * height * channels, 0.0f);
    return im;
}

/// Supervision targets for field fitting: one row per pixel in
/// image_grid_coords order, one column per channel.
inline Tensor image_targets(const Image& im) {
    Tensor t({im.height * im.width, im.channels});
    std::copy(im.pixels.begin(), im.pixels.end(), t.vec().begin());
    return t;
}

inline Image image_from_targets(const Tensor& t, int res, int channels = 1) {
    if (t.rows() != res * res || t.cols() != channels)
        throw std::invalid_argument("image_from_targets: shape mismatch");
    Image im = make_image(res, res, channels);
    for (size_t i = 0; i < im.pixels.size(); ++i)
        im.pixels[i] = std::min(std::max(t.vec()[i], 0.0f), 1.0f);
    return im;
}

namespace pnm_detail {

struct Parser {
    const std::vector<unsigned char>& buf;
    size_t pos = 0;

    [[noreturn]] void fail(const std::string& msg) const {
        throw std::runtime_error("pnm parse error at byte " + std::to_string(pos) + ": " + msg);
    }
    bool eof() const { return pos >= buf.size(); }
    static bool is_ws(unsigned char c) { return c == ' ' || c == '\t' || c == '\r' || c == '\n' || c == '\v' || c == '\f'; }

    void skip_ws_and_comments() {
        while (!eof()) {
            if (is_ws(buf[pos])) {
                ++pos;
            } else if (buf[pos] == '#') {
                while (!eof() && buf[pos] != '\n') ++pos;
            } else {
                break;
            }
        }
    }

    int next_int() {
        skip_ws_and_comments();
        if (eof()) fail("unexpected end of file, expected integer");
        if (buf[pos] < '0' || buf[pos] > '9') fail("expected integer");
        long v = 0;
        while (!eof() && buf[pos] >= '0' && buf[pos] <= '9') {
            v = v * 10 + (buf[pos] - '0');
            if (v > 1 << 30) fail("integer out of range");
            ++pos;
        }
        return int(v);
    }
};

} // namespace pnm_detail

/// Reads P2/P5 (grayscale) and P3/P6 (RGB) images with maxval 255.
inline Image read_pnm(const std::string& path) {
    auto buf = read_file_bytes(path);
    pnm_detail::Parser p{buf};
    if (buf.size() < 2 || buf[0] != 'P') p.fail("not a PNM file (missing magic)");
    char kind = char(buf[1]);
    if (kind != '2' && kind != '3' && kind != '5' && kind != '6')
        p.fail("unsupported PNM variant, expected P2/P3/P5/P6");
    p.pos = 2;
    int w = p.next_int();
    int h = p.next_int();
    int maxval = p.next_int();
    if (w <= 0 || h <= 0) p.fail("non-positive dimensions");
    if (maxval != 255) p.fail("unsupported maxval " + std::to_string(maxval) + ", expected 255");
    int channels = (kind == '3' || kind == '6') ? 3 : 1;
    Image im = make_image(w, h, channels);
    size_t n = im.pixels.size();
    if (kind == '5' || kind == '6') {
        if (p.eof() || !pnm_detail::Parser::is_ws(buf[p.pos])) p.fail("expected whitespace before raster");
        ++p.pos; // exactly one whitespace byte separates header and raster
        if (buf.size() - p.pos < n) {
            p.pos = buf.size();
            p.fail("truncated raster, expected " + std::to_string(n) + " bytes");
        }
        for (size_t i = 0; i < n; ++i) im.pixels[i] = float(buf[p.pos + i]) / 255.0f;
    } else {
        for (size_t i = 0; i < n; ++i) {
            int v = p.next_int();
            if (v > 255) p.fail("sample exceeds maxval");
            im.pixels[i] = float(v) / 255.0f;
        }
    }
    return im;
}

inline unsigned char quantize_8bit(float v) {
    float c = std::min(std::max(v, 0.0f), 1.0f);
    return static_cast<unsigned char>(std::lround(c * 255.0f));
}

/// Writes binary P5 (1 channel) or P6 (3 channels), maxval 255.
inline void write_pnm(const std::string& path, const Image& im) {
    if (im.channels != 1 && im.channels != 3)
        throw std::invalid_argument("write_pnm: image must have 1 or 3 channels");
    std::string header = std::string(im.channels == 1 ? "P5" : "P6") + "\n" + std::to_string(im.width) + " " +
                         std::to_string(im.height) + "\n255\n";
    std::vector<unsigned char> out(header.begin(), header.end());
    out.reserve(out.size() + im.pixels.size());
    for (float v : im.pixels) out.push_back(quantize_8bit(v));
    write_file_bytes(path, out.data(), out.size());
}

// --- toy 2-d shapes ----------------------------------------------------------

enum class ShapeKind { disk = 0, rectangle = 1, ring = 2 };

struct ShapeParams {
    ShapeKind kind = ShapeKind::disk;
    float cx = 0.0f, cy = 0.0f;
    float p0 = 0.3f, p1 = 0.3f; // disk: radius,-; rectangle: half extents; ring: radius, half thickness
    float intensity = 1.0f;
};

inline float shape_sdf2d(const ShapeParams& s, float x, float y) {
    float dx = x - s.cx, dy = y - s.cy;
    switch (s.kind) {
    case ShapeKind::disk:
        return std::sqrt(dx * dx + dy * dy) - s.p0;
    case ShapeKind::rectangle: {
        float qx = std::fabs(dx) - s.p0, qy = std::fabs(dy) - s.p1;
        float ox = std::max(qx, 0.0f), oy = std::max(qy, 0.0f);
        return std::sqrt(ox * ox + oy * oy) + std::min(std::max(qx, qy), 0.0f);
    }
    case ShapeKind::ring:
        return std::fabs(std::sqrt(dx * dx + dy * dy) - s.p0) - s.p1;
    }
    throw std::logic_error("shape_sdf2d: unknown kind");
}

/// Renders a shape to a res x res grayscale image at pixel centers, with
/// one-pixel linear anti-aliasing of the boundary.
inline Image render_shape(const ShapeParams& s, int res) {
    Image im = make_image(res, res, 1);
    const float px = 2.0f / float(res);
    for (int r = 0; r < res; ++r)
        for (int c = 0; c < res; ++c) {
            float x = -1.0f + 2.0f * (float(c) + 0.5f) / float(res);
            float y = -1.0f + 2.0f * (float(r) + 0.5f) / float(res);
            float d = shape_sdf2d(s, x, y);
            float coverage = std::min(std::max(0.5f - d / px, 0.0f), 1.0f);
            im.at(r, c) = coverage * s.intensity;
        }
    return im;
}

// --- toy 3-d signed distance fields ----------------------------------------------

enum class SdfPrimKind { sphere = 0, box = 1, torus = 2, capsule = 3 };

struct SdfPrim {
    SdfPrimKind kind = SdfPrimKind::sphere;
    std::array<float, 3> center = {0, 0, 0};
    // sphere: {r}; box: {hx,hy,hz}; torus (ring in the xz plane): {R,r};
    // capsule: {ax,ay,az,r} with segment endpoints center +- (ax,ay,az)
    std::array<float, 4> params = {0.5f, 0, 0, 0};
};

struct SdfDescriptor {
    std::vector<SdfPrim> prims;
    float smooth_k = 0.0f; // polynomial smooth-union radius; 0 = hard min
};

inline float sdf_prim_eval(const SdfPrim& p, float x, float y, float z) {
    float dx = x - p.center[0], dy = y - p.center[1], dz = z - p.center[2];
    switch (p.kind) {
    case SdfPrimKind::sphere:
        return std::sqrt(dx * dx + dy * dy + dz * dz) - p.params[0];
    case SdfPrimKind::box: {
        float qx = std::fabs(dx) - p.params[0], qy = std::fabs(dy) - p.params[1], qz = std::fabs(dz) - p.params[2];
        float ox = std::max(qx, 0.0f), oy = std::max(qy, 0.0f), oz = std::max(qz, 0.0f);
        return std::sqrt(ox * ox + oy * oy + oz * oz) + std::min(std::max(qx, std::max(qy, qz)), 0.0f);
    }
    case SdfPrimKind::torus: {
        float q0 = std::sqrt(dx * dx + dz * dz) - p.params[0];
        return std::sqrt(q0 * q0 + dy * dy) - p.params[1];
    }
    case SdfPrimKind::capsule: {
        float ax = p.params[0], ay = p.params[1], az = p.params[2];
        // segment from -a to +a in local coordinates
        float px_ = dx + ax, py_ = dy + ay, pz_ = dz + az;
        float bx = 2 * ax, by = 2 * ay, bz = 2 * az;
        float bb = bx * bx + by * by + bz * bz;
        float t = bb > 0 ? (px_ * bx + py_ * by + pz_ * bz) / bb : 0.0f;
        t = std::min(std::max(t, 0.0f), 1.0f);
        float ex = px_ - bx * t, ey = py_ - by * t, ez = pz_ - bz * t;
        return std::sqrt(ex * ex + ey * ey + ez * ez) - p.params[3];
    }
    }
    throw std::logic_error("sdf_prim_eval: unknown kind");
}

/// Polynomial smooth minimum; equals min(a,b) when k == 0 and is always <= it.
inline float smooth_min(float a, float b, float k) {
    if (k <= 0.0f) return std::min(a, b);
    float h = std::min(std::max(0.5f + 0.5f * (b - a) / k, 0.0f), 1.0f);
    return b * (1.0f - h) + a * h - k * h * (1.0f - h);
}

inline float sdf_eval(const SdfDescriptor& d, float x, float y, float z) {
    if (d.prims.empty()) throw std::invalid_argument("sdf_eval: empty descriptor");
    float v = sdf_prim_eval(d.prims[0], x, y, z);
    for (size_t i = 1; i < d.prims.size(); ++i) v = smooth_min(v, sdf_prim_eval(d.prims[i], x, y, z), d.smooth_k);
    return v;
}

/// Targets for SDF fitting at the rows of a coordinate tensor (N x 3).
inline Tensor sdf_targets(const SdfDescriptor& d, const Tensor& coords) {
    if (coords.cols() != 3) throw std::invalid_argument("sdf_targets: coords must be N x 3");
    Tensor t({coords.rows(), 1});
    for (int i = 0; i < coords.rows(); ++i) t.at(i, 0) = sdf_eval(d, coords.at(i, 0), coords.at(i, 1), coords.at(i, 2));
    return t;
}

inline const char* sdf_prim_kind_name(SdfPrimKind k) {
    switch (k) {
    case SdfPrimKind::sphere: return "sphere";
    case SdfPrimKind::box: return "box";
    case SdfPrimKind::torus: return "torus";
    case SdfPrimKind::capsule: return "capsule";
    }
    throw std::logic_error("sdf_prim_kind_name: unknown kind");
}

inline SdfPrimKind sdf_prim_kind_from(const std::string& s) {
    if (s == "sphere") return SdfPrimKind::sphere;
    if (s == "box") return SdfPrimKind::box;
    if (s == "torus") return SdfPrimKind::torus;
    if (s == "capsule") return SdfPrimKind::capsule;
    throw std::runtime_error("unknown sdf primitive kind: " + s);
}

inline json sdf_to_json(const SdfDescriptor& d) {
    json prims = json::array();
    for (const auto& p : d.prims)
        prims.push_back({{"kind", sdf_prim_kind_name(p.kind)},
                         {"center", {p.center[0], p.center[1], p.center[2]}},
                         {"params", {p.params[0], p.params[1], p.params[2], p.params[3]}}});
    return {{"smooth_k", d.smooth_k}, {"prims", prims}};
}

inline SdfDescriptor sdf_from_json(const json& j) {
    SdfDescriptor d;
    d.smooth_k = j.at("smooth_k").get<float>();
    for (const auto& pj : j.at("prims")) {
        SdfPrim p;
        p.kind = sdf_prim_kind_from(pj.at("kind").get<std::string>());
        for (int k = 0; k < 3; ++k) p.center[size_t(k)] = pj.at("center").at(size_t(k)).get<float>();
        for (int k = 0; k < 4; ++k) p.params[size_t(k)] = pj.at("params").at(size_t(k)).get<float>();
        d.prims.push_back(p);
    }
    return d;
}

// --- instance records and generators ---------------------------------------------

enum class Modality { image2d, sdf3d };

struct InstanceRecord {
    int64_t id = 0;
    Modality modality = Modality::image2d;
    int label = -1;
    Image image;       // image2d payload
    SdfDescriptor sdf; // sdf3d payload
};

struct ToyImageSpec {
    int res = 64;
    int categories = 3; // 1..3, category = shape kind
};

struct ToySdfSpec {
    int categories = 10; // 1..10, category = primitive family
};

/// Deterministic toy images: anti-aliased disks, rectangles and rings with
/// randomized position, size and intensity. Label = instance index modulo
/// the category count, so labels are balanced within one.
inline std::vector<InstanceRecord> gen_toy_images(const ToyImageSpec& spec, int n, uint64_t seed) {
    if (n < 1) throw std::invalid_argument("gen_toy_images: n must be >= 1");
    if (spec.categories < 1 || spec.categories > 3)
        throw std::invalid_argument("gen_toy_images: categories must be in 1..3");
    Rng root(seed);
    std::vector<InstanceRecord> out;
    out.reserve(size_t(n));
    for (int i = 0; i < n; ++i) {
        Rng r = root.stream(rng_purpose::data_gen, uint64_t(i));
        ShapeParams s;
        s.kind = ShapeKind(i % spec.categories);
        s.cx = r.uniform(-0.35f, 0.35f);
        s.cy = r.uniform(-0.35f, 0.35f);
        switch (s.kind) {
        case ShapeKind::disk:
            s.p0 = r.uniform(0.25f, 0.55f);
            break;
        case ShapeKind::rectangle:
            s.p0 = r.uniform(0.2f, 0.5f);
            s.p1 = r.uniform(0.2f, 0.5f);
            break;
        case ShapeKind::ring:
            s.p0 = r.uniform(0.3f, 0.55f);
            s.p1 = r.uniform(0.06f, 0.15f);
            break;
        }
        s.intensity = r.uniform(0.55f, 1.0f);
        InstanceRecord rec;
        rec.id = i;
        rec.modality = Modality::image2d;
        rec.label = i % spec.categories;
        rec.image = render_shape(s, spec.res);
        out.push_back(std::move(rec));
    }
    return out;
}

namespace sdf_detail {

inline SdfPrim random_prim(SdfPrimKind kind, Rng& r, float scale, float center_range) {
    SdfPrim p;
    p.kind = kind;
    for (auto& c : p.center) c = r.uniform(-center_range, center_range);
    switch (kind) {
    case SdfPrimKind::sphere:
        p.params = {scale * r.uniform(0.3f, 0.55f), 0, 0, 0};
        break;
    case SdfPrimKind::box:
        p.params = {scale * r.uniform(0.25f, 0.45f), scale * r.uniform(0.25f, 0.45f),
                    scale * r.uniform(0.25f, 0.45f), 0};
        break;
    case SdfPrimKind::torus:
        p.params = {scale * r.uniform(0.3f, 0.5f), scale * r.uniform(0.1f, 0.18f), 0, 0};
        break;
    case SdfPrimKind::capsule: {
        float ux = r.normal(), uy = r.normal(), uz = r.normal();
        float un = std::sqrt(ux * ux + uy * uy + uz * uz) + 1e-12f;
        float len = scale * r.uniform(0.2f, 0.4f);
        p.params = {ux / un * len, uy / un * len, uz / un * len, scale * r.uniform(0.15f, 0.25f)};
        break;
    }
    }
    return p;
}

} // namespace sdf_detail

/// Deterministic toy SDFs: four primitive families plus six smooth-union
/// pairs, with randomized centers and sizes kept inside the unit cube.
inline std::vector<InstanceRecord> gen_toy_sdfs(const ToySdfSpec& spec, int n, uint64_t seed) {
    if (n < 1) throw std::invalid_argument("gen_toy_sdfs: n must be >= 1");
    if (spec.categories < 1 || spec.categories > 10)
        throw std::invalid_argument("gen_toy_sdfs: categories must be in 1..10");
    using K = SdfPrimKind;
    static const std::array<std::pair<K, K>, 6> pairs = {{{K::sphere, K::box},
                                                          {K::sphere, K::torus},
                                                          {K::box, K::capsule},
                                                          {K::torus, K::capsule},
                                                          {K::sphere, K::capsule},
                                                          {K::box, K::torus}}};
    Rng root(seed);
    std::vector<InstanceRecord> out;
    out.reserve(size_t(n));
    for (int i = 0; i < n; ++i) {
        Rng r = root.stream(rng_purpose::data_gen, uint64_t(i));
        int cat = i % spec.categories;
        SdfDescriptor d;
        if (cat < 4) {
            d.prims.push_back(sdf_detail::random_prim(K(cat), r, 1.0f, 0.2f));
        } else {
            const auto& pr = pairs[size_t(cat - 4)];
            d.prims.push_back(sdf_detail::random_prim(pr.first, r, 0.7f, 0.3f));
            d.prims.push_back(sdf_detail::random_prim(pr.second, r, 0.7f, 0.3f));
            d.smooth_k = r.uniform(0.05f, 0.15f);
        }
        InstanceRecord rec;
        rec.id = i;
        rec.modality = Modality::sdf3d;
        rec.label = cat;
        rec.sdf = std::move(d);
        out.push_back(std::move(rec));
    }
    return out;
}

// --- architecture manifests --------------------------------------------------------

inline const char* field_kind_name(FieldKind k) {
    return k == FieldKind::standalone ? "standalone" : "modulated";
}

inline FieldKind field_kind_from(const std::string& s) {
    if (s == "standalone") return FieldKind::standalone;
    if (s == "modulated") return FieldKind::modulated;
    throw std::runtime_error("unknown field kind: " + s);
}

/// Stable JSON manifest of an architecture; its content hash binds weight
/// datasets and checkpoints to the architecture they were produced with.
inline json arch_manifest(const FieldArch& a) {
    return {{"kind", field_kind_name(a.kind)},
            {"input_dim", a.input_dim},
            {"output_dim", a.output_dim},
            {"omega0", a.omega0},
            {"hidden", a.hidden},
            {"hidden_layers", a.hidden_layers},
            {"blocks", a.blocks},
            {"latent_dim", a.latent_dim},
            {"mapping_width", a.mapping_width},
            {"mapping_depth", a.mapping_depth},
            {"demodulate", a.demodulate},
            {"demod_eps", a.demod_eps}};
}

inline FieldArch arch_from_manifest(const json& j) {
    FieldArch a;
    a.kind = field_kind_from(j.at("kind").get<std::string>());
    a.input_dim = j.at("input_dim").get<int>();
    a.output_dim = j.at("output_dim").get<int>();
    a.omega0 = j.at("omega0").get<float>();
    a.hidden = j.at("hidden").get<int>();
    a.hidden_layers = j.at("hidden_layers").get<int>();
    a.blocks = j.at("blocks").get<int>();
    a.latent_dim = j.at("latent_dim").get<int>();
    a.mapping_width = j.at("mapping_width").get<int>();
    a.mapping_depth = j.at("mapping_depth").get<int>();
    a.demodulate = j.at("demodulate").get<bool>();
    a.demod_eps = j.at("demod_eps").get<float>();
    a.validate();
    return a;
}

inline std::string arch_hash(const FieldArch& a) { return content_hash(arch_manifest(a).dump()); }

// --- weight datasets (WSD1) ---------------------------------------------------------

/// A persisted collection of flattened per-instance representations bound to
/// an architecture manifest. Serialized as one JSON header line followed by
/// little-endian float32 records, with a companion <path>.csv holding per-
/// record instance id, label and final reconstruction metric.
struct WeightDataset {
    json arch;                     // architecture manifest (see arch_manifest)
    std::string parameterization;  // e.g. "mlp", "lora-asym", "mlora-asym"
    json mask = nullptr;           // mask descriptor, null when unmasked
    json extra = json::object();   // free-form: base checkpoint hash, generated flag, ...
    int record_len = 0;
    std::vector<float> data;       // count() * record_len, row-major
    std::vector<int64_t> ids;
    std::vector<int> labels;       // -1 = unlabeled
    std::vector<double> metrics;   // NaN = not recorded

    int count() const { return int(ids.size()); }
    const float* record(int i) const { return data.data() + size_t(i) * size_t(record_len); }
    float* record(int i) { return data.data() + size_t(i) * size_t(record_len); }

    std::vector<float> record_vec(int i) const {
        return std::vector<float>(record(i), record(i) + record_len);
    }

    void append(int64_t id, int label, double metric, const std::vector<float>& rec) {
        if (record_len == 0) record_len = int(rec.size());
        if (int(rec.size()) != record_len)
            throw std::invalid_argument("WeightDataset::append: record length mismatch");
        ids.push_back(id);
        labels.push_back(label);
        metrics.push_back(metric);
        data.insert(data.end(), rec.begin(), rec.end());
    }
};

namespace wsd_detail {

inline void to_little_endian_inplace(std::vector<unsigned char>& bytes) {
    if constexpr (std::endian::native == std::endian::big) {
        for (size_t i = 0; i + 3 < bytes.size(); i += 4) {
            std::swap(bytes[i], bytes[i + 3]);
            std::swap(bytes[i + 1], bytes[i + 2]);
        }
    }
}

} // namespace wsd_detail

inline void write_weightdataset(const std::string& path, const WeightDataset& ds) {
    if (size_t(ds.count()) * size_t(ds.record_len) != ds.data.size())
        throw std::invalid_argument("write_weightdataset: data size does not match count * record_len");
    if (ds.labels.size() != ds.ids.size() || ds.metrics.size() != ds.ids.size())
        throw std::invalid_argument("write_weightdataset: ids/labels/metrics length mismatch");

    std::vector<unsigned char> payload(ds.data.size() * 4);
    if (!ds.data.empty()) std::memcpy(payload.data(), ds.data.data(), payload.size());
    wsd_detail::to_little_endian_inplace(payload);

    json header = {{"magic", "WSD1"},
                   {"version", 1},
                   {"arch", ds.arch},
                   {"arch_hash", content_hash(ds.arch.dump())},
                   {"parameterization", ds.parameterization},
                   {"mask", ds.mask},
                   {"extra", ds.extra},
                   {"record_len", ds.record_len},
                   {"count", ds.count()},
                   {"data_hash", content_hash(payload.data(), payload.size())}};
    std::string head = header.dump();
    head.push_back('\n');

    std::vector<unsigned char> out(head.begin(), head.end());
    out.insert(out.end(), payload.begin(), payload.end());
    write_file_bytes(path, out.data(), out.size());

    std::ofstream csv(path + ".csv", std::ios::trunc);
    if (!csv) throw std::runtime_error("cannot open file for write: " + path + ".csv");
    csv << "id,label,metric\n";
    char buf[64];
    for (int i = 0; i < ds.count(); ++i) {
        csv << ds.ids[size_t(i)] << ",";
        if (ds.labels[size_t(i)] >= 0) csv << ds.labels[size_t(i)];
        csv << ",";
        if (std::isfinite(ds.metrics[size_t(i)])) {
            std::snprintf(buf, sizeof(buf), "%.17g", ds.metrics[size_t(i)]);
            csv << buf;
        }
        csv << "\n";
    }
    if (!csv) throw std::runtime_error("short write: " + path + ".csv");
}

inline WeightDataset read_weightdataset(const std::string& path) {
    auto buf = read_file_bytes(path);
    auto nl = std::find(buf.begin(), buf.end(), static_cast<unsigned char>('\n'));
    if (nl == buf.end()) throw std::runtime_error("weight dataset " + path + ": missing header line");
    json header = json::parse(std::string(buf.begin(), nl)); // throws on malformed JSON
    if (header.value("magic", "") != std::string("WSD1"))
        throw std::runtime_error("weight dataset " + path + ": bad magic, expected WSD1");
    if (header.value("version", 0) != 1)
        throw std::runtime_error("weight dataset " + path + ": unsupported version");

    WeightDataset ds;
    ds.arch = header.at("arch");
    ds.parameterization = header.at("parameterization").get<std::string>();
    ds.mask = header.at("mask");
    ds.extra = header.at("extra");
    ds.record_len = header.at("record_len").get<int>();
    int count = header.at("count").get<int>();

    std::string expect_arch = header.at("arch_hash").get<std::string>();
    std::string actual_arch = content_hash(ds.arch.dump());
    if (expect_arch != actual_arch)
        throw std::runtime_error("weight dataset " + path + ": arch hash mismatch, expected " + expect_arch +
                                 " actual " + actual_arch);

    size_t payload_off = size_t(nl - buf.begin()) + 1;
    size_t need = size_t(count) * size_t(ds.record_len) * 4;
    if (buf.size() - payload_off != need)
        throw std::runtime_error("weight dataset " + path + ": payload is " +
                                 std::to_string(buf.size() - payload_off) + " bytes, expected " +
                                 std::to_string(need));
    std::string expect = header.at("data_hash").get<std::string>();
    std::string actual = content_hash(buf.data() + payload_off, need);
    if (expect != actual)
        throw std::runtime_error("weight dataset " + path + ": data hash mismatch, expected " + expect +
                                 " actual " + actual);

    std::vector<unsigned char> payload(buf.begin() + long(payload_off), buf.end());
    wsd_detail::to_little_endian_inplace(payload); // little-endian file -> native
    ds.data.resize(size_t(count) * size_t(ds.record_len));
    if (!ds.data.empty()) std::memcpy(ds.data.data(), payload.data(), payload.size());

    std::ifstream csv(path + ".csv");
    if (!csv) throw std::runtime_error("weight dataset " + path + ": missing companion csv");
    std::string line;
    if (!std::getline(csv, line) || line != "id,label,metric")
        throw std::runtime_error("weight dataset " + path + ".csv: bad header row");
    while (std::getline(csv, line)) {
        if (line.empty()) continue;
        size_t c1 = line.find(',');
        size_t c2 = line.find(',', c1 == std::string::npos ? c1 : c1 + 1);
        if (c1 == std::string::npos || c2 == std::string::npos)
            throw std::runtime_error("weight dataset " + path + ".csv: malformed row: " + line);
        ds.ids.push_back(std::stoll(line.substr(0, c1)));
        std::string lab = line.substr(c1 + 1, c2 - c1 - 1);
        ds.labels.push_back(lab.empty() ? -1 : std::stoi(lab));
        std::string met = line.substr(c2 + 1);
        ds.metrics.push_back(met.empty() ? std::nan("") : std::stod(met));
    }
    if (int(ds.ids.size()) != count)
        throw std::runtime_error("weight dataset " + path + ".csv: row count " + std::to_string(ds.ids.size()) +
                                 " does not match header count " + std::to_string(count));
    return ds;
}

// --- instance set persistence --------------------------------------------------------

/// Writes a generated dataset under `dir`: dataset.json plus one PGM per
/// image instance; SDF instances are stored inline as descriptors.
inline void write_instance_set(const std::string& dir, const std::vector<InstanceRecord>& recs, json meta) {
    std::filesystem::create_directories(dir);
    json items = json::array();
    for (const auto& r : recs) {
        json item = {{"id", r.id}, {"label", r.label}};
        if (r.modality == Modality::image2d) {
            char name[32];
            std::snprintf(name, sizeof(name), "img_%05lld.pgm", static_cast<long long>(r.id));
            write_pnm(dir + "/" + name, r.image);
            item["modality"] = "image2d";
            item["file"] = name;
            item["res"] = r.image.width;
        } else {
            item["modality"] = "sdf3d";
            item["sdf"] = sdf_to_json(r.sdf);
        }
        items.push_back(std::move(item));
    }
    json doc = {{"magic", "WSDATA1"}, {"meta", std::move(meta)}, {"instances", std::move(items)}};
    std::string s = doc.dump(2);
    s.push_back('\n');
    write_file_bytes(dir + "/dataset.json", s.data(), s.size());
}

inline std::vector<InstanceRecord> read_instance_set(const std::string& dir) {
    auto bytes = read_file_bytes(dir + "/dataset.json");
    json doc = json::parse(bytes.begin(), bytes.end());
    if (doc.value("magic", "") != std::string("WSDATA1"))
        throw std::runtime_error("instance set " + dir + ": bad magic");
    std::vector<InstanceRecord> out;
    for (const auto& item : doc.at("instances")) {
        InstanceRecord r;
        r.id = item.at("id").get<int64_t>();
        r.label = item.at("label").get<int>();
        std::string mod = item.at("modality").get<std::string>();
        if (mod == "image2d") {
            r.modality = Modality::image2d;
            r.image = read_pnm(dir + "/" + item.at("file").get<std::string>());
        } else if (mod == "sdf3d") {
            r.modality = Modality::sdf3d;
            r.sdf = sdf_from_json(item.at("sdf"));
        } else {
            throw std::runtime_error("instance set " + dir + ": unknown modality " + mod);
        }
        out.push_back(std::move(r));
    }
    return out;
}

// --- mesh / point cloud export --------------------------------------------------------

inline void write_obj(const std::string& path, const Mesh& m) {
    std::ofstream f(path, std::ios::trunc);
    if (!f) throw std::runtime_error("cannot open file for write: " + path);
    char buf[96];
    for (const auto& v : m.vertices) {
        std::snprintf(buf, sizeof(buf), "v %.7g %.7g %.7g\n", double(v[0]), double(v[1]), double(v[2]));
        f << buf;
    }
    for (const auto& t : m.triangles) f << "f " << t[0] + 1 << " " << t[1] + 1 << " " << t[2] + 1 << "\n";
    if (!f) throw std::runtime_error("short write: " + path);
}

inline void write_pointcloud_csv(const std::string& path, const Tensor& pts) {
    if (pts.cols() != 3) throw std::invalid_argument("write_pointcloud_csv: points must be N x 3");
    std::ofstream f(path, std::ios::trunc);
    if (!f) throw std::runtime_error("cannot open file for write: " + path);
    f << "x,y,z\n";
    char buf[96];
    for (int i = 0; i < pts.rows(); ++i) {
        std::snprintf(buf, sizeof(buf), "%.9g,%.9g,%.9g\n", double(pts.at(i, 0)), double(pts.at(i, 1)),
                      double(pts.at(i, 2)));
        f << buf;
    }
    if (!f) throw std::runtime_error("short write: " + path);
}

// --- experiment manifests ---------------------------------------------------------------

/// Provenance record written next to every artifact a tool run produces.
struct ExperimentManifest {
    std::string tool_version = wsf_version;
    json config = json::object();
    std::vector<uint64_t> seeds;
    std::vector<std::pair<std::string, std::string>> inputs; // (path, content hash)
    std::vector<std::string> outputs;

    void add_input(const std::string& path) { inputs.emplace_back(path, file_hash(path)); }
};

inline json manifest_to_json(const ExperimentManifest& m) {
    json inputs = json::array();
    for (const auto& [p, h] : m.inputs) inputs.push_back({{"path", p}, {"hash", h}});
    return {{"tool_version", m.tool_version},
            {"config", m.config},
            {"seeds", m.seeds},
            {"inputs", inputs},
            {"outputs", m.outputs}};
}

inline ExperimentManifest manifest_from_json(const json& j) {
    ExperimentManifest m;
    m.tool_version = j.at("tool_version").get<std::string>();
    m.config = j.at("config");
    m.seeds = j.at("seeds").get<std::vector<uint64_t>>();
    for (const auto& in : j.at("inputs"))
        m.inputs.emplace_back(in.at("path").get<std::string>(), in.at("hash").get<std::string>());
    m.outputs = j.at("outputs").get<std::vector<std::string>>();
    return m;
}

inline void write_manifest(const std::string& path, const ExperimentManifest& m) {
    std::string s = manifest_to_json(m).dump(2);
    s.push_back('\n');
    write_file_bytes(path, s.data(), s.size());
}

inline ExperimentManifest read_manifest(const std::string& path) {
    auto bytes = read_file_bytes(path);
    return manifest_from_json(json::parse(bytes.begin(), bytes.end()));
}

/// Recomputes the hash of every input; returns the paths that changed.
inline std::vector<std::string> manifest_stale_inputs(const ExperimentManifest& m) {
    std::vector<std::string> stale;
    for (const auto& [p, h] : m.inputs)
        if (file_hash(p) != h) stale.push_back(p);
    return stale;
}

} // namespace wsf
