#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <functional>
#include <map>
#include <set>

#include "oracles.hpp"
#include "wsf/geometry.hpp"

using namespace wsf;

namespace {

std::vector<float> sample_grid(int res, const std::function<float(float, float, float)>& f) {
    std::vector<float> g(size_t(res) * res * res);
    auto lat = [&](int i) { return -1.0f + 2.0f * float(i) / float(res - 1); };
    size_t n = 0;
    for (int iz = 0; iz < res; ++iz)
        for (int iy = 0; iy < res; ++iy)
            for (int ix = 0; ix < res; ++ix, ++n) g[n] = f(lat(ix), lat(iy), lat(iz));
    return g;
}

float sphere_sdf(float x, float y, float z, float r) { return std::sqrt(x * x + y * y + z * z) - r; }

// Euler characteristic V - E + F with E counted from unique undirected edges.
int euler_characteristic(const Mesh& m) {
    std::set<std::pair<int, int>> edges;
    for (const auto& t : m.triangles)
        for (int k = 0; k < 3; ++k) {
            int a = t[size_t(k)], b = t[size_t((k + 1) % 3)];
            edges.insert({std::min(a, b), std::max(a, b)});
        }
    return int(m.vertices.size()) - int(edges.size()) + int(m.triangles.size());
}

// Watertight with consistent winding: every directed edge appears exactly once.
bool consistently_closed(const Mesh& m) {
    std::map<std::pair<int, int>, int> directed;
    for (const auto& t : m.triangles)
        for (int k = 0; k < 3; ++k) ++directed[{t[size_t(k)], t[size_t((k + 1) % 3)]}];
    for (const auto& [e, c] : directed) {
        if (c != 1) return false;
        if (!directed.count({e.second, e.first})) return false;
    }
    return true;
}

} // namespace

TEST_CASE("marching cubes recovers a sphere", "[geometry]") {
    const int res = 32;
    const float r = 0.62f;
    auto grid = sample_grid(res, [&](float x, float y, float z) { return sphere_sdf(x, y, z, r); });
    Mesh m = marching_cubes(grid, res, 0.0f);
    REQUIRE(m.vertices.size() > 100);
    REQUIRE(m.triangles.size() > 100);

    // vertices sit on the surface up to linear-interpolation error O(h^2)
    const float h = 2.0f / (res - 1);
    for (const auto& v : m.vertices) {
        float d = std::sqrt(v[0] * v[0] + v[1] * v[1] + v[2] * v[2]);
        REQUIRE(std::fabs(d - r) < h * h * 2.0f);
    }
    // area close to 4 pi r^2
    REQUIRE(mesh_area(m) == Catch::Approx(4.0 * 3.14159265358979 * r * r).epsilon(0.01));
    // closed, consistently wound, genus 0
    REQUIRE(consistently_closed(m));
    REQUIRE(euler_characteristic(m) == 2);
}

TEST_CASE("marching cubes handles a torus (ambiguous faces, genus 1)", "[geometry]") {
    const int res = 48;
    auto torus = [](float x, float y, float z) {
        float q = std::sqrt(x * x + y * y) - 0.55f;
        return std::sqrt(q * q + z * z) - 0.23f;
    };
    auto grid = sample_grid(res, torus);
    Mesh m = marching_cubes(grid, res, 0.0f);
    REQUIRE(consistently_closed(m));
    REQUIRE(euler_characteristic(m) == 0);
    // area of a torus: 4 pi^2 R r
    REQUIRE(mesh_area(m) == Catch::Approx(4.0 * 3.14159265358979 * 3.14159265358979 * 0.55 * 0.23).epsilon(0.02));
}

TEST_CASE("marching cubes splits disjoint components", "[geometry]") {
    const int res = 40;
    auto two = [](float x, float y, float z) {
        float a = std::sqrt((x + 0.5f) * (x + 0.5f) + y * y + z * z) - 0.3f;
        float b = std::sqrt((x - 0.5f) * (x - 0.5f) + y * y + z * z) - 0.3f;
        return std::min(a, b);
    };
    auto grid = sample_grid(res, two);
    Mesh m = marching_cubes(grid, res, 0.0f);
    REQUIRE(consistently_closed(m));
    REQUIRE(euler_characteristic(m) == 4); // two spheres
}

TEST_CASE("vertices interpolate linearly along lattice edges", "[geometry]") {
    // For the linear field f = x, the iso-0.3 surface is the plane x = 0.3.
    const int res = 16;
    auto grid = sample_grid(res, [](float x, float, float) { return x; });
    Mesh m = marching_cubes(grid, res, 0.3f);
    REQUIRE_FALSE(m.vertices.empty());
    for (const auto& v : m.vertices) REQUIRE(v[0] == Catch::Approx(0.3f).margin(1e-6));
}

TEST_CASE("outward orientation for a signed distance field", "[geometry]") {
    const int res = 24;
    auto grid = sample_grid(res, [&](float x, float y, float z) { return sphere_sdf(x, y, z, 0.6f); });
    Mesh m = marching_cubes(grid, res, 0.0f);
    int outward = 0, inward = 0;
    for (const auto& t : m.triangles) {
        const auto &a = m.vertices[size_t(t[0])], &b = m.vertices[size_t(t[1])], &c = m.vertices[size_t(t[2])];
        float ux = b[0] - a[0], uy = b[1] - a[1], uz = b[2] - a[2];
        float vx = c[0] - a[0], vy = c[1] - a[1], vz = c[2] - a[2];
        float nx = uy * vz - uz * vy, ny = uz * vx - ux * vz, nz = ux * vy - uy * vx;
        float cx = (a[0] + b[0] + c[0]) / 3, cy = (a[1] + b[1] + c[1]) / 3, cz = (a[2] + b[2] + c[2]) / 3;
        (nx * cx + ny * cy + nz * cz > 0 ? outward : inward)++;
    }
    INFO("outward " << outward << " inward " << inward);
    REQUIRE(outward > inward * 50);
}

TEST_CASE("marching squares recovers a circle's circumference", "[geometry]") {
    const int res = 96;
    const float r = 0.7f;
    std::vector<float> g(size_t(res) * res);
    auto lat = [&](int i) { return -1.0f + 2.0f * float(i) / float(res - 1); };
    for (int iy = 0; iy < res; ++iy)
        for (int ix = 0; ix < res; ++ix)
            g[size_t(iy) * res + ix] = std::sqrt(lat(ix) * lat(ix) + lat(iy) * lat(iy)) - r;
    auto segs = marching_squares(g, res, 0.0f);
    REQUIRE_FALSE(segs.empty());
    double len = 0.0;
    for (const auto& s : segs) len += std::hypot(double(s[2] - s[0]), double(s[3] - s[1]));
    REQUIRE(len == Catch::Approx(2.0 * 3.14159265358979 * r).epsilon(0.01));
    // closed contour: every endpoint is shared by exactly two segments
    std::map<std::pair<long, long>, int> ends;
    auto q = [](float v) { return lround(double(v) * 1e6); };
    for (const auto& s : segs) {
        ++ends[{q(s[0]), q(s[1])}];
        ++ends[{q(s[2]), q(s[3])}];
    }
    for (const auto& [p, c] : ends) REQUIRE(c == 2);
}

TEST_CASE("chamfer convention: {0} vs {1} gives 2", "[geometry]") {
    Tensor a({1, 1}, {0.0f});
    Tensor b({1, 1}, {1.0f});
    REQUIRE(chamfer(a, b) == Catch::Approx(2.0));
    REQUIRE(chamfer(a, a) == 0.0);
}

TEST_CASE("chamfer matches the brute-force oracle", "[geometry]") {
    Rng r(17);
    Tensor a = Tensor::randn({137, 3}, r);
    Tensor b = Tensor::randn({211, 3}, r);
    double got = chamfer(a, b);
    double want = oracle::mean_sq_nn(a.vec(), b.vec(), 3) + oracle::mean_sq_nn(b.vec(), a.vec(), 3);
    REQUIRE(got == Catch::Approx(want).epsilon(1e-12));
    REQUIRE(chamfer(a, b) == Catch::Approx(chamfer(b, a)).epsilon(1e-12)); // symmetric
}

TEST_CASE("kd-tree nearest equals brute force, duplicates included", "[geometry]") {
    Rng r(18);
    Tensor pts = Tensor::randn({64, 2}, r);
    for (int k = 0; k < 8; ++k) // inject duplicates
        for (int d = 0; d < 2; ++d) pts.at(40 + k, d) = pts.at(k, d);
    KdTree tree(pts);
    for (int trial = 0; trial < 200; ++trial) {
        float q[2] = {r.normal(), r.normal()};
        auto [idx, sq] = tree.nearest(q);
        double best = 1e300;
        for (int i = 0; i < 64; ++i) {
            double dx = double(q[0]) - pts.at(i, 0), dy = double(q[1]) - pts.at(i, 1);
            best = std::min(best, dx * dx + dy * dy);
        }
        REQUIRE(sq == Catch::Approx(best).margin(1e-12));
        REQUIRE(idx >= 0);
    }
}

TEST_CASE("surface sampling is area-uniform and on-surface", "[geometry]") {
    const int res = 28;
    auto grid = sample_grid(res, [&](float x, float y, float z) { return sphere_sdf(x, y, z, 0.65f); });
    Mesh m = marching_cubes(grid, res, 0.0f);
    Rng r(19);
    Tensor s = sample_surface(m, 4000, r);
    double mx = 0, my = 0, mz = 0;
    for (int i = 0; i < s.rows(); ++i) {
        float d = std::sqrt(s.at(i, 0) * s.at(i, 0) + s.at(i, 1) * s.at(i, 1) + s.at(i, 2) * s.at(i, 2));
        REQUIRE(std::fabs(d - 0.65f) < 0.02f);
        mx += s.at(i, 0);
        my += s.at(i, 1);
        mz += s.at(i, 2);
    }
    // centroid of uniform sphere samples concentrates at the origin
    REQUIRE(std::fabs(mx / s.rows()) < 0.03);
    REQUIRE(std::fabs(my / s.rows()) < 0.03);
    REQUIRE(std::fabs(mz / s.rows()) < 0.03);

    Mesh empty;
    REQUIRE_THROWS_AS(sample_surface(empty, 10, r), std::runtime_error);
}

TEST_CASE("grid coordinate order matches grid indexing", "[geometry]") {
    const int res = 5;
    Tensor coords = sdf_grid_coords(res);
    REQUIRE(coords.rows() == res * res * res);
    // row n corresponds to (ix, iy, iz) with ix fastest
    int n = 0;
    auto lat = [&](int i) { return -1.0f + 2.0f * float(i) / float(res - 1); };
    for (int iz = 0; iz < res; ++iz)
        for (int iy = 0; iy < res; ++iy)
            for (int ix = 0; ix < res; ++ix, ++n) {
                REQUIRE(coords.at(n, 0) == Catch::Approx(lat(ix)));
                REQUIRE(coords.at(n, 1) == Catch::Approx(lat(iy)));
                REQUIRE(coords.at(n, 2) == Catch::Approx(lat(iz)));
            }
    Tensor img = image_grid_coords(4);
    REQUIRE(img.at(0, 0) == Catch::Approx(-0.75f)); // first pixel center
    REQUIRE(img.at(1, 0) == Catch::Approx(-0.25f)); // next column moves x
    REQUIRE(img.at(4, 1) == Catch::Approx(-0.25f)); // next row moves y
}

TEST_CASE("malformed grids are rejected", "[geometry]") {
    std::vector<float> g(27);
    REQUIRE_THROWS_AS(marching_cubes(g, 4, 0.0f), std::invalid_argument);
    REQUIRE_THROWS_AS(marching_cubes(g, 1, 0.0f), std::invalid_argument);
    std::vector<float> g2(8);
    REQUIRE_THROWS_AS(marching_squares(g2, 4, 0.0f), std::invalid_argument);
}
