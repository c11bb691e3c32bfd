#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <unordered_map>
#include <utility>
#include <vector>

#include "wsf/rng.hpp"
#include "wsf/tensor.hpp"

namespace wsf {

// ---------------------------------------------------------------------------
// Isosurface extraction and point-cloud geometry.
//
// marching_cubes runs off a 256-case triangulation table. The table is not
// copied from a reference listing; it is generated once at startup by
// polygonizing every sign configuration: on each cube face the isocontour
// segments are paired by a fixed rule (inside corners are separated on
// ambiguous faces) and directed so the inside region lies to the left seen
// from outside the cube, then segments chain into closed loops that are
// fan-triangulated. Because the face rule depends only on the face's own
// corner signs, adjacent cells always agree on shared faces and the mesh is
// watertight wherever the field has no sign changes on the grid boundary.
// ---------------------------------------------------------------------------

struct Mesh {
    std::vector<std::array<float, 3>> vertices;
    std::vector<std::array<int, 3>> triangles;
};

namespace mc_detail {

// Corner positions (unit cube), classic numbering.
inline constexpr int corner_pos[8][3] = {{0, 0, 0}, {1, 0, 0}, {1, 1, 0}, {0, 1, 0},
                                         {0, 0, 1}, {1, 0, 1}, {1, 1, 1}, {0, 1, 1}};
// Edge -> (corner, corner), classic numbering.
inline constexpr int edge_corner[12][2] = {{0, 1}, {1, 2}, {2, 3}, {3, 0}, {4, 5}, {5, 6},
                                           {6, 7}, {7, 4}, {0, 4}, {1, 5}, {2, 6}, {3, 7}};
// Faces as corner quads, counter-clockwise seen from outside the cube.
inline constexpr int face_corner[6][4] = {
    {0, 3, 2, 1}, // z = 0
    {4, 5, 6, 7}, // z = 1
    {0, 1, 5, 4}, // y = 0
    {2, 3, 7, 6}, // y = 1
    {0, 4, 7, 3}, // x = 0
    {1, 2, 6, 5}, // x = 1
};

inline int edge_between(int a, int b) {
    for (int e = 0; e < 12; ++e) {
        if ((edge_corner[e][0] == a && edge_corner[e][1] == b) ||
            (edge_corner[e][0] == b && edge_corner[e][1] == a))
            return e;
    }
    throw std::logic_error("marching cubes: corners not adjacent");
}

/// Triangles (as edge-index triples) for one of the 256 sign configurations.
/// Bit i of `config` set means corner i is inside (value < iso).
inline std::vector<std::array<int, 3>> polygonize_config(int config) {
    // Directed contour segments on faces, as (from edge, to edge): from the
    // edge where a counter-clockwise walk (seen from outside) leaves an
    // inside run to the edge where it enters it, which puts the inside
    // region on the segment's left.
    std::vector<std::pair<int, int>> segs;
    for (const auto& quad : face_corner) {
        bool in[4];
        for (int k = 0; k < 4; ++k) in[k] = (config >> quad[k]) & 1;
        int E[4];
        for (int k = 0; k < 4; ++k) E[k] = edge_between(quad[k], quad[(k + 1) % 4]);
        int count = in[0] + in[1] + in[2] + in[3];
        if (count == 0 || count == 4) continue;
        bool diagonal = count == 2 && in[0] == in[2] && in[1] == in[3];
        if (diagonal) {
            // ambiguous face: separate the two inside corners
            for (int k = 0; k < 4; ++k)
                if (in[k]) segs.emplace_back(E[k], E[(k + 3) % 4]);
        } else {
            // maximal runs of consecutive inside corners
            for (int k = 0; k < 4; ++k) {
                if (!in[k] || in[(k + 3) % 4]) continue; // not a run start
                int end = k;
                while (in[(end + 1) % 4]) end = (end + 1) % 4;
                segs.emplace_back(E[end], E[(k + 3) % 4]);
            }
        }
    }

    // Chain segments into closed loops: the next segment starts at the edge
    // where the current one ends. The face rule guarantees each crossed cube
    // edge is the head of exactly one segment and the tail of exactly one.
    std::vector<std::array<int, 3>> tris;
    std::vector<bool> used(segs.size(), false);
    for (size_t s0 = 0; s0 < segs.size(); ++s0) {
        if (used[s0]) continue;
        std::vector<int> loop;
        size_t cur = s0;
        while (true) {
            used[cur] = true;
            loop.push_back(segs[cur].first);
            int want = segs[cur].second;
            if (want == segs[s0].first) break; // loop closed
            size_t nxt = segs.size();
            for (size_t t = 0; t < segs.size(); ++t)
                if (!used[t] && segs[t].first == want) {
                    nxt = t;
                    break;
                }
            if (nxt == segs.size()) throw std::logic_error("marching cubes: open contour in case table");
            cur = nxt;
        }
        if (loop.size() < 3) throw std::logic_error("marching cubes: degenerate loop in case table");
        // The chained loop runs with the inside region on its left seen from
        // outside the cube; reversing it when fanning makes triangle normals
        // point out of the inside region (outward for signed distance fields).
        for (size_t k = 1; k + 1 < loop.size(); ++k)
            tris.push_back({loop[0], loop[k + 1], loop[k]});
    }
    return tris;
}

struct CaseTable {
    std::vector<std::array<int, 3>> tri[256];
    CaseTable() {
        for (int c = 0; c < 256; ++c) tri[c] = polygonize_config(c);
    }
};

inline const CaseTable& case_table() {
    static const CaseTable t;
    return t;
}

} // namespace mc_detail

/// Extract the iso-level surface of a scalar field sampled on a cubic
/// lattice. `grid[(iz*res + iy)*res + ix]` is the value at lattice point
/// (ix, iy, iz); lattice points span [-1,1]^3 inclusive. Vertices lie on
/// lattice edges at linear-interpolation positions and are shared between
/// the triangles of adjacent cells.
inline Mesh marching_cubes(const std::vector<float>& grid, int res, float iso) {
    if (res < 2) throw std::invalid_argument("marching_cubes: res must be >= 2");
    if (int64_t(grid.size()) != int64_t(res) * res * res)
        throw std::invalid_argument("marching_cubes: grid size does not match res^3");
    const auto& table = mc_detail::case_table();
    Mesh mesh;
    auto lattice = [&](int i) { return -1.0f + 2.0f * float(i) / float(res - 1); };
    auto gval = [&](int ix, int iy, int iz) { return grid[(size_t(iz) * res + size_t(iy)) * res + size_t(ix)]; };

    // Global edge key: lattice point id * 3 + axis (0=x,1=y,2=z).
    std::unordered_map<uint64_t, int> edge_vertex;
    auto vertex_on = [&](int ix, int iy, int iz, int axis) -> int {
        uint64_t pid = (uint64_t(iz) * uint64_t(res) + uint64_t(iy)) * uint64_t(res) + uint64_t(ix);
        uint64_t key = pid * 3 + uint64_t(axis);
        auto it = edge_vertex.find(key);
        if (it != edge_vertex.end()) return it->second;
        int jx = ix + (axis == 0), jy = iy + (axis == 1), jz = iz + (axis == 2);
        float va = gval(ix, iy, iz), vb = gval(jx, jy, jz);
        float t = (iso - va) / (vb - va);
        t = std::min(std::max(t, 0.0f), 1.0f);
        std::array<float, 3> p = {lattice(ix) + t * (lattice(jx) - lattice(ix)),
                                  lattice(iy) + t * (lattice(jy) - lattice(iy)),
                                  lattice(iz) + t * (lattice(jz) - lattice(iz))};
        int id = int(mesh.vertices.size());
        mesh.vertices.push_back(p);
        edge_vertex.emplace(key, id);
        return id;
    };

    for (int iz = 0; iz + 1 < res; ++iz)
        for (int iy = 0; iy + 1 < res; ++iy)
            for (int ix = 0; ix + 1 < res; ++ix) {
                int config = 0;
                for (int c = 0; c < 8; ++c) {
                    const int* cp = mc_detail::corner_pos[c];
                    if (gval(ix + cp[0], iy + cp[1], iz + cp[2]) < iso) config |= 1 << c;
                }
                if (config == 0 || config == 255) continue;
                for (const auto& t : table.tri[config]) {
                    int vid[3];
                    bool degenerate = false;
                    for (int k = 0; k < 3; ++k) {
                        int e = t[k];
                        int ca = mc_detail::edge_corner[e][0], cb = mc_detail::edge_corner[e][1];
                        const int* pa = mc_detail::corner_pos[ca];
                        const int* pb = mc_detail::corner_pos[cb];
                        int axis = pa[0] != pb[0] ? 0 : (pa[1] != pb[1] ? 1 : 2);
                        // base lattice point = the lower corner along axis
                        int bx = ix + std::min(pa[0], pb[0]);
                        int by = iy + std::min(pa[1], pb[1]);
                        int bz = iz + std::min(pa[2], pb[2]);
                        vid[k] = vertex_on(bx, by, bz, axis);
                    }
                    if (vid[0] == vid[1] || vid[1] == vid[2] || vid[0] == vid[2]) degenerate = true;
                    if (!degenerate) mesh.triangles.push_back({vid[0], vid[1], vid[2]});
                }
            }
    return mesh;
}

/// 2-d analogue: iso-level segments of a field sampled on a res x res
/// lattice spanning [-1,1]^2; grid[iy*res + ix]. Returns (x0,y0,x1,y1)
/// segments with linear interpolation along cell edges.
inline std::vector<std::array<float, 4>> marching_squares(const std::vector<float>& grid, int res, float iso) {
    if (res < 2) throw std::invalid_argument("marching_squares: res must be >= 2");
    if (int64_t(grid.size()) != int64_t(res) * res)
        throw std::invalid_argument("marching_squares: grid size does not match res^2");
    auto lattice = [&](int i) { return -1.0f + 2.0f * float(i) / float(res - 1); };
    auto gval = [&](int ix, int iy) { return grid[size_t(iy) * res + size_t(ix)]; };
    std::vector<std::array<float, 4>> segs;
    // cell corners counter-clockwise: (0,0),(1,0),(1,1),(0,1)
    const int cp[4][2] = {{0, 0}, {1, 0}, {1, 1}, {0, 1}};
    for (int iy = 0; iy + 1 < res; ++iy)
        for (int ix = 0; ix + 1 < res; ++ix) {
            bool in[4];
            float v[4];
            for (int k = 0; k < 4; ++k) {
                v[k] = gval(ix + cp[k][0], iy + cp[k][1]);
                in[k] = v[k] < iso;
            }
            auto cut = [&](int k) -> std::array<float, 2> {
                int k2 = (k + 1) % 4;
                float t = (iso - v[k]) / (v[k2] - v[k]);
                t = std::min(std::max(t, 0.0f), 1.0f);
                float x0 = lattice(ix + cp[k][0]), y0 = lattice(iy + cp[k][1]);
                float x1 = lattice(ix + cp[k2][0]), y1 = lattice(iy + cp[k2][1]);
                return {x0 + t * (x1 - x0), y0 + t * (y1 - y0)};
            };
            // runs of inside corners, same pairing rule as the 3-d case
            int count = in[0] + in[1] + in[2] + in[3];
            if (count == 0 || count == 4) continue;
            bool diagonal = count == 2 && in[0] == in[2] && in[1] == in[3];
            for (int k = 0; k < 4; ++k) {
                if (!in[k]) continue;
                if (!diagonal && in[(k + 3) % 4]) continue; // not a run start
                int end = k;
                if (!diagonal)
                    while (in[(end + 1) % 4]) end = (end + 1) % 4;
                auto a = cut(end);         // leaving edge
                auto b = cut((k + 3) % 4); // entering edge
                segs.push_back({a[0], a[1], b[0], b[1]});
            }
        }
    return segs;
}

inline double triangle_area(const std::array<float, 3>& a, const std::array<float, 3>& b,
                            const std::array<float, 3>& c) {
    double ux = b[0] - a[0], uy = b[1] - a[1], uz = b[2] - a[2];
    double vx = c[0] - a[0], vy = c[1] - a[1], vz = c[2] - a[2];
    double cx = uy * vz - uz * vy, cy = uz * vx - ux * vz, cz = ux * vy - uy * vx;
    return 0.5 * std::sqrt(cx * cx + cy * cy + cz * cz);
}

inline double mesh_area(const Mesh& m) {
    double s = 0.0;
    for (const auto& t : m.triangles)
        s += triangle_area(m.vertices[size_t(t[0])], m.vertices[size_t(t[1])], m.vertices[size_t(t[2])]);
    return s;
}

/// Area-uniform surface samples (N x 3). Raises on an empty mesh.
inline Tensor sample_surface(const Mesh& m, int n, Rng& rng) {
    if (m.triangles.empty()) throw std::runtime_error("sample_surface: empty mesh");
    std::vector<double> cum(m.triangles.size());
    double total = 0.0;
    for (size_t i = 0; i < m.triangles.size(); ++i) {
        const auto& t = m.triangles[i];
        total += triangle_area(m.vertices[size_t(t[0])], m.vertices[size_t(t[1])], m.vertices[size_t(t[2])]);
        cum[i] = total;
    }
    if (total <= 0.0) throw std::runtime_error("sample_surface: degenerate mesh");
    Tensor out({n, 3});
    for (int s = 0; s < n; ++s) {
        double u = rng.next_double() * total;
        size_t lo = 0, hi = cum.size() - 1;
        while (lo < hi) {
            size_t mid = (lo + hi) / 2;
            if (cum[mid] < u)
                lo = mid + 1;
            else
                hi = mid;
        }
        const auto& t = m.triangles[lo];
        const auto &A = m.vertices[size_t(t[0])], &B = m.vertices[size_t(t[1])], &C = m.vertices[size_t(t[2])];
        float r1 = std::sqrt(rng.uniform());
        float r2 = rng.uniform();
        float wa = 1.0f - r1, wb = r1 * (1.0f - r2), wc = r1 * r2;
        for (int k = 0; k < 3; ++k) out.at(s, k) = wa * A[size_t(k)] + wb * B[size_t(k)] + wc * C[size_t(k)];
    }
    return out;
}

// --- exact nearest neighbour -----------------------------------------------------

/// Median-split kd-tree over fixed-dimension points; exact nearest queries.
class KdTree {
public:
    KdTree(const float* pts, int n, int dim) : pts_(pts), n_(n), dim_(dim) {
        if (n <= 0) throw std::invalid_argument("KdTree: empty point set");
        idx_.resize(size_t(n));
        for (int i = 0; i < n; ++i) idx_[size_t(i)] = i;
        nodes_.reserve(size_t(2 * n));
        root_ = build(0, n, 0);
    }

    explicit KdTree(const Tensor& pts) : KdTree(pts.data(), pts.rows(), pts.cols()) {}

    /// Returns (point index, squared distance).
    std::pair<int, double> nearest(const float* q) const {
        int best = -1;
        double bd = 1e300;
        search(root_, q, best, bd);
        return {best, bd};
    }

private:
    struct Node {
        int axis = 0, point = -1, left = -1, right = -1;
        float split = 0.0f;
    };

    int build(int lo, int hi, int depth) {
        if (lo >= hi) return -1;
        int axis = depth % dim_;
        int mid = (lo + hi) / 2;
        std::nth_element(idx_.begin() + lo, idx_.begin() + mid, idx_.begin() + hi,
                         [&](int a, int b) { return pts_[size_t(a) * dim_ + axis] < pts_[size_t(b) * dim_ + axis]; });
        Node node;
        node.axis = axis;
        node.point = idx_[size_t(mid)];
        node.split = pts_[size_t(node.point) * dim_ + axis];
        int id = int(nodes_.size());
        nodes_.push_back(node);
        int l = build(lo, mid, depth + 1);
        int r = build(mid + 1, hi, depth + 1);
        nodes_[size_t(id)].left = l;
        nodes_[size_t(id)].right = r;
        return id;
    }

    void search(int node, const float* q, int& best, double& bd) const {
        if (node < 0) return;
        const Node& nd = nodes_[size_t(node)];
        double d = 0.0;
        for (int k = 0; k < dim_; ++k) {
            double t = double(q[k]) - double(pts_[size_t(nd.point) * dim_ + k]);
            d += t * t;
        }
        if (d < bd) {
            bd = d;
            best = nd.point;
        }
        double delta = double(q[nd.axis]) - double(nd.split);
        search(delta < 0 ? nd.left : nd.right, q, best, bd);
        if (delta * delta < bd) search(delta < 0 ? nd.right : nd.left, q, best, bd);
    }

    const float* pts_;
    int n_, dim_;
    int root_ = -1;
    std::vector<int> idx_;
    std::vector<Node> nodes_;
};

/// Chamfer distance: sum over both directions of the mean *squared* nearest
/// neighbour distance. With this convention chamfer({0}, {1}) = 2.
inline double chamfer(const Tensor& a, const Tensor& b) {
    if (a.cols() != b.cols()) throw std::invalid_argument("chamfer: dimension mismatch");
    if (a.rows() == 0 || b.rows() == 0) throw std::invalid_argument("chamfer: empty point set");
    const int dim = a.cols();
    KdTree ta(a), tb(b);
    double ab = 0.0, ba = 0.0;
    for (int i = 0; i < a.rows(); ++i) ab += tb.nearest(a.data() + size_t(i) * dim).second;
    for (int j = 0; j < b.rows(); ++j) ba += ta.nearest(b.data() + size_t(j) * dim).second;
    return ab / a.rows() + ba / b.rows();
}

// --- coordinate grids ---------------------------------------------------------------

/// Pixel-center coordinates of a res x res image in [-1,1]^2; row-major
/// (row = y, col = x), matching image storage order.
inline Tensor image_grid_coords(int res) {
    Tensor out({res * res, 2});
    for (int r = 0; r < res; ++r)
        for (int c = 0; c < res; ++c) {
            out.at(r * res + c, 0) = -1.0f + 2.0f * (float(c) + 0.5f) / float(res);
            out.at(r * res + c, 1) = -1.0f + 2.0f * (float(r) + 0.5f) / float(res);
        }
    return out;
}

/// Lattice-point coordinates for marching cubes grids: res^3 x 3, ix fastest.
inline Tensor sdf_grid_coords(int res) {
    Tensor out({res * res * res, 3});
    auto lat = [&](int i) { return -1.0f + 2.0f * float(i) / float(res - 1); };
    int64_t n = 0;
    for (int iz = 0; iz < res; ++iz)
        for (int iy = 0; iy < res; ++iy)
            for (int ix = 0; ix < res; ++ix, ++n) {
                out.at(int(n), 0) = lat(ix);
                out.at(int(n), 1) = lat(iy);
                out.at(int(n), 2) = lat(iz);
            }
    return out;
}

} // namespace wsf
