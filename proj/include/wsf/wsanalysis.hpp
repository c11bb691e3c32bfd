#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "wsf/fitting.hpp"

namespace wsf {

// ---------------------------------------------------------------------------
// Weight-space structure analysis: sensitivity of fitted representations to
// perturbed initializations (similarity + linear-mode-connectivity barrier),
// and discriminative probes over finished weight datasets (1-NN, logistic
// regression, k-means/ARI, PCA embedding).
// ---------------------------------------------------------------------------

// --- elementary operations ---------------------------------------------------

/// Variance-preserving blend of two raw init vectors:
/// sqrt(1 - lambda^2) * i1 + lambda * i2.
inline std::vector<float> perturb_init(const std::vector<float>& i1, const std::vector<float>& i2, double lambda) {
    if (i1.size() != i2.size()) throw std::invalid_argument("perturb_init: length mismatch");
    if (!(lambda >= 0.0 && lambda <= 1.0)) throw std::invalid_argument("perturb_init: lambda must be in [0,1]");
    const float a = float(std::sqrt(1.0 - lambda * lambda)), b = float(lambda);
    std::vector<float> out(i1.size());
    for (size_t i = 0; i < out.size(); ++i) out[i] = a * i1[i] + b * i2[i];
    return out;
}

inline double cosine_similarity(const std::vector<float>& a, const std::vector<float>& b) {
    if (a.size() != b.size()) throw std::invalid_argument("cosine_similarity: length mismatch");
    double d = 0, na = 0, nb = 0;
    for (size_t i = 0; i < a.size(); ++i) {
        d += double(a[i]) * b[i];
        na += double(a[i]) * a[i];
        nb += double(b[i]) * b[i];
    }
    if (na == 0.0 || nb == 0.0) throw std::invalid_argument("cosine_similarity: zero vector");
    return d / (std::sqrt(na) * std::sqrt(nb));
}

inline std::vector<float> repr_midpoint(const std::vector<float>& a, const std::vector<float>& b) {
    if (a.size() != b.size()) throw std::invalid_argument("repr_midpoint: length mismatch");
    std::vector<float> out(a.size());
    for (size_t i = 0; i < out.size(); ++i) out[i] = 0.5f * (a[i] + b[i]);
    return out;
}

/// Decode a flattened representation and evaluate it on a coordinate set.
inline Tensor eval_representation(const FieldArch& arch, const ReprLayout& layout, const AsymMask* mask,
                                  const WeightSet* base_ws, const std::vector<float>& repr, const Tensor& coords) {
    if (layout.kind == ReprLayout::Kind::standalone) {
        WeightSet ws = unflatten_standalone(repr, layout, mask);
        return field_eval(arch, ws, Tensor::zeros({1, 1}), coords);
    }
    if (!base_ws) throw std::invalid_argument("eval_representation: adapter representations need a base weight set");
    LoraParams p = unflatten_lora(repr, layout, mask);
    return lora_eval(arch, *base_ws, p, coords);
}

struct BarrierResult {
    double value = 0.0;
    bool flagged = false; // no surface extracted; value is the domain-diagonal sentinel
};

/// Reconstruction error of one representation against its instance: mean
/// squared error for images; chamfer between surface samples for SDFs, with
/// the domain diagonal as a flagged sentinel when the decoded field has no
/// zero crossing.
inline BarrierResult repr_recon_error(const FieldArch& arch, const ReprLayout& layout, const AsymMask* mask,
                                      const WeightSet* base_ws, const std::vector<float>& repr,
                                      const InstanceRecord& inst, int eval_res, int metric_points, uint64_t seed) {
    BarrierResult out;
    if (inst.modality == Modality::image2d) {
        Tensor pred = eval_representation(arch, layout, mask, base_ws, repr, image_grid_coords(inst.image.width));
        Tensor gt = image_targets(inst.image);
        double se = 0;
        for (int64_t i = 0; i < pred.numel(); ++i) {
            double d = double(pred[i]) - double(gt[i]);
            se += d * d;
        }
        out.value = se / double(pred.numel());
        return out;
    }
    Tensor vals = eval_representation(arch, layout, mask, base_ws, repr, sdf_grid_coords(eval_res));
    Mesh pm = marching_cubes(vals.vec(), eval_res, 0.0f);
    if (pm.triangles.empty()) {
        out.value = 2.0 * std::sqrt(double(arch.input_dim)); // domain diagonal of [-1,1]^d
        out.flagged = true;
        return out;
    }
    Tensor coords = sdf_grid_coords(eval_res);
    Tensor gt_vals = sdf_targets(inst.sdf, coords);
    Mesh gm = marching_cubes(gt_vals.vec(), eval_res, 0.0f);
    if (gm.triangles.empty()) throw std::runtime_error("repr_recon_error: ground truth has no surface");
    Tensor pp = sample_surface(pm, metric_points, Rng(seed).stream(rng_purpose::surface_sampling, uint64_t(inst.id) * 2));
    Tensor gp =
        sample_surface(gm, metric_points, Rng(seed).stream(rng_purpose::surface_sampling, uint64_t(inst.id) * 2 + 1));
    out.value = chamfer(pp, gp);
    return out;
}

/// Linear-mode-connectivity barrier: reconstruction error of the midpoint of
/// the straight path between two representations.
inline BarrierResult lmc_barrier(const FieldArch& arch, const ReprLayout& layout, const AsymMask* mask,
                                 const WeightSet* base_ws, const std::vector<float>& phi,
                                 const std::vector<float>& phi_lambda, const InstanceRecord& inst, int eval_res,
                                 int metric_points, uint64_t seed) {
    return repr_recon_error(arch, layout, mask, base_ws, repr_midpoint(phi, phi_lambda), inst, eval_res,
                            metric_points, seed);
}

// --- perturbation experiment ---------------------------------------------------

struct PerturbPair {
    int64_t id = 0;
    double lambda = 0.0;
    double similarity = 0.0;
    double barrier = 0.0;
    bool flagged = false;
};

struct PerturbRow {
    std::string parameterization;
    double lambda = 0.0;
    double mean_similarity = 0.0, std_similarity = 0.0;
    double mean_barrier = 0.0, std_barrier = 0.0;
};

namespace analysis_detail {

inline void mean_std(const std::vector<double>& v, double& mean, double& sd) {
    mean = 0.0;
    for (double x : v) mean += x;
    mean /= double(v.size());
    sd = 0.0;
    if (v.size() > 1) {
        for (double x : v) sd += (x - mean) * (x - mean);
        sd = std::sqrt(sd / double(v.size() - 1));
    }
}

} // namespace analysis_detail

/// For each instance, fit once from a fresh raw init i1 and once per lambda
/// from the variance-preserving perturbation of (i1, i2); report per-lambda
/// mean/std of representation cosine similarity and midpoint barrier.
/// Deterministic in cfg.seed and instance ids for any worker count.
inline std::vector<PerturbRow> perturbation_experiment(const FieldArch& arch, const FitConfig& cfg,
                                                       const std::vector<InstanceRecord>& instances,
                                                       const std::vector<double>& lambdas, const WeightSet* base_ws,
                                                       int jobs = 1, std::vector<PerturbPair>* pairs_out = nullptr) {
    cfg.validate();
    if (instances.size() < 2) throw std::invalid_argument("perturbation_experiment: needs at least 2 instances");
    if (lambdas.empty()) throw std::invalid_argument("perturbation_experiment: empty lambda grid");
    for (double l : lambdas)
        if (!(l >= 0.0 && l <= 1.0)) throw std::invalid_argument("perturbation_experiment: lambda outside [0,1]");
    if (cfg.protocol != FitConfig::Protocol::shared_random)
        throw std::invalid_argument("perturbation_experiment: first-instance protocol does not apply");

    std::optional<AsymMask> mask;
    if (kind_is_masked(cfg.kind)) mask = make_fit_mask(arch, cfg);
    const AsymMask* mp = mask ? &*mask : nullptr;
    ReprLayout layout = make_fit_layout(arch, cfg, mp);

    const size_t n = instances.size(), m = lambdas.size();
    std::vector<std::vector<PerturbPair>> slots(n);

    parallel_for_indexed(int(n), jobs, [&](int ii) {
        const InstanceRecord& inst = instances[size_t(ii)];
        Rng r1 = Rng(cfg.seed).stream(rng_purpose::analysis, uint64_t(inst.id) * 2);
        Rng r2 = Rng(cfg.seed).stream(rng_purpose::analysis, uint64_t(inst.id) * 2 + 1);
        std::vector<float> i1(size_t(layout.length)), i2(size_t(layout.length));
        for (auto& v : i1) v = r1.normal();
        for (auto& v : i2) v = r2.normal(); // drawn even when the grid is {0}
        std::vector<float> phi =
            fit_instance(arch, cfg, layout, inst, initial_representation(layout, i1, mp), base_ws, mp).repr;
        std::vector<PerturbPair>& rows = slots[size_t(ii)];
        for (size_t li = 0; li < m; ++li) {
            std::vector<float> init = initial_representation(layout, perturb_init(i1, i2, lambdas[li]), mp);
            std::vector<float> phi_l = fit_instance(arch, cfg, layout, inst, init, base_ws, mp).repr;
            PerturbPair p;
            p.id = inst.id;
            p.lambda = lambdas[li];
            p.similarity = cosine_similarity(phi, phi_l);
            BarrierResult b = lmc_barrier(arch, layout, mp, base_ws, phi, phi_l, inst, cfg.eval_res,
                                          cfg.metric_points, cfg.seed);
            p.barrier = b.value;
            p.flagged = b.flagged;
            rows.push_back(p);
        }
    });

    std::vector<PerturbRow> rows(m);
    for (size_t li = 0; li < m; ++li) {
        std::vector<double> sims, bars;
        for (size_t ii = 0; ii < n; ++ii) {
            sims.push_back(slots[ii][li].similarity);
            bars.push_back(slots[ii][li].barrier);
        }
        rows[li].parameterization = to_string(cfg.kind);
        rows[li].lambda = lambdas[li];
        analysis_detail::mean_std(sims, rows[li].mean_similarity, rows[li].std_similarity);
        analysis_detail::mean_std(bars, rows[li].mean_barrier, rows[li].std_barrier);
    }
    if (pairs_out)
        for (auto& s : slots) pairs_out->insert(pairs_out->end(), s.begin(), s.end());
    return rows;
}

// --- discriminative probes ----------------------------------------------------

/// k-nearest-neighbor classification under cosine similarity; ties on
/// similarity go to the lowest train index.
inline std::vector<int> knn_classify(const Tensor& trainX, const std::vector<int>& train_labels, const Tensor& testX,
                                     int k = 1) {
    const int n = trainX.rows(), m = testX.rows(), d = trainX.cols();
    if (n < 1) throw std::invalid_argument("knn_classify: empty train set");
    if (size_t(n) != train_labels.size()) throw std::invalid_argument("knn_classify: label count mismatch");
    if (testX.cols() != d) throw std::invalid_argument("knn_classify: feature width mismatch");
    if (k < 1 || k > n) throw std::invalid_argument("knn_classify: k out of range");

    std::vector<int> pred(size_t(m));
    std::vector<std::pair<double, int>> sims(size_t(n)); // (-similarity, index): sorts best first
    std::vector<float> trow(size_t(d));
    for (int t = 0; t < m; ++t) {
        for (int j = 0; j < d; ++j) trow[size_t(j)] = testX.at(t, j);
        for (int i = 0; i < n; ++i) {
            double s = 0, na = 0, nb = 0;
            for (int j = 0; j < d; ++j) {
                s += double(trainX.at(i, j)) * trow[size_t(j)];
                na += double(trainX.at(i, j)) * trainX.at(i, j);
                nb += double(trow[size_t(j)]) * trow[size_t(j)];
            }
            if (na == 0.0 || nb == 0.0) throw std::invalid_argument("knn_classify: zero vector");
            sims[size_t(i)] = {-s / (std::sqrt(na) * std::sqrt(nb)), i};
        }
        std::partial_sort(sims.begin(), sims.begin() + k, sims.end());
        if (k == 1) {
            pred[size_t(t)] = train_labels[size_t(sims[0].second)];
            continue;
        }
        // majority vote; ties by best similarity within the tied labels, then lowest label
        std::map<int, std::pair<int, double>> votes; // label -> (count, best -sim)
        for (int i = 0; i < k; ++i) {
            auto& v = votes[train_labels[size_t(sims[size_t(i)].second)]];
            if (v.first == 0) v.second = sims[size_t(i)].first;
            v.first += 1;
            v.second = std::min(v.second, sims[size_t(i)].first);
        }
        int best_label = -1, best_count = -1;
        double best_sim = 1e18;
        for (const auto& [label, v] : votes)
            if (v.first > best_count || (v.first == best_count && v.second < best_sim)) {
                best_label = label;
                best_count = v.first;
                best_sim = v.second;
            }
        pred[size_t(t)] = best_label;
    }
    return pred;
}

/// Multinomial logistic regression trained full-batch with a monotone
/// (backtracking) gradient step under a cosine-decayed base rate.
struct LinearProbe {
    Tensor W; // classes x features
    Tensor b; // classes
    std::vector<double> loss_history;

    std::vector<int> predict(const Tensor& X) const {
        Tensor logits = matmul_val(X, W, false, true);
        std::vector<int> out(size_t(X.rows()));
        for (int i = 0; i < X.rows(); ++i) {
            int best = 0;
            for (int c = 1; c < W.rows(); ++c)
                if (logits.at(i, c) + b[c] > logits.at(i, best) + b[best]) best = c;
            out[size_t(i)] = best;
        }
        return out;
    }
};

inline double accuracy(const std::vector<int>& pred, const std::vector<int>& truth) {
    if (pred.size() != truth.size() || pred.empty()) throw std::invalid_argument("accuracy: length mismatch");
    int ok = 0;
    for (size_t i = 0; i < pred.size(); ++i) ok += pred[i] == truth[i];
    return double(ok) / double(pred.size());
}

inline LinearProbe logistic_train(const Tensor& X, const std::vector<int>& labels, double l2 = 1e-3,
                                  int steps = 2000, double lr = 0.1) {
    const int n = X.rows(), d = X.cols();
    if (size_t(n) != labels.size() || n < 1) throw std::invalid_argument("logistic_train: label count mismatch");
    int classes = 0;
    for (int l : labels) {
        if (l < 0) throw std::invalid_argument("logistic_train: negative label");
        classes = std::max(classes, l + 1);
    }
    std::vector<int> seen(size_t(classes), 0);
    for (int l : labels) seen[size_t(l)] = 1;
    if (std::count(seen.begin(), seen.end(), 1) < 2)
        throw std::invalid_argument("logistic_train: needs at least 2 observed classes");

    using Mat = Eigen::MatrixXd;
    using Vec = Eigen::VectorXd;
    Mat Xd(n, d);
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < d; ++j) Xd(i, j) = X.at(i, j);
    Mat W = Mat::Zero(classes, d);
    Vec B = Vec::Zero(classes);

    auto eval = [&](const Mat& w, const Vec& bb, Mat* grad_w, Vec* grad_b) {
        Mat logits = Xd * w.transpose();
        logits.rowwise() += bb.transpose();
        double loss = 0.0;
        Mat P(n, classes);
        for (int i = 0; i < n; ++i) {
            double mx = logits.row(i).maxCoeff();
            double z = 0.0;
            for (int c = 0; c < classes; ++c) z += std::exp(logits(i, c) - mx);
            loss += -(logits(i, labels[size_t(i)]) - mx - std::log(z));
            for (int c = 0; c < classes; ++c) P(i, c) = std::exp(logits(i, c) - mx) / z;
        }
        loss = loss / n + l2 * W.squaredNorm();
        if (grad_w) {
            for (int i = 0; i < n; ++i) P(i, labels[size_t(i)]) -= 1.0;
            *grad_w = (P.transpose() * Xd) / n + 2.0 * l2 * w;
            *grad_b = P.colwise().sum().transpose() / n;
        }
        return loss;
    };

    LinearProbe probe;
    double cur = eval(W, B, nullptr, nullptr);
    double mult = 1.0;
    for (int step = 0; step < steps; ++step) {
        Mat gW;
        Vec gB;
        cur = eval(W, B, &gW, &gB);
        probe.loss_history.push_back(cur);
        double base = lr * 0.5 * (1.0 + std::cos(3.14159265358979 * double(step) / double(steps)));
        bool moved = false;
        for (int tries = 0; tries < 40; ++tries) {
            Mat Wn = W - base * mult * gW;
            Vec Bn = B - base * mult * gB;
            if (eval(Wn, Bn, nullptr, nullptr) <= cur) {
                W = Wn;
                B = Bn;
                mult = std::min(1.0, mult * 1.25);
                moved = true;
                break;
            }
            mult *= 0.5;
        }
        if (!moved) break; // no descent step left at this precision
    }
    probe.loss_history.push_back(eval(W, B, nullptr, nullptr));

    probe.W = Tensor({classes, d});
    probe.b = Tensor({classes});
    for (int c = 0; c < classes; ++c) {
        probe.b[c] = float(B(c));
        for (int j = 0; j < d; ++j) probe.W.at(c, j) = float(W(c, j));
    }
    return probe;
}

// --- k-means and ARI -----------------------------------------------------------

struct KmeansResult {
    std::vector<int> assignments;
    Tensor centroids; // k x d
    double inertia = 0.0;
};

inline KmeansResult kmeans(const Tensor& X, int k, int restarts, uint64_t seed) {
    const int n = X.rows(), d = X.cols();
    if (k < 1) throw std::invalid_argument("kmeans: k must be >= 1");
    if (n < k) throw std::invalid_argument("kmeans: fewer points than clusters");
    if (restarts < 1) throw std::invalid_argument("kmeans: restarts must be >= 1");

    auto dist2 = [&](int i, const std::vector<double>& c) {
        double s = 0;
        for (int j = 0; j < d; ++j) {
            double t = double(X.at(i, j)) - c[size_t(j)];
            s += t * t;
        }
        return s;
    };

    KmeansResult best;
    best.inertia = std::numeric_limits<double>::infinity();
    for (int r = 0; r < restarts; ++r) {
        // stream ids are namespaced away from the perturbation draws
        Rng rng = Rng(seed).stream(rng_purpose::analysis, 1000000 + uint64_t(r));
        std::vector<std::vector<double>> C(size_t(k), std::vector<double>(size_t(d)));
        // k-means++ seeding
        int first = int(rng.next_below(uint64_t(n)));
        for (int j = 0; j < d; ++j) C[0][size_t(j)] = X.at(first, j);
        std::vector<double> dmin(size_t(n));
        for (int c = 1; c < k; ++c) {
            double total = 0;
            for (int i = 0; i < n; ++i) {
                double m = dist2(i, C[0]);
                for (int cc = 1; cc < c; ++cc) m = std::min(m, dist2(i, C[size_t(cc)]));
                dmin[size_t(i)] = m;
                total += m;
            }
            int pick;
            if (total <= 0.0) {
                pick = int(rng.next_below(uint64_t(n)));
            } else {
                double thr = double(rng.uniform()) * total, acc = 0;
                pick = n - 1;
                for (int i = 0; i < n; ++i) {
                    acc += dmin[size_t(i)];
                    if (acc >= thr) {
                        pick = i;
                        break;
                    }
                }
            }
            for (int j = 0; j < d; ++j) C[size_t(c)][size_t(j)] = X.at(pick, j);
        }

        std::vector<int> assign(size_t(n), -1);
        for (int iter = 0; iter < 200; ++iter) {
            bool changed = false;
            for (int i = 0; i < n; ++i) {
                int bc = 0;
                double bd = dist2(i, C[0]);
                for (int c = 1; c < k; ++c) {
                    double dd = dist2(i, C[size_t(c)]);
                    if (dd < bd) {
                        bd = dd;
                        bc = c;
                    }
                }
                if (assign[size_t(i)] != bc) {
                    assign[size_t(i)] = bc;
                    changed = true;
                }
            }
            if (!changed) break;
            std::vector<int> counts(size_t(k), 0);
            for (auto& c : C) std::fill(c.begin(), c.end(), 0.0);
            for (int i = 0; i < n; ++i) {
                counts[size_t(assign[size_t(i)])] += 1;
                for (int j = 0; j < d; ++j) C[size_t(assign[size_t(i)])][size_t(j)] += double(X.at(i, j));
            }
            for (int c = 0; c < k; ++c) {
                if (counts[size_t(c)] == 0) {
                    // adopt the point farthest from its assigned centroid
                    int far = 0;
                    double fd = -1;
                    for (int i = 0; i < n; ++i) {
                        double dd = dist2(i, C[size_t(assign[size_t(i)])]);
                        if (dd > fd) {
                            fd = dd;
                            far = i;
                        }
                    }
                    for (int j = 0; j < d; ++j) C[size_t(c)][size_t(j)] = X.at(far, j);
                } else {
                    for (int j = 0; j < d; ++j) C[size_t(c)][size_t(j)] /= counts[size_t(c)];
                }
            }
        }

        double inertia = 0;
        for (int i = 0; i < n; ++i) inertia += dist2(i, C[size_t(assign[size_t(i)])]);
        if (inertia < best.inertia) {
            best.inertia = inertia;
            best.assignments = assign;
            best.centroids = Tensor({k, d});
            for (int c = 0; c < k; ++c)
                for (int j = 0; j < d; ++j) best.centroids.at(c, j) = float(C[size_t(c)][size_t(j)]);
        }
    }
    return best;
}

/// Adjusted Rand index between two partitions via the contingency table.
inline double adjusted_rand_index(const std::vector<int>& a, const std::vector<int>& b) {
    if (a.size() != b.size()) throw std::invalid_argument("adjusted_rand_index: length mismatch");
    const size_t n = a.size();
    if (n == 0) return 1.0;
    std::map<std::pair<int, int>, int64_t> cont;
    std::map<int, int64_t> ra, rb;
    for (size_t i = 0; i < n; ++i) {
        cont[{a[i], b[i]}] += 1;
        ra[a[i]] += 1;
        rb[b[i]] += 1;
    }
    auto c2 = [](int64_t x) { return double(x) * double(x - 1) / 2.0; };
    double sum_ij = 0, sum_a = 0, sum_b = 0;
    for (const auto& [key, v] : cont) sum_ij += c2(v);
    for (const auto& [key, v] : ra) sum_a += c2(v);
    for (const auto& [key, v] : rb) sum_b += c2(v);
    double total = c2(int64_t(n));
    double expected = sum_a * sum_b / total;
    double maximum = 0.5 * (sum_a + sum_b);
    if (maximum - expected == 0.0) return 1.0; // both partitions trivial (all-one-cluster or all-singletons)
    return (sum_ij - expected) / (maximum - expected);
}

// --- PCA embedding ---------------------------------------------------------------

struct PcaResult {
    Tensor projected;          // n x dims
    Tensor components;         // dims x d, orthonormal rows, variance-ordered
    std::vector<double> mean;  // d
    std::vector<double> variance; // dims, descending
};

inline PcaResult pca_project(const Tensor& X, int dims = 2) {
    const int n = X.rows(), d = X.cols();
    if (dims < 1 || dims > d) throw std::invalid_argument("pca_project: dims out of range");
    if (n < dims) throw std::invalid_argument("pca_project: fewer points than dims");

    using Mat = Eigen::MatrixXd;
    Mat Xc(n, d);
    PcaResult out;
    out.mean.assign(size_t(d), 0.0);
    for (int j = 0; j < d; ++j) {
        for (int i = 0; i < n; ++i) out.mean[size_t(j)] += double(X.at(i, j));
        out.mean[size_t(j)] /= double(n);
    }
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < d; ++j) Xc(i, j) = double(X.at(i, j)) - out.mean[size_t(j)];

    const double denom = n > 1 ? double(n - 1) : 1.0;
    Mat comp(dims, d);
    std::vector<double> var(size_t(dims));
    if (d <= n) {
        Eigen::SelfAdjointEigenSolver<Mat> es((Xc.transpose() * Xc) / denom);
        for (int c = 0; c < dims; ++c) {
            comp.row(c) = es.eigenvectors().col(d - 1 - c).transpose(); // eigenvalues ascend
            var[size_t(c)] = std::max(0.0, es.eigenvalues()(d - 1 - c));
        }
    } else {
        Eigen::SelfAdjointEigenSolver<Mat> es((Xc * Xc.transpose()) / denom);
        for (int c = 0; c < dims; ++c) {
            double lam = std::max(0.0, es.eigenvalues()(n - 1 - c));
            Eigen::VectorXd v = Xc.transpose() * es.eigenvectors().col(n - 1 - c);
            double nn = v.norm();
            comp.row(c) = nn > 0 ? (v / nn).transpose() : Eigen::RowVectorXd::Zero(d);
            var[size_t(c)] = lam;
        }
    }

    Mat proj = Xc * comp.transpose();
    out.projected = Tensor({n, dims});
    out.components = Tensor({dims, d});
    out.variance = var;
    for (int i = 0; i < n; ++i)
        for (int c = 0; c < dims; ++c) out.projected.at(i, c) = float(proj(i, c));
    for (int c = 0; c < dims; ++c)
        for (int j = 0; j < d; ++j) out.components.at(c, j) = float(comp(c, j));
    return out;
}

// --- probe experiment ------------------------------------------------------------

struct ProbeReport {
    int run = 0; // split index; the experiment master seed lives in the manifest
    double knn_accuracy = 0.0;
    double logistic_accuracy = 0.0;
    double kmeans_ari = 0.0;
    std::vector<int> confusion; // classes x classes, row = truth, col = 1-NN prediction
    int classes = 0;
};

/// Repeated stratified train/test splits (so every observed class keeps a
/// train presence); k-means runs on the full set per split seed.
inline std::vector<ProbeReport> run_probes(const Tensor& X, const std::vector<int>& labels, int kmeans_k,
                                           int n_splits, uint64_t seed, double train_frac = 0.8) {
    const int n = X.rows();
    if (size_t(n) != labels.size() || n < 2) throw std::invalid_argument("run_probes: bad label count");
    if (n_splits < 1) throw std::invalid_argument("run_probes: n_splits must be >= 1");
    if (!(train_frac > 0.0 && train_frac < 1.0)) throw std::invalid_argument("run_probes: train_frac in (0,1)");
    int classes = 0;
    for (int l : labels) classes = std::max(classes, l + 1);

    std::vector<std::vector<int>> by_class(size_t(classes));
    for (int i = 0; i < n; ++i) by_class[size_t(labels[size_t(i)])].push_back(i);

    std::vector<ProbeReport> reports;
    for (int s = 0; s < n_splits; ++s) {
        Rng rng = Rng(seed).stream(rng_purpose::analysis, 2000000 + uint64_t(s));
        std::vector<int> train_idx, test_idx;
        for (auto cls : by_class) { // copy: shuffled in place per split
            for (size_t i = 0; i + 1 < cls.size(); ++i) {
                size_t j = i + size_t(rng.next_below(uint64_t(cls.size() - i)));
                std::swap(cls[i], cls[j]);
            }
            size_t cut = size_t(std::ceil(train_frac * double(cls.size())));
            cut = std::min(cut, cls.size());
            for (size_t i = 0; i < cls.size(); ++i) (i < cut ? train_idx : test_idx).push_back(cls[i]);
        }
        if (test_idx.empty()) throw std::invalid_argument("run_probes: split produced an empty test set");
        std::sort(train_idx.begin(), train_idx.end());
        std::sort(test_idx.begin(), test_idx.end());

        auto gather = [&](const std::vector<int>& idx, Tensor& M, std::vector<int>& lab) {
            M = Tensor({int(idx.size()), X.cols()});
            lab.resize(idx.size());
            for (size_t i = 0; i < idx.size(); ++i) {
                lab[i] = labels[size_t(idx[i])];
                for (int j = 0; j < X.cols(); ++j) M.at(int(i), j) = X.at(idx[i], j);
            }
        };
        Tensor trX, teX;
        std::vector<int> trY, teY;
        gather(train_idx, trX, trY);
        gather(test_idx, teX, teY);

        ProbeReport rep;
        rep.run = s;
        rep.classes = classes;
        std::vector<int> knn_pred = knn_classify(trX, trY, teX, 1);
        rep.knn_accuracy = accuracy(knn_pred, teY);
        rep.confusion.assign(size_t(classes) * size_t(classes), 0);
        for (size_t i = 0; i < teY.size(); ++i)
            rep.confusion[size_t(teY[i]) * size_t(classes) + size_t(knn_pred[i])] += 1;
        rep.logistic_accuracy = accuracy(logistic_train(trX, trY).predict(teX), teY);
        rep.kmeans_ari = adjusted_rand_index(kmeans(X, kmeans_k, 10, seed + uint64_t(s)).assignments, labels);
        reports.push_back(std::move(rep));
    }
    return reports;
}

// --- CSV artifacts -----------------------------------------------------------------

inline void write_perturbation_csv(const std::string& path, const std::vector<PerturbRow>& rows) {
    std::string out = "parameterization,lambda,mean_similarity,std_similarity,mean_barrier,std_barrier\n";
    char buf[256];
    for (const auto& r : rows) {
        std::snprintf(buf, sizeof buf, "%s,%.17g,%.17g,%.17g,%.17g,%.17g\n", r.parameterization.c_str(), r.lambda,
                      r.mean_similarity, r.std_similarity, r.mean_barrier, r.std_barrier);
        out += buf;
    }
    write_file_bytes(path, reinterpret_cast<const unsigned char*>(out.data()), out.size());
}

inline void write_probes_csv(const std::string& path, const std::vector<ProbeReport>& reports) {
    std::string out = "run,metric,value\n";
    char buf[128];
    for (const auto& r : reports) {
        std::snprintf(buf, sizeof buf, "%d,knn_accuracy,%.17g\n", r.run, r.knn_accuracy);
        out += buf;
        std::snprintf(buf, sizeof buf, "%d,logistic_accuracy,%.17g\n", r.run, r.logistic_accuracy);
        out += buf;
        std::snprintf(buf, sizeof buf, "%d,kmeans_ari,%.17g\n", r.run, r.kmeans_ari);
        out += buf;
    }
    write_file_bytes(path, reinterpret_cast<const unsigned char*>(out.data()), out.size());
}

inline void write_embedding_csv(const std::string& path, const std::vector<int64_t>& ids,
                                const std::vector<int>& labels, const Tensor& projected) {
    if (projected.cols() < 2 || size_t(projected.rows()) != ids.size() || ids.size() != labels.size())
        throw std::invalid_argument("write_embedding_csv: shape mismatch");
    std::string out = "id,label,x,y\n";
    char buf[160];
    for (int i = 0; i < projected.rows(); ++i) {
        std::snprintf(buf, sizeof buf, "%lld,%d,%.17g,%.17g\n", static_cast<long long>(ids[size_t(i)]),
                      labels[size_t(i)], double(projected.at(i, 0)), double(projected.at(i, 1)));
        out += buf;
    }
    write_file_bytes(path, reinterpret_cast<const unsigned char*>(out.data()), out.size());
}

} // namespace wsf
