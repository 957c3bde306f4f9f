#include "niwf/region.hpp"

#include <algorithm>
#include <cmath>

namespace niwf {

const CommittedRegion& CommitStore::by_id(int64_t id) const {
    for (const auto& r : regions) {
        if (r.id == id) return r;
    }
    throw LookupError("commit store has no region with id " + std::to_string(id));
}

double mahalanobis(std::span<const float> z, std::span<const float> mu, std::span<const float> sigma_inv,
                   int64_t d_z) {
    double q = 0.0;
    for (int64_t i = 0; i < d_z; ++i) {
        double di = static_cast<double>(z[static_cast<size_t>(i)]) - mu[static_cast<size_t>(i)];
        for (int64_t j = 0; j < d_z; ++j) {
            double dj = static_cast<double>(z[static_cast<size_t>(j)]) - mu[static_cast<size_t>(j)];
            q += di * sigma_inv[static_cast<size_t>(i * d_z + j)] * dj;
        }
    }
    return std::sqrt(std::max(q, 0.0));
}

double mahalanobis(const GaussianFit& fit, std::span<const float> z) {
    return mahalanobis(z, fit.mu, fit.sigma_inv, fit.d_z);
}

namespace {

// Cholesky factorization of a PD matrix, in double. Returns lower L.
std::vector<double> cholesky(const std::vector<double>& a, int64_t n) {
    std::vector<double> l(static_cast<size_t>(n * n), 0.0);
    for (int64_t i = 0; i < n; ++i) {
        for (int64_t j = 0; j <= i; ++j) {
            double s = a[static_cast<size_t>(i * n + j)];
            for (int64_t k = 0; k < j; ++k) {
                s -= l[static_cast<size_t>(i * n + k)] * l[static_cast<size_t>(j * n + k)];
            }
            if (i == j) {
                if (s <= 0.0) throw ContractError("cholesky: matrix not positive definite");
                l[static_cast<size_t>(i * n + j)] = std::sqrt(s);
            } else {
                l[static_cast<size_t>(i * n + j)] = s / l[static_cast<size_t>(j * n + j)];
            }
        }
    }
    return l;
}

// Inverse from the Cholesky factor: solve L L^T X = I column by column.
std::vector<double> inverse_from_cholesky(const std::vector<double>& l, int64_t n) {
    std::vector<double> inv(static_cast<size_t>(n * n), 0.0);
    std::vector<double> y(static_cast<size_t>(n));
    for (int64_t c = 0; c < n; ++c) {
        for (int64_t i = 0; i < n; ++i) {
            double s = (i == c) ? 1.0 : 0.0;
            for (int64_t k = 0; k < i; ++k) s -= l[static_cast<size_t>(i * n + k)] * y[static_cast<size_t>(k)];
            y[static_cast<size_t>(i)] = s / l[static_cast<size_t>(i * n + i)];
        }
        for (int64_t i = n - 1; i >= 0; --i) {
            double s = y[static_cast<size_t>(i)];
            for (int64_t k = i + 1; k < n; ++k) {
                s -= l[static_cast<size_t>(k * n + i)] * inv[static_cast<size_t>(k * n + c)];
            }
            inv[static_cast<size_t>(i * n + c)] = s / l[static_cast<size_t>(i * n + i)];
        }
    }
    return inv;
}

}  // namespace

GaussianFit fit_region(const Tensor& coords, double quantile) {
    if (coords.ndim() != 2) throw ShapeError("fit_region: coords must be [N, d_z]");
    int64_t n = coords.dim(0), d = coords.dim(1);
    if (n < d + 2) {
        throw ContractError("fit_region: need at least d_z + 2 = " + std::to_string(d + 2) +
                            " coordinates, got " + std::to_string(n));
    }
    auto cv = coords.data();
    GaussianFit fit;
    fit.d_z = d;
    std::vector<double> mu(static_cast<size_t>(d), 0.0);
    for (int64_t i = 0; i < n; ++i) {
        for (int64_t j = 0; j < d; ++j) mu[static_cast<size_t>(j)] += cv[i * d + j];
    }
    for (auto& m : mu) m /= n;
    std::vector<double> sigma(static_cast<size_t>(d * d), 0.0);
    for (int64_t i = 0; i < n; ++i) {
        for (int64_t a = 0; a < d; ++a) {
            double da = cv[i * d + a] - mu[static_cast<size_t>(a)];
            for (int64_t b = 0; b < d; ++b) {
                double db = cv[i * d + b] - mu[static_cast<size_t>(b)];
                sigma[static_cast<size_t>(a * d + b)] += da * db;
            }
        }
    }
    for (auto& s : sigma) s /= n;  // MLE
    double trace = 0.0;
    for (int64_t a = 0; a < d; ++a) trace += sigma[static_cast<size_t>(a * d + a)];
    double eps = 1e-6 * trace / static_cast<double>(d) + 1e-9;
    for (int64_t a = 0; a < d; ++a) sigma[static_cast<size_t>(a * d + a)] += eps;

    auto l = cholesky(sigma, d);
    auto inv = inverse_from_cholesky(l, d);

    fit.mu.resize(static_cast<size_t>(d));
    fit.sigma.resize(static_cast<size_t>(d * d));
    fit.sigma_inv.resize(static_cast<size_t>(d * d));
    fit.chol.resize(static_cast<size_t>(d * d));
    for (int64_t i = 0; i < d; ++i) fit.mu[static_cast<size_t>(i)] = static_cast<float>(mu[static_cast<size_t>(i)]);
    for (int64_t i = 0; i < d * d; ++i) {
        fit.sigma[static_cast<size_t>(i)] = static_cast<float>(sigma[static_cast<size_t>(i)]);
        fit.sigma_inv[static_cast<size_t>(i)] = static_cast<float>(inv[static_cast<size_t>(i)]);
        fit.chol[static_cast<size_t>(i)] = static_cast<float>(l[static_cast<size_t>(i)]);
    }

    std::vector<double> dist(static_cast<size_t>(n));
    for (int64_t i = 0; i < n; ++i) {
        dist[static_cast<size_t>(i)] = mahalanobis({cv.data() + i * d, static_cast<size_t>(d)}, fit.mu,
                                                   fit.sigma_inv, d);
    }
    std::sort(dist.begin(), dist.end());
    double pos = quantile * static_cast<double>(n - 1);
    int64_t lo = static_cast<int64_t>(pos);
    double frac = pos - static_cast<double>(lo);
    double tau = dist[static_cast<size_t>(lo)];
    if (lo + 1 < n) tau += frac * (dist[static_cast<size_t>(lo + 1)] - dist[static_cast<size_t>(lo)]);
    fit.tau = static_cast<float>(tau);
    return fit;
}

Tensor sample_anchors(const GaussianFit& fit, int64_t m, Rng& rng, const Tensor& fallback_coords,
                      SampleStats* stats) {
    if (m < 1) throw ContractError("sample_anchors: m must be >= 1");
    int64_t d = fit.d_z;
    Tensor anchors = Tensor::zeros({m, d});
    auto av = anchors.mutable_data();
    int64_t accepted = 0, drawn = 0;
    std::vector<float> cand(static_cast<size_t>(d));
    std::vector<float> xi(static_cast<size_t>(d));
    const int64_t draw_budget = 100 * m;
    while (accepted < m && drawn < draw_budget) {
        for (int64_t i = 0; i < d; ++i) xi[static_cast<size_t>(i)] = rng.normal_float();
        for (int64_t i = 0; i < d; ++i) {
            double acc = fit.mu[static_cast<size_t>(i)];
            for (int64_t j = 0; j <= i; ++j) {
                acc += static_cast<double>(fit.chol[static_cast<size_t>(i * d + j)]) * xi[static_cast<size_t>(j)];
            }
            cand[static_cast<size_t>(i)] = static_cast<float>(acc);
        }
        ++drawn;
        if (mahalanobis(fit, cand) <= static_cast<double>(fit.tau)) {
            std::copy(cand.begin(), cand.end(), av.begin() + accepted * d);
            ++accepted;
        }
    }
    if (stats != nullptr) {
        stats->drawn = drawn;
        stats->accepted = accepted;
    }
    if (accepted < m) {
        // Rejection stalled (degenerate or tiny region): subsample the
        // empirical coordinates without replacement, resampling once the
        // pool is exhausted.
        int64_t n = fallback_coords.dim(0);
        auto fv = fallback_coords.data();
        std::vector<int64_t> order(static_cast<size_t>(n));
        for (int64_t i = 0; i < n; ++i) order[static_cast<size_t>(i)] = i;
        rng.shuffle(order);
        for (int64_t i = accepted; i < m; ++i) {
            int64_t pick;
            int64_t slot = i - accepted;
            if (slot < n) {
                pick = order[static_cast<size_t>(slot)];
            } else {
                pick = static_cast<int64_t>(rng.uniform_int(static_cast<uint64_t>(n)));
            }
            std::copy(fv.data() + pick * d, fv.data() + (pick + 1) * d, av.begin() + i * d);
        }
    }
    return anchors;
}

Tensor snapshot_field(const WeightField& field, const Tensor& anchors) {
    NoGrad ng;
    return field_forward(field, anchors);
}

Tensor lock_loss(const WeightField& field, const CommitStore& store) {
    Tensor total = Tensor::zeros({1});
    bool any = false;
    for (const auto& region : store.regions) {
        Tensor outputs = field_forward(field, region.anchors.detach());  // [M, L, N_b(now)]
        if (field.num_bases > region.num_bases) outputs = slice_last(outputs, region.num_bases);
        Tensor diff = sub(outputs, region.snapshot.detach());
        Tensor sq = sum_all(mul(diff, diff));
        Tensor term = mul_scalar(sq, 1.0f / static_cast<float>(region.anchors_count));
        total = any ? add(total, term) : term;
        any = true;
    }
    return total;
}

Tensor separation_loss(const Tensor& z_batch, const CommitStore& store, float margin) {
    if (store.empty()) return Tensor::zeros({1});
    int64_t d = z_batch.dim(1);
    Tensor total;
    bool any = false;
    for (const auto& region : store.regions) {
        Tensor mu = Tensor::from_data({d}, region.fit.mu);
        Tensor sinv = Tensor::from_data({d, d}, region.fit.sigma_inv);
        Tensor centered = sub(z_batch, mu);                      // [B, d]
        Tensor proj = matmul(centered, sinv);                    // [B, d]
        Tensor q = sum_last(mul(centered, proj));                // [B]
        Tensor dist = sqrt_elem(q);
        Tensor hinge = activation(add_scalar(mul_scalar(dist, -1.0f), region.fit.tau + margin), Act::Relu);
        Tensor term = mean_all(mul(hinge, hinge));
        total = any ? add(total, term) : term;
        any = true;
    }
    return total;
}

double verify_commit(const WeightField& field, const CommittedRegion& region) {
    NoGrad ng;
    Tensor outputs = field_forward(field, region.anchors);
    if (field.num_bases > region.num_bases) outputs = slice_last(outputs, region.num_bases);
    auto ov = outputs.data();
    auto sv = region.snapshot.data();
    double mx = 0.0;
    for (size_t i = 0; i < ov.size(); ++i) {
        mx = std::max(mx, std::abs(static_cast<double>(ov[i]) - sv[i]));
    }
    return mx;
}

CommittedRegion commit_region(const WeightField& field, const Tensor& task_coords, int64_t k, int64_t m,
                              double quantile, Rng& rng, const std::string& task_label, int64_t id,
                              int64_t created_at_step) {
    CommittedRegion region;
    region.id = id;
    region.task_label = task_label;
    region.fit = fit_region(task_coords, quantile);
    region.anchors = sample_anchors(region.fit, m, rng, task_coords);
    region.snapshot = snapshot_field(field, region.anchors);
    region.coords = task_coords.detach();
    region.n_layers = field.n_layers;
    region.num_bases = field.num_bases;
    region.anchors_count = m;
    region.created_at_step = created_at_step;

    region.base_mask.assign(static_cast<size_t>(field.n_layers * field.num_bases), 0);
    {
        NoGrad ng;
        auto decisions = gate_topk(region.snapshot, k);
        for (int64_t l = 0; l < field.n_layers; ++l) {
            for (int32_t idx : decisions[static_cast<size_t>(l)].indices.v) {
                region.base_mask[static_cast<size_t>(l * field.num_bases + idx)] = 1;
            }
        }
    }
    return region;
}

void rollback(CommitStore& store, int64_t region_id) {
    auto it = std::find_if(store.regions.begin(), store.regions.end(),
                           [&](const CommittedRegion& r) { return r.id == region_id; });
    if (it == store.regions.end()) {
        throw LookupError("rollback: no region with id " + std::to_string(region_id));
    }
    store.regions.erase(it);
}

const CommittedRegion* find_containing(const CommitStore& store, std::span<const float> z) {
    for (const auto& region : store.regions) {
        if (mahalanobis(region.fit, z) <= static_cast<double>(region.fit.tau)) return &region;
    }
    return nullptr;
}

int64_t nearest_anchor(const CommittedRegion& region, std::span<const float> z) {
    auto av = region.anchors.data();
    int64_t d = region.fit.d_z;
    int64_t best = 0;
    double best_d = -1.0;
    for (int64_t j = 0; j < region.anchors_count; ++j) {
        double dist = mahalanobis(z, {av.data() + j * d, static_cast<size_t>(d)}, region.fit.sigma_inv, d);
        if (best_d < 0.0 || dist < best_d) {
            best_d = dist;
            best = j;
        }
    }
    return best;
}

}  // namespace niwf
