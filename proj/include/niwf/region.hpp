#pragma once

#include <string>
#include <vector>

#include "niwf/field.hpp"
#include "niwf/tensor.hpp"

namespace niwf {

// Gaussian fit of a coordinate cloud: MLE mean/covariance with a trace-scaled
// ridge, its inverse and Cholesky factor, and the Mahalanobis threshold at
// the requested quantile of the fitted sample.
struct GaussianFit {
    std::vector<float> mu;         // [d_z]
    std::vector<float> sigma;      // [d_z, d_z], ridge included
    std::vector<float> sigma_inv;  // [d_z, d_z]
    std::vector<float> chol;       // lower-triangular L with sigma = L L^T
    float tau = 0.0f;
    int64_t d_z = 0;
};

// The unit of functional locking: region geometry, anchors, the field-output
// snapshot they must reproduce, and the bases their gating touches.
struct CommittedRegion {
    int64_t id = 0;
    std::string task_label;
    GaussianFit fit;
    Tensor anchors;                     // [M, d_z]
    Tensor snapshot;                    // [M, L, N_b] field outputs at commit time
    std::vector<uint8_t> base_mask;     // [L * N_b], 1 where some anchor's top-k selected the base
    Tensor coords;                      // [N, d_z] the coordinates the fit came from (rollback replay)
    int64_t n_layers = 0;
    int64_t num_bases = 0;
    int64_t anchors_count = 0;
    int64_t created_at_step = 0;
};

struct CommitStore {
    std::vector<CommittedRegion> regions;
    int64_t next_id = 1;
    bool empty() const { return regions.empty(); }
    const CommittedRegion& by_id(int64_t id) const;
};

// sqrt((z - mu)^T Sigma^{-1} (z - mu)), evaluated in double.
double mahalanobis(std::span<const float> z, std::span<const float> mu, std::span<const float> sigma_inv,
                   int64_t d_z);
double mahalanobis(const GaussianFit& fit, std::span<const float> z);

// coords [N, d_z], N >= d_z + 2. Covariance is the MLE estimate (divide by N)
// plus eps*I with eps = 1e-6 * trace/d_z + 1e-9; tau is the empirical
// q-quantile of the fitted Mahalanobis distances with linear interpolation.
GaussianFit fit_region(const Tensor& coords, double quantile = 0.95);

struct SampleStats {
    int64_t drawn = 0;
    int64_t accepted = 0;
};

// Rejection-samples N(mu, Sigma) keeping d_M <= tau. If acceptance stalls
// (more than 100*M draws), falls back to subsampling fallback_coords without
// replacement, padding by resampling when the pool is smaller than M.
Tensor sample_anchors(const GaussianFit& fit, int64_t m, Rng& rng, const Tensor& fallback_coords,
                      SampleStats* stats = nullptr);

// S_j = F_theta(a_j), evaluated without tape. [M, L, N_b].
Tensor snapshot_field(const WeightField& field, const Tensor& anchors);

// Sum over regions of (1/M) sum_j ||F(a_j) - S_j||^2 over all recorded logit
// entries; exactly 0 for an empty store. When the field has grown past a
// region's recorded base count, only the recorded columns are constrained.
Tensor lock_loss(const WeightField& field, const CommitStore& store);

// Mean over the batch of sum over regions of max(0, tau + m - d_M(z))^2.
// Differentiable w.r.t. z only; region geometry enters as constants.
Tensor separation_loss(const Tensor& z_batch, const CommitStore& store, float margin);

// max_j ||F(a_j) - S_j||_inf over the region's recorded columns.
double verify_commit(const WeightField& field, const CommittedRegion& region);

// Fits, samples anchors, snapshots the field, and records the union of
// anchor top-k indices per layer. Pure function of its inputs plus rng.
CommittedRegion commit_region(const WeightField& field, const Tensor& task_coords, int64_t k, int64_t m,
                              double quantile, Rng& rng, const std::string& task_label, int64_t id,
                              int64_t created_at_step = 0);

// Removes a region; surviving regions are untouched. Unknown id is an error.
void rollback(CommitStore& store, int64_t region_id);

// First region (in commit order) containing z, or nullptr.
const CommittedRegion* find_containing(const CommitStore& store, std::span<const float> z);
// Index of the anchor nearest to z by that region's Mahalanobis metric.
int64_t nearest_anchor(const CommittedRegion& region, std::span<const float> z);

}  // namespace niwf
