#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "niwf/adapters.hpp"
#include "niwf/region.hpp"

namespace niwf {

// Inputs to the analytical memory calculator. All arithmetic downstream is
// exact integer bytes; GB means decimal 1e9.
struct MemorySpec {
    int64_t n_layers = 32;
    std::vector<std::pair<std::string, std::pair<int64_t, int64_t>>> module_dims;  // name -> (d_in, d_out)
    int64_t num_bases = 16;
    int64_t rank = 8;
    int64_t top_k = 8;
    int64_t adapter_width_bytes = 4;      // fp32 adapter parameters
    int64_t optimizer_multiplier = 2;     // AdamW: m and v
    int64_t batch = 1;
    int64_t seq_len = 256;
    int64_t anchors = 256;                // per committed region, for snapshot size
};

struct StoredActivePoint {
    int64_t num_bases = 0;
    int64_t stored_params = 0;
    int64_t active_params = 0;
};

struct MemoryReport {
    int64_t adapter_params = 0;          // L * sum_m N_b * r * (d_in + d_out)
    int64_t adapter_bytes = 0;
    int64_t optimizer_bytes = 0;
    int64_t adapter_plus_optimizer_bytes = 0;
    int64_t wrapped_modules = 0;
    int64_t snapshot_bytes = 0;          // M * L * N_b * 4
    int64_t active_params = 0;           // k in place of N_b; independent of N_b
    // gather sizes for the largest-d_out module, at 4- and 2-byte elements
    int64_t gather_d_out = 0;
    int64_t token_gather_bytes_w4 = 0;
    int64_t token_gather_bytes_w2 = 0;
    int64_t seq_gather_bytes_w4 = 0;
    int64_t seq_gather_bytes_w2 = 0;
    std::vector<StoredActivePoint> stored_vs_active;
};

MemoryReport memory_report(const MemorySpec& spec);

// The reference 7B configuration from the memory appendix.
MemorySpec mistral_memory_spec();
// Spec matching this artifact's desk-scale config dims.
MemorySpec desk_memory_spec(int64_t n_layers, int64_t d_model, int64_t d_ff, int64_t num_bases, int64_t rank,
                            int64_t top_k, int64_t batch, int64_t seq_len, int64_t anchors);

std::string memory_report_json(const MemorySpec& spec, const MemoryReport& report);
MemorySpec parse_memory_spec_json(const std::string& text);

// Shannon entropy (natural log) of each row's selected gating weights.
std::vector<double> gating_entropy(const GatingDecision& decision);

struct CoordStats {
    std::vector<double> dist_a;  // d_M of every A coordinate against region_a
    std::vector<double> dist_b;
    std::vector<int64_t> hist_a;  // shared equal-width bins over [0, max]
    std::vector<int64_t> hist_b;
    double bin_width = 0.0;
    double frac_b_outside = 0.0;  // d_M > tau
    double frac_a_inside = 0.0;   // d_M <= tau (drift measure)
};

CoordStats coord_stats(const Tensor& coords_a, const Tensor& coords_b, const CommittedRegion& region_a);

// CSV: label, z components, d_M to each committed region. Deterministic
// ordering, header row included.
void export_coords(const std::vector<std::string>& labels, const Tensor& coords, const CommitStore& store,
                   const std::string& path);

}  // namespace niwf
