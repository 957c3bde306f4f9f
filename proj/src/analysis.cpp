#include "niwf/analysis.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

#include <json.hpp>

namespace niwf {

using nlohmann::json;

MemoryReport memory_report(const MemorySpec& spec) {
    MemoryReport r;
    int64_t dim_sum = 0;
    int64_t max_d_out = 0;
    for (const auto& [name, io] : spec.module_dims) {
        dim_sum += io.first + io.second;
        max_d_out = std::max(max_d_out, io.second);
    }
    r.adapter_params = spec.n_layers * spec.num_bases * spec.rank * dim_sum;
    r.adapter_bytes = r.adapter_params * spec.adapter_width_bytes;
    r.optimizer_bytes = r.adapter_bytes * spec.optimizer_multiplier;
    r.adapter_plus_optimizer_bytes = r.adapter_bytes + r.optimizer_bytes;
    r.wrapped_modules = spec.n_layers * static_cast<int64_t>(spec.module_dims.size());
    r.snapshot_bytes = spec.anchors * spec.n_layers * spec.num_bases * 4;
    r.active_params = spec.n_layers * spec.top_k * spec.rank * dim_sum;
    r.gather_d_out = max_d_out;
    int64_t gather = spec.batch * spec.top_k * max_d_out * spec.rank;
    r.token_gather_bytes_w4 = gather * spec.seq_len * 4;
    r.token_gather_bytes_w2 = gather * spec.seq_len * 2;
    r.seq_gather_bytes_w4 = gather * 4;
    r.seq_gather_bytes_w2 = gather * 2;
    for (int64_t nb : {1, 2, 4, 8, 16, 32, 64, 128}) {
        StoredActivePoint p;
        p.num_bases = nb;
        p.stored_params = spec.n_layers * nb * spec.rank * dim_sum;
        p.active_params = spec.n_layers * std::min(spec.top_k, nb) * spec.rank * dim_sum;
        r.stored_vs_active.push_back(p);
    }
    return r;
}

MemorySpec mistral_memory_spec() {
    MemorySpec s;
    s.n_layers = 32;
    s.module_dims = {
        {"q_proj", {4096, 4096}},  {"k_proj", {4096, 1024}},   {"v_proj", {4096, 1024}},
        {"o_proj", {1024, 4096}},  {"gate_proj", {4096, 14336}}, {"up_proj", {4096, 14336}},
        {"down_proj", {14336, 4096}},
    };
    s.num_bases = 16;
    s.rank = 8;
    s.top_k = 8;
    s.batch = 1;
    s.seq_len = 256;
    s.anchors = 256;
    return s;
}

MemorySpec desk_memory_spec(int64_t n_layers, int64_t d_model, int64_t d_ff, int64_t num_bases, int64_t rank,
                            int64_t top_k, int64_t batch, int64_t seq_len, int64_t anchors) {
    MemorySpec s;
    s.n_layers = n_layers;
    s.module_dims = {
        {"q_proj", {d_model, d_model}}, {"k_proj", {d_model, d_model}}, {"v_proj", {d_model, d_model}},
        {"o_proj", {d_model, d_model}}, {"gate_proj", {d_model, d_ff}}, {"up_proj", {d_model, d_ff}},
        {"down_proj", {d_ff, d_model}},
    };
    s.num_bases = num_bases;
    s.rank = rank;
    s.top_k = top_k;
    s.batch = batch;
    s.seq_len = seq_len;
    s.anchors = anchors;
    return s;
}

std::string memory_report_json(const MemorySpec& spec, const MemoryReport& report) {
    json j;
    json js;
    js["n_layers"] = spec.n_layers;
    json dims = json::object();
    for (const auto& [name, io] : spec.module_dims) dims[name] = {io.first, io.second};
    js["module_dims"] = dims;
    js["num_bases"] = spec.num_bases;
    js["rank"] = spec.rank;
    js["top_k"] = spec.top_k;
    js["adapter_width_bytes"] = spec.adapter_width_bytes;
    js["optimizer_multiplier"] = spec.optimizer_multiplier;
    js["batch"] = spec.batch;
    js["seq_len"] = spec.seq_len;
    js["anchors"] = spec.anchors;
    j["spec"] = js;
    j["adapter_params"] = report.adapter_params;
    j["adapter_bytes"] = report.adapter_bytes;
    j["optimizer_bytes"] = report.optimizer_bytes;
    j["adapter_plus_optimizer_bytes"] = report.adapter_plus_optimizer_bytes;
    j["wrapped_modules"] = report.wrapped_modules;
    j["snapshot_bytes"] = report.snapshot_bytes;
    j["active_params"] = report.active_params;
    j["gather_d_out"] = report.gather_d_out;
    j["token_gather_bytes_4byte"] = report.token_gather_bytes_w4;
    j["token_gather_bytes_2byte"] = report.token_gather_bytes_w2;
    j["seq_gather_bytes_4byte"] = report.seq_gather_bytes_w4;
    j["seq_gather_bytes_2byte"] = report.seq_gather_bytes_w2;
    json curve = json::array();
    for (const auto& p : report.stored_vs_active) {
        curve.push_back({{"num_bases", p.num_bases},
                         {"stored_params", p.stored_params},
                         {"active_params", p.active_params}});
    }
    j["stored_vs_active"] = curve;
    return j.dump(2);
}

MemorySpec parse_memory_spec_json(const std::string& text) {
    json j;
    try {
        j = json::parse(text);
    } catch (const json::exception& e) {
        throw ConfigError(std::string("memory spec is not valid JSON: ") + e.what());
    }
    static const std::vector<std::string> known = {
        "n_layers", "module_dims", "num_bases", "rank", "top_k", "adapter_width_bytes",
        "optimizer_multiplier", "batch", "seq_len", "anchors"};
    for (auto it = j.begin(); it != j.end(); ++it) {
        if (std::find(known.begin(), known.end(), it.key()) == known.end()) {
            throw ConfigError("unknown memory spec key: " + it.key());
        }
    }
    MemorySpec s = mistral_memory_spec();
    if (j.contains("n_layers")) s.n_layers = j.at("n_layers").get<int64_t>();
    if (j.contains("module_dims")) {
        s.module_dims.clear();
        for (auto it = j.at("module_dims").begin(); it != j.at("module_dims").end(); ++it) {
            auto arr = it.value();
            if (!arr.is_array() || arr.size() != 2) {
                throw ConfigError("module_dims entries must be [d_in, d_out] pairs");
            }
            s.module_dims.push_back({it.key(), {arr[0].get<int64_t>(), arr[1].get<int64_t>()}});
        }
    }
    if (j.contains("num_bases")) s.num_bases = j.at("num_bases").get<int64_t>();
    if (j.contains("rank")) s.rank = j.at("rank").get<int64_t>();
    if (j.contains("top_k")) s.top_k = j.at("top_k").get<int64_t>();
    if (j.contains("adapter_width_bytes")) s.adapter_width_bytes = j.at("adapter_width_bytes").get<int64_t>();
    if (j.contains("optimizer_multiplier")) s.optimizer_multiplier = j.at("optimizer_multiplier").get<int64_t>();
    if (j.contains("batch")) s.batch = j.at("batch").get<int64_t>();
    if (j.contains("seq_len")) s.seq_len = j.at("seq_len").get<int64_t>();
    if (j.contains("anchors")) s.anchors = j.at("anchors").get<int64_t>();
    return s;
}

std::vector<double> gating_entropy(const GatingDecision& decision) {
    auto wv = decision.weights.data();
    int64_t rows = decision.weights.dim(0);
    int64_t k = decision.k;
    std::vector<double> out(static_cast<size_t>(rows), 0.0);
    for (int64_t r = 0; r < rows; ++r) {
        double h = 0.0;
        for (int64_t j = 0; j < k; ++j) {
            double p = wv[r * k + j];
            if (p > 0.0) h -= p * std::log(p);
        }
        out[static_cast<size_t>(r)] = h;
    }
    return out;
}

CoordStats coord_stats(const Tensor& coords_a, const Tensor& coords_b, const CommittedRegion& region_a) {
    CoordStats stats;
    int64_t d = region_a.fit.d_z;
    auto eval = [&](const Tensor& coords, std::vector<double>& out) {
        auto cv = coords.data();
        for (int64_t i = 0; i < coords.dim(0); ++i) {
            out.push_back(mahalanobis(region_a.fit, {cv.data() + i * d, static_cast<size_t>(d)}));
        }
    };
    eval(coords_a, stats.dist_a);
    eval(coords_b, stats.dist_b);

    double mx = 0.0;
    for (double v : stats.dist_a) mx = std::max(mx, v);
    for (double v : stats.dist_b) mx = std::max(mx, v);
    constexpr int64_t kBins = 20;
    stats.bin_width = mx > 0.0 ? mx / static_cast<double>(kBins) : 1.0;
    stats.hist_a.assign(kBins, 0);
    stats.hist_b.assign(kBins, 0);
    auto binit = [&](const std::vector<double>& dist, std::vector<int64_t>& hist) {
        for (double v : dist) {
            int64_t b = std::min<int64_t>(kBins - 1, static_cast<int64_t>(v / stats.bin_width));
            hist[static_cast<size_t>(b)]++;
        }
    };
    binit(stats.dist_a, stats.hist_a);
    binit(stats.dist_b, stats.hist_b);

    double tau = region_a.fit.tau;
    int64_t outside = 0;
    for (double v : stats.dist_b) outside += (v > tau);
    int64_t inside = 0;
    for (double v : stats.dist_a) inside += (v <= tau);
    stats.frac_b_outside = stats.dist_b.empty() ? 0.0 : static_cast<double>(outside) / stats.dist_b.size();
    stats.frac_a_inside = stats.dist_a.empty() ? 0.0 : static_cast<double>(inside) / stats.dist_a.size();
    return stats;
}

void export_coords(const std::vector<std::string>& labels, const Tensor& coords, const CommitStore& store,
                   const std::string& path) {
    if (static_cast<int64_t>(labels.size()) != coords.dim(0)) {
        throw ContractError("export_coords: one label per coordinate required");
    }
    std::ofstream out(path);
    if (!out) throw IoError("export_coords: cannot open " + path);
    int64_t d = coords.dim(1);
    out << "label";
    for (int64_t i = 0; i < d; ++i) out << ",z" << i;
    for (const auto& region : store.regions) out << ",d_region_" << region.id;
    out << "\n";
    out.precision(9);
    auto cv = coords.data();
    for (int64_t i = 0; i < coords.dim(0); ++i) {
        out << labels[static_cast<size_t>(i)];
        for (int64_t j = 0; j < d; ++j) out << ',' << cv[i * d + j];
        for (const auto& region : store.regions) {
            out << ',' << mahalanobis(region.fit, {cv.data() + i * d, static_cast<size_t>(d)});
        }
        out << "\n";
    }
    if (!out) throw IoError("export_coords: write failed for " + path);
}

}  // namespace niwf
