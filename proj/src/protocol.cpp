#include "niwf/protocol.hpp"

#include <algorithm>
#include <cmath>

#include "niwf/analysis.hpp"

namespace niwf {

LossWeights weights_for_task(const Config& cfg, int64_t task_index) {
    LossWeights w;
    w.lambda_budget = cfg.lambda_budget;
    w.margin = cfg.margin;
    if (task_index >= 2) {
        w.lambda_lock = cfg.mode == RunMode::NoLock ? 0.0f : cfg.lambda_lock;
        w.lambda_sep = cfg.mode == RunMode::NoSep ? 0.0f : cfg.lambda_sep;
    }
    return w;
}

LossParts total_loss(const Tensor& nll, NiwfModel& model, const Tensor& z_batch, const LossWeights& w) {
    LossParts parts;
    parts.nll = nll.item_f64();
    Tensor total = nll;
    if (!model.store.empty()) {
        Tensor lock = lock_loss(model.field, model.store);
        parts.lock = lock.item_f64();
        if (w.lambda_lock > 0.0f) total = add(total, mul_scalar(lock, w.lambda_lock));
        Tensor sep = separation_loss(z_batch, model.store, w.margin);
        parts.sep = sep.item_f64();
        if (w.lambda_sep > 0.0f) total = add(total, mul_scalar(sep, w.lambda_sep));
    }
    // budget term: constant while top-k is fixed
    total = add_scalar(total, w.lambda_budget * static_cast<float>(model.config.top_k));
    parts.total = total;
    return parts;
}

std::string task_label(int64_t task_index) {
    if (task_index == 1) return "task_a";
    if (task_index == 2) return "task_b";
    return "task_" + std::to_string(task_index);
}

std::vector<Example> task_corpus(const Config& cfg, int64_t task_index, bool validation) {
    Vocab vocab;
    vocab.size = static_cast<int32_t>(cfg.vocab_size);
    LenRange len{cfg.payload_min, cfg.payload_max};
    Rng rng = Rng(cfg.seed).split(task_label(task_index) + (validation ? ".val" : ".train"));
    int64_t n = validation ? cfg.val_examples : cfg.train_examples;
    if (task_index == 1) return gen_copy(n, len, vocab, rng);
    if (task_index == 2) return gen_reverse(n, len, vocab, rng);
    throw ContractError("task_corpus: only tasks 1 and 2 are defined");
}

std::vector<Example> neutral_corpus(const Config& cfg) {
    Vocab vocab;
    vocab.size = static_cast<int32_t>(cfg.vocab_size);
    LenRange len{cfg.payload_min, cfg.payload_max};
    Rng rng = Rng(cfg.seed).split("neutral");
    return gen_neutral(std::max<int64_t>(cfg.train_examples, 512), len, vocab, rng);
}

TaskTrainer::TaskTrainer(NiwfModel& model, int64_t task_index) : model_(model), task_index_(task_index) {
    slots_ = model.trainable_slots();
    auto named = model.named_parameters();
    for (const auto& slot : slots_) {
        std::string found;
        for (const auto& [name, t] : named) {
            if (t.same_node(slot.param)) {
                found = name;
                break;
            }
        }
        names_.push_back(found);
    }
    AdamWConfig acfg;
    acfg.weight_decay = model.config.weight_decay;
    opt_ = std::make_unique<AdamW>(slots_, acfg);
    schedule_ = Schedule{model.config.learning_rate, model.config.steps_per_task, model.config.warmup_fraction};
}

std::vector<StepTrace> TaskTrainer::run(const std::vector<Example>& corpus, int64_t start_step,
                                        int64_t end_step) {
    const Config& cfg = model_.config;
    LossWeights w = weights_for_task(cfg, task_index_);
    uint64_t data_seed = Rng(cfg.seed).split(task_label(task_index_) + ".batches").seed();

    std::vector<StepTrace> trace;
    trace.reserve(static_cast<size_t>(end_step - start_step));

    std::vector<Batch> cached;
    int64_t cached_epoch = -1;
    auto batch_at = [&](int64_t micro_index) -> const Batch& {
        int64_t per_epoch = (static_cast<int64_t>(corpus.size()) + cfg.batch_size - 1) / cfg.batch_size;
        int64_t epoch = micro_index / per_epoch;
        if (epoch != cached_epoch) {
            cached = epoch_batches(corpus, cfg.batch_size, cfg.max_seq_len, data_seed, epoch);
            cached_epoch = epoch;
        }
        return cached[static_cast<size_t>(micro_index % per_epoch)];
    };

    for (int64_t step = start_step; step < end_step; ++step) {
        StepTrace row;
        row.step = step;
        float inv_accum = 1.0f / static_cast<float>(cfg.grad_accum);
        for (int64_t micro = 0; micro < cfg.grad_accum; ++micro) {
            const Batch& batch = batch_at(step * cfg.grad_accum + micro);
            Tape tape;
            TwoPassResult tp = two_pass_forward(model_, batch);
            LossParts parts = total_loss(tp.nll, model_, tp.z1, w);
            Tensor scaled = cfg.grad_accum == 1 ? parts.total : mul_scalar(parts.total, inv_accum);
            tape.backward(scaled);
            row.nll += parts.nll * inv_accum;
            row.lock += parts.lock * inv_accum;
            row.sep += parts.sep * inv_accum;
        }
        model_.zero_masked_grads();
        clip_grad_norm(slots_, cfg.grad_clip);
        float lr = lr_at_step(schedule_, std::min(step + 1, cfg.steps_per_task));
        opt_->step(lr);
        opt_->zero_grad();
        row.lr = lr;
        trace.push_back(row);
    }
    return trace;
}

EvalResult evaluate_perplexity(NiwfModel& model, const std::vector<Example>& corpus) {
    if (corpus.empty()) throw ContractError("evaluate_perplexity: corpus is empty");
    NoGrad ng;
    auto batches = eval_batches(corpus, model.config.batch_size, model.config.max_seq_len);
    double total = 0.0;
    int64_t count = 0;
    for (const Batch& batch : batches) {
        TwoPassResult tp = two_pass_forward(model, batch);
        int64_t positions = 0;
        for (int32_t m : batch.loss_mask.v) positions += (m != 0);
        total += tp.nll.item_f64() * static_cast<double>(positions);
        count += positions;
    }
    EvalResult r;
    r.nll = total / static_cast<double>(count);
    r.ppl = std::exp(r.nll);
    return r;
}

Tensor collect_coords(NiwfModel& model, const std::vector<Example>& corpus) {
    NoGrad ng;
    auto batches = eval_batches(corpus, model.config.batch_size, model.config.max_seq_len);
    int64_t dz = model.config.coord_dim;
    Tensor coords = Tensor::zeros({static_cast<int64_t>(corpus.size()), dz});
    auto cv = coords.mutable_data();
    int64_t row = 0;
    for (const Batch& batch : batches) {
        TwoPassResult tp = two_pass_forward(model, batch);
        auto zv = tp.z1.data();
        for (int64_t i = 0; i < batch.batch(); ++i, ++row) {
            std::copy(zv.data() + i * dz, zv.data() + (i + 1) * dz, cv.data() + row * dz);
        }
    }
    return coords;
}

void record_task_eval(NiwfModel& model, RunState& state, int64_t task_index) {
    auto val = task_corpus(model.config, task_index, true);
    EvalResult r = evaluate_perplexity(model, val);
    std::string label = task_label(task_index);
    state.recorded[label + ".nll_after_own"] = r.nll;
    state.recorded[label + ".ppl_after_own"] = r.ppl;
}

void record_lock_summary(RunState& state, const std::vector<StepTrace>& trace) {
    if (trace.empty()) return;
    size_t n = trace.size();
    double first = trace.front().lock;
    double peak_first_half = 0.0;
    for (size_t i = 0; i < (n + 1) / 2; ++i) peak_first_half = std::max(peak_first_half, trace[i].lock);
    size_t tail = std::max<size_t>(1, n / 10);
    double final_mean = 0.0;
    for (size_t i = n - tail; i < n; ++i) final_mean += trace[i].lock;
    final_mean /= static_cast<double>(tail);
    state.recorded["lock.first"] = first;
    state.recorded["lock.peak_first_half"] = peak_first_half;
    state.recorded["lock.final_mean"] = final_mean;
}

EvalReport build_report(NiwfModel& model, const RunState& state) {
    EvalReport report;
    report.mode = to_string(model.config.mode);
    report.seed = model.config.seed;
    report.regions_active = static_cast<int64_t>(model.store.regions.size());

    for (int64_t task = 1; task <= 2; ++task) {
        TaskReport tr;
        tr.label = task_label(task);
        auto val = task_corpus(model.config, task, true);
        EvalResult now = evaluate_perplexity(model, val);
        tr.nll_after_all = now.nll;
        tr.ppl_after_all = now.ppl;
        auto it_nll = state.recorded.find(tr.label + ".nll_after_own");
        auto it_ppl = state.recorded.find(tr.label + ".ppl_after_own");
        if (it_nll != state.recorded.end() && it_ppl != state.recorded.end()) {
            tr.nll_after_own = it_nll->second;
            tr.ppl_after_own = it_ppl->second;
        } else {
            // task not individually recorded (e.g. trained last without a
            // commit): its own-eval is the current eval
            tr.nll_after_own = now.nll;
            tr.ppl_after_own = now.ppl;
        }
        tr.forgetting_pct = (tr.ppl_after_all / tr.ppl_after_own - 1.0) * 100.0;
        report.tasks.push_back(tr);
    }

    auto lk = [&](const char* key) {
        auto it = state.recorded.find(key);
        return it == state.recorded.end() ? 0.0 : it->second;
    };
    report.lock_first = lk("lock.first");
    report.lock_peak_first_half = lk("lock.peak_first_half");
    report.lock_final_mean = lk("lock.final_mean");

    if (!model.store.empty()) {
        // region of the first committed task, if still present
        for (const auto& region : model.store.regions) {
            if (region.task_label == task_label(1)) {
                report.verify_max_dev = verify_commit(model.field, region);
                Tensor coords_a = collect_coords(model, task_corpus(model.config, 1, true));
                Tensor coords_b = collect_coords(model, task_corpus(model.config, 2, true));
                CoordStats stats = coord_stats(coords_a, coords_b, region);
                report.frac_b_outside_tau_a = stats.frac_b_outside;
                report.frac_a_inside_tau_a = stats.frac_a_inside;
                break;
            }
        }
    }
    return report;
}

std::vector<LayerEntropyRow> collect_entropy(NiwfModel& model) {
    NoGrad ng;
    std::vector<std::vector<double>> per_layer(static_cast<size_t>(model.config.n_layers));
    for (int64_t task = 1; task <= 2; ++task) {
        auto val = task_corpus(model.config, task, true);
        auto batches = eval_batches(val, model.config.batch_size, model.config.max_seq_len);
        for (const Batch& batch : batches) {
            TwoPassResult tp = two_pass_forward(model, batch);
            for (int64_t l = 0; l < model.config.n_layers; ++l) {
                auto ent = gating_entropy(tp.decisions[static_cast<size_t>(l)]);
                auto& acc = per_layer[static_cast<size_t>(l)];
                acc.insert(acc.end(), ent.begin(), ent.end());
            }
        }
    }
    std::vector<LayerEntropyRow> rows;
    for (int64_t l = 0; l < model.config.n_layers; ++l) {
        auto& vals = per_layer[static_cast<size_t>(l)];
        std::sort(vals.begin(), vals.end());
        LayerEntropyRow row;
        row.layer = l;
        double sum = 0.0;
        for (double v : vals) sum += v;
        row.mean = vals.empty() ? 0.0 : sum / static_cast<double>(vals.size());
        auto q = [&](double p) {
            if (vals.empty()) return 0.0;
            double pos = p * static_cast<double>(vals.size() - 1);
            size_t lo = static_cast<size_t>(pos);
            double frac = pos - static_cast<double>(lo);
            double v = vals[lo];
            if (lo + 1 < vals.size()) v += frac * (vals[lo + 1] - vals[lo]);
            return v;
        };
        row.q25 = q(0.25);
        row.q50 = q(0.50);
        row.q75 = q(0.75);
        rows.push_back(row);
    }
    return rows;
}

std::vector<CoordExportRow> collect_coord_export(NiwfModel& model) {
    std::vector<CoordExportRow> rows;
    int64_t dz = model.config.coord_dim;
    for (int64_t task = 1; task <= 2; ++task) {
        Tensor coords = collect_coords(model, task_corpus(model.config, task, true));
        auto cv = coords.data();
        for (int64_t i = 0; i < coords.dim(0); ++i) {
            CoordExportRow row;
            row.label = task_label(task);
            row.z.assign(cv.data() + i * dz, cv.data() + (i + 1) * dz);
            for (const auto& region : model.store.regions) {
                row.dist.push_back(mahalanobis(region.fit, {row.z.data(), row.z.size()}));
            }
            rows.push_back(std::move(row));
        }
    }
    return rows;
}

SequentialResult run_sequential(const Config& cfg_in, NiwfModel* model_out) {
    Config cfg = cfg_in;
    normalize(cfg);
    NiwfModel model = NiwfModel::create(cfg);
    RunState state;

    // Stage 0: pretrain and freeze the backbone.
    auto neutral = neutral_corpus(cfg);
    uint64_t pretrain_seed = Rng(cfg.seed).split("pretrain.batches").seed();
    pretrain_backbone(model.backbone, neutral, cfg.pretrain_steps, cfg.batch_size,
                      cfg.pretrain_learning_rate, pretrain_seed);

    SequentialResult result;
    int64_t global_step = 0;
    for (int64_t task = 1; task <= 2; ++task) {
        auto train = task_corpus(cfg, task, false);
        TaskTrainer trainer(model, task);
        auto trace = trainer.run(train, 0, cfg.steps_per_task);
        for (auto& row : trace) {
            row.step = global_step++;
            result.trace.push_back(row);
        }
        if (task >= 2) record_lock_summary(state, trace);
        Tensor coords = collect_coords(model, train);
        commit_task(model, coords, task_label(task), cfg.steps_per_task * task);
        record_task_eval(model, state, task);
        state.task_index = task;
        state.step_in_task = 0;
    }

    result.report = build_report(model, state);
    result.entropy = collect_entropy(model);
    result.coords = collect_coord_export(model);
    if (model_out != nullptr) *model_out = std::move(model);
    return result;
}

}  // namespace niwf
