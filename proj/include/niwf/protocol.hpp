#pragma once

#include <map>
#include <string>
#include <vector>

#include "niwf/model.hpp"

namespace niwf {

struct LossWeights {
    float lambda_lock = 0.0f;
    float lambda_sep = 0.0f;
    float lambda_budget = 1e-4f;
    float margin = 0.0f;
};

// Task 1 trains with lock and separation inert; later tasks activate them
// unless the ablation mode disables one.
LossWeights weights_for_task(const Config& cfg, int64_t task_index);

struct LossParts {
    Tensor total;
    double nll = 0.0;
    double lock = 0.0;
    double sep = 0.0;
};

// L = L_NLL + lambda_lock * L_lock + lambda_sep * L_sep + lambda_budget * k.
// The budget term is an additive constant while k is fixed.
LossParts total_loss(const Tensor& nll, NiwfModel& model, const Tensor& z_batch, const LossWeights& w);

struct StepTrace {
    int64_t step = 0;
    double nll = 0.0;
    double lock = 0.0;
    double sep = 0.0;
    double lr = 0.0;
};

// Labels: task 1 = "task_a" (copy), task 2 = "task_b" (reverse).
std::string task_label(int64_t task_index);
std::vector<Example> task_corpus(const Config& cfg, int64_t task_index, bool validation);
std::vector<Example> neutral_corpus(const Config& cfg);

// Owns the optimizer for one task stage; moments reset at every task
// boundary. Steps [start, end) are resumable: the batch schedule is a pure
// function of (seed, task, step).
class TaskTrainer {
public:
    TaskTrainer(NiwfModel& model, int64_t task_index);

    std::vector<StepTrace> run(const std::vector<Example>& corpus, int64_t start_step, int64_t end_step);

    AdamW& optimizer() { return *opt_; }
    const std::vector<std::string>& param_names() const { return names_; }

private:
    NiwfModel& model_;
    int64_t task_index_;
    std::vector<ParamSlot> slots_;
    std::vector<std::string> names_;
    std::unique_ptr<AdamW> opt_;
    Schedule schedule_;
};

struct EvalResult {
    double nll = 0.0;
    double ppl = 0.0;
};

// Mean masked NLL over the whole corpus (position-weighted across batches);
// ppl = exp(nll). Deterministic: batches in corpus order.
EvalResult evaluate_perplexity(NiwfModel& model, const std::vector<Example>& corpus);

// z1 for every example, in corpus order. [N, d_z]
Tensor collect_coords(NiwfModel& model, const std::vector<Example>& corpus);

struct TaskReport {
    std::string label;
    double nll_after_own = 0.0;
    double ppl_after_own = 0.0;
    double nll_after_all = 0.0;
    double ppl_after_all = 0.0;
    double forgetting_pct = 0.0;
};

struct EvalReport {
    std::string mode;
    uint64_t seed = 0;
    int64_t regions_active = 0;
    std::vector<TaskReport> tasks;
    // lock-loss convergence summary for the last locked training stage
    double lock_first = 0.0;
    double lock_peak_first_half = 0.0;
    double lock_final_mean = 0.0;  // mean over the last tenth of steps
    double verify_max_dev = 0.0;   // region of task 1 against live field
    double frac_b_outside_tau_a = 0.0;
    double frac_a_inside_tau_a = 0.0;
};

struct LayerEntropyRow {
    int64_t layer = 0;
    double mean = 0.0, q25 = 0.0, q50 = 0.0, q75 = 0.0;
};

struct CoordExportRow {
    std::string label;
    std::vector<float> z;
    std::vector<double> dist;  // d_M to each committed region, store order
};

// Everything a run produces; the CLI turns this into files.
struct SequentialResult {
    EvalReport report;
    std::vector<StepTrace> trace;  // all tasks, global step numbering
    std::vector<LayerEntropyRow> entropy;
    std::vector<CoordExportRow> coords;
};

// Values carried across staged CLI commands so a composed pipeline emits the
// same report as one uninterrupted run.
struct RunState {
    int64_t task_index = 0;    // last fully trained task
    int64_t step_in_task = 0;  // for mid-task checkpoints
    std::map<std::string, double> recorded;
};

// Records the just-committed task's validation perplexity into state.
void record_task_eval(NiwfModel& model, RunState& state, int64_t task_index);
// Records the lock-trace summary of a finished locked training stage.
void record_lock_summary(RunState& state, const std::vector<StepTrace>& trace);

// Builds the final report from the model and recorded history.
EvalReport build_report(NiwfModel& model, const RunState& state);
std::vector<LayerEntropyRow> collect_entropy(NiwfModel& model);
std::vector<CoordExportRow> collect_coord_export(NiwfModel& model);

// The full sequential protocol: pretrain, train A, commit A, train B,
// commit B, evaluate both.
SequentialResult run_sequential(const Config& cfg, NiwfModel* model_out = nullptr);

}  // namespace niwf
