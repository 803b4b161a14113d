#pragma once
// Pipeline driver: simulate -> train-cnf -> train-vsde -> infer -> eval, each
// stage writing its artifact plus a run log (config hash, seed, wall time,
// headline numbers). Artifacts live under the config's path entries; stage
// writes are atomic (temp + rename) so re-runs never corrupt earlier outputs.

#include <string>

#include "pivoflow/config.hpp"
#include "pivoflow/evaluation.hpp"

namespace pivoflow {

void stage_simulate(const PipelineConfig& cfg);
void stage_train_cnf(const PipelineConfig& cfg);
void stage_train_vsde(const PipelineConfig& cfg);
void stage_infer(const PipelineConfig& cfg);

struct EvalSummary {
    ComparisonRow comparison;
    // (max - min) / mean of per-method VSDE final MAE; 0 when < 2 methods.
    double integrator_spread_vsde = 0.0;
    std::vector<IntegratorRow> integrator_rows;
};
EvalSummary stage_eval(const PipelineConfig& cfg);

// Runs one named stage (or "all"); returns the process exit code:
// 0 success, 2 config error, 3 missing prerequisite, 4 numeric failure.
int run_pipeline(const std::string& command, const PipelineConfig& cfg);

}  // namespace pivoflow
