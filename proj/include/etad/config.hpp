#pragma once

#include "etad/sgs.hpp"

#include <map>
#include <string>
#include <vector>

namespace etad {

// RunConfig <-> JSON, lossless round trip
RunConfig run_config_from_json_text(const std::string& text);
RunConfig run_config_from_json_file(const std::string& path);
std::string run_config_to_json_text(const RunConfig& config);

// every out-of-range field, one message each; empty means valid
std::vector<std::string> validate_run_config(const RunConfig& config);

struct Checkpoint {
  RunConfig config;
  std::uint64_t seed = 0;
  std::map<std::string, std::pair<Shape, ArrayX>> params;
  std::int64_t optimizer_step = 0;
  std::map<std::string, AdamW::ParamState> optimizer_state;
};

void save_checkpoint(const Trainer& trainer, const std::string& path);
Checkpoint load_checkpoint(const std::string& path);
// copies parameter values and optimizer state into a freshly built trainer
void restore_trainer(Trainer& trainer, const Checkpoint& checkpoint);

// metrics CSV; wall_seconds is the final column and is exempt from
// reproducibility comparisons
std::string metrics_csv(const RunConfig& config,
                        const std::vector<EpochMetrics>& history);
void write_text_file(const std::string& path, const std::string& text);
std::string read_text_file(const std::string& path);

// JSON reports
std::string eval_result_to_json_text(const EvalResult& result);
std::string detections_to_json_text(const std::vector<Detection>& detections);
std::string memory_report_to_json_text(const MemoryReport& report);
std::string flop_ledger_to_json_text(const FlopLedger& ledger);

}  // namespace etad
