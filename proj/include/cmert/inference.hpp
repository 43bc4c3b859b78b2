#pragma once

#include <string>
#include <vector>

#include "cmert/model.hpp"

namespace cmert {

// One emitted step of the online simulation. With latency delta the record
// for frame t is produced while processing the window anchored at t + delta;
// anticipation rows stay anchor-relative (horizon tau points at anchor + tau).
struct PredictionRecord {
  int t = 0;
  std::vector<double> detection;                  // [C+1], sums to 1
  std::vector<std::vector<double>> anticipation;  // [T_a] x [C+1], horizon = row + 1
  double step_seconds = 0.0;  // wall-time diagnostic; not part of saved dumps
};

struct InferenceOptions {
  bool use_cache = false;     // reuse first-stage compression across windows
  bool verify_cache = false;  // recompute every hit and hard-fail on mismatch
};

// Stride-1 sliding window from frame 0: one forward per frame, detection from
// the refined short-term row T_s - 1 - delta, anticipation from the refined
// anticipation rows. Frames earlier than delta are never emitted (their
// decision time precedes the stream), so the result has length() - delta
// records. Predictions depend only on frames at or before the window anchor.
std::vector<PredictionRecord> run_stream(const ModelParams& params, const FeatureStream& stream,
                                         const PartitionConfig& cfg,
                                         const InferenceOptions& opts = {});

// Line-delimited JSON, one record per line: {"t": .., "det": [..],
// "ant": {"1": [..], ..}}. Wall times are deliberately excluded so dumps from
// different machines stay byte-comparable.
void save_predictions(const std::vector<PredictionRecord>& records, const std::string& path);
std::vector<PredictionRecord> load_predictions(const std::string& path);

}  // namespace cmert
