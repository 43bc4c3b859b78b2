#pragma once

#include <string>
#include <vector>

#include "cmert/mask.hpp"
#include "cmert/rng.hpp"
#include "cmert/tensor.hpp"

namespace cmert {

// Frame-count geometry of the five context partitions around an anchor t:
//   long-term   [t_s - T_c - T_l, t_s - T_c - 1]   compressed, subsampled
//   near-past   [t_s - T_c, t_s - 1]               encoder input, then discarded
//   short-term  [t_s, t]                           detection targets
//   anticipation t+1 .. t+T_a                      learnable query tokens
//   near-future t_s .. t_s + T_f - 1               generated, supervision only
// with t_s = t - T_s + 1. The three observed windows tile [t_l, t] without
// gaps or overlap.
struct PartitionConfig {
  int long_frames = 1024;   // T_l
  int short_frames = 16;    // T_s
  int antic_frames = 8;     // T_a
  int near_past_frames = 2; // T_c
  int future_frames = 48;   // T_f
  double fps = 4.0;
  int feat_dim = 16;    // D
  int num_actions = 6;  // C action classes; labels live in [0, C] with background 0
  int delta = 0;        // latency frames
  int long_subsample = 4;
  bool distant_future = false;  // supervise M_F with frames t..t+T_f-1 instead of t_s..

  int long_tokens() const { return long_frames / long_subsample; }
  void validate() const;
};

struct FeatureStream {
  Tensor features;  // [T_total x D]
  std::vector<int> labels;
  double fps = 4.0;
  int num_actions = 0;

  int length() const { return features.rank() == 2 ? features.shape[0] : 0; }
  void validate() const;
};

// One anchor's extracted windows plus supervision blocks.
struct TrainingSample {
  int anchor = 0;
  Tensor long_mem;    // [T_l / long_subsample x D], zero rows where padded
  Tensor near_past;   // [T_c x D]
  Tensor short_mem;   // [T_s x D]
  std::vector<uint8_t> long_pad, near_past_pad, short_pad;
  std::vector<int> y_sa;          // labels for t_s..t then t+1..t+T_a
  std::vector<uint8_t> ignore_sa; // padded or beyond-stream positions
  std::vector<int> y_f;           // labels for the near-future span
  std::vector<uint8_t> ignore_f;
};

// Named partition geometries ("th14", "ek100", "crosstask"): the published
// context lengths in seconds converted to frames at each dataset's rate.
// Feature dim and class count keep their defaults; callers override them to
// match their streams.
PartitionConfig preset_partition(const std::string& name);

TrainingSample extract_windows(const FeatureStream& stream, int t, const PartitionConfig& cfg);

// Sliding-window anchors: start s0 ~ uniform[0, T_s), then every T_s frames.
std::vector<int> sample_anchors_sliding(const FeatureStream& stream, const PartitionConfig& cfg,
                                        Rng& rng);

// Event anchors: n frames drawn uniformly among non-background frames.
std::vector<int> sample_anchors_event(const FeatureStream& stream, const PartitionConfig& cfg,
                                      Rng& rng, int n);

// Self-attention mask over [near-past | short | anticipation] rows/columns:
// time-stamped position p sees time-stamped p' iff p' <= p + delta;
// anticipation rows see everything; no time-stamped row sees anticipation.
AttentionMask build_encoder_self_mask(const PartitionConfig& cfg);

// Cross-attention mask for encoder queries over keys
// [compressed long (long_cols) | short | anticipation]: compressed-long
// columns are visible to every row; short key j (timeline position T_c+j)
// follows the same p' <= p + delta rule; anticipation keys only serve
// anticipation rows.
AttentionMask build_encoder_cross_mask(const PartitionConfig& cfg, int long_cols);

// Refinement self-attention over the (T_s+T_a) block: strictly causal among
// short rows, anticipation rows see all, nobody sees anticipation columns.
AttentionMask build_refinement_self_mask(const PartitionConfig& cfg);

// Refinement cross mask over keys [compressed long (q_l1) | M_SA short |
// M_SA anticipation | near-future]: long and future columns all-true; short
// query i sees M_SA short column j iff j <= i and never M_SA anticipation;
// anticipation queries see all. leaky=true opens every M_SA column to every
// row, reintroducing the non-causal flow the diagnostics look for.
AttentionMask build_refinement_cross_mask(const PartitionConfig& cfg, int q_l1, bool leaky);

}  // namespace cmert
