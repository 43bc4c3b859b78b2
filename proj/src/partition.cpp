#include "cmert/partition.hpp"

#include <stdexcept>
#include <string>

namespace cmert {

void PartitionConfig::validate() const {
  auto positive = [](int v, const char* name) {
    if (v < 1) throw std::invalid_argument(std::string(name) + " must be >= 1, got " + std::to_string(v));
  };
  positive(long_frames, "long_frames");
  positive(short_frames, "short_frames");
  positive(antic_frames, "antic_frames");
  positive(future_frames, "future_frames");
  positive(feat_dim, "feat_dim");
  positive(num_actions, "num_actions");
  positive(long_subsample, "long_subsample");
  if (near_past_frames < 0)
    throw std::invalid_argument("near_past_frames must be >= 0, got " +
                                std::to_string(near_past_frames));
  if (delta < 0) throw std::invalid_argument("delta must be >= 0, got " + std::to_string(delta));
  if (near_past_frames >= long_frames)
    throw std::invalid_argument("near_past_frames " + std::to_string(near_past_frames) +
                                " must be smaller than long_frames " + std::to_string(long_frames));
  if (long_frames % long_subsample != 0)
    throw std::invalid_argument("long_frames " + std::to_string(long_frames) +
                                " must be divisible by long_subsample " +
                                std::to_string(long_subsample));
  if (!(fps > 0)) throw std::invalid_argument("fps must be positive");
}

void FeatureStream::validate() const {
  if (features.rank() != 2)
    throw std::invalid_argument("FeatureStream: features must be rank 2, have " +
                                shape_str(features));
  if (static_cast<int>(labels.size()) != features.shape[0])
    throw std::invalid_argument("FeatureStream: " + std::to_string(labels.size()) +
                                " labels for " + std::to_string(features.shape[0]) + " frames");
  for (size_t i = 0; i < labels.size(); ++i)
    if (labels[i] < 0 || labels[i] > num_actions)
      throw std::invalid_argument("FeatureStream: label " + std::to_string(labels[i]) +
                                  " out of [0, " + std::to_string(num_actions) + "] at frame " +
                                  std::to_string(i));
}

PartitionConfig preset_partition(const std::string& name) {
  PartitionConfig cfg;
  auto frames = [&cfg](double seconds) { return static_cast<int>(seconds * cfg.fps + 0.5); };
  if (name == "th14") {
    cfg.fps = 4.0;
    cfg.long_frames = frames(256);
    cfg.short_frames = frames(4);
    cfg.antic_frames = frames(2);
    cfg.near_past_frames = frames(0.5);
    cfg.future_frames = frames(12);
  } else if (name == "ek100") {
    cfg.fps = 4.0;
    cfg.long_frames = frames(128);
    cfg.short_frames = frames(8);
    cfg.antic_frames = frames(2);
    cfg.near_past_frames = frames(2);
    cfg.future_frames = frames(8);
  } else if (name == "crosstask") {
    cfg.fps = 1.0;
    cfg.long_frames = frames(128);
    cfg.short_frames = frames(10);
    cfg.antic_frames = frames(2);
    cfg.near_past_frames = frames(8);
    cfg.future_frames = frames(12);
  } else {
    throw std::invalid_argument("preset_partition: unknown preset '" + name +
                                "' (want th14, ek100, or crosstask)");
  }
  cfg.validate();
  return cfg;
}

namespace {

int floor_div(int a, int b) {
  int q = a / b;
  if ((a % b != 0) && ((a < 0) != (b < 0))) --q;
  return q;
}

// Copy frame `frame` of the stream into row `row`, zero-padding (and
// flagging) indices before the stream start.
void gather_row(const FeatureStream& s, int frame, Tensor& dst, int row,
                std::vector<uint8_t>& pad) {
  int d = s.features.shape[1];
  if (frame < 0) {
    pad[row] = 1;
    return;  // rows start zeroed
  }
  for (int c = 0; c < d; ++c) dst.at(row, c) = s.features.at(frame, c);
}

}  // namespace

TrainingSample extract_windows(const FeatureStream& stream, int t, const PartitionConfig& cfg) {
  cfg.validate();
  stream.validate();
  if (stream.features.shape[1] != cfg.feat_dim)
    throw std::invalid_argument("extract_windows: stream feature dim " +
                                std::to_string(stream.features.shape[1]) + " != config " +
                                std::to_string(cfg.feat_dim));
  int total = stream.length();
  if (t < 0 || t >= total)
    throw std::invalid_argument("extract_windows: anchor " + std::to_string(t) +
                                " outside stream of " + std::to_string(total) + " frames");

  TrainingSample out;
  out.anchor = t;
  int ts = t - cfg.short_frames + 1;

  out.short_mem = tensor2(cfg.short_frames, cfg.feat_dim);
  out.short_pad.assign(cfg.short_frames, 0);
  for (int i = 0; i < cfg.short_frames; ++i) gather_row(stream, ts + i, out.short_mem, i, out.short_pad);

  out.near_past = tensor2(cfg.near_past_frames, cfg.feat_dim);
  out.near_past_pad.assign(cfg.near_past_frames, 0);
  for (int i = 0; i < cfg.near_past_frames; ++i)
    gather_row(stream, ts - cfg.near_past_frames + i, out.near_past, i, out.near_past_pad);

  // The long window ends just before the near-past. Subsampled frames sit on
  // an absolute grid (multiples of long_subsample), so the token set only
  // changes every long_subsample steps as the window slides; that is what the
  // first-stage compression cache keys on.
  int long_end = ts - cfg.near_past_frames - 1;
  int stride = cfg.long_subsample;
  int tokens = cfg.long_tokens();
  int grid_end = floor_div(long_end, stride) * stride;
  out.long_mem = tensor2(tokens, cfg.feat_dim);
  out.long_pad.assign(tokens, 0);
  for (int i = 0; i < tokens; ++i)
    gather_row(stream, grid_end - (tokens - 1 - i) * stride, out.long_mem, i, out.long_pad);

  auto label_at = [&](int frame, int& y, uint8_t& ign) {
    if (frame < 0 || frame >= total) {
      y = 0;
      ign = 1;
    } else {
      y = stream.labels[frame];
      ign = 0;
    }
  };

  int n_sa = cfg.short_frames + cfg.antic_frames;
  out.y_sa.assign(n_sa, 0);
  out.ignore_sa.assign(n_sa, 0);
  for (int i = 0; i < cfg.short_frames; ++i) label_at(ts + i, out.y_sa[i], out.ignore_sa[i]);
  for (int k = 0; k < cfg.antic_frames; ++k)
    label_at(t + 1 + k, out.y_sa[cfg.short_frames + k], out.ignore_sa[cfg.short_frames + k]);

  int future_start = cfg.distant_future ? t : ts;
  out.y_f.assign(cfg.future_frames, 0);
  out.ignore_f.assign(cfg.future_frames, 0);
  for (int j = 0; j < cfg.future_frames; ++j)
    label_at(future_start + j, out.y_f[j], out.ignore_f[j]);

  return out;
}

std::vector<int> sample_anchors_sliding(const FeatureStream& stream, const PartitionConfig& cfg,
                                        Rng& rng) {
  if (stream.length() < 1) throw std::invalid_argument("sample_anchors_sliding: empty stream");
  int s0 = rng.uniform_int(0, cfg.short_frames - 1);
  std::vector<int> anchors;
  for (int t = s0 + cfg.short_frames - 1; t < stream.length(); t += cfg.short_frames)
    anchors.push_back(t);
  return anchors;
}

std::vector<int> sample_anchors_event(const FeatureStream& stream, const PartitionConfig& cfg,
                                      Rng& rng, int n) {
  (void)cfg;
  std::vector<int> eligible;
  for (int i = 0; i < stream.length(); ++i)
    if (stream.labels[i] != 0) eligible.push_back(i);
  if (eligible.empty())
    throw std::invalid_argument("sample_anchors_event: stream has no non-background frame");
  std::vector<int> anchors(n);
  for (int& a : anchors) a = eligible[rng.uniform_int(0, static_cast<int>(eligible.size()) - 1)];
  return anchors;
}

AttentionMask build_encoder_self_mask(const PartitionConfig& cfg) {
  int stamped = cfg.near_past_frames + cfg.short_frames;
  int n = stamped + cfg.antic_frames;
  AttentionMask m(n, n, false);
  m.kind = cfg.delta == 0 ? MaskKind::causal : MaskKind::latency;
  m.delta = cfg.delta;
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j) {
      if (i >= stamped)
        m.at(i, j) = 1;  // anticipation rows model the future of everything seen
      else if (j < stamped && j <= i + cfg.delta)
        m.at(i, j) = 1;
    }
  return m;
}

AttentionMask build_encoder_cross_mask(const PartitionConfig& cfg, int long_cols) {
  int stamped = cfg.near_past_frames + cfg.short_frames;
  int rows = stamped + cfg.antic_frames;
  int cols = long_cols + cfg.short_frames + cfg.antic_frames;
  AttentionMask m(rows, cols, false);
  m.kind = cfg.delta == 0 ? MaskKind::causal : MaskKind::latency;
  m.delta = cfg.delta;
  for (int i = 0; i < rows; ++i) {
    for (int j = 0; j < long_cols; ++j) m.at(i, j) = 1;  // compressed long is all past
    if (i >= stamped) {
      for (int j = long_cols; j < cols; ++j) m.at(i, j) = 1;
      continue;
    }
    // Short keys carry timeline position T_c + j; anticipation keys stay
    // hidden from time-stamped rows.
    for (int j = 0; j < cfg.short_frames; ++j)
      if (cfg.near_past_frames + j <= i + cfg.delta) m.at(i, long_cols + j) = 1;
  }
  return m;
}

AttentionMask build_refinement_self_mask(const PartitionConfig& cfg) {
  PartitionConfig strict = cfg;
  strict.near_past_frames = 0;
  strict.delta = 0;  // latency slack lives in the encoder only; a second hop would compound it
  AttentionMask m = build_encoder_self_mask(strict);
  m.kind = MaskKind::refinement;
  return m;
}

AttentionMask build_refinement_cross_mask(const PartitionConfig& cfg, int q_l1, bool leaky) {
  int rows = cfg.short_frames + cfg.antic_frames;
  int cols = q_l1 + cfg.short_frames + cfg.antic_frames + cfg.future_frames;
  AttentionMask m(rows, cols, false);
  m.kind = MaskKind::refinement;
  int future_start = q_l1 + cfg.short_frames + cfg.antic_frames;
  for (int i = 0; i < rows; ++i) {
    for (int j = 0; j < q_l1; ++j) m.at(i, j) = 1;
    for (int j = future_start; j < cols; ++j) m.at(i, j) = 1;
    if (i >= cfg.short_frames || leaky) {
      for (int j = q_l1; j < future_start; ++j) m.at(i, j) = 1;
    } else {
      // strictly causal into the refined short block, never its anticipation
      for (int j = 0; j <= i; ++j) m.at(i, q_l1 + j) = 1;
    }
  }
  return m;
}

}  // namespace cmert
