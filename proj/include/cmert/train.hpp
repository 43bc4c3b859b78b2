#pragma once

#include <string>
#include <utility>
#include <vector>

#include "cmert/model.hpp"

namespace cmert {

struct TrainConfig {
  double lambda1 = 0.2;  // weight of the pre-refinement detection loss
  double lambda2 = 0.5;  // weight of the future-prediction loss
  double lr = 5e-4;      // peak rate, reached at the end of warm-up
  double weight_decay = 1e-4;
  int batch_size = 8;
  // Step-based horizon, the desk-scale default. total_steps is also the
  // cosine-annealing horizon (rate reaches zero there).
  int total_steps = 2000;
  int warmup_steps = 100;
  // Epoch-based horizon: when epochs > 0 the loop runs that many passes over
  // the anchor pool instead, and warm-up spans warmup_epochs passes.
  int epochs = 0;
  double warmup_epochs = 0.0;
  bool event_sampling = false;  // anchors at non-background frames instead of sliding windows
  int event_anchors = 64;       // per-stream pool size when event_sampling
  uint64_t seed = 1;

  void validate() const;
};

// Published optimizer settings per dataset shape ("th14", "ek100",
// "crosstask"), epoch-based. Desk-scale runs usually keep the step-based
// defaults instead.
TrainConfig preset_train(const std::string& name);

struct LossBreakdown {
  double l_sa0 = 0.0;  // detection/anticipation loss before refinement
  double l_sa1 = 0.0;  // after refinement; the main term
  double l_f = 0.0;    // future prediction
  double total = 0.0;
  // Mean short-term loss by relative window position, [T_s]. Positions
  // ignored everywhere in the batch report 0.
  std::vector<double> per_position;
};

// Mean of -log softmax(logits)[target] over non-ignored rows. Thin wrapper
// over the tape primitive so training code and tests share one entry point;
// per-row values stay readable through Tape::per_row_loss.
Var cross_entropy_block(Tape& t, Var logits, const std::vector<int>& targets,
                        const std::vector<uint8_t>& ignore);

struct TotalLoss {
  Var total;   // backward target
  Var l_sa1;   // per-row source for the per-position diagnostic
  LossBreakdown scalars;
};

// total = l_sa1 + lambda1 * l_sa0 + lambda2 * l_f. A sample whose future
// block is entirely ignored (stream ended) contributes l_f = 0.
TotalLoss total_loss(Tape& t, const ForwardOutputs& out, const TrainingSample& sample,
                     const TrainConfig& cfg);

// Linear warm-up to peak over warmup_steps, then cosine decay to zero at
// total_steps. Steps are 0-based; the peak is reached at step warmup-1 and
// held through the first cosine step.
double schedule_lr(double peak, int step, int warmup_steps, int total_steps);

struct AdamState {
  std::vector<std::vector<double>> m, v;
  long step = 0;
};

AdamState make_adam_state(const std::vector<TensorPtr>& params);

// One decoupled-weight-decay Adam update (beta1 0.9, beta2 0.999, eps 1e-8)
// over accumulated gradients. Rejects non-finite gradients up front, naming
// the offending parameter, so no tensor is half-updated.
void optimizer_step(const std::vector<std::pair<std::string, TensorPtr>>& named_params,
                    AdamState& state, double lr, double weight_decay);

// Procedural segment grammar standing in for real feature streams. Segments
// follow a Markov chain over background + C actions; frames emit the active
// state's prototype plus Gaussian noise. Every third action's identity is a
// deterministic function of the previous two, so only a model that retains
// long-range history can predict it: that is what makes the compressed
// long-term memory informative rather than decorative.
struct SyntheticGrammar {
  int num_actions = 6;
  int feat_dim = 16;
  std::vector<std::vector<double>> transition;  // (C+1) x (C+1), rows sum to 1
  std::vector<std::pair<int, int>> duration;    // per state, inclusive frame range
  Tensor prototypes;                            // [(C+1) x D]
  double noise = 0.1;
  bool long_range_rule = true;

  void validate() const;
};

// Background alternates with uniformly drawn actions; prototypes come from
// their own seed so streams with different content share the same classes.
SyntheticGrammar default_grammar(int num_actions, int feat_dim, double noise,
                                 uint64_t prototype_seed);

FeatureStream generate_stream(const SyntheticGrammar& g, int length, Rng& rng);

struct TrainResult {
  std::vector<LossBreakdown> log;  // one record per completed step
  std::vector<double> lr_log;      // parallel to log
  int steps_run = 0;
  bool diverged = false;  // loss went non-finite; params keep the last completed step
};

// Anchor sampling, window extraction, forward, loss, backward, update.
// Deterministic given the config seed. When log_path is non-empty, each step
// appends one JSON line {step, lr, l_sa0, l_sa1, l_f, total, per_position}.
TrainResult train_model(ModelParams& params, const std::vector<FeatureStream>& streams,
                        const TrainConfig& tcfg, const PartitionConfig& pcfg,
                        const std::string& log_path = "");

}  // namespace cmert
