#pragma once

#include <string>
#include <utility>
#include <vector>

#include "cmert/attention.hpp"
#include "cmert/partition.hpp"

namespace cmert {

struct ModelConfig {
  int d_model = 128;
  int heads = 4;
  int q_l0 = 16;  // first-stage compression queries
  int q_l1 = 32;  // second-stage compression queries, also the compressed-long width
  bool leaky_anticipation = false;  // diagnostic switch: open the refinement M_SA columns
  bool use_refinement = true;       // false = classify the encoder output directly

  void validate() const;
};

struct ModelParams {
  ModelConfig cfg;
  TensorPtr in_proj_w, in_proj_b;  // feature dim -> d_model, shared by all windows
  TduParams compress0, compress1;
  TensorPtr query_l0, query_l1;
  TduParams encoder;
  TensorPtr query_a;  // anticipation tokens [T_a x d_model]
  TduParams generator;
  TensorPtr query_f;  // future tokens [T_f x d_model]
  TduParams refine;
  TensorPtr cls_w, cls_b;  // d_model -> C+1, one head shared by all three outputs
};

ModelParams make_model(const PartitionConfig& pcfg, const ModelConfig& mcfg, Rng& rng);

// Published compression-query widths per dataset shape ("th14", "ek100",
// "crosstask"); everything else keeps the defaults.
ModelConfig preset_model(const std::string& name);
std::vector<TensorPtr> model_param_list(const ModelParams& p);
std::vector<std::pair<std::string, TensorPtr>> named_params(const ModelParams& p);

void save_checkpoint(const ModelParams& p, const PartitionConfig& pcfg, const std::string& path);
struct Checkpoint {
  ModelParams params;
  PartitionConfig partition;
};
Checkpoint load_checkpoint(const std::string& path);

// Tape handles produced by one forward pass. p_sa comes from the encoder
// output, p_sa_hat from the refined memory (identical to p_sa when
// refinement is off), p_f from the generated future. short_input is the raw
// short-term window's tape node, kept so audits can differentiate logits
// with respect to input frames.
struct ForwardOutputs {
  Var m_l_prime;  // first compression stage, what the streaming cache stores
  Var m_l_hat;
  Var m_sa;
  Var m_sa_hat;
  Var p_sa;
  Var p_sa_hat;
  Var m_f;
  Var p_f;
  bool has_future = false;
  Var short_input;
};

// Two-stage compression of the projected long-term tokens. Padded tokens are
// excluded through the first stage's cross-attention mask; a fully padded
// window degenerates to a single zero key so the TDU chain stays defined.
Var compress_long(Tape& t, Var long_proj, const std::vector<uint8_t>& long_pad,
                  const ModelParams& p);
Var compress_stage1(Tape& t, Var long_proj, const std::vector<uint8_t>& long_pad,
                    const ModelParams& p);
Var compress_stage2(Tape& t, Var stage1, const ModelParams& p);

// Queries [near-past | short | anticipation] + timeline PE attend keys
// [compressed long | short + PE | anticipation + PE]; the output drops the
// near-past rows and keeps the (T_s + T_a) block.
Var encode_detection_anticipation(Tape& t, Var near_past_proj, Var short_proj, Var m_l_hat,
                                  const ModelParams& p, const PartitionConfig& cfg);

// Future tokens decoded from compressed long-term memory alone; structurally
// independent of the short-term window.
Var generate_near_future(Tape& t, Var m_l_hat, const ModelParams& p, const PartitionConfig& cfg);

Var refine_memory(Tape& t, Var m_sa, Var m_l_hat, Var m_f, const ModelParams& p,
                  const PartitionConfig& cfg, const AttentionMask& cross_mask);

// Shared classification head.
Var classify(Tape& t, Var x, const ModelParams& p);

// Full pass over one sample. stage1_cache, when given, replaces the first
// compression stage with a previously computed value (must be bit-identical
// to what the model would compute; the streaming cache guarantees that by
// construction).
ForwardOutputs forward(Tape& t, const TrainingSample& sample, const ModelParams& p,
                       const PartitionConfig& cfg, const Tensor* stage1_cache = nullptr);

}  // namespace cmert
