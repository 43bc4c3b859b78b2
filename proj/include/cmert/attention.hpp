#pragma once

#include <vector>

#include "cmert/rng.hpp"
#include "cmert/tensor.hpp"

namespace cmert {

// Projection weights for one attention block. All square d_model x d_model
// plus per-projection biases.
struct AttnParams {
  TensorPtr wq, bq, wk, bk, wv, bv, wo, bo;
};

// One Transformer Decoder Unit: masked self-attention, cross-attention, and
// a two-layer feed-forward, each followed by residual + LayerNorm (post-norm,
// in that order).
struct TduParams {
  AttnParams self_attn;
  AttnParams cross_attn;
  TensorPtr ffn_w1, ffn_b1, ffn_w2, ffn_b2;  // d -> 4d -> d, rectifier between
  TensorPtr ln1_gain, ln1_bias;
  TensorPtr ln2_gain, ln2_bias;
  TensorPtr ln3_gain, ln3_bias;
  int heads = 4;
};

// Standard sin/cos table; absolute position of row i is offset + i, so blocks
// living on one timeline (near-past, short-term, anticipation) can share a
// consistent encoding.
Tensor sinusoidal_pe(int length, int d_model, int offset);

AttnParams make_attn_params(int d_model, Rng& rng);
TduParams make_tdu_params(int d_model, int heads, Rng& rng);
std::vector<TensorPtr> attn_param_list(const AttnParams& p);
std::vector<TensorPtr> tdu_param_list(const TduParams& p);

// Multi-head scaled dot-product attention among the rows of x. mask may be
// null (all positions visible).
Var self_attention(Tape& t, Var x, const AttentionMask* mask, const AttnParams& p, int heads);

// As self_attention but keys/values come from a second stream.
Var cross_attention(Tape& t, Var q, Var k, Var v, const AttentionMask* mask, const AttnParams& p,
                    int heads);

// Q' = LN(SelfAttn(Q) + Q); Q'' = LN(CrossAttn(Q', K, V) + Q'); out = LN(FFN(Q'') + Q'').
Var tdu_forward(Tape& t, Var q, Var k, Var v, const AttentionMask* self_mask,
                const AttentionMask* cross_mask, const TduParams& p);

}  // namespace cmert
