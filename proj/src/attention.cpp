#include "cmert/attention.hpp"

#include <cmath>
#include <stdexcept>

namespace cmert {

Tensor sinusoidal_pe(int length, int d_model, int offset) {
  if (d_model % 2 != 0)
    throw std::invalid_argument("sinusoidal_pe: d_model must be even, got " +
                                std::to_string(d_model));
  Tensor pe = tensor2(length, d_model);
  for (int i = 0; i < length; ++i) {
    double pos = static_cast<double>(offset + i);
    for (int k = 0; k < d_model / 2; ++k) {
      double angle = pos / std::pow(10000.0, 2.0 * k / d_model);
      pe.at(i, 2 * k) = std::sin(angle);
      pe.at(i, 2 * k + 1) = std::cos(angle);
    }
  }
  return pe;
}

namespace {

TensorPtr weight(int r, int c, Rng& rng, double scale) {
  auto t = std::make_shared<Tensor>(tensor2(r, c));
  for (double& x : t->data) x = rng.normal(0.0, scale);
  t->requires_grad = true;
  return t;
}

TensorPtr bias(int n, double fill = 0.0) {
  auto t = std::make_shared<Tensor>(tensor1(n, fill));
  t->requires_grad = true;
  return t;
}

}  // namespace

AttnParams make_attn_params(int d_model, Rng& rng) {
  double s = 1.0 / std::sqrt(static_cast<double>(d_model));
  AttnParams p;
  p.wq = weight(d_model, d_model, rng, s);
  p.bq = bias(d_model);
  p.wk = weight(d_model, d_model, rng, s);
  p.bk = bias(d_model);
  p.wv = weight(d_model, d_model, rng, s);
  p.bv = bias(d_model);
  p.wo = weight(d_model, d_model, rng, s);
  p.bo = bias(d_model);
  return p;
}

TduParams make_tdu_params(int d_model, int heads, Rng& rng) {
  if (heads < 1 || d_model % heads != 0)
    throw std::invalid_argument("make_tdu_params: d_model " + std::to_string(d_model) +
                                " not divisible by heads " + std::to_string(heads));
  TduParams p;
  p.self_attn = make_attn_params(d_model, rng);
  p.cross_attn = make_attn_params(d_model, rng);
  int hidden = 4 * d_model;
  p.ffn_w1 = weight(d_model, hidden, rng, 1.0 / std::sqrt(static_cast<double>(d_model)));
  p.ffn_b1 = bias(hidden);
  p.ffn_w2 = weight(hidden, d_model, rng, 1.0 / std::sqrt(static_cast<double>(hidden)));
  p.ffn_b2 = bias(d_model);
  p.ln1_gain = bias(d_model, 1.0);
  p.ln1_bias = bias(d_model);
  p.ln2_gain = bias(d_model, 1.0);
  p.ln2_bias = bias(d_model);
  p.ln3_gain = bias(d_model, 1.0);
  p.ln3_bias = bias(d_model);
  p.heads = heads;
  return p;
}

std::vector<TensorPtr> attn_param_list(const AttnParams& p) {
  return {p.wq, p.bq, p.wk, p.bk, p.wv, p.bv, p.wo, p.bo};
}

std::vector<TensorPtr> tdu_param_list(const TduParams& p) {
  std::vector<TensorPtr> out = attn_param_list(p.self_attn);
  for (const auto& t : attn_param_list(p.cross_attn)) out.push_back(t);
  for (const auto& t : {p.ffn_w1, p.ffn_b1, p.ffn_w2, p.ffn_b2, p.ln1_gain, p.ln1_bias, p.ln2_gain,
                        p.ln2_bias, p.ln3_gain, p.ln3_bias})
    out.push_back(t);
  return out;
}

namespace {

Var attention(Tape& t, Var q_in, Var k_in, Var v_in, const AttentionMask* mask,
              const AttnParams& p, int heads) {
  int d = t.val(q_in).cols();
  if (heads < 1 || d % heads != 0)
    throw std::invalid_argument("attention: width " + std::to_string(d) +
                                " not divisible by heads " + std::to_string(heads));
  Var q = t.add_rowvec(t.matmul(q_in, t.leaf(p.wq)), t.leaf(p.bq));
  Var k = t.add_rowvec(t.matmul(k_in, t.leaf(p.wk)), t.leaf(p.bk));
  Var v = t.add_rowvec(t.matmul(v_in, t.leaf(p.wv)), t.leaf(p.bv));
  int dh = d / heads;
  double scl = 1.0 / std::sqrt(static_cast<double>(dh));
  std::vector<Var> head_outs;
  head_outs.reserve(heads);
  for (int h = 0; h < heads; ++h) {
    Var qh = t.slice_cols(q, h * dh, (h + 1) * dh);
    Var kh = t.slice_cols(k, h * dh, (h + 1) * dh);
    Var vh = t.slice_cols(v, h * dh, (h + 1) * dh);
    Var scores = t.scale(t.matmul(qh, t.transpose(kh)), scl);
    Var probs = t.softmax_rows(scores, mask);
    head_outs.push_back(t.matmul(probs, vh));
  }
  Var cat = heads == 1 ? head_outs[0] : t.concat_cols(head_outs);
  return t.add_rowvec(t.matmul(cat, t.leaf(p.wo)), t.leaf(p.bo));
}

}  // namespace

Var self_attention(Tape& t, Var x, const AttentionMask* mask, const AttnParams& p, int heads) {
  return attention(t, x, x, x, mask, p, heads);
}

Var cross_attention(Tape& t, Var q, Var k, Var v, const AttentionMask* mask, const AttnParams& p,
                    int heads) {
  if (t.val(k).rows() != t.val(v).rows())
    throw std::invalid_argument("cross_attention: key rows " + std::to_string(t.val(k).rows()) +
                                " != value rows " + std::to_string(t.val(v).rows()));
  return attention(t, q, k, v, mask, p, heads);
}

Var tdu_forward(Tape& t, Var q, Var k, Var v, const AttentionMask* self_mask,
                const AttentionMask* cross_mask, const TduParams& p) {
  Var q1 = t.layer_norm(t.add(self_attention(t, q, self_mask, p.self_attn, p.heads), q),
                        t.leaf(p.ln1_gain), t.leaf(p.ln1_bias));
  Var q2 =
      t.layer_norm(t.add(cross_attention(t, q1, k, v, cross_mask, p.cross_attn, p.heads), q1),
                   t.leaf(p.ln2_gain), t.leaf(p.ln2_bias));
  Var hidden = t.relu(t.add_rowvec(t.matmul(q2, t.leaf(p.ffn_w1)), t.leaf(p.ffn_b1)));
  Var ff = t.add_rowvec(t.matmul(hidden, t.leaf(p.ffn_w2)), t.leaf(p.ffn_b2));
  return t.layer_norm(t.add(ff, q2), t.leaf(p.ln3_gain), t.leaf(p.ln3_bias));
}

}  // namespace cmert
