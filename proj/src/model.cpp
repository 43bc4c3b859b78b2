#include "cmert/model.hpp"

#include <cmath>
#include <fstream>
#include <stdexcept>

#include "cmert/io.hpp"
#include "json.hpp"

namespace cmert {

void ModelConfig::validate() const {
  if (d_model < 2 || d_model % 2 != 0)
    throw std::invalid_argument("d_model must be even and >= 2, got " + std::to_string(d_model));
  if (heads < 1 || d_model % heads != 0)
    throw std::invalid_argument("d_model " + std::to_string(d_model) +
                                " not divisible by heads " + std::to_string(heads));
  if (q_l0 < 1 || q_l1 < 1)
    throw std::invalid_argument("compression query counts must be >= 1, got " +
                                std::to_string(q_l0) + " and " + std::to_string(q_l1));
}

namespace {

TensorPtr init_weight(int r, int c, Rng& rng, double scale) {
  auto t = std::make_shared<Tensor>(tensor2(r, c));
  for (double& x : t->data) x = rng.normal(0.0, scale);
  t->requires_grad = true;
  return t;
}

TensorPtr init_bias(int n) {
  auto t = std::make_shared<Tensor>(tensor1(n));
  t->requires_grad = true;
  return t;
}

}  // namespace

ModelConfig preset_model(const std::string& name) {
  ModelConfig m;
  if (name == "th14" || name == "crosstask") {
    m.q_l0 = 16;
    m.q_l1 = 32;
  } else if (name == "ek100") {
    m.q_l0 = 16;
    m.q_l1 = 16;
  } else {
    throw std::invalid_argument("preset_model: unknown preset '" + name + "'");
  }
  return m;
}

ModelParams make_model(const PartitionConfig& pcfg, const ModelConfig& mcfg, Rng& rng) {
  pcfg.validate();
  mcfg.validate();
  int d = mcfg.d_model;
  double qs = 1.0 / std::sqrt(static_cast<double>(d));
  ModelParams p;
  p.cfg = mcfg;
  p.in_proj_w = init_weight(pcfg.feat_dim, d, rng, 1.0 / std::sqrt(static_cast<double>(pcfg.feat_dim)));
  p.in_proj_b = init_bias(d);
  p.compress0 = make_tdu_params(d, mcfg.heads, rng);
  p.compress1 = make_tdu_params(d, mcfg.heads, rng);
  p.query_l0 = init_weight(mcfg.q_l0, d, rng, qs);
  p.query_l1 = init_weight(mcfg.q_l1, d, rng, qs);
  p.encoder = make_tdu_params(d, mcfg.heads, rng);
  p.query_a = init_weight(pcfg.antic_frames, d, rng, qs);
  p.generator = make_tdu_params(d, mcfg.heads, rng);
  p.query_f = init_weight(pcfg.future_frames, d, rng, qs);
  p.refine = make_tdu_params(d, mcfg.heads, rng);
  p.cls_w = init_weight(d, pcfg.num_actions + 1, rng, qs);
  p.cls_b = init_bias(pcfg.num_actions + 1);
  return p;
}

namespace {

void add_tdu_names(const std::string& prefix, const TduParams& p,
                   std::vector<std::pair<std::string, TensorPtr>>& out) {
  auto attn = [&](const std::string& block, const AttnParams& a) {
    out.emplace_back(prefix + "." + block + ".wq", a.wq);
    out.emplace_back(prefix + "." + block + ".bq", a.bq);
    out.emplace_back(prefix + "." + block + ".wk", a.wk);
    out.emplace_back(prefix + "." + block + ".bk", a.bk);
    out.emplace_back(prefix + "." + block + ".wv", a.wv);
    out.emplace_back(prefix + "." + block + ".bv", a.bv);
    out.emplace_back(prefix + "." + block + ".wo", a.wo);
    out.emplace_back(prefix + "." + block + ".bo", a.bo);
  };
  attn("self", p.self_attn);
  attn("cross", p.cross_attn);
  out.emplace_back(prefix + ".ffn.w1", p.ffn_w1);
  out.emplace_back(prefix + ".ffn.b1", p.ffn_b1);
  out.emplace_back(prefix + ".ffn.w2", p.ffn_w2);
  out.emplace_back(prefix + ".ffn.b2", p.ffn_b2);
  out.emplace_back(prefix + ".ln1.gain", p.ln1_gain);
  out.emplace_back(prefix + ".ln1.bias", p.ln1_bias);
  out.emplace_back(prefix + ".ln2.gain", p.ln2_gain);
  out.emplace_back(prefix + ".ln2.bias", p.ln2_bias);
  out.emplace_back(prefix + ".ln3.gain", p.ln3_gain);
  out.emplace_back(prefix + ".ln3.bias", p.ln3_bias);
}

}  // namespace

std::vector<std::pair<std::string, TensorPtr>> named_params(const ModelParams& p) {
  std::vector<std::pair<std::string, TensorPtr>> out;
  out.emplace_back("in_proj.w", p.in_proj_w);
  out.emplace_back("in_proj.b", p.in_proj_b);
  add_tdu_names("compress0", p.compress0, out);
  add_tdu_names("compress1", p.compress1, out);
  out.emplace_back("query.l0", p.query_l0);
  out.emplace_back("query.l1", p.query_l1);
  add_tdu_names("encoder", p.encoder, out);
  out.emplace_back("query.a", p.query_a);
  add_tdu_names("generator", p.generator, out);
  out.emplace_back("query.f", p.query_f);
  add_tdu_names("refine", p.refine, out);
  out.emplace_back("cls.w", p.cls_w);
  out.emplace_back("cls.b", p.cls_b);
  return out;
}

std::vector<TensorPtr> model_param_list(const ModelParams& p) {
  std::vector<TensorPtr> out;
  for (auto& [name, t] : named_params(p)) out.push_back(t);
  return out;
}

void save_checkpoint(const ModelParams& p, const PartitionConfig& pcfg, const std::string& path) {
  nlohmann::json j;
  j["format"] = "cmert-checkpoint";
  j["version"] = 1;
  j["partition"] = {{"long_frames", pcfg.long_frames},
                    {"short_frames", pcfg.short_frames},
                    {"antic_frames", pcfg.antic_frames},
                    {"near_past_frames", pcfg.near_past_frames},
                    {"future_frames", pcfg.future_frames},
                    {"fps", pcfg.fps},
                    {"feat_dim", pcfg.feat_dim},
                    {"num_actions", pcfg.num_actions},
                    {"delta", pcfg.delta},
                    {"long_subsample", pcfg.long_subsample},
                    {"distant_future", pcfg.distant_future}};
  j["model"] = {{"d_model", p.cfg.d_model},
                {"heads", p.cfg.heads},
                {"q_l0", p.cfg.q_l0},
                {"q_l1", p.cfg.q_l1},
                {"leaky_anticipation", p.cfg.leaky_anticipation},
                {"use_refinement", p.cfg.use_refinement}};
  nlohmann::json tensors;
  for (auto& [name, t] : named_params(p)) {
    tensors[name] = {{"shape", t->shape}, {"data_b64", base64_encode_f64(t->data)}};
  }
  j["tensors"] = std::move(tensors);
  std::ofstream f(path);
  if (!f) throw std::runtime_error("save_checkpoint: cannot open " + path + " for writing");
  f << j.dump() << "\n";
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw std::runtime_error("load_checkpoint: cannot open " + path);
  nlohmann::json j;
  f >> j;
  if (j.value("format", "") != "cmert-checkpoint")
    throw std::runtime_error("load_checkpoint: " + path + " is not a checkpoint file");
  if (j.value("version", 0) != 1)
    throw std::runtime_error("load_checkpoint: unsupported version in " + path);
  Checkpoint ck;
  const auto& pj = j.at("partition");
  ck.partition.long_frames = pj.at("long_frames").get<int>();
  ck.partition.short_frames = pj.at("short_frames").get<int>();
  ck.partition.antic_frames = pj.at("antic_frames").get<int>();
  ck.partition.near_past_frames = pj.at("near_past_frames").get<int>();
  ck.partition.future_frames = pj.at("future_frames").get<int>();
  ck.partition.fps = pj.at("fps").get<double>();
  ck.partition.feat_dim = pj.at("feat_dim").get<int>();
  ck.partition.num_actions = pj.at("num_actions").get<int>();
  ck.partition.delta = pj.at("delta").get<int>();
  ck.partition.long_subsample = pj.at("long_subsample").get<int>();
  ck.partition.distant_future = pj.at("distant_future").get<bool>();
  const auto& mj = j.at("model");
  ModelConfig mc;
  mc.d_model = mj.at("d_model").get<int>();
  mc.heads = mj.at("heads").get<int>();
  mc.q_l0 = mj.at("q_l0").get<int>();
  mc.q_l1 = mj.at("q_l1").get<int>();
  mc.leaky_anticipation = mj.at("leaky_anticipation").get<bool>();
  mc.use_refinement = mj.at("use_refinement").get<bool>();
  Rng rng(0);  // layout only; every value is overwritten below
  ck.params = make_model(ck.partition, mc, rng);
  const auto& tensors = j.at("tensors");
  for (auto& [name, t] : named_params(ck.params)) {
    if (!tensors.contains(name))
      throw std::runtime_error("load_checkpoint: missing tensor '" + name + "' in " + path);
    const auto& tj = tensors.at(name);
    std::vector<int> shape = tj.at("shape").get<std::vector<int>>();
    if (shape != t->shape)
      throw std::runtime_error("load_checkpoint: tensor '" + name + "' has wrong shape in " + path);
    std::vector<double> data = base64_decode_f64(tj.at("data_b64").get<std::string>());
    if (data.size() != t->data.size())
      throw std::runtime_error("load_checkpoint: tensor '" + name + "' has wrong size in " + path);
    t->data = std::move(data);
  }
  return ck;
}

Var compress_stage1(Tape& t, Var long_proj, const std::vector<uint8_t>& long_pad,
                    const ModelParams& p) {
  int tokens = t.val(long_proj).rows();
  if (static_cast<int>(long_pad.size()) != tokens)
    throw std::invalid_argument("compress_stage1: " + std::to_string(long_pad.size()) +
                                " pad flags for " + std::to_string(tokens) + " tokens");
  bool all_padded = true;
  for (uint8_t f : long_pad)
    if (!f) all_padded = false;

  Var keys;
  const AttentionMask* cross_mask = nullptr;
  AttentionMask pad_mask;
  if (all_padded) {
    // Nothing observed yet: attend a single zero key so softmax stays defined.
    keys = t.input(tensor2(1, p.cfg.d_model));
  } else {
    keys = long_proj;
    pad_mask = AttentionMask(p.cfg.q_l0, tokens, true);
    for (int j = 0; j < tokens; ++j)
      if (long_pad[j])
        for (int i = 0; i < p.cfg.q_l0; ++i) pad_mask.at(i, j) = 0;
    cross_mask = &pad_mask;
  }
  return tdu_forward(t, t.leaf(p.query_l0), keys, keys, nullptr, cross_mask, p.compress0);
}

Var compress_stage2(Tape& t, Var stage1, const ModelParams& p) {
  return tdu_forward(t, t.leaf(p.query_l1), stage1, stage1, nullptr, nullptr, p.compress1);
}

Var compress_long(Tape& t, Var long_proj, const std::vector<uint8_t>& long_pad,
                  const ModelParams& p) {
  return compress_stage2(t, compress_stage1(t, long_proj, long_pad, p), p);
}

Var encode_detection_anticipation(Tape& t, Var near_past_proj, Var short_proj, Var m_l_hat,
                                  const ModelParams& p, const PartitionConfig& cfg) {
  int d = p.cfg.d_model;
  int tc = cfg.near_past_frames, tsn = cfg.short_frames, ta = cfg.antic_frames;
  // One timeline over [near-past | short | anticipation], position 0 at the
  // near-past start; keys reuse the same offsets so query/key positions agree.
  Var short_pe = t.add(short_proj, t.input(sinusoidal_pe(tsn, d, tc)));
  Var antic_pe = t.add(t.leaf(p.query_a), t.input(sinusoidal_pe(ta, d, tc + tsn)));
  Var queries;
  if (tc > 0) {
    Var np_pe = t.add(near_past_proj, t.input(sinusoidal_pe(tc, d, 0)));
    queries = t.concat_rows({np_pe, short_pe, antic_pe});
  } else {
    queries = t.concat_rows({short_pe, antic_pe});
  }
  Var keys = t.concat_rows({m_l_hat, short_pe, antic_pe});
  AttentionMask self_mask = build_encoder_self_mask(cfg);
  AttentionMask cross_mask = build_encoder_cross_mask(cfg, t.val(m_l_hat).rows());
  Var out = tdu_forward(t, queries, keys, keys, &self_mask, &cross_mask, p.encoder);
  // the updated near-past rows are scaffolding; keep the (T_s + T_a) block
  return t.slice_rows(out, tc, tc + tsn + ta);
}

Var generate_near_future(Tape& t, Var m_l_hat, const ModelParams& p, const PartitionConfig& cfg) {
  (void)cfg;
  return tdu_forward(t, t.leaf(p.query_f), m_l_hat, m_l_hat, nullptr, nullptr, p.generator);
}

Var refine_memory(Tape& t, Var m_sa, Var m_l_hat, Var m_f, const ModelParams& p,
                  const PartitionConfig& cfg, const AttentionMask& cross_mask) {
  int d = p.cfg.d_model;
  int tc = cfg.near_past_frames;
  // Keys reuse the encoder timeline: M_SA starts at position T_c, the future
  // block starts at t_s (near) or t (distant). Compressed long stays bare.
  Var m_sa_keys = t.add(m_sa, t.input(sinusoidal_pe(cfg.short_frames + cfg.antic_frames, d, tc)));
  int future_offset = cfg.distant_future ? tc + cfg.short_frames - 1 : tc;
  Var m_f_keys = t.add(m_f, t.input(sinusoidal_pe(cfg.future_frames, d, future_offset)));
  Var keys = t.concat_rows({m_l_hat, m_sa_keys, m_f_keys});
  AttentionMask self_mask = build_refinement_self_mask(cfg);
  return tdu_forward(t, m_sa, keys, keys, &self_mask, &cross_mask, p.refine);
}

Var classify(Tape& t, Var x, const ModelParams& p) {
  return t.add_rowvec(t.matmul(x, t.leaf(p.cls_w)), t.leaf(p.cls_b));
}

ForwardOutputs forward(Tape& t, const TrainingSample& sample, const ModelParams& p,
                       const PartitionConfig& cfg, const Tensor* stage1_cache) {
  auto project = [&](Var x) {
    return t.add_rowvec(t.matmul(x, t.leaf(p.in_proj_w)), t.leaf(p.in_proj_b));
  };
  ForwardOutputs out;
  out.short_input = t.input(sample.short_mem);
  Var short_proj = project(out.short_input);
  Var near_past_proj = project(t.input(sample.near_past));

  if (stage1_cache) {
    out.m_l_prime = t.input(*stage1_cache);
  } else {
    Var long_proj = project(t.input(sample.long_mem));
    out.m_l_prime = compress_stage1(t, long_proj, sample.long_pad, p);
  }
  out.m_l_hat = compress_stage2(t, out.m_l_prime, p);

  out.m_sa = encode_detection_anticipation(t, near_past_proj, short_proj, out.m_l_hat, p, cfg);
  out.p_sa = classify(t, out.m_sa, p);

  if (p.cfg.use_refinement) {
    out.m_f = generate_near_future(t, out.m_l_hat, p, cfg);
    AttentionMask cross =
        build_refinement_cross_mask(cfg, t.val(out.m_l_hat).rows(), p.cfg.leaky_anticipation);
    out.m_sa_hat = refine_memory(t, out.m_sa, out.m_l_hat, out.m_f, p, cfg, cross);
    out.p_sa_hat = classify(t, out.m_sa_hat, p);
    out.p_f = classify(t, out.m_f, p);
    out.has_future = true;
  } else {
    out.m_sa_hat = out.m_sa;
    out.p_sa_hat = out.p_sa;
    out.has_future = false;
  }
  return out;
}

}  // namespace cmert
