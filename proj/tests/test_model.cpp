#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <cmath>
#include <cstdio>
#include <set>
#include <stdexcept>
#include <string>

#include "cmert/model.hpp"
#include "doctest.h"
#include "oracles.hpp"

using cmert::FeatureStream;
using cmert::ForwardOutputs;
using cmert::ModelConfig;
using cmert::ModelParams;
using cmert::PartitionConfig;
using cmert::Rng;
using cmert::Tape;
using cmert::Tensor;
using cmert::TrainingSample;
using cmert::Var;
using testutil::check_gradients;
using testutil::random_tensor;

namespace {

PartitionConfig tiny_partition() {
  PartitionConfig p;
  p.long_frames = 4;
  p.long_subsample = 2;
  p.short_frames = 3;
  p.antic_frames = 1;
  p.near_past_frames = 1;
  p.future_frames = 4;
  p.feat_dim = 5;
  p.num_actions = 3;
  return p;
}

ModelConfig tiny_model() {
  ModelConfig m;
  m.d_model = 8;
  m.heads = 2;
  m.q_l0 = 3;
  m.q_l1 = 2;
  return m;
}

PartitionConfig mid_partition() {
  PartitionConfig p;
  p.long_frames = 8;
  p.long_subsample = 2;
  p.short_frames = 6;
  p.antic_frames = 2;
  p.near_past_frames = 2;
  p.future_frames = 5;
  p.feat_dim = 6;
  p.num_actions = 4;
  return p;
}

ModelConfig mid_model() {
  ModelConfig m;
  m.d_model = 16;
  m.heads = 4;
  m.q_l0 = 4;
  m.q_l1 = 3;
  return m;
}

FeatureStream random_stream(const PartitionConfig& cfg, int length, uint64_t seed) {
  Rng rng(seed);
  FeatureStream s;
  s.features = random_tensor({length, cfg.feat_dim}, rng);
  s.labels.resize(length);
  for (int& l : s.labels) l = rng.uniform_int(0, cfg.num_actions);
  s.fps = cfg.fps;
  s.num_actions = cfg.num_actions;
  return s;
}

// Anchor far enough in that every window is fully observed.
int safe_anchor(const PartitionConfig& cfg) {
  return cfg.long_frames + cfg.near_past_frames + cfg.short_frames + 4;
}

double max_abs_row_diff(const Tensor& a, const Tensor& b, int row) {
  double m = 0.0;
  for (int j = 0; j < a.cols(); ++j) m = std::max(m, std::abs(a.at(row, j) - b.at(row, j)));
  return m;
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
  double m = 0.0;
  for (size_t k = 0; k < a.data.size(); ++k) m = std::max(m, std::abs(a.data[k] - b.data[k]));
  return m;
}

// Scalar loss mirroring the training objective's shape so gradient checks
// exercise every parameter through all three heads.
double forward_loss(const TrainingSample& sample, const ModelParams& p, const PartitionConfig& cfg,
                    bool with_grad) {
  Tape t;
  ForwardOutputs out = cmert::forward(t, sample, p, cfg);
  Var l1 = t.cross_entropy(out.p_sa_hat, sample.y_sa, sample.ignore_sa);
  Var l0 = t.cross_entropy(out.p_sa, sample.y_sa, sample.ignore_sa);
  Var lf = t.cross_entropy(out.p_f, sample.y_f, sample.ignore_f);
  Var total = t.add(l1, t.add(t.scale(l0, 0.2), t.scale(lf, 0.5)));
  if (with_grad) t.backward(total);
  return t.val(total).data[0];
}

}  // namespace

TEST_CASE("named parameters are unique and cover the whole model") {
  Rng rng(7);
  ModelParams p = cmert::make_model(mid_partition(), mid_model(), rng);
  auto named = cmert::named_params(p);
  std::set<std::string> names;
  for (auto& [name, tp] : named) {
    CHECK(tp != nullptr);
    CHECK(tp->requires_grad);
    names.insert(name);
  }
  CHECK(names.size() == named.size());
  // 2 input projection + 5 TDUs x (8+8 attention, 4 ffn, 6 norm) + 4 query blocks + 2 classifier
  CHECK(named.size() == 2 + 5 * 26 + 4 + 2);
  CHECK(cmert::model_param_list(p).size() == named.size());
}

TEST_CASE("learnable blocks have the configured shapes") {
  PartitionConfig cfg = mid_partition();
  ModelConfig mc = mid_model();
  Rng rng(3);
  ModelParams p = cmert::make_model(cfg, mc, rng);
  CHECK(p.query_l0->shape == std::vector<int>{mc.q_l0, mc.d_model});
  CHECK(p.query_l1->shape == std::vector<int>{mc.q_l1, mc.d_model});
  CHECK(p.query_a->shape == std::vector<int>{cfg.antic_frames, mc.d_model});
  CHECK(p.query_f->shape == std::vector<int>{cfg.future_frames, mc.d_model});
  CHECK(p.in_proj_w->shape == std::vector<int>{cfg.feat_dim, mc.d_model});
  CHECK(p.cls_w->shape == std::vector<int>{mc.d_model, cfg.num_actions + 1});
  CHECK(p.cls_b->shape == std::vector<int>{cfg.num_actions + 1});
}

TEST_CASE("model config validation rejects bad head and query counts") {
  Rng rng(0);
  ModelConfig m = mid_model();
  m.heads = 5;  // 16 % 5 != 0
  CHECK_THROWS_AS(cmert::make_model(mid_partition(), m, rng), std::invalid_argument);
  m = mid_model();
  m.q_l1 = 0;
  CHECK_THROWS_AS(cmert::make_model(mid_partition(), m, rng), std::invalid_argument);
}

TEST_CASE("forward output shapes follow the partition geometry") {
  for (bool distant : {false, true}) {
    for (int tc : {0, 2}) {
      PartitionConfig cfg = mid_partition();
      cfg.near_past_frames = tc;
      cfg.distant_future = distant;
      ModelConfig mc = mid_model();
      Rng rng(11);
      ModelParams p = cmert::make_model(cfg, mc, rng);
      FeatureStream s = random_stream(cfg, 200, 5);
      TrainingSample sample = cmert::extract_windows(s, safe_anchor(cfg), cfg);
      Tape t;
      ForwardOutputs out = cmert::forward(t, sample, p, cfg);
      int tsa = cfg.short_frames + cfg.antic_frames;
      CHECK(t.val(out.m_l_prime).shape == std::vector<int>{mc.q_l0, mc.d_model});
      CHECK(t.val(out.m_l_hat).shape == std::vector<int>{mc.q_l1, mc.d_model});
      CHECK(t.val(out.m_sa).shape == std::vector<int>{tsa, mc.d_model});
      CHECK(t.val(out.m_sa_hat).shape == std::vector<int>{tsa, mc.d_model});
      CHECK(t.val(out.m_f).shape == std::vector<int>{cfg.future_frames, mc.d_model});
      CHECK(t.val(out.p_sa).shape == std::vector<int>{tsa, cfg.num_actions + 1});
      CHECK(t.val(out.p_sa_hat).shape == std::vector<int>{tsa, cfg.num_actions + 1});
      CHECK(t.val(out.p_f).shape == std::vector<int>{cfg.future_frames, cfg.num_actions + 1});
      CHECK(out.has_future);
    }
  }
}

TEST_CASE("compressed long-term width is fixed regardless of observed history") {
  PartitionConfig cfg = mid_partition();
  ModelConfig mc = mid_model();
  Rng rng(2);
  ModelParams p = cmert::make_model(cfg, mc, rng);
  FeatureStream s = random_stream(cfg, 120, 9);
  // anchor 0: everything before the short window is padding
  for (int anchor : {0, 3, cfg.short_frames + 1, safe_anchor(cfg)}) {
    TrainingSample sample = cmert::extract_windows(s, anchor, cfg);
    Tape t;
    ForwardOutputs out = cmert::forward(t, sample, p, cfg);
    CHECK(t.val(out.m_l_hat).shape == std::vector<int>{mc.q_l1, mc.d_model});
    for (double v : t.val(out.m_l_hat).data) CHECK(std::isfinite(v));
    for (double v : t.val(out.p_sa_hat).data) CHECK(std::isfinite(v));
  }
}

TEST_CASE("fully padded long-term memory stays finite through compression") {
  PartitionConfig cfg = mid_partition();
  ModelConfig mc = mid_model();
  Rng rng(4);
  ModelParams p = cmert::make_model(cfg, mc, rng);
  FeatureStream s = random_stream(cfg, 60, 13);
  TrainingSample sample = cmert::extract_windows(s, 0, cfg);
  for (uint8_t f : sample.long_pad) CHECK(f == 1);
  Tape t;
  Var long_proj = t.add_rowvec(t.matmul(t.input(sample.long_mem), t.leaf(p.in_proj_w)),
                               t.leaf(p.in_proj_b));
  Var m_l_hat = cmert::compress_long(t, long_proj, sample.long_pad, p);
  CHECK(t.val(m_l_hat).shape == std::vector<int>{mc.q_l1, mc.d_model});
  for (double v : t.val(m_l_hat).data) CHECK(std::isfinite(v));
}

TEST_CASE("pad flag count must match the long-term token count") {
  PartitionConfig cfg = mid_partition();
  Rng rng(4);
  ModelParams p = cmert::make_model(cfg, mid_model(), rng);
  Tape t;
  Var long_proj = t.input(random_tensor({cfg.long_tokens(), mid_model().d_model}, rng));
  std::vector<uint8_t> bad_pad(cfg.long_tokens() + 1, 0);
  CHECK_THROWS_AS(cmert::compress_stage1(t, long_proj, bad_pad, p), std::invalid_argument);
}

TEST_CASE("encoder rows before a perturbed short frame are unaffected") {
  PartitionConfig cfg = mid_partition();
  ModelConfig mc = mid_model();
  Rng rng(21);
  ModelParams p = cmert::make_model(cfg, mc, rng);
  FeatureStream s = random_stream(cfg, 200, 31);
  TrainingSample base = cmert::extract_windows(s, safe_anchor(cfg), cfg);
  Tape t0;
  ForwardOutputs o0 = cmert::forward(t0, base, p, cfg);
  const Tensor& m0 = t0.val(o0.m_sa);
  for (int j = 1; j < cfg.short_frames; ++j) {
    TrainingSample pert = base;
    for (int d = 0; d < cfg.feat_dim; ++d) pert.short_mem.at(j, d) += 0.5;
    Tape t1;
    ForwardOutputs o1 = cmert::forward(t1, pert, p, cfg);
    const Tensor& m1 = t1.val(o1.m_sa);
    for (int i = 0; i < j; ++i) CHECK(max_abs_row_diff(m0, m1, i) < 1e-10);
    CHECK(max_abs_row_diff(m0, m1, j) > 1e-8);
    // anticipation rows see the whole short window
    CHECK(max_abs_row_diff(m0, m1, cfg.short_frames) > 1e-8);
  }
}

TEST_CASE("generated future depends on long-term memory only") {
  PartitionConfig cfg = mid_partition();
  Rng rng(17);
  ModelParams p = cmert::make_model(cfg, mid_model(), rng);
  FeatureStream s = random_stream(cfg, 200, 23);
  TrainingSample base = cmert::extract_windows(s, safe_anchor(cfg), cfg);
  Tape t0;
  ForwardOutputs o0 = cmert::forward(t0, base, p, cfg);

  TrainingSample short_pert = base;
  for (double& v : short_pert.short_mem.data) v += 0.7;
  for (double& v : short_pert.near_past.data) v += 0.7;
  Tape t1;
  ForwardOutputs o1 = cmert::forward(t1, short_pert, p, cfg);
  // same arithmetic on both tapes, so equality is exact, not approximate
  CHECK(max_abs_diff(t0.val(o0.m_f), t1.val(o1.m_f)) == 0.0);

  TrainingSample long_pert = base;
  for (double& v : long_pert.long_mem.data) v += 0.7;
  Tape t2;
  ForwardOutputs o2 = cmert::forward(t2, long_pert, p, cfg);
  CHECK(max_abs_diff(t0.val(o0.m_f), t2.val(o2.m_f)) > 1e-8);
}

TEST_CASE("refined detection rows never see later short frames") {
  PartitionConfig cfg = mid_partition();
  Rng rng(29);
  ModelParams p = cmert::make_model(cfg, mid_model(), rng);
  FeatureStream s = random_stream(cfg, 200, 37);
  TrainingSample base = cmert::extract_windows(s, safe_anchor(cfg), cfg);
  Tape t0;
  ForwardOutputs o0 = cmert::forward(t0, base, p, cfg);
  const Tensor& p0 = t0.val(o0.p_sa_hat);
  for (int j = 1; j < cfg.short_frames; ++j) {
    TrainingSample pert = base;
    for (int d = 0; d < cfg.feat_dim; ++d) pert.short_mem.at(j, d) += 0.5;
    Tape t1;
    ForwardOutputs o1 = cmert::forward(t1, pert, p, cfg);
    const Tensor& p1 = t1.val(o1.p_sa_hat);
    for (int i = 0; i < j; ++i) CHECK(max_abs_row_diff(p0, p1, i) < 1e-10);
    CHECK(max_abs_row_diff(p0, p1, j) > 1e-8);
  }
}

TEST_CASE("latency slack delays sensitivity by exactly delta frames") {
  PartitionConfig cfg = mid_partition();
  cfg.delta = 2;
  Rng rng(41);
  ModelParams p = cmert::make_model(cfg, mid_model(), rng);
  FeatureStream s = random_stream(cfg, 200, 43);
  TrainingSample base = cmert::extract_windows(s, safe_anchor(cfg), cfg);
  Tape t0;
  ForwardOutputs o0 = cmert::forward(t0, base, p, cfg);
  const Tensor& p0 = t0.val(o0.p_sa_hat);
  for (int j = 1; j < cfg.short_frames; ++j) {
    TrainingSample pert = base;
    for (int d = 0; d < cfg.feat_dim; ++d) pert.short_mem.at(j, d) += 0.5;
    Tape t1;
    ForwardOutputs o1 = cmert::forward(t1, pert, p, cfg);
    const Tensor& p1 = t1.val(o1.p_sa_hat);
    for (int i = 0; i < cfg.short_frames; ++i) {
      if (i < j - cfg.delta) {
        CHECK(max_abs_row_diff(p0, p1, i) < 1e-10);
      } else {
        CHECK(max_abs_row_diff(p0, p1, i) > 1e-10);
      }
    }
  }
}

TEST_CASE("leaky anticipation reintroduces backward information flow") {
  PartitionConfig cfg = mid_partition();
  int witnesses = 0;
  for (uint64_t seed = 1; seed <= 5; ++seed) {
    ModelConfig mc = mid_model();
    mc.leaky_anticipation = true;
    Rng rng(seed);
    ModelParams p = cmert::make_model(cfg, mc, rng);
    FeatureStream s = random_stream(cfg, 200, seed + 100);
    TrainingSample base = cmert::extract_windows(s, safe_anchor(cfg), cfg);
    Tape t0;
    ForwardOutputs o0 = cmert::forward(t0, base, p, cfg);
    int j = cfg.short_frames - 1;
    TrainingSample pert = base;
    for (int d = 0; d < cfg.feat_dim; ++d) pert.short_mem.at(j, d) += 0.5;
    Tape t1;
    ForwardOutputs o1 = cmert::forward(t1, pert, p, cfg);
    bool leaked = false;
    for (int i = 0; i < j; ++i)
      if (max_abs_row_diff(t0.val(o0.p_sa_hat), t1.val(o1.p_sa_hat), i) > 1e-6) leaked = true;
    if (leaked) ++witnesses;
  }
  CHECK(witnesses == 5);
}

TEST_CASE("leak witness also shows in input gradients") {
  PartitionConfig cfg = mid_partition();
  for (bool leaky : {false, true}) {
    int witnesses = 0;
    for (uint64_t seed = 1; seed <= 5; ++seed) {
      ModelConfig mc = mid_model();
      mc.leaky_anticipation = leaky;
      Rng rng(seed);
      ModelParams p = cmert::make_model(cfg, mc, rng);
      FeatureStream s = random_stream(cfg, 200, seed + 300);
      TrainingSample sample = cmert::extract_windows(s, safe_anchor(cfg), cfg);
      Tape t;
      ForwardOutputs out = cmert::forward(t, sample, p, cfg);
      // gradient of an early refined detection logit w.r.t. the raw window
      int i = 1;
      Var row = t.slice_rows(out.p_sa_hat, i, i + 1);
      t.backward(t.sum(row));
      const auto& g = t.grad(out.short_input);
      double later = 0.0;
      for (int f = i + 1; f < cfg.short_frames; ++f)
        for (int d = 0; d < cfg.feat_dim; ++d)
          later = std::max(later, std::abs(g[static_cast<size_t>(f) * cfg.feat_dim + d]));
      if (leaky) {
        if (later > 1e-9) ++witnesses;
      } else {
        CHECK(later < 1e-12);
      }
    }
    if (leaky) CHECK(witnesses == 5);
  }
}

TEST_CASE("classifier weights are shared by all three heads") {
  PartitionConfig cfg = mid_partition();
  Rng rng(51);
  ModelParams p = cmert::make_model(cfg, mid_model(), rng);
  FeatureStream s = random_stream(cfg, 200, 53);
  TrainingSample sample = cmert::extract_windows(s, safe_anchor(cfg), cfg);
  Tape t0;
  ForwardOutputs o0 = cmert::forward(t0, sample, p, cfg);
  p.cls_w->data[0] += 1.0;
  Tape t1;
  ForwardOutputs o1 = cmert::forward(t1, sample, p, cfg);
  CHECK(max_abs_diff(t0.val(o0.p_sa), t1.val(o1.p_sa)) > 1e-8);
  CHECK(max_abs_diff(t0.val(o0.p_sa_hat), t1.val(o1.p_sa_hat)) > 1e-8);
  CHECK(max_abs_diff(t0.val(o0.p_f), t1.val(o1.p_f)) > 1e-8);
}

TEST_CASE("disabling refinement classifies the encoder output directly") {
  PartitionConfig cfg = mid_partition();
  ModelConfig mc = mid_model();
  mc.use_refinement = false;
  Rng rng(57);
  ModelParams p = cmert::make_model(cfg, mc, rng);
  FeatureStream s = random_stream(cfg, 200, 59);
  TrainingSample sample = cmert::extract_windows(s, safe_anchor(cfg), cfg);
  Tape t;
  ForwardOutputs out = cmert::forward(t, sample, p, cfg);
  CHECK(out.p_sa_hat.idx == out.p_sa.idx);
  CHECK(out.m_sa_hat.idx == out.m_sa.idx);
  CHECK(!out.has_future);
}

TEST_CASE("logits stay finite across 50 random samples") {
  PartitionConfig cfg = mid_partition();
  Rng rng(61);
  ModelParams p = cmert::make_model(cfg, mid_model(), rng);
  Rng pick(62);
  for (int n = 0; n < 50; ++n) {
    FeatureStream s = random_stream(cfg, 80, 1000 + n);
    int anchor = pick.uniform_int(0, s.length() - 1);
    TrainingSample sample = cmert::extract_windows(s, anchor, cfg);
    Tape t;
    ForwardOutputs out = cmert::forward(t, sample, p, cfg);
    for (double v : t.val(out.p_sa).data) CHECK(std::isfinite(v));
    for (double v : t.val(out.p_sa_hat).data) CHECK(std::isfinite(v));
    for (double v : t.val(out.p_f).data) CHECK(std::isfinite(v));
  }
}

TEST_CASE("every parameter gradient matches finite differences on a tiny config") {
  PartitionConfig cfg = tiny_partition();
  ModelConfig mc = tiny_model();
  for (uint64_t seed = 1; seed <= 3; ++seed) {
    Rng rng(seed);
    ModelParams p = cmert::make_model(cfg, mc, rng);
    FeatureStream s = random_stream(cfg, 60, seed + 10);
    TrainingSample sample = cmert::extract_windows(s, safe_anchor(cfg), cfg);
    auto value = [&](bool g) { return forward_loss(sample, p, cfg, g); };
    auto r = check_gradients(cmert::model_param_list(p), value);
    INFO("seed ", seed, " max_rel_err ", r.max_rel_err, " checked ", r.checked, " skipped ",
         r.skipped);
    CHECK(r.ok(1e-3));
  }
}

TEST_CASE("checkpoint round trip is bit exact") {
  PartitionConfig cfg = mid_partition();
  cfg.delta = 1;
  cfg.distant_future = true;
  ModelConfig mc = mid_model();
  mc.leaky_anticipation = true;
  Rng rng(71);
  ModelParams p = cmert::make_model(cfg, mc, rng);
  std::string path = "ckpt_roundtrip_test.json";
  cmert::save_checkpoint(p, cfg, path);
  cmert::Checkpoint ck = cmert::load_checkpoint(path);
  std::remove(path.c_str());

  CHECK(ck.partition.long_frames == cfg.long_frames);
  CHECK(ck.partition.short_frames == cfg.short_frames);
  CHECK(ck.partition.antic_frames == cfg.antic_frames);
  CHECK(ck.partition.near_past_frames == cfg.near_past_frames);
  CHECK(ck.partition.future_frames == cfg.future_frames);
  CHECK(ck.partition.fps == cfg.fps);
  CHECK(ck.partition.feat_dim == cfg.feat_dim);
  CHECK(ck.partition.num_actions == cfg.num_actions);
  CHECK(ck.partition.delta == cfg.delta);
  CHECK(ck.partition.long_subsample == cfg.long_subsample);
  CHECK(ck.partition.distant_future == cfg.distant_future);
  CHECK(ck.params.cfg.d_model == mc.d_model);
  CHECK(ck.params.cfg.heads == mc.heads);
  CHECK(ck.params.cfg.q_l0 == mc.q_l0);
  CHECK(ck.params.cfg.q_l1 == mc.q_l1);
  CHECK(ck.params.cfg.leaky_anticipation == mc.leaky_anticipation);
  CHECK(ck.params.cfg.use_refinement == mc.use_refinement);

  auto orig = cmert::named_params(p);
  auto loaded = cmert::named_params(ck.params);
  REQUIRE(orig.size() == loaded.size());
  for (size_t k = 0; k < orig.size(); ++k) {
    CHECK(orig[k].first == loaded[k].first);
    REQUIRE(orig[k].second->shape == loaded[k].second->shape);
    bool same = true;
    for (size_t i = 0; i < orig[k].second->data.size(); ++i)
      if (orig[k].second->data[i] != loaded[k].second->data[i]) same = false;
    CHECK(same);
  }

  // loaded parameters behave identically
  FeatureStream s = random_stream(cfg, 200, 73);
  TrainingSample sample = cmert::extract_windows(s, safe_anchor(cfg), cfg);
  Tape t0, t1;
  ForwardOutputs o0 = cmert::forward(t0, sample, p, cfg);
  ForwardOutputs o1 = cmert::forward(t1, sample, ck.params, cfg);
  CHECK(max_abs_diff(t0.val(o0.p_sa_hat), t1.val(o1.p_sa_hat)) == 0.0);
}

TEST_CASE("checkpoint loading rejects malformed files") {
  CHECK_THROWS_AS(cmert::load_checkpoint("no_such_checkpoint.json"), std::runtime_error);
  {
    std::FILE* f = std::fopen("bad_ckpt.json", "w");
    std::fputs("{\"format\":\"something-else\",\"version\":1}", f);
    std::fclose(f);
  }
  CHECK_THROWS_AS(cmert::load_checkpoint("bad_ckpt.json"), std::runtime_error);
  std::remove("bad_ckpt.json");
}

TEST_CASE("first-stage compression cache reproduces the uncached forward") {
  PartitionConfig cfg = mid_partition();
  Rng rng(81);
  ModelParams p = cmert::make_model(cfg, mid_model(), rng);
  FeatureStream s = random_stream(cfg, 200, 83);
  TrainingSample sample = cmert::extract_windows(s, safe_anchor(cfg), cfg);
  Tape t0;
  ForwardOutputs o0 = cmert::forward(t0, sample, p, cfg);
  Tensor cached = t0.val(o0.m_l_prime);
  Tape t1;
  ForwardOutputs o1 = cmert::forward(t1, sample, p, cfg, &cached);
  CHECK(max_abs_diff(t0.val(o0.p_sa_hat), t1.val(o1.p_sa_hat)) == 0.0);
  CHECK(max_abs_diff(t0.val(o0.p_f), t1.val(o1.p_f)) == 0.0);
}
