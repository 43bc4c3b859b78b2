#include "cmert/train.hpp"

#include <cmath>
#include <fstream>
#include <numbers>
#include <stdexcept>

#include "json.hpp"

namespace cmert {

namespace {
constexpr double kBeta1 = 0.9;
constexpr double kBeta2 = 0.999;
constexpr double kEps = 1e-8;
}  // namespace

void TrainConfig::validate() const {
  if (lambda1 < 0.0 || lambda2 < 0.0)
    throw std::invalid_argument("TrainConfig: loss weights must be >= 0");
  if (lr <= 0.0) throw std::invalid_argument("TrainConfig: lr must be > 0");
  if (weight_decay < 0.0) throw std::invalid_argument("TrainConfig: weight_decay must be >= 0");
  if (batch_size < 1) throw std::invalid_argument("TrainConfig: batch_size must be >= 1");
  if (epochs < 0 || warmup_epochs < 0.0)
    throw std::invalid_argument("TrainConfig: epoch counts must be >= 0");
  if (epochs > 0) {
    if (warmup_epochs > epochs)
      throw std::invalid_argument("TrainConfig: warmup_epochs exceeds epochs");
  } else {
    if (total_steps < 1) throw std::invalid_argument("TrainConfig: total_steps must be >= 1");
    if (warmup_steps < 0 || warmup_steps > total_steps)
      throw std::invalid_argument("TrainConfig: warmup_steps must be in [0, total_steps]");
  }
  if (event_sampling && event_anchors < 1)
    throw std::invalid_argument("TrainConfig: event_anchors must be >= 1");
}

TrainConfig preset_train(const std::string& name) {
  TrainConfig c;
  c.batch_size = 32;
  c.epochs = 12;
  if (name == "th14") {
    c.warmup_epochs = 8;
    c.lr = 2e-4;
    c.weight_decay = 5e-5;
  } else if (name == "crosstask") {
    c.warmup_epochs = 5;
    c.lr = 7e-5;
    c.weight_decay = 1e-5;
  } else if (name == "ek100") {
    c.warmup_epochs = 10;
    c.lr = 7e-5;
    c.weight_decay = 1e-4;
    c.event_sampling = true;
  } else {
    throw std::invalid_argument("preset_train: unknown preset '" + name + "'");
  }
  return c;
}

Var cross_entropy_block(Tape& t, Var logits, const std::vector<int>& targets,
                        const std::vector<uint8_t>& ignore) {
  return t.cross_entropy(logits, targets, ignore);
}

TotalLoss total_loss(Tape& t, const ForwardOutputs& out, const TrainingSample& sample,
                     const TrainConfig& cfg) {
  TotalLoss r;
  r.l_sa1 = cross_entropy_block(t, out.p_sa_hat, sample.y_sa, sample.ignore_sa);
  Var l_sa0 = cross_entropy_block(t, out.p_sa, sample.y_sa, sample.ignore_sa);
  bool future_supervised = out.has_future;
  if (future_supervised) {
    bool all_ignored = true;
    for (uint8_t f : sample.ignore_f)
      if (!f) all_ignored = false;
    future_supervised = !all_ignored;
  }
  Var l_f = future_supervised ? cross_entropy_block(t, out.p_f, sample.y_f, sample.ignore_f)
                              : t.input(tensor1(1));
  r.total = t.add(r.l_sa1, t.add(t.scale(l_sa0, cfg.lambda1), t.scale(l_f, cfg.lambda2)));
  r.scalars.l_sa0 = t.val(l_sa0).data[0];
  r.scalars.l_sa1 = t.val(r.l_sa1).data[0];
  r.scalars.l_f = t.val(l_f).data[0];
  r.scalars.total = t.val(r.total).data[0];
  int ts = sample.short_mem.rows();
  const std::vector<double>& rows = t.per_row_loss(r.l_sa1);
  r.scalars.per_position.assign(ts, 0.0);
  for (int i = 0; i < ts; ++i)
    if (!sample.ignore_sa[i]) r.scalars.per_position[i] = rows[i];
  return r;
}

double schedule_lr(double peak, int step, int warmup_steps, int total_steps) {
  if (total_steps < 1) throw std::invalid_argument("schedule_lr: total_steps must be >= 1");
  if (step < 0) step = 0;
  if (warmup_steps > 0 && step < warmup_steps)
    return peak * (step + 1) / static_cast<double>(warmup_steps);
  if (total_steps <= warmup_steps) return peak;
  double progress = static_cast<double>(step - warmup_steps) /
                    static_cast<double>(total_steps - warmup_steps);
  progress = std::min(1.0, std::max(0.0, progress));
  return peak * 0.5 * (1.0 + std::cos(progress * std::numbers::pi));
}

AdamState make_adam_state(const std::vector<TensorPtr>& params) {
  AdamState st;
  st.m.reserve(params.size());
  st.v.reserve(params.size());
  for (const auto& p : params) {
    st.m.emplace_back(p->data.size(), 0.0);
    st.v.emplace_back(p->data.size(), 0.0);
  }
  return st;
}

void optimizer_step(const std::vector<std::pair<std::string, TensorPtr>>& named_params,
                    AdamState& state, double lr, double weight_decay) {
  if (state.m.size() != named_params.size())
    throw std::invalid_argument("optimizer_step: state tracks " + std::to_string(state.m.size()) +
                                " tensors, got " + std::to_string(named_params.size()));
  // Reject bad gradients before touching anything so a failed step never
  // leaves the model half-updated.
  for (const auto& [name, p] : named_params) {
    p->ensure_grad();
    for (double g : p->grad)
      if (!std::isfinite(g))
        throw std::runtime_error("optimizer_step: non-finite gradient in '" + name + "'");
  }
  ++state.step;
  double bc1 = 1.0 - std::pow(kBeta1, static_cast<double>(state.step));
  double bc2 = 1.0 - std::pow(kBeta2, static_cast<double>(state.step));
  for (size_t pi = 0; pi < named_params.size(); ++pi) {
    Tensor& p = *named_params[pi].second;
    if (state.m[pi].size() != p.data.size())
      throw std::invalid_argument("optimizer_step: state size mismatch for '" +
                                  named_params[pi].first + "'");
    for (size_t k = 0; k < p.data.size(); ++k) {
      double g = p.grad[k];
      state.m[pi][k] = kBeta1 * state.m[pi][k] + (1.0 - kBeta1) * g;
      state.v[pi][k] = kBeta2 * state.v[pi][k] + (1.0 - kBeta2) * g * g;
      double mhat = state.m[pi][k] / bc1;
      double vhat = state.v[pi][k] / bc2;
      p.data[k] -= lr * (mhat / (std::sqrt(vhat) + kEps) + weight_decay * p.data[k]);
    }
  }
}

void SyntheticGrammar::validate() const {
  if (num_actions < 1) throw std::invalid_argument("SyntheticGrammar: need at least one action");
  if (long_range_rule && num_actions < 2)
    throw std::invalid_argument("SyntheticGrammar: the long-range rule needs at least two actions");
  if (feat_dim < 1) throw std::invalid_argument("SyntheticGrammar: feat_dim must be >= 1");
  if (noise < 0.0) throw std::invalid_argument("SyntheticGrammar: noise must be >= 0");
  int states = num_actions + 1;
  if (static_cast<int>(transition.size()) != states)
    throw std::invalid_argument("SyntheticGrammar: transition must have " +
                                std::to_string(states) + " rows");
  for (int s = 0; s < states; ++s) {
    if (static_cast<int>(transition[s].size()) != states)
      throw std::invalid_argument("SyntheticGrammar: transition row " + std::to_string(s) +
                                  " has wrong width");
    double sum = 0.0;
    for (double p : transition[s]) {
      if (p < 0.0) throw std::invalid_argument("SyntheticGrammar: negative transition probability");
      sum += p;
    }
    if (std::abs(sum - 1.0) > 1e-9)
      throw std::invalid_argument("SyntheticGrammar: transition row " + std::to_string(s) +
                                  " sums to " + std::to_string(sum));
  }
  if (static_cast<int>(duration.size()) != states)
    throw std::invalid_argument("SyntheticGrammar: need a duration range per state");
  for (auto [lo, hi] : duration)
    if (lo < 1 || hi < lo)
      throw std::invalid_argument("SyntheticGrammar: duration ranges must satisfy 1 <= lo <= hi");
  if (prototypes.shape != std::vector<int>{states, feat_dim})
    throw std::invalid_argument("SyntheticGrammar: prototypes must be [" + std::to_string(states) +
                                " x " + std::to_string(feat_dim) + "]");
  for (int a = 0; a < states; ++a)
    for (int b = a + 1; b < states; ++b) {
      double dist2 = 0.0;
      for (int d = 0; d < feat_dim; ++d) {
        double diff = prototypes.at(a, d) - prototypes.at(b, d);
        dist2 += diff * diff;
      }
      if (dist2 < 1e-12)
        throw std::invalid_argument("SyntheticGrammar: prototypes " + std::to_string(a) + " and " +
                                    std::to_string(b) + " coincide");
    }
}

SyntheticGrammar default_grammar(int num_actions, int feat_dim, double noise,
                                 uint64_t prototype_seed) {
  SyntheticGrammar g;
  g.num_actions = num_actions;
  g.feat_dim = feat_dim;
  g.noise = noise;
  g.long_range_rule = num_actions >= 2;
  int states = num_actions + 1;
  g.transition.assign(states, std::vector<double>(states, 0.0));
  for (int a = 1; a <= num_actions; ++a) g.transition[0][a] = 1.0 / num_actions;
  for (int a = 1; a <= num_actions; ++a) {
    g.transition[a][0] = num_actions > 1 ? 0.5 : 1.0;
    for (int b = 1; b <= num_actions; ++b)
      if (b != a) g.transition[a][b] = 0.5 / (num_actions - 1);
  }
  g.duration.assign(states, {4, 10});
  g.duration[0] = {2, 6};
  Rng proto_rng(prototype_seed);
  g.prototypes = Tensor({states, feat_dim});
  for (double& x : g.prototypes.data) x = proto_rng.normal();
  g.validate();
  return g;
}

FeatureStream generate_stream(const SyntheticGrammar& g, int length, Rng& rng) {
  g.validate();
  if (length < 1) throw std::invalid_argument("generate_stream: length must be >= 1");
  FeatureStream s;
  s.features = Tensor({length, g.feat_dim});
  s.labels.assign(length, 0);
  s.num_actions = g.num_actions;

  std::vector<int> history;  // action identities in order, background excluded
  int state = 0;
  int frame = 0;
  while (frame < length) {
    auto [lo, hi] = g.duration[state];
    int dur = rng.uniform_int(lo, hi);
    for (int i = 0; i < dur && frame < length; ++i, ++frame) {
      s.labels[frame] = state;
      for (int d = 0; d < g.feat_dim; ++d)
        s.features.at(frame, d) = g.prototypes.at(state, d) + g.noise * rng.normal();
    }
    double u = rng.uniform();
    int next = g.num_actions;
    double acc = 0.0;
    for (int cand = 0; cand <= g.num_actions; ++cand) {
      acc += g.transition[state][cand];
      if (u < acc) {
        next = cand;
        break;
      }
    }
    if (next > 0) {
      // The chain decides action vs background; the rule decides which
      // action, so only identities carry the long-range dependency. The map
      // never returns the previous action: a repeat adjacent to it would
      // merge into one label run and silently drop an action from any
      // label-level reading of the stream.
      if (g.long_range_rule && history.size() % 3 == 2) {
        int prev2 = history[history.size() - 2];
        int prev1 = history[history.size() - 1];
        int base = (prev2 - 1 + prev1 - 1) % (g.num_actions - 1);
        next = base + 1 + (base + 1 >= prev1 ? 1 : 0);
      }
      history.push_back(next);
    }
    state = next;
  }
  s.validate();
  return s;
}

TrainResult train_model(ModelParams& params, const std::vector<FeatureStream>& streams,
                        const TrainConfig& tcfg, const PartitionConfig& pcfg,
                        const std::string& log_path) {
  tcfg.validate();
  pcfg.validate();
  if (streams.empty()) throw std::invalid_argument("train_model: need at least one stream");
  for (const FeatureStream& s : streams) s.validate();

  Rng rng(tcfg.seed);
  auto named = named_params(params);
  auto plist = model_param_list(params);
  AdamState state = make_adam_state(plist);

  std::ofstream log_file;
  if (!log_path.empty()) {
    log_file.open(log_path);
    if (!log_file) throw std::runtime_error("train_model: cannot open log file " + log_path);
  }

  auto make_pool = [&]() {
    std::vector<std::pair<int, int>> pool;  // (stream index, anchor)
    for (int si = 0; si < static_cast<int>(streams.size()); ++si) {
      std::vector<int> anchors =
          tcfg.event_sampling ? sample_anchors_event(streams[si], pcfg, rng, tcfg.event_anchors)
                              : sample_anchors_sliding(streams[si], pcfg, rng);
      for (int a : anchors) pool.emplace_back(si, a);
    }
    for (int i = static_cast<int>(pool.size()) - 1; i > 0; --i)
      std::swap(pool[i], pool[rng.uniform_int(0, i)]);
    return pool;
  };

  // Sliding anchors can come back empty when a stream barely covers one
  // short-term window and the drawn offset overshoots; retry with fresh
  // offsets, and give up only when no draw can ever produce an anchor.
  auto refill_pool = [&]() {
    for (int attempt = 0; attempt < 64; ++attempt) {
      std::vector<std::pair<int, int>> pool = make_pool();
      if (!pool.empty()) return pool;
    }
    throw std::invalid_argument(
        "train_model: no anchors; every stream is shorter than one short-term window");
  };

  std::vector<std::pair<int, int>> pool = refill_pool();
  size_t pool_pos = 0;
  int steps_per_epoch =
      (static_cast<int>(pool.size()) + tcfg.batch_size - 1) / tcfg.batch_size;
  int total = tcfg.epochs > 0 ? tcfg.epochs * steps_per_epoch : tcfg.total_steps;
  int warmup = tcfg.epochs > 0
                   ? static_cast<int>(std::lround(tcfg.warmup_epochs * steps_per_epoch))
                   : tcfg.warmup_steps;

  TrainResult result;
  int ts = pcfg.short_frames;
  for (int step = 0; step < total; ++step) {
    if (pool_pos == pool.size()) {
      pool = refill_pool();
      pool_pos = 0;
    }
    int n = static_cast<int>(
        std::min<size_t>(tcfg.batch_size, pool.size() - pool_pos));

    for (auto& tp : plist) tp->zero_grad();
    std::vector<Tape> tapes(n);
    std::vector<TotalLoss> losses;
    losses.reserve(n);
    std::vector<TrainingSample> samples;
    samples.reserve(n);
    bool bad = false;
    for (int b = 0; b < n; ++b) {
      auto [si, anchor] = pool[pool_pos + b];
      samples.push_back(extract_windows(streams[si], anchor, pcfg));
      ForwardOutputs out = forward(tapes[b], samples[b], params, pcfg);
      losses.push_back(total_loss(tapes[b], out, samples[b], tcfg));
      if (!std::isfinite(losses[b].scalars.total)) bad = true;
    }
    if (bad) {
      // no update: the parameters stay at the last completed step
      result.diverged = true;
      break;
    }
    pool_pos += n;
    for (int b = 0; b < n; ++b)
      tapes[b].backward(tapes[b].scale(losses[b].total, 1.0 / n));
    double lr = schedule_lr(tcfg.lr, step, warmup, total);
    optimizer_step(named, state, lr, tcfg.weight_decay);

    LossBreakdown rec;
    rec.per_position.assign(ts, 0.0);
    std::vector<int> counts(ts, 0);
    for (int b = 0; b < n; ++b) {
      rec.l_sa0 += losses[b].scalars.l_sa0;
      rec.l_sa1 += losses[b].scalars.l_sa1;
      rec.l_f += losses[b].scalars.l_f;
      for (int i = 0; i < ts; ++i)
        if (!samples[b].ignore_sa[i]) {
          rec.per_position[i] += losses[b].scalars.per_position[i];
          ++counts[i];
        }
    }
    rec.l_sa0 /= n;
    rec.l_sa1 /= n;
    rec.l_f /= n;
    rec.total = rec.l_sa1 + tcfg.lambda1 * rec.l_sa0 + tcfg.lambda2 * rec.l_f;
    for (int i = 0; i < ts; ++i)
      rec.per_position[i] = counts[i] > 0 ? rec.per_position[i] / counts[i] : 0.0;

    if (log_file) {
      nlohmann::json rj{{"step", step},   {"lr", lr},
                        {"l_sa0", rec.l_sa0}, {"l_sa1", rec.l_sa1},
                        {"l_f", rec.l_f},     {"total", rec.total},
                        {"per_position", rec.per_position}};
      log_file << rj.dump() << "\n";
    }
    result.log.push_back(std::move(rec));
    result.lr_log.push_back(lr);
    result.steps_run = step + 1;
  }
  return result;
}

}  // namespace cmert
