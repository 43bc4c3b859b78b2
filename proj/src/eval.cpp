#include "cmert/eval.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <numeric>
#include <stdexcept>

#include "cmert/rng.hpp"
#include "json.hpp"

namespace cmert {

namespace {

void check_frame_inputs(const Tensor& probs, const std::vector<int>& labels, const char* who) {
  if (probs.rank() != 2)
    throw std::invalid_argument(std::string(who) + ": probs must be [T x classes], got " +
                                shape_str(probs));
  if (probs.rows() != static_cast<int>(labels.size()))
    throw std::invalid_argument(std::string(who) + ": " + std::to_string(probs.rows()) +
                                " score rows vs " + std::to_string(labels.size()) + " labels");
  for (int l : labels)
    if (l < 0 || l >= probs.cols())
      throw std::invalid_argument(std::string(who) + ": label " + std::to_string(l) +
                                  " outside [0, " + std::to_string(probs.cols() - 1) + "]");
}

double f1_percent(int tp, int fp, int fn) {
  long long denom = 2LL * tp + fp + fn;
  if (denom == 0) return 100.0;  // nothing predicted, nothing to predict
  return 200.0 * tp / static_cast<double>(denom);
}

std::vector<EventSegment> by_start(std::vector<EventSegment> segs) {
  std::stable_sort(segs.begin(), segs.end(),
                   [](const EventSegment& a, const EventSegment& b) { return a.start < b.start; });
  return segs;
}

int levenshtein(const std::vector<int>& a, const std::vector<int>& b) {
  size_t n = b.size();
  std::vector<int> prev(n + 1), cur(n + 1);
  std::iota(prev.begin(), prev.end(), 0);
  for (size_t i = 1; i <= a.size(); ++i) {
    cur[0] = static_cast<int>(i);
    for (size_t j = 1; j <= n; ++j) {
      int sub = prev[j - 1] + (a[i - 1] == b[j - 1] ? 0 : 1);
      cur[j] = std::min({prev[j] + 1, cur[j - 1] + 1, sub});
    }
    std::swap(prev, cur);
  }
  return prev[n];
}

}  // namespace

bool operator==(const EventSegment& a, const EventSegment& b) {
  return a.start == b.start && a.end == b.end && a.label == b.label;
}

std::vector<EventSegment> extract_segments(const std::vector<int>& labels) {
  std::vector<EventSegment> segs;
  for (size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] == 0) continue;
    if (!segs.empty() && segs.back().label == labels[i] &&
        segs.back().end == static_cast<int>(i) - 1) {
      segs.back().end = static_cast<int>(i);
    } else {
      segs.push_back({static_cast<int>(i), static_cast<int>(i), labels[i]});
    }
  }
  return segs;
}

std::map<int, double> per_class_ap(const Tensor& probs, const std::vector<int>& labels) {
  check_frame_inputs(probs, labels, "per_class_ap");
  int t_total = probs.rows();
  std::map<int, double> out;
  std::vector<int> order(t_total);
  for (int c = 1; c < probs.cols(); ++c) {
    int positives = static_cast<int>(std::count(labels.begin(), labels.end(), c));
    if (positives == 0) continue;
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(), [&](int a, int b) {
      double pa = probs.at(a, c), pb = probs.at(b, c);
      if (pa != pb) return pa > pb;
      return a < b;
    });
    int hits = 0;
    double precision_sum = 0.0;
    for (int k = 0; k < t_total; ++k) {
      if (labels[order[k]] != c) continue;
      ++hits;
      precision_sum += static_cast<double>(hits) / (k + 1);
    }
    out[c] = 100.0 * precision_sum / positives;
  }
  return out;
}

double per_frame_map(const Tensor& probs, const std::vector<int>& labels) {
  std::map<int, double> ap = per_class_ap(probs, labels);
  if (ap.empty())
    throw std::invalid_argument("per_frame_map: no non-background label present");
  double sum = 0.0;
  for (const auto& [c, v] : ap) sum += v;
  return sum / static_cast<double>(ap.size());
}

std::map<int, double> per_class_top5(const Tensor& probs, const std::vector<int>& labels) {
  check_frame_inputs(probs, labels, "per_class_top5");
  int classes = probs.cols();
  if (classes < 5)
    throw std::invalid_argument("per_class_top5: needs at least 5 classes, got " +
                                std::to_string(classes));
  std::map<int, std::pair<long long, long long>> tally;  // class -> (hits, instances)
  std::vector<int> rank(classes);
  for (int i = 0; i < probs.rows(); ++i) {
    std::iota(rank.begin(), rank.end(), 0);
    std::partial_sort(rank.begin(), rank.begin() + 5, rank.end(), [&](int a, int b) {
      double pa = probs.at(i, a), pb = probs.at(i, b);
      if (pa != pb) return pa > pb;
      return a < b;
    });
    bool hit = std::find(rank.begin(), rank.begin() + 5, labels[i]) != rank.begin() + 5;
    auto& [hits, instances] = tally[labels[i]];
    hits += hit ? 1 : 0;
    ++instances;
  }
  std::map<int, double> out;
  for (const auto& [c, hi] : tally) out[c] = 100.0 * hi.first / static_cast<double>(hi.second);
  return out;
}

double top5_recall(const Tensor& probs, const std::vector<int>& labels) {
  std::map<int, double> rec = per_class_top5(probs, labels);
  if (rec.empty()) throw std::invalid_argument("top5_recall: no labels");
  double sum = 0.0;
  for (const auto& [c, v] : rec) sum += v;
  return sum / static_cast<double>(rec.size());
}

double segment_iou(const EventSegment& a, const EventSegment& b) {
  int inter = std::min(a.end, b.end) - std::max(a.start, b.start) + 1;
  if (inter <= 0) return 0.0;
  int uni = (a.end - a.start + 1) + (b.end - b.start + 1) - inter;
  return static_cast<double>(inter) / uni;
}

double point_f1(const std::vector<EventSegment>& pred, const std::vector<EventSegment>& gt,
                double threshold_s, double fps) {
  if (threshold_s <= 0.0) throw std::invalid_argument("point_f1: threshold must be positive");
  if (fps <= 0.0) throw std::invalid_argument("point_f1: fps must be positive");
  double window = threshold_s * fps;
  std::vector<EventSegment> ps = by_start(pred), gs = by_start(gt);
  std::vector<uint8_t> used(gs.size(), 0);
  int tp = 0;
  for (const EventSegment& p : ps) {
    for (size_t j = 0; j < gs.size(); ++j) {
      if (used[j] || gs[j].label != p.label) continue;
      if (std::abs(gs[j].start - p.start) <= window) {
        used[j] = 1;
        ++tp;
        break;
      }
    }
  }
  return f1_percent(tp, static_cast<int>(ps.size()) - tp, static_cast<int>(gs.size()) - tp);
}

double segment_f1(const std::vector<EventSegment>& pred, const std::vector<EventSegment>& gt,
                  double iou_threshold) {
  if (iou_threshold <= 0.0 || iou_threshold > 1.0)
    throw std::invalid_argument("segment_f1: IoU threshold must lie in (0, 1]");
  struct Pair {
    double iou;
    int p, g;
  };
  std::vector<Pair> pairs;
  for (size_t i = 0; i < pred.size(); ++i)
    for (size_t j = 0; j < gt.size(); ++j) {
      if (pred[i].label != gt[j].label) continue;
      double iou = segment_iou(pred[i], gt[j]);
      if (iou >= iou_threshold)
        pairs.push_back({iou, static_cast<int>(i), static_cast<int>(j)});
    }
  std::sort(pairs.begin(), pairs.end(), [](const Pair& a, const Pair& b) {
    if (a.iou != b.iou) return a.iou > b.iou;
    if (a.p != b.p) return a.p < b.p;
    return a.g < b.g;
  });
  std::vector<uint8_t> pm(pred.size(), 0), gm(gt.size(), 0);
  int tp = 0;
  for (const Pair& pr : pairs) {
    if (pm[pr.p] || gm[pr.g]) continue;
    pm[pr.p] = gm[pr.g] = 1;
    ++tp;
  }
  return f1_percent(tp, static_cast<int>(pred.size()) - tp, static_cast<int>(gt.size()) - tp);
}

double edit_score(const std::vector<EventSegment>& pred, const std::vector<EventSegment>& gt) {
  std::vector<int> a, b;
  for (const EventSegment& s : by_start(pred)) a.push_back(s.label);
  for (const EventSegment& s : by_start(gt)) b.push_back(s.label);
  size_t longest = std::max(a.size(), b.size());
  if (longest == 0) return 100.0;
  return 100.0 * (1.0 - levenshtein(a, b) / static_cast<double>(longest));
}

void MetricReport::validate() const {
  auto in_range = [](double v) { return v >= 0.0 && v <= 100.0; };
  bool ok = in_range(per_frame_map) && in_range(pf1) && in_range(sf1) && in_range(edit) &&
            (!has_top5 || in_range(mean_top5_recall));
  for (const auto& [c, v] : ap_per_class) ok = ok && in_range(v);
  for (const auto& [c, v] : top5_per_class) ok = ok && in_range(v);
  if (!ok) throw std::logic_error("MetricReport: score outside [0, 100]");
}

MetricReport evaluate_detection(const Tensor& probs, const std::vector<int>& labels, double fps,
                                double pf1_threshold_s, double sf1_iou) {
  check_frame_inputs(probs, labels, "evaluate_detection");
  MetricReport r;
  r.ap_per_class = per_class_ap(probs, labels);
  if (r.ap_per_class.empty())
    throw std::invalid_argument("evaluate_detection: no non-background label present");
  for (const auto& [c, v] : r.ap_per_class) r.per_frame_map += v;
  r.per_frame_map /= static_cast<double>(r.ap_per_class.size());
  if (probs.cols() >= 5) {
    r.has_top5 = true;
    r.top5_per_class = per_class_top5(probs, labels);
    for (const auto& [c, v] : r.top5_per_class) r.mean_top5_recall += v;
    r.mean_top5_recall /= static_cast<double>(r.top5_per_class.size());
  }
  std::vector<int> argmax(labels.size());
  for (int i = 0; i < probs.rows(); ++i) {
    int best = 0;
    for (int c = 1; c < probs.cols(); ++c)
      if (probs.at(i, c) > probs.at(i, best)) best = c;
    argmax[i] = best;
  }
  std::vector<EventSegment> pred = extract_segments(argmax);
  std::vector<EventSegment> truth = extract_segments(labels);
  r.pf1_threshold_s = pf1_threshold_s;
  r.pf1 = point_f1(pred, truth, pf1_threshold_s, fps);
  r.sf1_iou = sf1_iou;
  r.sf1 = segment_f1(pred, truth, sf1_iou);
  r.edit = edit_score(pred, truth);
  r.validate();
  return r;
}

void save_report(const MetricReport& r, const std::string& path) {
  r.validate();
  nlohmann::json j;
  j["per_frame_map"] = r.per_frame_map;
  j["mean_top5_recall"] = r.has_top5 ? nlohmann::json(r.mean_top5_recall) : nlohmann::json();
  j["pf1"] = r.pf1;
  j["pf1_threshold_s"] = r.pf1_threshold_s;
  j["sf1"] = r.sf1;
  j["sf1_iou"] = r.sf1_iou;
  j["edit"] = r.edit;
  for (const auto& [c, v] : r.ap_per_class) j["ap_per_class"][std::to_string(c)] = v;
  for (const auto& [c, v] : r.top5_per_class) j["top5_per_class"][std::to_string(c)] = v;
  std::ofstream f(path);
  if (!f) throw std::runtime_error("save_report: cannot open " + path + " for writing");
  f << j.dump(2) << "\n";
}

PositionDiagnostic per_position_diagnostic(const ModelParams& p,
                                           const std::vector<FeatureStream>& streams,
                                           const PartitionConfig& cfg, int anchor_stride) {
  cfg.validate();
  if (anchor_stride < 1)
    throw std::invalid_argument("per_position_diagnostic: stride must be >= 1");
  int ts = cfg.short_frames;
  PositionDiagnostic d;
  d.loss.assign(ts, 0.0);
  d.accuracy.assign(ts, 0.0);
  d.frames.assign(ts, 0);
  for (const FeatureStream& stream : streams) {
    stream.validate();
    for (int t = ts - 1; t < stream.length(); t += anchor_stride) {
      TrainingSample sample = extract_windows(stream, t, cfg);
      Tape tape;
      ForwardOutputs out = forward(tape, sample, p, cfg);
      Var ce = tape.cross_entropy(out.p_sa_hat, sample.y_sa, sample.ignore_sa);
      const std::vector<double>& row_loss = tape.per_row_loss(ce);
      const Tensor& logits = tape.val(out.p_sa_hat);
      for (int i = 0; i < ts; ++i) {
        if (sample.ignore_sa[i]) continue;
        int best = 0;
        for (int c = 1; c < logits.cols(); ++c)
          if (logits.at(i, c) > logits.at(i, best)) best = c;
        d.loss[i] += row_loss[i];
        d.accuracy[i] += best == sample.y_sa[i] ? 100.0 : 0.0;
        ++d.frames[i];
      }
    }
  }
  bool any = false;
  for (long long n : d.frames) any = any || n > 0;
  if (!any)
    throw std::invalid_argument(
        "per_position_diagnostic: no stream holds a full short-term window");
  for (int i = 0; i < ts; ++i) {
    if (d.frames[i] == 0) continue;
    d.loss[i] /= static_cast<double>(d.frames[i]);
    d.accuracy[i] /= static_cast<double>(d.frames[i]);
  }
  return d;
}

void save_position_csv(const PositionDiagnostic& d, const std::string& path) {
  std::ofstream f(path);
  if (!f) throw std::runtime_error("save_position_csv: cannot open " + path + " for writing");
  f << "position,mean_loss,accuracy_percent,frames\n";
  for (size_t i = 0; i < d.loss.size(); ++i)
    f << i << "," << d.loss[i] << "," << d.accuracy[i] << "," << d.frames[i] << "\n";
}

LeakageReport leakage_audit(const ModelParams& p, const PartitionConfig& cfg, uint64_t seed) {
  cfg.validate();
  int need = cfg.long_frames + cfg.near_past_frames + cfg.short_frames;
  Rng rng(seed);
  FeatureStream stream;
  stream.features = tensor2(need, cfg.feat_dim);
  for (double& v : stream.features.data) v = rng.normal();
  stream.labels.assign(need, 0);
  stream.fps = cfg.fps;
  stream.num_actions = cfg.num_actions;
  TrainingSample sample = extract_windows(stream, need - 1, cfg);
  Tape t;
  ForwardOutputs out = forward(t, sample, p, cfg);
  int ts = cfg.short_frames, classes = cfg.num_actions + 1, d = cfg.feat_dim;
  LeakageReport rep;
  rep.delta = cfg.delta;
  rep.influence = tensor2(ts, ts);
  for (int i = 0; i < ts; ++i)
    for (int c = 0; c < classes; ++c) {
      Var logit = t.sum(t.slice_cols(t.slice_rows(out.p_sa_hat, i, i + 1), c, c + 1));
      t.backward(logit);
      const std::vector<double>& g = t.grad(out.short_input);
      for (int j = 0; j < ts; ++j)
        for (int k = 0; k < d; ++k) {
          double mag = std::abs(g[static_cast<size_t>(j) * d + k]);
          if (mag > rep.influence.at(i, j)) rep.influence.at(i, j) = mag;
        }
    }
  for (const TensorPtr& q : model_param_list(p)) q->zero_grad();  // backward scratch
  for (int i = 0; i < ts; ++i)
    for (int j = i + rep.delta + 1; j < ts; ++j)
      if (rep.influence.at(i, j) > rep.max_violation) {
        rep.max_violation = rep.influence.at(i, j);
        rep.worst_position = i;
        rep.worst_source = j;
      }
  return rep;
}

void save_leakage_report(const LeakageReport& r, const std::string& path) {
  nlohmann::json j;
  j["delta"] = r.delta;
  j["max_violation"] = r.max_violation;
  j["worst_position"] = r.worst_position;
  j["worst_source"] = r.worst_source;
  j["causal"] = r.causal();
  std::vector<std::vector<double>> rows(r.influence.rows());
  for (int i = 0; i < r.influence.rows(); ++i)
    for (int jcol = 0; jcol < r.influence.cols(); ++jcol)
      rows[i].push_back(r.influence.at(i, jcol));
  j["influence"] = rows;
  std::ofstream f(path);
  if (!f) throw std::runtime_error("save_leakage_report: cannot open " + path + " for writing");
  f << j.dump(2) << "\n";
}

}  // namespace cmert
