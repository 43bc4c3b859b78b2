#pragma once

// Brute-force restatements of every evaluation metric, written from the
// definitions with none of the shortcuts the library takes (no shared sort
// order, no greedy matching). The metric tests and the acceptance gate both
// judge the fast implementations against these.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <map>
#include <vector>

#include "cmert/eval.hpp"
#include "cmert/rng.hpp"
#include "cmert/tensor.hpp"

namespace testutil {

inline cmert::Tensor random_probs(int frames, int classes, cmert::Rng& rng) {
  cmert::Tensor p = cmert::tensor2(frames, classes);
  for (double& v : p.data) v = rng.uniform();
  return p;
}

inline std::vector<int> random_labels(int frames, int classes, cmert::Rng& rng) {
  std::vector<int> l(frames);
  for (int& v : l) v = rng.uniform_int(0, classes - 1);
  return l;
}

inline std::vector<cmert::EventSegment> random_segments(int max_count, int max_label,
                                                        cmert::Rng& rng) {
  int n = rng.uniform_int(0, max_count);
  std::vector<cmert::EventSegment> segs(n);
  for (cmert::EventSegment& s : segs) {
    s.start = rng.uniform_int(0, 300);
    s.end = s.start + rng.uniform_int(0, 29);
    s.label = rng.uniform_int(1, max_label);
  }
  return segs;
}

// Rank-by-pairwise-comparison AP, no sorting: an independent formulation of
// the same ranking rule (score descending, frame index ascending).
inline double ap_oracle(const std::vector<double>& score, const std::vector<uint8_t>& positive) {
  int n = static_cast<int>(score.size());
  double sum = 0.0;
  int npos = 0;
  for (int i = 0; i < n; ++i) {
    if (!positive[i]) continue;
    int rank = 1, hits = 1;
    for (int q = 0; q < n; ++q) {
      if (q == i) continue;
      bool ahead = score[q] > score[i] || (score[q] == score[i] && q < i);
      if (!ahead) continue;
      ++rank;
      if (positive[q]) ++hits;
    }
    sum += static_cast<double>(hits) / rank;
    ++npos;
  }
  return 100.0 * sum / npos;
}

inline double map_oracle(const cmert::Tensor& probs, const std::vector<int>& labels) {
  double sum = 0.0;
  int classes_present = 0;
  for (int c = 1; c < probs.cols(); ++c) {
    std::vector<double> score(labels.size());
    std::vector<uint8_t> positive(labels.size(), 0);
    int npos = 0;
    for (size_t i = 0; i < labels.size(); ++i) {
      score[i] = probs.at(static_cast<int>(i), c);
      if (labels[i] == c) {
        positive[i] = 1;
        ++npos;
      }
    }
    if (npos == 0) continue;
    sum += ap_oracle(score, positive);
    ++classes_present;
  }
  return sum / classes_present;
}

// Per-frame full sort (probability descending, class ascending), first five
// classes form the hit set; mean recall over classes with any instance,
// background included.
inline double top5_oracle(const cmert::Tensor& probs, const std::vector<int>& labels) {
  std::map<int, std::pair<int, int>> tally;  // class -> {hits, total}
  for (size_t i = 0; i < labels.size(); ++i) {
    std::vector<int> order(probs.cols());
    for (int c = 0; c < probs.cols(); ++c) order[c] = c;
    std::sort(order.begin(), order.end(), [&](int a, int b) {
      double pa = probs.at(static_cast<int>(i), a), pb = probs.at(static_cast<int>(i), b);
      return pa != pb ? pa > pb : a < b;
    });
    bool hit = false;
    for (int k = 0; k < 5; ++k)
      if (order[k] == labels[i]) hit = true;
    auto& [hits, total] = tally[labels[i]];
    hits += hit ? 1 : 0;
    ++total;
  }
  double sum = 0.0;
  for (const auto& [c, ht] : tally) sum += 100.0 * ht.first / static_cast<double>(ht.second);
  return sum / static_cast<double>(tally.size());
}

// Maximum bipartite matching (Kuhn augmenting paths) over the compatibility
// graph; the upper bound every greedy matcher is compared against.
inline int max_matching(const std::vector<std::vector<int>>& adj, int nright) {
  std::vector<int> owner(nright, -1);
  std::function<bool(int, std::vector<uint8_t>&)> augment = [&](int u,
                                                                std::vector<uint8_t>& seen) {
    for (int v : adj[u]) {
      if (seen[v]) continue;
      seen[v] = 1;
      if (owner[v] < 0 || augment(owner[v], seen)) {
        owner[v] = u;
        return true;
      }
    }
    return false;
  };
  int total = 0;
  for (size_t u = 0; u < adj.size(); ++u) {
    std::vector<uint8_t> seen(nright, 0);
    if (augment(static_cast<int>(u), seen)) ++total;
  }
  return total;
}

inline double point_f1_optimal(const std::vector<cmert::EventSegment>& pred,
                               const std::vector<cmert::EventSegment>& gt, double threshold_s,
                               double fps) {
  double window = threshold_s * fps;
  std::vector<std::vector<int>> adj(pred.size());
  for (size_t i = 0; i < pred.size(); ++i)
    for (size_t j = 0; j < gt.size(); ++j)
      if (pred[i].label == gt[j].label && std::abs(pred[i].start - gt[j].start) <= window)
        adj[i].push_back(static_cast<int>(j));
  int tp = max_matching(adj, static_cast<int>(gt.size()));
  if (pred.empty() && gt.empty()) return 100.0;
  return 200.0 * tp / static_cast<double>(pred.size() + gt.size());
}

// Repeated global argmax over free same-label pairs: a from-the-definition
// restatement of "greedy by descending IoU".
inline double segment_f1_oracle(const std::vector<cmert::EventSegment>& pred,
                                const std::vector<cmert::EventSegment>& gt, double threshold) {
  std::vector<uint8_t> pm(pred.size(), 0), gm(gt.size(), 0);
  int tp = 0;
  while (true) {
    double best = 0.0;
    int bp = -1, bg = -1;
    for (size_t i = 0; i < pred.size(); ++i)
      for (size_t j = 0; j < gt.size(); ++j) {
        if (pm[i] || gm[j] || pred[i].label != gt[j].label) continue;
        double iou = cmert::segment_iou(pred[i], gt[j]);
        if (iou >= threshold && iou > best) {
          best = iou;
          bp = static_cast<int>(i);
          bg = static_cast<int>(j);
        }
      }
    if (bp < 0) break;
    pm[bp] = gm[bg] = 1;
    ++tp;
  }
  if (pred.empty() && gt.empty()) return 100.0;
  return 200.0 * tp / static_cast<double>(pred.size() + gt.size());
}

inline int edit_oracle(const std::vector<int>& a, const std::vector<int>& b) {
  std::vector<std::vector<int>> d(a.size() + 1, std::vector<int>(b.size() + 1, 0));
  for (size_t i = 0; i <= a.size(); ++i) d[i][0] = static_cast<int>(i);
  for (size_t j = 0; j <= b.size(); ++j) d[0][j] = static_cast<int>(j);
  for (size_t i = 1; i <= a.size(); ++i)
    for (size_t j = 1; j <= b.size(); ++j)
      d[i][j] = std::min({d[i - 1][j] + 1, d[i][j - 1] + 1,
                          d[i - 1][j - 1] + (a[i - 1] == b[j - 1] ? 0 : 1)});
  return d[a.size()][b.size()];
}

}  // namespace testutil
