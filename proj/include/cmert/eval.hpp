#pragma once

#include <map>
#include <string>
#include <vector>

#include "cmert/model.hpp"
#include "cmert/partition.hpp"
#include "cmert/tensor.hpp"

namespace cmert {

// Maximal run of one non-background label; frame indices are inclusive.
struct EventSegment {
  int start = 0;
  int end = 0;
  int label = 0;
};

bool operator==(const EventSegment& a, const EventSegment& b);

// Maximal constant-label runs with label != 0, in temporal order.
std::vector<EventSegment> extract_segments(const std::vector<int>& labels);

// Average precision per non-background class that appears in labels. Frames
// are ranked by probs[:, c] descending, ties broken by ascending frame index;
// AP is the mean of precision@k over the positive ranks, in percent.
std::map<int, double> per_class_ap(const Tensor& probs, const std::vector<int>& labels);

// Mean of per_class_ap over the classes present. Throws when no
// non-background label occurs at all.
double per_frame_map(const Tensor& probs, const std::vector<int>& labels);

// Top-5 recall per class (background included): a frame counts as a hit when
// its true label is among its 5 highest-probability classes, ties broken by
// ascending class index. Requires at least 5 classes total.
std::map<int, double> per_class_top5(const Tensor& probs, const std::vector<int>& labels);

// Mean of per_class_top5 over classes with at least one instance.
double top5_recall(const Tensor& probs, const std::vector<int>& labels);

// Intersection over union of two inclusive frame ranges.
double segment_iou(const EventSegment& a, const EventSegment& b);

// Start-point F1: predictions in ascending start order each match the
// earliest-start unmatched ground-truth segment of the same label whose start
// lies within threshold_s * fps frames (inclusive). One-to-one; F1 in
// percent, with the empty-vs-empty case scored 100.
double point_f1(const std::vector<EventSegment>& pred, const std::vector<EventSegment>& gt,
                double threshold_s, double fps);

// Segmentation F1@k: same-label (pred, gt) pairs with IoU >= iou_threshold
// are taken greedily by descending IoU (ties by pred index, then gt index),
// each side matched at most once.
double segment_f1(const std::vector<EventSegment>& pred, const std::vector<EventSegment>& gt,
                  double iou_threshold);

// 100 * (1 - Levenshtein(pred labels, gt labels) / max(len_pred, len_gt)),
// comparing the label sequences in start order; empty vs empty scores 100.
double edit_score(const std::vector<EventSegment>& pred, const std::vector<EventSegment>& gt);

struct MetricReport {
  double per_frame_map = 0.0;
  bool has_top5 = false;  // top-5 recall needs at least 5 classes
  double mean_top5_recall = 0.0;
  double pf1 = 0.0;
  double pf1_threshold_s = 1.0;
  double sf1 = 0.0;
  double sf1_iou = 0.25;
  double edit = 0.0;
  std::map<int, double> ap_per_class;
  std::map<int, double> top5_per_class;

  void validate() const;  // every score lies in [0, 100]
};

// Frame-wise and event-wise scores of per-frame class probabilities against
// ground-truth labels. Predicted segments come from the per-frame argmax.
MetricReport evaluate_detection(const Tensor& probs, const std::vector<int>& labels, double fps,
                                double pf1_threshold_s = 1.0, double sf1_iou = 0.25);

void save_report(const MetricReport& r, const std::string& path);

// Mean refined-detection loss and top-1 accuracy per relative short-term
// position, aggregated over every full short window (stepped by
// anchor_stride) of every stream.
struct PositionDiagnostic {
  std::vector<double> loss;        // mean cross-entropy per position
  std::vector<double> accuracy;    // percent
  std::vector<long long> frames;   // sample count per position
};

PositionDiagnostic per_position_diagnostic(const ModelParams& p,
                                           const std::vector<FeatureStream>& streams,
                                           const PartitionConfig& cfg, int anchor_stride = 1);

void save_position_csv(const PositionDiagnostic& d, const std::string& path);

// Sensitivity of each refined detection logit row to each raw short-term
// input frame: influence[i][j] is the largest |d logit[i, c] / d frame[j, d]|
// over classes c and feature dims d, measured on random inputs. A causal
// model admits no influence from j > i + delta; max_violation is the largest
// such entry. Parameter gradient buffers are used as scratch and cleared.
struct LeakageReport {
  Tensor influence;  // [T_s x T_s]
  int delta = 0;
  double max_violation = 0.0;
  int worst_position = -1;  // i of max_violation, -1 when nothing to report
  int worst_source = -1;    // j of max_violation

  bool causal(double tol = 1e-9) const { return max_violation < tol; }
};

LeakageReport leakage_audit(const ModelParams& p, const PartitionConfig& cfg, uint64_t seed = 0);

void save_leakage_report(const LeakageReport& r, const std::string& path);

}  // namespace cmert
