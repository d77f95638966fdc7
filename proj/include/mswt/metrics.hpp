#pragma once

#include <string>
#include <utility>
#include <vector>

#include "mswt/tensor.hpp"

namespace mswt {

struct Metrics {
  double acc = 0, auc = 0;
  int n_frames = 0, n_videos = 0;
  std::string level;  // "frame" or "video"
};

// Fraction of correct predictions at threshold 0.5 on the positive-class
// score (score >= 0.5 predicts label 1).
double accuracy(const std::vector<double>& scores, const std::vector<int>& labels);

// Area under the ROC curve, Mann-Whitney formulation with tie handling:
// P(score_pos > score_neg) + 0.5 * P(tie). Requires both classes present.
double auc(const std::vector<double>& scores, const std::vector<int>& labels);

// Mean score per video (key = video_id). Returns per-video scores and labels
// ordered by ascending video_id; labels must be constant within a video.
std::pair<std::vector<double>, std::vector<int>> video_level(const std::vector<double>& scores,
                                                             const std::vector<int>& labels,
                                                             const std::vector<int>& video_ids);

// Exact 1-D earth mover's distance between two histograms with equal bin
// counts and width: sum_k |CDF_p(k) - CDF_q(k)| * bin_width. Histograms are
// normalized to unit mass internally; zero-mass input is an error.
double emd_1d(const std::vector<double>& p, const std::vector<double>& q, double bin_width = 1.0);

// Table-style frequency-discrepancy report: one row for the raw images
// ("Ori-Img") and one per (level, band). Distances are mean EMD over pairs,
// computed on `bins`-bin histograms in bin-index units; the histogram range
// per (pair, level, band) spans the union of both images' values, so a global
// rescaling of both sets leaves the report unchanged.
struct EmdReport {
  std::vector<std::pair<std::string, double>> rows;  // ordered as reported
  double at(const std::string& name) const;
};

EmdReport emd_report(const std::vector<Tensor>& real_images,
                     const std::vector<Tensor>& fake_images, int depth = 3, int bins = 64);

}  // namespace mswt
