#include "mswt/metrics.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <map>
#include <numeric>
#include <stdexcept>

#include "mswt/common.hpp"
#include "mswt/wavelet.hpp"

namespace mswt {

namespace {

void check_scored(const std::vector<double>& scores, const std::vector<int>& labels) {
  if (scores.size() != labels.size() || scores.empty())
    throw std::invalid_argument("metrics: scores/labels size mismatch or empty");
  for (int y : labels)
    if (y != 0 && y != 1) throw std::invalid_argument("metrics: labels must be 0/1");
}

}  // namespace

double accuracy(const std::vector<double>& scores, const std::vector<int>& labels) {
  check_scored(scores, labels);
  int64_t hit = 0;
  for (size_t i = 0; i < scores.size(); ++i) hit += (scores[i] >= 0.5 ? 1 : 0) == labels[i];
  return (double)hit / (double)scores.size();
}

double auc(const std::vector<double>& scores, const std::vector<int>& labels) {
  check_scored(scores, labels);
  size_t n = scores.size();
  int64_t n1 = std::count(labels.begin(), labels.end(), 1);
  int64_t n0 = (int64_t)n - n1;
  if (n0 == 0 || n1 == 0) throw std::invalid_argument("auc: both classes required");

  std::vector<size_t> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  std::sort(idx.begin(), idx.end(),
            [&](size_t a, size_t b) { return scores[a] < scores[b]; });

  // Average ranks across tie groups; ranks are 1-based. Ranks are integers or
  // half-integers and counts are small, so everything below is exact in f64.
  double rank_sum_pos = 0.0;
  size_t i = 0;
  while (i < n) {
    size_t j = i;
    while (j + 1 < n && scores[idx[j + 1]] == scores[idx[i]]) ++j;
    double avg_rank = 0.5 * (double)((i + 1) + (j + 1));
    for (size_t k = i; k <= j; ++k)
      if (labels[idx[k]] == 1) rank_sum_pos += avg_rank;
    i = j + 1;
  }
  return (rank_sum_pos - 0.5 * (double)n1 * (double)(n1 + 1)) / ((double)n0 * (double)n1);
}

std::pair<std::vector<double>, std::vector<int>> video_level(const std::vector<double>& scores,
                                                             const std::vector<int>& labels,
                                                             const std::vector<int>& video_ids) {
  check_scored(scores, labels);
  if (video_ids.size() != scores.size())
    throw std::invalid_argument("video_level: video_ids size mismatch");
  std::map<int, std::pair<double, int64_t>> sums;  // vid -> (sum, count)
  std::map<int, int> vid_label;
  for (size_t i = 0; i < scores.size(); ++i) {
    auto& [s, c] = sums[video_ids[i]];
    s += scores[i];
    c += 1;
    auto [it, inserted] = vid_label.emplace(video_ids[i], labels[i]);
    if (!inserted && it->second != labels[i])
      throw std::invalid_argument("video_level: inconsistent labels within video " +
                                  std::to_string(video_ids[i]));
  }
  std::vector<double> vs;
  std::vector<int> vl;
  for (auto& [vid, sc] : sums) {
    vs.push_back(sc.first / (double)sc.second);
    vl.push_back(vid_label[vid]);
  }
  return {vs, vl};
}

double emd_1d(const std::vector<double>& p, const std::vector<double>& q, double bin_width) {
  if (p.size() != q.size() || p.empty())
    throw std::invalid_argument("emd_1d: histograms must be non-empty and equal length");
  if (bin_width <= 0) throw std::invalid_argument("emd_1d: bin width must be positive");
  double mp = 0, mq = 0;
  for (double v : p) {
    if (v < 0) throw std::invalid_argument("emd_1d: negative mass");
    mp += v;
  }
  for (double v : q) {
    if (v < 0) throw std::invalid_argument("emd_1d: negative mass");
    mq += v;
  }
  if (mp == 0 || mq == 0) throw std::invalid_argument("emd_1d: zero-mass histogram");
  double cdf_diff = 0, dist = 0;
  for (size_t k = 0; k + 1 <= p.size(); ++k) {
    cdf_diff += p[k] / mp - q[k] / mq;
    if (k + 1 < p.size()) dist += std::abs(cdf_diff);  // last term is 0 by normalization
  }
  return dist * bin_width;
}

namespace {

// Histogram of `vals` over [lo,hi] with the top edge inclusive.
std::vector<double> histogram(const std::vector<double>& vals, double lo, double hi, int bins) {
  std::vector<double> h(bins, 0.0);
  if (hi <= lo) {  // degenerate range: all values identical
    h[0] = (double)vals.size();
    return h;
  }
  double inv = bins / (hi - lo);
  for (double v : vals) {
    int b = (int)((v - lo) * inv);
    h[std::clamp(b, 0, bins - 1)] += 1.0;
  }
  return h;
}

std::vector<double> tensor_values(const Tensor& t) {
  return std::vector<double>(t.data(), t.data() + t.numel());
}

double paired_emd(const std::vector<double>& a, const std::vector<double>& b, int bins) {
  double lo = a[0], hi = a[0];
  for (double v : a) {
    lo = std::min(lo, v);
    hi = std::max(hi, v);
  }
  for (double v : b) {
    lo = std::min(lo, v);
    hi = std::max(hi, v);
  }
  return emd_1d(histogram(a, lo, hi, bins), histogram(b, lo, hi, bins), 1.0);
}

}  // namespace

double EmdReport::at(const std::string& name) const {
  for (auto& [n, v] : rows)
    if (n == name) return v;
  throw std::invalid_argument("EmdReport: no row named " + name);
}

EmdReport emd_report(const std::vector<Tensor>& real_images,
                     const std::vector<Tensor>& fake_images, int depth, int bins) {
  if (real_images.size() != fake_images.size() || real_images.empty())
    throw std::invalid_argument("emd_report: sets must be paired and non-empty");
  if (depth < 1 || bins < 2) throw std::invalid_argument("emd_report: bad depth/bins");

  const char* band_names[4] = {"LL", "LH", "HL", "HH"};
  size_t n = real_images.size();
  double ori = 0.0;
  std::vector<std::array<double, 4>> level_sums(depth, {0, 0, 0, 0});

  for (size_t i = 0; i < n; ++i) {
    const Tensor& r = real_images[i];
    const Tensor& f = fake_images[i];
    if (r.rank() != 3 || f.shape() != r.shape())
      throw std::invalid_argument("emd_report: images must be (C,H,W) and pairwise same shape");
    ori += paired_emd(tensor_values(r), tensor_values(f), bins);

    Shape batched = {1, r.dim(0), r.dim(1), r.dim(2)};
    WaveletPyramid pr = decompose(reshape(r, batched), depth);
    WaveletPyramid pf = decompose(reshape(f, batched), depth);
    for (int l = 0; l < depth; ++l) {
      const Tensor* rb[4] = {&pr.levels[l].ll, &pr.levels[l].lh, &pr.levels[l].hl,
                             &pr.levels[l].hh};
      const Tensor* fb[4] = {&pf.levels[l].ll, &pf.levels[l].lh, &pf.levels[l].hl,
                             &pf.levels[l].hh};
      for (int b = 0; b < 4; ++b)
        level_sums[l][b] += paired_emd(tensor_values(*rb[b]), tensor_values(*fb[b]), bins);
    }
  }

  EmdReport rep;
  rep.rows.emplace_back("Ori-Img", ori / (double)n);
  for (int l = 0; l < depth; ++l)
    for (int b = 0; b < 4; ++b)
      rep.rows.emplace_back("L" + std::to_string(l + 1) + " " + band_names[b],
                            level_sums[l][b] / (double)n);
  return rep;
}

}  // namespace mswt
