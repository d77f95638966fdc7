#pragma once

#include <map>
#include <string>
#include <vector>

#include "mswt/data.hpp"
#include "mswt/metrics.hpp"
#include "mswt/model.hpp"

namespace mswt {

struct RunConfig {
  std::string corpus_dir;
  std::string mode = "full";
  int iters = 3000;
  int batch = 24;
  double lr = 1e-4;
  int step_size = 1000;     // learning-rate halving period (iterations)
  uint64_t seed = 7;
  std::string out_dir = ".";
  int eval_cadence = 500;   // validation rows every this many iterations
  std::string eval_split = "val";
  std::string final_split = "test";
};

// Flat "key = value" text; '#' starts a comment. Unknown keys are an error.
std::map<std::string, std::string> parse_config_file(const std::string& path);
void apply_config(RunConfig& cfg, const std::map<std::string, std::string>& kv);

struct TrainResult {
  Metrics final_frame, final_video;
  std::string checkpoint_path, metrics_path;
};

// Full training loop: AdamW + halving schedule, shuffled epochs, per-sample
// horizontal-flip augmentation, periodic evaluation rows, deterministic given
// cfg. Writes out_dir/metrics.csv and out_dir/model.ckpt.
TrainResult train(const RunConfig& cfg);

// Deterministic eval-mode pass over a split: frame- and video-level metrics.
std::pair<Metrics, Metrics> evaluate(MswtModel& m, const CorpusSplit& split, int batch = 24);

// Positive-class probabilities for every item of the split, in item order.
std::vector<double> score_split(MswtModel& m, const CorpusSplit& split, int batch = 24);

// Pairs a split's items (real frame k of pair j <-> fake frame k of pair j)
// and runs the frequency-discrepancy report on them.
EmdReport emd_report_for_split(const CorpusSplit& split, int depth = 3, int bins = 64);
void write_emd_report(const EmdReport& rep, const std::string& path);

// Writes per-level per-head mean-attention maps of an eval-mode forward pass
// as PGM images under out_dir.
void export_attention(MswtModel& m, const Tensor& image3hw, const std::string& out_dir);

// Writes min-max normalized sub-band images (channel means) as PGMs.
void dwt_dump(const Tensor& image3hw, int levels, const std::string& out_dir);

// Small built-in finite-difference smoke checks (CLI `gradcheck`); returns
// true when every probed operation matches central differences.
bool gradcheck_module(const std::string& which, std::string& log);

}  // namespace mswt
