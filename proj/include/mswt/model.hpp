#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "mswt/fsf.hpp"
#include "mswt/nn.hpp"
#include "mswt/rng.hpp"
#include "mswt/tensor.hpp"

namespace mswt {

// One backbone stage: 2x2 max-pool entry (halves the extent) followed by two
// 3x3 stride-1 conv + batchnorm + relu units.
struct StageParams {
  Conv2dParams conv1, conv2;
  BatchNorm2d bn1, bn2;
};

// Four-stage convolutional backbone with per-stage frequency fusion after
// stages 1-3 and a global-average-pool + affine classifier. Widths are fixed
// at (32,64,128,256); fusion embedding dims/heads at (64,1),(128,2),(320,5).
struct MswtModel {
  std::array<StageParams, 4> stages;
  std::array<FsfParams, 3> fsf;
  std::array<Conv2dParams, 3> merge;  // 1x1: concat(stage_out, fused) -> stage_out
  Tensor cls_w, cls_b;
  AblationMode mode = AblationMode::full;

  // Learnable tensors in a fixed, name-stable order (drives the optimizer
  // and the checkpoint layout).
  std::vector<std::pair<std::string, Tensor*>> named_params();
  std::vector<Tensor*> parameters();
  // Batchnorm running statistics, serialized alongside the parameters.
  std::vector<std::pair<std::string, BnState*>> named_bn_states();
};

inline constexpr int kStageWidths[4] = {32, 64, 128, 256};
inline constexpr int kFsfDims[3] = {64, 128, 320};
inline constexpr int kFsfHeads[3] = {1, 2, 5};
inline constexpr int kMaxTokens = 4096;

// All parameter groups are constructed (and initialized from `seed`) in the
// same fixed order regardless of `mode`, so two models built with the same
// seed share bit-identical weights wherever their wiring overlaps.
MswtModel make_model(uint64_t seed, AblationMode mode = AblationMode::full);

struct ModelOutput {
  Tensor logits;  // (B,2)
  std::array<std::optional<AttnMaps>, 3> attn_fsa, attn_cma;
};

ModelOutput model_forward(const Tensor& image, MswtModel& m, bool train);

int64_t count_params(MswtModel& m);

// Binary checkpoint: magic "MSWT", u32 version=1, u32 tensor count; per
// tensor u16 name length, name bytes, u8 rank, u32 extents, little-endian
// f64 payload. Parameters, batchnorm statistics, and the ablation mode (as
// "meta.ablation_mode") are stored; optimizer state is not.
void save_checkpoint(MswtModel& m, const std::string& path);
MswtModel load_checkpoint(const std::string& path);

}  // namespace mswt
