#pragma once

#include <optional>
#include <vector>

#include "mswt/nn.hpp"
#include "mswt/rng.hpp"
#include "mswt/tensor.hpp"
#include "mswt/wavelet.hpp"

namespace mswt {

// Which functional paths feed the fused output (used by the ablation tests to
// check provenance rather than just shapes).
enum class PathSrc { fsa, cma, sa, dwt };

enum class AblationMode { full, backbone_only, dwt_concat, sa_only, fsa_only, cma_only };

const char* ablation_mode_name(AblationMode m);
AblationMode ablation_mode_from_name(const std::string& name);

// Learnable state of one frequency/spatial fusion block.
//
// High-frequency path: each detail band (LH, HL, HH) goes through its own
// 3x3 conv (3->d) + batchnorm + relu; the three results are concatenated and
// combined by a 1x1 conv (3d->d) into F_H. Spatial path: a bare 1x1 conv
// projects the stage features to d channels (bare so that an identity
// initialisation really is the identity). Two transformer blocks then mix the
// modalities; see fsf_forward.
struct FsfParams {
  Conv2dParams band_convs[3];  // LH, HL, HH
  BatchNorm2d band_bns[3];
  Conv2dParams combine_conv;  // 1x1, 3d -> d
  Conv2dParams down_conv;     // 1x1, Cs -> d
  TransformerParams fsa;
  TransformerParams cma;
  int d = 0;
  int heads = 0;
};

struct FsfProvenance {
  PathSrc o1_src = PathSrc::fsa;
  PathSrc o2_src = PathSrc::cma;
  bool used_attention = true;
};

struct FsfOutput {
  Tensor fused;  // (B, 2d, h, w) = channel-concat(o1, o2)
  Tensor o1, o2;
  std::optional<AttnMaps> attn_fsa, attn_cma;
  FsfProvenance provenance;
};

FsfParams make_fsf_params(int stage_channels, int d, int heads, Rng& rng);

// F_H: fuse the three detail bands into a d-channel feature map.
Tensor prep_high_freq(const WaveletLevel& level, FsfParams& p, bool train);

// F_S: project stage features to d channels (bare 1x1 conv).
Tensor down_channel(const Tensor& feat, const FsfParams& p);

// Frequency-based spatial attention: queries and keys from F_H, values from
// F_S, residual base F_S. Returns O_1 (B,d,h,w) and the attention maps.
std::pair<Tensor, AttnMaps> fsa(const Tensor& F_H, const Tensor& F_S, const FsfParams& p);

// Cross-modality attention: queries from F_S, keys and values from F_H,
// residual base F_S. Returns O_2 (B,d,h,w) and the attention maps.
std::pair<Tensor, AttnMaps> cma(const Tensor& F_S, const Tensor& F_H, const FsfParams& p);

// Full block. `mode` reroutes the paths for the ablation variants:
//   full      -> fused = concat(O_1, O_2)
//   fsa_only  -> concat(O_1, O_1)
//   cma_only  -> concat(O_2, O_2)
//   sa_only   -> self-attention on F_S through the fsa parameters, duplicated
//   dwt_concat-> F_H duplicated, no attention at all
// backbone_only is a model-level mode and is rejected here.
FsfOutput fsf_forward(const Tensor& feat, const WaveletLevel& level, FsfParams& p, bool train,
                      AblationMode mode = AblationMode::full);

}  // namespace mswt
