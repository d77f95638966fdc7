#include "mswt/fsf.hpp"

#include <stdexcept>
#include <string>

namespace mswt {

const char* ablation_mode_name(AblationMode m) {
  switch (m) {
    case AblationMode::full: return "full";
    case AblationMode::backbone_only: return "backbone_only";
    case AblationMode::dwt_concat: return "dwt_concat";
    case AblationMode::sa_only: return "sa_only";
    case AblationMode::fsa_only: return "fsa_only";
    case AblationMode::cma_only: return "cma_only";
  }
  throw std::invalid_argument("ablation_mode_name: bad mode");
}

AblationMode ablation_mode_from_name(const std::string& name) {
  for (AblationMode m : {AblationMode::full, AblationMode::backbone_only, AblationMode::dwt_concat,
                         AblationMode::sa_only, AblationMode::fsa_only, AblationMode::cma_only})
    if (name == ablation_mode_name(m)) return m;
  throw std::invalid_argument("unknown ablation mode: " + name);
}

FsfParams make_fsf_params(int stage_channels, int d, int heads, Rng& rng) {
  FsfParams p;
  p.d = d;
  p.heads = heads;
  for (int i = 0; i < 3; ++i) {
    p.band_convs[i] = make_conv(d, 3, 3, 1, 1, rng);
    p.band_bns[i] = make_bn(d);
  }
  p.combine_conv = make_conv(d, 3 * d, 1, 1, 0, rng);
  p.down_conv = make_conv(d, stage_channels, 1, 1, 0, rng);
  p.fsa = make_transformer_params(d, heads, rng);
  p.cma = make_transformer_params(d, heads, rng);
  return p;
}

Tensor prep_high_freq(const WaveletLevel& level, FsfParams& p, bool train) {
  const Tensor* bands[3] = {&level.lh, &level.hl, &level.hh};
  std::vector<Tensor> mapped;
  mapped.reserve(3);
  for (int i = 0; i < 3; ++i)
    mapped.push_back(relu(batchnorm2d(conv2d(*bands[i], p.band_convs[i]), p.band_bns[i], train)));
  Tensor cat = concat_channel({mapped[0], mapped[1], mapped[2]});
  return conv2d(cat, p.combine_conv);
}

Tensor down_channel(const Tensor& feat, const FsfParams& p) {
  return conv2d(feat, p.down_conv);
}

namespace {

std::pair<Tensor, AttnMaps> run_block(const Tensor& q_map, const Tensor& k_map,
                                      const Tensor& v_map, const Tensor& residual_map,
                                      const TransformerParams& tp) {
  int h = q_map.dim(2), w = q_map.dim(3);
  Tensor q = tokens_from_nchw(q_map);
  Tensor k = tokens_from_nchw(k_map);
  Tensor v = tokens_from_nchw(v_map);
  Tensor r = tokens_from_nchw(residual_map);
  BlockOutput out = transformer_block(q, k, v, r, tp);
  return {nchw_from_tokens(out.out, h, w), std::move(out.attn)};
}

void check_pair(const Tensor& a, const Tensor& b, const char* who) {
  if (a.shape() != b.shape())
    throw std::invalid_argument(std::string(who) + ": operand extents differ (" +
                                shape_str(a.shape()) + " vs " + shape_str(b.shape()) + ")");
}

}  // namespace

std::pair<Tensor, AttnMaps> fsa(const Tensor& F_H, const Tensor& F_S, const FsfParams& p) {
  check_pair(F_H, F_S, "fsa");
  return run_block(F_H, F_H, F_S, F_S, p.fsa);
}

std::pair<Tensor, AttnMaps> cma(const Tensor& F_S, const Tensor& F_H, const FsfParams& p) {
  check_pair(F_S, F_H, "cma");
  return run_block(F_S, F_H, F_H, F_S, p.cma);
}

FsfOutput fsf_forward(const Tensor& feat, const WaveletLevel& level, FsfParams& p, bool train,
                      AblationMode mode) {
  if (mode == AblationMode::backbone_only)
    throw std::invalid_argument("fsf_forward: backbone_only skips fusion entirely");
  if (feat.rank() != 4 || level.lh.rank() != 4)
    throw std::invalid_argument("fsf_forward: inputs must be (B,C,h,w)");
  if (feat.dim(2) != level.lh.dim(2) || feat.dim(3) != level.lh.dim(3))
    throw std::invalid_argument("fsf_forward: sub-band extent " + shape_str(level.lh.shape()) +
                                " does not match stage features " + shape_str(feat.shape()));

  FsfOutput out;
  switch (mode) {
    case AblationMode::full: {
      Tensor F_H = prep_high_freq(level, p, train);
      Tensor F_S = down_channel(feat, p);
      auto [o1, a1] = fsa(F_H, F_S, p);
      auto [o2, a2] = cma(F_S, F_H, p);
      out.o1 = o1;
      out.o2 = o2;
      out.attn_fsa = std::move(a1);
      out.attn_cma = std::move(a2);
      out.provenance = {PathSrc::fsa, PathSrc::cma, true};
      break;
    }
    case AblationMode::fsa_only: {
      Tensor F_H = prep_high_freq(level, p, train);
      Tensor F_S = down_channel(feat, p);
      auto [o1, a1] = fsa(F_H, F_S, p);
      out.o1 = o1;
      out.o2 = o1;
      out.attn_fsa = std::move(a1);
      out.provenance = {PathSrc::fsa, PathSrc::fsa, true};
      break;
    }
    case AblationMode::cma_only: {
      Tensor F_H = prep_high_freq(level, p, train);
      Tensor F_S = down_channel(feat, p);
      auto [o2, a2] = cma(F_S, F_H, p);
      out.o1 = o2;
      out.o2 = o2;
      out.attn_cma = std::move(a2);
      out.provenance = {PathSrc::cma, PathSrc::cma, true};
      break;
    }
    case AblationMode::sa_only: {
      // Plain self-attention on the spatial features, run through the fsa
      // parameters; the frequency path is unused.
      Tensor F_S = down_channel(feat, p);
      auto [o1, a1] = run_block(F_S, F_S, F_S, F_S, p.fsa);
      out.o1 = o1;
      out.o2 = o1;
      out.attn_fsa = std::move(a1);
      out.provenance = {PathSrc::sa, PathSrc::sa, true};
      break;
    }
    case AblationMode::dwt_concat: {
      // Frequency features pass straight through, no attention.
      Tensor F_H = prep_high_freq(level, p, train);
      out.o1 = F_H;
      out.o2 = F_H;
      out.provenance = {PathSrc::dwt, PathSrc::dwt, false};
      break;
    }
    case AblationMode::backbone_only:
      break;  // unreachable
  }
  out.fused = concat_channel({out.o1, out.o2});
  return out;
}

}  // namespace mswt
