#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "mswt/rng.hpp"
#include "mswt/tensor.hpp"

namespace mswt {

// Ellipse in pixel coordinates (semi-axes a,b rotated by theta).
struct FaceGeom {
  double cx = 0, cy = 0, a = 0, b = 0, theta = 0;
};

struct Sample {
  Tensor image;               // (3,H,W), values in [0,1]
  int label = 0;              // 0 real, 1 fake
  std::vector<uint8_t> mask;  // H*W, 1 inside the manipulated region
  int video_id = 0;
  int frame_idx = 0;
  FaceGeom face;
};

struct CorpusSpec {
  uint64_t seed = 7;
  int train = 2000, val = 200, test = 500;  // frames per split, 50/50 labels
  int size = 64;
  double strength = 1.5;                     // manipulation blur sigma
  double region_min = 0.10, region_max = 0.40;  // region area as face fraction
  int octaves = 3;
};

// A generated sample kept at its stored precision: 8-bit planar RGB.
struct CorpusItem {
  std::vector<uint8_t> rgb;  // 3*H*W planar
  int label = 0;
  int video_id = 0;
  int frame_idx = 0;
  std::string rel_path;
};

struct CorpusSplit {
  std::vector<CorpusItem> items;
  int image_size = 0;
  std::string name;
};

struct Corpus {
  CorpusSplit train, val, test;
};

// Single-sample generators (the corpus builder drives the same machinery with
// per-video parameter streams).
Sample gen_real(Rng& rng, int size = 64, int octaves = 3);
Sample gen_fake(const Sample& real, Rng& rng, double strength);

Sample flip_sample(const Sample& s);

// Quantization helpers: images are stored as 8-bit and dequantized to [0,1].
std::vector<uint8_t> quantize_u8(const Tensor& image);
Tensor dequantize_u8(const std::vector<uint8_t>& bytes, int C, int H, int W);

// Binary PPM (P6) / PGM (P5), 8-bit, maxval 255.
void write_ppm(const Tensor& image, const std::string& path);  // (3,H,W)
Tensor read_ppm(const std::string& path);
void write_ppm_raw(const uint8_t* planar_rgb, int H, int W, const std::string& path);
std::vector<uint8_t> read_ppm_raw(const std::string& path, int& H, int& W);
void write_pgm(const std::vector<double>& gray, int H, int W, const std::string& path);

// Builds all three splits under out_dir ({split}/vNNNN_fNN.ppm plus a
// {split}/manifest.csv with lines "path,label,video_id,frame_idx"), and
// returns the same data in memory. Deterministic: a second run with the same
// spec produces byte-identical files.
Corpus make_corpus(const CorpusSpec& spec, const std::string& out_dir);

CorpusSplit load_split(const std::string& corpus_dir, const std::string& split);

// Stack selected items into a training batch; flip[i] mirrors item idx[i]
// horizontally (the only augmentation).
std::pair<Tensor, std::vector<int>> make_batch(const CorpusSplit& split,
                                               const std::vector<int>& idx,
                                               const std::vector<bool>& flip);

// Seed-stream helpers exposed for the stream-disjointness audit.
uint64_t corpus_stream(uint64_t seed, int split_id, int pair_idx, int purpose);
inline constexpr int kStreamBase = 1, kStreamJitter = 2, kStreamNoise = 3, kStreamManip = 4;
inline constexpr int kSplitTrain = 1, kSplitVal = 2, kSplitTest = 3;

}  // namespace mswt
