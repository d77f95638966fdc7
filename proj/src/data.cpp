#include "mswt/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "mswt/common.hpp"

namespace fs = std::filesystem;

namespace mswt {

namespace {

// ---- procedural texture -------------------------------------------------------

// Value noise: random lattice values in [-1,1], bilinearly interpolated with a
// smoothstep fade. The lattice wraps, so jittered sampling never runs off it.
struct NoiseOctave {
  int cells = 0;
  std::vector<double> lattice;  // cells*cells

  void init(int c, Rng& rng) {
    cells = c;
    lattice.resize((size_t)c * c);
    for (double& v : lattice) v = rng.uniform(-1.0, 1.0);
  }

  double at(double u, double v) const {  // u,v in lattice units
    double fu = std::floor(u), fv = std::floor(v);
    int iu = (int)fu, iv = (int)fv;
    double du = u - fu, dv = v - fv;
    du = du * du * (3.0 - 2.0 * du);
    dv = dv * dv * (3.0 - 2.0 * dv);
    auto wrap = [this](int i) { return ((i % cells) + cells) % cells; };
    int u0 = wrap(iu), u1 = wrap(iu + 1), v0 = wrap(iv), v1 = wrap(iv + 1);
    double a = lattice[(size_t)v0 * cells + u0], b = lattice[(size_t)v0 * cells + u1];
    double c = lattice[(size_t)v1 * cells + u0], d = lattice[(size_t)v1 * cells + u1];
    return (a + (b - a) * du) + ((c + (d - c) * du) - (a + (b - a) * du)) * dv;
  }
};

constexpr int kOctaveCells[3] = {4, 8, 16};
constexpr double kOctaveAmp[3] = {0.30, 0.16, 0.08};
constexpr int kFaceCells = 32;
constexpr double kSensorSigma = 0.02;
constexpr double kFeatherPx = 2.0;

// Everything that is constant across the frames of one video.
struct VideoBase {
  int size = 0;
  std::vector<NoiseOctave> octaves;
  NoiseOctave face_detail;
  double tone[3], gain[3];
  FaceGeom face;
  double face_lift = 0;    // brightness lift inside the face
  double face_amp = 0;     // fine-detail amplitude inside the face
};

VideoBase make_base(Rng& rng, int size, int octave_count) {
  VideoBase b;
  b.size = size;
  b.octaves.resize(octave_count);
  for (int o = 0; o < octave_count; ++o)
    b.octaves[o].init(kOctaveCells[std::min(o, 2)] << (o > 2 ? o - 2 : 0), rng);
  b.face_detail.init(kFaceCells, rng);
  for (int c = 0; c < 3; ++c) b.tone[c] = rng.uniform(0.40, 0.60);
  for (int c = 0; c < 3; ++c) b.gain[c] = rng.uniform(0.6, 1.0);
  b.face.cx = rng.uniform(0.42, 0.58) * size;
  b.face.cy = rng.uniform(0.42, 0.58) * size;
  b.face.a = rng.uniform(0.22, 0.32) * size;
  b.face.b = rng.uniform(0.26, 0.36) * size;
  b.face.theta = rng.uniform(0.0, 3.14159265358979323846);
  b.face_lift = rng.uniform(0.04, 0.10);
  b.face_amp = rng.uniform(0.10, 0.16);
  return b;
}

// Normalized ellipse coordinate: <1 inside. Also yields an approximate signed
// distance (in pixels) to the boundary for feathering.
double ellipse_sdist(const FaceGeom& e, double x, double y) {
  double dx = x - e.cx, dy = y - e.cy;
  double ct = std::cos(e.theta), st = std::sin(e.theta);
  double u = dx * ct + dy * st, v = -dx * st + dy * ct;
  double q = (u / e.a) * (u / e.a) + (v / e.b) * (v / e.b);
  return (1.0 - q) * 0.5 * std::min(e.a, e.b);  // >0 inside, approx px units
}

double smoothstep01(double t) {
  t = std::clamp(t, 0.0, 1.0);
  return t * t * (3.0 - 2.0 * t);
}

// Renders one frame at the given sampling jitter; appends per-pixel sensor
// noise from `noise_rng`. Output planar (3,H,W) doubles in [0,1].
std::vector<double> render_frame(const VideoBase& b, double jx, double jy, double bright,
                                 Rng& noise_rng) {
  int S = b.size;
  std::vector<double> img((size_t)3 * S * S);
  for (int y = 0; y < S; ++y)
    for (int x = 0; x < S; ++x) {
      double px = x + jx, py = y + jy;
      double L = 0.0;
      for (size_t o = 0; o < b.octaves.size(); ++o) {
        double scale = (double)b.octaves[o].cells / S;
        L += kOctaveAmp[std::min<size_t>(o, 2)] * b.octaves[o].at(px * scale, py * scale);
      }
      double fd = ellipse_sdist(b.face, x, y);  // face fixed in the frame
      double fw = smoothstep01(fd / kFeatherPx + 0.5);
      if (fw > 0.0) {
        double scale = (double)kFaceCells / S;
        L += fw * (b.face_lift + b.face_amp * b.face_detail.at(px * scale, py * scale));
      }
      for (int c = 0; c < 3; ++c) {
        double v = (b.tone[c] + b.gain[c] * L) * bright;
        img[((size_t)c * S + y) * S + x] = v;
      }
    }
  for (double& v : img) v = std::clamp(v + kSensorSigma * noise_rng.gauss(), 0.0, 1.0);
  return img;
}

struct ManipParams {
  FaceGeom region;
  double delta = 0;
  double sigma = 0;
};

ManipParams draw_manip(Rng& rng, const FaceGeom& face, double strength, double fmin, double fmax) {
  ManipParams m;
  double f = rng.uniform(fmin, fmax);
  double aspect = rng.uniform(0.8, 1.25);
  m.region.a = face.a * std::sqrt(f) * aspect;
  m.region.b = face.b * std::sqrt(f) / aspect;
  double u = rng.uniform(0.0, 0.5), ang = rng.uniform(0.0, 2.0 * 3.14159265358979323846);
  double ox = u * face.a * std::cos(ang), oy = u * face.b * std::sin(ang);
  double ct = std::cos(face.theta), st = std::sin(face.theta);
  m.region.cx = face.cx + ox * ct - oy * st;
  m.region.cy = face.cy + ox * st + oy * ct;
  m.region.theta = rng.uniform(0.0, 3.14159265358979323846);
  // Mean shift scales with the blur strength so that strength -> 0 makes the
  // whole manipulation vanish (at the default strength 1.5 this is +-0.015).
  m.delta = strength * rng.uniform(-0.01, 0.01);
  m.sigma = strength;
  return m;
}

std::vector<double> gauss_blur(const std::vector<double>& img, int S, double sigma) {
  int R = std::max(1, (int)std::ceil(3.0 * sigma));
  std::vector<double> w(2 * R + 1);
  double sum = 0.0;
  for (int k = -R; k <= R; ++k) sum += (w[k + R] = std::exp(-0.5 * k * k / (sigma * sigma)));
  for (double& v : w) v /= sum;
  std::vector<double> tmp(img.size()), out(img.size());
  for (int c = 0; c < 3; ++c) {
    const double* src = img.data() + (size_t)c * S * S;
    double* t = tmp.data() + (size_t)c * S * S;
    for (int y = 0; y < S; ++y)
      for (int x = 0; x < S; ++x) {
        double acc = 0.0;
        for (int k = -R; k <= R; ++k)
          acc += w[k + R] * src[(size_t)y * S + std::clamp(x + k, 0, S - 1)];
        t[(size_t)y * S + x] = acc;
      }
    double* o = out.data() + (size_t)c * S * S;
    for (int y = 0; y < S; ++y)
      for (int x = 0; x < S; ++x) {
        double acc = 0.0;
        for (int k = -R; k <= R; ++k)
          acc += w[k + R] * t[(size_t)std::clamp(y + k, 0, S - 1) * S + x];
        o[(size_t)y * S + x] = acc;
      }
  }
  return out;
}

// Blends the blurred+shifted version inside the feathered region. Pixels with
// zero weight are copied verbatim (bit-identical to the source frame).
std::vector<double> apply_manip(const std::vector<double>& real, int S, const ManipParams& m,
                                std::vector<uint8_t>* mask_out) {
  std::vector<double> blurred = gauss_blur(real, S, m.sigma);
  std::vector<double> out(real.size());
  if (mask_out) mask_out->assign((size_t)S * S, 0);
  for (int y = 0; y < S; ++y)
    for (int x = 0; x < S; ++x) {
      double sd = ellipse_sdist(m.region, x, y);
      double w = smoothstep01(sd / kFeatherPx);
      size_t pi = (size_t)y * S + x;
      if (sd > 0.0 && mask_out) (*mask_out)[pi] = 1;
      for (int c = 0; c < 3; ++c) {
        size_t i = (size_t)c * S * S + pi;
        out[i] = w > 0.0
                     ? std::clamp((1.0 - w) * real[i] + w * (blurred[i] + m.delta), 0.0, 1.0)
                     : real[i];
      }
    }
  return out;
}

Tensor tensor_from_planar(const std::vector<double>& img, int S) {
  Tensor t = Tensor::zeros({3, S, S});
  std::memcpy(t.data(), img.data(), img.size() * sizeof(double));
  return t;
}

}  // namespace

// ---- single-sample API -------------------------------------------------------

Sample gen_real(Rng& rng, int size, int octaves) {
  VideoBase base = make_base(rng, size, octaves);
  std::vector<double> img = render_frame(base, 0.0, 0.0, 1.0, rng);
  Sample s;
  s.image = tensor_from_planar(img, size);
  s.label = 0;
  s.mask.assign((size_t)size * size, 0);
  s.face = base.face;
  return s;
}

Sample gen_fake(const Sample& real, Rng& rng, double strength) {
  if (real.label != 0) throw std::invalid_argument("gen_fake: source must be a real sample");
  if (strength <= 0.0) throw std::invalid_argument("gen_fake: strength must be positive");
  int S = real.image.dim(1);
  ManipParams m = draw_manip(rng, real.face, strength, 0.10, 0.40);
  std::vector<double> src(real.image.data(), real.image.data() + real.image.numel());
  Sample f;
  f.mask.clear();
  std::vector<double> out = apply_manip(src, S, m, &f.mask);
  f.image = tensor_from_planar(out, S);
  f.label = 1;
  f.face = real.face;
  f.video_id = real.video_id;
  f.frame_idx = real.frame_idx;
  return f;
}

Sample flip_sample(const Sample& s) {
  int H = s.image.dim(1), W = s.image.dim(2);
  Sample out = s;
  out.image = Tensor::zeros({3, H, W});
  for (int c = 0; c < 3; ++c)
    for (int y = 0; y < H; ++y)
      for (int x = 0; x < W; ++x)
        out.image.data()[((size_t)c * H + y) * W + x] =
            s.image.data()[((size_t)c * H + y) * W + (W - 1 - x)];
  for (int y = 0; y < H; ++y)
    for (int x = 0; x < W; ++x) out.mask[(size_t)y * W + x] = s.mask[(size_t)y * W + (W - 1 - x)];
  return out;
}

// ---- quantization --------------------------------------------------------------

std::vector<uint8_t> quantize_u8(const Tensor& image) {
  std::vector<uint8_t> out(image.numel());
  const double* p = image.data();
  for (int64_t i = 0; i < image.numel(); ++i)
    out[i] = (uint8_t)std::lround(std::clamp(p[i], 0.0, 1.0) * 255.0);
  return out;
}

Tensor dequantize_u8(const std::vector<uint8_t>& bytes, int C, int H, int W) {
  if ((int64_t)bytes.size() != (int64_t)C * H * W)
    throw std::invalid_argument("dequantize_u8: size mismatch");
  Tensor t = Tensor::zeros({C, H, W});
  for (size_t i = 0; i < bytes.size(); ++i) t.data()[i] = bytes[i] / 255.0;
  return t;
}

// ---- PPM / PGM -----------------------------------------------------------------

void write_ppm_raw(const uint8_t* planar_rgb, int H, int W, const std::string& path) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw data_error("write_ppm: cannot open " + path);
  os << "P6\n" << W << " " << H << "\n255\n";
  std::vector<uint8_t> row((size_t)W * 3);
  for (int y = 0; y < H; ++y) {
    for (int x = 0; x < W; ++x)
      for (int c = 0; c < 3; ++c) row[(size_t)x * 3 + c] = planar_rgb[((size_t)c * H + y) * W + x];
    os.write(reinterpret_cast<const char*>(row.data()), (std::streamsize)row.size());
  }
  if (!os) throw data_error("write_ppm: write failed for " + path);
}

void write_ppm(const Tensor& image, const std::string& path) {
  if (image.rank() != 3 || image.dim(0) != 3)
    throw std::invalid_argument("write_ppm: image must be (3,H,W)");
  std::vector<uint8_t> q = quantize_u8(image);
  write_ppm_raw(q.data(), image.dim(1), image.dim(2), path);
}

namespace {

// Reads one whitespace-delimited token, skipping '#' comments (netpbm allows
// comments anywhere in the header).
std::string next_token(std::istream& is) {
  std::string tok;
  int ch;
  while ((ch = is.get()) != EOF) {
    if (ch == '#') {
      while ((ch = is.get()) != EOF && ch != '\n') {
      }
      continue;
    }
    if (std::isspace(ch)) {
      if (!tok.empty()) return tok;
      continue;
    }
    tok.push_back((char)ch);
  }
  return tok;
}

int parse_dim(const std::string& tok, const std::string& path) {
  if (tok.empty() || tok.find_first_not_of("0123456789") != std::string::npos)
    throw data_error("read_ppm: malformed header in " + path);
  long v = std::strtol(tok.c_str(), nullptr, 10);
  if (v <= 0 || v > 1 << 20) throw data_error("read_ppm: bad dimension in " + path);
  return (int)v;
}

}  // namespace

std::vector<uint8_t> read_ppm_raw(const std::string& path, int& H, int& W) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw data_error("read_ppm: cannot open " + path);
  if (next_token(is) != "P6") throw data_error("read_ppm: not a P6 file: " + path);
  W = parse_dim(next_token(is), path);
  H = parse_dim(next_token(is), path);
  if (next_token(is) != "255") throw data_error("read_ppm: unsupported maxval in " + path);
  // The single whitespace after maxval was consumed by the tokenizer.
  std::vector<uint8_t> inter((size_t)H * W * 3);
  is.read(reinterpret_cast<char*>(inter.data()), (std::streamsize)inter.size());
  if (is.gcount() != (std::streamsize)inter.size())
    throw data_error("read_ppm: truncated payload in " + path);
  std::vector<uint8_t> planar(inter.size());
  for (int y = 0; y < H; ++y)
    for (int x = 0; x < W; ++x)
      for (int c = 0; c < 3; ++c)
        planar[((size_t)c * H + y) * W + x] = inter[((size_t)y * W + x) * 3 + c];
  return planar;
}

Tensor read_ppm(const std::string& path) {
  int H = 0, W = 0;
  std::vector<uint8_t> planar = read_ppm_raw(path, H, W);
  return dequantize_u8(planar, 3, H, W);
}

void write_pgm(const std::vector<double>& gray, int H, int W, const std::string& path) {
  if ((int64_t)gray.size() != (int64_t)H * W)
    throw std::invalid_argument("write_pgm: size mismatch");
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw data_error("write_pgm: cannot open " + path);
  os << "P5\n" << W << " " << H << "\n255\n";
  std::vector<uint8_t> bytes(gray.size());
  for (size_t i = 0; i < gray.size(); ++i)
    bytes[i] = (uint8_t)std::lround(std::clamp(gray[i], 0.0, 1.0) * 255.0);
  os.write(reinterpret_cast<const char*>(bytes.data()), (std::streamsize)bytes.size());
  if (!os) throw data_error("write_pgm: write failed for " + path);
}

// ---- corpus ---------------------------------------------------------------------

uint64_t corpus_stream(uint64_t seed, int split_id, int pair_idx, int purpose) {
  return stream_seed({seed, (uint64_t)split_id, (uint64_t)pair_idx, (uint64_t)purpose});
}

namespace {

CorpusSplit build_split(const CorpusSpec& spec, int split_id, const std::string& name,
                        int count, const std::string& out_dir) {
  if (count < 2) throw std::invalid_argument("make_corpus: split count must be >= 2");
  if (count % 2) throw std::invalid_argument("make_corpus: split count must be even");
  CorpusSplit split;
  split.name = name;
  split.image_size = spec.size;
  int per_class = count / 2;

  fs::create_directories(fs::path(out_dir) / name);
  std::ofstream manifest(fs::path(out_dir) / name / "manifest.csv",
                         std::ios::binary | std::ios::trunc);
  if (!manifest) throw data_error("make_corpus: cannot write manifest for " + name);

  int pair_idx = 0;
  for (int done = 0; done < per_class; done += 10, ++pair_idx) {
    int frames = std::min(10, per_class - done);
    Rng base_rng(corpus_stream(spec.seed, split_id, pair_idx, kStreamBase));
    Rng jitter_rng(corpus_stream(spec.seed, split_id, pair_idx, kStreamJitter));
    Rng noise_rng(corpus_stream(spec.seed, split_id, pair_idx, kStreamNoise));
    Rng manip_rng(corpus_stream(spec.seed, split_id, pair_idx, kStreamManip));

    VideoBase base = make_base(base_rng, spec.size, spec.octaves);
    ManipParams manip =
        draw_manip(manip_rng, base.face, spec.strength, spec.region_min, spec.region_max);

    int real_vid = 2 * pair_idx, fake_vid = 2 * pair_idx + 1;
    for (int fi = 0; fi < frames; ++fi) {
      double jx = jitter_rng.uniform(-1.5, 1.5);
      double jy = jitter_rng.uniform(-1.5, 1.5);
      double bright = jitter_rng.uniform(0.99, 1.01);
      std::vector<double> real = render_frame(base, jx, jy, bright, noise_rng);
      std::vector<double> fake = apply_manip(real, spec.size, manip, nullptr);

      for (int which = 0; which < 2; ++which) {
        CorpusItem item;
        item.label = which;
        item.video_id = which ? fake_vid : real_vid;
        item.frame_idx = fi;
        const std::vector<double>& img = which ? fake : real;
        item.rgb.resize(img.size());
        for (size_t i = 0; i < img.size(); ++i)
          item.rgb[i] = (uint8_t)std::lround(std::clamp(img[i], 0.0, 1.0) * 255.0);
        char buf[64];
        std::snprintf(buf, sizeof(buf), "v%04d_f%02d.ppm", item.video_id, fi);
        item.rel_path = name + "/" + buf;
        write_ppm_raw(item.rgb.data(), spec.size, spec.size,
                      (fs::path(out_dir) / item.rel_path).string());
        manifest << item.rel_path << "," << item.label << "," << item.video_id << ","
                 << item.frame_idx << "\n";
        split.items.push_back(std::move(item));
      }
    }
  }
  if (!manifest) throw data_error("make_corpus: manifest write failed for " + name);
  return split;
}

}  // namespace

Corpus make_corpus(const CorpusSpec& spec, const std::string& out_dir) {
  if (spec.size < 8 || spec.size % 8)
    throw std::invalid_argument("make_corpus: image size must be a positive multiple of 8");
  if (spec.strength < 0.5 || spec.strength > 3.0)
    throw std::invalid_argument("make_corpus: strength must be in [0.5, 3.0]");
  if (spec.octaves < 1 || spec.octaves > 3)
    throw std::invalid_argument("make_corpus: octave count must be 1..3");
  fs::create_directories(out_dir);
  Corpus c;
  c.train = build_split(spec, kSplitTrain, "train", spec.train, out_dir);
  c.val = build_split(spec, kSplitVal, "val", spec.val, out_dir);
  c.test = build_split(spec, kSplitTest, "test", spec.test, out_dir);
  return c;
}

CorpusSplit load_split(const std::string& corpus_dir, const std::string& split) {
  CorpusSplit s;
  s.name = split;
  std::ifstream manifest(fs::path(corpus_dir) / split / "manifest.csv");
  if (!manifest) throw data_error("load_split: no manifest for split " + split + " in " +
                                  corpus_dir);
  std::string line;
  while (std::getline(manifest, line)) {
    if (line.empty()) continue;
    std::istringstream ls(line);
    CorpusItem item;
    std::string label, vid, fidx;
    if (!std::getline(ls, item.rel_path, ',') || !std::getline(ls, label, ',') ||
        !std::getline(ls, vid, ',') || !std::getline(ls, fidx))
      throw data_error("load_split: malformed manifest line: " + line);
    try {
      item.label = std::stoi(label);
      item.video_id = std::stoi(vid);
      item.frame_idx = std::stoi(fidx);
    } catch (const std::exception&) {
      throw data_error("load_split: malformed manifest line: " + line);
    }
    int H = 0, W = 0;
    item.rgb = read_ppm_raw((fs::path(corpus_dir) / item.rel_path).string(), H, W);
    if (H != W) throw data_error("load_split: non-square image " + item.rel_path);
    if (s.image_size == 0) s.image_size = H;
    if (H != s.image_size) throw data_error("load_split: inconsistent image sizes");
    s.items.push_back(std::move(item));
  }
  if (s.items.empty()) throw data_error("load_split: empty split " + split);
  return s;
}

std::pair<Tensor, std::vector<int>> make_batch(const CorpusSplit& split,
                                               const std::vector<int>& idx,
                                               const std::vector<bool>& flip) {
  if (idx.empty()) throw std::invalid_argument("make_batch: empty index list");
  if (!flip.empty() && flip.size() != idx.size())
    throw std::invalid_argument("make_batch: flip mask size mismatch");
  int S = split.image_size;
  int B = (int)idx.size();
  Tensor x = Tensor::zeros({B, 3, S, S});
  std::vector<int> labels(B);
  for (int b = 0; b < B; ++b) {
    const CorpusItem& item = split.items.at(idx[b]);
    labels[b] = item.label;
    double* dst = x.data() + (int64_t)b * 3 * S * S;
    bool fl = !flip.empty() && flip[b];
    for (int c = 0; c < 3; ++c)
      for (int y = 0; y < S; ++y)
        for (int xx = 0; xx < S; ++xx)
          dst[((int64_t)c * S + y) * S + xx] =
              item.rgb[((size_t)c * S + y) * S + (fl ? S - 1 - xx : xx)] / 255.0;
  }
  return {x, labels};
}

}  // namespace mswt
