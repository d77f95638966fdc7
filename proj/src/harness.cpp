#include "mswt/harness.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <sstream>

#include "mswt/common.hpp"
#include "mswt/wavelet.hpp"

namespace fs = std::filesystem;

namespace mswt {

// ---- config ---------------------------------------------------------------------

std::map<std::string, std::string> parse_config_file(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw data_error("config: cannot open " + path);
  auto trim = [](std::string s) {
    size_t a = s.find_first_not_of(" \t\r");
    size_t b = s.find_last_not_of(" \t\r");
    return a == std::string::npos ? std::string() : s.substr(a, b - a + 1);
  };
  std::map<std::string, std::string> kv;
  std::string line;
  int lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (auto h = line.find('#'); h != std::string::npos) line.resize(h);
    line = trim(line);
    if (line.empty()) continue;
    auto eq = line.find('=');
    if (eq == std::string::npos)
      throw std::invalid_argument("config: line " + std::to_string(lineno) +
                                  " is not key = value");
    std::string key = trim(line.substr(0, eq)), val = trim(line.substr(eq + 1));
    if (key.empty()) throw std::invalid_argument("config: empty key at line " +
                                                 std::to_string(lineno));
    kv[key] = val;
  }
  return kv;
}

namespace {

int to_int(const std::string& key, const std::string& v) {
  try {
    size_t pos = 0;
    int r = std::stoi(v, &pos);
    if (pos != v.size()) throw std::invalid_argument("trailing");
    return r;
  } catch (const std::exception&) {
    throw std::invalid_argument("config: bad integer for " + key + ": " + v);
  }
}

double to_double(const std::string& key, const std::string& v) {
  try {
    size_t pos = 0;
    double r = std::stod(v, &pos);
    if (pos != v.size()) throw std::invalid_argument("trailing");
    return r;
  } catch (const std::exception&) {
    throw std::invalid_argument("config: bad number for " + key + ": " + v);
  }
}

}  // namespace

void apply_config(RunConfig& cfg, const std::map<std::string, std::string>& kv) {
  for (auto& [k, v] : kv) {
    if (k == "corpus") cfg.corpus_dir = v;
    else if (k == "mode") cfg.mode = v;
    else if (k == "iters") cfg.iters = to_int(k, v);
    else if (k == "batch") cfg.batch = to_int(k, v);
    else if (k == "lr") cfg.lr = to_double(k, v);
    else if (k == "step_size") cfg.step_size = to_int(k, v);
    else if (k == "seed") cfg.seed = (uint64_t)to_int(k, v);
    else if (k == "out") cfg.out_dir = v;
    else if (k == "eval_cadence") cfg.eval_cadence = to_int(k, v);
    else if (k == "eval_split") cfg.eval_split = v;
    else if (k == "final_split") cfg.final_split = v;
    else throw std::invalid_argument("config: unknown key " + k);
  }
}

// ---- scoring / evaluation ---------------------------------------------------------

std::vector<double> score_split(MswtModel& m, const CorpusSplit& split, int batch) {
  if (batch < 1) throw std::invalid_argument("score_split: batch must be >= 1");
  std::vector<double> scores;
  scores.reserve(split.items.size());
  int n = (int)split.items.size();
  for (int at = 0; at < n; at += batch) {
    int bs = std::min(batch, n - at);
    std::vector<int> idx(bs);
    for (int i = 0; i < bs; ++i) idx[i] = at + i;
    auto [x, labels] = make_batch(split, idx, {});
    ModelOutput out = model_forward(x, m, false);
    const double* lg = out.logits.data();
    for (int b = 0; b < bs; ++b) {
      double l0 = lg[2 * b], l1 = lg[2 * b + 1];
      double mx = std::max(l0, l1);
      double e0 = std::exp(l0 - mx), e1 = std::exp(l1 - mx);
      scores.push_back(e1 / (e0 + e1));
    }
  }
  return scores;
}

std::pair<Metrics, Metrics> evaluate(MswtModel& m, const CorpusSplit& split, int batch) {
  std::vector<double> scores = score_split(m, split, batch);
  std::vector<int> labels, vids;
  for (const CorpusItem& it : split.items) {
    labels.push_back(it.label);
    vids.push_back(it.video_id);
  }
  auto [vscores, vlabels] = video_level(scores, labels, vids);
  Metrics f, v;
  f.level = "frame";
  f.acc = accuracy(scores, labels);
  f.auc = auc(scores, labels);
  f.n_frames = (int)scores.size();
  f.n_videos = (int)vscores.size();
  v.level = "video";
  v.acc = accuracy(vscores, vlabels);
  v.auc = auc(vscores, vlabels);
  v.n_frames = (int)scores.size();
  v.n_videos = (int)vscores.size();
  return {f, v};
}

// ---- training -----------------------------------------------------------------------

namespace {

void fisher_yates(std::vector<int>& v, Rng& rng) {
  for (int i = (int)v.size() - 1; i > 0; --i) std::swap(v[i], v[(int)rng.uniform_int(i + 1)]);
}

std::string g17(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

void write_row(std::ofstream& csv, int iter, const std::string& split, const Metrics& f,
               const Metrics& v, double loss) {
  csv << iter << "," << split << "," << g17(f.acc) << "," << g17(f.auc) << "," << g17(v.acc)
      << "," << g17(v.auc) << "," << g17(loss) << "\n";
}

}  // namespace

TrainResult train(const RunConfig& cfg) {
  if (cfg.batch < 1 || cfg.iters < 1)
    throw std::invalid_argument("train: batch and iters must be >= 1");
  if (cfg.eval_cadence < 1) throw std::invalid_argument("train: eval cadence must be >= 1");
  AblationMode mode = ablation_mode_from_name(cfg.mode);

  CorpusSplit tr = load_split(cfg.corpus_dir, "train");
  CorpusSplit ev = load_split(cfg.corpus_dir, cfg.eval_split);
  CorpusSplit fin =
      cfg.final_split == cfg.eval_split ? ev : load_split(cfg.corpus_dir, cfg.final_split);
  if ((int)tr.items.size() < cfg.batch)
    throw std::invalid_argument("train: batch exceeds the training split size");

  MswtModel model = make_model(cfg.seed, mode);
  std::vector<Tensor*> params = model.parameters();
  AdamW opt;
  Rng rng(stream_seed({cfg.seed, 0x747261696eULL}));  // training stream

  fs::create_directories(cfg.out_dir);
  std::string metrics_path = (fs::path(cfg.out_dir) / "metrics.csv").string();
  std::ofstream csv(metrics_path, std::ios::binary | std::ios::trunc);
  if (!csv) throw data_error("train: cannot write " + metrics_path);
  csv << "iter,split,acc_frame,auc_frame,acc_video,auc_video,loss\n";

  std::vector<int> perm(tr.items.size());
  for (size_t i = 0; i < perm.size(); ++i) perm[i] = (int)i;
  size_t pos = perm.size();  // force an initial shuffle

  double last_loss = 0.0;
  for (int iter = 1; iter <= cfg.iters; ++iter) {
    if (pos + cfg.batch > perm.size()) {  // new epoch, remainder dropped
      fisher_yates(perm, rng);
      pos = 0;
    }
    std::vector<int> idx(perm.begin() + pos, perm.begin() + pos + cfg.batch);
    pos += cfg.batch;
    std::vector<bool> flip(cfg.batch);
    for (int b = 0; b < cfg.batch; ++b) flip[b] = rng.u01() < 0.5;

    auto [x, labels] = make_batch(tr, idx, flip);
    ModelOutput out = model_forward(x, model, true);
    Tensor loss = cross_entropy(out.logits, labels);
    last_loss = loss.item();
    if (!std::isfinite(last_loss))
      throw numeric_error("train: non-finite loss at iteration " + std::to_string(iter));
    for (Tensor* p : params) p->zero_grad();
    backward(loss);
    opt.step(params, step_lr(iter - 1, cfg.lr, cfg.step_size));

    if (iter % cfg.eval_cadence == 0 || iter == cfg.iters) {
      auto [f, v] = evaluate(model, ev, cfg.batch);
      write_row(csv, iter, ev.name, f, v, last_loss);
    }
  }

  auto [ff, fv] = evaluate(model, fin, cfg.batch);
  write_row(csv, cfg.iters, fin.name, ff, fv, last_loss);
  csv.flush();
  if (!csv) throw data_error("train: metrics write failed");

  std::string ckpt_path = (fs::path(cfg.out_dir) / "model.ckpt").string();
  save_checkpoint(model, ckpt_path);
  return {ff, fv, ckpt_path, metrics_path};
}

// ---- analysis ------------------------------------------------------------------------

EmdReport emd_report_for_split(const CorpusSplit& split, int depth, int bins) {
  // Pair key: (pair index = video_id/2, frame). Each must have both versions.
  std::map<std::pair<int, int>, std::pair<const CorpusItem*, const CorpusItem*>> pairs;
  for (const CorpusItem& it : split.items) {
    auto& slot = pairs[{it.video_id / 2, it.frame_idx}];
    (it.label == 0 ? slot.first : slot.second) = &it;
  }
  std::vector<Tensor> real, fake;
  int S = split.image_size;
  for (auto& [key, slot] : pairs) {
    if (!slot.first || !slot.second)
      throw data_error("emd_report_for_split: unpaired item (pair " +
                       std::to_string(key.first) + ", frame " + std::to_string(key.second) + ")");
    real.push_back(dequantize_u8(slot.first->rgb, 3, S, S));
    fake.push_back(dequantize_u8(slot.second->rgb, 3, S, S));
  }
  return emd_report(real, fake, depth, bins);
}

void write_emd_report(const EmdReport& rep, const std::string& path) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw data_error("emd report: cannot write " + path);
  os << "band,emd\n";
  for (auto& [name, v] : rep.rows) os << name << "," << g17(v) << "\n";
  if (!os) throw data_error("emd report: write failed");
}

namespace {

void write_normalized_pgm(const std::vector<double>& vals, int h, int w,
                          const std::string& path) {
  double lo = vals[0], hi = vals[0];
  for (double v : vals) {
    lo = std::min(lo, v);
    hi = std::max(hi, v);
  }
  std::vector<double> norm(vals.size());
  double span = hi - lo;
  for (size_t i = 0; i < vals.size(); ++i) norm[i] = span > 0 ? (vals[i] - lo) / span : 0.0;
  write_pgm(norm, h, w, path);
}

}  // namespace

void export_attention(MswtModel& m, const Tensor& image3hw, const std::string& out_dir) {
  if (image3hw.rank() != 3) throw std::invalid_argument("export_attention: image must be (3,H,W)");
  if (m.mode == AblationMode::backbone_only || m.mode == AblationMode::dwt_concat)
    throw std::invalid_argument("export_attention: mode " + std::string(ablation_mode_name(m.mode)) +
                                " produces no attention maps");
  fs::create_directories(out_dir);
  Tensor x = reshape(image3hw, {1, image3hw.dim(0), image3hw.dim(1), image3hw.dim(2)});
  ModelOutput out = model_forward(x, m, false);
  for (int k = 0; k < 3; ++k) {
    struct {
      const char* tag;
      const std::optional<AttnMaps>& maps;
    } sides[2] = {{"fsa", out.attn_fsa[k]}, {"cma", out.attn_cma[k]}};
    for (auto& side : sides) {
      if (!side.maps) continue;
      const AttnMaps& am = *side.maps;
      Tensor probs = am.materialize();  // (1,heads,T,S)
      int hw = (int)std::lround(std::sqrt((double)am.S));
      for (int h = 0; h < am.heads; ++h) {
        std::vector<double> received(am.S, 0.0);
        const double* p = probs.data() + (int64_t)h * am.T * am.S;
        for (int t = 0; t < am.T; ++t)
          for (int s = 0; s < am.S; ++s) received[s] += p[(int64_t)t * am.S + s];
        for (double& v : received) v /= am.T;
        char buf[64];
        std::snprintf(buf, sizeof(buf), "L%d_%s_h%d.pgm", k + 1, side.tag, h);
        write_normalized_pgm(received, hw, hw, (fs::path(out_dir) / buf).string());
      }
    }
  }
}

void dwt_dump(const Tensor& image3hw, int levels, const std::string& out_dir) {
  if (image3hw.rank() != 3) throw std::invalid_argument("dwt_dump: image must be (3,H,W)");
  fs::create_directories(out_dir);
  Tensor x = reshape(image3hw, {1, image3hw.dim(0), image3hw.dim(1), image3hw.dim(2)});
  WaveletPyramid pyr = decompose(x, levels);
  const char* band_names[4] = {"LL", "LH", "HL", "HH"};
  for (int l = 0; l < levels; ++l) {
    const Tensor* bands[4] = {&pyr.levels[l].ll, &pyr.levels[l].lh, &pyr.levels[l].hl,
                              &pyr.levels[l].hh};
    for (int b = 0; b < 4; ++b) {
      const Tensor& t = *bands[b];
      int C = t.dim(1), h = t.dim(2), w = t.dim(3);
      std::vector<double> gray((size_t)h * w, 0.0);
      for (int c = 0; c < C; ++c)
        for (int i = 0; i < h * w; ++i) gray[i] += t.data()[(int64_t)c * h * w + i] / C;
      char buf[32];
      std::snprintf(buf, sizeof(buf), "L%d_%s.pgm", l + 1, band_names[b]);
      write_normalized_pgm(gray, h, w, (fs::path(out_dir) / buf).string());
    }
  }
}

// ---- built-in gradcheck smoke --------------------------------------------------------

namespace {

struct FdChecker {
  Rng rng{12345};
  double eps = 1e-5, rel_tol = 1e-4, abs_floor = 1e-7;
  std::ostringstream log;
  bool all_ok = true;

  // fwd() must rebuild its graph from `params` on every call.
  void check(const std::string& name, const std::function<Tensor()>& fwd,
             std::vector<Tensor*> params, int coords_per_param = 4) {
    Tensor shape_probe = fwd();
    Tensor w = Tensor::zeros(shape_probe.shape());
    for (int64_t i = 0; i < w.numel(); ++i) w.data()[i] = rng.uniform(-1.0, 1.0);
    auto loss_value = [&]() { return sum(mul(fwd(), w)).item(); };

    for (Tensor* p : params) p->zero_grad();
    Tensor loss = sum(mul(fwd(), w));
    backward(loss);

    double max_rel = 0.0;
    bool ok = true;
    for (Tensor* p : params) {
      for (int c = 0; c < coords_per_param; ++c) {
        int64_t i = (int64_t)rng.uniform_int(p->numel());
        double analytic = p->has_grad() ? p->grad()[i] : 0.0;
        double saved = p->data()[i];
        p->data()[i] = saved + eps;
        double lp = loss_value();
        p->data()[i] = saved - eps;
        double lm = loss_value();
        p->data()[i] = saved;
        double fd = (lp - lm) / (2 * eps);
        double scale = std::max({std::abs(analytic), std::abs(fd), abs_floor / rel_tol});
        double rel = std::abs(analytic - fd) / scale;
        max_rel = std::max(max_rel, rel);
        if (rel > rel_tol) ok = false;
      }
    }
    log << name << ": " << (ok ? "OK" : "FAIL") << " (max rel err " << max_rel << ")\n";
    all_ok = all_ok && ok;
  }
};

Tensor random_tensor(Shape s, Rng& rng, bool grad = true) {
  Tensor t = Tensor::zeros(std::move(s), grad);
  for (int64_t i = 0; i < t.numel(); ++i) t.data()[i] = rng.uniform(-1.0, 1.0);
  return t;
}

}  // namespace

bool gradcheck_module(const std::string& which, std::string& log_out) {
  bool nn_sel = which == "all" || which == "nn";
  bool wav_sel = which == "all" || which == "wavelet";
  bool fsf_sel = which == "all" || which == "fsf";
  bool model_sel = which == "all" || which == "model";
  if (!nn_sel && !wav_sel && !fsf_sel && !model_sel)
    throw std::invalid_argument("gradcheck: unknown module " + which);

  Rng rng(99);
  FdChecker fc;

  if (nn_sel) {
    Tensor x = random_tensor({2, 3, 8, 8}, rng);
    Conv2dParams conv = make_conv(4, 3, 3, 1, 1, rng);
    fc.check("conv2d", [&] { return conv2d(x, conv); }, {&x, &conv.weight, &conv.bias});

    BatchNorm2d bn = make_bn(3);
    fc.check("batchnorm2d", [&] { return batchnorm2d(x, bn, true); },
             {&x, &bn.gamma, &bn.beta});

    Tensor xt = random_tensor({2, 5, 6}, rng);
    Tensor lw = random_tensor({6, 4}, rng), lb = random_tensor({4}, rng);
    fc.check("linear", [&] { return linear(xt, lw, lb); }, {&xt, &lw, &lb});

    Tensor lg = random_tensor({6}, rng, true), lbta = random_tensor({6}, rng, true);
    fc.check("layer_norm", [&] { return layer_norm(xt, lg, lbta); }, {&xt, &lg, &lbta});

    fc.check("softmax", [&] { return softmax(xt, 2); }, {&xt});
    fc.check("relu", [&] { return relu(xt); }, {&xt});
    fc.check("maxpool2d", [&] { return maxpool2d(x, 2, 2); }, {&x});

    MhaParams mp = make_mha_params(8, 2, rng);
    Tensor q = random_tensor({2, 5, 8}, rng), k = random_tensor({2, 6, 8}, rng),
           v = random_tensor({2, 6, 8}, rng);
    fc.check("mha",
             [&] { return mha(q, k, v, mp).out; },
             {&q, &k, &v, &mp.wq, &mp.wk, &mp.wv, &mp.wo, &mp.bq, &mp.bk, &mp.bv, &mp.bo});

    TransformerParams tp = make_transformer_params(8, 2, rng);
    fc.check("transformer_block",
             [&] { return transformer_block(q, k, v, q, tp).out; },
             {&q, &k, &v, &tp.w1, &tp.b1, &tp.w2, &tp.b2, &tp.ln1_g, &tp.ln2_b});
  }

  if (wav_sel) {
    Tensor x = random_tensor({2, 3, 8, 8}, rng);
    for (int b = 0; b < 4; ++b)
      fc.check("haar_band" + std::to_string(b), [&, b] { return haar_band(x, b); }, {&x});
    Tensor ll = random_tensor({1, 2, 4, 4}, rng), lh = random_tensor({1, 2, 4, 4}, rng),
           hl = random_tensor({1, 2, 4, 4}, rng), hh = random_tensor({1, 2, 4, 4}, rng);
    fc.check("idwt2", [&] { return idwt2({ll, lh, hl, hh}); }, {&ll, &lh, &hl, &hh});
  }

  if (fsf_sel) {
    FsfParams p = make_fsf_params(8, 8, 2, rng);
    Tensor feat = random_tensor({2, 8, 4, 4}, rng);
    WaveletLevel lvl{random_tensor({2, 3, 4, 4}, rng), random_tensor({2, 3, 4, 4}, rng),
                     random_tensor({2, 3, 4, 4}, rng), random_tensor({2, 3, 4, 4}, rng)};
    fc.check("fsf_forward",
             [&] { return fsf_forward(feat, lvl, p, true).fused; },
             {&feat, &lvl.lh, &p.band_convs[0].weight, &p.combine_conv.weight,
              &p.down_conv.weight, &p.fsa.att.wq, &p.cma.att.wv, &p.fsa.w1});
  }

  if (model_sel) {
    MswtModel m = make_model(5);
    Tensor img = Tensor::zeros({2, 3, 16, 16});
    Rng irng(31);
    for (int64_t i = 0; i < img.numel(); ++i) img.data()[i] = irng.u01();
    fc.check("model_forward",
             [&] { return model_forward(img, m, true).logits; },
             {&m.stages[0].conv1.weight, &m.stages[3].conv2.weight, &m.fsf[0].fsa.att.wq,
              &m.fsf[1].down_conv.weight, &m.fsf[2].cma.att.wo, &m.merge[0].weight, &m.cls_w,
              &m.cls_b},
             2);
  }

  log_out = fc.log.str();
  return fc.all_ok;
}

}  // namespace mswt
