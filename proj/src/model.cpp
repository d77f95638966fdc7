#include "mswt/model.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <map>

#include "mswt/common.hpp"
#include "mswt/wavelet.hpp"

static_assert(std::endian::native == std::endian::little,
              "checkpoint writer assumes a little-endian host");

namespace mswt {

namespace {

void add_transformer(std::vector<std::pair<std::string, Tensor*>>& out, const std::string& pre,
                     TransformerParams& t) {
  out.emplace_back(pre + ".wq", &t.att.wq);
  out.emplace_back(pre + ".bq", &t.att.bq);
  out.emplace_back(pre + ".wk", &t.att.wk);
  out.emplace_back(pre + ".bk", &t.att.bk);
  out.emplace_back(pre + ".wv", &t.att.wv);
  out.emplace_back(pre + ".bv", &t.att.bv);
  out.emplace_back(pre + ".wo", &t.att.wo);
  out.emplace_back(pre + ".bo", &t.att.bo);
  out.emplace_back(pre + ".ln1_g", &t.ln1_g);
  out.emplace_back(pre + ".ln1_b", &t.ln1_b);
  out.emplace_back(pre + ".ln2_g", &t.ln2_g);
  out.emplace_back(pre + ".ln2_b", &t.ln2_b);
  out.emplace_back(pre + ".w1", &t.w1);
  out.emplace_back(pre + ".b1", &t.b1);
  out.emplace_back(pre + ".w2", &t.w2);
  out.emplace_back(pre + ".b2", &t.b2);
}

}  // namespace

std::vector<std::pair<std::string, Tensor*>> MswtModel::named_params() {
  std::vector<std::pair<std::string, Tensor*>> out;
  for (int k = 0; k < 4; ++k) {
    std::string pre = "stage" + std::to_string(k + 1);
    out.emplace_back(pre + ".conv1.weight", &stages[k].conv1.weight);
    out.emplace_back(pre + ".conv1.bias", &stages[k].conv1.bias);
    out.emplace_back(pre + ".bn1.gamma", &stages[k].bn1.gamma);
    out.emplace_back(pre + ".bn1.beta", &stages[k].bn1.beta);
    out.emplace_back(pre + ".conv2.weight", &stages[k].conv2.weight);
    out.emplace_back(pre + ".conv2.bias", &stages[k].conv2.bias);
    out.emplace_back(pre + ".bn2.gamma", &stages[k].bn2.gamma);
    out.emplace_back(pre + ".bn2.beta", &stages[k].bn2.beta);
  }
  for (int k = 0; k < 3; ++k) {
    std::string pre = "fsf" + std::to_string(k + 1);
    for (int b = 0; b < 3; ++b) {
      std::string bp = pre + ".band" + std::to_string(b);
      out.emplace_back(bp + ".conv.weight", &fsf[k].band_convs[b].weight);
      out.emplace_back(bp + ".conv.bias", &fsf[k].band_convs[b].bias);
      out.emplace_back(bp + ".bn.gamma", &fsf[k].band_bns[b].gamma);
      out.emplace_back(bp + ".bn.beta", &fsf[k].band_bns[b].beta);
    }
    out.emplace_back(pre + ".combine.weight", &fsf[k].combine_conv.weight);
    out.emplace_back(pre + ".combine.bias", &fsf[k].combine_conv.bias);
    out.emplace_back(pre + ".down.weight", &fsf[k].down_conv.weight);
    out.emplace_back(pre + ".down.bias", &fsf[k].down_conv.bias);
    add_transformer(out, pre + ".fsa", fsf[k].fsa);
    add_transformer(out, pre + ".cma", fsf[k].cma);
  }
  for (int k = 0; k < 3; ++k) {
    std::string pre = "merge" + std::to_string(k + 1);
    out.emplace_back(pre + ".weight", &merge[k].weight);
    out.emplace_back(pre + ".bias", &merge[k].bias);
  }
  out.emplace_back("classifier.weight", &cls_w);
  out.emplace_back("classifier.bias", &cls_b);
  return out;
}

std::vector<Tensor*> MswtModel::parameters() {
  std::vector<Tensor*> out;
  for (auto& [name, t] : named_params()) out.push_back(t);
  return out;
}

std::vector<std::pair<std::string, BnState*>> MswtModel::named_bn_states() {
  std::vector<std::pair<std::string, BnState*>> out;
  for (int k = 0; k < 4; ++k) {
    std::string pre = "stage" + std::to_string(k + 1);
    out.emplace_back(pre + ".bn1", &stages[k].bn1.state);
    out.emplace_back(pre + ".bn2", &stages[k].bn2.state);
  }
  for (int k = 0; k < 3; ++k)
    for (int b = 0; b < 3; ++b)
      out.emplace_back("fsf" + std::to_string(k + 1) + ".band" + std::to_string(b) + ".bn",
                       &fsf[k].band_bns[b].state);
  return out;
}

MswtModel make_model(uint64_t seed, AblationMode mode) {
  Rng rng(stream_seed({seed, 0x6d6f64656cULL}));  // "model" stream
  MswtModel m;
  m.mode = mode;
  int in_ch = 3;
  for (int k = 0; k < 4; ++k) {
    int out_ch = kStageWidths[k];
    m.stages[k].conv1 = make_conv(out_ch, in_ch, 3, 1, 1, rng);
    m.stages[k].bn1 = make_bn(out_ch);
    m.stages[k].conv2 = make_conv(out_ch, out_ch, 3, 1, 1, rng);
    m.stages[k].bn2 = make_bn(out_ch);
    in_ch = out_ch;
  }
  for (int k = 0; k < 3; ++k)
    m.fsf[k] = make_fsf_params(kStageWidths[k], kFsfDims[k], kFsfHeads[k], rng);
  for (int k = 0; k < 3; ++k)
    m.merge[k] = make_conv(kStageWidths[k], kStageWidths[k] + 2 * kFsfDims[k], 1, 1, 0, rng);
  m.cls_w = Tensor::zeros({kStageWidths[3], 2}, true);
  m.cls_b = Tensor::zeros({2}, true);
  xavier_uniform(m.cls_w, kStageWidths[3], 2, rng);
  return m;
}

namespace {

Tensor stage_forward(const Tensor& x, StageParams& s, bool train) {
  Tensor h = maxpool2d(x, 2, 2);
  h = relu(batchnorm2d(conv2d(h, s.conv1), s.bn1, train));
  h = relu(batchnorm2d(conv2d(h, s.conv2), s.bn2, train));
  return h;
}

}  // namespace

ModelOutput model_forward(const Tensor& image, MswtModel& m, bool train) {
  if (image.rank() != 4 || image.dim(1) != 3)
    throw std::invalid_argument("model_forward: input must be (B,3,H,W)");
  int H = image.dim(2), W = image.dim(3);
  if (H != W) throw std::invalid_argument("model_forward: input must be square");
  if (H % 8) throw std::invalid_argument("model_forward: extent must be divisible by 8");
  int64_t tokens = (int64_t)(H / 2) * (W / 2);
  if (tokens > kMaxTokens)
    throw std::invalid_argument("model_forward: " + std::to_string(tokens) +
                                " attention tokens exceed the budget of " +
                                std::to_string(kMaxTokens));

  ModelOutput out;
  WaveletPyramid pyr;
  if (m.mode != AblationMode::backbone_only) pyr = decompose(image, 3);

  Tensor x = image;
  for (int k = 0; k < 3; ++k) {
    Tensor feat = stage_forward(x, m.stages[k], train);
    if (m.mode == AblationMode::backbone_only) {
      x = feat;
      continue;
    }
    FsfOutput f = fsf_forward(feat, pyr.levels[k], m.fsf[k], train, m.mode);
    x = conv2d(concat_channel({feat, f.fused}), m.merge[k]);
    out.attn_fsa[k] = std::move(f.attn_fsa);
    out.attn_cma[k] = std::move(f.attn_cma);
  }
  x = stage_forward(x, m.stages[3], train);
  out.logits = linear(global_avg_pool(x), m.cls_w, m.cls_b);
  return out;
}

int64_t count_params(MswtModel& m) {
  int64_t n = 0;
  for (Tensor* t : m.parameters()) n += t->numel();
  return n;
}

// ---- checkpoint ----------------------------------------------------------------

namespace {

struct Entry {
  std::string name;
  Shape shape;
  std::vector<double> data;
};

std::vector<Entry> collect_entries(MswtModel& m) {
  std::vector<Entry> es;
  for (auto& [name, t] : m.named_params())
    es.push_back({name, t->shape(), std::vector<double>(t->data(), t->data() + t->numel())});
  for (auto& [name, st] : m.named_bn_states()) {
    es.push_back({name + ".running_mean", {(int)st->running_mean.size()}, st->running_mean});
    es.push_back({name + ".running_var", {(int)st->running_var.size()}, st->running_var});
    es.push_back({name + ".batches_tracked", {1}, {(double)st->batches_tracked}});
  }
  es.push_back({"meta.ablation_mode", {1}, {(double)(int)m.mode}});
  return es;
}

template <typename T>
void put(std::ostream& os, T v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T take(std::istream& is) {
  T v;
  is.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!is) throw data_error("checkpoint: truncated file");
  return v;
}

}  // namespace

void save_checkpoint(MswtModel& m, const std::string& path) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw data_error("checkpoint: cannot open " + path + " for writing");
  std::vector<Entry> es = collect_entries(m);
  os.write("MSWT", 4);
  put<uint32_t>(os, 1);
  put<uint32_t>(os, (uint32_t)es.size());
  for (const Entry& e : es) {
    if (e.name.size() > 0xffff) throw data_error("checkpoint: name too long");
    put<uint16_t>(os, (uint16_t)e.name.size());
    os.write(e.name.data(), (std::streamsize)e.name.size());
    put<uint8_t>(os, (uint8_t)e.shape.size());
    for (int d : e.shape) put<uint32_t>(os, (uint32_t)d);
    os.write(reinterpret_cast<const char*>(e.data.data()),
             (std::streamsize)(e.data.size() * sizeof(double)));
  }
  if (!os) throw data_error("checkpoint: write failed for " + path);
}

MswtModel load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw data_error("checkpoint: cannot open " + path);
  char magic[4];
  is.read(magic, 4);
  if (!is || std::memcmp(magic, "MSWT", 4) != 0)
    throw data_error("checkpoint: bad magic in " + path);
  if (take<uint32_t>(is) != 1) throw data_error("checkpoint: unsupported version");
  uint32_t count = take<uint32_t>(is);

  MswtModel m = make_model(0, AblationMode::full);
  std::map<std::string, Tensor*> params;
  for (auto& [name, t] : m.named_params()) params[name] = t;
  std::map<std::string, BnState*> bns;
  for (auto& [name, st] : m.named_bn_states()) bns[name] = st;

  for (uint32_t i = 0; i < count; ++i) {
    uint16_t nlen = take<uint16_t>(is);
    std::string name(nlen, '\0');
    is.read(name.data(), nlen);
    if (!is) throw data_error("checkpoint: truncated file");
    uint8_t rank = take<uint8_t>(is);
    Shape shape(rank);
    int64_t n = 1;
    for (int d = 0; d < rank; ++d) {
      shape[d] = (int)take<uint32_t>(is);
      n *= shape[d];
    }
    std::vector<double> data(n);
    is.read(reinterpret_cast<char*>(data.data()), (std::streamsize)(n * sizeof(double)));
    if (!is) throw data_error("checkpoint: truncated payload for " + name);

    if (name == "meta.ablation_mode") {
      if (n != 1) throw data_error("checkpoint: bad meta.ablation_mode");
      int v = (int)data[0];
      if (v < 0 || v > (int)AblationMode::cma_only)
        throw data_error("checkpoint: bad ablation mode value");
      m.mode = (AblationMode)v;
      continue;
    }
    auto dot = name.rfind('.');
    std::string head = dot == std::string::npos ? name : name.substr(0, dot);
    std::string leaf = dot == std::string::npos ? "" : name.substr(dot + 1);
    if (auto it = bns.find(head); it != bns.end() && (leaf == "running_mean" ||
                                                      leaf == "running_var" ||
                                                      leaf == "batches_tracked")) {
      if (leaf == "running_mean") {
        if ((size_t)n != it->second->running_mean.size())
          throw data_error("checkpoint: size mismatch for " + name);
        it->second->running_mean = data;
      } else if (leaf == "running_var") {
        if ((size_t)n != it->second->running_var.size())
          throw data_error("checkpoint: size mismatch for " + name);
        it->second->running_var = data;
      } else {
        if (n != 1) throw data_error("checkpoint: bad " + name);
        it->second->batches_tracked = (int64_t)data[0];
      }
      continue;
    }
    auto it = params.find(name);
    if (it == params.end()) throw data_error("checkpoint: unknown tensor name " + name);
    if (it->second->shape() != shape)
      throw data_error("checkpoint: shape mismatch for " + name + " (file " + shape_str(shape) +
                       ", model " + shape_str(it->second->shape()) + ")");
    std::memcpy(it->second->data(), data.data(), (size_t)n * sizeof(double));
  }
  return m;
}

}  // namespace mswt
