#pragma once

// The attention CNN: repeated [conv3d -> batchnorm -> relu] stages with max
// pools after the first three, a soft attention gate bridging a mid stage to
// the deepest stage, two global average pools (main stream and gated stream)
// feeding one dense layer that reduces to two logits.

#include <array>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>
#include <unordered_map>
#include <vector>

#include "colearn/autodiff.hpp"
#include "colearn/common.hpp"
#include "colearn/tensor.hpp"
#include "colearn/volume.hpp"
#include "json.hpp"

namespace colearn {

struct NetworkConfig {
  int64_t input_side = 32;
  std::vector<int64_t> stage_channels = {8, 16, 32, 64};
  int kernel = 3;
  int num_maxpools = 3;
  int sag_source_stage = 2;
  int sag_gating_stage = 3;
  int64_t sag_intermediate_channels = 0;  // 0 = half the source stage channels
  int num_classes = 2;
};

inline int64_t resolved_sag_channels(const NetworkConfig& cfg) {
  if (cfg.sag_intermediate_channels > 0) return cfg.sag_intermediate_channels;
  return std::max<int64_t>(1, cfg.stage_channels[size_t(cfg.sag_source_stage)] / 2);
}

// Spatial side of the named stage's final output (after its pool, if any).
inline int64_t stage_side(const NetworkConfig& cfg, int stage) {
  int64_t side = cfg.input_side;
  for (int i = 0; i <= stage; ++i)
    if (i < cfg.num_maxpools) side /= 2;
  return side;
}

inline void validate_network_config(const NetworkConfig& cfg) {
  require(cfg.num_classes == 2, "network: output dimension is fixed at 2 classes");
  require(cfg.num_maxpools == 3, "network: architecture requires exactly 3 max pools");
  require(cfg.kernel >= 1 && cfg.kernel % 2 == 1, "network: kernel must be odd");
  const int stages = int(cfg.stage_channels.size());
  require(stages >= cfg.num_maxpools + 1,
          "network: need more stages than max pools, got " + std::to_string(stages));
  for (int64_t c : cfg.stage_channels)
    require(c >= 1, "network: stage channels must be positive");
  require(cfg.input_side >= 1, "network: input side must be positive");
  int64_t side = cfg.input_side;
  for (int i = 0; i < cfg.num_maxpools; ++i) {
    require(side % 2 == 0, "network: input side must halve through every max pool");
    side /= 2;
  }
  require(side >= 1, "network: input side too small for the pool stack");
  require(cfg.sag_source_stage >= 0 && cfg.sag_source_stage < stages,
          "network: sag source stage out of range");
  require(cfg.sag_gating_stage >= 0 && cfg.sag_gating_stage < stages,
          "network: sag gating stage out of range");
  require(stage_side(cfg, cfg.sag_gating_stage) <= stage_side(cfg, cfg.sag_source_stage),
          "network: gating stage must be spatially coarser or equal to the source");
}

template <class T>
struct ParamEntry {
  std::string name;
  Tensor<T> value;
  Tensor<T> grad;  // same shape when trainable, empty otherwise
  bool trainable = false;
};

template <class T>
struct ParamGraph {
  NetworkConfig cfg;
  std::vector<ParamEntry<T>> entries;  // creation order, also the on-disk order
  std::unordered_map<std::string, size_t> index;

  ParamEntry<T>& find(const std::string& name) {
    auto it = index.find(name);
    if (it == index.end()) fail_data("network: no parameter named ", name);
    return entries[it->second];
  }
  const ParamEntry<T>& find(const std::string& name) const {
    return const_cast<ParamGraph*>(this)->find(name);
  }
  Tensor<T>& tensor(const std::string& name) { return find(name).value; }

  void add(std::string name, Tensor<T> value, bool trainable) {
    if (index.count(name)) fail_data("network: duplicate parameter name ", name);
    ParamEntry<T> e;
    e.name = name;
    e.grad = trainable ? Tensor<T>::zeros(value.shape) : Tensor<T>();
    e.value = std::move(value);
    e.trainable = trainable;
    index[std::move(name)] = entries.size();
    entries.push_back(std::move(e));
  }

  void zero_grads() {
    for (auto& e : entries)
      if (e.trainable) std::fill(e.grad.data.begin(), e.grad.data.end(), T(0));
  }

  int64_t trainable_count() const {
    int64_t n = 0;
    for (const auto& e : entries)
      if (e.trainable) n += e.value.numel();
    return n;
  }
};

namespace detail {

inline std::string config_signature(const NetworkConfig& cfg) {
  std::string s = "net-v1|side=" + std::to_string(cfg.input_side) + "|ch=";
  for (size_t i = 0; i < cfg.stage_channels.size(); ++i) {
    if (i) s += ",";
    s += std::to_string(cfg.stage_channels[i]);
  }
  s += "|k=" + std::to_string(cfg.kernel);
  s += "|mp=" + std::to_string(cfg.num_maxpools);
  s += "|src=" + std::to_string(cfg.sag_source_stage);
  s += "|gate=" + std::to_string(cfg.sag_gating_stage);
  s += "|inter=" + std::to_string(resolved_sag_channels(cfg));
  s += "|classes=" + std::to_string(cfg.num_classes);
  return s;
}

template <class T>
Tensor<T> he_normal(Rng& rng, Shape shape, int64_t fan_in) {
  Tensor<T> t(std::move(shape));
  const double sd = std::sqrt(2.0 / double(fan_in));
  for (auto& v : t.data) v = T(rng.normal(0.0, sd));
  return t;
}

}  // namespace detail

template <class T>
uint64_t architecture_fingerprint(const ParamGraph<T>& pg) {
  std::string s = detail::config_signature(pg.cfg);
  for (const auto& e : pg.entries) {
    s += "|" + e.name + ":" + shape_str(e.value.shape);
    s += e.trainable ? "+t" : "+f";
  }
  return fnv1a(s);
}

template <class T = float>
ParamGraph<T> build_network(const NetworkConfig& cfg, uint64_t seed) {
  validate_network_config(cfg);
  ParamGraph<T> pg;
  pg.cfg = cfg;
  Rng rng(hash_combine(seed, fnv1a("network-init")));

  const int stages = int(cfg.stage_channels.size());
  const int64_t k = cfg.kernel;
  int64_t cin = 2;  // CT channel + nodule mask channel
  for (int i = 0; i < stages; ++i) {
    const int64_t cout = cfg.stage_channels[size_t(i)];
    const std::string p = "stage" + std::to_string(i);
    pg.add(p + ".conv.weight",
           detail::he_normal<T>(rng, {cout, cin, k, k, k}, cin * k * k * k), true);
    pg.add(p + ".conv.bias", Tensor<T>::zeros({cout}), true);
    pg.add(p + ".bn.gamma", Tensor<T>::full({cout}, T(1)), true);
    pg.add(p + ".bn.beta", Tensor<T>::zeros({cout}), true);
    pg.add(p + ".bn.running_mean", Tensor<T>::zeros({cout}), false);
    pg.add(p + ".bn.running_var", Tensor<T>::full({cout}, T(1)), false);
    cin = cout;
  }

  const int64_t c_src = cfg.stage_channels[size_t(cfg.sag_source_stage)];
  const int64_t c_gate = cfg.stage_channels[size_t(cfg.sag_gating_stage)];
  const int64_t inter = resolved_sag_channels(cfg);
  pg.add("sag.wx.weight", detail::he_normal<T>(rng, {inter, c_src, 1, 1, 1}, c_src), true);
  pg.add("sag.wx.bias", Tensor<T>::zeros({inter}), true);
  pg.add("sag.wg.weight", detail::he_normal<T>(rng, {inter, c_gate, 1, 1, 1}, c_gate),
         true);
  pg.add("sag.wg.bias", Tensor<T>::zeros({inter}), true);
  pg.add("sag.psi.weight", detail::he_normal<T>(rng, {1, inter, 1, 1, 1}, inter), true);
  pg.add("sag.psi.bias", Tensor<T>::zeros({1}), true);

  const int64_t feat = cfg.stage_channels.back() + c_src;
  pg.add("head.dense.weight", detail::he_normal<T>(rng, {feat, 2}, feat), true);
  pg.add("head.dense.bias", Tensor<T>::zeros({2}), true);
  return pg;
}

// Node handles of one recorded forward pass.
struct ForwardNodes {
  NodeId input;
  NodeId logits;
  NodeId probs;
  NodeId alpha;  // [N,1,d,h,w]
  NodeId x_att;
};

namespace detail {

template <class T>
NodeId bind(Tape<T>& tape, ParamGraph<T>& pg, const std::string& name) {
  ParamEntry<T>& e = pg.find(name);
  require(e.trainable, name + " is not a trainable parameter");
  return tape.param(&e.value, &e.grad);
}

// q = psi(relu(Wx*x + upsample(Wg*g))); alpha = sigmoid(q); x_att = alpha . x
template <class T>
std::pair<NodeId, NodeId> sag_nodes(Tape<T>& tape, ParamGraph<T>& pg, NodeId x,
                                    NodeId g) {
  // copy the shapes: pushing ops may reallocate the tape's node storage
  const Shape xshape = tape.value(x).shape;
  const Shape gshape = tape.value(g).shape;
  if (xshape[0] != gshape[0])
    fail_data("sag: batch mismatch, ", xshape[0], " vs ", gshape[0]);
  NodeId a = tape.conv3d(x, bind(tape, pg, "sag.wx.weight"),
                         bind(tape, pg, "sag.wx.bias"), 1, 0);
  NodeId b = tape.conv3d(g, bind(tape, pg, "sag.wg.weight"),
                         bind(tape, pg, "sag.wg.bias"), 1, 0);
  NodeId b_up =
      tape.trilinear_upsample(b, {xshape[2], xshape[3], xshape[4]});
  NodeId r = tape.relu(tape.add(a, b_up));
  NodeId q = tape.conv3d(r, bind(tape, pg, "sag.psi.weight"),
                         bind(tape, pg, "sag.psi.bias"), 1, 0);
  NodeId alpha = tape.sigmoid(q);
  NodeId x_att = tape.mul_gate(alpha, x);
  return {x_att, alpha};
}

}  // namespace detail

// Standalone gate application, for exercising the attention block directly.
template <class T>
std::pair<Tensor<T>, Tensor<T>> sag(ParamGraph<T>& pg, const Tensor<T>& x,
                                    const Tensor<T>& g) {
  Tape<T> tape;
  NodeId xn = tape.input(x);
  NodeId gn = tape.input(g);
  auto [x_att, alpha] = detail::sag_nodes(tape, pg, xn, gn);
  return {tape.value(x_att), tape.value(alpha)};
}

template <class T>
ForwardNodes forward(Tape<T>& tape, ParamGraph<T>& pg, Tensor<T> batch, bool training,
                     bool input_needs_grad = false) {
  const NetworkConfig& cfg = pg.cfg;
  require(batch.shape.size() == 5, "forward: batch must be [N,2,S,S,S]");
  if (batch.shape[1] != 2 || batch.shape[2] != cfg.input_side ||
      batch.shape[3] != cfg.input_side || batch.shape[4] != cfg.input_side)
    fail_data("forward: batch shape ", shape_str(batch.shape),
              " does not match configured input [N,2,", cfg.input_side, ",",
              cfg.input_side, ",", cfg.input_side, "]");

  ForwardNodes out;
  out.input = tape.input(std::move(batch), input_needs_grad);
  NodeId cur = out.input;
  std::vector<NodeId> feat;  // final output of each stage, pool included
  const int stages = int(cfg.stage_channels.size());
  for (int i = 0; i < stages; ++i) {
    const std::string p = "stage" + std::to_string(i);
    ParamEntry<T>& rm = pg.find(p + ".bn.running_mean");
    ParamEntry<T>& rv = pg.find(p + ".bn.running_var");
    cur = tape.conv3d(cur, detail::bind(tape, pg, p + ".conv.weight"),
                      detail::bind(tape, pg, p + ".conv.bias"), 1, cfg.kernel / 2);
    cur = tape.batchnorm3d(cur, detail::bind(tape, pg, p + ".bn.gamma"),
                           detail::bind(tape, pg, p + ".bn.beta"), &rm.value, &rv.value,
                           training);
    cur = tape.relu(cur);
    if (i < cfg.num_maxpools) cur = tape.maxpool3d(cur, 2, 2);
    feat.push_back(cur);
  }

  auto [x_att, alpha] =
      detail::sag_nodes(tape, pg, feat[size_t(cfg.sag_source_stage)],
                        feat[size_t(cfg.sag_gating_stage)]);
  out.alpha = alpha;
  out.x_att = x_att;

  NodeId main_pool = tape.global_avgpool(feat.back());   // average-pool site 1
  NodeId attn_pool = tape.global_avgpool(x_att);         // average-pool site 2
  NodeId cat = tape.concat({main_pool, attn_pool}, 1);
  out.logits = tape.dense(cat, detail::bind(tape, pg, "head.dense.weight"),
                          detail::bind(tape, pg, "head.dense.bias"));
  out.probs = tape.softmax(out.logits);
  return out;
}

struct AttentionMap {
  Tensor<float> alpha;  // [N,1,d,h,w]
  Volume upsampled;     // gate trilinearly upsampled to the input cube
};

inline AttentionMap extract_attention(ParamGraph<float>& pg, const Tensor<float>& input) {
  Tensor<float> batch = input;
  if (batch.shape.size() == 4) batch.shape.insert(batch.shape.begin(), 1);
  require(batch.shape.size() == 5 && batch.shape[0] == 1,
          "extract_attention: expects a single subject");
  Tape<float> tape;
  ForwardNodes fw = forward(tape, pg, std::move(batch), false);
  AttentionMap out;
  out.alpha = tape.value(fw.alpha);
  const int64_t S = pg.cfg.input_side;
  NodeId up = tape.trilinear_upsample(fw.alpha, {S, S, S});
  const Tensor<float>& uv = tape.value(up);
  out.upsampled = Volume::make({S, S, S}, VolumeKind::normalized);
  std::copy(uv.data.begin(), uv.data.end(), out.upsampled.data.begin());
  validate_volume(out.upsampled);
  return out;
}

// ---------------------------------------------------------------------------
// Checkpoint: model.json manifest + model.bin with raw f32le tensors in
// creation order. Loading rebuilds the graph from the stored config and
// verifies the architecture fingerprint and the blob length.

inline void save_checkpoint(const ParamGraph<float>& pg, const std::string& dir) {
  std::filesystem::create_directories(dir);
  nlohmann::ordered_json j;
  j["format"] = "colearn-checkpoint-v1";
  nlohmann::ordered_json cj;
  cj["input_side"] = pg.cfg.input_side;
  cj["stage_channels"] = pg.cfg.stage_channels;
  cj["kernel"] = pg.cfg.kernel;
  cj["num_maxpools"] = pg.cfg.num_maxpools;
  cj["sag_source_stage"] = pg.cfg.sag_source_stage;
  cj["sag_gating_stage"] = pg.cfg.sag_gating_stage;
  cj["sag_intermediate_channels"] = pg.cfg.sag_intermediate_channels;
  cj["num_classes"] = pg.cfg.num_classes;
  j["config"] = cj;
  char buf[32];
  std::snprintf(buf, sizeof buf, "%016llx",
                (unsigned long long)architecture_fingerprint(pg));
  j["fingerprint"] = std::string(buf);
  nlohmann::ordered_json tensors = nlohmann::ordered_json::array();
  int64_t offset = 0;
  for (const auto& e : pg.entries) {
    nlohmann::ordered_json t;
    t["name"] = e.name;
    t["shape"] = e.value.shape;
    t["offset"] = offset;
    t["count"] = e.value.numel();
    t["trainable"] = e.trainable;
    tensors.push_back(std::move(t));
    offset += e.value.numel();
  }
  j["tensors"] = std::move(tensors);
  j["bin"] = "model.bin";

  {
    std::ofstream f(dir + "/model.json");
    if (!f) fail_data("cannot write ", dir, "/model.json");
    f << j.dump(2) << "\n";
  }
  {
    std::ofstream f(dir + "/model.bin", std::ios::binary);
    if (!f) fail_data("cannot write ", dir, "/model.bin");
    for (const auto& e : pg.entries)
      f.write(reinterpret_cast<const char*>(e.value.data.data()),
              std::streamsize(e.value.data.size() * sizeof(float)));
    if (!f) fail_data("short write on ", dir, "/model.bin");
  }
}

inline ParamGraph<float> load_checkpoint(const std::string& dir) {
  std::ifstream f(dir + "/model.json");
  if (!f) fail_data("cannot open ", dir, "/model.json");
  nlohmann::json j;
  try {
    f >> j;
  } catch (const nlohmann::json::exception& e) {
    fail_data("malformed checkpoint manifest: ", e.what());
  }
  NetworkConfig cfg;
  try {
    const auto& cj = j.at("config");
    cfg.input_side = cj.at("input_side").get<int64_t>();
    cfg.stage_channels = cj.at("stage_channels").get<std::vector<int64_t>>();
    cfg.kernel = cj.at("kernel").get<int>();
    cfg.num_maxpools = cj.at("num_maxpools").get<int>();
    cfg.sag_source_stage = cj.at("sag_source_stage").get<int>();
    cfg.sag_gating_stage = cj.at("sag_gating_stage").get<int>();
    cfg.sag_intermediate_channels = cj.at("sag_intermediate_channels").get<int64_t>();
    cfg.num_classes = cj.at("num_classes").get<int>();
  } catch (const nlohmann::json::exception& e) {
    fail_data("checkpoint manifest missing config field: ", e.what());
  }

  ParamGraph<float> pg = build_network<float>(cfg, 0);
  char buf[32];
  std::snprintf(buf, sizeof buf, "%016llx",
                (unsigned long long)architecture_fingerprint(pg));
  const std::string want = j.value("fingerprint", "");
  if (want != buf)
    fail_data("checkpoint fingerprint mismatch: manifest says ", want,
              " but the stored config rebuilds to ", buf);

  const auto& tensors = j.at("tensors");
  if (tensors.size() != pg.entries.size())
    fail_data("checkpoint lists ", tensors.size(), " tensors, architecture has ",
              pg.entries.size());
  int64_t total = 0;
  for (size_t i = 0; i < pg.entries.size(); ++i) {
    const auto& t = tensors[i];
    if (t.at("name").get<std::string>() != pg.entries[i].name)
      fail_data("checkpoint tensor ", i, " named ", t.at("name").get<std::string>(),
                ", expected ", pg.entries[i].name);
    if (t.at("shape").get<Shape>() != pg.entries[i].value.shape)
      fail_data("checkpoint tensor ", pg.entries[i].name, " has unexpected shape");
    if (t.at("offset").get<int64_t>() != total)
      fail_data("checkpoint tensor ", pg.entries[i].name, " at unexpected offset");
    total += pg.entries[i].value.numel();
  }

  std::ifstream bin(dir + "/" + j.value("bin", "model.bin"), std::ios::binary);
  if (!bin) fail_data("cannot open checkpoint blob in ", dir);
  bin.seekg(0, std::ios::end);
  const int64_t bytes = int64_t(bin.tellg());
  if (bytes != total * int64_t(sizeof(float)))
    fail_data("checkpoint blob holds ", bytes, " bytes, expected ",
              total * int64_t(sizeof(float)));
  bin.seekg(0);
  for (auto& e : pg.entries) {
    bin.read(reinterpret_cast<char*>(e.value.data.data()),
             std::streamsize(e.value.data.size() * sizeof(float)));
    if (!bin) fail_data("truncated checkpoint blob in ", dir);
  }
  return pg;
}

}  // namespace colearn
