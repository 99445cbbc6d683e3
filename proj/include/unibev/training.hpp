#pragma once

// Full model (encoder + fusion), weighted cross-entropy, AdamW, per-frame
// forward/backward, the streaming training loop, evaluation and checkpoints.

#include "unibev/encoder.hpp"
#include "unibev/evalkit.hpp"
#include "unibev/feature_queue.hpp"
#include "unibev/fusion.hpp"
#include "unibev/nn.hpp"
#include "unibev/simulator.hpp"
#include "unibev/tensor.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <functional>
#include <memory>
#include <numeric>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

namespace unibev {

// ---------------------------------------------------------------------------
// Model

struct ModelConfig {
  FusionConfig fusion;
  int image_channels = 3;

  /// Query grid, classes and upsampling of an evaluation setting.
  static ModelConfig for_setting(const EvalSetting& s, int channels, int layers) {
    ModelConfig m;
    m.fusion.channels = channels;
    m.fusion.layers = layers;
    m.fusion.head_hidden = channels;
    m.fusion.num_classes = s.num_classes();
    m.fusion.query_x = s.query_x;
    m.fusion.query_y = s.query_y;
    m.fusion.upsample = s.upsample_factor;
    return m;
  }

  BevGridSpec grid_spec(const EvalSetting& s) const {
    BevGridSpec g = s.grid_spec(fusion.heights);
    if (g.x_cells != fusion.query_x || g.y_cells != fusion.query_y || g.upsample_factor != fusion.upsample) {
      throw std::invalid_argument("model query grid does not match setting " + s.name);
    }
    return g;
  }
};

inline nlohmann::json config_to_json(const ModelConfig& m) {
  const FusionConfig& f = m.fusion;
  return {{"channels", f.channels},   {"layers", f.layers},       {"points", f.points},
          {"levels", f.levels},       {"num_classes", f.num_classes}, {"query_x", f.query_x},
          {"query_y", f.query_y},     {"upsample", f.upsample},   {"head_hidden", f.head_hidden},
          {"heights", f.heights},     {"self_regression", f.self_regression},
          {"image_channels", m.image_channels}};
}

inline ModelConfig config_from_json(const nlohmann::json& j) {
  ModelConfig m;
  FusionConfig& f = m.fusion;
  f.channels = j.at("channels").get<int>();
  f.layers = j.at("layers").get<int>();
  f.points = j.at("points").get<int>();
  f.levels = j.at("levels").get<int>();
  f.num_classes = j.at("num_classes").get<int>();
  f.query_x = j.at("query_x").get<int>();
  f.query_y = j.at("query_y").get<int>();
  f.upsample = j.at("upsample").get<int>();
  f.head_hidden = j.at("head_hidden").get<int>();
  f.heights = j.at("heights").get<std::vector<double>>();
  f.self_regression = j.at("self_regression").get<bool>();
  m.image_channels = j.value("image_channels", 3);
  f.validate();
  return m;
}

template <typename T>
struct Model {
  ModelConfig config;
  EncoderParams<T> encoder;
  FusionParams<T> fusion;

  static Model zeros(const ModelConfig& cfg) {
    return {cfg, EncoderParams<T>::zeros(cfg.image_channels, cfg.fusion.channels), FusionParams<T>::zeros(cfg.fusion)};
  }

  template <typename F>
  void visit(F&& f) {
    encoder.visit("encoder.", f);
    fusion.visit("fusion.", f);
  }

  std::vector<Tensor<T>*> tensors() {
    std::vector<Tensor<T>*> out;
    visit([&](const std::string&, Tensor<T>& t) { out.push_back(&t); });
    return out;
  }

  std::vector<std::string> names() {
    std::vector<std::string> out;
    visit([&](const std::string& n, Tensor<T>&) { out.push_back(n); });
    return out;
  }

  template <typename U>
  Model<U> cast() const {
    Model<U> out = Model<U>::zeros(config);
    Model<T> self = *this;
    auto src = self.tensors();
    auto dst = out.tensors();
    for (std::size_t k = 0; k < src.size(); ++k) *dst[k] = src[k]->template cast<U>();
    return out;
  }
};

template <typename T>
Model<T> init_model(const ModelConfig& cfg, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  Model<T> m = Model<T>::zeros(cfg);
  for (auto& conv : m.encoder.convs) init_uniform_fan_in(conv.weight, 9 * conv.in_channels(), rng);
  m.fusion = init_fusion<T>(cfg.fusion, rng);
  return m;
}

// ---------------------------------------------------------------------------
// Loss

struct LossConfig {
  double background_weight = 0.4;
  int num_classes = 3;

  void validate() const {
    if (!(background_weight > 0.0)) throw std::invalid_argument("class weights must be positive");
    if (num_classes < 2) throw std::invalid_argument("need at least two classes");
  }
};

template <typename T>
struct LossResult {
  T loss = T(0);
  FeatureMap<T> grad;  // d loss / d logits
};

/// Mean over pixels of w_label * -log softmax(logits)_label; w_0 is the
/// background weight, every other class weighs 1.
template <typename T>
LossResult<T> weighted_cross_entropy(const FeatureMap<T>& logits, const LabelGrid& labels, const LossConfig& cfg) {
  cfg.validate();
  if (logits.height != labels.height || logits.width != labels.width) {
    throw std::invalid_argument("logit and label grids differ in shape");
  }
  if (logits.channels != cfg.num_classes) throw std::invalid_argument("logit channels != class count");
  const int k = logits.channels;
  const std::size_t npx = static_cast<std::size_t>(labels.height) * labels.width;
  LossResult<T> r;
  r.grad = FeatureMap<T>(logits.height, logits.width, k, logits.stride);
  const T inv_n = T(1) / static_cast<T>(npx);
  std::vector<T> prob(static_cast<std::size_t>(k));
  for (std::size_t i = 0; i < npx; ++i) {
    const int y = labels.labels[i];
    if (y >= k) throw std::invalid_argument("label " + std::to_string(y) + " outside [0, " + std::to_string(k) + ")");
    const T* z = logits.data.data() + i * k;
    std::copy(z, z + k, prob.begin());
    const T mx = *std::max_element(prob.begin(), prob.end());
    T sum = T(0);
    for (T& v : prob) sum += std::exp(v - mx);
    const T log_sum = std::log(sum) + mx;
    const T w = y == 0 ? static_cast<T>(cfg.background_weight) : T(1);
    r.loss += w * (log_sum - z[y]) * inv_n;
    T* g = r.grad.data.data() + i * k;
    for (int c = 0; c < k; ++c) g[c] = w * inv_n * (std::exp(z[c] - log_sum) - (c == y ? T(1) : T(0)));
  }
  return r;
}

// ---------------------------------------------------------------------------
// AdamW

struct AdamConfig {
  double beta1 = 0.9, beta2 = 0.999, epsilon = 1e-8;
};

template <typename T>
struct AdamState {
  std::vector<std::vector<T>> m, v;
  long long step = 0;
};

/// Decoupled decay p -= lr * wd * p, then the bias-corrected Adam update.
template <typename T>
void adam_step(const std::vector<Tensor<T>*>& params, const std::vector<Tensor<T>*>& grads, AdamState<T>& state,
               double lr, double weight_decay, const AdamConfig& cfg = {}) {
  if (params.size() != grads.size()) throw std::invalid_argument("parameter/gradient count mismatch");
  if (state.m.empty()) {
    for (const Tensor<T>* p : params) {
      state.m.emplace_back(p->size(), T(0));
      state.v.emplace_back(p->size(), T(0));
    }
  }
  ++state.step;
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.step));
  for (std::size_t k = 0; k < params.size(); ++k) {
    Tensor<T>& p = *params[k];
    const Tensor<T>& g = *grads[k];
    if (p.size() != g.size()) throw std::invalid_argument("parameter/gradient shape mismatch");
    auto& m = state.m[k];
    auto& v = state.v[k];
    for (std::size_t i = 0; i < p.size(); ++i) {
      double pi = static_cast<double>(p[i]);
      const double gi = static_cast<double>(g[i]);
      pi -= lr * weight_decay * pi;
      const double mi = cfg.beta1 * static_cast<double>(m[i]) + (1.0 - cfg.beta1) * gi;
      const double vi = cfg.beta2 * static_cast<double>(v[i]) + (1.0 - cfg.beta2) * gi * gi;
      m[i] = static_cast<T>(mi);
      v[i] = static_cast<T>(vi);
      pi -= lr * (mi / bc1) / (std::sqrt(vi / bc2) + cfg.epsilon);
      p[i] = static_cast<T>(pi);
    }
  }
}

// ---------------------------------------------------------------------------
// Per-frame forward/backward

enum class FusionMode { kUnified, kEqualWeight, kNoTemporal };

inline FusionMode parse_fusion_mode(const std::string& s) {
  if (s == "unified") return FusionMode::kUnified;
  if (s == "equal_weight") return FusionMode::kEqualWeight;
  if (s == "no_temporal") return FusionMode::kNoTemporal;
  throw std::invalid_argument("unknown fusion mode '" + s + "' (expected unified, equal_weight or no_temporal)");
}

inline std::string fusion_mode_name(FusionMode m) {
  switch (m) {
    case FusionMode::kUnified: return "unified";
    case FusionMode::kEqualWeight: return "equal_weight";
    case FusionMode::kNoTemporal: return "no_temporal";
  }
  return "unified";
}

template <typename T>
struct FrameState {
  std::vector<EncoderCache<T>> encoder;  // current-step cameras
  SampledValueTable<T> table;
  TransformerCache<T> transformer;
  HeadCache<T> head;
  FeatureMap<T> logits;
  TransformerStats stats;
};

/// Encodes every camera image of one step.
template <typename T>
std::vector<MultiScaleFeatures<T>> encode_frame(const Model<T>& model, const std::vector<Image>& images,
                                                std::vector<EncoderCache<T>>* caches = nullptr) {
  std::vector<MultiScaleFeatures<T>> out;
  if (caches) caches->assign(images.size(), EncoderCache<T>{});
  for (std::size_t c = 0; c < images.size(); ++c) {
    if constexpr (std::is_same_v<T, float>) {
      out.push_back(encode_image(images[c], model.encoder, caches ? &(*caches)[c] : nullptr));
    } else {
      out.push_back(encode_image(images[c].template cast<T>(), model.encoder, caches ? &(*caches)[c] : nullptr));
    }
  }
  return out;
}

/// Fusion + head for the newest window entry. `window` must start with the
/// current step.
template <typename T>
FeatureMap<T> forward_fusion(const Model<T>& model, const QueueWindow<T>& window, const BevGridSpec& spec,
                             FusionMode mode, FrameState<T>* state = nullptr) {
  const FusionConfig& cfg = model.config.fusion;
  QueueWindow<T> w = window;
  if (mode == FusionMode::kNoTemporal && w.size() > 1) w.resize(1);
  SampledValueTable<T> table = gather_values(w, spec);
  if (mode == FusionMode::kEqualWeight) table = temporal_average_baseline(table);
  const RowMat<T> q0 = ConstMatMap<T>(model.fusion.queries.ptr(), cfg.num_queries(), cfg.channels);
  TransformerStats stats;
  const RowMat<T> out = run_transformer(q0, cfg.query_x, cfg.query_y, table, model.fusion, cfg.self_regression,
                                        state ? &state->transformer : nullptr, &stats);
  FeatureMap<T> logits =
      segmentation_head(out, cfg.query_x, cfg.query_y, model.fusion.head, state ? &state->head : nullptr);
  if (state) {
    state->table = std::move(table);
    state->logits = logits;
    state->stats = stats;
  }
  return logits;
}

/// Accumulates gradients of all parameters given d loss / d logits. Past
/// window entries are treated as constants; encoder gradients flow through
/// the current step only.
template <typename T>
void backward_frame(const Model<T>& model, const FrameState<T>& state, const FeatureMap<T>& dlogits, Model<T>& grad) {
  const FusionConfig& cfg = model.config.fusion;
  const RowMat<T> dq = segmentation_head_backward(state.head, cfg.query_x, cfg.query_y, model.fusion.head, dlogits,
                                                  grad.fusion.head);
  std::vector<T> dvalues(state.table.values.size(), T(0));
  const RowMat<T> dq0 = run_transformer_backward(state.transformer, cfg.query_y, state.table, model.fusion,
                                                 cfg.self_regression, dq, grad.fusion, &dvalues);
  as_vector(grad.fusion.queries) += ConstVecMap<T>(dq0.data(), dq0.size());
  if (state.encoder.empty()) return;
  std::vector<std::vector<FeatureMap<T>>> level_grads(state.encoder.size());
  for (std::size_t c = 0; c < state.encoder.size(); ++c) {
    for (int l = 1; l < kEncoderConvs; ++l) {
      const FeatureMap<T>& s = state.encoder[c].stages[static_cast<std::size_t>(l)];
      level_grads[c].emplace_back(s.height, s.width, s.channels, s.stride);
    }
  }
  scatter_value_grads(state.table, dvalues, level_grads);
  for (std::size_t c = 0; c < state.encoder.size(); ++c) {
    encode_image_backward(state.encoder[c], model.encoder, level_grads[c], grad.encoder);
  }
}

template <typename T>
LabelGrid argmax_labels(const FeatureMap<T>& logits, const EvalSetting& setting) {
  LabelGrid g = LabelGrid::for_setting(setting);
  if (g.height != logits.height || g.width != logits.width) throw std::invalid_argument("logits do not match setting");
  for (std::size_t i = 0; i < g.labels.size(); ++i) {
    const T* z = logits.data.data() + i * logits.channels;
    g.labels[i] = static_cast<std::uint8_t>(std::max_element(z, z + logits.channels) - z);
  }
  return g;
}

template <typename T>
FeatureMap<T> softmax_probabilities(const FeatureMap<T>& logits) {
  FeatureMap<T> p = logits;
  for (std::size_t i = 0; i < p.data.size(); i += static_cast<std::size_t>(p.channels)) {
    softmax_inplace(std::span<T>(p.data.data() + i, static_cast<std::size_t>(p.channels)));
  }
  return p;
}

// ---------------------------------------------------------------------------
// Datasets

struct SceneData {
  SceneSpec scene;
  std::shared_ptr<const CameraRig> rig;
  std::vector<std::vector<Image>> frames;  // [step][camera]
  std::vector<LabelGrid> labels;           // per step
};

inline SceneData build_scene_data(SceneSpec scene, const EvalSetting& setting, const RenderOptions& opt = {}) {
  SceneData d;
  d.rig = std::make_shared<const CameraRig>(scene.rig);
  for (int t = 0; t < scene.num_steps(); ++t) {
    d.frames.push_back(render_frame(scene, t, opt).images);
    d.labels.push_back(gt_raster(scene, t, setting));
  }
  d.scene = std::move(scene);
  return d;
}

// ---------------------------------------------------------------------------
// Training loop

enum class EvalSteps { kAll, kLast };

struct EvalConfig {
  int p_infer = 6;
  FusionMode mode = FusionMode::kUnified;
  EvalSteps steps = EvalSteps::kAll;
};

struct TrainConfig {
  int p_train = 2;
  int p_infer = 6;
  double learning_rate = 2e-4;
  double weight_decay = 1e-4;
  int epochs = 10;
  int lr_drop_epoch = 8;  // 1-based epoch from which lr is multiplied by lr_drop_factor
  double lr_drop_factor = 0.1;
  std::uint64_t seed = 0;
  FusionMode mode = FusionMode::kUnified;
  EvalSteps eval_steps = EvalSteps::kAll;

  void validate() const {
    if (p_train < 0 || p_infer < 0) throw std::invalid_argument("temporal depths must be non-negative");
    if (p_train > kMaxPastSteps || p_infer > kMaxPastSteps) {
      throw std::invalid_argument("temporal depth exceeds " + std::to_string(kMaxPastSteps));
    }
    if (epochs < 0) throw std::invalid_argument("epochs must be non-negative");
  }
};

struct EpochRecord {
  int epoch = 0;
  double loss = 0.0;
  double learning_rate = 0.0;
  double miou = std::nan("");
};

struct TrainRecord {
  std::vector<EpochRecord> epochs;
  std::vector<double> step_losses;
};

inline nlohmann::json record_to_json(const TrainRecord& r, const std::string& setting) {
  nlohmann::json ep = nlohmann::json::array();
  for (const auto& e : r.epochs) {
    nlohmann::json j = {{"epoch", e.epoch}, {"loss", e.loss}, {"learning_rate", e.learning_rate}};
    j["miou"] = nlohmann::json::object();
    if (!std::isnan(e.miou)) j["miou"][setting] = e.miou;
    ep.push_back(j);
  }
  return {{"epochs", ep}};
}

class NonFiniteLoss : public std::runtime_error {
 public:
  NonFiniteLoss(long long step, double value)
      : std::runtime_error("non-finite loss " + std::to_string(value) + " at training step " + std::to_string(step)),
        step_(step) {}
  long long step() const { return step_; }

 private:
  long long step_;
};

template <typename T>
IouResult evaluate(const Model<T>& model, const std::vector<SceneData>& scenes, const EvalSetting& setting,
                   const EvalConfig& cfg) {
  const BevGridSpec spec = model.config.grid_spec(setting);
  IouAccumulator acc(setting);
  for (const SceneData& s : scenes) {
    FeatureQueue<T> queue(kMaxPastSteps + 1);
    const int n = static_cast<int>(s.frames.size());
    const int first = cfg.steps == EvalSteps::kLast ? std::max(0, n - 1 - cfg.p_infer) : 0;
    for (int t = first; t < n; ++t) {
      queue.push(QueueEntry<T>{t, encode_frame(model, s.frames[static_cast<std::size_t>(t)]), s.scene.ego(t), s.rig});
      if (cfg.steps == EvalSteps::kLast && t != n - 1) continue;
      const FeatureMap<T> logits = forward_fusion(model, queue.window(cfg.p_infer), spec, cfg.mode);
      acc.add(argmax_labels(logits, setting), s.labels[static_cast<std::size_t>(t)]);
    }
  }
  return acc.result();
}

using EpochCallback = std::function<void(const EpochRecord&)>;

/// Streams every scene in step order: encode the frame, push it to the
/// queue, fuse a window of depth p_train, backpropagate, update. Validation
/// (if scenes are given) uses p_infer.
template <typename T>
TrainRecord train_loop(Model<T>& model, const std::vector<SceneData>& train, const std::vector<SceneData>& val,
                       const EvalSetting& setting, const TrainConfig& cfg, const LossConfig& loss_cfg,
                       const EpochCallback& on_epoch = {}) {
  cfg.validate();
  loss_cfg.validate();
  const BevGridSpec spec = model.config.grid_spec(setting);
  auto params = model.tensors();
  Model<T> grad = Model<T>::zeros(model.config);
  auto grads = grad.tensors();
  AdamState<T> adam;
  std::mt19937_64 rng(cfg.seed ^ 0x9e3779b97f4a7c15ULL);
  TrainRecord record;
  long long global_step = 0;
  std::vector<std::size_t> order(train.size());
  std::iota(order.begin(), order.end(), 0);
  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    const double lr = cfg.learning_rate * (epoch >= cfg.lr_drop_epoch ? cfg.lr_drop_factor : 1.0);
    std::shuffle(order.begin(), order.end(), rng);
    double loss_sum = 0.0;
    long long count = 0;
    for (std::size_t si : order) {
      const SceneData& s = train[si];
      FeatureQueue<T> queue(kMaxPastSteps + 1);
      for (int t = 0; t < static_cast<int>(s.frames.size()); ++t) {
        FrameState<T> state;
        auto feats = encode_frame(model, s.frames[static_cast<std::size_t>(t)], &state.encoder);
        queue.push(QueueEntry<T>{t, std::move(feats), s.scene.ego(t), s.rig});
        forward_fusion(model, queue.window(cfg.p_train), spec, cfg.mode, &state);
        const LossResult<T> lr_out = weighted_cross_entropy(state.logits, s.labels[static_cast<std::size_t>(t)], loss_cfg);
        const double loss = static_cast<double>(lr_out.loss);
        if (!std::isfinite(loss)) throw NonFiniteLoss(global_step, loss);
        for (Tensor<T>* g : grads) g->zero();
        backward_frame(model, state, lr_out.grad, grad);
        adam_step(params, grads, adam, lr, cfg.weight_decay);
        record.step_losses.push_back(loss);
        loss_sum += loss;
        ++count;
        ++global_step;
      }
    }
    EpochRecord er;
    er.epoch = epoch;
    er.learning_rate = lr;
    er.loss = count > 0 ? loss_sum / static_cast<double>(count) : 0.0;
    if (!val.empty()) er.miou = evaluate(model, val, setting, EvalConfig{cfg.p_infer, cfg.mode, cfg.eval_steps}).mean;
    record.epochs.push_back(er);
    if (on_epoch) on_epoch(er);
  }
  return record;
}

// ---------------------------------------------------------------------------
// Parameter directories: one UBT1 file per tensor plus index.json.

inline void save_model(const std::string& dir, Model<float>& model) {
  std::filesystem::create_directories(dir);
  nlohmann::json tensors = nlohmann::json::object();
  model.visit([&](const std::string& name, Tensor<float>& t) {
    const std::string file = name + ".ubt";
    write_ubt1((std::filesystem::path(dir) / file).string(), t);
    tensors[name] = {{"file", file}, {"shape", t.shape}};
  });
  write_json_file((std::filesystem::path(dir) / "index.json").string(),
                  {{"config", config_to_json(model.config)}, {"tensors", tensors}});
}

inline Model<float> load_model(const std::string& dir) {
  const nlohmann::json index = read_json_file((std::filesystem::path(dir) / "index.json").string());
  Model<float> model = Model<float>::zeros(config_from_json(index.at("config")));
  const auto& tensors = index.at("tensors");
  model.visit([&](const std::string& name, Tensor<float>& t) {
    if (!tensors.contains(name)) throw std::runtime_error("checkpoint is missing tensor " + name);
    const auto& entry = tensors.at(name);
    Tensor<float> loaded = read_ubt1((std::filesystem::path(dir) / entry.at("file").get<std::string>()).string());
    if (loaded.shape != t.shape) throw std::runtime_error("tensor " + name + " has unexpected shape");
    t = std::move(loaded);
  });
  return model;
}

}  // namespace unibev
