#include "kdstage/model.hpp"

#include <cmath>
#include <fstream>
#include <set>

#include "kdstage/container.hpp"
#include "kdstage/error.hpp"
#include "kdstage/rng.hpp"

namespace kdstage {

void ConvNetConfig::validate() const {
  if (channels == 0 || height == 0 || width == 0) throw ConfigError("model: empty input shape");
  if (num_classes < 2) throw ConfigError("model: num_classes must be >= 2");
  if (blocks.empty()) throw ConfigError("model: at least one conv block is required");
  if (attention_layer >= blocks.size()) {
    throw ConfigError("model: attention_layer " + std::to_string(attention_layer) + " out of range for " +
                      std::to_string(blocks.size()) + " blocks");
  }
  std::size_t h = height, w = width;
  for (const auto& b : blocks) {
    if (b.out_channels == 0) throw ConfigError("model: block with zero output channels");
    if (b.kernel_size == 0 || b.kernel_size % 2 == 0) {
      throw ConfigError("model: kernel_size must be odd (same padding)");
    }
    if (b.pool) {
      h /= 2;
      w /= 2;
    }
    if (h < 1 || w < 1) throw ConfigError("model: spatial size collapses below 1x1");
  }
}

Shape ConvNetConfig::activation_shape() const {
  validate();
  std::size_t h = height, w = width;
  for (std::size_t i = 0; i < attention_layer; ++i) {
    if (blocks[i].pool) {
      h /= 2;
      w /= 2;
    }
  }
  return {blocks[attention_layer].out_channels, h, w};
}

void to_json(nlohmann::json& j, const ConvNetConfig& c) {
  auto blocks = nlohmann::json::array();
  for (const auto& b : c.blocks) {
    blocks.push_back({{"out_channels", b.out_channels}, {"kernel_size", b.kernel_size}, {"pool", b.pool}});
  }
  j = {{"input_shape", {c.channels, c.height, c.width}},
       {"blocks", blocks},
       {"num_classes", c.num_classes},
       {"attention_layer", c.attention_layer},
       {"init_seed", c.init_seed}};
}

void from_json(const nlohmann::json& j, ConvNetConfig& c) {
  try {
    const auto& shape = j.at("input_shape");
    c.channels = shape.at(0).get<std::size_t>();
    c.height = shape.at(1).get<std::size_t>();
    c.width = shape.at(2).get<std::size_t>();
    c.blocks.clear();
    for (const auto& b : j.at("blocks")) {
      c.blocks.push_back({b.at("out_channels").get<std::size_t>(), b.at("kernel_size").get<std::size_t>(),
                          b.at("pool").get<bool>()});
    }
    c.num_classes = j.at("num_classes").get<std::size_t>();
    c.attention_layer = j.at("attention_layer").get<std::size_t>();
    c.init_seed = j.at("init_seed").get<std::uint64_t>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("model config: ") + e.what());
  }
}

double he_scale(std::size_t fan_in) { return std::sqrt(2.0 / static_cast<double>(fan_in)); }

namespace {

template <typename T>
BasicTensor<T> he_normal(Rng& rng, Shape shape, std::size_t fan_in) {
  const double scale = he_scale(fan_in);
  std::vector<T> values(shape_size(shape));
  for (auto& v : values) v = static_cast<T>(rng.normal(0.0, scale));
  return BasicTensor<T>(std::move(shape), std::move(values), true);
}

}  // namespace

template <typename T>
ConvClassifier<T>::ConvClassifier(ConvNetConfig config) : config_(std::move(config)) {
  config_.validate();
  Rng rng(config_.init_seed);
  std::size_t in_ch = config_.channels;
  for (std::size_t i = 0; i < config_.blocks.size(); ++i) {
    const auto& b = config_.blocks[i];
    const std::string prefix = "block" + std::to_string(i);
    params_.push_back({prefix + ".weight",
                       he_normal<T>(rng, {b.out_channels, in_ch, b.kernel_size, b.kernel_size},
                                    in_ch * b.kernel_size * b.kernel_size)});
    params_.push_back({prefix + ".bias", BasicTensor<T>::zeros({b.out_channels}, true)});
    in_ch = b.out_channels;
  }
  params_.push_back({"head.weight", he_normal<T>(rng, {config_.num_classes, in_ch}, in_ch)});
  params_.push_back({"head.bias", BasicTensor<T>::zeros({config_.num_classes}, true)});
}

template <typename T>
ConvClassifier<T> ConvClassifier<T>::clone() const {
  std::vector<NamedParameter<T>> params;
  for (const auto& p : params_) {
    auto copy = p.tensor.detach();
    copy.set_requires_grad(p.tensor.requires_grad());
    params.push_back({p.name, copy});
  }
  return ConvClassifier(config_, std::move(params));
}

template <typename T>
const BasicTensor<T>& ConvClassifier<T>::parameter(const std::string& name) const {
  for (const auto& p : params_) {
    if (p.name == name) return p.tensor;
  }
  throw ContractError("model: no parameter named " + name);
}

template <typename T>
void ConvClassifier<T>::set_trainable(bool on) {
  for (auto& p : params_) p.tensor.set_requires_grad(on);
}

template <typename T>
void ConvClassifier<T>::zero_grad() {
  for (auto& p : params_) p.tensor.zero_grad();
}

template <typename T>
ForwardResult<T> ConvClassifier<T>::forward(BasicTape<T>& tape, const BasicTensor<T>& image) const {
  if (image.shape() != config_.input_shape()) {
    throw ShapeError("model forward: expected image " + shape_str(config_.input_shape()) + ", got " +
                     shape_str(image.shape()));
  }
  ForwardResult<T> result;
  BasicTensor<T> x = image;
  for (std::size_t i = 0; i < config_.blocks.size(); ++i) {
    const auto& b = config_.blocks[i];
    x = tape.conv2d(x, params_[2 * i].tensor, params_[2 * i + 1].tensor, {1, b.kernel_size / 2});
    x = tape.relu(x);
    if (i == config_.attention_layer) result.activations = x;
    if (b.pool) x = tape.max_pool2d(x);
  }
  const auto pooled = tape.global_average_pool(x);
  const auto& head_w = params_[params_.size() - 2].tensor;
  const auto& head_b = params_.back().tensor;
  result.logits = tape.add(tape.matmul(head_w, pooled), head_b);
  return result;
}

template <typename T>
BasicTensor<T> ConvClassifier<T>::logits(const BasicTensor<T>& image) const {
  BasicTape<T> tape;
  return forward(tape, image).logits.detach();
}

template class ConvClassifier<float>;
template class ConvClassifier<double>;

// --- checkpoints -----------------------------------------------------------

namespace {

constexpr const char* kCheckpointFormat = "kdstage-checkpoint";
constexpr const char* kManifestName = "manifest.json";

}  // namespace

void save_checkpoint(const ConvClassifier<float>& model, const std::filesystem::path& dir,
                     const nlohmann::json& provenance) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw IoError("cannot create checkpoint directory " + dir.string() + ": " + ec.message());
  auto params = nlohmann::json::array();
  for (const auto& p : model.parameters()) {
    const std::string file = p.name + ".dtk";
    save_tensor(dir / file, p.tensor);
    params.push_back({{"name", p.name}, {"shape", p.tensor.shape()}, {"file", file}, {"dtype", "f32"}});
  }
  nlohmann::json manifest = {{"format", kCheckpointFormat},
                             {"version", 1},
                             {"config", model.config()},
                             {"parameters", params},
                             {"provenance", provenance}};
  std::ofstream out(dir / kManifestName, std::ios::trunc);
  if (!out) throw IoError("cannot write " + (dir / kManifestName).string());
  out << manifest.dump(2) << '\n';
}

nlohmann::json read_checkpoint_manifest(const std::filesystem::path& dir) {
  const auto path = dir / kManifestName;
  std::ifstream in(path);
  if (!in) throw IoError("cannot open checkpoint manifest " + path.string());
  nlohmann::json manifest;
  try {
    in >> manifest;
  } catch (const nlohmann::json::exception& e) {
    throw CorruptDataError(path.string() + ": " + e.what());
  }
  if (!manifest.is_object() || manifest.value("format", "") != kCheckpointFormat) {
    throw CorruptDataError(path.string() + ": not a checkpoint manifest");
  }
  return manifest;
}

ConvClassifier<float> load_checkpoint(const std::filesystem::path& dir) {
  const auto manifest = read_checkpoint_manifest(dir);
  return load_checkpoint(dir, manifest.at("config").get<ConvNetConfig>());
}

ConvClassifier<float> load_checkpoint(const std::filesystem::path& dir, const ConvNetConfig& expected) {
  const auto manifest = read_checkpoint_manifest(dir);
  auto stored = manifest.at("config").get<ConvNetConfig>();
  stored.validate();
  if (stored.num_classes != expected.num_classes) {
    throw ConfigError("checkpoint " + dir.string() + ": num_classes " + std::to_string(stored.num_classes) +
                      " does not match expected " + std::to_string(expected.num_classes));
  }
  auto comparable = expected;
  comparable.init_seed = stored.init_seed;
  if (!(stored == comparable)) throw ConfigError("checkpoint " + dir.string() + ": architecture mismatch");

  ConvClassifier<float> model(stored);
  std::set<std::string> seen;
  const auto& entries = manifest.at("parameters");
  if (entries.size() != model.parameters().size()) {
    throw CorruptDataError("checkpoint " + dir.string() + ": parameter count mismatch");
  }
  for (const auto& entry : entries) {
    const auto name = entry.at("name").get<std::string>();
    if (!seen.insert(name).second) throw CorruptDataError("checkpoint: duplicate parameter " + name);
    auto loaded = load_tensor<float>(dir / entry.at("file").get<std::string>());
    bool matched = false;
    for (auto& p : model.parameters()) {
      if (p.name != name) continue;
      if (p.tensor.shape() != loaded.shape()) {
        throw ShapeError("checkpoint parameter " + name + ": expected " + shape_str(p.tensor.shape()) +
                         ", file has " + shape_str(loaded.shape()));
      }
      loaded.set_requires_grad(true);
      p.tensor = loaded;
      matched = true;
    }
    if (!matched) throw CorruptDataError("checkpoint: unknown parameter " + name);
  }
  return model;
}

}  // namespace kdstage
