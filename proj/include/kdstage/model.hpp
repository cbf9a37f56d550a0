#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "json.hpp"
#include "kdstage/tape.hpp"
#include "kdstage/tensor.hpp"

namespace kdstage {

struct ConvBlockSpec {
  std::size_t out_channels = 8;
  std::size_t kernel_size = 3;
  bool pool = false;

  bool operator==(const ConvBlockSpec&) const = default;
};

// Shared teacher/student architecture: conv blocks (same padding, relu,
// optional 2x2 max-pool), global average pool, linear head.
struct ConvNetConfig {
  std::size_t channels = 1;
  std::size_t height = 64;
  std::size_t width = 64;
  std::vector<ConvBlockSpec> blocks{{8, 3, true}, {16, 3, true}, {32, 3, false}};
  std::size_t num_classes = 5;
  // Block whose post-relu output is exposed as the Grad-CAM activation map.
  std::size_t attention_layer = 2;
  std::uint64_t init_seed = 0;

  bool operator==(const ConvNetConfig&) const = default;

  // Throws ConfigError.
  void validate() const;
  Shape input_shape() const { return {channels, height, width}; }
  Shape activation_shape() const;
};

void to_json(nlohmann::json& j, const ConvNetConfig& config);
void from_json(const nlohmann::json& j, ConvNetConfig& config);

// He initialization scale sqrt(2 / fan_in).
double he_scale(std::size_t fan_in);

template <typename T>
struct NamedParameter {
  std::string name;
  BasicTensor<T> tensor;
};

template <typename T>
struct ForwardResult {
  BasicTensor<T> logits;       // (K)
  BasicTensor<T> activations;  // (C,h,w), post-relu output of the attention block
};

template <typename T>
class ConvClassifier {
 public:
  // He-normal weights and zero biases drawn from config.init_seed.
  explicit ConvClassifier(ConvNetConfig config);

  ConvClassifier(ConvClassifier&&) noexcept = default;
  ConvClassifier& operator=(ConvClassifier&&) noexcept = default;
  // Parameters are tensor handles; copying would alias them. Use clone().
  ConvClassifier(const ConvClassifier&) = delete;
  ConvClassifier& operator=(const ConvClassifier&) = delete;

  ConvClassifier clone() const;
  template <typename U>
  ConvClassifier<U> cast() const;

  const ConvNetConfig& config() const { return config_; }
  const std::vector<NamedParameter<T>>& parameters() const { return params_; }
  std::vector<NamedParameter<T>>& parameters() { return params_; }
  const BasicTensor<T>& parameter(const std::string& name) const;

  // Frozen models record nothing on the tape.
  void set_trainable(bool on);
  void zero_grad();

  ForwardResult<T> forward(BasicTape<T>& tape, const BasicTensor<T>& image) const;
  // Convenience evaluation on a private tape.
  BasicTensor<T> logits(const BasicTensor<T>& image) const;

 private:
  ConvClassifier(ConvNetConfig config, std::vector<NamedParameter<T>> params)
      : config_(std::move(config)), params_(std::move(params)) {}
  template <typename U>
  friend class ConvClassifier;

  ConvNetConfig config_;
  std::vector<NamedParameter<T>> params_;
};

template <typename T>
template <typename U>
ConvClassifier<U> ConvClassifier<T>::cast() const {
  std::vector<NamedParameter<U>> params;
  for (const auto& p : params_) params.push_back({p.name, p.tensor.template cast<U>()});
  return ConvClassifier<U>(config_, std::move(params));
}

// Checkpoint directory: manifest.json (config, parameter names/shapes/files,
// provenance) plus one DTK1 container per parameter.
void save_checkpoint(const ConvClassifier<float>& model, const std::filesystem::path& dir,
                     const nlohmann::json& provenance = nlohmann::json::object());
// Config comes from the manifest.
ConvClassifier<float> load_checkpoint(const std::filesystem::path& dir);
// Raises ConfigError when the stored config differs from `expected`
// (init_seed excepted).
ConvClassifier<float> load_checkpoint(const std::filesystem::path& dir, const ConvNetConfig& expected);
nlohmann::json read_checkpoint_manifest(const std::filesystem::path& dir);

}  // namespace kdstage
