#include "kdstage/gradcam.hpp"

#include <cmath>
#include <fstream>

#include "kdstage/error.hpp"
#include "kdstage/losses.hpp"

namespace kdstage {

RoiMask make_roi_mask(std::size_t height, std::size_t width, const RoiBox& bbox) {
  if (bbox.height == 0 || bbox.width == 0 || bbox.row + bbox.height > height || bbox.col + bbox.width > width) {
    throw ShapeError("roi mask: bbox does not fit inside " + shape_str({height, width}));
  }
  std::vector<float> values(height * width, 0.0f);
  for (std::size_t r = bbox.row; r < bbox.row + bbox.height; ++r) {
    for (std::size_t c = bbox.col; c < bbox.col + bbox.width; ++c) values[r * width + c] = 1.0f;
  }
  return {Tensor({height, width}, std::move(values)), bbox};
}

void validate_roi_mask(const RoiMask& mask) {
  if (mask.values.ndim() != 2) throw CorruptDataError("roi mask: expected a 2-D tensor");
  const std::size_t h = mask.values.dim(0), w = mask.values.dim(1);
  const auto& b = mask.bbox;
  if (b.height == 0 || b.width == 0 || b.row + b.height > h || b.col + b.width > w) {
    throw CorruptDataError("roi mask: bbox outside the grid");
  }
  auto v = mask.values.values();
  for (std::size_t r = 0; r < h; ++r) {
    for (std::size_t c = 0; c < w; ++c) {
      const bool inside = r >= b.row && r < b.row + b.height && c >= b.col && c < b.col + b.width;
      if (v[r * w + c] != (inside ? 1.0f : 0.0f)) throw CorruptDataError("roi mask: values do not match bbox");
    }
  }
}

template <typename T>
BasicTensor<T> gradcam_weights(const BasicTensor<T>& grad) {
  if (grad.ndim() != 3) throw ShapeError("gradcam_weights: expected (C,h,w), got " + shape_str(grad.shape()));
  const std::size_t c = grad.dim(0), z = grad.dim(1) * grad.dim(2);
  auto g = grad.values();
  std::vector<T> w(c);
  for (std::size_t ch = 0; ch < c; ++ch) {
    T acc = 0;
    for (std::size_t i = 0; i < z; ++i) acc += g[ch * z + i];
    w[ch] = acc / static_cast<T>(z);
  }
  return BasicTensor<T>({c}, std::move(w));
}

template <typename T>
AttentionMap<T> gradcam_heatmap(BasicTape<T>& tape, const BasicTensor<T>& activations, const BasicTensor<T>& weights) {
  if (activations.ndim() != 3) {
    throw ShapeError("gradcam_heatmap: expected (C,h,w), got " + shape_str(activations.shape()));
  }
  if (weights.shape() != Shape{activations.dim(0)}) {
    throw ShapeError("gradcam_heatmap: activations " + shape_str(activations.shape()) + " vs weights " +
                     shape_str(weights.shape()));
  }
  const auto raw = tape.channel_weighted_sum(activations, weights.values());
  const std::size_t h = activations.dim(1), w = activations.dim(2);
  return {tape.min_max_normalize(raw), h, w, h, w};
}

template <typename T>
AttentionMap<T> upsample_bilinear(BasicTape<T>& tape, const AttentionMap<T>& map, std::size_t target_h,
                                  std::size_t target_w) {
  if (target_h < map.target_h || target_w < map.target_w) {
    throw ShapeError("upsample_bilinear: target " + shape_str({target_h, target_w}) + " smaller than map " +
                     shape_str({map.target_h, map.target_w}));
  }
  return {tape.upsample_bilinear(map.values, target_h, target_w), map.source_h, map.source_w, target_h, target_w};
}

template <typename T>
AttentionPass<T> attention_from_forward(BasicTape<T>& tape, const ForwardResult<T>& forward, std::size_t label,
                                        std::size_t target_h, std::size_t target_w) {
  AttentionPass<T> pass;
  pass.cls_loss = cross_entropy(tape, forward.logits, label);
  // Weights come from d(log p_label)/dA = -dL_cls/dA. The loss gradient
  // itself would flip the sign of the raw map, and min-max normalization
  // turns a sign flip into 1 - map rather than absorbing it.
  BasicTensor<T> grad = forward.activations.requires_grad()
                            ? tape.gradient(tape.scale(pass.cls_loss, T(-1)), forward.activations)
                            : BasicTensor<T>::zeros(forward.activations.shape());
  pass.weights = gradcam_weights(grad);
  pass.map = upsample_bilinear(tape, gradcam_heatmap(tape, forward.activations, pass.weights), target_h, target_w);
  return pass;
}

AttentionMap<float> student_attention(const ConvClassifier<float>& model, const Tensor& image, std::size_t label,
                                      std::size_t target_h, std::size_t target_w) {
  // Track the image so the activations are recorded even for a frozen model.
  auto tracked = image.detach();
  tracked.set_requires_grad(true);
  Tape tape;
  const auto forward = model.forward(tape, tracked);
  auto pass = attention_from_forward(tape, forward, label, target_h, target_w);
  pass.map.values = pass.map.values.detach();
  return pass.map;
}

double overlap_score(const AttentionMap<float>& map, const RoiMask& mask) {
  if (map.values.shape() != mask.values.shape()) {
    throw ShapeError("overlap_score: heatmap " + shape_str(map.values.shape()) + " vs mask " +
                     shape_str(mask.values.shape()));
  }
  auto a = map.values.values();
  auto m = mask.values.values();
  double inside = 0, total = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    inside += static_cast<double>(a[i]) * m[i];
    total += a[i];
  }
  return total > 0 ? inside / total : 0.0;
}

void write_pgm(const std::filesystem::path& path, const Tensor& map) {
  if (map.ndim() != 2) throw ShapeError("write_pgm: expected a 2-D map, got " + shape_str(map.shape()));
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  out << "P5\n" << map.dim(1) << ' ' << map.dim(0) << "\n255\n";
  for (float v : map.values()) {
    const float clamped = std::min(1.0f, std::max(0.0f, v));
    out.put(static_cast<char>(static_cast<unsigned char>(std::lround(clamped * 255.0f))));
  }
  if (!out) throw IoError("write failed: " + path.string());
}

template BasicTensor<float> gradcam_weights(const BasicTensor<float>&);
template BasicTensor<double> gradcam_weights(const BasicTensor<double>&);
template AttentionMap<float> gradcam_heatmap(BasicTape<float>&, const BasicTensor<float>&, const BasicTensor<float>&);
template AttentionMap<double> gradcam_heatmap(BasicTape<double>&, const BasicTensor<double>&,
                                              const BasicTensor<double>&);
template AttentionMap<float> upsample_bilinear(BasicTape<float>&, const AttentionMap<float>&, std::size_t,
                                               std::size_t);
template AttentionMap<double> upsample_bilinear(BasicTape<double>&, const AttentionMap<double>&, std::size_t,
                                                std::size_t);
template AttentionPass<float> attention_from_forward(BasicTape<float>&, const ForwardResult<float>&, std::size_t,
                                                     std::size_t, std::size_t);
template AttentionPass<double> attention_from_forward(BasicTape<double>&, const ForwardResult<double>&,
                                                      std::size_t, std::size_t, std::size_t);

}  // namespace kdstage
