#pragma once

#include <cstddef>
#include <filesystem>

#include "kdstage/model.hpp"
#include "kdstage/tape.hpp"

namespace kdstage {

// Normalized Grad-CAM heatmap. `values` lies in [0, 1]; an all-constant raw
// map normalizes to zeros.
template <typename T>
struct AttentionMap {
  BasicTensor<T> values;  // (target_h, target_w)
  std::size_t source_h = 0;
  std::size_t source_w = 0;
  std::size_t target_h = 0;
  std::size_t target_w = 0;
};

struct RoiBox {
  std::size_t row = 0;
  std::size_t col = 0;
  std::size_t height = 0;
  std::size_t width = 0;

  bool operator==(const RoiBox&) const = default;
};

// Binary mask that is 1 exactly on the bbox interior.
struct RoiMask {
  Tensor values;  // (H, W)
  RoiBox bbox;
};

RoiMask make_roi_mask(std::size_t height, std::size_t width, const RoiBox& bbox);
// Throws CorruptDataError unless `values` is 1 exactly on bbox and 0 elsewhere.
void validate_roi_mask(const RoiMask& mask);

// w_c = (1/Z) sum_i g_{c,i} with Z = h*w, for a per-sample gradient g w.r.t. A.
template <typename T>
BasicTensor<T> gradcam_weights(const BasicTensor<T>& grad_wrt_activations);

// r_i = sum_c w_c A_i^c (no relu), then min-max normalized. Gradients flow
// through the activations only; w is a constant.
template <typename T>
AttentionMap<T> gradcam_heatmap(BasicTape<T>& tape, const BasicTensor<T>& activations,
                                const BasicTensor<T>& weights);

// Align-corners bilinear resampling onto a grid at least as large.
template <typename T>
AttentionMap<T> upsample_bilinear(BasicTape<T>& tape, const AttentionMap<T>& map, std::size_t target_h,
                                  std::size_t target_w);

template <typename T>
struct AttentionPass {
  BasicTensor<T> cls_loss;  // cross entropy of the forward pass, on the tape
  BasicTensor<T> weights;   // detached Grad-CAM channel weights
  AttentionMap<T> map;      // upsampled to the target grid, on the tape
};

// Training-time attention: cross entropy of `forward` against `label`, the
// gradient of the label log-probability (-L_cls) w.r.t. the activations via a
// partial tape sweep, channel weights, heatmap and upsampling. The returned
// map stays differentiable in the activations.
template <typename T>
AttentionPass<T> attention_from_forward(BasicTape<T>& tape, const ForwardResult<T>& forward, std::size_t label,
                                        std::size_t target_h, std::size_t target_w);

// Detached heatmap for evaluation and export.
AttentionMap<float> student_attention(const ConvClassifier<float>& model, const Tensor& image,
                                      std::size_t label, std::size_t target_h, std::size_t target_w);

// sum_i A_i M_i / sum_i A_i, or 0 for an all-zero heatmap.
double overlap_score(const AttentionMap<float>& map, const RoiMask& mask);

// 8-bit binary PGM (P5), value * 255 rounded.
void write_pgm(const std::filesystem::path& path, const Tensor& map);

}  // namespace kdstage
