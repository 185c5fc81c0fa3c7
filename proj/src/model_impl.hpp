#pragma once

// Internal: libtorch side of clickseg::Model. Only translation units that
// train or run the networks include this.

#include <memory>

#include <torch/torch.h>

#include "clickseg/model.hpp"

namespace clickseg {

// Common base of the encoder-decoder networks. forward() expects inputs
// whose spatial size is a multiple of the spec stride.
class SegmentationNetImpl : public torch::nn::Module {
 public:
  virtual torch::Tensor forward(torch::Tensor x) = 0;
  // First convolution, the one that sees image and annotation channels.
  virtual torch::nn::Conv2d& input_conv() = 0;
};

std::shared_ptr<SegmentationNetImpl> make_network(const BackboneSpec& spec);

struct Model::Impl {
  BackboneSpec spec;
  std::shared_ptr<SegmentationNetImpl> net;
};

// Pads N x C x H x W to the stride, runs the net, crops back.
torch::Tensor forward_padded(SegmentationNetImpl& net, const torch::Tensor& input, int stride);

// (C+K) x H x W planar stack to a 1 x (C+K) x H x W tensor (copy).
torch::Tensor to_tensor(const FloatStack& stack);
FloatStack from_tensor(const torch::Tensor& chw);

}  // namespace clickseg
