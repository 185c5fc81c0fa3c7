// Encoder-decoder networks: a LinkNet-style decoder over a residual-18
// encoder, a small U-Net and a lightweight SegNet.

#include <utility>

#include "model_impl.hpp"

namespace clickseg {

namespace nn = torch::nn;

namespace {

nn::Conv2dOptions conv_opts(int in, int out, int k, int stride = 1, int pad = 0) {
  return nn::Conv2dOptions(in, out, k).stride(stride).padding(pad).bias(false);
}

nn::Sequential conv_bn_relu(int in, int out, int k = 3, int stride = 1, int pad = 1) {
  return nn::Sequential(nn::Conv2d(conv_opts(in, out, k, stride, pad)), nn::BatchNorm2d(out),
                        nn::ReLU(nn::ReLUOptions(true)));
}

void append_conv_bn_relu(nn::Sequential& s, int in, int out) {
  s->push_back(nn::Conv2d(conv_opts(in, out, 3, 1, 1)));
  s->push_back(nn::BatchNorm2d(out));
  s->push_back(nn::ReLU(nn::ReLUOptions(true)));
}

// --- residual-18 encoder + LinkNet decoder --------------------------------

class BasicBlockImpl : public nn::Module {
 public:
  BasicBlockImpl(int in, int out, int stride) {
    conv1 = register_module("conv1", nn::Conv2d(conv_opts(in, out, 3, stride, 1)));
    bn1 = register_module("bn1", nn::BatchNorm2d(out));
    conv2 = register_module("conv2", nn::Conv2d(conv_opts(out, out, 3, 1, 1)));
    bn2 = register_module("bn2", nn::BatchNorm2d(out));
    if (stride != 1 || in != out) {
      downsample = register_module(
          "downsample", nn::Sequential(nn::Conv2d(conv_opts(in, out, 1, stride, 0)), nn::BatchNorm2d(out)));
    }
  }

  torch::Tensor forward(const torch::Tensor& x) {
    auto y = torch::relu(bn1(conv1(x)));
    y = bn2(conv2(y));
    auto identity = downsample ? downsample->forward(x) : x;
    return torch::relu(y + identity);
  }

 private:
  nn::Conv2d conv1{nullptr}, conv2{nullptr};
  nn::BatchNorm2d bn1{nullptr}, bn2{nullptr};
  nn::Sequential downsample{nullptr};
};
TORCH_MODULE(BasicBlock);

nn::Sequential residual_stage(int in, int out, int stride) {
  nn::Sequential s;
  s->push_back(BasicBlock(in, out, stride));
  s->push_back(BasicBlock(out, out, 1));
  return s;
}

class LinkDecoderImpl : public nn::Module {
 public:
  LinkDecoderImpl(int in, int out) {
    const int mid = std::max(1, in / 4);
    reduce = register_module("reduce", conv_bn_relu(in, mid, 1, 1, 0));
    up = register_module(
        "up", nn::ConvTranspose2d(nn::ConvTranspose2dOptions(mid, mid, 3).stride(2).padding(1).output_padding(1).bias(false)));
    up_bn = register_module("up_bn", nn::BatchNorm2d(mid));
    expand = register_module("expand", conv_bn_relu(mid, out, 1, 1, 0));
  }

  torch::Tensor forward(const torch::Tensor& x) {
    auto y = reduce->forward(x);
    y = torch::relu(up_bn(up(y)));
    return expand->forward(y);
  }

 private:
  nn::Sequential reduce{nullptr}, expand{nullptr};
  nn::ConvTranspose2d up{nullptr};
  nn::BatchNorm2d up_bn{nullptr};
};
TORCH_MODULE(LinkDecoder);

class LinkNetImpl : public SegmentationNetImpl {
 public:
  LinkNetImpl(int in, int n_classes, int w) {
    stem_conv = register_module("stem_conv", nn::Conv2d(conv_opts(in, w, 7, 2, 3)));
    stem_bn = register_module("stem_bn", nn::BatchNorm2d(w));
    layer1 = register_module("layer1", residual_stage(w, w, 1));
    layer2 = register_module("layer2", residual_stage(w, 2 * w, 2));
    layer3 = register_module("layer3", residual_stage(2 * w, 4 * w, 2));
    layer4 = register_module("layer4", residual_stage(4 * w, 8 * w, 2));
    dec4 = register_module("dec4", LinkDecoder(8 * w, 4 * w));
    dec3 = register_module("dec3", LinkDecoder(4 * w, 2 * w));
    dec2 = register_module("dec2", LinkDecoder(2 * w, w));
    dec1 = register_module("dec1", LinkDecoder(w, w));
    const int half = std::max(1, w / 2);
    final_up = register_module(
        "final_up",
        nn::ConvTranspose2d(nn::ConvTranspose2dOptions(w, half, 3).stride(2).padding(1).output_padding(1).bias(false)));
    final_bn1 = register_module("final_bn1", nn::BatchNorm2d(half));
    final_conv = register_module("final_conv", conv_bn_relu(half, half));
    classifier = register_module("classifier", nn::ConvTranspose2d(nn::ConvTranspose2dOptions(half, n_classes, 2).stride(2)));
  }

  torch::Tensor forward(torch::Tensor x) override {
    x = torch::relu(stem_bn(stem_conv(x)));
    x = torch::max_pool2d(x, 3, 2, 1);
    auto e1 = layer1->forward(x);
    auto e2 = layer2->forward(e1);
    auto e3 = layer3->forward(e2);
    auto e4 = layer4->forward(e3);
    auto d4 = dec4(e4) + e3;
    auto d3 = dec3(d4) + e2;
    auto d2 = dec2(d3) + e1;
    auto d1 = dec1(d2);
    auto y = torch::relu(final_bn1(final_up(d1)));
    y = final_conv->forward(y);
    return classifier(y);
  }

  nn::Conv2d& input_conv() override { return stem_conv; }

 private:
  nn::Conv2d stem_conv{nullptr};
  nn::BatchNorm2d stem_bn{nullptr}, final_bn1{nullptr};
  nn::Sequential layer1{nullptr}, layer2{nullptr}, layer3{nullptr}, layer4{nullptr}, final_conv{nullptr};
  LinkDecoder dec4{nullptr}, dec3{nullptr}, dec2{nullptr}, dec1{nullptr};
  nn::ConvTranspose2d final_up{nullptr}, classifier{nullptr};
};

// --- small U-Net -----------------------------------------------------------

nn::Sequential double_conv(int in, int out) {
  return nn::Sequential(nn::Conv2d(conv_opts(in, out, 3, 1, 1)), nn::BatchNorm2d(out), nn::ReLU(nn::ReLUOptions(true)),
                        nn::Conv2d(conv_opts(out, out, 3, 1, 1)), nn::BatchNorm2d(out),
                        nn::ReLU(nn::ReLUOptions(true)));
}

class UNetSmallImpl : public SegmentationNetImpl {
 public:
  UNetSmallImpl(int in, int n_classes, int w) {
    first_conv_ = nn::Conv2d(conv_opts(in, w, 3, 1, 1));
    enc1 = register_module("enc1", nn::Sequential(first_conv_, nn::BatchNorm2d(w), nn::ReLU(nn::ReLUOptions(true)),
                                                  nn::Conv2d(conv_opts(w, w, 3, 1, 1)), nn::BatchNorm2d(w),
                                                  nn::ReLU(nn::ReLUOptions(true))));
    enc2 = register_module("enc2", double_conv(w, 2 * w));
    enc3 = register_module("enc3", double_conv(2 * w, 4 * w));
    enc4 = register_module("enc4", double_conv(4 * w, 8 * w));
    bottleneck = register_module("bottleneck", double_conv(8 * w, 8 * w));
    dec4 = register_module("dec4", double_conv(16 * w, 4 * w));
    dec3 = register_module("dec3", double_conv(8 * w, 2 * w));
    dec2 = register_module("dec2", double_conv(4 * w, w));
    dec1 = register_module("dec1", double_conv(2 * w, w));
    head = register_module("head", nn::Conv2d(nn::Conv2dOptions(w, n_classes, 1)));
  }

  torch::Tensor forward(torch::Tensor x) override {
    auto e1 = enc1->forward(x);
    auto e2 = enc2->forward(torch::max_pool2d(e1, 2));
    auto e3 = enc3->forward(torch::max_pool2d(e2, 2));
    auto e4 = enc4->forward(torch::max_pool2d(e3, 2));
    auto b = bottleneck->forward(torch::max_pool2d(e4, 2));
    auto d = dec4->forward(torch::cat({upsample(b, e4), e4}, 1));
    d = dec3->forward(torch::cat({upsample(d, e3), e3}, 1));
    d = dec2->forward(torch::cat({upsample(d, e2), e2}, 1));
    d = dec1->forward(torch::cat({upsample(d, e1), e1}, 1));
    return head(d);
  }

  nn::Conv2d& input_conv() override { return first_conv_; }

 private:
  static torch::Tensor upsample(const torch::Tensor& x, const torch::Tensor& like) {
    return torch::upsample_bilinear2d(x, {like.size(2), like.size(3)}, false);
  }

  nn::Sequential enc1{nullptr}, enc2{nullptr}, enc3{nullptr}, enc4{nullptr}, bottleneck{nullptr};
  nn::Sequential dec4{nullptr}, dec3{nullptr}, dec2{nullptr}, dec1{nullptr};
  nn::Conv2d head{nullptr};
  nn::Conv2d first_conv_{nullptr};
};

// --- lightweight SegNet ------------------------------------------------------

class SegNetLiteImpl : public SegmentationNetImpl {
 public:
  SegNetLiteImpl(int in, int n_classes, int w) {
    const int widths[] = {w, 2 * w, 4 * w, 8 * w};
    first_conv_ = nn::Conv2d(conv_opts(in, w, 3, 1, 1));
    nn::Sequential stage1(first_conv_, nn::BatchNorm2d(w), nn::ReLU(nn::ReLUOptions(true)));
    append_conv_bn_relu(stage1, w, w);
    enc[0] = register_module("enc1", stage1);
    for (int i = 1; i < 4; ++i) {
      nn::Sequential stage;
      append_conv_bn_relu(stage, widths[i - 1], widths[i]);
      append_conv_bn_relu(stage, widths[i], widths[i]);
      enc[i] = register_module("enc" + std::to_string(i + 1), stage);
    }
    for (int i = 3; i >= 0; --i) {
      const int out = i == 0 ? w : widths[i - 1];
      nn::Sequential stage;
      append_conv_bn_relu(stage, widths[i], widths[i]);
      append_conv_bn_relu(stage, widths[i], out);
      dec[i] = register_module("dec" + std::to_string(i + 1), stage);
    }
    head = register_module("head", nn::Conv2d(nn::Conv2dOptions(w, n_classes, 3).padding(1)));
  }

  torch::Tensor forward(torch::Tensor x) override {
    std::array<torch::Tensor, 4> indices;
    std::array<std::vector<int64_t>, 4> sizes;
    for (int i = 0; i < 4; ++i) {
      x = enc[i]->forward(x);
      sizes[i] = {x.size(2), x.size(3)};
      auto pooled = torch::max_pool2d_with_indices(x, 2, 2);
      x = std::get<0>(pooled);
      indices[i] = std::get<1>(pooled);
    }
    for (int i = 3; i >= 0; --i) {
      x = torch::max_unpool2d(x, indices[i], sizes[i]);
      x = dec[i]->forward(x);
    }
    return head(x);
  }

  nn::Conv2d& input_conv() override { return first_conv_; }

 private:
  std::array<nn::Sequential, 4> enc{nullptr, nullptr, nullptr, nullptr};
  std::array<nn::Sequential, 4> dec{nullptr, nullptr, nullptr, nullptr};
  nn::Conv2d head{nullptr};
  nn::Conv2d first_conv_{nullptr};
};

}  // namespace

std::shared_ptr<SegmentationNetImpl> make_network(const BackboneSpec& spec) {
  spec.validate();
  switch (spec.architecture) {
    case Architecture::kLinkNetR18:
      return std::make_shared<LinkNetImpl>(spec.in_channels, spec.n_classes, spec.encoder_width);
    case Architecture::kUNetSmall:
      return std::make_shared<UNetSmallImpl>(spec.in_channels, spec.n_classes, spec.encoder_width);
    case Architecture::kSegNetLite:
      return std::make_shared<SegNetLiteImpl>(spec.in_channels, spec.n_classes, spec.encoder_width);
  }
  throw ConfigError("unsupported architecture");
}

}  // namespace clickseg
