#include "clickseg/model.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <mutex>

#include <nlohmann/json.hpp>

#include "clickseg/datasets.hpp"
#include "clickseg/digest.hpp"
#include "clickseg/error.hpp"
#include "model_impl.hpp"

namespace clickseg {

using nlohmann::json;

std::string to_string(Architecture a) {
  switch (a) {
    case Architecture::kLinkNetR18:
      return "LINKNET_R18";
    case Architecture::kUNetSmall:
      return "UNET_SMALL";
    case Architecture::kSegNetLite:
      return "SEGNET_LITE";
  }
  return "?";
}

Architecture architecture_from_string(const std::string& s) {
  std::string v = s;
  std::transform(v.begin(), v.end(), v.begin(), [](unsigned char c) { return std::toupper(c); });
  if (v == "LINKNET_R18") return Architecture::kLinkNetR18;
  if (v == "UNET_SMALL") return Architecture::kUNetSmall;
  if (v == "SEGNET_LITE") return Architecture::kSegNetLite;
  throw ConfigError("unsupported architecture '" + s + "'");
}

void BackboneSpec::validate() const {
  if (in_channels < 1) throw ConfigError("in_channels must be >= 1");
  if (n_classes < 2) throw ConfigError("n_classes must be >= 2");
  if (encoder_width < 4) throw ConfigError("encoder_width must be >= 4");
}

int BackboneSpec::stride() const { return architecture == Architecture::kLinkNetR18 ? 32 : 16; }

void to_json(json& j, const BackboneSpec& s) {
  j = {{"architecture", to_string(s.architecture)},
       {"in_channels", s.in_channels},
       {"n_classes", s.n_classes},
       {"encoder_width", s.encoder_width}};
}

void from_json(const json& j, BackboneSpec& s) {
  s = BackboneSpec{};
  s.architecture = architecture_from_string(j.at("architecture").get<std::string>());
  s.in_channels = j.value("in_channels", s.in_channels);
  s.n_classes = j.value("n_classes", s.n_classes);
  s.encoder_width = j.value("encoder_width", s.encoder_width);
}

// --- tensor helpers ----------------------------------------------------------

torch::Tensor to_tensor(const FloatStack& stack) {
  auto t = torch::empty({1, stack.channels(), stack.rows(), stack.cols()}, torch::kFloat32);
  std::memcpy(t.data_ptr<float>(), stack.data().data(), stack.data().size() * sizeof(float));
  return t;
}

FloatStack from_tensor(const torch::Tensor& chw) {
  auto t = chw.to(torch::kFloat32).contiguous();
  FloatStack out(static_cast<int>(t.size(0)), static_cast<int>(t.size(1)), static_cast<int>(t.size(2)));
  std::memcpy(out.data().data(), t.data_ptr<float>(), out.data().size() * sizeof(float));
  return out;
}

torch::Tensor forward_padded(SegmentationNetImpl& net, const torch::Tensor& input, int stride) {
  const auto h = input.size(2);
  const auto w = input.size(3);
  const auto ph = (stride - h % stride) % stride;
  const auto pw = (stride - w % stride) % stride;
  if (ph == 0 && pw == 0) return net.forward(input);
  auto padded = torch::constant_pad_nd(input, {0, pw, 0, ph}, 0.0);
  auto out = net.forward(padded);
  return out.index({torch::indexing::Slice(), torch::indexing::Slice(), torch::indexing::Slice(0, h),
                    torch::indexing::Slice(0, w)});
}

// --- Model -------------------------------------------------------------------

namespace {

// torch's global generator drives parameter initialisation.
std::mutex& init_mutex() {
  static std::mutex m;
  return m;
}

std::vector<std::pair<std::string, torch::Tensor>> state_tensors(const SegmentationNetImpl& net) {
  std::vector<std::pair<std::string, torch::Tensor>> out;
  for (const auto& p : net.named_parameters(true)) out.emplace_back(p.key(), p.value());
  for (const auto& b : net.named_buffers(true)) out.emplace_back(b.key(), b.value());
  return out;
}

template <typename T>
void put(std::vector<std::uint8_t>& out, const T& v) {
  const auto* p = reinterpret_cast<const std::uint8_t*>(&v);
  out.insert(out.end(), p, p + sizeof(T));
}

class Reader {
 public:
  explicit Reader(std::span<const std::uint8_t> data) : data_(data) {}

  template <typename T>
  T get() {
    T v{};
    need(sizeof(T));
    std::memcpy(&v, data_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    return v;
  }
  std::span<const std::uint8_t> bytes(std::size_t n) {
    need(n);
    auto s = data_.subspan(pos_, n);
    pos_ += n;
    return s;
  }
  [[nodiscard]] bool done() const { return pos_ == data_.size(); }

 private:
  void need(std::size_t n) const {
    if (pos_ + n > data_.size()) throw IntegrityError("weights blob is truncated");
  }
  std::span<const std::uint8_t> data_;
  std::size_t pos_ = 0;
};

}  // namespace

Model::Model(std::unique_ptr<Impl> impl) : impl_(std::move(impl)) {}
Model::Model(Model&&) noexcept = default;
Model& Model::operator=(Model&&) noexcept = default;
Model::~Model() = default;

Model Model::build(const BackboneSpec& spec, std::uint64_t seed) {
  spec.validate();
  auto impl = std::make_unique<Impl>();
  impl->spec = spec;
  {
    std::lock_guard lock(init_mutex());
    torch::manual_seed(seed);
    impl->net = make_network(spec);
  }
  impl->net->eval();
  return Model(std::move(impl));
}

Model Model::clone() const {
  Model copy = build(impl_->spec, 0);
  copy.load_weights(serialize_weights());
  return copy;
}

const BackboneSpec& Model::spec() const { return impl_->spec; }

FloatStack Model::forward(const FloatStack& input) const {
  if (input.channels() != impl_->spec.in_channels) {
    throw DimensionError("model expects " + std::to_string(impl_->spec.in_channels) + " input channels, got " +
                         std::to_string(input.channels()));
  }
  if (input.rows() < 1 || input.cols() < 1) throw DimensionError("empty input");
  torch::InferenceMode guard;
  auto logits = forward_padded(*impl_->net, to_tensor(input), impl_->spec.stride());
  return from_tensor(logits[0]);
}

std::vector<std::uint8_t> Model::serialize_weights() const {
  std::vector<std::uint8_t> out;
  const auto tensors = state_tensors(*impl_->net);
  put<std::uint32_t>(out, static_cast<std::uint32_t>(tensors.size()));
  for (const auto& [name, tensor] : tensors) {
    put<std::uint32_t>(out, static_cast<std::uint32_t>(name.size()));
    out.insert(out.end(), name.begin(), name.end());
    auto t = tensor.detach().contiguous();
    put<std::int32_t>(out, static_cast<std::int32_t>(t.scalar_type()));
    put<std::uint32_t>(out, static_cast<std::uint32_t>(t.dim()));
    for (auto d : t.sizes()) put<std::int64_t>(out, d);
    const auto nbytes = static_cast<std::size_t>(t.numel()) * t.element_size();
    const auto* p = static_cast<const std::uint8_t*>(t.data_ptr());
    out.insert(out.end(), p, p + nbytes);
  }
  return out;
}

void Model::load_weights(std::span<const std::uint8_t> blob) {
  Reader in(blob);
  auto tensors = state_tensors(*impl_->net);
  const auto count = in.get<std::uint32_t>();
  if (count != tensors.size()) {
    throw IntegrityError("weights blob holds " + std::to_string(count) + " tensors, model has " +
                         std::to_string(tensors.size()));
  }
  // Validate everything before touching the model.
  std::vector<std::span<const std::uint8_t>> payloads;
  for (const auto& [name, tensor] : tensors) {
    const auto len = in.get<std::uint32_t>();
    const auto raw = in.bytes(len);
    const std::string stored(raw.begin(), raw.end());
    if (stored != name) throw IntegrityError("weights blob has tensor '" + stored + "' where '" + name + "' belongs");
    const auto dtype = in.get<std::int32_t>();
    if (dtype != static_cast<std::int32_t>(tensor.scalar_type())) {
      throw IntegrityError("dtype mismatch for tensor '" + name + "'");
    }
    const auto dim = in.get<std::uint32_t>();
    if (dim != static_cast<std::uint32_t>(tensor.dim())) throw IntegrityError("rank mismatch for tensor '" + name + "'");
    for (std::uint32_t d = 0; d < dim; ++d) {
      if (in.get<std::int64_t>() != tensor.size(d)) throw IntegrityError("shape mismatch for tensor '" + name + "'");
    }
    payloads.push_back(in.bytes(static_cast<std::size_t>(tensor.numel()) * tensor.element_size()));
  }
  if (!in.done()) throw IntegrityError("trailing bytes after weights");
  torch::NoGradGuard no_grad;
  for (std::size_t i = 0; i < tensors.size(); ++i) {
    auto& t = tensors[i].second;
    std::memcpy(t.data_ptr(), payloads[i].data(), payloads[i].size());
  }
}

std::string Model::weights_checksum() const { return sha256_hex(serialize_weights()); }

std::size_t Model::parameter_count() const {
  std::size_t n = 0;
  for (const auto& p : impl_->net->parameters()) n += static_cast<std::size_t>(p.numel());
  return n;
}

Model adapt_input_channels(const Model& plain, int extra_channels) {
  if (extra_channels < 0) throw ConfigError("extra_channels must be >= 0");
  BackboneSpec spec = plain.spec();
  const int image_channels = spec.in_channels;
  spec.in_channels += extra_channels;
  Model adapted = Model::build(spec, 0);

  auto src = state_tensors(*plain.impl().net);
  auto dst = state_tensors(*adapted.impl().net);
  auto& first = adapted.impl().net->input_conv()->weight;
  torch::NoGradGuard no_grad;
  for (std::size_t i = 0; i < dst.size(); ++i) {
    auto& target = dst[i].second;
    const auto& source = src[i].second;
    if (target.is_same(first)) {
      target.zero_();
      target.narrow(1, 0, image_channels).copy_(source);
    } else {
      target.copy_(source);
    }
  }
  return adapted;
}

// --- inference -----------------------------------------------------------------

namespace {

void check_inputs(const Model& model, const Image& image, std::span<const Click> clicks,
                  const EncodingConfig& encoding, const Normalization& normalization) {
  const auto& spec = model.spec();
  if (image.channels() != static_cast<int>(normalization.mean.size())) {
    throw DimensionError("image has " + std::to_string(image.channels()) + " channels, model was trained on " +
                         std::to_string(normalization.mean.size()));
  }
  if (image.channels() + encoding.channel_count(spec.n_classes) != spec.in_channels) {
    throw DimensionError("image and annotation channels do not add up to the model input width");
  }
  if (encoding.channels == ChannelLayout::kPerClass) {
    for (const auto& c : clicks) {
      if (c.label < 0 || c.label >= spec.n_classes) {
        throw LabelError("click label " + std::to_string(c.label) + " is not a class of this model (N=" +
                         std::to_string(spec.n_classes) + ")");
      }
    }
  }
}

}  // namespace

Prediction predict_map(const Model& model, const Image& image, std::span<const Click> clicks,
                       const EncodingConfig& encoding, const Normalization& normalization, int window) {
  check_inputs(model, image, clicks, encoding, normalization);
  const int n = model.spec().n_classes;
  const Shape frame = image.shape();
  FloatStack logits;

  if (window <= 0 || (frame.rows <= window && frame.cols <= window)) {
    const auto annotations = encode(clicks, frame, n, encoding);
    logits = model.forward(assemble_network_input(image, annotations, normalization));
  } else {
    logits = FloatStack(n, frame.rows, frame.cols);
    std::vector<float> hits(frame.area(), 0.0F);
    for (const auto& region : sliding_windows(frame, window, 0.25)) {
      const auto annotations = encode_region(clicks, frame, region, n, encoding);
      const auto part = model.forward(assemble_network_input(image.crop(region), annotations, normalization));
      for (int k = 0; k < n; ++k) {
        for (int r = 0; r < region.rows; ++r) {
          for (int c = 0; c < region.cols; ++c) logits.at(k, region.row + r, region.col + c) += part.at(k, r, c);
        }
      }
      for (int r = 0; r < region.rows; ++r) {
        for (int c = 0; c < region.cols; ++c) hits[static_cast<std::size_t>(region.row + r) * frame.cols + region.col + c] += 1.0F;
      }
    }
    for (int k = 0; k < n; ++k) {
      auto plane = logits.plane(k);
      for (std::size_t p = 0; p < plane.size(); ++p) plane[p] /= hits[p];
    }
  }

  Prediction out{SegmentationMap(frame.rows, frame.cols), FloatStack(n, frame.rows, frame.cols)};
  const std::size_t plane = logits.plane_size();
  std::vector<double> e(static_cast<std::size_t>(n));
  for (std::size_t p = 0; p < plane; ++p) {
    double best = -std::numeric_limits<double>::infinity();
    int arg = 0;
    for (int k = 0; k < n; ++k) {
      const double v = logits.data()[k * plane + p];
      if (v > best) {
        best = v;
        arg = k;
      }
    }
    double sum = 0.0;
    for (int k = 0; k < n; ++k) {
      e[static_cast<std::size_t>(k)] = std::exp(static_cast<double>(logits.data()[k * plane + p]) - best);
      sum += e[static_cast<std::size_t>(k)];
    }
    for (int k = 0; k < n; ++k) {
      out.probabilities.data()[k * plane + p] = static_cast<float>(e[static_cast<std::size_t>(k)] / sum);
    }
    out.labels[p] = static_cast<SegmentationMap::Label>(arg);
  }
  return out;
}

Prediction predict_map(const ModelCheckpoint& checkpoint, const Image& image, std::span<const Click> clicks) {
  return predict_map(checkpoint.model, image, clicks, checkpoint.encoding, checkpoint.normalization, checkpoint.window);
}

// --- checkpoints -------------------------------------------------------------------

namespace {

constexpr char kMagic[8] = {'C', 'L', 'K', 'S', 'E', 'G', 'C', 'K'};
constexpr std::uint32_t kVersion = 1;

void check_consistency(const BackboneSpec& spec, const ClassSchema& schema, const EncodingConfig& encoding,
                       const Normalization& normalization) {
  if (spec.n_classes != schema.size()) {
    throw IntegrityError("checkpoint network has " + std::to_string(spec.n_classes) + " classes, schema has " +
                         std::to_string(schema.size()));
  }
  if (normalization.mean.size() != normalization.stddev.size()) {
    throw IntegrityError("normalization mean/stddev lengths differ");
  }
  const int expected = static_cast<int>(normalization.mean.size()) + encoding.channel_count(schema.size());
  if (spec.in_channels != expected) {
    throw IntegrityError("checkpoint network takes " + std::to_string(spec.in_channels) + " input channels, but " +
                         "image + annotation channels give " + std::to_string(expected));
  }
}

}  // namespace

void save_checkpoint(const ModelCheckpoint& checkpoint, const std::filesystem::path& path) {
  const auto& spec = checkpoint.model.spec();
  check_consistency(spec, checkpoint.schema, checkpoint.encoding, checkpoint.normalization);
  const auto blob = checkpoint.model.serialize_weights();
  const json meta = {{"format", "clickseg.checkpoint"},
                     {"spec", spec},
                     {"schema", checkpoint.schema},
                     {"encoding", checkpoint.encoding},
                     {"normalization", checkpoint.normalization},
                     {"window", checkpoint.window},
                     {"train_digest", checkpoint.train_digest},
                     {"weights_sha256", sha256_hex(blob)},
                     {"weights_bytes", blob.size()}};
  const std::string meta_text = meta.dump();
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  // Write to a sibling and rename so readers never see a partial file.
  const auto tmp = std::filesystem::path(path.string() + ".tmp");
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw LoadError("cannot write checkpoint " + path.string());
    out.write(kMagic, sizeof(kMagic));
    out.write(reinterpret_cast<const char*>(&kVersion), sizeof(kVersion));
    const std::uint64_t meta_len = meta_text.size();
    out.write(reinterpret_cast<const char*>(&meta_len), sizeof(meta_len));
    out.write(meta_text.data(), static_cast<std::streamsize>(meta_text.size()));
    const std::uint64_t blob_len = blob.size();
    out.write(reinterpret_cast<const char*>(&blob_len), sizeof(blob_len));
    out.write(reinterpret_cast<const char*>(blob.data()), static_cast<std::streamsize>(blob.size()));
    if (!out) throw LoadError("failed writing checkpoint " + path.string());
  }
  std::filesystem::rename(tmp, path);
}

ModelCheckpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw LoadError("checkpoint not found: " + path.string());
  const std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  Reader r(bytes);
  json meta;
  std::span<const std::uint8_t> blob;
  try {
    const auto magic = r.bytes(sizeof(kMagic));
    if (!std::equal(magic.begin(), magic.end(), kMagic)) throw IntegrityError("not a clickseg checkpoint");
    if (r.get<std::uint32_t>() != kVersion) throw IntegrityError("unsupported checkpoint version");
    const auto meta_len = r.get<std::uint64_t>();
    const auto meta_bytes = r.bytes(meta_len);
    meta = json::parse(meta_bytes.begin(), meta_bytes.end());
    const auto blob_len = r.get<std::uint64_t>();
    blob = r.bytes(blob_len);
    if (!r.done()) throw IntegrityError("trailing bytes after checkpoint payload");
  } catch (const IntegrityError& e) {
    throw IntegrityError(path.string() + ": " + e.what());
  } catch (const json::exception& e) {
    throw IntegrityError(path.string() + ": corrupt metadata: " + e.what());
  }
  if (meta.value("weights_bytes", std::uint64_t{0}) != blob.size() ||
      meta.value("weights_sha256", std::string{}) != sha256_hex(blob)) {
    throw IntegrityError(path.string() + ": weights digest mismatch");
  }
  try {
    const auto spec = meta.at("spec").get<BackboneSpec>();
    auto schema = meta.at("schema").get<ClassSchema>();
    auto encoding = meta.at("encoding").get<EncodingConfig>();
    auto normalization = meta.at("normalization").get<Normalization>();
    check_consistency(spec, schema, encoding, normalization);
    Model model = Model::build(spec, 0);
    model.load_weights(blob);
    return ModelCheckpoint{std::move(model),        std::move(schema),
                           std::move(encoding),     std::move(normalization),
                           meta.value("window", 512), meta.value("train_digest", std::string{})};
  } catch (const IntegrityError& e) {
    throw IntegrityError(path.string() + ": " + e.what());
  } catch (const json::exception& e) {
    throw IntegrityError(path.string() + ": malformed metadata: " + e.what());
  } catch (const ConfigError& e) {
    throw IntegrityError(path.string() + ": invalid stored configuration: " + e.what());
  }
}

ModelCheckpoint load_checkpoint(const std::filesystem::path& path, const ClassSchema& expected_schema) {
  auto ckpt = load_checkpoint(path);
  if (ckpt.schema.size() != expected_schema.size()) {
    throw IntegrityError("checkpoint " + path.string() + " has " + std::to_string(ckpt.schema.size()) +
                         " classes, expected " + std::to_string(expected_schema.size()));
  }
  return ckpt;
}

// --- gradient probes -------------------------------------------------------------

struct LossProbe::State {
  Model model;
};

LossProbe::LossProbe(const Model& model) : state_(std::make_unique<State>(State{model.clone()})) {
  state_->model.impl().net->to(torch::kFloat64);
  state_->model.impl().net->eval();
}

LossProbe::~LossProbe() = default;

namespace {

torch::Tensor probe_input(std::span<const double> input, const BackboneSpec& spec, const SegmentationMap& target) {
  const auto expected = static_cast<std::size_t>(spec.in_channels) * target.size();
  if (input.size() != expected) throw DimensionError("probe input does not match channels x target size");
  return torch::from_blob(const_cast<double*>(input.data()), {1, spec.in_channels, target.rows(), target.cols()},
                          torch::kFloat64)
      .clone();
}

torch::Tensor probe_target(const SegmentationMap& target) {
  auto t = torch::empty({1, target.rows(), target.cols()}, torch::kInt64);
  auto* p = t.data_ptr<std::int64_t>();
  for (std::size_t i = 0; i < target.size(); ++i) p[i] = target[i];
  return t;
}

}  // namespace

double LossProbe::loss(std::span<const double> input, const SegmentationMap& target) const {
  torch::NoGradGuard no_grad;
  const auto& spec = state_->model.spec();
  auto x = probe_input(input, spec, target);
  auto logits = forward_padded(*state_->model.impl().net, x, spec.stride());
  return torch::nn::functional::cross_entropy(logits, probe_target(target)).item<double>();
}

std::vector<double> LossProbe::input_gradient(std::span<const double> input, const SegmentationMap& target) const {
  const auto& spec = state_->model.spec();
  auto x = probe_input(input, spec, target).requires_grad_(true);
  auto logits = forward_padded(*state_->model.impl().net, x, spec.stride());
  auto loss = torch::nn::functional::cross_entropy(logits, probe_target(target));
  auto grad = torch::autograd::grad({loss}, {x})[0].contiguous();
  return {grad.data_ptr<double>(), grad.data_ptr<double>() + grad.numel()};
}

}  // namespace clickseg
