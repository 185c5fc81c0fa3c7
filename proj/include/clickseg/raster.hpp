#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "clickseg/error.hpp"

namespace clickseg {

struct Shape {
  int rows = 0;
  int cols = 0;

  [[nodiscard]] std::size_t area() const {
    return static_cast<std::size_t>(rows) * static_cast<std::size_t>(cols);
  }
  [[nodiscard]] bool contains(int r, int c) const {
    return r >= 0 && c >= 0 && r < rows && c < cols;
  }
  friend bool operator==(const Shape&, const Shape&) = default;
};

// Axis-aligned window inside a larger frame.
struct Region {
  int row = 0;
  int col = 0;
  int rows = 0;
  int cols = 0;

  [[nodiscard]] Shape shape() const { return {rows, cols}; }
  friend bool operator==(const Region&, const Region&) = default;
};

// 8-bit interleaved (row, col, channel) image.
class Image {
 public:
  Image() = default;
  Image(int rows, int cols, int channels, std::uint8_t fill = 0)
      : rows_(rows), cols_(cols), channels_(channels),
        data_(static_cast<std::size_t>(rows) * cols * channels, fill) {
    if (rows < 0 || cols < 0 || channels < 0) throw DimensionError("negative image dimension");
  }
  Image(int rows, int cols, int channels, std::vector<std::uint8_t> data)
      : rows_(rows), cols_(cols), channels_(channels), data_(std::move(data)) {
    if (rows < 0 || cols < 0 || channels < 0 ||
        data_.size() != static_cast<std::size_t>(rows) * cols * channels) {
      throw DimensionError("image buffer does not match its dimensions");
    }
  }

  [[nodiscard]] int rows() const { return rows_; }
  [[nodiscard]] int cols() const { return cols_; }
  [[nodiscard]] int channels() const { return channels_; }
  [[nodiscard]] Shape shape() const { return {rows_, cols_}; }
  [[nodiscard]] bool empty() const { return data_.empty(); }

  std::uint8_t& at(int r, int c, int ch) { return data_[index(r, c, ch)]; }
  [[nodiscard]] std::uint8_t at(int r, int c, int ch) const { return data_[index(r, c, ch)]; }

  [[nodiscard]] std::span<std::uint8_t> data() { return data_; }
  [[nodiscard]] std::span<const std::uint8_t> data() const { return data_; }

  [[nodiscard]] Image crop(const Region& region) const;
  void flip_horizontal();
  void flip_vertical();

  friend bool operator==(const Image&, const Image&) = default;

 private:
  [[nodiscard]] std::size_t index(int r, int c, int ch) const {
    return (static_cast<std::size_t>(r) * cols_ + c) * channels_ + ch;
  }

  int rows_ = 0;
  int cols_ = 0;
  int channels_ = 0;
  std::vector<std::uint8_t> data_;
};

// Per-pixel class ids. Shared by predictions and references.
class SegmentationMap {
 public:
  using Label = std::uint8_t;

  SegmentationMap() = default;
  SegmentationMap(int rows, int cols, Label fill = 0)
      : rows_(rows), cols_(cols), labels_(static_cast<std::size_t>(rows) * cols, fill) {
    if (rows < 0 || cols < 0) throw DimensionError("negative map dimension");
  }
  SegmentationMap(int rows, int cols, std::vector<Label> labels);

  [[nodiscard]] int rows() const { return rows_; }
  [[nodiscard]] int cols() const { return cols_; }
  [[nodiscard]] Shape shape() const { return {rows_, cols_}; }
  [[nodiscard]] std::size_t size() const { return labels_.size(); }
  [[nodiscard]] bool empty() const { return labels_.empty(); }

  Label& at(int r, int c) { return labels_[static_cast<std::size_t>(r) * cols_ + c]; }
  [[nodiscard]] Label at(int r, int c) const {
    return labels_[static_cast<std::size_t>(r) * cols_ + c];
  }
  Label& operator[](std::size_t i) { return labels_[i]; }
  Label operator[](std::size_t i) const { return labels_[i]; }

  [[nodiscard]] std::span<Label> labels() { return labels_; }
  [[nodiscard]] std::span<const Label> labels() const { return labels_; }

  [[nodiscard]] SegmentationMap crop(const Region& region) const;
  void flip_horizontal();
  void flip_vertical();
  // Highest id + 1, 0 for an empty map.
  [[nodiscard]] int label_bound() const;

  friend bool operator==(const SegmentationMap&, const SegmentationMap&) = default;

 private:
  int rows_ = 0;
  int cols_ = 0;
  std::vector<Label> labels_;
};

// Planar (channel, row, col) float array. Used for annotation channels,
// network inputs and per-class probabilities.
class FloatStack {
 public:
  FloatStack() = default;
  FloatStack(int channels, int rows, int cols, float fill = 0.0F)
      : channels_(channels), rows_(rows), cols_(cols),
        data_(static_cast<std::size_t>(channels) * rows * cols, fill) {
    if (rows < 0 || cols < 0 || channels < 0) throw DimensionError("negative stack dimension");
  }

  [[nodiscard]] int channels() const { return channels_; }
  [[nodiscard]] int rows() const { return rows_; }
  [[nodiscard]] int cols() const { return cols_; }
  [[nodiscard]] Shape shape() const { return {rows_, cols_}; }
  [[nodiscard]] std::size_t plane_size() const { return static_cast<std::size_t>(rows_) * cols_; }

  float& at(int k, int r, int c) { return data_[(k * plane_size()) + static_cast<std::size_t>(r) * cols_ + c]; }
  [[nodiscard]] float at(int k, int r, int c) const {
    return data_[(k * plane_size()) + static_cast<std::size_t>(r) * cols_ + c];
  }

  [[nodiscard]] std::span<float> plane(int k) { return {data_.data() + k * plane_size(), plane_size()}; }
  [[nodiscard]] std::span<const float> plane(int k) const {
    return {data_.data() + k * plane_size(), plane_size()};
  }

  [[nodiscard]] std::span<float> data() { return data_; }
  [[nodiscard]] std::span<const float> data() const { return data_; }

  friend bool operator==(const FloatStack&, const FloatStack&) = default;

 private:
  int channels_ = 0;
  int rows_ = 0;
  int cols_ = 0;
  std::vector<float> data_;
};

}  // namespace clickseg
