#include "clickseg/raster.hpp"

#include <algorithm>
#include <string>

namespace clickseg {

namespace {

void check_region(const Region& region, Shape shape) {
  if (region.rows < 0 || region.cols < 0 || region.row < 0 || region.col < 0 ||
      region.row + region.rows > shape.rows || region.col + region.cols > shape.cols) {
    throw DimensionError("crop region " + std::to_string(region.rows) + "x" + std::to_string(region.cols) +
                         " at (" + std::to_string(region.row) + "," + std::to_string(region.col) +
                         ") does not fit in " + std::to_string(shape.rows) + "x" + std::to_string(shape.cols));
  }
}

}  // namespace

Image Image::crop(const Region& region) const {
  check_region(region, shape());
  Image out(region.rows, region.cols, channels_);
  const std::size_t row_bytes = static_cast<std::size_t>(region.cols) * channels_;
  for (int r = 0; r < region.rows; ++r) {
    const auto* src = data_.data() + index(region.row + r, region.col, 0);
    std::copy_n(src, row_bytes, out.data_.data() + static_cast<std::size_t>(r) * row_bytes);
  }
  return out;
}

void Image::flip_horizontal() {
  for (int r = 0; r < rows_; ++r) {
    for (int c = 0; c < cols_ / 2; ++c) {
      for (int ch = 0; ch < channels_; ++ch) std::swap(at(r, c, ch), at(r, cols_ - 1 - c, ch));
    }
  }
}

void Image::flip_vertical() {
  const std::size_t row_bytes = static_cast<std::size_t>(cols_) * channels_;
  for (int r = 0; r < rows_ / 2; ++r) {
    std::swap_ranges(data_.begin() + static_cast<std::ptrdiff_t>(r * row_bytes),
                     data_.begin() + static_cast<std::ptrdiff_t>((r + 1) * row_bytes),
                     data_.begin() + static_cast<std::ptrdiff_t>((rows_ - 1 - r) * row_bytes));
  }
}

SegmentationMap::SegmentationMap(int rows, int cols, std::vector<Label> labels)
    : rows_(rows), cols_(cols), labels_(std::move(labels)) {
  if (rows < 0 || cols < 0 || labels_.size() != static_cast<std::size_t>(rows) * cols) {
    throw DimensionError("label buffer does not match " + std::to_string(rows) + "x" + std::to_string(cols));
  }
}

SegmentationMap SegmentationMap::crop(const Region& region) const {
  check_region(region, shape());
  SegmentationMap out(region.rows, region.cols);
  for (int r = 0; r < region.rows; ++r) {
    std::copy_n(labels_.begin() + static_cast<std::ptrdiff_t>((region.row + r) * cols_ + region.col),
                region.cols, out.labels_.begin() + static_cast<std::ptrdiff_t>(r) * region.cols);
  }
  return out;
}

void SegmentationMap::flip_horizontal() {
  for (int r = 0; r < rows_; ++r) {
    auto row = labels_.begin() + static_cast<std::ptrdiff_t>(r) * cols_;
    std::reverse(row, row + cols_);
  }
}

void SegmentationMap::flip_vertical() {
  for (int r = 0; r < rows_ / 2; ++r) {
    std::swap_ranges(labels_.begin() + static_cast<std::ptrdiff_t>(r) * cols_,
                     labels_.begin() + static_cast<std::ptrdiff_t>(r + 1) * cols_,
                     labels_.begin() + static_cast<std::ptrdiff_t>(rows_ - 1 - r) * cols_);
  }
}

int SegmentationMap::label_bound() const {
  if (labels_.empty()) return 0;
  return static_cast<int>(*std::max_element(labels_.begin(), labels_.end())) + 1;
}

}  // namespace clickseg
