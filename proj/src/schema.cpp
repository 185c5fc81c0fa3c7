#include "clickseg/schema.hpp"

#include <cmath>
#include <set>

#include <nlohmann/json.hpp>

#include "clickseg/error.hpp"

namespace clickseg {

namespace {

std::string color_string(const Rgb& c) {
  return "(" + std::to_string(c[0]) + "," + std::to_string(c[1]) + "," + std::to_string(c[2]) + ")";
}

void validate_frequencies(const std::vector<double>& f, std::size_t n) {
  if (f.size() != n) {
    throw ConfigError("frequency vector has " + std::to_string(f.size()) + " entries, expected " +
                      std::to_string(n));
  }
  double sum = 0.0;
  for (double v : f) {
    if (!(v >= 0.0 && v <= 1.0)) throw ConfigError("class frequency outside [0,1]");
    sum += v;
  }
  if (std::abs(sum - 1.0) > 1e-6) throw ConfigError("class frequencies do not sum to 1");
}

}  // namespace

ClassSchema::ClassSchema(std::vector<ClassInfo> classes, std::optional<std::vector<double>> frequencies)
    : classes_(std::move(classes)) {
  if (classes_.size() > 255) throw ConfigError("at most 255 classes are supported");
  std::set<Rgb> colors;
  for (std::size_t i = 0; i < classes_.size(); ++i) {
    if (classes_[i].id != static_cast<int>(i)) {
      throw ConfigError("class ids must be exactly 0..N-1 in order; got " + std::to_string(classes_[i].id) +
                        " at position " + std::to_string(i));
    }
    if (!colors.insert(classes_[i].color).second) {
      throw ConfigError("duplicate class color " + color_string(classes_[i].color));
    }
  }
  if (frequencies) set_frequencies(std::move(*frequencies));
}

void ClassSchema::set_frequencies(std::vector<double> frequencies) {
  validate_frequencies(frequencies, classes_.size());
  frequencies_ = std::move(frequencies);
}

std::optional<int> ClassSchema::id_of(const Rgb& color) const {
  for (const auto& c : classes_) {
    if (c.color == color) return c.id;
  }
  return std::nullopt;
}

ClassSchema potsdam_schema() {
  return ClassSchema({{0, "impervious_surfaces", {255, 255, 255}},
                      {1, "building", {0, 0, 255}},
                      {2, "low_vegetation", {0, 255, 255}},
                      {3, "tree", {0, 255, 0}},
                      {4, "car", {255, 255, 0}},
                      {5, "clutter", {255, 0, 0}}});
}

void to_json(nlohmann::json& j, const ClassSchema& schema) {
  j = nlohmann::json::object();
  auto& arr = j["classes"] = nlohmann::json::array();
  for (const auto& c : schema.classes()) {
    arr.push_back({{"id", c.id}, {"name", c.name}, {"color", {c.color[0], c.color[1], c.color[2]}}});
  }
  if (schema.frequencies()) j["frequencies"] = *schema.frequencies();
}

void from_json(const nlohmann::json& j, ClassSchema& schema) {
  std::vector<ClassInfo> classes;
  const auto& arr = j.at("classes");
  for (std::size_t i = 0; i < arr.size(); ++i) {
    const auto& c = arr[i];
    ClassInfo info;
    info.id = c.contains("id") ? c.at("id").get<int>() : static_cast<int>(i);
    info.name = c.at("name").get<std::string>();
    const auto& col = c.at("color");
    if (col.size() != 3) throw ConfigError("class color must have 3 components");
    for (int k = 0; k < 3; ++k) {
      const int v = col[k].get<int>();
      if (v < 0 || v > 255) throw ConfigError("class color component outside [0,255]");
      info.color[k] = static_cast<std::uint8_t>(v);
    }
    classes.push_back(std::move(info));
  }
  std::optional<std::vector<double>> freq;
  if (j.contains("frequencies") && !j.at("frequencies").is_null()) {
    freq = j.at("frequencies").get<std::vector<double>>();
  }
  schema = ClassSchema(std::move(classes), std::move(freq));
}

}  // namespace clickseg
