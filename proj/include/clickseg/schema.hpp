#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json_fwd.hpp>

namespace clickseg {

using Rgb = std::array<std::uint8_t, 3>;

struct ClassInfo {
  int id = 0;
  std::string name;
  Rgb color{};

  friend bool operator==(const ClassInfo&, const ClassInfo&) = default;
};

// The N segmentation classes, their render colors and (optionally) their
// training-set pixel fractions.
//
// Invariants enforced on construction: ids are exactly 0..N-1 in order,
// colors are pairwise distinct, frequencies (when present) lie in [0, 1]
// and sum to 1 within 1e-6.
class ClassSchema {
 public:
  ClassSchema() = default;
  explicit ClassSchema(std::vector<ClassInfo> classes,
                       std::optional<std::vector<double>> frequencies = std::nullopt);

  [[nodiscard]] int size() const { return static_cast<int>(classes_.size()); }
  [[nodiscard]] const std::vector<ClassInfo>& classes() const { return classes_; }
  [[nodiscard]] const ClassInfo& operator[](int id) const { return classes_.at(id); }
  [[nodiscard]] const std::optional<std::vector<double>>& frequencies() const { return frequencies_; }

  void set_frequencies(std::vector<double> frequencies);

  // Class id painted with `color`, if any.
  [[nodiscard]] std::optional<int> id_of(const Rgb& color) const;
  [[nodiscard]] const Rgb& color_of(int id) const { return classes_.at(id).color; }

  friend bool operator==(const ClassSchema&, const ClassSchema&) = default;

 private:
  std::vector<ClassInfo> classes_;
  std::optional<std::vector<double>> frequencies_;
};

// Six-class aerial schema (impervious surfaces, building, low vegetation,
// tree, car, clutter) with the customary render colors.
ClassSchema potsdam_schema();

void to_json(nlohmann::json& j, const ClassSchema& schema);
void from_json(const nlohmann::json& j, ClassSchema& schema);

}  // namespace clickseg
