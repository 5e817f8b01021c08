#pragma once

#include <array>
#include <cmath>
#include <numbers>
#include <optional>
#include <string>
#include <string_view>

#include "heightformer/errors.hpp"

namespace hf {

/// Detected categories, in heatmap channel order.
enum class Category : int { Car = 0, BigVehicle = 1, Cyclist = 2 };

inline constexpr std::size_t kNumCategories = 3;
inline constexpr std::array<std::string_view, kNumCategories> kCategoryNames = {"Car", "Big_vehicle", "Cyclist"};

inline std::string_view category_name(Category c) { return kCategoryNames[static_cast<std::size_t>(c)]; }

inline std::optional<Category> category_from_name(std::string_view name) {
  for (std::size_t i = 0; i < kNumCategories; ++i) {
    if (kCategoryNames[i] == name) return static_cast<Category>(i);
  }
  return std::nullopt;
}

/// Wraps an angle into (-pi, pi].
inline double normalize_angle(double a) {
  a = std::remainder(a, 2.0 * std::numbers::pi);
  if (a <= -std::numbers::pi) a += 2.0 * std::numbers::pi;
  return a;
}

/// 7-parameter box in the ego frame: center, dimensions, yaw about +z.
struct Box3D {
  double cx = 0.0, cy = 0.0, cz = 0.0;
  double length = 1.0, width = 1.0, height = 1.0;
  double yaw = 0.0;

  void validate() const {
    if (!(length > 0.0 && width > 0.0 && height > 0.0)) throw ContractError("box dimensions must be positive");
    if (!(yaw > -std::numbers::pi && yaw <= std::numbers::pi)) throw ContractError("box yaw outside (-pi, pi]");
  }

  double volume() const { return length * width * height; }
  double bottom() const { return cz - 0.5 * height; }
  double top() const { return cz + 0.5 * height; }
};

struct Detection {
  Box3D box;
  Category category = Category::Car;
  double score = 0.0;
};

struct LabeledBox {
  Box3D box;
  Category category = Category::Car;
};

}  // namespace hf
