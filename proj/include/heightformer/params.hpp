#pragma once

// Named parameter tensors and their JSON form:
//   { "<dotted.name>": { "shape": [..], "data": [..] }, ... }

#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "json.hpp"

#include "heightformer/errors.hpp"
#include "heightformer/random.hpp"
#include "heightformer/tensor.hpp"

namespace hf {

class ParameterStore {
 public:
  using Map = std::map<std::string, Tensor>;

  /// Registers a trainable tensor. Names are unique dotted paths.
  const Tensor& add(const std::string& name, Tensor value) {
    value.set_requires_grad(true);
    auto [it, inserted] = params_.emplace(name, std::move(value));
    if (!inserted) throw ConfigError("duplicate parameter name '" + name + "'");
    return it->second;
  }

  const Tensor& get(const std::string& name) const {
    auto it = params_.find(name);
    if (it == params_.end()) throw ConfigError("unknown parameter '" + name + "'");
    return it->second;
  }

  bool contains(const std::string& name) const { return params_.count(name) != 0; }
  std::size_t size() const { return params_.size(); }
  std::size_t scalar_count() const {
    std::size_t n = 0;
    for (const auto& [_, t] : params_) n += t.size();
    return n;
  }

  Map::const_iterator begin() const { return params_.begin(); }
  Map::const_iterator end() const { return params_.end(); }

  void zero_grad() {
    for (auto& [_, t] : params_) t.zero_grad();
  }

  nlohmann::json to_json() const {
    nlohmann::json doc = nlohmann::json::object();
    for (const auto& [name, t] : params_) {
      doc[name] = {{"shape", t.shape()}, {"data", t.vec()}};
    }
    return doc;
  }

  /// Overwrites values from `doc`; names and shapes must match exactly.
  void load_json(const nlohmann::json& doc) {
    if (!doc.is_object()) throw ParseError("parameter document must be a JSON object", 0);
    for (const auto& [name, _] : params_) {
      if (!doc.contains(name)) throw ParseError("missing parameter '" + name + "'", 0);
    }
    for (const auto& [name, entry] : doc.items()) {
      auto it = params_.find(name);
      if (it == params_.end()) throw ParseError("unexpected parameter '" + name + "'", 0);
      Shape shape;
      std::vector<double> data;
      try {
        shape = entry.at("shape").get<Shape>();
        data = entry.at("data").get<std::vector<double>>();
      } catch (const nlohmann::json::exception& e) {
        throw ParseError("parameter '" + name + "': " + e.what(), 0);
      }
      if (shape != it->second.shape()) {
        throw ParseError("parameter '" + name + "' has shape " + shape_str(shape) + ", expected " +
                             shape_str(it->second.shape()),
                         0);
      }
      if (data.size() != it->second.size()) {
        throw ParseError("parameter '" + name + "' holds " + std::to_string(data.size()) + " values", 0);
      }
      std::copy(data.begin(), data.end(), it->second.mutable_values().begin());
    }
  }

  void save(const std::filesystem::path& path) const {
    std::ofstream out(path);
    if (!out) throw Error("cannot write " + path.string());
    out << to_json().dump() << '\n';
  }

  void load(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw ParseError("cannot read " + path.string(), 0);
    nlohmann::json doc;
    try {
      doc = nlohmann::json::parse(in);
    } catch (const nlohmann::json::exception& e) {
      throw ParseError(path.string() + ": " + e.what(), 0);
    }
    load_json(doc);
  }

 private:
  Map params_;
};

/// Uniform(-b, b) with b = gain / sqrt(fan_in).
inline Tensor init_uniform(Rng& rng, Shape shape, std::size_t fan_in, double gain = 1.0) {
  const double bound = gain / std::sqrt(static_cast<double>(fan_in));
  std::vector<double> v(shape_numel(shape));
  for (auto& x : v) x = rng.uniform(-bound, bound);
  return Tensor(std::move(shape), std::move(v));
}

}  // namespace hf
