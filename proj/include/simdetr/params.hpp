// SPDX-License-Identifier: Apache-2.0
//
// Named parameter store with value-exact JSON serialization
// ("simdetr-ckpt-v1" format).
#pragma once

#include <cstdint>
#include <map>
#include <stdexcept>
#include <string>
#include <utility>

#include <json.hpp>

#include "simdetr/tensor.hpp"

namespace simdetr {

using json = nlohmann::json;

inline constexpr const char* kCheckpointFormat = "simdetr-ckpt-v1";

// Parameters keyed by dot-separated path. std::map keeps iteration order
// deterministic (sorted by name).
struct ParamStore {
  std::map<std::string, Tensor> params;
  std::uint64_t rng_seed = 0;

  Tensor& add(const std::string& name, Tensor t) {
    auto [it, inserted] = params.emplace(name, std::move(t));
    if (!inserted) throw std::invalid_argument("ParamStore: duplicate parameter " + name);
    return it->second;
  }

  bool has(const std::string& name) const { return params.count(name) != 0; }

  Tensor& at(const std::string& name) {
    auto it = params.find(name);
    if (it == params.end()) throw std::invalid_argument("ParamStore: missing parameter " + name);
    return it->second;
  }

  const Tensor& at(const std::string& name) const {
    auto it = params.find(name);
    if (it == params.end()) throw std::invalid_argument("ParamStore: missing parameter " + name);
    return it->second;
  }

  void zero_grads() {
    for (auto& [name, t] : params) t.zero_grad();
  }

  std::size_t total_size() const {
    std::size_t n = 0;
    for (const auto& [name, t] : params) n += t.size();
    return n;
  }
};

inline json params_to_json(const ParamStore& store) {
  json j;
  j["format"] = kCheckpointFormat;
  j["seed"] = store.rng_seed;
  json p = json::object();
  for (const auto& [name, t] : store.params) {
    p[name] = {{"shape", t.shape}, {"data", t.data}};
  }
  j["params"] = std::move(p);
  return j;
}

inline ParamStore params_from_json(const json& j) {
  if (!j.is_object() || j.value("format", "") != kCheckpointFormat) {
    throw std::invalid_argument("checkpoint: missing or unknown format field");
  }
  ParamStore store;
  store.rng_seed = j.at("seed").get<std::uint64_t>();
  for (const auto& [name, spec] : j.at("params").items()) {
    Shape shape = spec.at("shape").get<Shape>();
    std::vector<double> data = spec.at("data").get<std::vector<double>>();
    store.add(name, Tensor(std::move(shape), std::move(data), true));
  }
  return store;
}

}  // namespace simdetr
