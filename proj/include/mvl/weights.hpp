#pragma once

// Named-tensor weight files used to import pretrained backbones:
// "MVLWTS01", u64 header length, JSON header {"dtype": "float32", "tensors":
// [{"name", "shape"}, ...]}, then the float32 payload in header order.

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "mvl/error.hpp"
#include "mvl/nn/layers.hpp"

namespace mvl {

inline constexpr char kWeightsMagic[8] = {'M', 'V', 'L', 'W', 'T', 'S', '0', '1'};

template <class T>
void save_weights(const std::filesystem::path& path, const nn::ParamList<T>& params) {
  nlohmann::json tensors = nlohmann::json::array();
  for (const auto* p : params) tensors.push_back({{"name", p->name}, {"shape", p->value.shape()}});
  const std::string text = nlohmann::json{{"dtype", "float32"}, {"tensors", tensors}}.dump();
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw RuntimeError("cannot write weights " + path.string());
  const std::uint64_t len = text.size();
  out.write(kWeightsMagic, sizeof(kWeightsMagic));
  out.write(reinterpret_cast<const char*>(&len), sizeof(len));
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  for (const auto* p : params) {
    std::vector<float> buf(p->value.values().begin(), p->value.values().end());
    out.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size() * sizeof(float)));
  }
  if (!out) throw RuntimeError("failed writing weights " + path.string());
}

/// Overwrites every parameter with the tensor of the same name. The file must
/// hold exactly these parameters with matching shapes.
template <class T>
void load_weights(const std::filesystem::path& path, const nn::ParamList<T>& params) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw RuntimeError("cannot open weights " + path.string());
  char magic[8];
  std::uint64_t len = 0;
  in.read(magic, sizeof(magic));
  in.read(reinterpret_cast<char*>(&len), sizeof(len));
  if (!in || std::memcmp(magic, kWeightsMagic, sizeof(magic)) != 0) {
    throw SchemaError("not a weight file: " + path.string());
  }
  std::string text(len, '\0');
  in.read(text.data(), static_cast<std::streamsize>(len));
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw SchemaError(path.string() + ": corrupt weight header: " + e.what());
  }
  if (header.value("dtype", "") != "float32") throw SchemaError(path.string() + ": weights must be float32");

  std::map<std::string, nn::Param<T>*> by_name;
  for (auto* p : params) by_name[p->name] = p;
  std::vector<float> buf;
  for (const auto& t : header.at("tensors")) {
    const auto name = t.at("name").get<std::string>();
    const auto shape = t.at("shape").get<Shape>();
    auto it = by_name.find(name);
    if (it == by_name.end()) throw ValidationError(path.string() + ": tensor " + name + " matches no parameter");
    if (it->second->value.shape() != shape) {
      throw ValidationError(path.string() + ": tensor " + name + " has shape " + shape_str(shape) + ", parameter has " +
                            shape_str(it->second->value.shape()));
    }
    buf.resize(it->second->size());
    in.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size() * sizeof(float)));
    if (!in) throw RuntimeError("truncated weight file " + path.string());
    for (std::size_t i = 0; i < buf.size(); ++i) it->second->value[i] = static_cast<T>(buf[i]);
    by_name.erase(it);
  }
  if (!by_name.empty()) {
    throw ValidationError(path.string() + ": no tensor for parameter " + by_name.begin()->first + " (" +
                          std::to_string(by_name.size()) + " missing)");
  }
}

}  // namespace mvl
