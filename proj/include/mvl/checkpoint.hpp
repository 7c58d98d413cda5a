#pragma once

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <type_traits>
#include <vector>

#include <nlohmann/json.hpp>

#include "mvl/error.hpp"
#include "mvl/model.hpp"
#include "mvl/nn/optim.hpp"

namespace mvl {

// ---------------------------------------------------------------------------
// ModelConfig <-> JSON

inline nlohmann::json to_json(const ModelConfig& c) {
  return {
      {"vessel", to_string(c.vessel)},
      {"task", to_string(c.task)},
      {"backbone",
       {{"variant", nn::to_string(c.backbone.variant)},
        {"embed_dim", c.backbone.embed_dim},
        {"input_height", c.backbone.input_height},
        {"input_width", c.backbone.input_width},
        {"clip_length", c.backbone.clip_length},
        {"pretrained_weights", c.backbone.pretrained_weights}}},
      {"head",
       {{"kind", nn::to_string(c.head.kind)},
        {"hidden_dim", c.head.hidden_dim},
        {"attn",
         {{"proj_dim", c.head.attn.proj_dim},
          {"layers", c.head.attn.layers},
          {"heads", c.head.attn.heads},
          {"ffn_dim", c.head.attn.ffn_dim}}}}},
  };
}

namespace detail {

template <class V>
void read_opt(const nlohmann::json& j, const char* key, V& out, const std::string& where) {
  auto it = j.find(key);
  if (it == j.end()) return;
  try {
    if constexpr (std::is_unsigned_v<V> && !std::is_same_v<V, bool>) {
      if (!it->is_number_unsigned()) throw SchemaError(where + "." + key + " must be a non-negative integer");
    }
    out = it->get<V>();
  } catch (const nlohmann::json::exception&) {
    throw SchemaError(where + "." + key + " has the wrong type");
  }
}

inline void check_keys(const nlohmann::json& j, std::initializer_list<const char*> known, const std::string& where) {
  if (!j.is_object()) throw SchemaError(where + " must be an object");
  for (const auto& [k, _] : j.items()) {
    bool ok = false;
    for (const char* name : known) ok = ok || k == name;
    if (!ok) throw SchemaError(where + ": unknown field \"" + k + "\"");
  }
}

}  // namespace detail

/// Parses a model config; absent fields keep the values already in `base`.
inline ModelConfig model_config_from_json(const nlohmann::json& j, ModelConfig base = {}) {
  using detail::read_opt;
  detail::check_keys(j, {"vessel", "task", "backbone", "head"}, "model");
  std::string s;
  if (j.contains("vessel")) {
    read_opt(j, "vessel", s, "model");
    base.vessel = vessel_from_string(s);
  }
  if (j.contains("task")) {
    read_opt(j, "task", s, "model");
    base.task = task_from_string(s);
  }
  if (auto it = j.find("backbone"); it != j.end()) {
    detail::check_keys(*it, {"variant", "embed_dim", "input_height", "input_width", "clip_length", "pretrained_weights"},
                       "model.backbone");
    if (it->contains("variant")) {
      read_opt(*it, "variant", s, "model.backbone");
      base.backbone.variant = nn::backbone_variant_from_string(s);
    }
    read_opt(*it, "embed_dim", base.backbone.embed_dim, "model.backbone");
    read_opt(*it, "input_height", base.backbone.input_height, "model.backbone");
    read_opt(*it, "input_width", base.backbone.input_width, "model.backbone");
    read_opt(*it, "clip_length", base.backbone.clip_length, "model.backbone");
    read_opt(*it, "pretrained_weights", base.backbone.pretrained_weights, "model.backbone");
  }
  if (auto it = j.find("head"); it != j.end()) {
    detail::check_keys(*it, {"kind", "hidden_dim", "attn"}, "model.head");
    if (it->contains("kind")) {
      read_opt(*it, "kind", s, "model.head");
      base.head.kind = nn::head_kind_from_string(s);
    }
    read_opt(*it, "hidden_dim", base.head.hidden_dim, "model.head");
    if (auto a = it->find("attn"); a != it->end()) {
      detail::check_keys(*a, {"proj_dim", "layers", "heads", "ffn_dim"}, "model.head.attn");
      read_opt(*a, "proj_dim", base.head.attn.proj_dim, "model.head.attn");
      read_opt(*a, "layers", base.head.attn.layers, "model.head.attn");
      read_opt(*a, "heads", base.head.attn.heads, "model.head.attn");
      read_opt(*a, "ffn_dim", base.head.attn.ffn_dim, "model.head.attn");
    }
  }
  base.validate();
  return base;
}

// ---------------------------------------------------------------------------
// Archive: "MVLCKPT1", u64 header length, JSON header, raw tensor payload in
// header order (little-endian, native scalar type).

inline constexpr char kCheckpointMagic[8] = {'M', 'V', 'L', 'C', 'K', 'P', 'T', '1'};

template <class T>
constexpr const char* dtype_name() {
  static_assert(std::is_same_v<T, float> || std::is_same_v<T, double>);
  return std::is_same_v<T, float> ? "float32" : "float64";
}

template <class T>
struct Checkpoint {
  VesselModel<T> model;
  std::optional<double> nonzero_threshold;
  nlohmann::json metadata = nlohmann::json::object();
  std::optional<typename nn::Adam<T>::State> optimizer;
};

template <class T>
void save_checkpoint(const std::filesystem::path& path, VesselModel<T>& model,
                     const nlohmann::json& metadata = nlohmann::json::object(),
                     std::optional<double> nonzero_threshold = std::nullopt,
                     const typename nn::Adam<T>::State* optimizer = nullptr) {
  const auto params = model.all_params();
  nlohmann::json tensors = nlohmann::json::array();
  for (const auto* p : params) tensors.push_back({{"name", p->name}, {"shape", p->value.shape()}});
  nlohmann::json header = {
      {"format", 1},
      {"dtype", dtype_name<T>()},
      {"model", to_json(model.config())},
      {"nonzero_threshold", nonzero_threshold ? nlohmann::json(*nonzero_threshold) : nlohmann::json(nullptr)},
      {"metadata", metadata},
      {"tensors", tensors},
      {"optimizer", nullptr},
  };
  if (optimizer) {
    nlohmann::json shapes = nlohmann::json::array();
    for (const auto& m : optimizer->m) shapes.push_back(m.shape());
    header["optimizer"] = {{"steps", optimizer->steps}, {"shapes", shapes}};
  }
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  const std::filesystem::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw RuntimeError("cannot write checkpoint " + path.string());
    const std::string text = header.dump();
    const std::uint64_t len = text.size();
    out.write(kCheckpointMagic, sizeof(kCheckpointMagic));
    out.write(reinterpret_cast<const char*>(&len), sizeof(len));
    out.write(text.data(), static_cast<std::streamsize>(text.size()));
    auto dump = [&](const Tensor<T>& t) {
      out.write(reinterpret_cast<const char*>(t.data()), static_cast<std::streamsize>(t.size() * sizeof(T)));
    };
    for (const auto* p : params) dump(p->value);
    if (optimizer) {
      for (const auto& m : optimizer->m) dump(m);
      for (const auto& v : optimizer->v) dump(v);
    }
    if (!out) throw RuntimeError("failed writing checkpoint " + path.string());
  }
  std::filesystem::rename(tmp, path);
}

template <class T>
Checkpoint<T> load_checkpoint(const std::filesystem::path& path,
                              const std::optional<ModelConfig>& expected = std::nullopt) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw RuntimeError("cannot open checkpoint " + path.string());
  char magic[8];
  std::uint64_t len = 0;
  in.read(magic, sizeof(magic));
  in.read(reinterpret_cast<char*>(&len), sizeof(len));
  if (!in || std::memcmp(magic, kCheckpointMagic, sizeof(magic)) != 0) {
    throw SchemaError("not a checkpoint archive: " + path.string());
  }
  std::string text(len, '\0');
  in.read(text.data(), static_cast<std::streamsize>(len));
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw SchemaError(std::string("corrupt checkpoint header: ") + e.what());
  }
  if (header.value("dtype", "") != std::string(dtype_name<T>())) {
    throw SchemaError("checkpoint dtype " + header.value("dtype", "?") + " does not match " + dtype_name<T>());
  }
  const ModelConfig cfg = model_config_from_json(header.at("model"));
  if (expected && !(*expected == cfg)) {
    throw ValidationError("checkpoint model config is incompatible with the requested config");
  }
  Checkpoint<T> ck{VesselModel<T>(cfg), std::nullopt, header.value("metadata", nlohmann::json::object()), std::nullopt};
  if (!header.at("nonzero_threshold").is_null()) ck.nonzero_threshold = header.at("nonzero_threshold").get<double>();

  auto params = ck.model.all_params();
  const auto& tensors = header.at("tensors");
  if (tensors.size() != params.size()) throw ValidationError("checkpoint tensor list does not match model");
  auto read = [&](Tensor<T>& t) {
    in.read(reinterpret_cast<char*>(t.data()), static_cast<std::streamsize>(t.size() * sizeof(T)));
    if (!in) throw RuntimeError("truncated checkpoint " + path.string());
  };
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (tensors[i].at("name").get<std::string>() != params[i]->name ||
        tensors[i].at("shape").get<Shape>() != params[i]->value.shape()) {
      throw ValidationError("checkpoint tensor " + tensors[i].at("name").get<std::string>() +
                            " does not match model parameter " + params[i]->name);
    }
    read(params[i]->value);
  }
  if (!header.at("optimizer").is_null()) {
    typename nn::Adam<T>::State st;
    st.steps = header.at("optimizer").at("steps").get<std::size_t>();
    const auto& shapes = header.at("optimizer").at("shapes");
    for (auto* buf : {&st.m, &st.v}) {
      for (const auto& sh : shapes) {
        Tensor<T> t(sh.get<Shape>());
        read(t);
        buf->push_back(std::move(t));
      }
    }
    ck.optimizer = std::move(st);
  }
  return ck;
}

/// Loads weights into an existing model in place after checking config
/// compatibility.
template <class T>
Checkpoint<T> load_checkpoint_into(const std::filesystem::path& path, VesselModel<T>& model) {
  Checkpoint<T> ck = load_checkpoint<T>(path, model.config());
  model.copy_parameters_from(ck.model);
  return ck;
}

}  // namespace mvl
