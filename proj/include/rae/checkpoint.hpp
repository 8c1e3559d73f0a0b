#pragma once

// Versioned binary checkpoint: a JSON manifest (config text, RNG state,
// optimizer step, tensor directory) followed by raw little-endian tensor
// payloads. Saving and loading round-trips bit-exactly.

#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "rae/model.hpp"
#include "rae/optim.hpp"

namespace rae {

inline constexpr char kCheckpointMagic[8] = {'R', 'A', 'E', 'C', 'K', 'P', 'T', '1'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

template <class T>
const char* dtype_name() {
  if constexpr (sizeof(T) == 8)
    return "f64";
  else
    return "f32";
}

template <class T>
struct Checkpoint {
  ModelState<T> state;
  AdamW<T> opt;
  std::string config_ini;
  Rng rng;
};

namespace detail {

template <class T>
void append_store(nlohmann::json& dir, std::vector<const Tensor<T>*>& payload, const char* kind,
                  const ParamStore<T>& store, std::size_t& offset) {
  for (const auto& name : store.names()) {
    const Tensor<T>& t = store.at(name);
    nlohmann::json entry;
    entry["name"] = name;
    entry["kind"] = kind;
    entry["shape"] = t.shape();
    entry["offset"] = offset;
    entry["count"] = t.size();
    dir.push_back(entry);
    payload.push_back(&t);
    offset += t.size() * sizeof(T);
  }
}

}  // namespace detail

template <class T>
void save_checkpoint(const std::string& path, const ModelState<T>& state, const AdamW<T>& opt,
                     const std::string& config_ini, const Rng& rng) {
  nlohmann::json meta;
  meta["dtype"] = dtype_name<T>();
  meta["config_ini"] = config_ini;
  meta["opt_step"] = opt.step_count();
  {
    const auto s = rng.state();
    meta["rng"] = {std::to_string(s[0]), std::to_string(s[1]), std::to_string(s[2]),
                   std::to_string(s[3])};
  }
  nlohmann::json dir = nlohmann::json::array();
  std::vector<const Tensor<T>*> payload;
  std::size_t offset = 0;
  detail::append_store(dir, payload, "param", state.params, offset);
  detail::append_store(dir, payload, "teacher", state.teacher, offset);
  detail::append_store(dir, payload, "opt_m", opt.first_moments(), offset);
  detail::append_store(dir, payload, "opt_v", opt.second_moments(), offset);
  meta["tensors"] = dir;

  const std::string json_text = meta.dump();
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write checkpoint '" + path + "'");
  out.write(kCheckpointMagic, sizeof(kCheckpointMagic));
  const std::uint32_t version = kCheckpointVersion, reserved = 0;
  out.write(reinterpret_cast<const char*>(&version), sizeof(version));
  out.write(reinterpret_cast<const char*>(&reserved), sizeof(reserved));
  const std::uint64_t json_len = json_text.size();
  out.write(reinterpret_cast<const char*>(&json_len), sizeof(json_len));
  out.write(json_text.data(), static_cast<std::streamsize>(json_text.size()));
  for (const Tensor<T>* t : payload)
    out.write(reinterpret_cast<const char*>(t->data()),
              static_cast<std::streamsize>(t->size() * sizeof(T)));
  if (!out) throw IoError("failed while writing checkpoint '" + path + "'");
}

template <class T>
Checkpoint<T> load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint '" + path + "'");
  char magic[8];
  in.read(magic, sizeof(magic));
  if (!in || std::memcmp(magic, kCheckpointMagic, sizeof(magic)) != 0)
    throw IoError("'" + path + "' is not a checkpoint file");
  std::uint32_t version = 0, reserved = 0;
  in.read(reinterpret_cast<char*>(&version), sizeof(version));
  in.read(reinterpret_cast<char*>(&reserved), sizeof(reserved));
  if (version != kCheckpointVersion)
    throw IoError("checkpoint '" + path + "': unsupported version " + std::to_string(version));
  std::uint64_t json_len = 0;
  in.read(reinterpret_cast<char*>(&json_len), sizeof(json_len));
  std::string json_text(json_len, '\0');
  in.read(json_text.data(), static_cast<std::streamsize>(json_len));
  if (!in) throw IoError("checkpoint '" + path + "': truncated manifest");
  nlohmann::json meta = nlohmann::json::parse(json_text);

  if (meta.at("dtype").get<std::string>() != dtype_name<T>())
    throw ConfigError("checkpoint '" + path + "' stores " + meta.at("dtype").get<std::string>() +
                      " tensors; run precision does not match");

  Checkpoint<T> ck;
  ck.config_ini = meta.at("config_ini").get<std::string>();
  {
    std::array<std::uint64_t, 4> s{};
    const auto& arr = meta.at("rng");
    for (int i = 0; i < 4; ++i) s[i] = std::stoull(arr.at(i).get<std::string>());
    ck.rng.set_state(s);
  }
  ck.opt.set_step_count(meta.at("opt_step").get<long>());

  for (const auto& entry : meta.at("tensors")) {
    const std::string name = entry.at("name").get<std::string>();
    const std::string kind = entry.at("kind").get<std::string>();
    Shape shape = entry.at("shape").get<Shape>();
    const std::size_t count = entry.at("count").get<std::size_t>();
    Tensor<T> t(shape);
    if (t.size() != count) throw IoError("checkpoint '" + path + "': bad tensor entry for " + name);
    in.read(reinterpret_cast<char*>(t.data()), static_cast<std::streamsize>(count * sizeof(T)));
    if (!in) throw IoError("checkpoint '" + path + "': truncated payload at " + name);
    if (kind == "param")
      ck.state.params.add(name, std::move(t));
    else if (kind == "teacher")
      ck.state.teacher.add(name, std::move(t));
    else if (kind == "opt_m")
      ck.opt.first_moments().add(name, std::move(t));
    else if (kind == "opt_v")
      ck.opt.second_moments().add(name, std::move(t));
    else
      throw IoError("checkpoint '" + path + "': unknown tensor kind '" + kind + "'");
  }
  return ck;
}

}  // namespace rae
