#pragma once

// MMW1 parameter files: "MMW1", u32 header length, a JSON header naming every
// tensor with its shape and byte offset into the payload, then the payload as
// little-endian 32-bit floats. Plus JSON forms of the model configuration.

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"
#include "mmlstm/binary.hpp"
#include "mmlstm/model.hpp"

namespace mmlstm {

class WeightFormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline constexpr char kWeightMagic[4] = {'M', 'M', 'W', '1'};

/// Any object with for_each_param(f(name, Matrix&)).
template <class P>
std::vector<char> encode_params(const P& params) {
  nlohmann::json tensors = nlohmann::json::array();
  std::vector<float> payload;
  params.for_each_param([&](const std::string& name, const auto& m) {
    tensors.push_back({{"name", name}, {"shape", {m.rows(), m.cols()}}, {"offset", payload.size() * 4}});
    for (auto v : m.values()) payload.push_back(static_cast<float>(v));
  });
  const std::string header = nlohmann::json{{"format", "MMW1"}, {"tensors", tensors}}.dump();
  binary::Writer w;
  w.bytes(kWeightMagic, 4);
  w.u32(static_cast<std::uint32_t>(header.size()));
  w.bytes(header.data(), header.size());
  w.f32s(payload);
  return w.buffer();
}

/// Fills every tensor of `params` by name; names and shapes must match exactly.
template <class P>
void decode_params(P& params, std::vector<char> bytes, const std::string& name = "weights") {
  binary::Reader r(std::move(bytes), name);
  struct Entry {
    std::size_t rows, cols, offset;
  };
  std::map<std::string, Entry> entries;
  std::vector<float> payload;
  try {
    if (r.str(4) != std::string(kWeightMagic, 4)) throw WeightFormatError("'" + name + "' is not an MMW1 file");
    const std::uint32_t header_len = r.u32();
    const auto header = nlohmann::json::parse(r.str(header_len));
    for (const auto& t : header.at("tensors"))
      entries[t.at("name").get<std::string>()] = {t.at("shape").at(0).get<std::size_t>(),
                                                  t.at("shape").at(1).get<std::size_t>(),
                                                  t.at("offset").get<std::size_t>()};
    if (r.remaining() % 4) throw WeightFormatError("'" + name + "': payload is not a whole number of floats");
    payload.resize(r.remaining() / 4);
    r.f32s(payload);
  } catch (const binary::Truncated& e) {
    throw WeightFormatError(e.what());
  } catch (const nlohmann::json::exception& e) {
    throw WeightFormatError("'" + name + "': bad header: " + e.what());
  }
  std::size_t used = 0;
  params.for_each_param([&](const std::string& tensor, auto& m) {
    const auto it = entries.find(tensor);
    if (it == entries.end()) throw WeightFormatError("'" + name + "' lacks tensor '" + tensor + "'");
    const Entry& e = it->second;
    if (e.rows != m.rows() || e.cols != m.cols())
      throw WeightFormatError("'" + name + "': tensor '" + tensor + "' is " + std::to_string(e.rows) + "x" +
                              std::to_string(e.cols) + ", expected " + shape_str(m));
    if (e.offset % 4 || e.offset / 4 + m.size() > payload.size())
      throw WeightFormatError("'" + name + "': tensor '" + tensor + "' lies outside the payload");
    using S = typename std::remove_cvref_t<decltype(m)>::value_type;
    for (std::size_t i = 0; i < m.size(); ++i) m.values()[i] = static_cast<S>(payload[e.offset / 4 + i]);
    ++used;
  });
  if (used != entries.size())
    throw WeightFormatError("'" + name + "' holds " + std::to_string(entries.size()) + " tensors, expected " +
                            std::to_string(used));
}

template <class P>
void save_params(const P& params, const std::filesystem::path& path) {
  binary::Writer w;
  const auto bytes = encode_params(params);
  w.bytes(bytes.data(), bytes.size());
  w.save(path.string());
}

template <class P>
void load_params(P& params, const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open '" + path.string() + "'");
  std::vector<char> data((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  decode_params(params, std::move(data), path.string());
}

// ---------------------------------------------------------------------------
// Configuration as JSON

inline nlohmann::json to_json(const WeightingFn& w) {
  return {{"kind", to_string(w.kind)}, {"alpha", w.alpha}, {"beta", w.beta}, {"duration", w.duration}};
}

inline WeightingFn weighting_from_json(const nlohmann::json& j) {
  WeightingFn w;
  w.kind = weighting_from_string(j.at("kind").get<std::string>());
  w.alpha = j.at("alpha").get<double>();
  w.beta = j.at("beta").get<double>();
  w.duration = j.at("duration").get<double>();
  return w;
}

inline nlohmann::json to_json(const ModelConfig& c) {
  return {{"modality_dims", c.modality_dims},
          {"hidden", c.hidden},
          {"num_classes", c.num_classes},
          {"fps", c.fps},
          {"stage_groups", c.stage_groups},
          {"loss",
           {{"clip_epsilon", c.loss.clip_epsilon},
            {"intermediate_loss_weight", c.loss.intermediate_loss_weight},
            {"weighting", to_json(c.loss.weighting)}}}};
}

inline ModelConfig model_config_from_json(const nlohmann::json& j) {
  ModelConfig c;
  c.modality_dims = j.at("modality_dims").get<std::vector<std::size_t>>();
  c.hidden = j.at("hidden").get<std::size_t>();
  c.num_classes = j.at("num_classes").get<std::size_t>();
  c.fps = j.at("fps").get<double>();
  c.stage_groups = j.at("stage_groups").get<std::vector<std::vector<std::size_t>>>();
  const auto& l = j.at("loss");
  c.loss.num_classes = c.num_classes;
  c.loss.clip_epsilon = l.at("clip_epsilon").get<double>();
  c.loss.intermediate_loss_weight = l.at("intermediate_loss_weight").get<double>();
  c.loss.weighting = weighting_from_json(l.at("weighting"));
  c.validate();
  return c;
}

}  // namespace mmlstm
