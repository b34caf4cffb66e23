#pragma once

// Model checkpoint format (JSON):
//
//   {
//     "format": "certdg-model", "version": 1,
//     "layers": [ {"rows": r, "cols": c, "activation": "relu"|"identity",
//                  "weight": [row-major r*c], "bias": [r]}, ... ],
//     "head":   {"rows": C, "cols": m, "weight": [row-major C*m], "bias": [C]}
//   }
//
// Doubles are written in shortest round-trip form, so save/load is exact.

#include <filesystem>
#include <string>

#include "certdg/io.hpp"
#include "certdg/netcore.hpp"
#include "json.hpp"

namespace certdg {

using json = nlohmann::json;

inline json matrix_to_json(const Mat& m) {
  json arr = json::array();
  for (Eigen::Index r = 0; r < m.rows(); ++r)
    for (Eigen::Index c = 0; c < m.cols(); ++c) arr.push_back(m(r, c));
  return arr;
}

inline json vector_to_json(const Vec& v) {
  json arr = json::array();
  for (Eigen::Index i = 0; i < v.size(); ++i) arr.push_back(v[i]);
  return arr;
}

inline Vec vector_from_json(const json& j, Eigen::Index n, const std::string& what) {
  if (!j.is_array() || static_cast<Eigen::Index>(j.size()) != n)
    fail(ErrorKind::parse_error, what + ": expected array of " + std::to_string(n));
  Vec v(n);
  for (Eigen::Index i = 0; i < n; ++i) v[i] = j[static_cast<std::size_t>(i)].get<double>();
  return v;
}

inline Mat matrix_from_json(const json& j, Eigen::Index rows, Eigen::Index cols, const std::string& what) {
  if (!j.is_array() || static_cast<Eigen::Index>(j.size()) != rows * cols)
    fail(ErrorKind::parse_error, what + ": expected array of " + std::to_string(rows * cols));
  Mat m(rows, cols);
  std::size_t k = 0;
  for (Eigen::Index r = 0; r < rows; ++r)
    for (Eigen::Index c = 0; c < cols; ++c) m(r, c) = j[k++].get<double>();
  return m;
}

inline json model_to_json(const ModelParams& p) {
  json layers = json::array();
  for (const auto& L : p.layers) {
    layers.push_back({{"rows", L.weight.rows()},
                      {"cols", L.weight.cols()},
                      {"activation", to_string(L.activation)},
                      {"weight", matrix_to_json(L.weight)},
                      {"bias", vector_to_json(L.bias)}});
  }
  return {{"format", "certdg-model"},
          {"version", 1},
          {"layers", layers},
          {"head",
           {{"rows", p.head.weight.rows()},
            {"cols", p.head.weight.cols()},
            {"weight", matrix_to_json(p.head.weight)},
            {"bias", vector_to_json(p.head.bias)}}}};
}

inline ModelParams model_from_json(const json& j) {
  try {
    if (j.value("format", "") != "certdg-model") fail(ErrorKind::parse_error, "not a certdg-model record");
    if (j.value("version", 0) != 1) fail(ErrorKind::parse_error, "unsupported checkpoint version");
    ModelParams p;
    std::size_t idx = 0;
    for (const auto& L : j.at("layers")) {
      const auto rows = L.at("rows").get<Eigen::Index>();
      const auto cols = L.at("cols").get<Eigen::Index>();
      const std::string act = L.at("activation").get<std::string>();
      if (act != "relu" && act != "identity") fail(ErrorKind::parse_error, "unknown activation '" + act + "'");
      const std::string tag = "layer " + std::to_string(idx++);
      p.layers.push_back({matrix_from_json(L.at("weight"), rows, cols, tag + " weight"),
                          vector_from_json(L.at("bias"), rows, tag + " bias"),
                          act == "relu" ? Activation::relu : Activation::identity});
    }
    const auto& h = j.at("head");
    const auto rows = h.at("rows").get<Eigen::Index>();
    const auto cols = h.at("cols").get<Eigen::Index>();
    p.head = {matrix_from_json(h.at("weight"), rows, cols, "head weight"), vector_from_json(h.at("bias"), rows, "head bias")};
    p.validate();
    return p;
  } catch (const json::exception& e) {
    fail(ErrorKind::parse_error, std::string("checkpoint: ") + e.what());
  } catch (const Error& e) {
    if (e.kind() == ErrorKind::invalid_argument) fail(ErrorKind::parse_error, e.what());
    throw;
  }
}

inline void save_model(const ModelParams& p, const std::filesystem::path& path) {
  atomic_write(path, model_to_json(p).dump(1) + "\n");
}

inline ModelParams load_model(const std::filesystem::path& path) {
  json j;
  try {
    j = json::parse(read_file(path));
  } catch (const json::exception& e) {
    fail(ErrorKind::parse_error, path.string() + ": " + e.what());
  }
  return model_from_json(j);
}

}  // namespace certdg
