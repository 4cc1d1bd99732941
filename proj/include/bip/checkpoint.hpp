#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "bip/errors.hpp"
#include "bip/nn.hpp"

namespace bip {

// Checkpoint archive: one file holding named row-major float64 arrays.
// Layout:
//   line 1: "BIPCKPT1"
//   line 2: JSON manifest {"version":1,"arrays":[{name,rows,cols,tag},...]}
//   then:   raw little-endian float64 payload, arrays concatenated in
//           manifest order.
struct NamedArray {
  std::string name;
  std::size_t rows = 0;
  std::size_t cols = 1;
  std::string tag;  // free-form, e.g. activation of the layer
  Vec data;
};

inline void save_checkpoint(const std::string& path, const std::vector<NamedArray>& arrays) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open checkpoint for writing: " + path);
  nlohmann::json manifest;
  manifest["version"] = 1;
  auto& list = manifest["arrays"];
  list = nlohmann::json::array();
  for (const auto& a : arrays) {
    if (a.data.size() != a.rows * a.cols)
      throw ShapeError("save_checkpoint: array size mismatch for " + a.name);
    list.push_back({{"name", a.name}, {"rows", a.rows}, {"cols", a.cols}, {"tag", a.tag}});
  }
  out << "BIPCKPT1\n" << manifest.dump() << "\n";
  for (const auto& a : arrays)
    out.write(reinterpret_cast<const char*>(a.data.data()),
              static_cast<std::streamsize>(a.data.size() * sizeof(double)));
  if (!out) throw IoError("checkpoint write failed: " + path);
}

inline std::vector<NamedArray> load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint: " + path);
  std::string magic, manifest_line;
  std::getline(in, magic);
  if (magic != "BIPCKPT1") throw IoError("bad checkpoint magic in " + path);
  std::getline(in, manifest_line);
  nlohmann::json manifest = nlohmann::json::parse(manifest_line, nullptr, false);
  if (manifest.is_discarded()) throw IoError("bad checkpoint manifest in " + path);
  std::vector<NamedArray> arrays;
  for (const auto& e : manifest.at("arrays")) {
    NamedArray a;
    a.name = e.at("name").get<std::string>();
    a.rows = e.at("rows").get<std::size_t>();
    a.cols = e.at("cols").get<std::size_t>();
    a.tag = e.at("tag").get<std::string>();
    a.data.resize(a.rows * a.cols);
    in.read(reinterpret_cast<char*>(a.data.data()),
            static_cast<std::streamsize>(a.data.size() * sizeof(double)));
    if (!in) throw IoError("truncated checkpoint payload in " + path);
    arrays.push_back(std::move(a));
  }
  return arrays;
}

inline void append_mlp_arrays(std::vector<NamedArray>& out, const nn::Mlp& net) {
  for (const auto& l : net.layers) {
    out.push_back({l.name + ".w", l.out_dim(), l.in_dim(), nn::activation_name(l.act), l.w.data()});
    out.push_back({l.name + ".b", l.b.size(), 1, nn::activation_name(l.act), l.b});
  }
}

/// Rebuilds an Mlp from arrays named "<prefix>.l<k>.w" / ".b" in order.
inline nn::Mlp mlp_from_arrays(const std::vector<NamedArray>& arrays, const std::string& prefix) {
  nn::Mlp net;
  for (std::size_t k = 0;; ++k) {
    const std::string base = prefix + ".l" + std::to_string(k);
    const NamedArray* wa = nullptr;
    const NamedArray* ba = nullptr;
    for (const auto& a : arrays) {
      if (a.name == base + ".w") wa = &a;
      if (a.name == base + ".b") ba = &a;
    }
    if (!wa) break;
    if (!ba) throw IoError("checkpoint missing bias for " + base);
    nn::Layer l;
    l.name = base;
    l.act = nn::activation_from_name(wa->tag);
    l.w = Mat(wa->rows, wa->cols);
    l.w.data() = wa->data;
    l.b = ba->data;
    net.layers.push_back(std::move(l));
  }
  if (net.layers.empty()) throw IoError("checkpoint has no layers with prefix " + prefix);
  net.check_chained();
  return net;
}

inline const NamedArray& find_array(const std::vector<NamedArray>& arrays,
                                    const std::string& name) {
  for (const auto& a : arrays)
    if (a.name == name) return a;
  throw IoError("checkpoint missing array: " + name);
}

}  // namespace bip
