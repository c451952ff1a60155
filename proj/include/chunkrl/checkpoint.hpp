#pragma once

// Versioned checkpoint container. A checkpoint is a directory holding one
// binary blob per named network (flat parameter vector followed by both
// optimizer moment vectors, little-endian float64) and a JSON manifest with
// names, layer shape descriptors, a format version string, and free-form
// run metadata.

#include <bit>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "chunkrl/common.hpp"
#include "chunkrl/nn.hpp"

namespace chunkrl {

static_assert(std::endian::native == std::endian::little,
              "checkpoint format is little-endian float64");

constexpr const char* kCheckpointVersion = "chunkrl-ckpt-v1";

struct Checkpoint {
  std::map<std::string, ApproximatorParams> networks;
  nlohmann::json meta;
};

inline void save_checkpoint(const std::string& dir, const Checkpoint& ckpt) {
  namespace fs = std::filesystem;
  fs::create_directories(dir);
  nlohmann::json nets = nlohmann::json::array();
  for (const auto& [name, params] : ckpt.networks) {
    params.validate();
    nlohmann::json layers = nlohmann::json::array();
    for (const auto& s : params.shapes)
      layers.push_back({{"name", s.name}, {"rows", s.rows}, {"cols", s.cols}});
    const std::string file = name + ".bin";
    nets.push_back({{"name", name},
                    {"file", file},
                    {"param_count", params.size()},
                    {"adam_step", params.opt.step},
                    {"layers", layers}});
    std::ofstream bf(fs::path(dir) / file, std::ios::binary);
    require(bf.good(), Errc::io, "save_checkpoint: cannot open '" + file + "'");
    auto write_vec = [&](const Vec& v) {
      bf.write(reinterpret_cast<const char*>(v.data()), sizeof(double) * v.size());
    };
    write_vec(params.values);
    write_vec(params.opt.m);
    write_vec(params.opt.v);
    require(bf.good(), Errc::io, "save_checkpoint: write failed for '" + file + "'");
  }
  nlohmann::json manifest{
      {"format_version", kCheckpointVersion}, {"networks", nets}, {"meta", ckpt.meta}};
  std::ofstream mf(fs::path(dir) / "manifest.json");
  require(mf.good(), Errc::io, "save_checkpoint: cannot write manifest.json");
  mf << manifest.dump(2) << "\n";
  require(mf.good(), Errc::io, "save_checkpoint: manifest write failed");
}

inline Checkpoint load_checkpoint(const std::string& dir) {
  namespace fs = std::filesystem;
  std::ifstream mf(fs::path(dir) / "manifest.json");
  require(mf.good(), Errc::io, "load_checkpoint: missing manifest.json in '" + dir + "'");
  nlohmann::json manifest = nlohmann::json::parse(mf);
  require(manifest.value("format_version", "") == kCheckpointVersion, Errc::io,
          "load_checkpoint: unsupported format version '" +
              manifest.value("format_version", std::string("<missing>")) + "'");
  Checkpoint ckpt;
  ckpt.meta = manifest.value("meta", nlohmann::json::object());
  for (const auto& net : manifest.at("networks")) {
    std::vector<LayerShape> shapes;
    for (const auto& l : net.at("layers"))
      shapes.push_back({l.at("name").get<std::string>(), l.at("rows").get<int>(),
                        l.at("cols").get<int>()});
    ApproximatorParams params = make_params(shapes);
    const int count = net.at("param_count").get<int>();
    require(count == params.size(), Errc::dimension,
            "load_checkpoint: manifest param_count disagrees with layer shapes");
    params.opt.step = net.at("adam_step").get<long>();
    std::ifstream bf(fs::path(dir) / net.at("file").get<std::string>(), std::ios::binary);
    require(bf.good(), Errc::io, "load_checkpoint: missing blob for network");
    auto read_vec = [&](Vec& v) {
      bf.read(reinterpret_cast<char*>(v.data()), sizeof(double) * v.size());
      require(bf.gcount() == static_cast<std::streamsize>(sizeof(double) * v.size()), Errc::io,
              "load_checkpoint: truncated parameter blob");
    };
    read_vec(params.values);
    read_vec(params.opt.m);
    read_vec(params.opt.v);
    ckpt.networks.emplace(net.at("name").get<std::string>(), std::move(params));
  }
  return ckpt;
}

}  // namespace chunkrl
