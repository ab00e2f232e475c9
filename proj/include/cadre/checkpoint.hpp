// Checkpoint format: `<base>.json` manifest plus `<base>.bin` blob.
//
// The manifest records format version, global step, caller metadata and a
// table of (name, shape, byte offset) entries; the blob is the parameters'
// raw float64 little-endian bytes, concatenated in registry order. Raw
// bytes round-trip bit-exactly.
#pragma once

#include <bit>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "cadre/common.hpp"
#include "cadre/nn.hpp"

namespace cadre::nn {

static_assert(std::endian::native == std::endian::little,
              "checkpoint blobs assume a little-endian host");

constexpr int kCheckpointVersion = 1;

struct CheckpointInfo {
  int format_version = kCheckpointVersion;
  long global_step = 0;
  nlohmann::json meta;
};

inline void save_checkpoint(const ParamRegistry& params,
                            const std::string& base, long global_step,
                            const nlohmann::json& meta = nlohmann::json::object()) {
  namespace fs = std::filesystem;
  const fs::path manifest_path = base + ".json";
  const fs::path blob_path = base + ".bin";
  if (manifest_path.has_parent_path())
    fs::create_directories(manifest_path.parent_path());

  std::vector<double> flat = params.flatten_values();
  {
    std::ofstream blob(blob_path, std::ios::binary | std::ios::trunc);
    if (!blob) throw IoError("cannot write " + blob_path.string());
    blob.write(reinterpret_cast<const char*>(flat.data()),
               static_cast<std::streamsize>(flat.size() * sizeof(double)));
    if (!blob) throw IoError("short write to " + blob_path.string());
  }

  nlohmann::json man;
  man["format_version"] = kCheckpointVersion;
  man["global_step"] = global_step;
  man["dtype"] = "f64le";
  man["blob"] = blob_path.filename().string();
  man["blob_hash"] =
      hash_hex(fnv1a64(flat.data(), flat.size() * sizeof(double)));
  man["meta"] = meta;
  nlohmann::json table = nlohmann::json::array();
  std::size_t offset = 0;
  for (const auto& [name, t] : params.items()) {
    nlohmann::json row;
    row["name"] = name;
    row["shape"] = t.shape();
    row["offset"] = offset;
    table.push_back(row);
    offset += t.size() * sizeof(double);
  }
  man["params"] = table;
  man["total_bytes"] = offset;

  std::ofstream out(manifest_path, std::ios::trunc);
  if (!out) throw IoError("cannot write " + manifest_path.string());
  out << man.dump(2) << "\n";
}

// Loads a checkpoint into an already-constructed registry. Any mismatch in
// version, parameter names, order or shapes is a LoadError: checkpoints
// only load into the architecture that wrote them.
inline CheckpointInfo load_checkpoint(ParamRegistry& params,
                                      const std::string& base) {
  namespace fs = std::filesystem;
  const fs::path manifest_path = base + ".json";
  std::ifstream in(manifest_path);
  if (!in) throw IoError("cannot read " + manifest_path.string());
  nlohmann::json man;
  try {
    in >> man;
  } catch (const nlohmann::json::exception& e) {
    throw LoadError("bad checkpoint manifest " + manifest_path.string() +
                    ": " + e.what());
  }

  const int version = man.value("format_version", -1);
  if (version != kCheckpointVersion)
    throw LoadError("checkpoint " + base + " has format_version " +
                    std::to_string(version) + ", expected " +
                    std::to_string(kCheckpointVersion));
  if (man.value("dtype", "") != std::string("f64le"))
    throw LoadError("checkpoint " + base + " has unsupported dtype");

  const auto& table = man.at("params");
  if (table.size() != params.count())
    throw LoadError("checkpoint " + base + " holds " +
                    std::to_string(table.size()) + " parameters, model has " +
                    std::to_string(params.count()));
  std::size_t offset = 0;
  std::size_t k = 0;
  for (const auto& [name, t] : params.items()) {
    const auto& row = table.at(k);
    if (row.at("name").get<std::string>() != name)
      throw LoadError("checkpoint " + base + " parameter " +
                      std::to_string(k) + " is " +
                      row.at("name").get<std::string>() + ", model expects " +
                      name);
    const auto shape = row.at("shape").get<std::vector<std::size_t>>();
    if (shape != t.shape())
      throw LoadError("checkpoint " + base + " parameter " + name +
                      " has shape " + shape_str(shape) + ", model expects " +
                      shape_str(t.shape()));
    if (row.at("offset").get<std::size_t>() != offset)
      throw LoadError("checkpoint " + base + " parameter " + name +
                      " offset mismatch");
    offset += t.size() * sizeof(double);
    ++k;
  }

  const fs::path blob_path =
      manifest_path.parent_path() / man.at("blob").get<std::string>();
  std::ifstream blob(blob_path, std::ios::binary);
  if (!blob) throw IoError("cannot read " + blob_path.string());
  std::vector<double> flat(params.total_size());
  blob.read(reinterpret_cast<char*>(flat.data()),
            static_cast<std::streamsize>(flat.size() * sizeof(double)));
  if (static_cast<std::size_t>(blob.gcount()) != flat.size() * sizeof(double))
    throw LoadError("checkpoint blob " + blob_path.string() +
                    " is truncated");
  params.load_values(flat);

  CheckpointInfo info;
  info.format_version = version;
  info.global_step = man.value("global_step", 0L);
  info.meta = man.value("meta", nlohmann::json::object());
  return info;
}

inline nlohmann::json read_checkpoint_meta(const std::string& base) {
  std::ifstream in(base + ".json");
  if (!in) throw IoError("cannot read " + base + ".json");
  nlohmann::json man;
  in >> man;
  return man.value("meta", nlohmann::json::object());
}

// Hash of the blob bytes; two checkpoints with equal hashes hold
// bit-identical parameters.
inline std::string checkpoint_file_hash(const std::string& base) {
  std::ifstream blob(base + ".bin", std::ios::binary);
  if (!blob) throw IoError("cannot read " + base + ".bin");
  std::vector<char> bytes((std::istreambuf_iterator<char>(blob)),
                          std::istreambuf_iterator<char>());
  return hash_hex(fnv1a64(bytes.data(), bytes.size()));
}

}  // namespace cadre::nn
