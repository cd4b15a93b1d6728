#pragma once

// Checkpoint archive: a text header, a JSON manifest of hyperparameters, then
// named parameter arrays, each with a shape header and a little-endian
// float32 payload.
//
//   autorig-checkpoint 1
//   manifest <byte count>
//   <json>
//   tensor <name> <rows> <cols>
//   <rows*cols*4 bytes>
//   ...
//   end

#include "autorig/nn/layers.hpp"

#include <json.hpp>

#include <bit>
#include <cstring>
#include <fstream>
#include <map>

namespace autorig::nn {

static_assert(std::endian::native == std::endian::little, "checkpoint payloads assume a little-endian host");

inline constexpr int kCheckpointVersion = 1;

struct Checkpoint {
  nlohmann::json manifest;
  std::map<std::string, MatrixXf> tensors;
};

template <typename T>
void save_checkpoint(const std::string& path, const ParamStore<T>& store, const nlohmann::json& manifest) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write checkpoint " + path);
  const std::string text = manifest.dump(2);
  out << "autorig-checkpoint " << kCheckpointVersion << "\n";
  out << "manifest " << text.size() << "\n" << text << "\n";
  for (size_t i = 0; i < store.size(); ++i) {
    const auto& p = store[i];
    out << "tensor " << p.name << ' ' << p.value.rows() << ' ' << p.value.cols() << "\n";
    MatrixXf v = p.value.template cast<float>();
    out.write(reinterpret_cast<const char*>(v.data()), static_cast<std::streamsize>(v.size() * sizeof(float)));
    out << "\n";
  }
  out << "end\n";
  if (!out) throw Error("failed writing checkpoint " + path);
}

inline Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open checkpoint " + path);
  int line = 0;
  auto next_line = [&](const char* what) {
    std::string s;
    ++line;
    if (!std::getline(in, s)) throw ParseError(std::string("truncated checkpoint: expected ") + what, line);
    return s;
  };
  {
    std::istringstream hs(next_line("header"));
    std::string magic;
    int version = 0;
    if (!(hs >> magic >> version) || magic != "autorig-checkpoint") throw ParseError("not a checkpoint file", line);
    if (version != kCheckpointVersion)
      throw ParseError("checkpoint version " + std::to_string(version) + " is not supported", line);
  }
  Checkpoint ck;
  {
    std::istringstream ms(next_line("manifest header"));
    std::string tag;
    size_t bytes = 0;
    if (!(ms >> tag >> bytes) || tag != "manifest") throw ParseError("missing manifest", line);
    std::string text(bytes, '\0');
    if (!in.read(text.data(), static_cast<std::streamsize>(bytes))) throw ParseError("truncated manifest", line);
    line += static_cast<int>(std::count(text.begin(), text.end(), '\n'));
    try {
      ck.manifest = nlohmann::json::parse(text);
    } catch (const std::exception& e) {
      throw ParseError(std::string("malformed manifest: ") + e.what(), line);
    }
    next_line("manifest terminator");
  }
  while (true) {
    std::string s = next_line("tensor or end");
    if (s == "end") break;
    std::istringstream ts(s);
    std::string tag, name;
    long rows = -1, cols = -1;
    if (!(ts >> tag >> name >> rows >> cols) || tag != "tensor" || rows < 0 || cols < 0)
      throw ParseError("malformed tensor header '" + s + "'", line);
    MatrixXf m(rows, cols);
    if (!in.read(reinterpret_cast<char*>(m.data()), static_cast<std::streamsize>(m.size() * sizeof(float))))
      throw ParseError("truncated payload of tensor " + name, line);
    std::string rest = next_line("tensor terminator");
    if (!rest.empty()) throw ParseError("corrupt payload of tensor " + name, line);
    if (!ck.tensors.emplace(name, std::move(m)).second) throw ParseError("duplicate tensor " + name, line);
  }
  return ck;
}

/// Copies checkpoint tensors into a store; every store parameter must be
/// present with a matching shape.
template <typename T>
void assign_checkpoint(ParamStore<T>& store, const Checkpoint& ck) {
  for (size_t i = 0; i < store.size(); ++i) {
    auto& p = store[i];
    auto it = ck.tensors.find(p.name);
    if (it == ck.tensors.end()) throw Error("checkpoint is missing parameter " + p.name);
    if (it->second.rows() != p.value.rows() || it->second.cols() != p.value.cols())
      throw Error("checkpoint parameter " + p.name + " has shape " + std::to_string(it->second.rows()) + "x" +
                  std::to_string(it->second.cols()) + ", expected " + std::to_string(p.value.rows()) + "x" +
                  std::to_string(p.value.cols()));
    p.value = it->second.template cast<T>();
  }
  if (ck.tensors.size() != store.size()) throw Error("checkpoint has parameters the model does not define");
}

}  // namespace autorig::nn
