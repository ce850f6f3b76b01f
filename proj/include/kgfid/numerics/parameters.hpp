#pragma once

#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "json.hpp"

#include "kgfid/error.hpp"
#include "kgfid/numerics/rng.hpp"
#include "kgfid/numerics/tensor.hpp"

namespace kgfid {

static_assert(std::endian::native == std::endian::little,
              "container files are written as native little-endian buffers");

/// Named model parameters, iterated in lexicographic name order.
///
/// Initialization draws every tensor from its own counter-based stream keyed
/// by (seed, name), so the result does not depend on registration order and
/// two sets built from the same seed and architecture are bitwise equal.
class ParameterSet {
 public:
  explicit ParameterSet(std::uint64_t seed = 0) : seed_(seed) {}

  std::uint64_t seed() const { return seed_; }

  /// Weight matrix with entries ~ Uniform(-1/sqrt(fan_in), +1/sqrt(fan_in)).
  Tensor uniform(const std::string& name, Shape shape, std::size_t fan_in) {
    CounterRng rng(seed_, name);
    const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
    std::vector<double> v(shape_size(shape));
    for (auto& x : v) x = rng.uniform(-bound, bound);
    return insert(name, Tensor::from(std::move(shape), std::move(v), true));
  }

  Tensor zeros(const std::string& name, Shape shape) {
    return insert(name, Tensor::zeros(std::move(shape), true));
  }

  Tensor ones(const std::string& name, Shape shape) {
    return insert(name, Tensor::full(std::move(shape), 1.0, true));
  }

  Tensor identity(const std::string& name, std::size_t n) {
    return insert(name, Tensor::eye(n, true));
  }

  Tensor insert(const std::string& name, Tensor t) {
    if (params_.count(name)) throw ValidationError("duplicate parameter name: " + name);
    t.set_requires_grad(true);
    params_.emplace(name, t);
    return t;
  }

  bool contains(const std::string& name) const { return params_.count(name) != 0; }

  const Tensor& get(const std::string& name) const {
    auto it = params_.find(name);
    if (it == params_.end()) throw ValidationError("unknown parameter: " + name);
    return it->second;
  }

  const std::map<std::string, Tensor>& items() const { return params_; }
  std::size_t size() const { return params_.size(); }

  std::size_t scalar_count() const {
    std::size_t n = 0;
    for (const auto& [_, t] : params_) n += t.size();
    return n;
  }

  void zero_grad() {
    for (auto& [_, t] : params_) t.zero_grad();
  }

  /// Deep copy of the values (for best-checkpoint snapshots).
  ParameterSet snapshot() const {
    ParameterSet s(seed_);
    for (const auto& [name, t] : params_) s.params_.emplace(name, t.clone(true));
    return s;
  }

  /// Copies values from `other` into the existing tensors (same names/shapes).
  void assign(const ParameterSet& other) {
    if (other.params_.size() != params_.size()) {
      throw ValidationError("parameter sets differ in size: " + std::to_string(params_.size()) +
                            " vs " + std::to_string(other.params_.size()));
    }
    for (auto& [name, t] : params_) {
      const Tensor& src = other.get(name);
      if (src.shape() != t.shape()) {
        throw ValidationError("parameter " + name + " has shape " + shape_str(src.shape()) +
                              ", expected " + shape_str(t.shape()));
      }
      auto dst = t.mutable_data();
      std::copy(src.data().begin(), src.data().end(), dst.begin());
    }
  }

  bool bitwise_equal(const ParameterSet& other) const {
    if (params_.size() != other.params_.size()) return false;
    for (const auto& [name, t] : params_) {
      if (!other.contains(name) || !t.bitwise_equal(other.get(name))) return false;
    }
    return true;
  }

  /// Container layout: u64 little-endian header length, a JSON header
  /// {"seed", "tensors": {name: {"shape", "dtype": "f64", "offset"}}} where
  /// offsets are bytes into the payload, then the raw little-endian buffers
  /// in name order.
  void save(const std::filesystem::path& path) const {
    nlohmann::json header;
    header["format"] = "kgfid-parameters";
    header["seed"] = seed_;
    nlohmann::json tensors = nlohmann::json::object();
    std::uint64_t offset = 0;
    for (const auto& [name, t] : params_) {
      tensors[name] = {{"shape", t.shape()}, {"dtype", "f64"}, {"offset", offset}};
      offset += t.size() * sizeof(double);
    }
    header["tensors"] = tensors;
    header["payload_bytes"] = offset;
    const std::string h = header.dump();
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot write " + path.string());
    const std::uint64_t len = h.size();
    out.write(reinterpret_cast<const char*>(&len), sizeof(len));
    out.write(h.data(), static_cast<std::streamsize>(h.size()));
    for (const auto& [_, t] : params_) {
      out.write(reinterpret_cast<const char*>(t.data().data()),
                static_cast<std::streamsize>(t.size() * sizeof(double)));
    }
    if (!out) throw IoError("write failed for " + path.string());
  }

  static ParameterSet load(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open " + path.string());
    std::uint64_t len = 0;
    in.read(reinterpret_cast<char*>(&len), sizeof(len));
    if (!in || len > (1ULL << 32)) throw IoError("truncated or corrupt container: " + path.string());
    std::string h(len, '\0');
    in.read(h.data(), static_cast<std::streamsize>(len));
    if (!in) throw IoError("truncated header in " + path.string());
    nlohmann::json header;
    try {
      header = nlohmann::json::parse(h);
    } catch (const nlohmann::json::exception& e) {
      throw IoError("bad container header in " + path.string() + ": " + e.what());
    }
    const std::uint64_t payload = header.at("payload_bytes").get<std::uint64_t>();
    std::vector<char> bytes(payload);
    in.read(bytes.data(), static_cast<std::streamsize>(payload));
    if (!in) throw IoError("truncated payload in " + path.string());
    ParameterSet ps(header.at("seed").get<std::uint64_t>());
    for (const auto& [name, meta] : header.at("tensors").items()) {
      if (meta.at("dtype") != "f64") throw IoError("unsupported dtype for " + name);
      Shape shape = meta.at("shape").get<Shape>();
      const auto off = meta.at("offset").get<std::uint64_t>();
      const std::size_t n = shape_size(shape);
      if (off + n * sizeof(double) > payload) throw IoError("tensor " + name + " exceeds payload");
      std::vector<double> v(n);
      std::memcpy(v.data(), bytes.data() + off, n * sizeof(double));
      ps.insert(name, Tensor::from(std::move(shape), std::move(v), true));
    }
    return ps;
  }

 private:
  std::uint64_t seed_;
  std::map<std::string, Tensor> params_;
};

}  // namespace kgfid
