#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <set>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "eclab/rng.hpp"
#include "eclab/tensor.hpp"

namespace eclab {

struct CheckpointError : std::runtime_error {
  explicit CheckpointError(const std::string& m) : std::runtime_error(m) {}
};

// Named parameter tensors grouped into pathways by name prefix
// ("world_encoder/conv1_w" belongs to pathway "world_encoder"). Frozen
// pathways receive zero optimizer update regardless of computed gradients.
class ParamSet {
 public:
  // Uniform init in [-s, s], s = 1/sqrt(fan_in), drawn from a substream
  // keyed by the tensor name so init is independent of creation order.
  Tensor& add(const std::string& name, const Shape& shape, int fan_in, const Rng& net_rng) {
    if (index_.count(name)) throw ValueError("duplicate parameter " + name);
    Tensor t = Tensor::zeros(shape);
    Rng r = net_rng.substream(name);
    const double s = 1.0 / std::sqrt(static_cast<double>(fan_in));
    for (std::size_t i = 0; i < t.numel(); ++i) t[i] = r.next_symmetric(s);
    t.enable_grad();
    index_[name] = items_.size();
    items_.emplace_back(name, t);
    return items_.back().second;
  }

  Tensor* find(const std::string& name) {
    auto it = index_.find(name);
    return it == index_.end() ? nullptr : &items_[it->second].second;
  }
  const Tensor* find(const std::string& name) const {
    auto it = index_.find(name);
    return it == index_.end() ? nullptr : &items_[it->second].second;
  }

  const std::vector<std::pair<std::string, Tensor>>& items() const { return items_; }

  static std::string pathway_of(const std::string& name) {
    auto p = name.find('/');
    return p == std::string::npos ? name : name.substr(0, p);
  }

  void freeze_pathway(const std::string& pathway) { frozen_.insert(pathway); }
  void unfreeze_pathway(const std::string& pathway) { frozen_.erase(pathway); }
  bool frozen(const std::string& name) const { return frozen_.count(pathway_of(name)) > 0; }
  const std::set<std::string>& frozen_pathways() const { return frozen_; }

  void zero_grads() {
    for (auto& [name, t] : items_) t.zero_grad();
  }

 private:
  std::vector<std::pair<std::string, Tensor>> items_;
  std::unordered_map<std::string, std::size_t> index_;
  std::set<std::string> frozen_;
};

struct RmspropConfig {
  double lr = 1e-3;
  double decay = 0.99;
  double eps = 1e-5;
};

// acc <- rho*acc + (1-rho)*g^2 ; p <- p - lr*g/(sqrt(acc)+eps)
class Rmsprop {
 public:
  Rmsprop(const ParamSet& ps, RmspropConfig cfg) : cfg_(cfg) {
    acc_.reserve(ps.items().size());
    for (const auto& [name, t] : ps.items()) acc_.emplace_back(t.numel(), 0.0);
  }

  void step(ParamSet& ps) {
    const auto& items = ps.items();
    for (std::size_t pi = 0; pi < items.size(); ++pi) {
      const std::string& name = items[pi].first;
      if (ps.frozen(name)) continue;
      Tensor t = items[pi].second;
      std::vector<double>& acc = acc_[pi];
      const double* g = t.grad();
      double* v = t.data();
      for (std::size_t i = 0; i < t.numel(); ++i) {
        acc[i] = cfg_.decay * acc[i] + (1.0 - cfg_.decay) * g[i] * g[i];
        v[i] -= cfg_.lr * g[i] / (std::sqrt(acc[i]) + cfg_.eps);
      }
    }
  }

  const RmspropConfig& config() const { return cfg_; }
  std::vector<std::vector<double>>& accumulators() { return acc_; }

 private:
  RmspropConfig cfg_;
  std::vector<std::vector<double>> acc_;
};

// ---------------------------------------------------------------------------
// Checkpoint container: magic "ECLAB", u32 version, u32 count, then per
// tensor: u32 name length, name bytes, u32 ndim, u32 dims..., row-major
// 64-bit little-endian values. Pathway membership is carried by name prefix.
// ---------------------------------------------------------------------------

namespace detail {

inline void put_u32(std::ostream& os, std::uint32_t x) {
  unsigned char b[4] = {static_cast<unsigned char>(x), static_cast<unsigned char>(x >> 8),
                        static_cast<unsigned char>(x >> 16), static_cast<unsigned char>(x >> 24)};
  os.write(reinterpret_cast<const char*>(b), 4);
}
inline std::uint32_t get_u32(std::istream& is) {
  unsigned char b[4];
  is.read(reinterpret_cast<char*>(b), 4);
  return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
         (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}
inline void put_u64(std::ostream& os, std::uint64_t x) {
  unsigned char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>(x >> (8 * i));
  os.write(reinterpret_cast<const char*>(b), 8);
}
inline std::uint64_t get_u64(std::istream& is) {
  unsigned char b[8];
  is.read(reinterpret_cast<char*>(b), 8);
  std::uint64_t u = 0;
  for (int i = 0; i < 8; ++i) u |= static_cast<std::uint64_t>(b[i]) << (8 * i);
  return u;
}
inline void put_f64(std::ostream& os, double x) {
  std::uint64_t u;
  std::memcpy(&u, &x, 8);
  unsigned char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>(u >> (8 * i));
  os.write(reinterpret_cast<const char*>(b), 8);
}
inline double get_f64(std::istream& is) {
  unsigned char b[8];
  is.read(reinterpret_cast<char*>(b), 8);
  std::uint64_t u = 0;
  for (int i = 0; i < 8; ++i) u |= static_cast<std::uint64_t>(b[i]) << (8 * i);
  double x;
  std::memcpy(&x, &u, 8);
  return x;
}

}  // namespace detail

inline constexpr char kCheckpointMagic[] = "ECLAB";
inline constexpr std::uint32_t kCheckpointVersion = 1;

inline void write_tensors(std::ostream& os, const std::vector<std::pair<std::string, Tensor>>& tensors) {
  os.write(kCheckpointMagic, 5);
  detail::put_u32(os, kCheckpointVersion);
  detail::put_u32(os, static_cast<std::uint32_t>(tensors.size()));
  for (const auto& [name, t] : tensors) {
    detail::put_u32(os, static_cast<std::uint32_t>(name.size()));
    os.write(name.data(), static_cast<std::streamsize>(name.size()));
    detail::put_u32(os, static_cast<std::uint32_t>(t.shape().size()));
    for (int d : t.shape()) detail::put_u32(os, static_cast<std::uint32_t>(d));
    for (std::size_t i = 0; i < t.numel(); ++i) detail::put_f64(os, t[i]);
  }
}

inline std::vector<std::pair<std::string, Tensor>> read_tensors(std::istream& is, const std::string& what) {
  char magic[5];
  is.read(magic, 5);
  if (!is || std::memcmp(magic, kCheckpointMagic, 5) != 0)
    throw CheckpointError(what + ": bad magic (not an ECLAB checkpoint)");
  const std::uint32_t version = detail::get_u32(is);
  if (version != kCheckpointVersion)
    throw CheckpointError(what + ": unsupported version " + std::to_string(version));
  const std::uint32_t count = detail::get_u32(is);
  std::vector<std::pair<std::string, Tensor>> out;
  out.reserve(count);
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::uint32_t len = detail::get_u32(is);
    std::string name(len, '\0');
    is.read(name.data(), len);
    const std::uint32_t ndim = detail::get_u32(is);
    Shape shape(ndim);
    for (auto& d : shape) d = static_cast<int>(detail::get_u32(is));
    Tensor t = Tensor::zeros(shape);
    for (std::size_t j = 0; j < t.numel(); ++j) t[j] = detail::get_f64(is);
    if (!is) throw CheckpointError(what + ": truncated while reading " + name);
    out.emplace_back(std::move(name), std::move(t));
  }
  return out;
}

inline void save_checkpoint(const std::string& path, const std::vector<std::pair<std::string, Tensor>>& tensors) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw CheckpointError("cannot write " + path);
  write_tensors(os, tensors);
  if (!os) throw CheckpointError("write failed for " + path);
}

inline std::vector<std::pair<std::string, Tensor>> load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw CheckpointError("cannot open " + path);
  return read_tensors(is, path);
}

// Copies values for every checkpoint tensor whose name exists in `ps`.
// Shapes must agree exactly; mismatches name the offending tensor. Returns
// the number of tensors applied.
inline int apply_checkpoint(ParamSet& ps, const std::vector<std::pair<std::string, Tensor>>& loaded) {
  int applied = 0;
  for (const auto& [name, src] : loaded) {
    Tensor* dst = ps.find(name);
    if (!dst) continue;
    if (dst->shape() != src.shape())
      throw CheckpointError("checkpoint tensor " + name + " has shape " + shape_str(src.shape()) +
                            ", expected " + shape_str(dst->shape()));
    for (std::size_t i = 0; i < src.numel(); ++i) (*dst)[i] = src[i];
    ++applied;
  }
  return applied;
}

}  // namespace eclab
