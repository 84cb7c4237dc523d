#pragma once

// Ordered parameter collections, the Adam optimizer and the flat binary
// checkpoint format:
//
//   "BRLB1"
//   repeated until EOF:
//     u32 name_length, name bytes,
//     u32 rank, rank x u32 dims,
//     prod(dims) x f64 values
//
// Every integer and float is little-endian.

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <iterator>
#include <map>
#include <memory>
#include <string>
#include <string_view>
#include <vector>

#include "bevrestore/errors.hpp"
#include "bevrestore/tensor.hpp"

namespace bevrestore {

// Owns Parameters at stable addresses. Names are "<group>.<rest>" and the
// group prefix decides freezing and cost attribution.
class ParameterSet {
 public:
  ParameterSet() = default;
  ParameterSet(const ParameterSet& other) { *this = other; }
  ParameterSet& operator=(const ParameterSet& other) {
    if (this == &other) return *this;
    params_.clear();
    index_.clear();
    for (const auto& p : other.params_) add(p->name, p->value, p->trainable);
    return *this;
  }
  ParameterSet(ParameterSet&&) noexcept = default;
  ParameterSet& operator=(ParameterSet&&) noexcept = default;

  Parameter& add(const std::string& name, Tensor value, bool trainable = true) {
    if (index_.count(name)) throw ConfigError("duplicate parameter name '" + name + "'");
    params_.push_back(std::make_unique<Parameter>(name, std::move(value), trainable));
    index_[name] = params_.size() - 1;
    return *params_.back();
  }

  bool contains(const std::string& name) const { return index_.count(name) > 0; }

  Parameter& at(const std::string& name) {
    auto it = index_.find(name);
    if (it == index_.end()) throw LoadError("unknown parameter '" + name + "'");
    return *params_[it->second];
  }
  const Parameter& at(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw LoadError("unknown parameter '" + name + "'");
    return *params_[it->second];
  }

  std::size_t size() const { return params_.size(); }
  Parameter& operator[](std::size_t i) { return *params_[i]; }
  const Parameter& operator[](std::size_t i) const { return *params_[i]; }

  static std::string group_of(const std::string& name) {
    const auto dot = name.find('.');
    return dot == std::string::npos ? name : name.substr(0, dot);
  }

  void set_group_trainable(const std::string& group, bool trainable) {
    for (auto& p : params_)
      if (group_of(p->name) == group) p->trainable = trainable;
  }

  std::size_t group_numel(const std::string& group) const {
    std::size_t n = 0;
    for (const auto& p : params_)
      if (group_of(p->name) == group) n += p->numel();
    return n;
  }

  std::size_t numel() const {
    std::size_t n = 0;
    for (const auto& p : params_) n += p->numel();
    return n;
  }

  void zero_grad() {
    for (auto& p : params_) p->zero_grad();
  }

  void remove_group(const std::string& group) {
    std::vector<std::unique_ptr<Parameter>> kept;
    for (auto& p : params_)
      if (group_of(p->name) != group) kept.push_back(std::move(p));
    params_ = std::move(kept);
    index_.clear();
    for (std::size_t i = 0; i < params_.size(); ++i) index_[params_[i]->name] = i;
  }

  // FNV-1a over names, shapes and raw value bytes of one group (or all
  // groups when `group` is empty).
  std::uint64_t hash(const std::string& group = "") const {
    std::uint64_t h = 1469598103934665603ULL;
    auto mix = [&h](const void* data, std::size_t n) {
      const auto* b = static_cast<const unsigned char*>(data);
      for (std::size_t i = 0; i < n; ++i) {
        h ^= b[i];
        h *= 1099511628211ULL;
      }
    };
    for (const auto& p : params_) {
      if (!group.empty() && group_of(p->name) != group) continue;
      mix(p->name.data(), p->name.size());
      for (int d : p->value.shape()) mix(&d, sizeof d);
      mix(p->value.data(), p->value.bytes());
    }
    return h;
  }

 private:
  std::vector<std::unique_ptr<Parameter>> params_;
  std::map<std::string, std::size_t> index_;
};

// Adam with bias correction. Frozen parameters are skipped entirely.
class Adam {
 public:
  explicit Adam(double lr, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
      : lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {}

  void step(ParameterSet& params) {
    ++t_;
    const double c1 = 1.0 - std::pow(beta1_, t_);
    const double c2 = 1.0 - std::pow(beta2_, t_);
    for (std::size_t i = 0; i < params.size(); ++i) {
      Parameter& p = params[i];
      if (!p.trainable) continue;
      auto [it, fresh] = state_.try_emplace(p.name);
      if (fresh) {
        it->second.m.assign(p.numel(), 0.0);
        it->second.v.assign(p.numel(), 0.0);
      }
      auto& m = it->second.m;
      auto& v = it->second.v;
      for (std::size_t j = 0; j < p.numel(); ++j) {
        const double g = p.grad[j];
        m[j] = beta1_ * m[j] + (1.0 - beta1_) * g;
        v[j] = beta2_ * v[j] + (1.0 - beta2_) * g * g;
        const double mhat = m[j] / c1;
        const double vhat = v[j] / c2;
        p.value[j] -= lr_ * mhat / (std::sqrt(vhat) + eps_);
      }
    }
  }

  double lr() const { return lr_; }
  void set_lr(double lr) { lr_ = lr; }
  int steps() const { return t_; }

 private:
  struct Moments {
    std::vector<double> m, v;
  };
  double lr_, beta1_, beta2_, eps_;
  int t_ = 0;
  std::map<std::string, Moments> state_;
};

// ---------------------------------------------------------------------------
// Checkpoint I/O.

inline constexpr std::string_view kCheckpointMagic = "BRLB1";

namespace detail {

inline void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFFu));
}

inline void put_f64(std::string& out, double d) {
  const auto bits = std::bit_cast<std::uint64_t>(d);
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((bits >> (8 * i)) & 0xFFu));
}

class Reader {
 public:
  explicit Reader(std::string_view buf) : buf_(buf) {}
  bool done() const { return pos_ == buf_.size(); }
  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(static_cast<unsigned char>(buf_[pos_ + i])) << (8 * i);
    pos_ += 4;
    return v;
  }
  double f64() {
    need(8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(buf_[pos_ + i])) << (8 * i);
    pos_ += 8;
    return std::bit_cast<double>(v);
  }
  std::string bytes(std::size_t n) {
    need(n);
    std::string s(buf_.substr(pos_, n));
    pos_ += n;
    return s;
  }

 private:
  void need(std::size_t n) const {
    if (buf_.size() - pos_ < n) throw LoadError("truncated checkpoint");
  }
  std::string_view buf_;
  std::size_t pos_ = 0;
};

}  // namespace detail

inline std::string encode_checkpoint(const ParameterSet& params) {
  std::string out(kCheckpointMagic);
  for (std::size_t i = 0; i < params.size(); ++i) {
    const Parameter& p = params[i];
    detail::put_u32(out, static_cast<std::uint32_t>(p.name.size()));
    out += p.name;
    detail::put_u32(out, static_cast<std::uint32_t>(p.value.rank()));
    for (int d : p.value.shape()) detail::put_u32(out, static_cast<std::uint32_t>(d));
    for (double v : p.value.vec()) detail::put_f64(out, v);
  }
  return out;
}

// Returns parameters in file order; all trainable.
inline ParameterSet decode_checkpoint(std::string_view buf) {
  if (buf.substr(0, kCheckpointMagic.size()) != kCheckpointMagic) {
    throw LoadError("bad checkpoint magic");
  }
  detail::Reader r(buf.substr(kCheckpointMagic.size()));
  ParameterSet out;
  while (!r.done()) {
    const std::uint32_t name_len = r.u32();
    std::string name = r.bytes(name_len);
    const std::uint32_t rank = r.u32();
    if (rank > 8) throw LoadError("implausible tensor rank in checkpoint");
    Shape shape(rank);
    for (auto& d : shape) d = static_cast<int>(r.u32());
    Tensor t(shape);
    for (auto& v : t.vec()) v = r.f64();
    out.add(name, std::move(t));
  }
  return out;
}

inline void save_checkpoint(const ParameterSet& params, const std::string& path) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw IoError("cannot open '" + path + "' for writing");
  const std::string buf = encode_checkpoint(params);
  f.write(buf.data(), static_cast<std::streamsize>(buf.size()));
  if (!f) throw IoError("write failed for '" + path + "'");
}

inline ParameterSet load_checkpoint(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open '" + path + "'");
  std::string buf((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  return decode_checkpoint(buf);
}

// Copies values from `src` into same-named, same-shaped parameters of `dst`.
// Every parameter of `dst` in the listed groups must be present in `src`.
inline void assign_groups(ParameterSet& dst, const ParameterSet& src, const std::vector<std::string>& groups) {
  for (std::size_t i = 0; i < dst.size(); ++i) {
    Parameter& p = dst[i];
    const std::string g = ParameterSet::group_of(p.name);
    if (std::find(groups.begin(), groups.end(), g) == groups.end()) continue;
    if (!src.contains(p.name)) throw LoadError("checkpoint lacks parameter '" + p.name + "'");
    const Parameter& q = src.at(p.name);
    if (q.value.shape() != p.value.shape()) {
      throw LoadError("shape mismatch for '" + p.name + "': checkpoint " + shape_str(q.value.shape()) +
                      " vs model " + shape_str(p.value.shape()));
    }
    p.value = q.value;
  }
}

}  // namespace bevrestore
