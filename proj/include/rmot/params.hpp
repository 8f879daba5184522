// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <bit>
#include <cmath>
#include <cstdio>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <random>
#include <string>
#include <vector>

#include "rmot/tensor.hpp"

namespace rmot {

/// Shortest decimal text that reads back to the same double.
inline std::string format_double(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

/// Seeded generator; the conversions to real numbers are spelled out here so
/// streams are reproducible across standard library implementations.
class Rng {
public:
    explicit Rng(std::uint64_t seed = 0) : engine_(seed) {}

    double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }
    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
    /// Integer in [lo, hi].
    std::int64_t integer(std::int64_t lo, std::int64_t hi) {
        const auto span = static_cast<std::uint64_t>(hi - lo) + 1;
        return lo + static_cast<std::int64_t>(engine_() % span);
    }
    bool bernoulli(double p) { return uniform() < p; }
    double normal() {
        const double u1 = std::max(uniform(), 1e-300);
        const double u2 = uniform();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
    }
    std::uint64_t next() { return engine_(); }

private:
    std::mt19937_64 engine_;
};

/// Uniform in [-1/sqrt(fan_in), 1/sqrt(fan_in)].
inline void init_uniform_fan_in(Tensor& t, std::size_t fan_in, Rng& rng) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(std::max<std::size_t>(fan_in, 1)));
    for (double& v : t.mutable_data()) v = rng.uniform(-bound, bound);
}

/// Ordered key -> tensor map; the unit of checkpoint I/O.
using TensorMap = std::map<std::string, Tensor>;

class CheckpointError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

namespace detail {

inline constexpr char kCheckpointMagic[8] = {'R', 'M', 'O', 'T', 'C', 'K', 'P', '1'};

template <class T>
void put_le(std::ostream& os, T v) {
    static_assert(std::is_integral_v<T>);
    unsigned char buf[sizeof(T)];
    for (std::size_t i = 0; i < sizeof(T); ++i) buf[i] = static_cast<unsigned char>((static_cast<std::uint64_t>(v) >> (8 * i)) & 0xFF);
    os.write(reinterpret_cast<const char*>(buf), sizeof(T));
}

template <class T>
T get_le(std::istream& is) {
    unsigned char buf[sizeof(T)];
    if (!is.read(reinterpret_cast<char*>(buf), sizeof(T))) throw CheckpointError("checkpoint: truncated file");
    std::uint64_t v = 0;
    for (std::size_t i = 0; i < sizeof(T); ++i) v |= static_cast<std::uint64_t>(buf[i]) << (8 * i);
    return static_cast<T>(v);
}

}  // namespace detail

/// Binary layout: 8-byte magic, u32 entry count, then per entry
/// u32 key length, key bytes, u32 rank, u64 extents, little-endian f64 data.
inline void write_tensor_map(std::ostream& os, const TensorMap& map) {
    os.write(detail::kCheckpointMagic, sizeof(detail::kCheckpointMagic));
    detail::put_le<std::uint32_t>(os, static_cast<std::uint32_t>(map.size()));
    for (const auto& [key, t] : map) {
        detail::put_le<std::uint32_t>(os, static_cast<std::uint32_t>(key.size()));
        os.write(key.data(), static_cast<std::streamsize>(key.size()));
        detail::put_le<std::uint32_t>(os, static_cast<std::uint32_t>(t.shape().size()));
        for (std::size_t e : t.shape()) detail::put_le<std::uint64_t>(os, e);
        for (double v : t.data()) detail::put_le<std::uint64_t>(os, std::bit_cast<std::uint64_t>(v));
    }
}

inline TensorMap read_tensor_map(std::istream& is) {
    char magic[sizeof(detail::kCheckpointMagic)];
    if (!is.read(magic, sizeof(magic)) || std::memcmp(magic, detail::kCheckpointMagic, sizeof(magic)) != 0) {
        throw CheckpointError("checkpoint: bad magic");
    }
    TensorMap map;
    const auto count = detail::get_le<std::uint32_t>(is);
    for (std::uint32_t i = 0; i < count; ++i) {
        const auto klen = detail::get_le<std::uint32_t>(is);
        std::string key(klen, '\0');
        if (!is.read(key.data(), klen)) throw CheckpointError("checkpoint: truncated key");
        const auto rank = detail::get_le<std::uint32_t>(is);
        Shape shape(rank);
        for (auto& e : shape) e = detail::get_le<std::uint64_t>(is);
        std::vector<double> values(shape_numel(shape));
        for (double& v : values) v = std::bit_cast<double>(detail::get_le<std::uint64_t>(is));
        map.emplace(std::move(key), Tensor(std::move(shape), std::move(values)));
    }
    return map;
}

inline void save_tensor_map(const std::string& path, const TensorMap& map) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw CheckpointError("checkpoint: cannot open " + path + " for writing");
    write_tensor_map(os, map);
    if (!os) throw CheckpointError("checkpoint: write failed for " + path);
}

inline TensorMap load_tensor_map(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw CheckpointError("checkpoint: cannot open " + path);
    return read_tensor_map(is);
}

/// Named parameter registry. Trainable entries are the optimizer's domain;
/// frozen entries (the stand-in text encoder table) ride along in checkpoints.
class ParamStore {
public:
    struct Entry {
        std::string name;
        Tensor tensor;
        bool trainable;
    };

    Tensor add(const std::string& name, Shape shape, bool trainable = true) {
        for (const auto& e : entries_) {
            if (e.name == name) throw ContractError("duplicate parameter name " + name);
        }
        Tensor t(std::move(shape), 0.0, trainable);
        entries_.push_back({name, t, trainable});
        return t;
    }

    const std::vector<Entry>& entries() const { return entries_; }
    std::vector<Tensor> trainable() const {
        std::vector<Tensor> out;
        for (const auto& e : entries_)
            if (e.trainable) out.push_back(e.tensor);
        return out;
    }
    std::size_t count() const {
        std::size_t n = 0;
        for (const auto& e : entries_) n += e.tensor.numel();
        return n;
    }

    Tensor get(const std::string& name) const {
        for (const auto& e : entries_)
            if (e.name == name) return e.tensor;
        throw ContractError("unknown parameter " + name);
    }

    void zero_grad() {
        for (auto& e : entries_) e.tensor.zero_grad();
    }

    TensorMap to_map(const std::string& prefix = "param.") const {
        TensorMap map;
        for (const auto& e : entries_) map.emplace(prefix + e.name, e.tensor.detach());
        return map;
    }

    /// Copies values in; every registered name must be present with the same shape.
    void load_map(const TensorMap& map, const std::string& prefix = "param.") {
        for (auto& e : entries_) {
            auto it = map.find(prefix + e.name);
            if (it == map.end()) throw CheckpointError("checkpoint: missing parameter " + e.name);
            if (it->second.shape() != e.tensor.shape()) {
                throw CheckpointError("checkpoint: dim mismatch for " + e.name + ": " + shape_str(it->second.shape()) +
                                      " vs " + shape_str(e.tensor.shape()));
            }
            auto dst = e.tensor.mutable_data();
            std::copy(it->second.data().begin(), it->second.data().end(), dst.begin());
        }
    }

private:
    std::vector<Entry> entries_;
};

}  // namespace rmot
