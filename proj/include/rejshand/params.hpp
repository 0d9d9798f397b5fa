#pragma once

#include <bit>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "rejshand/errors.hpp"
#include "rejshand/tensor.hpp"

namespace rejshand {

/// Seeded generator with portable uniform/normal draws (the std
/// distributions are implementation-defined, which breaks bit-exact runs
/// across standard libraries).
class Rng {
   public:
    explicit Rng(std::uint64_t seed) : engine_(seed) {}

    std::uint64_t next_u64() { return engine_(); }

    // [0, 1) with 53 random bits.
    double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }
    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // Box-Muller; one draw per call, the second value is discarded.
    double normal() {
        double u1 = uniform();
        while (u1 <= 0.0) u1 = uniform();
        const double u2 = uniform();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
    }

    std::size_t below(std::size_t n) { return static_cast<std::size_t>(engine_() % n); }

   private:
    std::mt19937_64 engine_;
};

inline std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t salt) {
    // splitmix64 finalizer
    std::uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (salt + 1);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

inline std::uint64_t hash_string(std::string_view s) {
    std::uint64_t h = 0xcbf29ce484222325ULL;  // FNV-1a
    for (unsigned char ch : s) {
        h ^= ch;
        h *= 0x100000001b3ULL;
    }
    return h;
}

/// Named learnable tensors in registration order.
class ParamStore {
   public:
    Tensor& add(const std::string& path, Tensor t) {
        if (index_.count(path)) throw ContractError("duplicate parameter path " + path);
        t.set_requires_grad(true);
        index_.emplace(path, entries_.size());
        entries_.emplace_back(path, std::move(t));
        return entries_.back().second;
    }

    const Tensor& get(const std::string& path) const {
        auto it = index_.find(path);
        if (it == index_.end()) throw ContractError("unknown parameter path " + path);
        return entries_[it->second].second;
    }
    Tensor& get(const std::string& path) {
        return const_cast<Tensor&>(static_cast<const ParamStore&>(*this).get(path));
    }
    bool contains(const std::string& path) const { return index_.count(path) != 0; }

    auto begin() { return entries_.begin(); }
    auto end() { return entries_.end(); }
    auto begin() const { return entries_.begin(); }
    auto end() const { return entries_.end(); }
    std::size_t size() const { return entries_.size(); }

    std::size_t count_values() const {
        std::size_t n = 0;
        for (const auto& [_, t] : entries_) n += t.numel();
        return n;
    }

    void zero_grad() {
        for (auto& [_, t] : entries_) t.zero_grad();
    }

   private:
    std::vector<std::pair<std::string, Tensor>> entries_;
    std::map<std::string, std::size_t> index_;
};

/// Uniform in +-1/sqrt(fan_in).
inline Tensor init_uniform(Shape shape, std::size_t fan_in, Rng& rng) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
    std::vector<double> data(shape_numel(shape));
    for (auto& v : data) v = rng.uniform(-bound, bound);
    return Tensor::from(std::move(shape), std::move(data));
}

// ---------------------------------------------------------------------------
// Checkpoint container
//
//   magic   8 bytes  "RJSHCKPT"
//   version u8       1
//   count   u32 LE
//   count x { u32 path_len, path bytes (UTF-8), u32 rank, rank x u64 dims,
//             numel x f64 LE }

inline constexpr char kCheckpointMagic[8] = {'R', 'J', 'S', 'H', 'C', 'K', 'P', 'T'};
inline constexpr std::uint8_t kCheckpointVersion = 1;

namespace io {

template <class T>
void put_le(std::ostream& os, T value) {
    using U = std::conditional_t<sizeof(T) == 8, std::uint64_t, std::conditional_t<sizeof(T) == 4, std::uint32_t, std::uint8_t>>;
    auto u = std::bit_cast<U>(value);
    for (std::size_t i = 0; i < sizeof(T); ++i) {
        os.put(static_cast<char>(u & 0xff));
        if constexpr (sizeof(T) > 1) u >>= 8;
    }
}

template <class T>
T get_le(std::istream& is, const std::string& what) {
    using U = std::conditional_t<sizeof(T) == 8, std::uint64_t, std::conditional_t<sizeof(T) == 4, std::uint32_t, std::uint8_t>>;
    U u = 0;
    for (std::size_t i = 0; i < sizeof(T); ++i) {
        const int ch = is.get();
        if (ch == EOF) throw LoadError("truncated " + what);
        u |= static_cast<U>(static_cast<unsigned char>(ch)) << (8 * i);
    }
    return std::bit_cast<T>(u);
}

}  // namespace io

inline void save_checkpoint(const ParamStore& params, const std::filesystem::path& path) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw LoadError("cannot write checkpoint " + path.string());
    os.write(kCheckpointMagic, sizeof kCheckpointMagic);
    io::put_le<std::uint8_t>(os, kCheckpointVersion);
    io::put_le<std::uint32_t>(os, static_cast<std::uint32_t>(params.size()));
    for (const auto& [name, t] : params) {
        io::put_le<std::uint32_t>(os, static_cast<std::uint32_t>(name.size()));
        os.write(name.data(), static_cast<std::streamsize>(name.size()));
        io::put_le<std::uint32_t>(os, static_cast<std::uint32_t>(t.rank()));
        for (auto d : t.shape()) io::put_le<std::uint64_t>(os, d);
        for (double v : t.data()) io::put_le<double>(os, v);
    }
    if (!os) throw LoadError("failed writing checkpoint " + path.string());
}

/// Entries of a checkpoint file, in file order.
inline std::vector<std::pair<std::string, Tensor>> read_checkpoint(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw LoadError("cannot open checkpoint " + path.string());
    char magic[8];
    is.read(magic, 8);
    if (!is || !std::equal(magic, magic + 8, kCheckpointMagic)) throw LoadError("bad checkpoint magic in " + path.string());
    const auto version = io::get_le<std::uint8_t>(is, "checkpoint header");
    if (version != kCheckpointVersion) throw LoadError("unsupported checkpoint version " + std::to_string(version));
    const auto count = io::get_le<std::uint32_t>(is, "checkpoint header");
    std::vector<std::pair<std::string, Tensor>> out;
    out.reserve(count);
    for (std::uint32_t i = 0; i < count; ++i) {
        const auto len = io::get_le<std::uint32_t>(is, "checkpoint entry");
        std::string name(len, '\0');
        is.read(name.data(), len);
        if (!is) throw LoadError("truncated checkpoint entry name");
        const auto rank = io::get_le<std::uint32_t>(is, "checkpoint entry " + name);
        Shape shape(rank);
        for (auto& d : shape) d = io::get_le<std::uint64_t>(is, "checkpoint entry " + name);
        std::vector<double> data(shape_numel(shape));
        for (auto& v : data) v = io::get_le<double>(is, "checkpoint data " + name);
        out.emplace_back(name, Tensor::from(std::move(shape), std::move(data)));
    }
    return out;
}

/// Copies checkpoint values into `params`. Every parameter must be present
/// with an identical shape; the first offending path is named in the error.
inline void load_checkpoint(ParamStore& params, const std::filesystem::path& path) {
    auto entries = read_checkpoint(path);
    std::map<std::string, const Tensor*> by_name;
    for (const auto& [name, t] : entries) by_name[name] = &t;
    for (auto& [name, t] : params) {
        auto it = by_name.find(name);
        if (it == by_name.end()) throw LoadError("checkpoint is missing parameter " + name);
        if (it->second->shape() != t.shape()) {
            throw LoadError("checkpoint shape mismatch at " + name + ": file " + shape_str(it->second->shape()) +
                            ", model " + shape_str(t.shape()));
        }
    }
    if (entries.size() != params.size()) {
        for (const auto& [name, _] : entries) {
            if (!params.contains(name)) throw LoadError("checkpoint has unexpected parameter " + name);
        }
    }
    for (auto& [name, t] : params) {
        const auto src = by_name[name]->data();
        std::copy(src.begin(), src.end(), t.mutable_data().begin());
    }
}

}  // namespace rejshand
