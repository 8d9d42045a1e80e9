#include "sseg/checkpoint.hpp"

#include <cstdint>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <stdexcept>

namespace sseg {

namespace {

constexpr char kMagic[8] = {'S', 'S', 'E', 'G', 'C', 'K', 'P', 'T'};
constexpr std::uint32_t kVersion = 1;

template <typename T>
void write_pod(std::ostream& out, const T& v) {
    out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T read_pod(std::istream& in) {
    T v{};
    in.read(reinterpret_cast<char*>(&v), sizeof(T));
    if (!in) throw std::runtime_error("checkpoint: truncated file");
    return v;
}

void write_string(std::ostream& out, const std::string& s) {
    write_pod<std::uint32_t>(out, static_cast<std::uint32_t>(s.size()));
    out.write(s.data(), static_cast<std::streamsize>(s.size()));
}

std::string read_string(std::istream& in) {
    const auto len = read_pod<std::uint32_t>(in);
    std::string s(len, '\0');
    in.read(s.data(), len);
    if (!in) throw std::runtime_error("checkpoint: truncated string");
    return s;
}

}  // namespace

void save_arrays(const std::string& path, const ArrayStore& store) {
    const std::string tmp = path + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw std::runtime_error("save_arrays: cannot open " + tmp);
        out.write(kMagic, sizeof(kMagic));
        write_pod(out, kVersion);
        write_pod<std::uint64_t>(out, store.meta_json.size());
        out.write(store.meta_json.data(), static_cast<std::streamsize>(store.meta_json.size()));
        write_pod<std::uint32_t>(out, static_cast<std::uint32_t>(store.arrays.size()));
        for (const auto& [name, tensor] : store.arrays) {
            write_string(out, name);
            write_pod<std::uint32_t>(out, static_cast<std::uint32_t>(tensor.rank()));
            for (std::int64_t i = 0; i < tensor.rank(); ++i)
                write_pod<std::int64_t>(out, tensor.dim(i));
            out.write(reinterpret_cast<const char*>(tensor.data()),
                      static_cast<std::streamsize>(tensor.size() * sizeof(double)));
        }
        if (!out) throw std::runtime_error("save_arrays: write failed for " + tmp);
    }
    if (std::rename(tmp.c_str(), path.c_str()) != 0) {
        std::remove(tmp.c_str());
        throw std::runtime_error("save_arrays: rename failed for " + path);
    }
}

ArrayStore load_arrays(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("load_arrays: cannot open " + path);
    char magic[8];
    in.read(magic, sizeof(magic));
    if (!in || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0)
        throw std::runtime_error("load_arrays: bad magic in " + path);
    const auto version = read_pod<std::uint32_t>(in);
    if (version != kVersion)
        throw std::runtime_error("load_arrays: unsupported version " + std::to_string(version));

    ArrayStore store;
    const auto meta_len = read_pod<std::uint64_t>(in);
    store.meta_json.resize(meta_len);
    in.read(store.meta_json.data(), static_cast<std::streamsize>(meta_len));
    if (!in) throw std::runtime_error("load_arrays: truncated metadata");

    const auto count = read_pod<std::uint32_t>(in);
    for (std::uint32_t a = 0; a < count; ++a) {
        const std::string name = read_string(in);
        const auto rank = read_pod<std::uint32_t>(in);
        std::vector<std::int64_t> shape(rank);
        for (auto& dim : shape) dim = read_pod<std::int64_t>(in);
        Tensor t(shape);
        in.read(reinterpret_cast<char*>(t.data()),
                static_cast<std::streamsize>(t.size() * sizeof(double)));
        if (!in) throw std::runtime_error("load_arrays: truncated array " + name);
        store.arrays.emplace(name, std::move(t));
    }
    return store;
}

}  // namespace sseg
