#pragma once

// Checkpoint container. Layout (stable, little-endian):
//
//   line 1:  "pmlm-checkpoint-v1\n"
//   header:  "key=value\n" lines (config fields, optimizer step, extras)
//   marker:  "%%tensors\n"
//   u64      tensor count
//   records: u32 name length | name bytes | u32 rank | u64 dims[rank]
//            | float32 values, row-major
//
// Parameters are stored under their visit() names; Adam moments under
// "adam.m.<name>" / "adam.v.<name>"; extra heads under their own prefix.

#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "pmlm/common.hpp"
#include "pmlm/model.hpp"

namespace pmlm {

inline constexpr const char* kCheckpointMagic = "pmlm-checkpoint-v1";

struct Checkpoint {
    std::map<std::string, std::string> header;            // key=value config fields
    std::vector<std::pair<std::string, Matrix<float>>> tensors;  // insertion order preserved

    const Matrix<float>* find(const std::string& name) const {
        for (const auto& [n, m] : tensors)
            if (n == name) return &m;
        return nullptr;
    }

    void add(const std::string& name, const Matrix<float>& m) { tensors.emplace_back(name, m); }

    template <class S>
    void add_parameters(const std::string& prefix, const Parameters<S>& params) {
        params.visit([this, &prefix](const std::string& name, const Matrix<S>& m, bool) {
            Matrix<float> f(m.rows, m.cols);
            for (size_t i = 0; i < m.d.size(); ++i) f.d[i] = static_cast<float>(m.d[i]);
            add(prefix + name, f);
        });
    }

    template <class S>
    void load_parameters(const std::string& prefix, Parameters<S>& params) const {
        params.visit([this, &prefix](const std::string& name, Matrix<S>& m, bool) {
            const Matrix<float>* f = find(prefix + name);
            require(f != nullptr, "checkpoint missing tensor '" + prefix + name + "'");
            require(f->rows == m.rows && f->cols == m.cols,
                    "checkpoint tensor '" + prefix + name + "' has shape " + std::to_string(f->rows) +
                        "x" + std::to_string(f->cols) + ", expected " + std::to_string(m.rows) + "x" +
                        std::to_string(m.cols));
            for (size_t i = 0; i < m.d.size(); ++i) m.d[i] = static_cast<S>(f->d[i]);
        });
    }

    void save(const std::string& path) const;
    static Checkpoint load(const std::string& path);
};

namespace detail {

template <class T>
void write_pod(std::ostream& os, T v) {
    static_assert(std::is_trivially_copyable_v<T>);
    os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <class T>
T read_pod(std::istream& is, const std::string& what) {
    T v{};
    is.read(reinterpret_cast<char*>(&v), sizeof(T));
    require(is.good(), "checkpoint truncated while reading " + what);
    return v;
}

}  // namespace detail

inline void Checkpoint::save(const std::string& path) const {
    std::ofstream os(path, std::ios::binary);
    require(os.good(), "cannot open checkpoint for writing: " + path);
    os << kCheckpointMagic << '\n';
    for (const auto& [k, v] : header) {
        require(k.find('\n') == std::string::npos && v.find('\n') == std::string::npos,
                "checkpoint header fields must be single-line");
        os << k << '=' << v << '\n';
    }
    os << "%%tensors\n";
    detail::write_pod<uint64_t>(os, tensors.size());
    for (const auto& [name, m] : tensors) {
        detail::write_pod<uint32_t>(os, static_cast<uint32_t>(name.size()));
        os.write(name.data(), static_cast<std::streamsize>(name.size()));
        const bool vec = m.rows == 1;
        detail::write_pod<uint32_t>(os, vec ? 1u : 2u);
        if (vec) {
            detail::write_pod<uint64_t>(os, static_cast<uint64_t>(m.cols));
        } else {
            detail::write_pod<uint64_t>(os, static_cast<uint64_t>(m.rows));
            detail::write_pod<uint64_t>(os, static_cast<uint64_t>(m.cols));
        }
        os.write(reinterpret_cast<const char*>(m.d.data()),
                 static_cast<std::streamsize>(m.d.size() * sizeof(float)));
    }
    require(os.good(), "checkpoint write failed: " + path);
}

inline Checkpoint Checkpoint::load(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    require(is.good(), "cannot open checkpoint: " + path);
    std::string line;
    require(static_cast<bool>(std::getline(is, line)), "checkpoint empty: " + path);
    require(line == kCheckpointMagic, "not a pmlm checkpoint (bad magic '" + line + "'): " + path);

    Checkpoint ck;
    while (std::getline(is, line)) {
        if (line == "%%tensors") break;
        const auto eq = line.find('=');
        require(eq != std::string::npos, "malformed checkpoint header line: " + line);
        ck.header[line.substr(0, eq)] = line.substr(eq + 1);
    }
    require(line == "%%tensors", "checkpoint missing tensor section: " + path);

    const auto count = detail::read_pod<uint64_t>(is, "tensor count");
    for (uint64_t t = 0; t < count; ++t) {
        const auto name_len = detail::read_pod<uint32_t>(is, "name length");
        std::string name(name_len, '\0');
        is.read(name.data(), name_len);
        require(is.good(), "checkpoint truncated while reading tensor name");
        const auto rank = detail::read_pod<uint32_t>(is, "rank of " + name);
        require(rank == 1 || rank == 2, "unsupported tensor rank " + std::to_string(rank) + " for " + name);
        uint64_t rows = 1, cols = 1;
        if (rank == 1) {
            cols = detail::read_pod<uint64_t>(is, "dims of " + name);
        } else {
            rows = detail::read_pod<uint64_t>(is, "dims of " + name);
            cols = detail::read_pod<uint64_t>(is, "dims of " + name);
        }
        Matrix<float> m(static_cast<int>(rows), static_cast<int>(cols));
        is.read(reinterpret_cast<char*>(m.d.data()),
                static_cast<std::streamsize>(m.d.size() * sizeof(float)));
        require(is.good(), "checkpoint truncated while reading tensor data of " + name);
        ck.tensors.emplace_back(std::move(name), std::move(m));
    }
    return ck;
}

}  // namespace pmlm
