#pragma once

#include <cstdint>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "tdinf/rng.hpp"

namespace tdinf {

namespace fs = std::filesystem;

// All binary artifacts are little-endian. We only target LE hosts; refuse
// to run elsewhere rather than silently write garbage.
inline void require_little_endian() {
    const std::uint32_t probe = 1;
    unsigned char b;
    std::memcpy(&b, &probe, 1);
    if (b != 1) throw std::runtime_error("big-endian hosts are not supported");
}

struct BinWriter {
    std::ofstream out;

    explicit BinWriter(const fs::path& p) : out(p, std::ios::binary) {
        require_little_endian();
        if (!out) throw std::runtime_error("cannot open for writing: " + p.string());
    }

    template <typename T>
    void put(T v) {
        static_assert(std::is_trivially_copyable_v<T>);
        out.write(reinterpret_cast<const char*>(&v), sizeof(T));
    }

    template <typename T>
    void put_array(const T* v, std::size_t n) {
        out.write(reinterpret_cast<const char*>(v), static_cast<std::streamsize>(n * sizeof(T)));
    }

    void close() {
        out.close();
        if (!out) throw std::runtime_error("write failed (disk full?)");
    }
};

struct BinReader {
    std::ifstream in;
    fs::path path;

    explicit BinReader(const fs::path& p) : in(p, std::ios::binary), path(p) {
        require_little_endian();
        if (!in) throw std::runtime_error("cannot open for reading: " + p.string());
    }

    template <typename T>
    T get() {
        T v;
        in.read(reinterpret_cast<char*>(&v), sizeof(T));
        if (!in) throw std::runtime_error("truncated file: " + path.string());
        return v;
    }

    template <typename T>
    void get_array(T* v, std::size_t n) {
        in.read(reinterpret_cast<char*>(v), static_cast<std::streamsize>(n * sizeof(T)));
        if (!in) throw std::runtime_error("truncated file: " + path.string());
    }

    bool at_eof() {
        return in.peek() == std::char_traits<char>::eof();
    }
};

inline std::string read_text_file(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open: " + p.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

inline void write_text_file(const fs::path& p, const std::string& content) {
    std::ofstream out(p, std::ios::binary);
    if (!out) throw std::runtime_error("cannot open for writing: " + p.string());
    out << content;
    out.close();
    if (!out) throw std::runtime_error("write failed: " + p.string());
}

// Atomic-ish publish: write to a sibling .tmp, then rename into place.
inline void write_text_file_atomic(const fs::path& p, const std::string& content) {
    fs::path tmp = p;
    tmp += ".tmp";
    write_text_file(tmp, content);
    fs::rename(tmp, p);
}

inline std::uint64_t file_checksum(const fs::path& p) {
    std::string content = read_text_file(p);
    return fnv1a64(content.data(), content.size());
}

inline std::string hex64(std::uint64_t v) {
    char buf[17];
    std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(v));
    return std::string(buf);
}

// Pinned float formatting so that repeated runs emit byte-identical text.
inline std::string fmt_double(double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.12g", v);
    return std::string(buf);
}

}  // namespace tdinf
