#pragma once

#include "limoseg/error.hpp"

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <string>
#include <type_traits>

namespace limoseg::io {

template <typename T>
T byteswap_if_big(T value) {
    if constexpr (std::endian::native == std::endian::big) {
        unsigned char b[sizeof(T)];
        std::memcpy(b, &value, sizeof(T));
        for (std::size_t i = 0; i < sizeof(T) / 2; ++i) std::swap(b[i], b[sizeof(T) - 1 - i]);
        std::memcpy(&value, b, sizeof(T));
    }
    return value;
}

template <typename T>
T get_le(const char* p) {
    static_assert(std::is_trivially_copyable_v<T>);
    T value;
    std::memcpy(&value, p, sizeof(T));
    return byteswap_if_big(value);
}

template <typename T>
void put_le(std::string& out, T value) {
    static_assert(std::is_trivially_copyable_v<T>);
    value = byteswap_if_big(value);
    char b[sizeof(T)];
    std::memcpy(b, &value, sizeof(T));
    out.append(b, sizeof(T));
}

inline std::string read_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open " + path.string());
    std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    if (in.bad()) throw IoError("read failed: " + path.string());
    return bytes;
}

inline void write_file(const std::filesystem::path& path, const std::string& bytes) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write " + path.string());
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw IoError("write failed: " + path.string());
}

/// Bounds-checked little-endian reader over an in-memory buffer.
class Reader {
public:
    Reader(const std::string& bytes, std::string context) : bytes_(bytes), context_(std::move(context)) {}

    template <typename T>
    T get() {
        need(sizeof(T));
        T v = get_le<T>(bytes_.data() + pos_);
        pos_ += sizeof(T);
        return v;
    }

    std::string get_bytes(std::size_t n) {
        need(n);
        std::string s = bytes_.substr(pos_, n);
        pos_ += n;
        return s;
    }

    const char* raw(std::size_t n) {
        need(n);
        const char* p = bytes_.data() + pos_;
        pos_ += n;
        return p;
    }

    bool at_end() const { return pos_ == bytes_.size(); }

private:
    void need(std::size_t n) const {
        if (bytes_.size() - pos_ < n) throw FormatError(context_ + ": truncated");
    }

    const std::string& bytes_;
    std::string context_;
    std::size_t pos_ = 0;
};

}  // namespace limoseg::io
