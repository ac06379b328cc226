#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

namespace limoseg {

/// Named float32 array stored in an LMSG container.
struct NamedArray {
    std::string name;
    std::vector<std::uint32_t> dims;
    std::vector<float> data;

    std::size_t numel() const;
};

/// LMSG file: magic "LMSG", u32 version, u32-length-prefixed text block,
/// u32 array count, then per array: u16 name length, name, u8 ndim,
/// u32 dims, float32 data. All integers and floats little-endian.
struct Container {
    std::string text;
    std::vector<NamedArray> arrays;

    const NamedArray* find(const std::string& name) const;
    /// Throws FormatError when missing.
    const NamedArray& get(const std::string& name) const;
};

inline constexpr std::uint32_t kContainerVersion = 1;

std::string encode_container(const Container& c);
Container decode_container(const std::string& bytes, const std::string& context = "container");
void write_container(const std::filesystem::path& path, const Container& c);
Container read_container(const std::filesystem::path& path);

/// Ordered key=value pairs; the text form is one `key=value` per line, `#` comments.
class KeyValues {
public:
    static KeyValues parse(const std::string& text);
    static KeyValues load(const std::filesystem::path& path);
    std::string str() const;

    void set(const std::string& key, const std::string& value) { values_[key] = value; }
    void set(const std::string& key, double value);
    void set(const std::string& key, long long value) { values_[key] = std::to_string(value); }
    void set(const std::string& key, int value) { values_[key] = std::to_string(value); }
    void set(const std::string& key, bool value) { values_[key] = value ? "true" : "false"; }

    bool has(const std::string& key) const { return values_.contains(key); }
    /// Throws ParseError when absent or malformed.
    const std::string& get(const std::string& key) const;
    double get_double(const std::string& key) const;
    long long get_int(const std::string& key) const;
    bool get_bool(const std::string& key) const;

    std::string get_or(const std::string& key, const std::string& fallback) const;
    double get_or(const std::string& key, double fallback) const;
    long long get_or(const std::string& key, long long fallback) const;
    int get_or(const std::string& key, int fallback) const;
    bool get_or(const std::string& key, bool fallback) const;

    /// Entries of `other` override ours.
    void merge(const KeyValues& other);
    const std::map<std::string, std::string>& entries() const { return values_; }

private:
    std::map<std::string, std::string> values_;
};

/// Shortest round-trip text for a double.
std::string format_double(double v);

}  // namespace limoseg
