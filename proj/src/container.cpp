#include "limoseg/container.hpp"

#include "limoseg/error.hpp"
#include "io_util.hpp"

#include <charconv>
#include <fstream>
#include <functional>
#include <numeric>
#include <sstream>

namespace limoseg {

std::size_t NamedArray::numel() const {
    return std::accumulate(dims.begin(), dims.end(), std::size_t{1},
                           [](std::size_t a, std::uint32_t b) { return a * b; });
}

const NamedArray* Container::find(const std::string& name) const {
    for (const auto& a : arrays)
        if (a.name == name) return &a;
    return nullptr;
}

const NamedArray& Container::get(const std::string& name) const {
    if (const auto* a = find(name)) return *a;
    throw FormatError("container has no array '" + name + "'");
}

std::string encode_container(const Container& c) {
    std::string out = "LMSG";
    io::put_le(out, kContainerVersion);
    io::put_le(out, static_cast<std::uint32_t>(c.text.size()));
    out += c.text;
    io::put_le(out, static_cast<std::uint32_t>(c.arrays.size()));
    for (const auto& a : c.arrays) {
        if (a.name.size() > 0xFFFF) throw FormatError("array name too long: " + a.name);
        if (a.dims.size() > 0xFF) throw FormatError("too many dims for " + a.name);
        if (a.numel() != a.data.size()) throw FormatError("dims do not match data for " + a.name);
        io::put_le(out, static_cast<std::uint16_t>(a.name.size()));
        out += a.name;
        io::put_le(out, static_cast<std::uint8_t>(a.dims.size()));
        for (auto d : a.dims) io::put_le(out, d);
        for (float v : a.data) io::put_le(out, v);
    }
    return out;
}

Container decode_container(const std::string& bytes, const std::string& context) {
    io::Reader in(bytes, context);
    if (in.get_bytes(4) != "LMSG") throw FormatError(context + ": bad magic");
    const auto version = in.get<std::uint32_t>();
    if (version != kContainerVersion) {
        throw FormatError(context + ": unsupported version " + std::to_string(version));
    }
    Container c;
    c.text = in.get_bytes(in.get<std::uint32_t>());
    const auto count = in.get<std::uint32_t>();
    for (std::uint32_t i = 0; i < count; ++i) {
        NamedArray a;
        a.name = in.get_bytes(in.get<std::uint16_t>());
        const auto ndim = in.get<std::uint8_t>();
        for (std::uint8_t d = 0; d < ndim; ++d) a.dims.push_back(in.get<std::uint32_t>());
        const std::size_t n = a.numel();
        if (n > bytes.size()) throw FormatError(context + ": implausible size for " + a.name);
        const char* raw = in.raw(n * 4);
        a.data.resize(n);
        for (std::size_t k = 0; k < n; ++k) a.data[k] = io::get_le<float>(raw + 4 * k);
        c.arrays.push_back(std::move(a));
    }
    if (!in.at_end()) throw FormatError(context + ": trailing bytes");
    return c;
}

void write_container(const std::filesystem::path& path, const Container& c) {
    io::write_file(path, encode_container(c));
}

Container read_container(const std::filesystem::path& path) {
    return decode_container(io::read_file(path), path.string());
}

// ---- KeyValues ----------------------------------------------------------------

std::string format_double(double v) {
    char buf[64];
    auto res = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, res.ptr);
}

namespace {

std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return {};
    const auto e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
}

}  // namespace

KeyValues KeyValues::parse(const std::string& text) {
    KeyValues kv;
    std::istringstream in(text);
    std::string line;
    int line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        const std::string t = trim(line);
        if (t.empty() || t.front() == '#') continue;
        const auto eq = t.find('=');
        if (eq == std::string::npos) {
            throw ParseError("line " + std::to_string(line_no) + ": expected key=value, got '" + t + "'");
        }
        kv.values_[trim(t.substr(0, eq))] = trim(t.substr(eq + 1));
    }
    return kv;
}

KeyValues KeyValues::load(const std::filesystem::path& path) {
    try {
        return parse(io::read_file(path));
    } catch (const ParseError& e) {
        throw ParseError(path.string() + ": " + e.what());
    }
}

std::string KeyValues::str() const {
    std::string out;
    for (const auto& [k, v] : values_) out += k + "=" + v + "\n";
    return out;
}

void KeyValues::set(const std::string& key, double value) { values_[key] = format_double(value); }

const std::string& KeyValues::get(const std::string& key) const {
    const auto it = values_.find(key);
    if (it == values_.end()) throw ParseError("missing key '" + key + "'");
    return it->second;
}

double KeyValues::get_double(const std::string& key) const {
    const std::string& s = get(key);
    double v = 0.0;
    const auto res = std::from_chars(s.data(), s.data() + s.size(), v);
    if (res.ec != std::errc{} || res.ptr != s.data() + s.size()) {
        throw ParseError("key '" + key + "': not a number: '" + s + "'");
    }
    return v;
}

long long KeyValues::get_int(const std::string& key) const {
    const std::string& s = get(key);
    long long v = 0;
    const auto res = std::from_chars(s.data(), s.data() + s.size(), v);
    if (res.ec != std::errc{} || res.ptr != s.data() + s.size()) {
        throw ParseError("key '" + key + "': not an integer: '" + s + "'");
    }
    return v;
}

bool KeyValues::get_bool(const std::string& key) const {
    const std::string& s = get(key);
    if (s == "true" || s == "1" || s == "yes") return true;
    if (s == "false" || s == "0" || s == "no") return false;
    throw ParseError("key '" + key + "': not a boolean: '" + s + "'");
}

std::string KeyValues::get_or(const std::string& key, const std::string& fallback) const {
    return has(key) ? get(key) : fallback;
}
double KeyValues::get_or(const std::string& key, double fallback) const { return has(key) ? get_double(key) : fallback; }
long long KeyValues::get_or(const std::string& key, long long fallback) const {
    return has(key) ? get_int(key) : fallback;
}
int KeyValues::get_or(const std::string& key, int fallback) const {
    return has(key) ? static_cast<int>(get_int(key)) : fallback;
}
bool KeyValues::get_or(const std::string& key, bool fallback) const { return has(key) ? get_bool(key) : fallback; }

void KeyValues::merge(const KeyValues& other) {
    for (const auto& [k, v] : other.values_) values_[k] = v;
}

}  // namespace limoseg
