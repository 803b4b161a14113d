#include "pivoflow/manifest.hpp"

#include <openssl/evp.h>

#include <bit>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <sstream>

#include "pivoflow/errors.hpp"

static_assert(std::endian::native == std::endian::little,
              "blob I/O assumes a little-endian host");

namespace pivoflow {

void Manifest::set(const std::string& key, const std::string& value) {
    for (auto& e : entries_) {
        if (e.first == key) {
            e.second = value;
            return;
        }
    }
    entries_.emplace_back(key, value);
}

void Manifest::set_f64(const std::string& key, double value) { set(key, format_f64(value)); }

void Manifest::set_i64(const std::string& key, std::int64_t value) {
    set(key, std::to_string(value));
}

bool Manifest::has(const std::string& key) const {
    for (const auto& e : entries_)
        if (e.first == key) return true;
    return false;
}

const std::string& Manifest::get(const std::string& key) const {
    for (const auto& e : entries_)
        if (e.first == key) return e.second;
    throw IoError(IoError::Kind::Malformed, "manifest: missing key '" + key + "'");
}

double Manifest::get_f64(const std::string& key) const {
    const std::string& s = get(key);
    char* end = nullptr;
    double v = std::strtod(s.c_str(), &end);
    if (end == s.c_str() || *end != '\0')
        throw IoError(IoError::Kind::Malformed, "manifest: key '" + key + "' is not a number: " + s);
    return v;
}

std::int64_t Manifest::get_i64(const std::string& key) const {
    const std::string& s = get(key);
    char* end = nullptr;
    long long v = std::strtoll(s.c_str(), &end, 10);
    if (end == s.c_str() || *end != '\0')
        throw IoError(IoError::Kind::Malformed, "manifest: key '" + key + "' is not an integer: " + s);
    return v;
}

std::string Manifest::serialize() const {
    std::string out;
    for (const auto& e : entries_) {
        out += e.first;
        out += ": ";
        out += e.second;
        out += '\n';
    }
    return out;
}

Manifest Manifest::parse(const std::string& text) {
    Manifest m;
    std::istringstream in(text);
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty() || line[0] == '#') continue;
        auto pos = line.find(':');
        if (pos == std::string::npos)
            throw IoError(IoError::Kind::Malformed,
                          "manifest: line " + std::to_string(lineno) + " has no ':'");
        std::string key = line.substr(0, pos);
        std::string value = line.substr(pos + 1);
        while (!value.empty() && value.front() == ' ') value.erase(value.begin());
        while (!value.empty() && (value.back() == ' ' || value.back() == '\r')) value.pop_back();
        m.set(key, value);
    }
    return m;
}

void Manifest::save(const std::filesystem::path& path) const {
    atomic_write_text(path, serialize());
}

Manifest Manifest::load(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError(IoError::Kind::MissingFile, "missing file: " + path.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    return parse(ss.str());
}

std::string format_f64(double value) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.17g", value);
    return buf;
}

std::string sha256_hex(const void* data, std::size_t size) {
    unsigned char digest[EVP_MAX_MD_SIZE];
    unsigned int len = 0;
    EVP_Digest(data, size, digest, &len, EVP_sha256(), nullptr);
    static const char* hex = "0123456789abcdef";
    std::string out;
    out.reserve(2 * len);
    for (unsigned int i = 0; i < len; ++i) {
        out.push_back(hex[digest[i] >> 4]);
        out.push_back(hex[digest[i] & 0xF]);
    }
    return out;
}

std::string sha256_file_hex(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError(IoError::Kind::MissingFile, "missing file: " + path.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    const std::string bytes = ss.str();
    return sha256_hex(bytes.data(), bytes.size());
}

void atomic_write_bytes(const std::filesystem::path& path, const void* data, std::size_t size) {
    std::filesystem::path tmp = path;
    tmp += ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw IoError(IoError::Kind::WriteFailed, "cannot open for write: " + tmp.string());
        out.write(static_cast<const char*>(data), static_cast<std::streamsize>(size));
        if (!out) throw IoError(IoError::Kind::WriteFailed, "write failed: " + tmp.string());
    }
    std::filesystem::rename(tmp, path);
}

void atomic_write_text(const std::filesystem::path& path, const std::string& text) {
    atomic_write_bytes(path, text.data(), text.size());
}

void write_f64_file(const std::filesystem::path& path, std::span<const double> values) {
    atomic_write_bytes(path, values.data(), values.size() * sizeof(double));
}

std::vector<double> read_f64_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary | std::ios::ate);
    if (!in) throw IoError(IoError::Kind::MissingFile, "missing file: " + path.string());
    const auto bytes = static_cast<std::size_t>(in.tellg());
    if (bytes % sizeof(double) != 0)
        throw IoError(IoError::Kind::ShapeMismatch,
                      "f64 file size not a multiple of 8: " + path.string());
    std::vector<double> out(bytes / sizeof(double));
    in.seekg(0);
    in.read(reinterpret_cast<char*>(out.data()), static_cast<std::streamsize>(bytes));
    if (!in) throw IoError(IoError::Kind::Malformed, "short read: " + path.string());
    return out;
}

}  // namespace pivoflow
