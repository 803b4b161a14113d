#pragma once
// Plain-text "key: value" manifests plus the binary f64 blob helpers shared by
// bundle, checkpoint and report I/O. All writes go through a temp file and a
// rename so partially written artifacts never replace good ones.

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <utility>
#include <vector>

namespace pivoflow {

class Manifest {
public:
    void set(const std::string& key, const std::string& value);
    void set_f64(const std::string& key, double value);
    void set_i64(const std::string& key, std::int64_t value);

    bool has(const std::string& key) const;
    const std::string& get(const std::string& key) const;  // throws IoError::Malformed
    double get_f64(const std::string& key) const;
    std::int64_t get_i64(const std::string& key) const;

    const std::vector<std::pair<std::string, std::string>>& entries() const { return entries_; }

    std::string serialize() const;
    static Manifest parse(const std::string& text);

    void save(const std::filesystem::path& path) const;
    static Manifest load(const std::filesystem::path& path);

private:
    std::vector<std::pair<std::string, std::string>> entries_;
};

// 17-significant-digit decimal, round-trips f64 exactly.
std::string format_f64(double value);

std::string sha256_hex(const void* data, std::size_t size);
std::string sha256_file_hex(const std::filesystem::path& path);

void atomic_write_bytes(const std::filesystem::path& path, const void* data, std::size_t size);
void atomic_write_text(const std::filesystem::path& path, const std::string& text);

// Little-endian 64-bit float blobs.
void write_f64_file(const std::filesystem::path& path, std::span<const double> values);
std::vector<double> read_f64_file(const std::filesystem::path& path);

}  // namespace pivoflow
