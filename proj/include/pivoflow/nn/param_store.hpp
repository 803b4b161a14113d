#pragma once
// Named f64 parameter tensors with matching gradient buffers. Registration
// order is stable and defines both the checkpoint blob layout and the flat
// offsets used by per-thread gradient shadows.

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "pivoflow/manifest.hpp"

namespace pivoflow::nn {

struct Tensor {
    std::string name;
    int rows = 0;
    int cols = 0;  // 1 for vectors
    std::vector<double> value;
    std::vector<double> grad;

    std::size_t size() const { return value.size(); }
};

class ParamStore {
public:
    int add(const std::string& name, int rows, int cols);
    int find(const std::string& name) const;  // -1 when absent

    int count() const { return static_cast<int>(tensors_.size()); }
    Tensor& at(int idx) { return tensors_[idx]; }
    const Tensor& at(int idx) const { return tensors_[idx]; }

    std::size_t total_size() const { return total_; }
    // Offset of tensor idx in the flattened (registration-order) layout.
    std::size_t flat_offset(int idx) const { return offsets_[idx]; }

    void zero_grad();
    void copy_flat_values(std::vector<double>& out) const;

    // SHA-256 over the flattened values; used for the frozen-backbone check
    // and checkpoint integrity.
    std::string checksum() const;

    // Checkpoint directory: manifest.txt (names, shapes, optimizer step,
    // caller extras, blob checksum) + params.f64.
    void save(const std::filesystem::path& dir, const Manifest& extra,
              std::int64_t optimizer_step) const;
    // Loads values into an already-built store with identical layout; returns
    // the stored manifest (for caller extras). Throws IoError on mismatch.
    Manifest load(const std::filesystem::path& dir);

private:
    std::vector<Tensor> tensors_;
    std::vector<std::size_t> offsets_;
    std::size_t total_ = 0;
};

}  // namespace pivoflow::nn
