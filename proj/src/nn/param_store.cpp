#include "pivoflow/nn/param_store.hpp"

#include <cstring>

#include "pivoflow/errors.hpp"

namespace pivoflow::nn {

int ParamStore::add(const std::string& name, int rows, int cols) {
    if (find(name) >= 0) throw ConfigError("duplicate parameter tensor: " + name);
    Tensor t;
    t.name = name;
    t.rows = rows;
    t.cols = cols;
    t.value.assign(static_cast<std::size_t>(rows) * cols, 0.0);
    t.grad.assign(t.value.size(), 0.0);
    offsets_.push_back(total_);
    total_ += t.value.size();
    tensors_.push_back(std::move(t));
    return static_cast<int>(tensors_.size()) - 1;
}

int ParamStore::find(const std::string& name) const {
    for (int i = 0; i < count(); ++i)
        if (tensors_[i].name == name) return i;
    return -1;
}

void ParamStore::zero_grad() {
    for (auto& t : tensors_) std::memset(t.grad.data(), 0, t.grad.size() * sizeof(double));
}

void ParamStore::copy_flat_values(std::vector<double>& out) const {
    out.resize(total_);
    for (int i = 0; i < count(); ++i)
        std::memcpy(out.data() + offsets_[i], tensors_[i].value.data(),
                    tensors_[i].value.size() * sizeof(double));
}

std::string ParamStore::checksum() const {
    std::vector<double> flat;
    copy_flat_values(flat);
    return sha256_hex(flat.data(), flat.size() * sizeof(double));
}

void ParamStore::save(const std::filesystem::path& dir, const Manifest& extra,
                      std::int64_t optimizer_step) const {
    std::filesystem::create_directories(dir);
    std::vector<double> flat;
    copy_flat_values(flat);
    write_f64_file(dir / "params.f64", flat);

    Manifest m;
    m.set_i64("format_version", 1);
    m.set_i64("n_tensors", count());
    for (int i = 0; i < count(); ++i) {
        const std::string p = "tensor." + std::to_string(i) + ".";
        m.set(p + "name", tensors_[i].name);
        m.set_i64(p + "rows", tensors_[i].rows);
        m.set_i64(p + "cols", tensors_[i].cols);
    }
    m.set_i64("optimizer_step", optimizer_step);
    for (const auto& e : extra.entries()) m.set(e.first, e.second);
    m.set("data_sha256", sha256_file_hex(dir / "params.f64"));
    m.save(dir / "manifest.txt");
}

Manifest ParamStore::load(const std::filesystem::path& dir) {
    Manifest m = Manifest::load(dir / "manifest.txt");
    if (m.get_i64("format_version") != 1)
        throw IoError(IoError::Kind::VersionMismatch,
                      "checkpoint format_version " + m.get("format_version"));
    if (m.get_i64("n_tensors") != count())
        throw IoError(IoError::Kind::ShapeMismatch,
                      "checkpoint tensor count " + m.get("n_tensors") + ", expected " +
                          std::to_string(count()));
    for (int i = 0; i < count(); ++i) {
        const std::string p = "tensor." + std::to_string(i) + ".";
        if (m.get(p + "name") != tensors_[i].name ||
            m.get_i64(p + "rows") != tensors_[i].rows ||
            m.get_i64(p + "cols") != tensors_[i].cols)
            throw IoError(IoError::Kind::ShapeMismatch,
                          "checkpoint tensor " + std::to_string(i) + " does not match model");
    }
    if (sha256_file_hex(dir / "params.f64") != m.get("data_sha256"))
        throw IoError(IoError::Kind::ChecksumMismatch, "checkpoint blob checksum mismatch");
    const std::vector<double> flat = read_f64_file(dir / "params.f64");
    if (flat.size() != total_)
        throw IoError(IoError::Kind::ShapeMismatch,
                      "checkpoint blob holds " + std::to_string(flat.size()) +
                          " values, expected " + std::to_string(total_));
    for (int i = 0; i < count(); ++i)
        std::memcpy(tensors_[i].value.data(), flat.data() + offsets_[i],
                    tensors_[i].value.size() * sizeof(double));
    return m;
}

}  // namespace pivoflow::nn
