#pragma once

#include <cstdint>
#include <cstring>
#include <string>
#include <type_traits>
#include <vector>

#include "timnet/nn.hpp"

namespace timnet {

// TIMW binary weight format, little-endian throughout:
//   magic "TIMW" | version u32 (=1) | tensor count u32
//   per tensor: name length u16, UTF-8 name, rank u8, dims u32 each,
//               dtype u8 (0 = f32, 1 = f64), raw element bytes row-major.

struct WeightEntry {
    std::string name;
    std::vector<std::int64_t> shape;
    int dtype = 0;  // 0 f32, 1 f64
    std::vector<std::uint8_t> raw;

    std::int64_t element_count() const {
        std::int64_t n = 1;
        for (auto d : shape) n *= d;
        return n;
    }
};

struct WeightFile {
    std::vector<WeightEntry> entries;
    const WeightEntry* find(const std::string& name) const {
        for (const auto& e : entries)
            if (e.name == name) return &e;
        return nullptr;
    }
};

void save_weight_file(const std::string& path, const WeightFile& wf);
WeightFile load_weight_file(const std::string& path);

struct PartialLoadReport {
    std::vector<std::string> loaded;       // store tensors taken from the file
    std::vector<std::string> initialized;  // store tensors kept at fresh init
    std::vector<std::string> ignored;      // file tensors with no destination
};

namespace detail {

template <typename T>
int dtype_of() {
    return std::is_same_v<T, float> ? 0 : 1;
}

template <typename T>
std::vector<std::uint8_t> to_raw(const std::vector<T>& v) {
    std::vector<std::uint8_t> raw(v.size() * sizeof(T));
    std::memcpy(raw.data(), v.data(), raw.size());
    return raw;
}

template <typename T>
void from_raw(const WeightEntry& e, std::vector<T>& out) {
    if (e.dtype == dtype_of<T>()) {
        std::memcpy(out.data(), e.raw.data(), out.size() * sizeof(T));
    } else if (e.dtype == 0) {
        std::vector<float> tmp(out.size());
        std::memcpy(tmp.data(), e.raw.data(), tmp.size() * sizeof(float));
        for (std::size_t i = 0; i < out.size(); ++i) out[i] = static_cast<T>(tmp[i]);
    } else {
        std::vector<double> tmp(out.size());
        std::memcpy(tmp.data(), e.raw.data(), tmp.size() * sizeof(double));
        for (std::size_t i = 0; i < out.size(); ++i) out[i] = static_cast<T>(tmp[i]);
    }
}

}  // namespace detail

/// All registered parameters plus buffers (batchnorm running statistics), in
/// registration order.
template <typename T>
WeightFile snapshot(const ParamStore<T>& store) {
    WeightFile wf;
    auto push = [&wf](const std::string& name, const TensorPtr<T>& t) {
        WeightEntry e;
        e.name = name;
        e.shape = t->shape();
        e.dtype = detail::dtype_of<T>();
        e.raw = detail::to_raw(t->data);
        wf.entries.push_back(std::move(e));
    };
    for (const auto& [name, p] : store.params) push(name, p);
    for (const auto& [name, b] : store.buffers) push(name, b);
    return wf;
}

template <typename T>
void save_weights(const std::string& path, const ParamStore<T>& store) {
    save_weight_file(path, snapshot(store));
}

/// Every store tensor must be present with a matching shape.
template <typename T>
void load_strict(ParamStore<T>& store, const WeightFile& wf) {
    auto load_one = [&wf](const std::string& name, const TensorPtr<T>& t) {
        const WeightEntry* e = wf.find(name);
        if (!e) throw std::runtime_error("load_weights: tensor '" + name + "' missing from weight file");
        if (e->shape != t->shape())
            throw std::runtime_error("load_weights: tensor '" + name + "' has shape " + shape_str(e->shape) +
                                     " in file but " + shape_str(t->shape()) + " in the model");
        detail::from_raw(*e, t->data);
    };
    for (auto& [name, p] : store.params) load_one(name, p);
    for (auto& [name, b] : store.buffers) load_one(name, b);
}

/// Name-driven partial load: store tensors found in the file are overwritten
/// (shapes must agree); the rest keep their fresh initialization. File
/// tensors with no destination are reported as ignored.
template <typename T>
PartialLoadReport load_partial(ParamStore<T>& store, const WeightFile& wf) {
    PartialLoadReport report;
    auto load_one = [&](const std::string& name, const TensorPtr<T>& t) {
        const WeightEntry* e = wf.find(name);
        if (!e) {
            report.initialized.push_back(name);
            return;
        }
        if (e->shape != t->shape())
            throw std::runtime_error("load_weights: tensor '" + name + "' has shape " + shape_str(e->shape) +
                                     " in file but " + shape_str(t->shape()) + " in the model");
        detail::from_raw(*e, t->data);
        report.loaded.push_back(name);
    };
    for (auto& [name, p] : store.params) load_one(name, p);
    for (auto& [name, b] : store.buffers) load_one(name, b);
    for (const auto& e : wf.entries)
        if (!store.find(e.name)) report.ignored.push_back(e.name);
    return report;
}

template <typename T>
void load_weights(const std::string& path, ParamStore<T>& store) {
    load_strict(store, load_weight_file(path));
}

}  // namespace timnet
