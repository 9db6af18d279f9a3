#pragma once

#include "svsplat/errors.hpp"

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <string>
#include <vector>

namespace svsplat {

using Shape = std::vector<int64_t>;

inline int64_t shape_numel(const Shape& dims) {
    int64_t n = 1;
    for (int64_t d : dims) {
        if (d < 0) throw ShapeError("negative extent in shape");
        n *= d;
    }
    return n;
}

std::string shape_str(const Shape& dims);

/// Dense row-major array with a compile-time scalar type. This is the
/// working type of all numerical code; the dtype-erased Tensor below is
/// only used at file and checkpoint boundaries.
template <typename T>
struct TArr {
    Shape dims;
    std::vector<T> v;

    TArr() = default;
    explicit TArr(Shape d) : dims(std::move(d)), v(static_cast<size_t>(shape_numel(dims)), T(0)) {}
    TArr(Shape d, std::vector<T> data) : dims(std::move(d)), v(std::move(data)) {
        if (static_cast<int64_t>(v.size()) != shape_numel(dims))
            throw ShapeError("data length does not match shape " + shape_str(dims));
    }

    static TArr zeros(Shape d) { return TArr(std::move(d)); }
    static TArr full(Shape d, T value) {
        TArr a(std::move(d));
        for (auto& x : a.v) x = value;
        return a;
    }
    static TArr scalar(T value) { return TArr({}, {value}); }

    int64_t numel() const { return static_cast<int64_t>(v.size()); }
    int rank() const { return static_cast<int>(dims.size()); }
    int64_t dim(int i) const { return dims.at(static_cast<size_t>(i)); }

    T* data() { return v.data(); }
    const T* data() const { return v.data(); }

    T& operator[](int64_t i) { return v[static_cast<size_t>(i)]; }
    const T& operator[](int64_t i) const { return v[static_cast<size_t>(i)]; }

    T& at(int64_t i) { return v[static_cast<size_t>(i)]; }
    T& at(int64_t i, int64_t j) { return v[static_cast<size_t>(i * dims[1] + j)]; }
    T& at(int64_t i, int64_t j, int64_t k) {
        return v[static_cast<size_t>((i * dims[1] + j) * dims[2] + k)];
    }
    T& at(int64_t i, int64_t j, int64_t k, int64_t l) {
        return v[static_cast<size_t>(((i * dims[1] + j) * dims[2] + k) * dims[3] + l)];
    }
    const T& at(int64_t i) const { return v[static_cast<size_t>(i)]; }
    const T& at(int64_t i, int64_t j) const { return v[static_cast<size_t>(i * dims[1] + j)]; }
    const T& at(int64_t i, int64_t j, int64_t k) const {
        return v[static_cast<size_t>((i * dims[1] + j) * dims[2] + k)];
    }
    const T& at(int64_t i, int64_t j, int64_t k, int64_t l) const {
        return v[static_cast<size_t>(((i * dims[1] + j) * dims[2] + k) * dims[3] + l)];
    }

    bool same_shape(const TArr& o) const { return dims == o.dims; }

    bool all_finite() const {
        for (const T& x : v)
            if (!std::isfinite(static_cast<double>(x))) return false;
        return true;
    }

    template <typename U>
    TArr<U> cast() const {
        TArr<U> out;
        out.dims = dims;
        out.v.resize(v.size());
        for (size_t i = 0; i < v.size(); ++i) out.v[i] = static_cast<U>(v[i]);
        return out;
    }
};

enum class Dtype : uint8_t { F32 = 0, F64 = 1 };

inline size_t dtype_size(Dtype dt) { return dt == Dtype::F32 ? 4 : 8; }
inline const char* dtype_name(Dtype dt) { return dt == Dtype::F32 ? "f32" : "f64"; }

/// Dtype-erased tensor holding the serialized little-endian payload.
/// Keeping raw bytes makes container round trips bit-exact by construction.
class Tensor {
public:
    Tensor() : dtype_(Dtype::F32) {}
    Tensor(Shape dims, Dtype dtype, std::vector<std::byte> payload);

    static Tensor from_f32(const TArr<float>& a);
    static Tensor from_f64(const TArr<double>& a);
    template <typename T>
    static Tensor from_array(const TArr<T>& a, Dtype dt) {
        if (dt == Dtype::F32) return from_f32(a.template cast<float>());
        return from_f64(a.template cast<double>());
    }

    const Shape& dims() const { return dims_; }
    Dtype dtype() const { return dtype_; }
    int64_t numel() const { return shape_numel(dims_); }
    const std::vector<std::byte>& payload() const { return data_; }

    /// Decode element i of the payload (tests and validation only).
    double value(int64_t i) const;

    TArr<float> to_f32() const;
    TArr<double> to_f64() const;
    template <typename T>
    TArr<T> to_array() const;

    bool all_finite() const;
    bool operator==(const Tensor& o) const {
        return dims_ == o.dims_ && dtype_ == o.dtype_ && data_ == o.data_;
    }

private:
    Shape dims_;
    Dtype dtype_;
    std::vector<std::byte> data_;
};

template <>
inline TArr<float> Tensor::to_array<float>() const { return to_f32(); }
template <>
inline TArr<double> Tensor::to_array<double>() const { return to_f64(); }

} // namespace svsplat
