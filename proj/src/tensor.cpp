#include "svsplat/tensor.hpp"

#include <bit>
#include <cstring>
#include <sstream>

namespace svsplat {

std::string shape_str(const Shape& dims) {
    std::ostringstream os;
    os << "(";
    for (size_t i = 0; i < dims.size(); ++i) {
        if (i) os << ",";
        os << dims[i];
    }
    os << ")";
    return os.str();
}

namespace {

void encode_f32_le(float x, std::byte* out) {
    auto bits = std::bit_cast<uint32_t>(x);
    for (int i = 0; i < 4; ++i) out[i] = std::byte((bits >> (8 * i)) & 0xff);
}

void encode_f64_le(double x, std::byte* out) {
    auto bits = std::bit_cast<uint64_t>(x);
    for (int i = 0; i < 8; ++i) out[i] = std::byte((bits >> (8 * i)) & 0xff);
}

float decode_f32_le(const std::byte* in) {
    uint32_t bits = 0;
    for (int i = 0; i < 4; ++i) bits |= uint32_t(std::to_integer<uint8_t>(in[i])) << (8 * i);
    return std::bit_cast<float>(bits);
}

double decode_f64_le(const std::byte* in) {
    uint64_t bits = 0;
    for (int i = 0; i < 8; ++i) bits |= uint64_t(std::to_integer<uint8_t>(in[i])) << (8 * i);
    return std::bit_cast<double>(bits);
}

} // namespace

Tensor::Tensor(Shape dims, Dtype dtype, std::vector<std::byte> payload)
    : dims_(std::move(dims)), dtype_(dtype), data_(std::move(payload)) {
    const size_t expect = static_cast<size_t>(shape_numel(dims_)) * dtype_size(dtype_);
    if (data_.size() != expect)
        throw ShapeError("payload size " + std::to_string(data_.size()) +
                         " does not match shape " + shape_str(dims_));
}

Tensor Tensor::from_f32(const TArr<float>& a) {
    std::vector<std::byte> bytes(a.v.size() * 4);
    for (size_t i = 0; i < a.v.size(); ++i) encode_f32_le(a.v[i], bytes.data() + 4 * i);
    return Tensor(a.dims, Dtype::F32, std::move(bytes));
}

Tensor Tensor::from_f64(const TArr<double>& a) {
    std::vector<std::byte> bytes(a.v.size() * 8);
    for (size_t i = 0; i < a.v.size(); ++i) encode_f64_le(a.v[i], bytes.data() + 8 * i);
    return Tensor(a.dims, Dtype::F64, std::move(bytes));
}

double Tensor::value(int64_t i) const {
    if (i < 0 || i >= numel()) throw ShapeError("tensor element index out of range");
    if (dtype_ == Dtype::F32) return decode_f32_le(data_.data() + 4 * i);
    return decode_f64_le(data_.data() + 8 * i);
}

TArr<float> Tensor::to_f32() const {
    TArr<float> out;
    out.dims = dims_;
    out.v.resize(static_cast<size_t>(numel()));
    for (size_t i = 0; i < out.v.size(); ++i)
        out.v[i] = dtype_ == Dtype::F32 ? decode_f32_le(data_.data() + 4 * i)
                                        : static_cast<float>(decode_f64_le(data_.data() + 8 * i));
    return out;
}

TArr<double> Tensor::to_f64() const {
    TArr<double> out;
    out.dims = dims_;
    out.v.resize(static_cast<size_t>(numel()));
    for (size_t i = 0; i < out.v.size(); ++i)
        out.v[i] = dtype_ == Dtype::F32 ? static_cast<double>(decode_f32_le(data_.data() + 4 * i))
                                        : decode_f64_le(data_.data() + 8 * i);
    return out;
}

bool Tensor::all_finite() const {
    for (int64_t i = 0; i < numel(); ++i)
        if (!std::isfinite(value(i))) return false;
    return true;
}

} // namespace svsplat
