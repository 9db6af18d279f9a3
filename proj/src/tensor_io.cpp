#include "svsplat/tensor_io.hpp"

#include <array>
#include <cstdint>
#include <fstream>

namespace svsplat {

namespace {

constexpr std::array<char, 4> kMagic = {'C', 'T', 'S', 'T'};
constexpr uint8_t kVersion = 1;
constexpr int kMaxRank = 255;

void put_u64_le(uint64_t x, std::ostream& os) {
    std::array<char, 8> b;
    for (int i = 0; i < 8; ++i) b[static_cast<size_t>(i)] = static_cast<char>((x >> (8 * i)) & 0xff);
    os.write(b.data(), 8);
}

uint64_t get_u64_le(std::istream& is) {
    std::array<unsigned char, 8> b;
    is.read(reinterpret_cast<char*>(b.data()), 8);
    uint64_t x = 0;
    for (int i = 0; i < 8; ++i) x |= uint64_t(b[static_cast<size_t>(i)]) << (8 * i);
    return x;
}

} // namespace

void write_tensor(const std::filesystem::path& path, const Tensor& t) {
    if (t.dims().size() > kMaxRank)
        throw ShapeError("tensor rank exceeds container limit");
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw IoError("cannot open for writing: " + path.string());
    os.write(kMagic.data(), 4);
    os.put(static_cast<char>(kVersion));
    os.put(static_cast<char>(static_cast<uint8_t>(t.dtype())));
    os.put(static_cast<char>(static_cast<uint8_t>(t.dims().size())));
    for (int64_t d : t.dims()) put_u64_le(static_cast<uint64_t>(d), os);
    os.write(reinterpret_cast<const char*>(t.payload().data()),
             static_cast<std::streamsize>(t.payload().size()));
    os.flush();
    if (!os) throw IoError("write failed: " + path.string());
}

Tensor read_tensor(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot open for reading: " + path.string());

    std::array<char, 4> magic{};
    is.read(magic.data(), 4);
    if (!is || magic != kMagic)
        throw FormatError("bad magic in " + path.string());

    const int version = is.get();
    if (version != kVersion)
        throw FormatError("unsupported container version " + std::to_string(version) +
                          " in " + path.string());

    const int dtype_code = is.get();
    if (dtype_code != 0 && dtype_code != 1)
        throw FormatError("unknown dtype code " + std::to_string(dtype_code) +
                          " in " + path.string());
    const Dtype dt = dtype_code == 0 ? Dtype::F32 : Dtype::F64;

    const int rank = is.get();
    if (rank < 0 || !is)
        throw FormatError("truncated header in " + path.string());

    Shape dims(static_cast<size_t>(rank));
    for (int i = 0; i < rank; ++i) {
        dims[static_cast<size_t>(i)] = static_cast<int64_t>(get_u64_le(is));
        if (!is) throw FormatError("truncated dims in " + path.string());
    }

    const uint64_t n = static_cast<uint64_t>(shape_numel(dims));
    const uint64_t nbytes = n * dtype_size(dt);
    std::vector<std::byte> payload(nbytes);
    is.read(reinterpret_cast<char*>(payload.data()), static_cast<std::streamsize>(nbytes));
    if (static_cast<uint64_t>(is.gcount()) != nbytes)
        throw FormatError("truncated payload in " + path.string() + ": expected " +
                          std::to_string(nbytes) + " bytes");
    // Trailing bytes mean the declared dims do not describe the file.
    if (is.peek() != std::ifstream::traits_type::eof())
        throw FormatError("payload longer than declared dims in " + path.string());

    return Tensor(std::move(dims), dt, std::move(payload));
}

} // namespace svsplat
