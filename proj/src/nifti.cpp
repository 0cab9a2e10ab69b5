#include "cfreg/nifti.hpp"

#include <zlib.h>

#include <algorithm>
#include <array>
#include <bit>
#include <cstring>
#include <filesystem>
#include <stdexcept>

namespace cfreg::nifti {

namespace {

constexpr int header_size = 348;
constexpr int data_offset = 352;

// Byte offsets into the NIfTI-1 header.
constexpr int off_sizeof_hdr = 0;
constexpr int off_dim = 40;
constexpr int off_intent_code = 68;
constexpr int off_datatype = 70;
constexpr int off_bitpix = 72;
constexpr int off_pixdim = 76;
constexpr int off_vox_offset = 108;
constexpr int off_scl_slope = 112;
constexpr int off_scl_inter = 116;
constexpr int off_xyzt_units = 123;
constexpr int off_descrip = 148;
constexpr int off_qform_code = 252;
constexpr int off_sform_code = 254;
constexpr int off_srow_x = 280;
constexpr int off_magic = 344;

struct GzFile {
    gzFile handle = nullptr;
    GzFile(const std::string& path, const char* mode) : handle(gzopen(path.c_str(), mode)) {}
    ~GzFile()
    {
        if (handle != nullptr) {
            gzclose(handle);
        }
    }
    GzFile(const GzFile&) = delete;
    GzFile& operator=(const GzFile&) = delete;
};

template <class V>
V get(const std::array<unsigned char, header_size>& h, int off, bool swap)
{
    V v;
    std::memcpy(&v, h.data() + off, sizeof(V));
    if (swap) {
        auto* b = reinterpret_cast<unsigned char*>(&v);
        std::reverse(b, b + sizeof(V));
    }
    return v;
}

template <class V>
void put(std::array<unsigned char, header_size>& h, int off, V v)
{
    std::memcpy(h.data() + off, &v, sizeof(V));
}

int bytes_per_voxel(DataType t)
{
    switch (t) {
    case DataType::uint8:
    case DataType::int8:
        return 1;
    case DataType::int16:
    case DataType::uint16:
        return 2;
    case DataType::int32:
    case DataType::uint32:
    case DataType::float32:
        return 4;
    case DataType::float64:
    case DataType::int64:
    case DataType::uint64:
        return 8;
    }
    throw std::runtime_error("unsupported NIfTI datatype " + std::to_string(static_cast<int>(t)));
}

template <class V>
void decode(const unsigned char* src, std::size_t count, bool swap, std::vector<double>& out)
{
    for (std::size_t i = 0; i < count; ++i) {
        V v;
        std::memcpy(&v, src + i * sizeof(V), sizeof(V));
        if (swap && sizeof(V) > 1) {
            auto* b = reinterpret_cast<unsigned char*>(&v);
            std::reverse(b, b + sizeof(V));
        }
        out[i] = static_cast<double>(v);
    }
}

void decode_any(DataType t, const unsigned char* src, std::size_t count, bool swap, std::vector<double>& out)
{
    switch (t) {
    case DataType::uint8: return decode<std::uint8_t>(src, count, swap, out);
    case DataType::int8: return decode<std::int8_t>(src, count, swap, out);
    case DataType::int16: return decode<std::int16_t>(src, count, swap, out);
    case DataType::uint16: return decode<std::uint16_t>(src, count, swap, out);
    case DataType::int32: return decode<std::int32_t>(src, count, swap, out);
    case DataType::uint32: return decode<std::uint32_t>(src, count, swap, out);
    case DataType::float32: return decode<float>(src, count, swap, out);
    case DataType::float64: return decode<double>(src, count, swap, out);
    case DataType::int64: return decode<std::int64_t>(src, count, swap, out);
    case DataType::uint64: return decode<std::uint64_t>(src, count, swap, out);
    }
}

} // namespace

RawImage read(const std::string& path)
{
    if (!std::filesystem::exists(path)) {
        throw std::runtime_error("missing file: " + path);
    }
    GzFile f(path, "rb");
    if (f.handle == nullptr) {
        throw std::runtime_error("cannot open " + path);
    }
    std::array<unsigned char, header_size> h{};
    if (gzread(f.handle, h.data(), header_size) != header_size) {
        throw std::runtime_error("unreadable format: truncated NIfTI header in " + path);
    }
    bool swap = false;
    if (get<std::int32_t>(h, off_sizeof_hdr, false) != header_size) {
        swap = true;
        if (get<std::int32_t>(h, off_sizeof_hdr, true) != header_size) {
            throw std::runtime_error("unreadable format: not a NIfTI-1 file: " + path);
        }
    }
    if (std::memcmp(h.data() + off_magic, "n+1", 4) != 0) {
        throw std::runtime_error("unreadable format: only single-file NIfTI-1 (n+1) is supported: " + path);
    }
    RawImage out;
    const int ndim = get<std::int16_t>(h, off_dim, swap);
    if (ndim < 1 || ndim > 7) {
        throw std::runtime_error("unreadable format: invalid dim[0] in " + path);
    }
    std::size_t count = 1;
    for (int i = 1; i <= ndim; ++i) {
        const int d = get<std::int16_t>(h, off_dim + 2 * i, swap);
        if (d < 1) {
            throw std::runtime_error("unreadable format: invalid dimension in " + path);
        }
        out.dims.push_back(d);
        count *= static_cast<std::size_t>(d);
    }
    out.datatype = static_cast<DataType>(get<std::int16_t>(h, off_datatype, swap));
    const int bpv = bytes_per_voxel(out.datatype);
    const auto vox_offset = static_cast<long>(get<float>(h, off_vox_offset, swap));
    if (vox_offset < header_size) {
        throw std::runtime_error("unreadable format: bad vox_offset in " + path);
    }
    std::vector<unsigned char> skip(static_cast<std::size_t>(vox_offset - header_size));
    if (!skip.empty() && gzread(f.handle, skip.data(), static_cast<unsigned>(skip.size())) != int(skip.size())) {
        throw std::runtime_error("unreadable format: truncated extension block in " + path);
    }
    std::vector<unsigned char> raw(count * bpv);
    std::size_t done = 0;
    while (done < raw.size()) {
        const auto chunk = static_cast<unsigned>(std::min<std::size_t>(raw.size() - done, 1u << 30));
        const int got = gzread(f.handle, raw.data() + done, chunk);
        if (got <= 0) {
            throw std::runtime_error("unreadable format: truncated voxel data in " + path);
        }
        done += static_cast<std::size_t>(got);
    }
    out.values.resize(count);
    decode_any(out.datatype, raw.data(), count, swap, out.values);
    const float slope = get<float>(h, off_scl_slope, swap);
    const float inter = get<float>(h, off_scl_inter, swap);
    if (slope != 0.0f && !(slope == 1.0f && inter == 0.0f)) {
        for (double& v : out.values) {
            v = v * slope + inter;
        }
    }
    return out;
}

template <class T>
void write(const std::string& path, const Image<T>& image, DataType type)
{
    static_assert(std::endian::native == std::endian::little);
    std::array<unsigned char, header_size> h{};
    const Dims s = image.dims();
    const bool vector_valued = image.channels() > 1;
    put<std::int32_t>(h, off_sizeof_hdr, header_size);
    const std::int16_t dim[8] = {static_cast<std::int16_t>(vector_valued ? 4 : 3),
                                 static_cast<std::int16_t>(s.d),
                                 static_cast<std::int16_t>(s.h),
                                 static_cast<std::int16_t>(s.w),
                                 static_cast<std::int16_t>(vector_valued ? image.channels() : 1),
                                 1,
                                 1,
                                 1};
    for (int i = 0; i < 8; ++i) {
        put<std::int16_t>(h, off_dim + 2 * i, dim[i]);
    }
    put<std::int16_t>(h, off_intent_code, static_cast<std::int16_t>(vector_valued ? 1007 : 0));
    put<std::int16_t>(h, off_datatype, static_cast<std::int16_t>(type));
    put<std::int16_t>(h, off_bitpix, static_cast<std::int16_t>(8 * bytes_per_voxel(type)));
    for (int i = 0; i < 8; ++i) {
        put<float>(h, off_pixdim + 4 * i, 1.0f);
    }
    put<float>(h, off_vox_offset, static_cast<float>(data_offset));
    put<float>(h, off_scl_slope, 1.0f);
    put<float>(h, off_scl_inter, 0.0f);
    h[off_xyzt_units] = 2; // millimetres
    const char* desc = vector_valued ? "displacement (voxels), 4th axis = component" : "cfreg";
    std::memcpy(h.data() + off_descrip, desc, std::min<std::size_t>(std::strlen(desc), 79));
    put<std::int16_t>(h, off_qform_code, 0);
    put<std::int16_t>(h, off_sform_code, 1);
    const float srow[12] = {1, 0, 0, 0, 0, 1, 0, 0, 0, 0, 1, 0};
    for (int i = 0; i < 12; ++i) {
        put<float>(h, off_srow_x + 4 * i, srow[i]);
    }
    std::memcpy(h.data() + off_magic, "n+1\0", 4);

    const bool gz = path.size() > 3 && path.compare(path.size() - 3, 3, ".gz") == 0;
    GzFile f(path, gz ? "wb6" : "wbT");
    if (f.handle == nullptr) {
        throw std::runtime_error("cannot write " + path);
    }
    const unsigned char ext[4] = {0, 0, 0, 0};
    if (gzwrite(f.handle, h.data(), header_size) != header_size || gzwrite(f.handle, ext, 4) != 4) {
        throw std::runtime_error("write failed: " + path);
    }

    const int bpv = bytes_per_voxel(type);
    std::vector<unsigned char> buf(static_cast<std::size_t>(s.h) * s.d * bpv);
    const auto emit = [&](double v, unsigned char* dst) {
        switch (type) {
        case DataType::uint8: { auto q = static_cast<std::uint8_t>(v); std::memcpy(dst, &q, 1); break; }
        case DataType::int8: { auto q = static_cast<std::int8_t>(v); std::memcpy(dst, &q, 1); break; }
        case DataType::int16: { auto q = static_cast<std::int16_t>(v); std::memcpy(dst, &q, 2); break; }
        case DataType::uint16: { auto q = static_cast<std::uint16_t>(v); std::memcpy(dst, &q, 2); break; }
        case DataType::int32: { auto q = static_cast<std::int32_t>(v); std::memcpy(dst, &q, 4); break; }
        case DataType::uint32: { auto q = static_cast<std::uint32_t>(v); std::memcpy(dst, &q, 4); break; }
        case DataType::float32: { auto q = static_cast<float>(v); std::memcpy(dst, &q, 4); break; }
        case DataType::float64: { std::memcpy(dst, &v, 8); break; }
        case DataType::int64: { auto q = static_cast<std::int64_t>(v); std::memcpy(dst, &q, 8); break; }
        case DataType::uint64: { auto q = static_cast<std::uint64_t>(v); std::memcpy(dst, &q, 8); break; }
        }
    };
    // One (j, i) plane per k keeps the buffer small while writing i-fastest.
    for (int c = 0; c < image.channels(); ++c) {
        for (int z = 0; z < s.w; ++z) {
            std::size_t o = 0;
            for (int y = 0; y < s.h; ++y) {
                for (int x = 0; x < s.d; ++x) {
                    emit(static_cast<double>(image.at(c, x, y, z)), buf.data() + o);
                    o += bpv;
                }
            }
            if (gzwrite(f.handle, buf.data(), static_cast<unsigned>(buf.size())) != int(buf.size())) {
                throw std::runtime_error("write failed: " + path);
            }
        }
    }
}

template void write<float>(const std::string&, const Image<float>&, DataType);
template void write<double>(const std::string&, const Image<double>&, DataType);
template void write<std::int32_t>(const std::string&, const Image<std::int32_t>&, DataType);

} // namespace cfreg::nifti
