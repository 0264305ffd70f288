#include "acd/container.hpp"

#include "acd/errors.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>

namespace acd {

namespace {

void put_u32(std::vector<unsigned char>& out, uint32_t v) {
    for (int i = 0; i < 4; ++i)
        out.push_back(static_cast<unsigned char>((v >> (8 * i)) & 0xffu));
}

void put_f32(std::vector<unsigned char>& out, float v) { put_u32(out, std::bit_cast<uint32_t>(v)); }

class ByteReader {
public:
    ByteReader(const std::vector<unsigned char>& bytes, std::string source)
        : bytes_(bytes), source_(std::move(source)) {}

    void need(size_t n, const std::string& what) const {
        if (pos_ + n > bytes_.size())
            throw DataError(source_ + ": truncated while reading " + what + " (need " + std::to_string(pos_ + n) +
                            " bytes, file has " + std::to_string(bytes_.size()) + ")");
    }
    uint32_t u32(const std::string& what) {
        need(4, what);
        uint32_t v = 0;
        for (int i = 0; i < 4; ++i)
            v |= static_cast<uint32_t>(bytes_[pos_ + static_cast<size_t>(i)]) << (8 * i);
        pos_ += 4;
        return v;
    }
    float f32(const std::string& what) { return std::bit_cast<float>(u32(what)); }
    std::string str(size_t n, const std::string& what) {
        need(n, what);
        std::string s(bytes_.begin() + static_cast<std::ptrdiff_t>(pos_),
                      bytes_.begin() + static_cast<std::ptrdiff_t>(pos_ + n));
        pos_ += n;
        return s;
    }
    size_t position() const { return pos_; }
    size_t remaining() const { return bytes_.size() - pos_; }
    const unsigned char* cursor() const { return bytes_.data() + pos_; }
    void skip(size_t n) { pos_ += n; }

private:
    const std::vector<unsigned char>& bytes_;
    std::string source_;
    size_t pos_ = 0;
};

void write_bytes(const std::vector<unsigned char>& bytes, const std::filesystem::path& path) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out)
        throw DataError("cannot open " + path.string() + " for writing");
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out)
        throw DataError("failed writing " + path.string());
}

std::vector<unsigned char> volume_header(int64_t h, int64_t w, int64_t d) {
    std::vector<unsigned char> out(kVolumeMagic.begin(), kVolumeMagic.end());
    put_u32(out, static_cast<uint32_t>(h));
    put_u32(out, static_cast<uint32_t>(w));
    put_u32(out, static_cast<uint32_t>(d));
    return out;
}

struct VolumeHeader {
    int64_t h, w, d;
};

VolumeHeader parse_volume_header(ByteReader& reader, const std::filesystem::path& path, size_t element_bytes,
                                 size_t file_bytes) {
    const auto magic = reader.str(4, "magic");
    if (magic != std::string(kVolumeMagic.begin(), kVolumeMagic.end()))
        throw DataError(path.string() + ": bad magic, expected \"ACD1\"");
    VolumeHeader hdr{reader.u32("height"), reader.u32("width"), reader.u32("depth")};
    if (hdr.h == 0 || hdr.w == 0 || hdr.d == 0)
        throw DataError(path.string() + ": zero dimension in header");
    const auto expected = kVolumeHeaderBytes + static_cast<size_t>(hdr.h * hdr.w * hdr.d) * element_bytes;
    if (file_bytes != expected)
        throw DataError(path.string() + ": expected " + std::to_string(expected) + " bytes, found " +
                        std::to_string(file_bytes));
    return hdr;
}

} // namespace

std::vector<unsigned char> read_file_bytes(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in)
        throw DataError("cannot open " + path.string());
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_volume(const Volume& volume, const std::filesystem::path& path) {
    auto bytes = volume_header(volume.height, volume.width, volume.depth);
    bytes.reserve(bytes.size() + volume.voxels.size() * 4);
    for (float v : volume.voxels)
        put_f32(bytes, v);
    write_bytes(bytes, path);
}

Volume read_volume(const std::filesystem::path& path) {
    const auto bytes = read_file_bytes(path);
    ByteReader reader(bytes, path.string());
    const auto hdr = parse_volume_header(reader, path, 4, bytes.size());
    Volume out(hdr.h, hdr.w, hdr.d);
    for (auto& v : out.voxels)
        v = reader.f32("voxels");
    return out;
}

void write_labels(const LabelVolume& labels, const std::filesystem::path& path) {
    auto bytes = volume_header(labels.height, labels.width, labels.depth);
    bytes.insert(bytes.end(), labels.labels.begin(), labels.labels.end());
    write_bytes(bytes, path);
}

LabelVolume read_labels(const std::filesystem::path& path) {
    const auto bytes = read_file_bytes(path);
    ByteReader reader(bytes, path.string());
    const auto hdr = parse_volume_header(reader, path, 1, bytes.size());
    LabelVolume out(hdr.h, hdr.w, hdr.d);
    std::memcpy(out.labels.data(), reader.cursor(), out.labels.size());
    return out;
}

void write_array_bundle(const std::vector<NamedArray>& arrays, const std::filesystem::path& path) {
    std::vector<unsigned char> bytes(kBundleMagic.begin(), kBundleMagic.end());
    put_u32(bytes, static_cast<uint32_t>(arrays.size()));
    for (const auto& a : arrays) {
        int64_t numel = 1;
        for (auto d : a.shape)
            numel *= d;
        if (numel != static_cast<int64_t>(a.values.size()))
            throw UsageError("array '" + a.name + "' shape does not match its payload");
        put_u32(bytes, static_cast<uint32_t>(a.name.size()));
        bytes.insert(bytes.end(), a.name.begin(), a.name.end());
        put_u32(bytes, static_cast<uint32_t>(a.shape.size()));
        for (auto d : a.shape)
            put_u32(bytes, static_cast<uint32_t>(d));
        for (float v : a.values)
            put_f32(bytes, v);
    }
    write_bytes(bytes, path);
}

std::vector<NamedArray> read_array_bundle(const std::filesystem::path& path) {
    const auto bytes = read_file_bytes(path);
    ByteReader reader(bytes, path.string());
    if (reader.str(4, "magic") != std::string(kBundleMagic.begin(), kBundleMagic.end()))
        throw DataError(path.string() + ": bad magic, expected \"ACKP\"");
    const auto count = reader.u32("array count");
    std::vector<NamedArray> arrays;
    arrays.reserve(count);
    for (uint32_t i = 0; i < count; ++i) {
        NamedArray a;
        const auto name_len = reader.u32("name length");
        a.name = reader.str(name_len, "array name");
        const auto rank = reader.u32("rank of " + a.name);
        size_t numel = 1;
        for (uint32_t r = 0; r < rank; ++r) {
            a.shape.push_back(reader.u32("shape of " + a.name));
            numel *= static_cast<size_t>(a.shape.back());
        }
        reader.need(numel * 4, "payload of " + a.name);
        a.values.resize(numel);
        for (auto& v : a.values)
            v = reader.f32(a.name);
        arrays.push_back(std::move(a));
    }
    if (reader.remaining() != 0)
        throw DataError(path.string() + ": trailing bytes after last array");
    return arrays;
}

} // namespace acd
