#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace bags {

std::string read_file(const std::filesystem::path& path);
/// Writes to a sibling temporary file, then renames it over `path`.
void write_file_atomic(const std::filesystem::path& path, std::string_view bytes);

std::string base64_encode(std::span<const std::uint8_t> bytes);
std::vector<std::uint8_t> base64_decode(std::string_view text);

std::uint32_t crc32_of(std::string_view bytes);

/// Little-endian append-only byte buffer.
class ByteWriter {
  public:
    void bytes(std::string_view raw) { out_.append(raw); }
    void u32(std::uint32_t v) { put(v); }
    void u64(std::uint64_t v) { put(v); }
    void f32(float v) { put(v); }
    void f64(double v) { put(v); }
    void f64s(std::span<const double> values) {
        for (double v : values) {
            put(v);
        }
    }
    void string(std::string_view s) {
        u64(s.size());
        out_.append(s);
    }
    const std::string& buffer() const noexcept { return out_; }
    std::string take() { return std::move(out_); }

  private:
    template <typename T> void put(T v) {
        static_assert(std::endian::native == std::endian::little, "little-endian host required");
        char raw[sizeof(T)];
        std::memcpy(raw, &v, sizeof(T));
        out_.append(raw, sizeof(T));
    }
    std::string out_;
};

/// Bounds-checked reader over a byte buffer; throws FormatError on truncation.
class ByteReader {
  public:
    explicit ByteReader(std::string_view data) : data_(data) {}

    std::string_view bytes(std::size_t n);
    std::uint32_t u32() { return get<std::uint32_t>(); }
    std::uint64_t u64() { return get<std::uint64_t>(); }
    float f32() { return get<float>(); }
    double f64() { return get<double>(); }
    std::vector<double> f64s(std::size_t n);
    std::string string();
    std::size_t remaining() const noexcept { return data_.size() - pos_; }
    std::size_t position() const noexcept { return pos_; }

  private:
    template <typename T> T get() {
        T v;
        std::memcpy(&v, bytes(sizeof(T)).data(), sizeof(T));
        return v;
    }
    std::string_view data_;
    std::size_t pos_ = 0;
};

} // namespace bags
