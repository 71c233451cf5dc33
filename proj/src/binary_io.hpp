#pragma once

// Little-endian framing shared by the manifest and checkpoint formats.

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <istream>
#include <limits>
#include <ostream>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "fairproto/error.hpp"

namespace fairproto::detail {

class ByteWriter {
public:
    explicit ByteWriter(std::ostream& sink) : sink_(sink) {}

    std::uint64_t bytes_written() const { return written_; }

    void raw(const char* data, std::size_t n) {
        sink_.write(data, static_cast<std::streamsize>(n));
        if (!sink_) {
            throw IoError("write failed after " + std::to_string(written_) + " bytes", written_);
        }
        written_ += n;
    }

    void u8(std::uint8_t v) { put_le(v); }
    void u16(std::uint16_t v) { put_le(v); }
    void u32(std::uint32_t v) { put_le(v); }
    void u64(std::uint64_t v) { put_le(v); }
    void f32(float v) { put_le(std::bit_cast<std::uint32_t>(v)); }
    void f64(double v) { put_le(std::bit_cast<std::uint64_t>(v)); }

    void str16(std::string_view s) {
        if (s.size() > std::numeric_limits<std::uint16_t>::max()) {
            throw ValidationError("string longer than 65535 bytes: '" + std::string(s.substr(0, 32)) +
                                  "...'");
        }
        u16(static_cast<std::uint16_t>(s.size()));
        raw(s.data(), s.size());
    }

    void f32_array(std::span<const float> values) {
        buffer_.resize(values.size() * 4);
        for (std::size_t i = 0; i < values.size(); ++i) {
            encode(buffer_.data() + 4 * i, std::bit_cast<std::uint32_t>(values[i]));
        }
        raw(buffer_.data(), buffer_.size());
    }

    void f64_array(std::span<const double> values) {
        buffer_.resize(values.size() * 8);
        for (std::size_t i = 0; i < values.size(); ++i) {
            encode(buffer_.data() + 8 * i, std::bit_cast<std::uint64_t>(values[i]));
        }
        raw(buffer_.data(), buffer_.size());
    }

private:
    template <typename T>
    static void encode(char* out, T v) {
        for (std::size_t i = 0; i < sizeof(T); ++i) {
            out[i] = static_cast<char>((v >> (8 * i)) & 0xFF);
        }
    }

    template <typename T>
    void put_le(T v) {
        std::array<char, sizeof(T)> bytes{};
        encode(bytes.data(), v);
        raw(bytes.data(), bytes.size());
    }

    std::ostream& sink_;
    std::uint64_t written_ = 0;
    std::vector<char> buffer_;
};

class ByteReader {
public:
    explicit ByteReader(std::istream& source) : source_(source) {}

    std::uint64_t offset() const { return offset_; }

    void raw(char* out, std::size_t n, const char* what) {
        source_.read(out, static_cast<std::streamsize>(n));
        auto got = static_cast<std::uint64_t>(source_.gcount());
        if (got != n) {
            throw CorruptionError(std::string("truncated stream while reading ") + what, offset_ + got);
        }
        offset_ += n;
    }

    std::uint8_t u8(const char* what) { return get_le<std::uint8_t>(what); }
    std::uint16_t u16(const char* what) { return get_le<std::uint16_t>(what); }
    std::uint32_t u32(const char* what) { return get_le<std::uint32_t>(what); }
    std::uint64_t u64(const char* what) { return get_le<std::uint64_t>(what); }
    double f64(const char* what) { return std::bit_cast<double>(get_le<std::uint64_t>(what)); }

    std::string str16(const char* what) {
        std::uint16_t len = u16(what);
        std::string s(len, '\0');
        if (len > 0) raw(s.data(), len, what);
        return s;
    }

    void f32_array(std::span<float> out, const char* what) {
        buffer_.resize(out.size() * 4);
        raw(buffer_.data(), buffer_.size(), what);
        for (std::size_t i = 0; i < out.size(); ++i) {
            out[i] = std::bit_cast<float>(decode<std::uint32_t>(buffer_.data() + 4 * i));
        }
    }

    void f64_array(std::span<double> out, const char* what) {
        buffer_.resize(out.size() * 8);
        raw(buffer_.data(), buffer_.size(), what);
        for (std::size_t i = 0; i < out.size(); ++i) {
            out[i] = std::bit_cast<double>(decode<std::uint64_t>(buffer_.data() + 8 * i));
        }
    }

    bool at_end() { return source_.peek() == std::char_traits<char>::eof(); }

private:
    template <typename T>
    static T decode(const char* in) {
        T v = 0;
        for (std::size_t i = 0; i < sizeof(T); ++i) {
            v |= static_cast<T>(static_cast<T>(static_cast<unsigned char>(in[i])) << (8 * i));
        }
        return v;
    }

    template <typename T>
    T get_le(const char* what) {
        std::array<char, sizeof(T)> bytes{};
        raw(bytes.data(), bytes.size(), what);
        return decode<T>(bytes.data());
    }

    std::istream& source_;
    std::uint64_t offset_ = 0;
    std::vector<char> buffer_;
};

}  // namespace fairproto::detail
