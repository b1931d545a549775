#pragma once

// Little-endian binary stream helpers shared by the RV01/NDT1/LAT1/OCS1 containers.

#include <bit>
#include <cstdint>
#include <cstring>
#include <istream>
#include <ostream>
#include <span>
#include <string>
#include <string_view>
#include <type_traits>
#include <vector>

#include "petsynth/common/error.hpp"

namespace petsynth::binio {

template <class T>
T byteswap_if_needed(T v) {
    static_assert(std::is_trivially_copyable_v<T>);
    if constexpr (std::endian::native == std::endian::little || sizeof(T) == 1) {
        return v;
    } else {
        unsigned char bytes[sizeof(T)];
        std::memcpy(bytes, &v, sizeof(T));
        for (size_t i = 0; i < sizeof(T) / 2; ++i) std::swap(bytes[i], bytes[sizeof(T) - 1 - i]);
        std::memcpy(&v, bytes, sizeof(T));
        return v;
    }
}

class Writer {
public:
    explicit Writer(std::ostream &os) : os_(os) {}

    void magic(std::string_view m) { os_.write(m.data(), static_cast<std::streamsize>(m.size())); }

    template <class T>
    void put(T v) {
        v = byteswap_if_needed(v);
        os_.write(reinterpret_cast<const char *>(&v), sizeof(T));
    }

    template <class T>
    void put_span(std::span<const T> vs) {
        if constexpr (std::endian::native == std::endian::little) {
            os_.write(reinterpret_cast<const char *>(vs.data()), static_cast<std::streamsize>(vs.size_bytes()));
        } else {
            for (T v : vs) put(v);
        }
    }

    void put_string(const std::string &s) {
        put<std::uint32_t>(static_cast<std::uint32_t>(s.size()));
        os_.write(s.data(), static_cast<std::streamsize>(s.size()));
    }

    bool ok() const { return static_cast<bool>(os_); }

private:
    std::ostream &os_;
};

class Reader {
public:
    Reader(std::istream &is, std::string context) : is_(is), context_(std::move(context)) {}

    void expect_magic(std::string_view m) {
        std::string got(m.size(), '\0');
        is_.read(got.data(), static_cast<std::streamsize>(m.size()));
        if (is_.gcount() != static_cast<std::streamsize>(m.size()) || got != m) {
            throw FormatError(FormatErrorKind::BadMagic, context_ + ": bad magic (expected \"" + std::string(m) + "\")");
        }
    }

    template <class T>
    T get() {
        T v{};
        read_bytes(reinterpret_cast<char *>(&v), sizeof(T));
        return byteswap_if_needed(v);
    }

    template <class T>
    void get_into(std::span<T> out) {
        read_bytes(reinterpret_cast<char *>(out.data()), out.size_bytes());
        if constexpr (std::endian::native != std::endian::little) {
            for (auto &v : out) v = byteswap_if_needed(v);
        }
    }

    std::string get_string(std::uint32_t max_len = 1u << 16) {
        const auto n = get<std::uint32_t>();
        if (n > max_len) throw FormatError(FormatErrorKind::Malformed, context_ + ": string length out of range");
        std::string s(n, '\0');
        read_bytes(s.data(), n);
        return s;
    }

    // True when the stream has no bytes left.
    bool at_end() { return is_.peek() == std::char_traits<char>::eof(); }

    const std::string &context() const { return context_; }

private:
    void read_bytes(char *dst, size_t n) {
        is_.read(dst, static_cast<std::streamsize>(n));
        if (static_cast<size_t>(is_.gcount()) != n) {
            throw FormatError(FormatErrorKind::TruncatedPayload, context_ + ": truncated payload");
        }
    }

    std::istream &is_;
    std::string context_;
};

} // namespace petsynth::binio
