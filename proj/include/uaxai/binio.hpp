#pragma once

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <string_view>
#include <vector>

#include "uaxai/common.hpp"

namespace uaxai::binio {

// Little-endian writer over an ofstream. Values are byte-ordered explicitly so
// files are identical on any host.
class Writer {
public:
    explicit Writer(const std::filesystem::path& path) : path_(path), out_(path, std::ios::binary | std::ios::trunc) {
        if (!out_) throw IoError("cannot open for writing: " + path.string());
    }

    template <typename T>
    void put(T value) {
        static_assert(std::is_integral_v<T> || std::is_floating_point_v<T>);
        using U = std::conditional_t<sizeof(T) == 2, std::uint16_t,
                                     std::conditional_t<sizeof(T) == 4, std::uint32_t, std::uint64_t>>;
        U raw;
        if constexpr (sizeof(T) == 1) {
            out_.put(static_cast<char>(value));
            return;
        } else {
            raw = std::bit_cast<U>(value);
        }
        std::array<char, sizeof(U)> bytes{};
        for (std::size_t i = 0; i < sizeof(U); ++i) bytes[i] = static_cast<char>((raw >> (8 * i)) & 0xFF);
        out_.write(bytes.data(), bytes.size());
    }

    void put_f32(double v) { put(static_cast<float>(v)); }

    void put_f32s(const std::vector<double>& values) {
        for (double v : values) put_f32(v);
    }

    void put_bytes(std::string_view bytes) { out_.write(bytes.data(), static_cast<std::streamsize>(bytes.size())); }

    void put_string(std::string_view s) {
        put(static_cast<std::uint32_t>(s.size()));
        put_bytes(s);
    }

    void close() {
        out_.close();
        if (!out_) throw IoError("write failed: " + path_.string());
    }

    ~Writer() = default;

private:
    std::filesystem::path path_;
    std::ofstream out_;
};

class Reader {
public:
    explicit Reader(const std::filesystem::path& path) : path_(path), in_(path, std::ios::binary) {
        if (!in_) throw IoError("cannot open for reading: " + path.string());
    }

    template <typename T>
    T get() {
        static_assert(std::is_integral_v<T> || std::is_floating_point_v<T>);
        if constexpr (sizeof(T) == 1) {
            char c;
            read(&c, 1);
            return static_cast<T>(c);
        } else {
            using U = std::conditional_t<sizeof(T) == 2, std::uint16_t,
                                         std::conditional_t<sizeof(T) == 4, std::uint32_t, std::uint64_t>>;
            std::array<unsigned char, sizeof(U)> bytes{};
            read(reinterpret_cast<char*>(bytes.data()), bytes.size());
            U raw = 0;
            for (std::size_t i = 0; i < sizeof(U); ++i) raw |= static_cast<U>(bytes[i]) << (8 * i);
            return std::bit_cast<T>(raw);
        }
    }

    double get_f32() { return static_cast<double>(get<float>()); }

    std::vector<double> get_f32s(std::size_t n) {
        std::vector<double> v(n);
        for (auto& x : v) x = get_f32();
        return v;
    }

    std::string get_bytes(std::size_t n) {
        std::string s(n, '\0');
        read(s.data(), n);
        return s;
    }

    std::string get_string() { return get_bytes(get<std::uint32_t>()); }

    void expect_magic(std::string_view magic) {
        if (get_bytes(magic.size()) != magic)
            throw IoError("bad magic in " + path_.string() + " (expected " + std::string(magic) + ")");
    }

    bool at_end() { return in_.peek() == std::char_traits<char>::eof(); }

    const std::filesystem::path& path() const { return path_; }

private:
    void read(char* dst, std::size_t n) {
        in_.read(dst, static_cast<std::streamsize>(n));
        if (static_cast<std::size_t>(in_.gcount()) != n) throw IoError("truncated file: " + path_.string());
    }

    std::filesystem::path path_;
    std::ifstream in_;
};

}  // namespace uaxai::binio
