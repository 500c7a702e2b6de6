#pragma once

#include <cstdint>
#include <cstring>
#include <istream>
#include <ostream>
#include <string>
#include <type_traits>
#include <vector>

#include "mixmfl/error.hpp"

namespace mixmfl {

// Raw host-order binary streams for dataset and checkpoint files.
class BinaryWriter {
public:
    explicit BinaryWriter(std::ostream& os) : os_(os) {}

    template <typename T>
        requires std::is_arithmetic_v<T>
    void put(T v) {
        os_.write(reinterpret_cast<const char*>(&v), sizeof v);
        check();
    }

    void put_string(const std::string& s) {
        put<std::uint64_t>(s.size());
        os_.write(s.data(), static_cast<std::streamsize>(s.size()));
        check();
    }

    template <typename T>
        requires std::is_arithmetic_v<T>
    void put_vector(const std::vector<T>& v) {
        put<std::uint64_t>(v.size());
        os_.write(reinterpret_cast<const char*>(v.data()), static_cast<std::streamsize>(v.size() * sizeof(T)));
        check();
    }

    void put_magic(const char (&magic)[5]) {
        os_.write(magic, 4);
        check();
    }

private:
    void check() {
        if (!os_) fail(ErrorKind::IoError, "write failed");
    }
    std::ostream& os_;
};

class BinaryReader {
public:
    explicit BinaryReader(std::istream& is) : is_(is) {}

    template <typename T>
        requires std::is_arithmetic_v<T>
    T get() {
        T v{};
        is_.read(reinterpret_cast<char*>(&v), sizeof v);
        check();
        return v;
    }

    std::string get_string() {
        auto n = get<std::uint64_t>();
        if (n > (1ull << 32)) fail(ErrorKind::IoError, "implausible string length");
        std::string s(n, '\0');
        is_.read(s.data(), static_cast<std::streamsize>(n));
        check();
        return s;
    }

    template <typename T>
        requires std::is_arithmetic_v<T>
    std::vector<T> get_vector() {
        auto n = get<std::uint64_t>();
        if (n > (1ull << 34) / sizeof(T)) fail(ErrorKind::IoError, "implausible vector length");
        std::vector<T> v(n);
        is_.read(reinterpret_cast<char*>(v.data()), static_cast<std::streamsize>(n * sizeof(T)));
        check();
        return v;
    }

    void expect_magic(const char (&magic)[5]) {
        char buf[4];
        is_.read(buf, 4);
        check();
        if (std::memcmp(buf, magic, 4) != 0) fail(ErrorKind::IoError, std::string("bad file magic, expected ") + magic);
    }

private:
    void check() {
        if (!is_) fail(ErrorKind::IoError, "unexpected end of file");
    }
    std::istream& is_;
};

/// splitmix64 finalizer, used to derive independent seeds from tuples.
inline std::uint64_t mix_seed(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ull;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
    return x ^ (x >> 31);
}

template <typename... Rest>
inline std::uint64_t derive_seed(std::uint64_t base, Rest... rest) {
    std::uint64_t h = mix_seed(base);
    ((h = mix_seed(h ^ static_cast<std::uint64_t>(rest))), ...);
    return h;
}

}  // namespace mixmfl
