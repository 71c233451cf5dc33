#include "fairproto/rng.hpp"

#include "fairproto/error.hpp"

namespace fairproto {

std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9E3779B97F4A7C15ULL;
    x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
    x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
    return x ^ (x >> 31);
}

std::uint64_t derive_seed(std::uint64_t base, std::string_view stream, std::uint64_t index) {
    // FNV-1a over the stream name
    std::uint64_t h = 0xCBF29CE484222325ULL;
    for (unsigned char c : stream) {
        h ^= c;
        h *= 0x100000001B3ULL;
    }
    return splitmix64(splitmix64(base ^ h) + splitmix64(index ^ 0xD1B54A32D192ED03ULL));
}

const char* to_string(ErrorKind kind) {
    switch (kind) {
        case ErrorKind::shape: return "shape error";
        case ErrorKind::format: return "format error";
        case ErrorKind::corruption: return "corruption error";
        case ErrorKind::validation: return "validation error";
        case ErrorKind::capacity: return "capacity error";
        case ErrorKind::numeric: return "numeric error";
        case ErrorKind::io: return "I/O error";
        case ErrorKind::range: return "range error";
        case ErrorKind::usage: return "usage error";
    }
    return "error";
}

}  // namespace fairproto
