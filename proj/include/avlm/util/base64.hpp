#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace avlm {

inline std::string base64_encode(const void* data, size_t len) {
    static const char tbl[] = "ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789+/";
    const auto* p = static_cast<const unsigned char*>(data);
    std::string out;
    out.reserve((len + 2) / 3 * 4);
    size_t i = 0;
    for (; i + 3 <= len; i += 3) {
        uint32_t v = (uint32_t(p[i]) << 16) | (uint32_t(p[i + 1]) << 8) | p[i + 2];
        out += tbl[(v >> 18) & 63];
        out += tbl[(v >> 12) & 63];
        out += tbl[(v >> 6) & 63];
        out += tbl[v & 63];
    }
    if (i + 1 == len) {
        uint32_t v = uint32_t(p[i]) << 16;
        out += tbl[(v >> 18) & 63];
        out += tbl[(v >> 12) & 63];
        out += "==";
    } else if (i + 2 == len) {
        uint32_t v = (uint32_t(p[i]) << 16) | (uint32_t(p[i + 1]) << 8);
        out += tbl[(v >> 18) & 63];
        out += tbl[(v >> 12) & 63];
        out += tbl[(v >> 6) & 63];
        out += '=';
    }
    return out;
}

inline std::vector<unsigned char> base64_decode(const std::string& s) {
    auto val = [](char c) -> int {
        if (c >= 'A' && c <= 'Z') return c - 'A';
        if (c >= 'a' && c <= 'z') return c - 'a' + 26;
        if (c >= '0' && c <= '9') return c - '0' + 52;
        if (c == '+') return 62;
        if (c == '/') return 63;
        if (c == '=') return -1;
        throw std::invalid_argument("base64_decode: invalid character");
    };
    if (s.size() % 4 != 0) throw std::invalid_argument("base64_decode: length not multiple of 4");
    std::vector<unsigned char> out;
    out.reserve(s.size() / 4 * 3);
    for (size_t i = 0; i < s.size(); i += 4) {
        int a = val(s[i]), b = val(s[i + 1]), c = val(s[i + 2]), d = val(s[i + 3]);
        if (a < 0 || b < 0) throw std::invalid_argument("base64_decode: bad padding");
        uint32_t v = (uint32_t(a) << 18) | (uint32_t(b) << 12);
        out.push_back(static_cast<unsigned char>((v >> 16) & 0xff));
        if (c >= 0) {
            v |= uint32_t(c) << 6;
            out.push_back(static_cast<unsigned char>((v >> 8) & 0xff));
        }
        if (d >= 0) {
            if (c < 0) throw std::invalid_argument("base64_decode: bad padding");
            v |= uint32_t(d);
            out.push_back(static_cast<unsigned char>(v & 0xff));
        }
    }
    return out;
}

}  // namespace avlm
