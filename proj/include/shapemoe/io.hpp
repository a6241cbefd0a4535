// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <bit>
#include <cstdint>
#include <istream>
#include <ostream>
#include <string>

#include "shapemoe/errors.hpp"

namespace shapemoe {

static_assert(std::endian::native == std::endian::little,
              "file formats assume a little-endian host");

namespace detail {

inline void put_bytes(std::ostream& os, const void* p, size_t n) {
    os.write(static_cast<const char*>(p), std::streamsize(n));
}

template <typename T>
void put_le(std::ostream& os, T v) {
    put_bytes(os, &v, sizeof(T));
}

// Tracks the byte offset so truncation errors can name where the file ended.
struct ByteReader {
    std::istream& is;
    size_t offset = 0;

    void read(void* p, size_t n) {
        is.read(static_cast<char*>(p), std::streamsize(n));
        if (size_t(is.gcount()) != n)
            throw FormatError("truncated file at byte offset " + std::to_string(offset));
        offset += n;
    }

    template <typename T>
    T get() {
        T v;
        read(&v, sizeof(T));
        return v;
    }
};

}  // namespace detail
}  // namespace shapemoe
