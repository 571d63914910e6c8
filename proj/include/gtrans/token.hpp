#pragma once

#include <cstdint>
#include <vector>

#include "gtrans/errors.hpp"

namespace gtrans {

using TokenId = std::int32_t;

constexpr TokenId kPadId = 0;
constexpr TokenId kBosId = 1;
constexpr TokenId kEosId = 2;
constexpr TokenId kUnkId = 3;

// Dense row-major matrix of token ids (batch x time).
struct TokenMatrix {
    int rows = 0;
    int cols = 0;
    std::vector<TokenId> v;

    TokenMatrix() = default;
    TokenMatrix(int r, int c, TokenId fill = 0)
        : rows(r), cols(c), v(static_cast<std::size_t>(r) * c, fill) {
        if (r <= 0 || c <= 0) throw DimensionError("token matrix extents must be positive");
    }

    TokenId& at(int r, int c) { return v[static_cast<std::size_t>(r) * cols + c]; }
    TokenId at(int r, int c) const { return v[static_cast<std::size_t>(r) * cols + c]; }
};

// Row-major boolean mask; nonzero means "attendable".
struct ByteMask {
    std::vector<int> shape;
    std::vector<std::uint8_t> v;

    ByteMask() = default;
    explicit ByteMask(std::vector<int> s, std::uint8_t fill = 1) : shape(std::move(s)) {
        std::size_t n = 1;
        for (int d : shape) {
            if (d <= 0) throw DimensionError("mask extents must be positive");
            n *= static_cast<std::size_t>(d);
        }
        v.assign(n, fill);
    }
};

}  // namespace gtrans
