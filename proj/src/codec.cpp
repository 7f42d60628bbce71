// Copyright 2026 The kvtier Authors
// SPDX-License-Identifier: Apache-2.0

#include "kvtier/codec.hpp"

#include <algorithm>
#include <cmath>

#include "kvtier/error.hpp"
#include "kvtier/fp16.hpp"

namespace kvtier {

size_t Int4BlockCodec::compressed_size(size_t n_halves) {
    return (n_halves + kGroup - 1) / kGroup * kGroupBytes;
}

double Int4BlockCodec::ratio(size_t n_halves) {
    if (n_halves == 0) return 1.0;
    return static_cast<double>(compressed_size(n_halves)) / static_cast<double>(2 * n_halves);
}

std::vector<uint8_t> Int4BlockCodec::compress(std::span<const uint16_t> halves) {
    std::vector<uint8_t> out(compressed_size(halves.size()), 0);
    uint8_t* p = out.data();
    for (size_t g = 0; g < halves.size(); g += kGroup, p += kGroupBytes) {
        const size_t len = std::min(kGroup, halves.size() - g);
        float lo = INFINITY;
        float hi = -INFINITY;
        for (size_t i = 0; i < len; ++i) {
            const float v = half_to_float(halves[g + i]);
            if (!std::isfinite(v)) continue;
            lo = std::min(lo, v);
            hi = std::max(hi, v);
        }
        if (lo > hi) lo = hi = 0.0f;
        const uint16_t lo_bits = float_to_half(lo);
        const uint16_t step_bits = float_to_half((hi - lo) / 15.0f);
        const float base = half_to_float(lo_bits);
        const float step = half_to_float(step_bits);
        p[0] = static_cast<uint8_t>(lo_bits);
        p[1] = static_cast<uint8_t>(lo_bits >> 8);
        p[2] = static_cast<uint8_t>(step_bits);
        p[3] = static_cast<uint8_t>(step_bits >> 8);
        for (size_t i = 0; i < len; ++i) {
            const float v = half_to_float(halves[g + i]);
            long q = 0;
            if (step > 0.0f && std::isfinite(v)) q = std::lround((v - base) / step);
            const uint8_t nibble = static_cast<uint8_t>(std::clamp(q, 0L, 15L));
            p[4 + i / 2] |= static_cast<uint8_t>(i % 2 == 0 ? nibble : nibble << 4);
        }
    }
    return out;
}

std::vector<uint16_t> Int4BlockCodec::decompress(std::span<const uint8_t> packed, size_t n_halves) {
    if (packed.size() != compressed_size(n_halves)) {
        throw CorruptionError("int4 payload holds " + std::to_string(packed.size()) + " bytes, expected " +
                              std::to_string(compressed_size(n_halves)));
    }
    std::vector<uint16_t> out(n_halves);
    const uint8_t* p = packed.data();
    for (size_t g = 0; g < n_halves; g += kGroup, p += kGroupBytes) {
        const float base = half_to_float(static_cast<uint16_t>(p[0] | (p[1] << 8)));
        const float step = half_to_float(static_cast<uint16_t>(p[2] | (p[3] << 8)));
        const size_t len = std::min(kGroup, n_halves - g);
        for (size_t i = 0; i < len; ++i) {
            const uint8_t byte = p[4 + i / 2];
            const uint8_t nibble = i % 2 == 0 ? (byte & 0x0F) : (byte >> 4);
            out[g + i] = float_to_half(base + step * nibble);
        }
    }
    return out;
}

}  // namespace kvtier
