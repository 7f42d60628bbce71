// Copyright 2026 The kvtier Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

namespace kvtier {

/// Lossy 4-bit block codec over fp16 payloads. Each group of 32 halves is
/// stored as an fp16 minimum, an fp16 step and 16 bytes of nibbles, so full
/// groups shrink to 20/64 of their size. Only the byte count matters to the
/// transfer model; reconstruction is approximate.
class Int4BlockCodec {
public:
    static constexpr size_t kGroup = 32;
    static constexpr size_t kGroupBytes = 4 + kGroup / 2;

    static size_t compressed_size(size_t n_halves);
    /// compressed / original for a payload of n_halves fp16 values.
    static double ratio(size_t n_halves);

    static std::vector<uint8_t> compress(std::span<const uint16_t> halves);
    static std::vector<uint16_t> decompress(std::span<const uint8_t> packed, size_t n_halves);
};

}  // namespace kvtier
