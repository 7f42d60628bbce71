// Copyright 2026 The kvtier Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <string_view>

namespace kvtier {

/// Half-open interval [start, end) of token positions.
struct TokenRange {
    uint32_t start = 0;
    uint32_t end = 0;

    constexpr uint32_t size() const { return end - start; }
    constexpr bool empty() const { return end <= start; }
    constexpr bool contains(uint32_t token) const { return token >= start && token < end; }
    constexpr bool operator==(const TokenRange&) const = default;
};

std::string to_string(TokenRange range);

/// Storage level of a chunk's KV data. Hot is the GPU-role tier, warm the
/// CPU-role tier and cold the file-backed tier.
enum class Tier : uint8_t { kHot = 0, kWarm = 1, kCold = 2 };

std::string_view to_string(Tier tier);

/// Read-only view of a row-major [rows x dim] float matrix.
class FloatRows {
public:
    FloatRows() = default;
    FloatRows(std::span<const float> data, size_t rows, size_t dim) : data_(data), rows_(rows), dim_(dim) {}

    size_t rows() const { return rows_; }
    size_t dim() const { return dim_; }
    std::span<const float> row(size_t i) const { return data_.subspan(i * dim_, dim_); }
    std::span<const float> data() const { return data_; }

private:
    std::span<const float> data_;
    size_t rows_ = 0;
    size_t dim_ = 0;
};

}  // namespace kvtier
