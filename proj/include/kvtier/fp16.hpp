// Copyright 2026 The kvtier Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>

namespace kvtier {

/// IEEE binary16 conversion, round to nearest even.
uint16_t float_to_half(float value);
float half_to_float(uint16_t bits);

}  // namespace kvtier
