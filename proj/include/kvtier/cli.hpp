// Copyright 2026 The kvtier Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <iosfwd>

namespace kvtier {

inline constexpr int kExitOk = 0;
inline constexpr int kExitFindings = 1;
inline constexpr int kExitUsage = 2;

/// Entry point of the kvtier tool. Returns 0 on success, 1 on validation
/// findings or runtime failure, 2 on usage errors.
int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace kvtier
