// Copyright 2026 The maskdiff Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <vector>

#include <Eigen/Core>

namespace maskdiff {

/// Storage handed to Eigen. Eigen peels a scalar prologue up to the first
/// aligned packet, and scalar and packet paths round differently (exp, FMA),
/// so an allocation whose alignment drifts between runs makes training
/// results depend on heap state. Fixing the alignment of every buffer keeps
/// them bit-reproducible.
template <typename T>
using AlignedVector = std::vector<T, Eigen::aligned_allocator<T>>;

}  // namespace maskdiff
