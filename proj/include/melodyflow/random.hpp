#pragma once

#include <cstdint>
#include <initializer_list>
#include <random>
#include <string_view>

#include "melodyflow/autodiff.hpp"

namespace melodyflow {

using Rng = std::mt19937_64;

/// Independent stream keyed by (seed, key...). Streams with different keys are
/// decorrelated through std::seed_seq.
Rng make_rng(std::uint64_t seed, std::initializer_list<std::uint64_t> keys = {});

std::uint64_t derive_seed(std::uint64_t seed, std::initializer_list<std::uint64_t> keys);

/// FNV-1a over the bytes of `text`.
std::uint64_t hash_string(std::string_view text);

Matrix standard_normal(Eigen::Index rows, Eigen::Index cols, Rng& rng);

double uniform01(Rng& rng);

}  // namespace melodyflow
