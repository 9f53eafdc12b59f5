#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "mvcd/tensor.hpp"

namespace mvcd {

struct CheckResult {
  std::string name;
  bool passed = false;
  std::string detail;
};

/// ||a - b|| / max(||a||, ||b||); 0 when both are zero.
double relative_error(const Tensor& analytic, const Tensor& numeric);

/// Gradient checks against finite differences and the loss identities.
std::vector<CheckResult> run_selfcheck(std::uint64_t seed = 2024, std::size_t instances = 20);

}  // namespace mvcd
