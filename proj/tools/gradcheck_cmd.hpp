#pragma once

#include <cstdint>
#include <string>
#include <vector>

// Finite-difference verification of every learnable op, in 64-bit. Prints
// one line per op with its max relative error; returns nonzero if any op
// exceeds 1e-4. A non-empty fault name perturbs that op's analytic gradient
// so its own check fails, exercising the failure path end to end.
int run_gradcheck(std::uint64_t seed, const std::string& fault);

std::vector<std::string> gradcheck_op_names();
