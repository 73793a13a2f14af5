#pragma once

#include <cstdint>

namespace micronet {

/// Tallies multiply-accumulate operations actually executed by the conv and
/// fully-connected kernels. Kernels report counts derived from the loop bounds
/// they ran with (padded taps are executed as multiplies by zero), so the
/// tally matches the analytic model exactly when both describe the same run.
struct MaddsProbe {
  std::uint64_t conv = 0;
  std::uint64_t fc = 0;

  std::uint64_t total() const { return conv + fc; }
  void reset() { conv = fc = 0; }
};

}  // namespace micronet
