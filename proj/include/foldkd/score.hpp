#pragma once

namespace foldkd {

// (s_t - s_0) / (s_opt - s_0): 0 at the initial configuration, 1 at the
// optimum. Throws DegenerateTaskError when s_opt == s_0.
double normalized_performance(double s_t, double s_0, double s_opt);

}  // namespace foldkd
