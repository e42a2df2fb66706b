#include "foldkd/score.hpp"

#include <string>

#include "foldkd/errors.hpp"

namespace foldkd {

double normalized_performance(double s_t, double s_0, double s_opt) {
  if (s_opt == s_0) {
    throw DegenerateTaskError("normalized performance undefined: s_opt == s_0 == " +
                              std::to_string(s_0));
  }
  return (s_t - s_0) / (s_opt - s_0);
}

}  // namespace foldkd
