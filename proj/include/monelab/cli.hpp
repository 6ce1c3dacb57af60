#pragma once

#include <string>
#include <vector>

namespace monelab {

// Entry point behind the monelab binary. Takes the argument list without the
// program name and returns the process exit status:
//   0 success, 2 usage error, 3 config/validation error, 4 numeric divergence.
int dispatch(const std::vector<std::string>& args);

}  // namespace monelab
