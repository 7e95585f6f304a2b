#pragma once

#include <iosfwd>
#include <string>
#include <string_view>
#include <vector>

#include "expredit/core.hpp"

namespace expredit {

/// Environment variable naming the config file used when --config is absent.
inline constexpr const char* kConfigEnvVar = "EXPREDIT_CONFIG";

/// Applies "AU12=5,AU25=2.5" on top of `base`. Values outside [0, 5] are clamped
/// and reported through `warnings`. Unknown names and non-numeric values throw.
AUVector parse_au_override(std::string_view spec, const AUVector& base, std::vector<std::string>* warnings = nullptr);

/// Runs one command. Returns 0 on success, 1 on domain errors, 2 on usage errors.
int dispatch(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace expredit
