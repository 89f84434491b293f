// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <iosfwd>
#include <span>
#include <string>

namespace lora_audit {

/// Environment variable naming the default output directory.
inline constexpr const char* kOutputDirEnv = "LORA_AUDIT_OUT";

/// Entry point of the `lora_audit` tool. Returns the process exit code; diagnostics go to
/// `err`, progress lines to `out`.
int runCommand(std::span<const std::string> args, std::ostream& out, std::ostream& err);

}  // namespace lora_audit
