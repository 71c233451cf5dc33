#pragma once

#include <iosfwd>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "fairproto/error.hpp"

namespace fairproto {

/// Exit codes: 0 success, 2 usage, 3 data/capacity, 4 numeric.
int exit_code_for(ErrorKind kind);

/// `key = value` lines; `#` starts a comment. Returns pairs in file order.
/// Throws UsageError naming the offending line.
std::vector<std::pair<std::string, std::string>> parse_config_text(std::string_view text);

/// Runs one command. `args` excludes the program name, e.g.
/// {"synth", "--classes", "7", "--out", "m.fpem"}.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace fairproto
