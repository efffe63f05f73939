#pragma once

#include <string>

#include <spdlog/spdlog.h>

namespace tsda {

/// Routes the default spdlog logger to stderr and sets its level from
/// TSDA_LOG (quiet | info | debug). Unset means info; anything else throws.
void configure_logging();

/// Same, with an explicit level name.
void configure_logging(const std::string& level);

}  // namespace tsda
