#include "tsda/logging.hpp"

#include <cstdlib>
#include <stdexcept>

#include <spdlog/sinks/stdout_sinks.h>

namespace tsda {

void configure_logging(const std::string& level) {
  spdlog::level::level_enum lv;
  if (level == "quiet") lv = spdlog::level::err;
  else if (level == "info" || level.empty()) lv = spdlog::level::info;
  else if (level == "debug") lv = spdlog::level::debug;
  else throw std::invalid_argument("TSDA_LOG must be quiet, info or debug, got '" + level + "'");
  static bool installed = false;
  if (!installed) {
    auto logger = spdlog::stderr_logger_mt("tsda");
    logger->set_pattern("[%l] %v");
    spdlog::set_default_logger(logger);
    installed = true;
  }
  spdlog::set_level(lv);
}

void configure_logging() {
  const char* env = std::getenv("TSDA_LOG");
  configure_logging(env ? std::string(env) : std::string());
}

}  // namespace tsda
