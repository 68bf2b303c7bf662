#include "apnea/errors.hpp"

namespace apnea {

ParseError::ParseError(const std::string& file, std::size_t line, const std::string& what)
    : Error(file + ":" + std::to_string(line) + ": " + what), file_(file), line_(line) {}

} // namespace apnea
