#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace pmlm {

// Library errors carry a message suitable for the CLI's stderr reporting.
class Error : public std::runtime_error {
public:
    explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

[[noreturn]] inline void fail(const std::string& msg) { throw Error(msg); }

inline void require(bool cond, const std::string& msg) {
    if (!cond) fail(msg);
}

}  // namespace pmlm
