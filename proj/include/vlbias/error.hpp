#pragma once

#include <stdexcept>
#include <string>

namespace vlbias {

// Error categories double as CLI exit codes.
enum class ErrorKind {
    usage = 1,
    data = 2,
    numerical = 3,
};

class Error : public std::runtime_error {
public:
    Error(ErrorKind kind, std::string code, const std::string& what)
        : std::runtime_error(what), kind_(kind), code_(std::move(code)) {}

    ErrorKind kind() const { return kind_; }
    // Short machine-readable identifier, e.g. "bad_magic".
    const std::string& code() const { return code_; }

private:
    ErrorKind kind_;
    std::string code_;
};

[[noreturn]] inline void fail_data(const std::string& code, const std::string& msg) {
    throw Error(ErrorKind::data, code, msg);
}

[[noreturn]] inline void fail_usage(const std::string& code, const std::string& msg) {
    throw Error(ErrorKind::usage, code, msg);
}

[[noreturn]] inline void fail_numeric(const std::string& code, const std::string& msg) {
    throw Error(ErrorKind::numerical, code, msg);
}

}  // namespace vlbias
