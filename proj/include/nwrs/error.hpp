#pragma once

#include <stdexcept>
#include <string>

namespace nwrs {

/// Base error. `category()` is a short machine-parsable tag, e.g. "shape" or "corruption".
class error : public std::runtime_error {
public:
    error(std::string category, const std::string& detail)
        : std::runtime_error(detail), category_(std::move(category)) {}

    [[nodiscard]] const std::string& category() const noexcept { return category_; }

private:
    std::string category_;
};

struct shape_error : error {
    explicit shape_error(const std::string& d) : error("shape", d) {}
};
struct format_error : error {
    explicit format_error(const std::string& d) : error("format", d) {}
};
struct corruption_error : error {
    explicit corruption_error(const std::string& d) : error("corruption", d) {}
};
struct validation_error : error {
    explicit validation_error(const std::string& d) : error("validation", d) {}
};
struct domain_error : error {
    explicit domain_error(const std::string& d) : error("domain", d) {}
};
struct architecture_error : error {
    explicit architecture_error(const std::string& d) : error("architecture", d) {}
};
struct training_error : error {
    explicit training_error(const std::string& d) : error("training", d) {}
};
struct io_error : error {
    explicit io_error(const std::string& d) : error("io", d) {}
};

}  // namespace nwrs
