#pragma once

#include <functional>
#include <iosfwd>
#include <string>
#include <vector>

namespace mmdit {

struct PropertyCheck {
    std::string name;
    std::function<std::string()> run;  // empty string = pass, otherwise the failure detail
};

// the per-module invariant suite behind `mmdit verify`
std::vector<PropertyCheck> all_property_checks();

// prints one PASS/FAIL line per property; returns the failure count
int run_verify(std::ostream& out);

}  // namespace mmdit
