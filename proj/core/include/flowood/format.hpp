#pragma once

#include <cstdio>
#include <string>

namespace flowood {

// %.17g: enough digits that a double round-trips exactly through text.
// All numeric CSV fields go through this so outputs are reproducible.
inline std::string format_g17(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

} // namespace flowood
