#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace mixrec {

// Base class for everything thrown by this library.
struct Error : std::runtime_error {
    explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

#define MIXREC_ERROR_TYPE(NAME)                                        \
    struct NAME : ::mixrec::Error {                                    \
        explicit NAME(const std::string& msg) : Error(#NAME ": " + msg) {} \
    }

MIXREC_ERROR_TYPE(InvalidArgument);
MIXREC_ERROR_TYPE(ShapeMismatch);
MIXREC_ERROR_TYPE(DegenerateInput);
MIXREC_ERROR_TYPE(DegenerateGeometry);
MIXREC_ERROR_TYPE(NonPositiveDepth);
MIXREC_ERROR_TYPE(BehindCamera);
MIXREC_ERROR_TYPE(EmptyCloud);
MIXREC_ERROR_TYPE(EmptyOverlap);
MIXREC_ERROR_TYPE(LayoutMismatch);
MIXREC_ERROR_TYPE(InfeasibleMatch);
MIXREC_ERROR_TYPE(ConfigMismatch);
MIXREC_ERROR_TYPE(EmptyDataset);
MIXREC_ERROR_TYPE(InvalidCount);
MIXREC_ERROR_TYPE(IoError);

#undef MIXREC_ERROR_TYPE

inline void require(bool cond, const std::string& msg) {
    if (!cond) throw InvalidArgument(msg);
}

} // namespace mixrec
