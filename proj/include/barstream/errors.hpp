#pragma once

#include <stdexcept>
#include <string>

namespace barstream {

// Base for every error thrown by the library. Specific types are declared in
// the module that raises them so tests can catch them precisely.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

#define BARSTREAM_DEFINE_ERROR(Name)                                           \
    class Name : public ::barstream::Error {                                   \
    public:                                                                    \
        using ::barstream::Error::Error;                                       \
    }

// Generic parse failure for sheet text that is structurally broken in a way
// not covered by a more specific error.
BARSTREAM_DEFINE_ERROR(ParseFailure);

} // namespace barstream
