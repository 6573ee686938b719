// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <stdexcept>
#include <string>

namespace fibt {

enum class Errc {
    SyntaxError,
    UndefinedSymbol,
    DuplicateLabel,
    DuplicateSymbol,
    UncoveredCallsite,
    UnknownSymbol,
    MissingSid,
    SidNotEncodable,
    RelroRequired,
    UnresolvedImport,
    TamperDetected,
    IllegalMutation,
    SlotOverflow,
    AmbiguousCallsite,
    BadConfig,
    Io,
};

const char* errc_name(Errc c);

class Error : public std::runtime_error {
public:
    Error(Errc code, std::string message, int line = 0, int column = 0)
        : std::runtime_error(format(code, message, line, column)),
          code_(code), line_(line), column_(column) {}

    Errc code() const { return code_; }
    int line() const { return line_; }
    int column() const { return column_; }

private:
    static std::string format(Errc code, const std::string& message, int line, int column);

    Errc code_;
    int line_;
    int column_;
};

} // namespace fibt
