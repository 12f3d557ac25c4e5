// Copyright 2026 grpolab contributors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <stdexcept>
#include <string>

namespace grpolab {

// Exit codes used by the CLI. Library code throws the matching exception
// type; main() maps it to the code.
enum ExitCode : int {
    kExitOk = 0,
    kExitConfigError = 2,
    kExitDependencyError = 3,
    kExitNumericError = 4,
};

struct ConfigError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// A stage was requested whose inputs (checkpoints, datasets, prior stage
// outputs) are missing or inconsistent.
struct DependencyError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Non-finite loss, invalid matrix, or other numeric failure.
struct NumericError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Dataset-level failure: dangling task ids, empty synthesis output.
struct DataError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// I/O or file-format failure (corrupt checkpoint, bad magic, short read).
struct FormatError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

} // namespace grpolab
