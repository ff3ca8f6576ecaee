// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <stdexcept>
#include <string>

namespace kdforge {

enum class ErrorKind {
  dimension,
  numeric,
  config,
  label,
  state,
  input,
  vocab,
  distribution,
  empty_batch,
  compatibility,
  divergence,
  balance,
  split,
  degenerate,
  io,
  checkpoint_magic,
  checkpoint_truncated,
  checkpoint_version,
};

const char* to_string(ErrorKind kind);

/// Every failure raised by the library carries a kind so the CLI can map it
/// onto a stable exit code.
class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what)
      : std::runtime_error(std::string(to_string(kind)) + " error: " + what),
        kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

/// 1 usage, 2 data, 3 numeric divergence.
int exit_code_for(ErrorKind kind);

}  // namespace kdforge
