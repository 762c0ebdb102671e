// Copyright 2026 The twin-metrology Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <stdexcept>
#include <string>

namespace twin_metrology {

/// Raised for contract violations and degenerate numerical input.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace twin_metrology
