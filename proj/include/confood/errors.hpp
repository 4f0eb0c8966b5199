/*
 * Copyright 2026 The confood Authors
 *
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 *   http://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */

#pragma once

#include <stdexcept>
#include <string>

namespace confood {

/// Base of every error thrown by the library.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Invalid or inconsistent configuration: empty calibration set, missing
/// calibration for a configured layer, out-of-range budget, bad file.
class ConfigError : public Error {
public:
    using Error::Error;
};

/// A subject model or judge failed to answer (transport, protocol, remote error).
/// Distinct from a model that answered but never changed its response.
class ProbeError : public Error {
public:
    using Error::Error;
};

/// Caller violated a precondition (empty input list, invalid value).
class UsageError : public Error {
public:
    using Error::Error;
};

}  // namespace confood
