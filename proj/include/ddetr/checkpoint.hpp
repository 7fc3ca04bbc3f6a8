// Copyright 2026 The ddetr Authors. All Rights Reserved.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#pragma once

#include <filesystem>

#include "ddetr/model.hpp"

namespace ddetr {

/// Binary checkpoint: magic "DDETRCKP", uint32 version, uint64 length + model config
/// JSON, uint64 parameter count, then per parameter: uint64 name length, name bytes,
/// uint64 rows, uint64 cols and rows*cols little-endian doubles in row-major order.
void save_checkpoint(Model& model, const std::filesystem::path& path);

/// Throws std::runtime_error on a bad header, a missing or extra parameter, or a shape
/// mismatch.
Model load_checkpoint(const std::filesystem::path& path);

}  // namespace ddetr
