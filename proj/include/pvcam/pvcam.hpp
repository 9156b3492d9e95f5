// Copyright 2026 The pvcam Authors. All Rights Reserved.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//      http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#pragma once

#include "pvcam/data_model.hpp"
#include "pvcam/error.hpp"
#include "pvcam/estimation.hpp"
#include "pvcam/io.hpp"
#include "pvcam/metrics.hpp"
#include "pvcam/pipeline.hpp"
#include "pvcam/simulation.hpp"
#include "pvcam/spline_basis.hpp"
#include "pvcam/structure_id.hpp"
#include "pvcam/tuning.hpp"
