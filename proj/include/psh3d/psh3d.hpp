/*
 * Copyright (c) 2026, The psh3d Authors.  All rights reserved.
 *
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 *     http://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */

#pragma once

#include "psh3d/attention.hpp"
#include "psh3d/cost_model.hpp"
#include "psh3d/error.hpp"
#include "psh3d/geometry.hpp"
#include "psh3d/hashing.hpp"
#include "psh3d/io.hpp"
#include "psh3d/matrix.hpp"
#include "psh3d/metrics.hpp"
#include "psh3d/parallel.hpp"
#include "psh3d/pooling.hpp"
#include "psh3d/psh.hpp"
#include "psh3d/schedule.hpp"
#include "psh3d/stage.hpp"
