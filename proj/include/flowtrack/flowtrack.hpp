// Copyright 2026 The FlowTrack Authors
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


// Umbrella header.

#pragma once

#include "flowtrack/common.hpp"
#include "flowtrack/kinematics.hpp"
#include "flowtrack/motion.hpp"
#include "flowtrack/metrics.hpp"
#include "flowtrack/actuation.hpp"
#include "flowtrack/flow.hpp"
#include "flowtrack/env.hpp"
#include "flowtrack/distill.hpp"
