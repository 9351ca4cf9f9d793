/**
 * Copyright (c) orepa contributors.
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

#include "orepa/analysis.hpp"
#include "orepa/autodiff.hpp"
#include "orepa/block.hpp"
#include "orepa/blocks.hpp"
#include "orepa/blockspec.hpp"
#include "orepa/layers.hpp"
#include "orepa/okt.hpp"
#include "orepa/optim.hpp"
#include "orepa/probes.hpp"
#include "orepa/rng.hpp"
#include "orepa/squeeze.hpp"
#include "orepa/tensor.hpp"
#include "orepa/train.hpp"
