// Copyright (c) 2026 slimnas authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "slimnas/blocks.hpp"
#include "slimnas/checkpoint.hpp"
#include "slimnas/common.hpp"
#include "slimnas/config.hpp"
#include "slimnas/data.hpp"
#include "slimnas/mes.hpp"
#include "slimnas/ops.hpp"
#include "slimnas/optim.hpp"
#include "slimnas/search.hpp"
#include "slimnas/supernet.hpp"
#include "slimnas/tensor.hpp"
#include "slimnas/train.hpp"
