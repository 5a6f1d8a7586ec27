// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "normlab/core.hpp"
#include "normlab/tensor.hpp"
#include "normlab/ops.hpp"
#include "normlab/gradcheck.hpp"
#include "normlab/model.hpp"
#include "normlab/data.hpp"
#include "normlab/checkpoint.hpp"
#include "normlab/trainer.hpp"
#include "normlab/probes.hpp"
#include "normlab/screening.hpp"
#include "normlab/stats.hpp"
#include "normlab/fixtures.hpp"
#include "normlab/harness.hpp"
