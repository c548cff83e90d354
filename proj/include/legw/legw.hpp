// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "legw/autodiff.hpp"
#include "legw/config.hpp"
#include "legw/data.hpp"
#include "legw/errors.hpp"
#include "legw/harness.hpp"
#include "legw/models.hpp"
#include "legw/optim.hpp"
#include "legw/probe.hpp"
#include "legw/random.hpp"
#include "legw/rational.hpp"
#include "legw/schedule.hpp"
#include "legw/tensor.hpp"
