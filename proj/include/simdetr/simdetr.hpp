// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "simdetr/dataset.hpp"
#include "simdetr/diagnostics.hpp"
#include "simdetr/grad_check.hpp"
#include "simdetr/matchloss.hpp"
#include "simdetr/mechanisms.hpp"
#include "simdetr/metrics.hpp"
#include "simdetr/model.hpp"
#include "simdetr/optim.hpp"
#include "simdetr/params.hpp"
#include "simdetr/rng.hpp"
#include "simdetr/span.hpp"
#include "simdetr/tape.hpp"
#include "simdetr/tensor.hpp"
#include "simdetr/trainer.hpp"
#include "simdetr/util.hpp"
