// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "uamvse/core.hpp"
#include "uamvse/data.hpp"
#include "uamvse/model.hpp"
#include "uamvse/loss.hpp"
#include "uamvse/eval.hpp"
#include "uamvse/inference.hpp"
#include "uamvse/training.hpp"
