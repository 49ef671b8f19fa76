// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "hbp/behavior.hpp"
#include "hbp/client.hpp"
#include "hbp/codec.hpp"
#include "hbp/dataset.hpp"
#include "hbp/error.hpp"
#include "hbp/metrics.hpp"
#include "hbp/parser.hpp"
#include "hbp/prompt.hpp"
#include "hbp/representation.hpp"
#include "hbp/runner.hpp"
