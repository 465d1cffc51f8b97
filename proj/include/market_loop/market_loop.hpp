#pragma once

#include "market_loop/agents.hpp"
#include "market_loop/config.hpp"
#include "market_loop/datasets.hpp"
#include "market_loop/metrics.hpp"
#include "market_loop/protocol.hpp"
#include "market_loop/runner.hpp"
#include "market_loop/task.hpp"
