#pragma once

#include "robustda/diffcore/adam.hpp"
#include "robustda/diffcore/grad_check.hpp"
#include "robustda/diffcore/graph.hpp"
#include "robustda/diffcore/ops.hpp"
#include "robustda/diffcore/tape.hpp"
#include "robustda/diffcore/tensor.hpp"
