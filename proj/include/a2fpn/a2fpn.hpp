#pragma once

#include "a2fpn/attention.hpp"
#include "a2fpn/bench.hpp"
#include "a2fpn/cli.hpp"
#include "a2fpn/data.hpp"
#include "a2fpn/error.hpp"
#include "a2fpn/fpn.hpp"
#include "a2fpn/gradcheck.hpp"
#include "a2fpn/labelmap.hpp"
#include "a2fpn/metrics.hpp"
#include "a2fpn/model.hpp"
#include "a2fpn/nn.hpp"
#include "a2fpn/optim.hpp"
#include "a2fpn/rng.hpp"
#include "a2fpn/selftest.hpp"
#include "a2fpn/tensor.hpp"
#include "a2fpn/train.hpp"
