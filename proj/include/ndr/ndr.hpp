#pragma once

#include "ndr/act.hpp"
#include "ndr/attention.hpp"
#include "ndr/checkpoint.hpp"
#include "ndr/checks.hpp"
#include "ndr/geometric.hpp"
#include "ndr/grad_check.hpp"
#include "ndr/harness/config.hpp"
#include "ndr/harness/sweep.hpp"
#include "ndr/harness/train.hpp"
#include "ndr/init.hpp"
#include "ndr/introspection.hpp"
#include "ndr/layer.hpp"
#include "ndr/model.hpp"
#include "ndr/ops.hpp"
#include "ndr/optim.hpp"
#include "ndr/rng.hpp"
#include "ndr/tape.hpp"
#include "ndr/tasks/arith.hpp"
#include "ndr/tasks/ctl.hpp"
#include "ndr/tasks/dataset.hpp"
#include "ndr/tasks/listops.hpp"
#include "ndr/tasks/sample.hpp"
#include "ndr/tensor.hpp"
