#pragma once

#include "tabench/rng.hpp"
#include "tabench/tensor.hpp"
#include "tabench/tape.hpp"
#include "tabench/ops.hpp"
#include "tabench/image_ops.hpp"
#include "tabench/gradcheck.hpp"
#include "tabench/model.hpp"
#include "tabench/checkpoint.hpp"
#include "tabench/dataset.hpp"
#include "tabench/augment.hpp"
#include "tabench/optim.hpp"
#include "tabench/methods.hpp"
#include "tabench/attack.hpp"
#include "tabench/train.hpp"
#include "tabench/harness.hpp"
#include "tabench/bench.hpp"
