#pragma once

#include "mmpt/checkpoint.hpp"
#include "mmpt/config.hpp"
#include "mmpt/errors.hpp"
#include "mmpt/eval.hpp"
#include "mmpt/geometry.hpp"
#include "mmpt/graph.hpp"
#include "mmpt/losses.hpp"
#include "mmpt/nn.hpp"
#include "mmpt/optim.hpp"
#include "mmpt/rng.hpp"
#include "mmpt/synthetic.hpp"
#include "mmpt/tasks.hpp"
#include "mmpt/tensor.hpp"
#include "mmpt/train.hpp"
