#pragma once

#include "cigocc/ndgrad/conv.hpp"
#include "cigocc/ndgrad/grad_check.hpp"
#include "cigocc/ndgrad/ops.hpp"
#include "cigocc/ndgrad/params.hpp"
#include "cigocc/ndgrad/sampling.hpp"
#include "cigocc/ndgrad/snapshot.hpp"
#include "cigocc/ndgrad/tensor.hpp"
