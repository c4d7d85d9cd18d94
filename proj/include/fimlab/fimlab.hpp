#pragma once

#include "fimlab/common.hpp"
#include "fimlab/core_space.hpp"
#include "fimlab/tensor_ad.hpp"
#include "fimlab/network.hpp"
#include "fimlab/estimators.hpp"
#include "fimlab/bounds.hpp"
#include "fimlab/harness.hpp"
