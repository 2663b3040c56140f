#pragma once

#include "cora/checkpoint.hpp"
#include "cora/consistency.hpp"
#include "cora/data.hpp"
#include "cora/error.hpp"
#include "cora/grid.hpp"
#include "cora/instructgen.hpp"
#include "cora/losses.hpp"
#include "cora/maskgeo.hpp"
#include "cora/model.hpp"
#include "cora/rng.hpp"
#include "cora/tokenbank.hpp"
#include "cora/train.hpp"
