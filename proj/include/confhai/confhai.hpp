#pragma once

#include "confhai/core.hpp"
#include "confhai/propensity.hpp"
#include "confhai/msm.hpp"
#include "confhai/objective.hpp"
#include "confhai/train.hpp"
#include "confhai/synthgen.hpp"
#include "confhai/io.hpp"
#include "confhai/harness.hpp"
