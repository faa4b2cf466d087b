#pragma once

#include "mrda/csv.hpp"
#include "mrda/data.hpp"
#include "mrda/error.hpp"
#include "mrda/evalcv.hpp"
#include "mrda/gbt.hpp"
#include "mrda/linear.hpp"
#include "mrda/losses.hpp"
#include "mrda/mr.hpp"
#include "mrda/parallel.hpp"
#include "mrda/random.hpp"
#include "mrda/segmentation.hpp"
#include "mrda/serialize.hpp"
#include "mrda/types.hpp"
#include "mrda/weights.hpp"
