#pragma once

#include "dq/blockwise.hpp"
#include "dq/config.hpp"
#include "dq/error.hpp"
#include "dq/io.hpp"
#include "dq/layerwise.hpp"
#include "dq/linalg.hpp"
#include "dq/oracle.hpp"
#include "dq/packing.hpp"
#include "dq/random.hpp"
