#pragma once

#include "pyraflow/error.hpp"
#include "pyraflow/raster.hpp"
#include "pyraflow/png.hpp"
#include "pyraflow/pyramid.hpp"
#include "pyraflow/synthetic.hpp"
#include "pyraflow/container.hpp"
#include "pyraflow/tilecache.hpp"
#include "pyraflow/tissue.hpp"
#include "pyraflow/models.hpp"
#include "pyraflow/channel.hpp"
#include "pyraflow/patchflow.hpp"
#include "pyraflow/export.hpp"
#include "pyraflow/orchestration.hpp"
#include "pyraflow/bench.hpp"
