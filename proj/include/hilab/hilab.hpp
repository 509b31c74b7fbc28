#pragma once

#include "hilab/common.hpp"
#include "hilab/taxonomy.hpp"
#include "hilab/store.hpp"
#include "hilab/features.hpp"
#include "hilab/classifier.hpp"
#include "hilab/splits.hpp"
#include "hilab/al.hpp"
#include "hilab/projection.hpp"
#include "hilab/layout.hpp"
#include "hilab/analytics.hpp"
#include "hilab/config.hpp"
#include "hilab/workspace.hpp"
