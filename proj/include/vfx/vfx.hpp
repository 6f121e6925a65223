#pragma once

#include "vfx/annotation.hpp"
#include "vfx/backbone.hpp"
#include "vfx/checkpoint.hpp"
#include "vfx/conditioning.hpp"
#include "vfx/dataset.hpp"
#include "vfx/diffusion.hpp"
#include "vfx/metrics.hpp"
#include "vfx/model.hpp"
#include "vfx/scenes.hpp"
#include "vfx/spatial_control.hpp"
#include "vfx/pipeline.hpp"
