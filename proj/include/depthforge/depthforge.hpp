#pragma once

#include "depthforge/camera.hpp"
#include "depthforge/correspondence.hpp"
#include "depthforge/errors.hpp"
#include "depthforge/frame_store.hpp"
#include "depthforge/fusion.hpp"
#include "depthforge/image.hpp"
#include "depthforge/metrics.hpp"
#include "depthforge/noise_sim.hpp"
#include "depthforge/png_io.hpp"
#include "depthforge/registration.hpp"
#include "depthforge/pipeline.hpp"
