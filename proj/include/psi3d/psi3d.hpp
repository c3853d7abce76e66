#pragma once

#include "psi3d/baselines.hpp"
#include "psi3d/binary.hpp"
#include "psi3d/errors.hpp"
#include "psi3d/forward_model.hpp"
#include "psi3d/io.hpp"
#include "psi3d/likelihood.hpp"
#include "psi3d/metrics.hpp"
#include "psi3d/parallel.hpp"
#include "psi3d/phantom.hpp"
#include "psi3d/prior.hpp"
#include "psi3d/remote_prior.hpp"
#include "psi3d/rng.hpp"
#include "psi3d/sampler.hpp"
#include "psi3d/scheduler.hpp"
#include "psi3d/tv.hpp"
#include "psi3d/volume.hpp"
