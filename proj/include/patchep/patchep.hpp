#pragma once

// Umbrella header: the full restoration pipeline and its building blocks.

#include "patchep/config.hpp"
#include "patchep/ep_gaussian.hpp"
#include "patchep/ep_poisson.hpp"
#include "patchep/epem.hpp"
#include "patchep/gmm_em.hpp"
#include "patchep/gmm_io.hpp"
#include "patchep/image.hpp"
#include "patchep/metrics.hpp"
#include "patchep/noise.hpp"
#include "patchep/pipeline.hpp"
#include "patchep/poe.hpp"
#include "patchep/synthetic.hpp"
