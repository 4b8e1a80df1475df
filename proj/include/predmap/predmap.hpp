#pragma once

#include "predmap/confidence.hpp"
#include "predmap/contour.hpp"
#include "predmap/errors.hpp"
#include "predmap/io.hpp"
#include "predmap/linalg.hpp"
#include "predmap/metrics.hpp"
#include "predmap/model.hpp"
#include "predmap/objective.hpp"
#include "predmap/special.hpp"
#include "predmap/svd.hpp"
#include "predmap/synth.hpp"
#include "predmap/trainer.hpp"
