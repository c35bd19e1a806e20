#pragma once

#include "pkdot/datagen.hpp"
#include "pkdot/errors.hpp"
#include "pkdot/graph.hpp"
#include "pkdot/io.hpp"
#include "pkdot/losses.hpp"
#include "pkdot/models.hpp"
#include "pkdot/otsolver.hpp"
#include "pkdot/rng.hpp"
#include "pkdot/simgraph.hpp"
#include "pkdot/tensor.hpp"
#include "pkdot/trainer.hpp"
