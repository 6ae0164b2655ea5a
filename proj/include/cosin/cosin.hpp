#pragma once

#include "cosin/error.hpp"
#include "cosin/rng.hpp"
#include "cosin/distributions.hpp"
#include "cosin/model.hpp"
#include "cosin/parallel.hpp"
#include "cosin/gibbs.hpp"
#include "cosin/postprocess.hpp"
#include "cosin/sim_bench.hpp"
#include "cosin/io.hpp"
