#pragma once

#include "espl/config.hpp"
#include "espl/errors.hpp"
#include "espl/genetic.hpp"
#include "espl/http.hpp"
#include "espl/normal.hpp"
#include "espl/orchestrator.hpp"
#include "espl/policy.hpp"
#include "espl/population.hpp"
#include "espl/prompt.hpp"
#include "espl/rating.hpp"
#include "espl/reflect.hpp"
#include "espl/rng.hpp"
#include "espl/rollout.hpp"
#include "espl/synthetic.hpp"
