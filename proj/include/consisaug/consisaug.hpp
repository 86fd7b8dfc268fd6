#pragma once

// Umbrella header for the whole library.

#include "consisaug/autodiff.hpp"
#include "consisaug/boxgeom.hpp"
#include "consisaug/checkpoint.hpp"
#include "consisaug/data.hpp"
#include "consisaug/errors.hpp"
#include "consisaug/eval.hpp"
#include "consisaug/gradcheck_suite.hpp"
#include "consisaug/losses.hpp"
#include "consisaug/model.hpp"
#include "consisaug/optim.hpp"
#include "consisaug/rng.hpp"
#include "consisaug/tensor.hpp"
#include "consisaug/trainer.hpp"
