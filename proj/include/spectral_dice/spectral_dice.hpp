#pragma once

#include "spectral_dice/baselines.hpp"
#include "spectral_dice/common.hpp"
#include "spectral_dice/dice.hpp"
#include "spectral_dice/envs.hpp"
#include "spectral_dice/harness.hpp"
#include "spectral_dice/io.hpp"
#include "spectral_dice/mdp.hpp"
#include "spectral_dice/replearn.hpp"
