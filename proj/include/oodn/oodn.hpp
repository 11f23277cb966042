#pragma once

#include "oodn/archive.hpp"
#include "oodn/centerloss.hpp"
#include "oodn/config.hpp"
#include "oodn/data.hpp"
#include "oodn/detector.hpp"
#include "oodn/errors.hpp"
#include "oodn/evalkit.hpp"
#include "oodn/experiment.hpp"
#include "oodn/head.hpp"
#include "oodn/nn.hpp"
#include "oodn/rng.hpp"
#include "oodn/train.hpp"
