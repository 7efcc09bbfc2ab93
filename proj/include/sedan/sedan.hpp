#pragma once

// Everything except the command-line layer (sedan/cli.hpp), which pulls in yaml-cpp.
#include "sedan/adapt.hpp"
#include "sedan/augment.hpp"
#include "sedan/checkpoint.hpp"
#include "sedan/contrast.hpp"
#include "sedan/dataio.hpp"
#include "sedan/eval.hpp"
#include "sedan/matching.hpp"
#include "sedan/network.hpp"
#include "sedan/nn.hpp"
#include "sedan/tensor.hpp"
#include "sedan/train.hpp"
