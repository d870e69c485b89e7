#pragma once

#include "autoprotonet/core.hpp"
#include "autoprotonet/rng.hpp"
#include "autoprotonet/codec.hpp"
#include "autoprotonet/image.hpp"
#include "autoprotonet/datasets.hpp"
#include "autoprotonet/layers.hpp"
#include "autoprotonet/network.hpp"
#include "autoprotonet/protonet.hpp"
#include "autoprotonet/optimizer.hpp"
#include "autoprotonet/zip.hpp"
#include "autoprotonet/checkpoint.hpp"
#include "autoprotonet/evaluation.hpp"
#include "autoprotonet/training.hpp"
#include "autoprotonet/refinement.hpp"
#include "autoprotonet/service.hpp"
