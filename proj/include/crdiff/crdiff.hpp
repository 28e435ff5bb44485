#pragma once

#include "crdiff/anneal.hpp"
#include "crdiff/autograd.hpp"
#include "crdiff/checkpoint.hpp"
#include "crdiff/commands.hpp"
#include "crdiff/config.hpp"
#include "crdiff/diffusion.hpp"
#include "crdiff/evaluate.hpp"
#include "crdiff/image_io.hpp"
#include "crdiff/kernels.hpp"
#include "crdiff/metrics.hpp"
#include "crdiff/parallel.hpp"
#include "crdiff/parameters.hpp"
#include "crdiff/patterns.hpp"
#include "crdiff/poa.hpp"
#include "crdiff/prune.hpp"
#include "crdiff/random.hpp"
#include "crdiff/tensor.hpp"
#include "crdiff/unet.hpp"
