#pragma once

#include "tallpack/baselines.hpp"
#include "tallpack/compression.hpp"
#include "tallpack/error.hpp"
#include "tallpack/merging.hpp"
#include "tallpack/parallel.hpp"
#include "tallpack/scorer.hpp"
#include "tallpack/synthetic.hpp"
#include "tallpack/tall_masks.hpp"
#include "tallpack/task_vectors.hpp"
#include "tallpack/tensor_store.hpp"
