#pragma once
// Umbrella header.

#include "aird/autograd.hpp"
#include "aird/bn_state.hpp"
#include "aird/checkpoint.hpp"
#include "aird/config.hpp"
#include "aird/distill.hpp"
#include "aird/eval.hpp"
#include "aird/facebn.hpp"
#include "aird/io.hpp"
#include "aird/nn.hpp"
#include "aird/rng.hpp"
#include "aird/study.hpp"
#include "aird/synth.hpp"
#include "aird/tensor.hpp"
#include "aird/train.hpp"
