#pragma once

// Umbrella header: the whole library.

#include "lookwhere/config.hpp"
#include "lookwhere/data.hpp"
#include "lookwhere/distill.hpp"
#include "lookwhere/eval.hpp"
#include "lookwhere/extractor.hpp"
#include "lookwhere/rng.hpp"
#include "lookwhere/selector.hpp"
#include "lookwhere/tensor.hpp"
#include "lookwhere/train.hpp"
#include "lookwhere/vit.hpp"
