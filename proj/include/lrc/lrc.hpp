#pragma once

#include "lrc/checkpoint.hpp"
#include "lrc/compress.hpp"
#include "lrc/data.hpp"
#include "lrc/error.hpp"
#include "lrc/eval.hpp"
#include "lrc/linalg.hpp"
#include "lrc/nn.hpp"
#include "lrc/pipeline.hpp"
#include "lrc/stats.hpp"
#include "lrc/train.hpp"
#include "lrc/tt.hpp"
#include "lrc/util.hpp"
