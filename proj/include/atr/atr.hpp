#pragma once

#include "atr/error.hpp"
#include "atr/numeric.hpp"
#include "atr/corpus.hpp"
#include "atr/textenc.hpp"
#include "atr/recommender.hpp"
#include "atr/attack2ft.hpp"
#include "atr/blackbox.hpp"
#include "atr/icl.hpp"
#include "atr/eval.hpp"
#include "atr/pipeline.hpp"
