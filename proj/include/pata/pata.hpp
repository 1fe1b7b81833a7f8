#pragma once

#include "pata/errors.hpp"
#include "pata/tensor.hpp"
#include "pata/prompt.hpp"
#include "pata/model.hpp"
#include "pata/gradcheck.hpp"
#include "pata/toy_model.hpp"
#include "pata/toy_train.hpp"
#include "pata/synth.hpp"
#include "pata/image_ops.hpp"
#include "pata/competition.hpp"
#include "pata/metrics.hpp"
#include "pata/attack.hpp"
#include "pata/prompt_lab.hpp"
#include "pata/json_io.hpp"
#include "pata/image_io.hpp"
#include "pata/model_io.hpp"
#include "pata/bench.hpp"
#include "pata/plots.hpp"
