#pragma once

#include "dcc/autodiff.hpp"
#include "dcc/backbone.hpp"
#include "dcc/concept.hpp"
#include "dcc/diffusion.hpp"
#include "dcc/evaluation.hpp"
#include "dcc/external_backbone.hpp"
#include "dcc/image.hpp"
#include "dcc/prompt.hpp"
#include "dcc/rome_edit.hpp"
#include "dcc/safetensors.hpp"
#include "dcc/sampling.hpp"
#include "dcc/tensor.hpp"
#include "dcc/text_pipeline.hpp"
#include "dcc/tokenizer.hpp"
#include "dcc/toy_backbone.hpp"
#include "dcc/trainer.hpp"
#include "dcc/util.hpp"
