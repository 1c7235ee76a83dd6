// Copyright 2026 The maskdiff Authors
// SPDX-License-Identifier: Apache-2.0

// Everything at once. Individual headers are self-contained.
#pragma once

#include "maskdiff/checkpoint.hpp"
#include "maskdiff/config.hpp"
#include "maskdiff/curation.hpp"
#include "maskdiff/dataset.hpp"
#include "maskdiff/finetune.hpp"
#include "maskdiff/image_io.hpp"
#include "maskdiff/manifest.hpp"
#include "maskdiff/mask_generator.hpp"
#include "maskdiff/pipeline.hpp"
#include "maskdiff/runtime.hpp"
#include "maskdiff/sampler.hpp"
#include "maskdiff/schedule.hpp"
#include "maskdiff/segmentation.hpp"
