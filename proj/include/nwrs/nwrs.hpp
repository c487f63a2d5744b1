#pragma once

#include "nwrs/error.hpp"
#include "nwrs/rng.hpp"
#include "nwrs/tensor.hpp"
#include "nwrs/model.hpp"
#include "nwrs/trainer.hpp"
#include "nwrs/attack.hpp"
#include "nwrs/resync.hpp"
#include "nwrs/integrity.hpp"
#include "nwrs/watermark.hpp"
#include "nwrs/container.hpp"
#include "nwrs/pipeline.hpp"
