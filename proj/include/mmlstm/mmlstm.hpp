#pragma once

// Everything: numerics, layers, loss, models, descriptors, data generation,
// serialization and the evaluation harness.

#include "mmlstm/numerics.hpp"
#include "mmlstm/layers.hpp"
#include "mmlstm/loss.hpp"
#include "mmlstm/model.hpp"
#include "mmlstm/gradcheck.hpp"
#include "mmlstm/descriptors.hpp"
#include "mmlstm/datagen.hpp"
#include "mmlstm/serialize.hpp"
#include "mmlstm/harness.hpp"
