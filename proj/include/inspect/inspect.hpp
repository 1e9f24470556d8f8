#pragma once

#include "inspect/binary_io.hpp"
#include "inspect/config.hpp"
#include "inspect/data.hpp"
#include "inspect/dataset_io.hpp"
#include "inspect/error.hpp"
#include "inspect/experiments.hpp"
#include "inspect/model.hpp"
#include "inspect/net.hpp"
#include "inspect/nodes.hpp"
#include "inspect/plant.hpp"
#include "inspect/protocol.hpp"
#include "inspect/random.hpp"
#include "inspect/registry.hpp"
#include "inspect/reviewer.hpp"
#include "inspect/sample.hpp"
#include "inspect/servers.hpp"
#include "inspect/tensor.hpp"
#include "inspect/tensor_file.hpp"
#include "inspect/training.hpp"
#include "inspect/update.hpp"
#include "inspect/wire_json.hpp"
