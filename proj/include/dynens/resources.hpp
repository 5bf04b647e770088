#pragma once

#include "dynens/resources/nodes.hpp"
#include "dynens/resources/platform.hpp"
#include "dynens/resources/scheduler.hpp"
