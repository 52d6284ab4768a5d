#pragma once

#include "sgcalc/fio.hpp"
#include "sgcalc/io.hpp"
#include "sgcalc/psdo.hpp"
#include "sgcalc/scatgeo.hpp"
#include "sgcalc/symbols.hpp"
