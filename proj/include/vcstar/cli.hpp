#pragma once

namespace vcstar {

int cli_main(int argc, char** argv);

}  // namespace vcstar

#include "cli_impl.hpp"
