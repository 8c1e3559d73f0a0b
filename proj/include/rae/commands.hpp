#pragma once

// CLI verbs. Each command validates its configuration before touching data
// or weights, runs under a single run directory containing the exact config
// used, and returns a process exit code.

#include <string>

#include "rae/config.hpp"

namespace rae::cli {

// Creates (and returns) the run directory and persists the effective config.
std::string prepare_run_dir(const RunConfig& rc, const std::string& cmd);

int cmd_pretrain(RunConfig rc);
int cmd_finetune(RunConfig rc);
int cmd_eval(RunConfig rc);
int cmd_ablate(RunConfig rc);
int cmd_gradcheck(RunConfig rc);
int cmd_reconstruct(RunConfig rc);
int cmd_gendata(RunConfig rc);

// Full argv entry point (subcommand dispatch, profile/config handling).
int run(int argc, const char* const* argv);

}  // namespace rae::cli
