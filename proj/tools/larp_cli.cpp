// larp: generate capsule-chain trajectory data, train the neural simulator on
// it, evaluate rollouts against held-out data, and benchmark throughput.
//
// Subcommands: gen, train, eval, bench. Every command is deterministic given
// --seed; all errors exit with code 1 after printing "error: <what>" on
// stderr (usage problems exit with code 2 via CLI11).

#include <CLI11.hpp>

#include <cstdio>
#include <exception>

int main(int argc, char** argv) {
  CLI::App app{"learned articulated rigid-body physics toolkit"};
  app.require_subcommand(1);

  CLI11_PARSE(app, argc, argv);
  return 0;
}
