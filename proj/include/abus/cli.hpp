#pragma once

#include <string>
#include <vector>

namespace abus {

// Exit codes of the command-line tool.
inline constexpr int kExitOk = 0;
inline constexpr int kExitRuntime = 1;  // I/O, generation or other runtime failure
inline constexpr int kExitConfig = 2;   // bad flags, config or contract violation

// Thread-count override read when --serial is absent.
inline constexpr const char* kThreadsEnv = "ABUS_THREADS";

// Runs `abusseg <command> ...`. args[0] is the program name.
int run_cli(const std::vector<std::string>& args);
int run_cli(int argc, char** argv);

}  // namespace abus
