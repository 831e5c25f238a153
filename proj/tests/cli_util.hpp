#pragma once

// Runs the installed `vlbias` binary in a working directory and collects
// its exit code and output.

#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

namespace cli {

struct Result {
    int code = -1;
    std::string out, err;
};

inline std::string slurp(const std::filesystem::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

inline Result run(const std::filesystem::path& cwd, const std::string& args) {
    std::filesystem::create_directories(cwd);
    const auto out = cwd / ".stdout", err = cwd / ".stderr";
    const std::string cmd = "cd '" + cwd.string() + "' && '" + VLBIAS_CLI_PATH + "' " + args + " > '" +
                            out.string() + "' 2> '" + err.string() + "'";
    const int status = std::system(cmd.c_str());
    Result r;
    r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
    r.out = slurp(out);
    r.err = slurp(err);
    return r;
}

inline void write(const std::filesystem::path& p, const std::string& text) {
    std::filesystem::create_directories(p.parent_path());
    std::ofstream(p, std::ios::binary | std::ios::trunc) << text;
}

}  // namespace cli
