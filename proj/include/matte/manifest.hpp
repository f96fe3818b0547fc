// SPDX-License-Identifier: Apache-2.0
#ifndef MATTE_MANIFEST_HPP
#define MATTE_MANIFEST_HPP

#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"
#include "matte/common.hpp"

#ifndef MATTE_VERSION
#define MATTE_VERSION "0.0.0"
#endif

namespace matte {

inline std::string file_hash(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot open '" + path + "'");
    std::ostringstream ss;
    ss << f.rdbuf();
    return hex64(fnv1a64(ss.str()));
}

// Everything needed to replay a run. No timestamps, so replays produce identical manifests.
struct RunManifest {
    std::string command;
    std::vector<std::string> argv;
    nlohmann::json config = nlohmann::json::object();
    std::vector<uint64_t> seeds;
    std::string tool_version = MATTE_VERSION;
    std::map<std::string, std::string> input_hashes;
    std::vector<std::string> outputs;

    nlohmann::json to_json() const {
        return {{"command", command}, {"argv", argv},         {"config", config},
                {"seeds", seeds},     {"tool_version", tool_version}, {"input_hashes", input_hashes},
                {"outputs", outputs}};
    }

    static RunManifest from_json(const nlohmann::json& j) {
        RunManifest m;
        m.command = j.at("command").get<std::string>();
        m.argv = j.at("argv").get<std::vector<std::string>>();
        m.config = j.at("config");
        m.seeds = j.at("seeds").get<std::vector<uint64_t>>();
        m.tool_version = j.at("tool_version").get<std::string>();
        m.input_hashes = j.at("input_hashes").get<std::map<std::string, std::string>>();
        m.outputs = j.at("outputs").get<std::vector<std::string>>();
        return m;
    }

    void add_input(const std::string& path) { input_hashes[path] = file_hash(path); }

    void write(const std::string& path) const {
        std::ofstream f(path);
        if (!f) throw std::runtime_error("cannot write manifest '" + path + "'");
        f << to_json().dump(2) << "\n";
    }
};

}  // namespace matte

#endif  // MATTE_MANIFEST_HPP
