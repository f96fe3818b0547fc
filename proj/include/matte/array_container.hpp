// SPDX-License-Identifier: Apache-2.0
#ifndef MATTE_ARRAY_CONTAINER_HPP
#define MATTE_ARRAY_CONTAINER_HPP

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "json.hpp"

// Named n-d arrays in one file:
//   "MATTEARR" | u32 version | u64 header bytes | JSON header | raw little-endian data
// The header lists {name, dtype ("float32" | "float64"), shape, offset, nbytes} per array,
// offsets relative to the start of the data section, plus a free-form "meta" object.

namespace matte {

static_assert(std::endian::native == std::endian::little, "array container assumes a little-endian host");

struct NdArray {
    std::string dtype = "float32";
    std::vector<int64_t> shape;
    std::vector<uint8_t> bytes;

    size_t count() const {
        size_t n = 1;
        for (auto s : shape) n *= static_cast<size_t>(s);
        return n;
    }

    static NdArray from_floats(std::vector<int64_t> shape, const std::vector<float>& values) {
        NdArray a;
        a.dtype = "float32";
        a.shape = std::move(shape);
        if (a.count() != values.size()) {
            throw std::invalid_argument("array shape does not match value count");
        }
        a.bytes.resize(values.size() * sizeof(float));
        std::memcpy(a.bytes.data(), values.data(), a.bytes.size());
        return a;
    }

    static NdArray from_doubles(std::vector<int64_t> shape, const std::vector<double>& values) {
        NdArray a;
        a.dtype = "float64";
        a.shape = std::move(shape);
        if (a.count() != values.size()) {
            throw std::invalid_argument("array shape does not match value count");
        }
        a.bytes.resize(values.size() * sizeof(double));
        std::memcpy(a.bytes.data(), values.data(), a.bytes.size());
        return a;
    }

    std::vector<float> floats() const {
        if (dtype != "float32") throw std::runtime_error("array is " + dtype + ", not float32");
        std::vector<float> out(count());
        std::memcpy(out.data(), bytes.data(), bytes.size());
        return out;
    }

    std::vector<double> doubles() const {
        if (dtype != "float64") throw std::runtime_error("array is " + dtype + ", not float64");
        std::vector<double> out(count());
        std::memcpy(out.data(), bytes.data(), bytes.size());
        return out;
    }
};

struct ArrayContainer {
    static constexpr char kMagic[8] = {'M', 'A', 'T', 'T', 'E', 'A', 'R', 'R'};
    static constexpr uint32_t kVersion = 1;

    std::map<std::string, NdArray> arrays;
    nlohmann::json meta = nlohmann::json::object();

    void save(const std::string& path) const {
        nlohmann::json header;
        header["meta"] = meta;
        header["arrays"] = nlohmann::json::array();
        uint64_t offset = 0;
        for (const auto& [name, a] : arrays) {
            header["arrays"].push_back(
                {{"name", name}, {"dtype", a.dtype}, {"shape", a.shape}, {"offset", offset}, {"nbytes", a.bytes.size()}});
            offset += a.bytes.size();
        }
        const std::string h = header.dump();
        std::ofstream f(path, std::ios::binary);
        if (!f) throw std::runtime_error("cannot write '" + path + "'");
        f.write(kMagic, sizeof(kMagic));
        const uint32_t version = kVersion;
        const uint64_t hlen = h.size();
        f.write(reinterpret_cast<const char*>(&version), sizeof(version));
        f.write(reinterpret_cast<const char*>(&hlen), sizeof(hlen));
        f.write(h.data(), static_cast<std::streamsize>(h.size()));
        for (const auto& [name, a] : arrays) {
            f.write(reinterpret_cast<const char*>(a.bytes.data()), static_cast<std::streamsize>(a.bytes.size()));
        }
    }

    static ArrayContainer load(const std::string& path) {
        std::ifstream f(path, std::ios::binary);
        if (!f) throw std::runtime_error("cannot open '" + path + "'");
        char magic[8];
        f.read(magic, sizeof(magic));
        if (!f || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0) {
            throw std::runtime_error("'" + path + "' is not an array container");
        }
        uint32_t version = 0;
        uint64_t hlen = 0;
        f.read(reinterpret_cast<char*>(&version), sizeof(version));
        f.read(reinterpret_cast<char*>(&hlen), sizeof(hlen));
        if (version != kVersion) {
            throw std::runtime_error("unsupported array container version " + std::to_string(version));
        }
        std::string h(hlen, '\0');
        f.read(h.data(), static_cast<std::streamsize>(hlen));
        const auto header = nlohmann::json::parse(h);
        std::vector<uint8_t> data((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
        ArrayContainer c;
        c.meta = header.value("meta", nlohmann::json::object());
        for (const auto& e : header.at("arrays")) {
            NdArray a;
            a.dtype = e.at("dtype").get<std::string>();
            a.shape = e.at("shape").get<std::vector<int64_t>>();
            const auto off = e.at("offset").get<uint64_t>();
            const auto nb = e.at("nbytes").get<uint64_t>();
            if (off + nb > data.size()) throw std::runtime_error("truncated array container '" + path + "'");
            a.bytes.assign(data.begin() + static_cast<std::ptrdiff_t>(off),
                           data.begin() + static_cast<std::ptrdiff_t>(off + nb));
            c.arrays[e.at("name").get<std::string>()] = std::move(a);
        }
        return c;
    }
};

}  // namespace matte

#endif  // MATTE_ARRAY_CONTAINER_HPP
