#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "vpl/common.hpp"
#include "vpl/optim.hpp"
#include "vpl/tensor.hpp"

namespace vpl {

static_assert(std::endian::native == std::endian::little,
              "checkpoint layout assumes a little-endian host");

using Json = nlohmann::ordered_json;

// Container: "VPL1" magic, u64 header length, JSON header, then raw 32-bit
// float arrays in header order. `meta` is free-form and self-describing
// (schedule, sampler settings, layout, normalization stats, optimizer step).
struct Checkpoint {
    Json meta;
    std::vector<Tensor> arrays;

    Tensor* find(const std::string& name) {
        for (auto& t : arrays)
            if (t.name() == name) return &t;
        return nullptr;
    }
    const Tensor* find(const std::string& name) const {
        for (const auto& t : arrays)
            if (t.name() == name) return &t;
        return nullptr;
    }
    Tensor require(const std::string& name) const {
        const Tensor* t = find(name);
        VPL_CHECK(t != nullptr, "checkpoint: missing array '%s'", name.c_str());
        return *t;
    }
};

inline void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ck,
                            const char* magic = "VPL1") {
    Json header;
    header["dtype"] = "f32";
    header["meta"] = ck.meta;
    Json arrays = Json::array();
    for (const auto& t : ck.arrays) {
        VPL_CHECK(!t.name().empty(), "save_checkpoint: unnamed array");
        Json a;
        a["name"] = t.name();
        a["shape"] = t.shape();
        arrays.push_back(std::move(a));
    }
    header["arrays"] = std::move(arrays);
    const std::string hs = header.dump();

    std::filesystem::create_directories(path.parent_path().empty() ? "." : path.parent_path());
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    VPL_CHECK(f.good(), "save_checkpoint: cannot open '%s'", path.string().c_str());
    VPL_CHECK(std::strlen(magic) == 4, "save_checkpoint: magic must be 4 bytes");
    f.write(magic, 4);
    const uint64_t hlen = hs.size();
    f.write(reinterpret_cast<const char*>(&hlen), sizeof(hlen));
    f.write(hs.data(), static_cast<std::streamsize>(hs.size()));
    std::vector<float> buf;
    for (const auto& t : ck.arrays) {
        buf.resize(t.numel());
        for (size_t i = 0; i < t.numel(); ++i) buf[i] = static_cast<float>(t.data()[i]);
        f.write(reinterpret_cast<const char*>(buf.data()),
                static_cast<std::streamsize>(buf.size() * sizeof(float)));
    }
    VPL_CHECK(f.good(), "save_checkpoint: write failed for '%s'", path.string().c_str());
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path,
                                  const char* magic = "VPL1") {
    std::ifstream f(path, std::ios::binary);
    if (!f.good())
        throw MissingArtifactError(
            detail::format("checkpoint not found: '%s'", path.string().c_str()));
    char got[4];
    f.read(got, 4);
    VPL_CHECK(f.good() && std::memcmp(got, magic, 4) == 0,
              "'%s' is not a %s file (bad magic)", path.string().c_str(), magic);
    uint64_t hlen = 0;
    f.read(reinterpret_cast<char*>(&hlen), sizeof(hlen));
    VPL_CHECK(f.good() && hlen > 0 && hlen < (1ull << 30), "'%s': corrupt header length",
              path.string().c_str());
    std::string hs(hlen, '\0');
    f.read(hs.data(), static_cast<std::streamsize>(hlen));
    VPL_CHECK(f.good(), "'%s': truncated header", path.string().c_str());
    Json header = Json::parse(hs, nullptr, false);
    VPL_CHECK(!header.is_discarded(), "'%s': header is not valid JSON", path.string().c_str());
    VPL_CHECK(header.value("dtype", "") == "f32", "'%s': unsupported dtype",
              path.string().c_str());

    Checkpoint ck;
    ck.meta = header.value("meta", Json::object());
    for (const auto& a : header["arrays"]) {
        const std::string name = a["name"].get<std::string>();
        Shape shape = a["shape"].get<Shape>();
        const size_t n = shape_numel(shape);
        std::vector<float> buf(n);
        f.read(reinterpret_cast<char*>(buf.data()),
               static_cast<std::streamsize>(n * sizeof(float)));
        VPL_CHECK(f.good(), "'%s': truncated array '%s'", path.string().c_str(), name.c_str());
        std::vector<double> vals(n);
        for (size_t i = 0; i < n; ++i) vals[i] = static_cast<double>(buf[i]);
        Tensor t = Tensor::from(std::move(shape), std::move(vals));
        t.set_name(name);
        ck.arrays.push_back(std::move(t));
    }
    return ck;
}

// Parameter and optimizer bridging. Optimizer moments ride along as extra
// arrays so training resumes from where it left off.
inline void pack_params(Checkpoint& ck, const ParamSet& ps) {
    for (const auto& p : ps.params) ck.arrays.push_back(p);
}

inline void pack_adam(Checkpoint& ck, const ParamSet& ps, const Adam& opt) {
    ck.meta["adam"] = {{"lr", opt.lr}, {"beta1", opt.beta1}, {"beta2", opt.beta2},
                       {"eps", opt.eps}, {"t", opt.t}};
    for (size_t i = 0; i < ps.params.size(); ++i) {
        Tensor m = Tensor::from(ps.params[i].shape(), opt.m[i]);
        m.set_name("__adam_m__/" + ps.params[i].name());
        Tensor v = Tensor::from(ps.params[i].shape(), opt.v[i]);
        v.set_name("__adam_v__/" + ps.params[i].name());
        ck.arrays.push_back(std::move(m));
        ck.arrays.push_back(std::move(v));
    }
}

// Copies stored values into an already-built ParamSet; shapes must match.
inline void unpack_params(const Checkpoint& ck, ParamSet& ps) {
    for (auto& p : ps.params) {
        const Tensor* src = ck.find(p.name());
        VPL_CHECK(src != nullptr, "checkpoint: missing parameter '%s'", p.name().c_str());
        VPL_SHAPE_CHECK(src->shape() == p.shape(), "checkpoint: '%s' stored %s, expected %s",
                        p.name().c_str(), shape_str(src->shape()).c_str(),
                        shape_str(p.shape()).c_str());
        p.data() = src->data();
    }
}

inline bool unpack_adam(const Checkpoint& ck, const ParamSet& ps, Adam& opt) {
    if (!ck.meta.contains("adam")) return false;
    const auto& a = ck.meta["adam"];
    opt.lr = a["lr"].get<double>();
    opt.beta1 = a["beta1"].get<double>();
    opt.beta2 = a["beta2"].get<double>();
    opt.eps = a["eps"].get<double>();
    opt.t = a["t"].get<int64_t>();
    opt.m.clear();
    opt.v.clear();
    for (const auto& p : ps.params) {
        opt.m.push_back(ck.require("__adam_m__/" + p.name()).data());
        opt.v.push_back(ck.require("__adam_v__/" + p.name()).data());
    }
    return true;
}

}  // namespace vpl
