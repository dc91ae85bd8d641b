// checkpoint.hpp — single-file self-describing checkpoints.
//
// Layout: 9-byte magic "AIMCKPT1\n", a little-endian u64 header length, a JSON
// header (epoch, config snapshot, parameter/optimizer blob directory, RNG
// states), then the raw float32 blobs in directory order. Everything needed to
// rebuild the model and reproduce an eval pass lives inside the one file.

#ifndef AIM_CHECKPOINT_HPP
#define AIM_CHECKPOINT_HPP

#include <cstring>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "aim/config.hpp"
#include "aim/topdown.hpp"

namespace aim {

inline constexpr char kCheckpointMagic[] = "AIMCKPT1\n";  // 9 bytes sans NUL

struct CheckpointData {
    int64_t epoch = 0;
    nlohmann::json config;
    std::vector<std::pair<std::string, Tensor<float>>> params;
    int64_t opt_step = 0;
    std::vector<std::pair<std::string, Tensor<float>>> opt_m, opt_v;
    std::map<std::string, std::string> rng_states;
};

namespace detail {

inline void write_blob(std::ofstream& f, const Tensor<float>& t) {
    f.write(reinterpret_cast<const char*>(t.data()),
            std::streamsize(size_t(t.size()) * sizeof(float)));
}

inline Tensor<float> read_blob(std::ifstream& f, const Shape& shape, const std::string& path) {
    Tensor<float> t(shape);
    f.read(reinterpret_cast<char*>(t.data()), std::streamsize(size_t(t.size()) * sizeof(float)));
    AIM_CHECK(f.gcount() == std::streamsize(size_t(t.size()) * sizeof(float)), IoError,
              path << ": truncated parameter blob");
    return t;
}

inline nlohmann::json blob_directory(const std::vector<std::pair<std::string, Tensor<float>>>& v) {
    nlohmann::json dir = nlohmann::json::array();
    for (const auto& [name, t] : v) dir.push_back({{"name", name}, {"shape", t.shape()}});
    return dir;
}

}  // namespace detail

inline void save_checkpoint(const std::string& path, const CheckpointData& ck) {
    nlohmann::json header;
    header["epoch"] = ck.epoch;
    header["config"] = ck.config;
    header["params"] = detail::blob_directory(ck.params);
    header["opt"] = {{"step", ck.opt_step},
                     {"m", detail::blob_directory(ck.opt_m)},
                     {"v", detail::blob_directory(ck.opt_v)}};
    header["rng"] = ck.rng_states;
    const std::string hs = header.dump();

    std::ofstream f(path, std::ios::binary);
    AIM_CHECK(f.good(), IoError, "cannot open " << path << " for writing");
    f.write(kCheckpointMagic, 9);
    const uint64_t len = hs.size();
    char lenbuf[8];
    for (int i = 0; i < 8; ++i) lenbuf[i] = char((len >> (8 * i)) & 0xff);
    f.write(lenbuf, 8);
    f.write(hs.data(), std::streamsize(hs.size()));
    for (const auto& [name, t] : ck.params) detail::write_blob(f, t);
    for (const auto& [name, t] : ck.opt_m) detail::write_blob(f, t);
    for (const auto& [name, t] : ck.opt_v) detail::write_blob(f, t);
    AIM_CHECK(f.good(), IoError, "failed writing " << path);
}

inline CheckpointData load_checkpoint(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    AIM_CHECK(f.good(), IoError, "cannot open " << path);
    char magic[9];
    f.read(magic, 9);
    AIM_CHECK(f.gcount() == 9 && std::memcmp(magic, kCheckpointMagic, 9) == 0, IoError,
              path << ": not a checkpoint (bad magic)");
    char lenbuf[8];
    f.read(lenbuf, 8);
    AIM_CHECK(f.gcount() == 8, IoError, path << ": truncated header length");
    uint64_t len = 0;
    for (int i = 0; i < 8; ++i) len |= uint64_t(uint8_t(lenbuf[i])) << (8 * i);
    AIM_CHECK(len > 0 && len < (1ull << 30), IoError, path << ": implausible header length");
    std::string hs(len, '\0');
    f.read(hs.data(), std::streamsize(len));
    AIM_CHECK(f.gcount() == std::streamsize(len), IoError, path << ": truncated header");

    nlohmann::json header;
    try {
        header = nlohmann::json::parse(hs);
    } catch (const nlohmann::json::exception& e) {
        AIM_THROW(IoError, path << ": bad header json: " << e.what());
    }
    CheckpointData ck;
    ck.epoch = header.at("epoch").get<int64_t>();
    ck.config = header.at("config");
    ck.opt_step = header.at("opt").at("step").get<int64_t>();
    for (const auto& [name, state] : header.at("rng").items()) ck.rng_states[name] = state;

    const auto read_section = [&](const nlohmann::json& dir,
                                  std::vector<std::pair<std::string, Tensor<float>>>& out) {
        for (const auto& e : dir) {
            out.emplace_back(e.at("name").get<std::string>(),
                             detail::read_blob(f, e.at("shape").get<Shape>(), path));
        }
    };
    read_section(header.at("params"), ck.params);
    read_section(header.at("opt").at("m"), ck.opt_m);
    read_section(header.at("opt").at("v"), ck.opt_v);
    return ck;
}

// Snapshot the model's parameters (by registration order, names included).
template <typename T>
std::vector<std::pair<std::string, Tensor<float>>> snapshot_params(Model<T>& model) {
    std::vector<std::pair<std::string, Tensor<float>>> out;
    for (Param<T>* p : model.parameters()) {
        out.emplace_back(p->name, p->value.template cast<float>());
    }
    return out;
}

// Copy checkpointed parameters back into a freshly constructed model. Every
// parameter must be present with the exact shape; extras are rejected.
template <typename T>
void restore_params(Model<T>& model,
                    const std::vector<std::pair<std::string, Tensor<float>>>& saved) {
    std::map<std::string, const Tensor<float>*> by_name;
    for (const auto& [name, t] : saved) {
        AIM_CHECK(by_name.emplace(name, &t).second, IoError,
                  "checkpoint: duplicate parameter '" << name << "'");
    }
    size_t used = 0;
    for (Param<T>* p : model.parameters()) {
        const auto it = by_name.find(p->name);
        AIM_CHECK(it != by_name.end(), IoError,
                  "checkpoint: missing parameter '" << p->name << "'");
        AIM_CHECK(it->second->shape() == p->value.shape(), IoError,
                  "checkpoint: parameter '" << p->name << "' has shape "
                                            << shape_str(it->second->shape()) << ", model wants "
                                            << shape_str(p->value.shape()));
        p->value = it->second->template cast<T>();
        ++used;
    }
    AIM_CHECK(used == by_name.size(), IoError,
              "checkpoint: " << by_name.size() - used << " extra parameters not in the model");
}

// Rebuild the model a checkpoint was saved from (config snapshot + weights).
inline std::pair<RunConfig, std::unique_ptr<Model<float>>> restore_model(
    const CheckpointData& ck) {
    RunConfig cfg = parse_run_config(ck.config);
    auto model = std::make_unique<Model<float>>(cfg.model, cfg.seed);
    restore_params(*model, ck.params);
    return {cfg, std::move(model)};
}

}  // namespace aim

#endif  // AIM_CHECKPOINT_HPP
