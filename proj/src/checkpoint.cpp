#include "svsplat/checkpoint.hpp"

#include "svsplat/errors.hpp"
#include "svsplat/tensor_io.hpp"

#include <json.hpp>

#include <fstream>

namespace svsplat {

namespace fs = std::filesystem;

namespace {

std::string tensor_filename(const std::string& name) {
    std::string out = name;
    size_t pos = 0;
    while ((pos = out.find('.', pos)) != std::string::npos) {
        out.replace(pos, 1, "__");
        pos += 2;
    }
    return out + ".ctst";
}

} // namespace

void save_checkpoint(const fs::path& dir, const CheckpointData& data) {
    fs::create_directories(dir / "tensors");
    nlohmann::json manifest;
    manifest["format"] = 1;
    manifest["step"] = data.step;
    nlohmann::json tensors = nlohmann::json::object();
    for (const auto& [name, t] : data.tensors) {
        const std::string rel = "tensors/" + tensor_filename(name);
        write_tensor(dir / rel, t);
        tensors[name] = rel;
    }
    manifest["tensors"] = tensors;

    std::ofstream os(dir / "manifest.json", std::ios::binary | std::ios::trunc);
    if (!os) throw IoError("cannot write manifest: " + (dir / "manifest.json").string());
    os << manifest.dump(2) << "\n";
    if (!os) throw IoError("manifest write failed");
    data.config.save(dir / "config.txt");
}

CheckpointData load_checkpoint(const fs::path& dir) {
    const fs::path mpath = dir / "manifest.json";
    if (!fs::exists(mpath)) throw MissingInput("missing checkpoint manifest: " + mpath.string());
    std::ifstream is(mpath, std::ios::binary);
    nlohmann::json manifest;
    try {
        is >> manifest;
    } catch (const nlohmann::json::exception& e) {
        throw FormatError("bad checkpoint manifest: " + std::string(e.what()));
    }
    if (!manifest.contains("format") || manifest["format"].get<int>() != 1)
        throw FormatError("unsupported checkpoint format");

    CheckpointData data;
    data.step = manifest.value("step", int64_t{0});
    data.config = Config::load(dir / "config.txt");
    for (const auto& [name, rel] : manifest["tensors"].items())
        data.tensors.emplace(name, read_tensor(dir / rel.get<std::string>()));
    return data;
}

} // namespace svsplat
