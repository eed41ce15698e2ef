#include "qdpd/checkpoint.hpp"

#include <cstdio>
#include <filesystem>
#include <fstream>

#include "qdpd/errors.hpp"

namespace qdpd {

namespace {

std::string blob_path_for(const std::string& json_path) {
    std::filesystem::path p(json_path);
    p.replace_extension(".bin");
    return p.string();
}

}  // namespace

void write_json(const std::string& path, const nlohmann::json& j) {
    std::string tmp = path + ".tmp";
    {
        std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
        if (!os) throw IoError("cannot write " + tmp);
        os << j.dump(2) << "\n";
    }
    std::filesystem::rename(tmp, path);
}

nlohmann::json read_json(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot read " + path);
    nlohmann::json j;
    try {
        is >> j;
    } catch (const nlohmann::json::parse_error& e) {
        throw IoError("malformed JSON in " + path + ": " + e.what());
    }
    return j;
}

void save_checkpoint(const std::string& json_path,
                     const std::vector<std::pair<std::string, const Tensor*>>& entries,
                     const nlohmann::json& extra) {
    static_assert(sizeof(float) == 4);
    std::string blob = blob_path_for(json_path);
    nlohmann::json manifest;
    manifest["format"] = "qdpd-checkpoint";
    manifest["version"] = 1;
    manifest["byte_order"] = "little";
    manifest["blob"] = std::filesystem::path(blob).filename().string();
    nlohmann::json jentries = nlohmann::json::array();

    std::ofstream os(blob, std::ios::binary | std::ios::trunc);
    if (!os) throw IoError("cannot write " + blob);
    int64_t offset = 0;
    for (const auto& [name, t] : entries) {
        nlohmann::json e;
        e["name"] = name;
        e["shape"] = t->shape;
        e["dtype"] = "f32";
        e["offset_bytes"] = offset;
        jentries.push_back(std::move(e));
        os.write(reinterpret_cast<const char*>(t->data.data()),
                 static_cast<std::streamsize>(t->data.size() * sizeof(float)));
        offset += static_cast<int64_t>(t->data.size() * sizeof(float));
    }
    if (!os) throw IoError("short write to " + blob);
    os.close();
    manifest["entries"] = std::move(jentries);
    manifest["extra"] = extra;
    write_json(json_path, manifest);
}

const Tensor& Checkpoint::at(const std::string& name) const {
    auto it = tensors.find(name);
    if (it == tensors.end()) throw IoError("checkpoint is missing tensor '" + name + "'");
    return it->second;
}

Checkpoint load_checkpoint(const std::string& json_path) {
    nlohmann::json manifest = read_json(json_path);
    if (manifest.value("format", "") != "qdpd-checkpoint")
        throw IoError(json_path + " is not a qdpd checkpoint manifest");
    std::filesystem::path dir = std::filesystem::path(json_path).parent_path();
    std::string blob = (dir / manifest.at("blob").get<std::string>()).string();
    std::ifstream is(blob, std::ios::binary);
    if (!is) throw IoError("cannot read blob " + blob);

    Checkpoint ck;
    ck.extra = manifest.value("extra", nlohmann::json::object());
    for (const auto& e : manifest.at("entries")) {
        std::string name = e.at("name").get<std::string>();
        std::vector<int> shape = e.at("shape").get<std::vector<int>>();
        if (e.value("dtype", "f32") != "f32")
            throw IoError("unsupported dtype for '" + name + "'");
        int64_t off = e.at("offset_bytes").get<int64_t>();
        Tensor t(shape);
        is.seekg(off);
        is.read(reinterpret_cast<char*>(t.data.data()),
                static_cast<std::streamsize>(t.data.size() * sizeof(float)));
        if (!is) throw IoError("blob " + blob + " truncated while reading '" + name + "'");
        ck.tensors.emplace(std::move(name), std::move(t));
    }
    return ck;
}

}  // namespace qdpd
