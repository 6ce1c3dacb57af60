#pragma once

#include <bit>
#include <cstring>
#include <fstream>
#include <string>

#include "json.hpp"
#include "monelab/config.hpp"
#include "monelab/train.hpp"

namespace monelab {

static_assert(std::endian::native == std::endian::little,
              "checkpoint blobs store raw little-endian values");

// File layout:
//   line 1: "MONELAB-CKPT 1\n"
//   line 2: manifest byte count, decimal, "\n"
//   manifest: JSON (format_version, dtype, step, config, tensors, blob_nbytes)
//   blob: raw tensor data at the offsets the manifest declares
inline constexpr const char* kCheckpointMagic = "MONELAB-CKPT 1";

struct CheckpointInfo {
    int format_version = 0;
    Dtype dtype = Dtype::f64;
    int64_t step = 0;
    nlohmann::json config;
};

namespace ckpt_detail {

template <typename T>
void append_tensor(nlohmann::json& tensors, std::string& blob, const std::string& name,
                   const TensorT<T>& t, Dtype dtype) {
    nlohmann::json entry;
    entry["name"] = name;
    entry["shape"] = t.shape();
    entry["dtype"] = dtype_name(dtype);
    entry["offset"] = blob.size();
    entry["nbytes"] = static_cast<int64_t>(t.bytes());
    tensors.push_back(std::move(entry));
    const size_t old = blob.size();
    blob.resize(old + static_cast<size_t>(t.bytes()));
    std::memcpy(blob.data() + old, t.data(), static_cast<size_t>(t.bytes()));
}

inline nlohmann::json read_manifest(std::ifstream& in, const std::string& path,
                                    std::streampos* blob_start) {
    std::string magic;
    if (!std::getline(in, magic) || magic != kCheckpointMagic)
        throw FormatError("'" + path + "' is not a checkpoint (bad magic)");
    std::string len_line;
    if (!std::getline(in, len_line))
        throw FormatError("'" + path + "': truncated before manifest length");
    size_t manifest_len = 0;
    try {
        manifest_len = static_cast<size_t>(std::stoll(len_line));
    } catch (const std::exception&) {
        throw FormatError("'" + path + "': bad manifest length line");
    }
    std::string manifest(manifest_len, '\0');
    in.read(manifest.data(), static_cast<std::streamsize>(manifest_len));
    if (static_cast<size_t>(in.gcount()) != manifest_len)
        throw FormatError("'" + path + "': truncated manifest");
    *blob_start = in.tellg();
    try {
        return nlohmann::json::parse(manifest);
    } catch (const nlohmann::json::exception& e) {
        throw FormatError("'" + path + "': manifest is not valid JSON: " +
                          std::string(e.what()));
    }
}

template <typename T>
TensorT<T> read_tensor(const nlohmann::json& entry, const std::string& blob,
                       Dtype file_dtype) {
    const std::string name = entry.at("name").get<std::string>();
    const std::vector<int64_t> shape = entry.at("shape").get<std::vector<int64_t>>();
    const std::string dt = entry.at("dtype").get<std::string>();
    const int64_t offset = entry.at("offset").get<int64_t>();
    const int64_t nbytes = entry.at("nbytes").get<int64_t>();

    if (parse_dtype(dt) != file_dtype)
        throw FormatError("tensor '" + name + "' dtype " + dt +
                          " disagrees with checkpoint dtype");
    const int64_t numel = TensorT<T>::numel_of(shape);
    if (nbytes != numel * static_cast<int64_t>(sizeof(T)))
        throw FormatError("tensor '" + name + "' nbytes " + std::to_string(nbytes) +
                          " does not match shape and dtype");
    if (offset < 0 || offset + nbytes > static_cast<int64_t>(blob.size()))
        throw FormatError("truncated blob at tensor '" + name + "'");

    TensorT<T> t(shape);
    std::memcpy(t.data(), blob.data() + offset, static_cast<size_t>(nbytes));
    return t;
}

}  // namespace ckpt_detail

template <typename T>
void save_checkpoint(const TrainState<T>& st, const std::string& path) {
    const Dtype dtype = st.model.cfg.dtype;
    nlohmann::json tensors = nlohmann::json::array();
    std::string blob;
    for (int64_t i = 0; i < st.model.params.count(); ++i)
        ckpt_detail::append_tensor(tensors, blob, st.model.params.names[static_cast<size_t>(i)],
                                   st.model.params.tensors[static_cast<size_t>(i)], dtype);
    for (int64_t i = 0; i < st.model.params.count(); ++i)
        ckpt_detail::append_tensor(tensors, blob,
                                   "adam_m." + st.model.params.names[static_cast<size_t>(i)],
                                   st.adam_m[static_cast<size_t>(i)], dtype);
    for (int64_t i = 0; i < st.model.params.count(); ++i)
        ckpt_detail::append_tensor(tensors, blob,
                                   "adam_v." + st.model.params.names[static_cast<size_t>(i)],
                                   st.adam_v[static_cast<size_t>(i)], dtype);

    nlohmann::json manifest;
    manifest["format_version"] = 1;
    manifest["dtype"] = dtype_name(dtype);
    manifest["step"] = st.step;
    manifest["config"] = model_config_to_json(st.model.cfg);
    manifest["train"] = train_config_to_json(st.tcfg);
    manifest["tensors"] = std::move(tensors);
    manifest["blob_nbytes"] = blob.size();
    const std::string mtext = manifest.dump(2);

    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw FormatError("cannot open '" + path + "' for writing");
    out << kCheckpointMagic << "\n" << mtext.size() << "\n";
    out.write(mtext.data(), static_cast<std::streamsize>(mtext.size()));
    out.write(blob.data(), static_cast<std::streamsize>(blob.size()));
    if (!out) throw FormatError("write failed for '" + path + "'");
}

inline CheckpointInfo peek_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw FormatError("cannot open checkpoint '" + path + "'");
    std::streampos blob_start{};
    nlohmann::json manifest = ckpt_detail::read_manifest(in, path, &blob_start);
    CheckpointInfo info;
    try {
        info.format_version = manifest.at("format_version").get<int>();
        info.dtype = parse_dtype(manifest.at("dtype").get<std::string>());
        info.step = manifest.at("step").get<int64_t>();
        info.config = manifest.at("config");
    } catch (const nlohmann::json::exception& e) {
        throw FormatError("'" + path + "': manifest missing fields: " + std::string(e.what()));
    }
    if (info.format_version != 1)
        throw FormatError("'" + path + "': unsupported checkpoint format version " +
                          std::to_string(info.format_version));
    return info;
}

template <typename T>
TrainState<T> load_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw FormatError("cannot open checkpoint '" + path + "'");
    std::streampos blob_start{};
    nlohmann::json manifest = ckpt_detail::read_manifest(in, path, &blob_start);

    CheckpointInfo info;
    info.format_version = manifest.at("format_version").get<int>();
    info.dtype = parse_dtype(manifest.at("dtype").get<std::string>());
    if (info.format_version != 1)
        throw FormatError("unsupported checkpoint format version");
    if ((info.dtype == Dtype::f32) != (sizeof(T) == 4))
        throw FormatError("checkpoint dtype " + std::string(dtype_name(info.dtype)) +
                          " does not match requested load type");

    ModelConfig cfg = model_config_from_json(manifest.at("config"));
    TrainConfig tcfg = manifest.contains("train")
                           ? train_config_from_json(manifest.at("train"))
                           : TrainConfig{};

    std::string blob((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    const int64_t declared = manifest.at("blob_nbytes").get<int64_t>();
    if (static_cast<int64_t>(blob.size()) < declared) {
        // find the first tensor whose extent is missing, for the error message
        for (const auto& entry : manifest.at("tensors"))
            if (entry.at("offset").get<int64_t>() + entry.at("nbytes").get<int64_t>() >
                static_cast<int64_t>(blob.size()))
                throw FormatError("truncated blob at tensor '" +
                                  entry.at("name").get<std::string>() + "'");
        throw FormatError("truncated blob in '" + path + "'");
    }

    std::map<std::string, TensorT<T>> loaded;
    for (const auto& entry : manifest.at("tensors"))
        loaded.emplace(entry.at("name").get<std::string>(),
                       ckpt_detail::read_tensor<T>(entry, blob, info.dtype));

    TrainState<T> st = TrainState<T>::init(cfg, tcfg);
    st.step = manifest.at("step").get<int64_t>();
    for (int64_t i = 0; i < st.model.params.count(); ++i) {
        const std::string& name = st.model.params.names[static_cast<size_t>(i)];
        auto it = loaded.find(name);
        if (it == loaded.end()) throw FormatError("checkpoint missing tensor '" + name + "'");
        if (!it->second.same_shape(st.model.params.tensors[static_cast<size_t>(i)]))
            throw FormatError("tensor '" + name + "' shape disagrees with config");
        st.model.params.tensors[static_cast<size_t>(i)] = std::move(it->second);
        auto mi = loaded.find("adam_m." + name);
        auto vi = loaded.find("adam_v." + name);
        if (mi == loaded.end() || vi == loaded.end())
            throw FormatError("checkpoint missing optimizer state for '" + name + "'");
        st.adam_m[static_cast<size_t>(i)] = std::move(mi->second);
        st.adam_v[static_cast<size_t>(i)] = std::move(vi->second);
    }
    return st;
}

}  // namespace monelab
