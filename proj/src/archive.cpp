#include "canet/archive.hpp"

#include <cstring>
#include <fstream>
#include <sstream>

#include "canet/error.hpp"

namespace canet {

namespace {

constexpr char kMagic[8] = {'C', 'A', 'N', 'E', 'T', 'A', 'R', 'C'};

template <typename T>
void put(std::string& buf, T v) {
    char bytes[sizeof(T)];
    std::memcpy(bytes, &v, sizeof(T));
    buf.append(bytes, sizeof(T));
}

class Reader {
public:
    Reader(std::string data, std::string source) : data_(std::move(data)), source_(std::move(source)) {}

    template <typename T>
    T get() {
        need(sizeof(T));
        T v;
        std::memcpy(&v, data_.data() + pos_, sizeof(T));
        pos_ += sizeof(T);
        return v;
    }
    std::string bytes(std::size_t n) {
        need(n);
        std::string s = data_.substr(pos_, n);
        pos_ += n;
        return s;
    }
    bool done() const { return pos_ == data_.size(); }

private:
    void need(std::size_t n) const {
        if (data_.size() - pos_ < n) throw DecodeError("truncated archive " + source_);
    }
    std::string data_;
    std::string source_;
    std::size_t pos_ = 0;
};

}  // namespace

const Tensor* Archive::find(const std::string& name) const {
    for (const auto& [n, t] : tensors)
        if (n == name) return &t;
    return nullptr;
}

void save_archive(const Archive& archive, const std::filesystem::path& path) {
    std::string buf(kMagic, sizeof(kMagic));
    put<std::uint32_t>(buf, Archive::kVersion);
    const std::string header = archive.header.dump();
    put<std::uint64_t>(buf, header.size());
    buf += header;
    put<std::uint32_t>(buf, static_cast<std::uint32_t>(archive.tensors.size()));
    for (const auto& [name, t] : archive.tensors) {
        put<std::uint32_t>(buf, static_cast<std::uint32_t>(name.size()));
        buf += name;
        put<std::uint32_t>(buf, static_cast<std::uint32_t>(t.rank()));
        for (int d : t.shape()) put<std::int32_t>(buf, d);
        for (double v : t.values()) put<double>(buf, v);
    }
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    // Write to a sibling file first so a crash never leaves a torn archive.
    const auto tmp = path.string() + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw IoError("cannot write " + tmp);
        out.write(buf.data(), static_cast<std::streamsize>(buf.size()));
        if (!out) throw IoError("short write to " + tmp);
    }
    std::filesystem::rename(tmp, path);
}

Archive load_archive(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot read " + path.string());
    std::stringstream ss;
    ss << in.rdbuf();
    Reader r(ss.str(), path.string());
    if (r.bytes(sizeof(kMagic)) != std::string(kMagic, sizeof(kMagic))) {
        throw DecodeError("not an archive: " + path.string());
    }
    const auto version = r.get<std::uint32_t>();
    if (version != Archive::kVersion) {
        throw DecodeError("unsupported archive version " + std::to_string(version) + " in " + path.string());
    }
    Archive a;
    const auto header_len = r.get<std::uint64_t>();
    try {
        a.header = nlohmann::json::parse(r.bytes(header_len));
    } catch (const nlohmann::json::parse_error& e) {
        throw DecodeError("bad archive header in " + path.string() + ": " + e.what());
    }
    const auto count = r.get<std::uint32_t>();
    for (std::uint32_t i = 0; i < count; ++i) {
        std::string name = r.bytes(r.get<std::uint32_t>());
        const auto rank = r.get<std::uint32_t>();
        if (rank > 8) throw DecodeError("implausible tensor rank in " + path.string());
        std::vector<int> shape;
        for (std::uint32_t d = 0; d < rank; ++d) {
            const auto dim = r.get<std::int32_t>();
            if (dim < 0) throw DecodeError("negative dimension in " + path.string());
            shape.push_back(dim);
        }
        Tensor t(shape);
        for (auto& v : t.values()) v = r.get<double>();
        a.tensors.emplace_back(std::move(name), std::move(t));
    }
    if (!r.done()) throw DecodeError("trailing bytes in archive " + path.string());
    return a;
}

void load_parameters(nn::ParamSet& params, const Archive& archive, const std::string& prefix) {
    for (auto& p : params.all()) {
        if (p.name.rfind(prefix, 0) != 0) continue;
        const Tensor* t = archive.find(p.name);
        if (!t) throw DecodeError("archive lacks parameter " + p.name);
        if (t->shape() != p.value.shape()) {
            throw DecodeError("shape mismatch for " + p.name + ": " + shape_string(t->shape()) + " vs " +
                              shape_string(p.value.shape()));
        }
        p.value = *t;
    }
}

void store_parameters(const nn::ParamSet& params, Archive& archive, const std::string& prefix) {
    for (const auto& p : params.all())
        if (p.name.rfind(prefix, 0) == 0) archive.add(p.name, p.value);
}

}  // namespace canet
