#include "mmasd/tensor_io.hpp"

#include <cctype>
#include <fstream>
#include <map>

namespace mmasd::io {

void write_tensor(const std::filesystem::path& path, const ad::Tensor& tensor)
{
    BinaryWriter out(path);
    out.magic("MMT1");
    out.put<std::uint32_t>(static_cast<std::uint32_t>(tensor.rank()));
    for (auto extent : tensor.shape())
        out.put<std::uint32_t>(static_cast<std::uint32_t>(extent));
    out.put_all(std::vector<double>(tensor.data().begin(), tensor.data().end()));
}

ad::Tensor read_tensor(const std::filesystem::path& path)
{
    BinaryReader in(path);
    in.expect_magic("MMT1");
    auto rank = in.get<std::uint32_t>();
    if (rank == 0 || rank > 8)
        throw IoError(path.string() + ": implausible rank " + std::to_string(rank));
    ad::Shape shape;
    for (std::uint32_t i = 0; i < rank; ++i) {
        auto extent = in.get<std::uint32_t>();
        if (extent == 0)
            throw IoError(path.string() + ": zero extent");
        shape.push_back(extent);
    }
    auto values = in.get_all<double>(ad::numel(shape));
    in.expect_end();
    return ad::Tensor::from(std::move(shape), std::move(values));
}

namespace {

std::string file_name_for(const std::string& name)
{
    std::string out;
    for (char c : name)
        out += (std::isalnum(static_cast<unsigned char>(c)) || c == '.' || c == '_' || c == '-') ? c : '_';
    return out + ".mmt";
}

}  // namespace

void save_checkpoint(const std::filesystem::path& dir, const nn::ParameterStore& store,
                     const std::vector<NamedBuffer>& buffers, const nlohmann::json& meta)
{
    std::filesystem::create_directories(dir);
    nlohmann::json manifest;
    manifest["parameters"] = nlohmann::json::object();
    manifest["buffers"] = nlohmann::json::object();
    for (const auto& p : store.all()) {
        std::string file = file_name_for(p.name);
        write_tensor(dir / file, p.tensor);
        manifest["parameters"][p.name] = file;
    }
    for (const auto& b : buffers) {
        std::string file = "buffer." + file_name_for(b.name);
        write_tensor(dir / file, ad::Tensor::from({b.values->size()}, *b.values));
        manifest["buffers"][b.name] = file;
    }
    manifest["meta"] = meta;
    std::ofstream out(dir / "manifest.json");
    if (!out)
        throw IoError("cannot write " + (dir / "manifest.json").string());
    out << manifest.dump(2) << '\n';
}

nlohmann::json read_manifest(const std::filesystem::path& dir)
{
    std::ifstream in(dir / "manifest.json");
    if (!in)
        throw IoError("cannot open " + (dir / "manifest.json").string());
    try {
        return nlohmann::json::parse(in);
    } catch (const nlohmann::json::exception& e) {
        throw IoError((dir / "manifest.json").string() + ": " + e.what());
    }
}

nlohmann::json load_checkpoint(const std::filesystem::path& dir, nn::ParameterStore& store,
                               const std::vector<NamedBuffer>& buffers)
{
    auto manifest = read_manifest(dir);
    const auto& params = manifest.at("parameters");
    for (const auto& p : store.all()) {
        if (!params.contains(p.name))
            throw IoError("checkpoint " + dir.string() + " lacks parameter " + p.name);
        ad::Tensor loaded = read_tensor(dir / params[p.name].get<std::string>());
        if (loaded.shape() != p.tensor.shape())
            throw IoError("checkpoint parameter " + p.name + " has shape " + ad::shape_str(loaded.shape()) +
                          ", model expects " + ad::shape_str(p.tensor.shape()));
        ad::Tensor target = p.tensor;
        std::copy(loaded.data().begin(), loaded.data().end(), target.data().begin());
    }
    const auto& bufs = manifest.value("buffers", nlohmann::json::object());
    for (const auto& b : buffers) {
        if (!bufs.contains(b.name))
            throw IoError("checkpoint " + dir.string() + " lacks buffer " + b.name);
        ad::Tensor loaded = read_tensor(dir / bufs[b.name].get<std::string>());
        b.values->assign(loaded.data().begin(), loaded.data().end());
    }
    return manifest.value("meta", nlohmann::json::object());
}

}  // namespace mmasd::io
