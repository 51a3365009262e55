#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace mmasd::io {

static_assert(std::endian::native == std::endian::little, "binary formats assume a little-endian host");

/// Raised for unreadable, unwritable or malformed files.
class IoError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class BinaryWriter {
public:
    explicit BinaryWriter(const std::filesystem::path& path) : path_(path), out_(path, std::ios::binary)
    {
        if (!out_)
            throw IoError("cannot open " + path.string() + " for writing");
    }

    void magic(const char (&tag)[5]) { out_.write(tag, 4); }

    template <typename T>
    void put(T value)
    {
        out_.write(reinterpret_cast<const char*>(&value), sizeof(T));
    }

    template <typename T>
    void put_all(const std::vector<T>& values)
    {
        out_.write(reinterpret_cast<const char*>(values.data()),
                   static_cast<std::streamsize>(values.size() * sizeof(T)));
    }

    ~BinaryWriter() noexcept(false)
    {
        out_.flush();
        if (!out_ && std::uncaught_exceptions() == 0)
            throw IoError("write failed for " + path_.string());
    }

private:
    std::filesystem::path path_;
    std::ofstream out_;
};

class BinaryReader {
public:
    explicit BinaryReader(const std::filesystem::path& path) : path_(path), in_(path, std::ios::binary)
    {
        if (!in_)
            throw IoError("cannot open " + path.string());
    }

    void expect_magic(const char (&tag)[5])
    {
        char got[4] = {};
        in_.read(got, 4);
        if (!in_ || std::memcmp(got, tag, 4) != 0)
            throw IoError(path_.string() + ": bad magic, expected " + std::string(tag, 4));
    }

    template <typename T>
    T get()
    {
        T value{};
        in_.read(reinterpret_cast<char*>(&value), sizeof(T));
        if (!in_)
            throw IoError(path_.string() + ": truncated file");
        return value;
    }

    template <typename T>
    std::vector<T> get_all(std::size_t count)
    {
        std::vector<T> values(count);
        in_.read(reinterpret_cast<char*>(values.data()), static_cast<std::streamsize>(count * sizeof(T)));
        if (!in_)
            throw IoError(path_.string() + ": truncated file");
        return values;
    }

    void expect_end()
    {
        if (in_.peek() != std::char_traits<char>::eof())
            throw IoError(path_.string() + ": trailing bytes after payload");
    }

    const std::filesystem::path& path() const { return path_; }

private:
    std::filesystem::path path_;
    std::ifstream in_;
};

}  // namespace mmasd::io
