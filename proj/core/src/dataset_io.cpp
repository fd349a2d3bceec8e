#include "noforge/dataset_io.hpp"

#include <bit>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>

#include <json.hpp>

namespace noforge {

static_assert(std::endian::native == std::endian::little,
              "tensor container assumes a little-endian host");

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

std::uintmax_t file_size_or_throw(const fs::path& p) {
    std::error_code ec;
    const auto size = fs::file_size(p, ec);
    if (ec) throw CorruptData("missing tensor file " + p.string());
    return size;
}

std::vector<std::uint8_t> read_bytes(const fs::path& p, std::uintmax_t expected) {
    if (file_size_or_throw(p) != expected)
        throw CorruptData("tensor file " + p.string() + " has wrong size (expected " +
                          std::to_string(expected) + " bytes)");
    std::ifstream f(p, std::ios::binary);
    if (!f) throw IOFailure("cannot open " + p.string());
    std::vector<std::uint8_t> bytes(static_cast<std::size_t>(expected));
    f.read(reinterpret_cast<char*>(bytes.data()), static_cast<std::streamsize>(expected));
    if (!f) throw CorruptData("short read from " + p.string());
    return bytes;
}

void write_bytes(const fs::path& p, const void* data, std::size_t n) {
    std::ofstream f(p, std::ios::binary | std::ios::trunc);
    if (!f) throw IOFailure("cannot open " + p.string() + " for writing");
    f.write(static_cast<const char*>(data), static_cast<std::streamsize>(n));
    if (!f) throw IOFailure("short write to " + p.string());
}

} // namespace

void write_raw_f32(const std::string& path, const Tensor& t) {
    write_bytes(path, t.data.data(), t.data.size() * sizeof(float));
}

Tensor read_raw_f32(const std::string& path, Shape shape) {
    Tensor t(std::move(shape));
    const auto bytes = read_bytes(path, static_cast<std::uintmax_t>(t.data.size() * sizeof(float)));
    std::memcpy(t.data.data(), bytes.data(), bytes.size());
    return t;
}

void save_dataset(const std::string& dir, const std::vector<SampleRecord>& records) {
    if (records.empty()) throw InvalidConfig("refusing to save an empty dataset");
    const fs::path root(dir);
    std::error_code ec;
    fs::create_directories(root, ec);
    if (ec) throw IOFailure("cannot create dataset directory " + dir);

    const auto& grid_shape = records[0].t1.shape;
    json manifest;
    manifest["version"] = 1;
    manifest["grid"] = {grid_shape[1], grid_shape[2], grid_shape[3]};
    json samples = json::array();

    for (const auto& rec : records) {
        if (rec.t1.shape != grid_shape) throw ShapeMismatch("all records must share one grid shape");
        const std::string base = rec.subject_id;
        json files;
        files["t1"] = base + "_t1.bin";
        files["mask"] = base + "_mask.bin";
        files["disp_real"] = base + "_disp_real.bin";
        files["disp_imag"] = base + "_disp_imag.bin";

        write_raw_f32((root / (base + "_t1.bin")).string(), rec.t1);
        write_raw_f32((root / (base + "_disp_real.bin")).string(), rec.disp_real);
        write_raw_f32((root / (base + "_disp_imag.bin")).string(), rec.disp_imag);
        std::vector<std::uint8_t> mask_bytes(rec.mask.data.size());
        for (std::size_t i = 0; i < mask_bytes.size(); ++i)
            mask_bytes[i] = rec.mask.data[i] != 0.0f ? 1 : 0;
        write_bytes(root / (base + "_mask.bin"), mask_bytes.data(), mask_bytes.size());

        json s;
        s["id"] = rec.subject_id;
        s["files"] = files;
        s["age"] = rec.age;
        s["sex"] = rec.sex;
        s["brain_volume_cm3"] = rec.brain_volume_cm3;
        s["frequency_hz"] = rec.frequency_hz;
        s["direction"] = direction_name(rec.direction);
        samples.push_back(std::move(s));
    }
    manifest["samples"] = std::move(samples);

    std::ofstream f(root / "manifest.json", std::ios::trunc);
    if (!f) throw IOFailure("cannot write manifest.json in " + dir);
    f << manifest.dump(2) << "\n";
}

std::vector<SampleRecord> load_dataset(const std::string& dir) {
    const fs::path root(dir);
    std::ifstream f(root / "manifest.json");
    if (!f) throw CorruptData("no manifest.json in " + dir);
    json manifest;
    try {
        f >> manifest;
    } catch (const json::exception& e) {
        throw CorruptData("manifest.json parse error: " + std::string(e.what()));
    }
    try {
        if (manifest.at("version").get<int>() != 1)
            throw CorruptData("unsupported dataset container version");
        const auto grid = manifest.at("grid");
        const std::int64_t w = grid.at(0).get<std::int64_t>();
        const std::int64_t h = grid.at(1).get<std::int64_t>();
        const std::int64_t d = grid.at(2).get<std::int64_t>();
        const Shape field_shape{1, w, h, d};
        const Shape disp_shape{3, w, h, d};
        const std::uintmax_t voxels = static_cast<std::uintmax_t>(w * h * d);

        std::vector<SampleRecord> records;
        for (const auto& s : manifest.at("samples")) {
            SampleRecord rec;
            rec.subject_id = s.at("id").get<std::string>();
            rec.age = s.at("age").get<double>();
            rec.sex = s.at("sex").get<int>();
            rec.brain_volume_cm3 = s.at("brain_volume_cm3").get<double>();
            rec.frequency_hz = s.at("frequency_hz").get<double>();
            rec.direction = direction_from_name(s.at("direction").get<std::string>());
            const auto& files = s.at("files");
            rec.t1 = read_raw_f32((root / files.at("t1").get<std::string>()).string(), field_shape);
            rec.disp_real =
                read_raw_f32((root / files.at("disp_real").get<std::string>()).string(), disp_shape);
            rec.disp_imag =
                read_raw_f32((root / files.at("disp_imag").get<std::string>()).string(), disp_shape);
            const auto mask_bytes = read_bytes(root / files.at("mask").get<std::string>(), voxels);
            rec.mask = Tensor(field_shape);
            for (std::size_t i = 0; i < mask_bytes.size(); ++i) {
                if (mask_bytes[i] > 1) throw CorruptData("non-binary mask in sample " + rec.subject_id);
                rec.mask.data[i] = static_cast<float>(mask_bytes[i]);
            }
            records.push_back(std::move(rec));
        }
        if (records.empty()) throw CorruptData("dataset manifest lists no samples");
        return records;
    } catch (const json::exception& e) {
        throw CorruptData("manifest.json schema error: " + std::string(e.what()));
    }
}

} // namespace noforge
