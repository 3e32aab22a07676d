#include <doctest.h>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>

#include "stainsep/formats.hpp"
#include "stainsep/rng.hpp"

using namespace stainsep;
namespace fs = std::filesystem;

namespace {

std::string read_bytes(const fs::path& p) {
    std::ifstream f(p, std::ios::binary);
    REQUIRE(f.good());
    return std::string(std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>());
}

struct TempDir {
    fs::path path;
    TempDir() {
        path = fs::temp_directory_path() / ("stainsep_fmt_" + std::to_string(::getpid()));
        fs::create_directories(path);
    }
    ~TempDir() { fs::remove_all(path); }
};

ConcentrationMap random_map(Rng& rng, int h, int w, int k) {
    ConcentrationMap c;
    c.map = Image(h, w, k);
    for (auto& v : c.map.values) v = static_cast<float>(rng.uniform(0.0, 2.0));
    for (int i = 0; i < k; ++i) c.names.push_back("stain_" + std::to_string(i));
    return c;
}

}  // namespace

TEST_CASE("SQC1 round trip is byte identical") {
    TempDir dir;
    Rng rng(3);
    ConcentrationMap c = random_map(rng, 7, 5, 4);
    c.names = {"H", "CDX2", "MUC2", "CD8"};  // non-ascii-length variety
    const fs::path p1 = dir.path / "a.sqc1", p2 = dir.path / "b.sqc1";
    save_concentrations(p1.string(), c);

    const std::string bytes = read_bytes(p1);
    REQUIRE(bytes.size() >= 16);
    CHECK(bytes.substr(0, 4) == "SQC1");
    // little-endian u32 height follows the magic
    CHECK(static_cast<unsigned char>(bytes[4]) == 7);
    CHECK(static_cast<unsigned char>(bytes[5]) == 0);
    CHECK(static_cast<unsigned char>(bytes[8]) == 5);
    CHECK(static_cast<unsigned char>(bytes[12]) == 4);

    ConcentrationMap back = load_concentrations(p1.string());
    CHECK(back.names == c.names);
    REQUIRE(back.map.same_dims(c.map));
    CHECK(back.map.values == c.map.values);

    save_concentrations(p2.string(), back);
    CHECK(read_bytes(p2) == bytes);
}

TEST_CASE("SQC1 rejects corrupt and truncated files") {
    TempDir dir;
    Rng rng(5);
    const fs::path p = dir.path / "c.sqc1";
    save_concentrations(p.string(), random_map(rng, 3, 3, 2));
    std::string bytes = read_bytes(p);

    {
        std::ofstream f(dir.path / "badmagic.sqc1", std::ios::binary);
        std::string tampered = bytes;
        tampered[0] = 'X';
        f << tampered;
    }
    CHECK_THROWS_AS(load_concentrations((dir.path / "badmagic.sqc1").string()), FormatError);

    {
        std::ofstream f(dir.path / "short.sqc1", std::ios::binary);
        f << bytes.substr(0, bytes.size() / 2);
    }
    CHECK_THROWS_AS(load_concentrations((dir.path / "short.sqc1").string()), FormatError);
    CHECK_THROWS_AS(load_concentrations((dir.path / "missing.sqc1").string()), FormatError);
}

TEST_CASE("stain matrix JSON round trip is byte identical") {
    TempDir dir;
    StainMatrix s = normalize_columns(colorectal_panel_initial());
    const fs::path p1 = dir.path / "s1.json", p2 = dir.path / "s2.json";
    save_stain_matrix(p1.string(), s);
    StainMatrix back = load_stain_matrix(p1.string());
    CHECK(back.names == s.names);
    CHECK(back.normalized == s.normalized);
    REQUIRE(back.K() == s.K());
    for (int k = 0; k < s.K(); ++k)
        for (int i = 0; i < 3; ++i)
            CHECK(back.columns[k][i] == doctest::Approx(s.columns[k][i]).epsilon(1e-12));
    save_stain_matrix(p2.string(), back);
    CHECK(read_bytes(p2) == read_bytes(p1));

    {
        std::ofstream f(dir.path / "bad.json");
        f << "{\"version\": 1, \"K\": 2}";
    }
    CHECK_THROWS_AS(load_stain_matrix((dir.path / "bad.json").string()), FormatError);
    {
        std::ofstream f(dir.path / "notjson.json");
        f << "not json at all";
    }
    CHECK_THROWS_AS(load_stain_matrix((dir.path / "notjson.json").string()), FormatError);
}

TEST_CASE("SQCK checkpoint round trip is byte identical") {
    TempDir dir;
    Rng rng(7);
    Checkpoint cp;
    cp.config = EncoderConfig{.base_channels = 8, .stains = 3, .residual_blocks = 1};
    cp.step = 1234;
    cp.stain_names = {"H", "CDX2", "CD8"};
    for (const auto& [name, shape] :
         std::vector<std::pair<std::string, Shape>>{{"enc.in1.w", {8, 3, 3, 3}},
                                                    {"enc.in1.b", {1, 8, 1, 1}},
                                                    {"stain.u", {3, 3}}}) {
        TensorRecord rec;
        rec.name = name;
        rec.shape = shape;
        rec.values.resize(static_cast<size_t>(shape_numel(shape)));
        for (auto& v : rec.values) v = static_cast<float>(rng.normal(0.0, 1.0));
        cp.params.push_back(std::move(rec));
    }
    cp.has_optimizer = true;
    TensorRecord mom;
    mom.name = "adam.m.0";
    mom.shape = {8, 3, 3, 3};
    mom.values.assign(216, 0.5f);
    cp.optimizer.push_back(mom);
    TensorRecord tstep;
    tstep.name = "adam.t";
    tstep.shape = {1};
    tstep.values = {42.0f};
    cp.optimizer.push_back(tstep);

    const fs::path p1 = dir.path / "a.sqck", p2 = dir.path / "b.sqck";
    save_checkpoint(p1.string(), cp);
    CHECK(read_bytes(p1).substr(0, 4) == "SQCK");

    Checkpoint back = load_checkpoint(p1.string());
    CHECK(back.config == cp.config);
    CHECK(back.step == cp.step);
    CHECK(back.stain_names == cp.stain_names);
    REQUIRE(back.params.size() == cp.params.size());
    for (size_t i = 0; i < cp.params.size(); ++i) {
        CHECK(back.params[i].name == cp.params[i].name);
        CHECK(back.params[i].shape == cp.params[i].shape);
        CHECK(back.params[i].values == cp.params[i].values);
    }
    REQUIRE(back.has_optimizer);
    REQUIRE(back.optimizer.size() == 2);
    CHECK(back.optimizer[1].values == tstep.values);

    save_checkpoint(p2.string(), back);
    CHECK(read_bytes(p2) == read_bytes(p1));

    // without optimizer state
    cp.has_optimizer = false;
    cp.optimizer.clear();
    save_checkpoint(p1.string(), cp);
    Checkpoint slim = load_checkpoint(p1.string());
    CHECK_FALSE(slim.has_optimizer);
    CHECK(slim.optimizer.empty());
    save_checkpoint(p2.string(), slim);
    CHECK(read_bytes(p2) == read_bytes(p1));
}

TEST_CASE("SQCK rejects tampered headers") {
    TempDir dir;
    Checkpoint cp;
    cp.config = EncoderConfig{.base_channels = 4, .stains = 2, .residual_blocks = 0};
    cp.stain_names = {"a", "b"};
    const fs::path p = dir.path / "a.sqck";
    save_checkpoint(p.string(), cp);
    std::string bytes = read_bytes(p);
    bytes[2] = 'X';
    {
        std::ofstream f(p, std::ios::binary);
        f << bytes;
    }
    CHECK_THROWS_AS(load_checkpoint(p.string()), FormatError);
}

TEST_CASE("SQFB tensor bank round trip is byte identical") {
    TempDir dir;
    Rng rng(11);
    std::vector<TensorRecord> bank;
    for (int i = 0; i < 3; ++i) {
        TensorRecord rec;
        rec.name = "stage" + std::to_string(i) + ".w";
        rec.shape = {4, 3, 3, 3};
        rec.values.resize(108);
        for (auto& v : rec.values) v = static_cast<float>(rng.normal(0.0, 0.1));
        bank.push_back(std::move(rec));
    }
    const fs::path p1 = dir.path / "a.sqfb", p2 = dir.path / "b.sqfb";
    save_tensor_bank(p1.string(), bank);
    auto back = load_tensor_bank(p1.string());
    REQUIRE(back.size() == bank.size());
    for (size_t i = 0; i < bank.size(); ++i) {
        CHECK(back[i].name == bank[i].name);
        CHECK(back[i].shape == bank[i].shape);
        CHECK(back[i].values == bank[i].values);
    }
    save_tensor_bank(p2.string(), back);
    CHECK(read_bytes(p2) == read_bytes(p1));
    CHECK_THROWS_AS(load_tensor_bank((dir.path / "nope.sqfb").string()), FormatError);
}
