#include <gtest/gtest.h>

#include <bit>
#include <cstring>
#include <filesystem>

#include "nwrs/nwrs.hpp"
#include "test_util.hpp"

using namespace nwrs;

namespace {

std::filesystem::path temp_path(const std::string& name) {
    return std::filesystem::temp_directory_path() / ("nwrs_container_test_" + name);
}

std::uint64_t read_le(const std::vector<std::uint8_t>& b, std::size_t at, int bytes) {
    std::uint64_t v = 0;
    for (int k = bytes - 1; k >= 0; --k) v = (v << 8) | b[at + static_cast<std::size_t>(k)];
    return v;
}

template <class E>
std::string error_of(const std::vector<std::uint8_t>& bytes) {
    try {
        decode_container(bytes);
    } catch (const E& e) {
        return e.what();
    } catch (const std::exception& e) {
        return std::string("wrong error type: ") + e.what();
    }
    return "no error";
}

}  // namespace

TEST(Container, LayoutIsLittleEndianAndAligned) {
    const auto& m = fixture::reference();
    const auto bytes = encode_container(m);
    ASSERT_GE(bytes.size(), 16u);
    EXPECT_EQ(std::string(bytes.begin(), bytes.begin() + 4), "NWRS");
    EXPECT_EQ(read_le(bytes, 4, 4), 1u);
    const auto len = read_le(bytes, 8, 8);
    const std::size_t blob = 16 + len;
    EXPECT_EQ(blob % 8, 0u);
    const auto manifest = json::parse(bytes.begin() + 16, bytes.begin() + static_cast<std::ptrdiff_t>(blob));
    bool seen_weight = false;
    for (const auto& t : manifest.at("tensors")) {
        EXPECT_EQ(t.at("dtype"), "f32");
        EXPECT_EQ(t.at("offset").get<std::size_t>() % 8, 0u);
        if (t.at("name") == "layers.1.weight") {
            seen_weight = true;
            const auto off = blob + t.at("offset").get<std::size_t>();
            const auto first = static_cast<std::uint32_t>(read_le(bytes, off, 4));
            EXPECT_EQ(std::bit_cast<float>(first), m.params[1].weight[0]);
            EXPECT_EQ(t.at("byteLength"), 32 * 32 * 4);
        }
    }
    EXPECT_TRUE(seen_weight);
}

TEST(Container, FileRoundTripOnReferenceModels) {
    for (bool conv : {false, true}) {
        const auto& m = fixture::reference(conv);
        const auto path = temp_path(conv ? "conv.nwrs" : "mlp.nwrs");
        save(m, path);
        const auto back = load(path);
        EXPECT_TRUE(back.bit_equal(m));
        EXPECT_EQ(back.metadata, m.metadata);
        EXPECT_EQ(back.input_shape, m.input_shape);
        std::filesystem::remove(path);
    }
}

TEST(Container, RandomBundlesRoundTripBitExact) {
    for (std::uint64_t seed = 0; seed < 50; ++seed) {
        const auto m = fixture::random_bundle(seed);
        const auto bytes = encode_container(m);
        const auto back = decode_container(bytes);
        EXPECT_TRUE(back.bit_equal(m)) << seed;
        EXPECT_EQ(back.metadata, m.metadata) << seed;
        EXPECT_EQ(encode_container(back), bytes) << seed;
    }
}

TEST(Container, BadMagicAndVersion) {
    auto bytes = encode_container(fixture::reference());
    auto v2 = bytes;
    v2[4] = 2;
    EXPECT_NE(error_of<format_error>(v2).find("unsupported version 2"), std::string::npos);
    bytes[0] = 'X';
    EXPECT_NE(error_of<format_error>(bytes).find("bad magic"), std::string::npos);
    EXPECT_NE(error_of<format_error>({'N', 'W'}).find("too short"), std::string::npos);
}

TEST(Container, TruncatedBlobNamesFirstMissingTensor) {
    const auto bytes = encode_container(fixture::reference());
    const std::size_t blob = 16 + read_le(bytes, 8, 8);
    const auto manifest = json::parse(bytes.begin() + 16, bytes.begin() + static_cast<std::ptrdiff_t>(blob));
    for (const auto& t : manifest.at("tensors")) {
        const auto off = t.at("offset").get<std::size_t>();
        const std::vector<std::uint8_t> cut(bytes.begin(), bytes.begin() + static_cast<std::ptrdiff_t>(blob + off + 4));
        const auto msg = error_of<corruption_error>(cut);
        EXPECT_NE(msg.find("'" + t.at("name").get<std::string>() + "'"), std::string::npos) << msg;
        EXPECT_NE(msg.find("outside the blob"), std::string::npos) << msg;
    }
}

TEST(Container, ManifestInconsistenciesAreCorruption) {
    const auto& m = fixture::reference();
    const auto bytes = encode_container(m);
    const std::size_t blob = 16 + read_le(bytes, 8, 8);
    auto manifest = json::parse(bytes.begin() + 16, bytes.begin() + static_cast<std::ptrdiff_t>(blob));
    const std::vector<std::uint8_t> payload(bytes.begin() + static_cast<std::ptrdiff_t>(blob), bytes.end());
    auto rebuild = [&](const json& man) {
        std::string text = man.dump();
        while ((16 + text.size()) % 8) text += ' ';
        std::vector<std::uint8_t> out(bytes.begin(), bytes.begin() + 8);
        for (int k = 0; k < 8; ++k) out.push_back(static_cast<std::uint8_t>(text.size() >> (8 * k)));
        out.insert(out.end(), text.begin(), text.end());
        out.insert(out.end(), payload.begin(), payload.end());
        return out;
    };
    EXPECT_TRUE(decode_container(rebuild(manifest)).bit_equal(m));

    auto overlap = manifest;
    overlap["tensors"][1]["offset"] = 0;
    EXPECT_NE(error_of<corruption_error>(rebuild(overlap)).find("overlap"), std::string::npos);

    auto misaligned = manifest;
    misaligned["tensors"][1]["offset"] = misaligned["tensors"][1]["offset"].get<std::size_t>() + 4;
    EXPECT_NE(error_of<corruption_error>(rebuild(misaligned)).find("aligned"), std::string::npos);

    auto missing = manifest;
    missing["tensors"].erase(missing["tensors"].size() - 1);
    EXPECT_NE(error_of<corruption_error>(rebuild(missing)).find("missing"), std::string::npos);

    auto wrong_len = manifest;
    wrong_len["tensors"][0]["byteLength"] = 4;
    EXPECT_NE(error_of<corruption_error>(rebuild(wrong_len)).find("byteLength"), std::string::npos);

    auto bad_chain = manifest;
    bad_chain["architecture"]["layers"][1]["in_dim"] = 31;
    EXPECT_NE(error_of<corruption_error>(rebuild(bad_chain)).find("layers.1.weight"), std::string::npos);

    auto bad_type = manifest;
    bad_type["tensors"][0]["dtype"] = "f16";
    EXPECT_NE(error_of<format_error>(rebuild(bad_type)).find("f32"), std::string::npos);
}

TEST(Container, HeaderFuzzNeverCrashes) {
    const auto good = encode_container(fixture::random_bundle(3));
    auto eng = make_engine(17, stream::inputs, 5);
    std::size_t structured = 0, decoded = 0;
    for (int trial = 0; trial < 1000; ++trial) {
        auto bytes = good;
        const std::size_t header = std::min<std::size_t>(bytes.size(), 16 + read_le(good, 8, 8));
        switch (trial % 4) {
            case 0: bytes.resize(eng() % bytes.size()); break;
            case 1: bytes[eng() % 16] ^= static_cast<std::uint8_t>(1u << (eng() % 8)); break;
            case 2:
                for (int k = 0; k < 3; ++k) bytes[eng() % header] ^= static_cast<std::uint8_t>(1u << (eng() % 8));
                break;
            default: bytes[eng() % header] = static_cast<std::uint8_t>(eng()); break;
        }
        try {
            decode_container(bytes);
            ++decoded;
        } catch (const nwrs::error&) {
            ++structured;
        } catch (const std::exception& e) {
            ADD_FAILURE() << "unstructured error: " << e.what();
        }
    }
    EXPECT_EQ(structured + decoded, 1000u);
    EXPECT_GT(structured, 500u);
}

TEST(Container, MissingFileIsIoError) { EXPECT_THROW(load(temp_path("does_not_exist.nwrs")), io_error); }

TEST(PermutationFileIo, RoundTrip) {
    const auto path = temp_path("perm.json");
    save_permutation(path, 1, Permutation({2, 0, 1}), 12345678901234567ULL);
    const auto f = load_permutation(path);
    EXPECT_EQ(f.layer, 1u);
    EXPECT_EQ(f.perm, Permutation({2, 0, 1}));
    EXPECT_EQ(f.seed, 12345678901234567ULL);
    std::filesystem::remove(path);
}

TEST(PermutationFileIo, RejectsNonBijection) {
    EXPECT_THROW(permutation_from_json(json::parse(R"({"layer":0,"perm":[0,0,1]})")), validation_error);
    EXPECT_THROW(permutation_from_json(json::parse(R"({"layer":0,"perm":[0,-1]})")), validation_error);
    EXPECT_THROW(permutation_from_json(json::parse(R"({"layer":0})")), format_error);
}

TEST(ReportIo, RoundTripPreservesValues) {
    const auto& ref = fixture::reference();
    const auto pi = Permutation::random(32, 2);
    const auto sus = add_gaussian_noise(permute_layer(ref, 1, pi), 1, 1.0, 2);
    const auto r = resync_model(ref, sus, MatchMethod::exact_assignment, PermutationTruth{{1, pi}}).report;
    const auto path = temp_path("report.json");
    save_report(path, r);
    EXPECT_EQ(load_report(path), r);
    std::filesystem::remove(path);

    const auto structural = resync_model(ref, sus).report;
    const auto j = report_to_json(structural);
    EXPECT_TRUE(j.at("overallPsi").is_null());
    EXPECT_EQ(report_from_json(json::parse(j.dump())), structural);
}

TEST(VerdictJson, Shape) {
    const auto& ref = fixture::reference();
    const auto j = verdict_to_json(verify_integrity(ref, scalar_attack(ref, 1, 3, 0.1), 1));
    EXPECT_EQ(j.at("layerVerdict"), "ScaledNeuron");
    EXPECT_EQ(j.at("neurons").size(), 32u);
    EXPECT_EQ(j.at("neurons")[3].at("flag"), "ScaledNeuron");
    EXPECT_NEAR(j.at("neurons")[3].at("normRatio").get<double>(), 1.1, 1e-6);
}

TEST(WatermarkJson, RoundTrip) {
    const WatermarkRecord w{2, {1, 0, 0, 1, 1}, 987654321987ULL, 0.125, 72};
    EXPECT_EQ(watermark_from_json(json::parse(watermark_to_json(w).dump())), w);
    EXPECT_THROW(watermark_from_json(json::parse(R"({"layer":0,"bits":"012","projectionSeed":1,"lambda":0.1})")),
                 format_error);
}
