#include <gtest/gtest.h>

#include <cstring>
#include <fstream>
#include <random>

#include "test_util.hpp"

using namespace tallpack;
using test::flat_mask;
using test::single;
using test::TempDir;

namespace {

TallpackArchive two_task_archive() {
    TensorMap pre;
    pre.insert("head", Shape{2}, {0.5f, -0.5f});
    pre.insert("w", Shape{3}, {1, 2, 3});
    TallpackArchive a;
    a.manifest.tasks = {{"alpha", 0.3}, {"beta", 0.6}};
    a.manifest.keys = TrainableKeySpec{{"w"}, {"head"}};
    a.pretrained = pre;
    a.mtl_vector = {single("w", {0.25f, -1.0f, 2.0f}), 2};
    a.masks = {pack_mask(flat_mask({1, 0, 1}), {"w"}, "alpha"), pack_mask(flat_mask({0, 1, 1}), {"w"}, "beta")};
    return a;
}

errc parse_error(const std::vector<std::uint8_t>& bytes) {
    try {
        parse_tallpack(bytes);
    } catch (const error& e) {
        return e.code();
    }
    ADD_FAILURE() << "archive unexpectedly parsed";
    return errc::io_error;
}

} // namespace

TEST(PackMask, LsbFirstExamples) {
    EXPECT_EQ(pack_mask(flat_mask({1, 0, 1, 1, 0, 0, 0, 0}), {"w"}).packed_bytes, std::vector<std::uint8_t>{0x0D});
    const auto three = pack_mask(flat_mask({1, 1, 1}), {"w"});
    EXPECT_EQ(three.packed_bytes, std::vector<std::uint8_t>{0x07});
    EXPECT_EQ(three.bit_count, 3u);
    EXPECT_EQ(pack_mask(flat_mask(std::vector<std::uint8_t>(8, 0)), {"w"}).packed_bytes,
              std::vector<std::uint8_t>{0x00});
}

TEST(PackMask, UnpackInvertsExamples) {
    for (const auto& bits : std::vector<std::vector<std::uint8_t>>{{1, 0, 1, 1, 0, 0, 0, 0}, {1, 1, 1}, {0, 0, 0, 0, 0, 0, 0, 0}}) {
        const auto packed = pack_mask(flat_mask(bits), {"w"});
        EXPECT_EQ(unpack_mask(packed, {{"w", bits.size()}}).bits.at("w"), bits);
    }
}

TEST(PackMask, ConcatenatesTensorsInKeyOrder) {
    Mask m;
    m.bits["a"] = {1, 1};
    m.bits["b"] = {0, 0, 1};
    const auto p = pack_mask(m, {"a", "b"});
    EXPECT_EQ(p.packed_bytes, std::vector<std::uint8_t>{0x13});
    EXPECT_EQ(unpack_mask(p, {{"a", 2}, {"b", 3}}), m);
}

TEST(PackMask, KeyOrderMismatch) {
    Mask m;
    m.bits["a"] = {1};
    m.bits["b"] = {0};
    for (const auto& order : std::vector<std::vector<std::string>>{{"a"}, {"b", "a"}, {"a", "c"}}) {
        try {
            pack_mask(m, order);
            FAIL();
        } catch (const error& e) {
            EXPECT_EQ(e.code(), errc::key_order_mismatch);
        }
    }
}

TEST(PackMask, UnpackErrors) {
    auto p = pack_mask(flat_mask({1, 1, 1}), {"w"});
    try {
        unpack_mask(p, {{"w", 4}});
        FAIL();
    } catch (const error& e) {
        EXPECT_EQ(e.code(), errc::bit_count_mismatch);
    }
    p.packed_bytes[0] |= 0x80;
    try {
        unpack_mask(p, {{"w", 3}});
        FAIL();
    } catch (const error& e) {
        EXPECT_EQ(e.code(), errc::non_zero_padding);
    }
}

TEST(PackMask, RandomMasksRoundtrip) {
    std::mt19937 rng(77);
    std::uniform_int_distribution<int> len(0, 70);
    std::bernoulli_distribution coin(0.5);
    for (int trial = 0; trial < 500; ++trial) {
        Mask m;
        m.bits["a"].resize(len(rng));
        m.bits["b"].resize(len(rng));
        for (auto& [_, b] : m.bits)
            for (auto& v : b) v = coin(rng);
        const auto p = pack_mask(m, {"a", "b"});
        EXPECT_EQ(p.packed_bytes.size(), packed_size(m.bit_count()));
        EXPECT_EQ(unpack_mask(p, {{"a", m.bits["a"].size()}, {"b", m.bits["b"].size()}}), m);
    }
}

TEST(Reconstruct, Examples) {
    EXPECT_EQ(reconstruct(single("w", {0, 0}), {single("w", {2, 3}), 2}, flat_mask({1, 0})).at("w").data,
              (std::vector<float>{2, 0}));

    const auto pre = single("w", {0.125f, -1.5f});
    const auto ft = single("w", {0.625f, -1.25f});
    const auto tau = compute_task_vector(ft, pre, TrainableKeySpec::all_trainable(pre));
    const auto out = reconstruct(pre, {tau.tensors, 1}, flat_mask({1, 1}));
    for (std::size_t i = 0; i < 2; ++i) EXPECT_NEAR(out.at("w").data[i], ft.at("w").data[i], 1e-6);
}

TEST(Reconstruct, OptionalAlphaScaling) {
    const auto out = reconstruct(single("w", {1, 1}), {single("w", {2, 4}), 2}, flat_mask({1, 1}), 0.5);
    EXPECT_EQ(out.at("w").data, (std::vector<float>{2, 3}));
}

TEST(Reconstruct, DisjointFixtureIsBitExact) {
    SyntheticSpec spec{.P = 900, .T = 3, .seed = 44, .layered = true};
    const auto tasks = gen_disjoint_tasks(spec);
    std::vector<LabeledCheckpoint> cps;
    for (std::size_t t = 0; t < 3; ++t) cps.push_back({tasks.labels[t], tasks.finetuned[t]});
    const auto archive = compress_checkpoints(tasks.pretrained, cps, TrainableKeySpec::all_trainable(tasks.pretrained), {});
    for (std::size_t t = 0; t < 3; ++t) EXPECT_TRUE(bit_identical(archive.reconstruct_task(tasks.labels[t]), tasks.finetuned[t]));
}

TEST(Tallpack, RoundtripIsBitIdentical) {
    TempDir dir;
    const auto a = two_task_archive();
    write_tallpack(a, dir / "a.tlpk");
    const auto b = read_tallpack(dir / "a.tlpk");
    EXPECT_EQ(a, b);
    EXPECT_EQ(serialize_tallpack(a), serialize_tallpack(b));
}

TEST(Tallpack, LayoutHeader) {
    const auto bytes = serialize_tallpack(two_task_archive());
    ASSERT_GE(bytes.size(), 16u);
    EXPECT_EQ(std::string(bytes.begin(), bytes.begin() + 4), "TLPK");
    std::uint32_t version;
    std::memcpy(&version, bytes.data() + 4, 4);
    EXPECT_EQ(version, 1u);
    std::uint64_t manifest_len;
    std::memcpy(&manifest_len, bytes.data() + 8, 8);
    const auto manifest = nlohmann::json::parse(bytes.begin() + 16, bytes.begin() + 16 + static_cast<std::ptrdiff_t>(manifest_len));
    EXPECT_EQ(manifest["num_tasks"], 2);
    EXPECT_EQ(manifest["bit_count"], 3);
    // the final section is the two one-byte masks
    EXPECT_EQ(bytes[bytes.size() - 2], 0x05);
    EXPECT_EQ(bytes[bytes.size() - 1], 0x06);
}

TEST(Tallpack, EmptyArchiveRejectedAtWrite) {
    auto a = two_task_archive();
    a.masks.clear();
    a.manifest.tasks.clear();
    try {
        serialize_tallpack(a);
        FAIL();
    } catch (const error& e) {
        EXPECT_EQ(e.code(), errc::empty_input);
    }
}

TEST(Tallpack, CorruptedLengthsAreManifestMismatch) {
    const auto good = serialize_tallpack(two_task_archive());
    auto truncated = good;
    truncated.pop_back();
    EXPECT_EQ(parse_error(truncated), errc::manifest_mismatch);

    auto trailing = good;
    trailing.push_back(0);
    EXPECT_EQ(parse_error(trailing), errc::manifest_mismatch);

    // shrink the mask-section length prefix by one byte
    auto shorter = good;
    const std::size_t prefix_at = good.size() - 2 - 8;
    std::uint64_t len;
    std::memcpy(&len, shorter.data() + prefix_at, 8);
    --len;
    std::memcpy(shorter.data() + prefix_at, &len, 8);
    EXPECT_EQ(parse_error(shorter), errc::manifest_mismatch);
}

TEST(Tallpack, BadMagicAndVersion) {
    auto bytes = serialize_tallpack(two_task_archive());
    auto magic = bytes;
    magic[0] = 'X';
    EXPECT_EQ(parse_error(magic), errc::malformed_header);
    auto version = bytes;
    version[4] = 9;
    EXPECT_EQ(parse_error(version), errc::unsupported_version);
}

TEST(Tallpack, PaddingBitsSurviveAndAreChecked) {
    auto bytes = serialize_tallpack(two_task_archive());
    bytes.back() |= 0x80; // padding bit of the second mask
    const auto a = parse_tallpack(bytes);
    try {
        a.unpack("beta");
        FAIL();
    } catch (const error& e) {
        EXPECT_EQ(e.code(), errc::non_zero_padding);
    }
}

TEST(Tallpack, ReconstructionFromDiskMatchesInMemory) {
    TempDir dir;
    const auto a = two_task_archive();
    write_tallpack(a, dir / "a.tlpk");
    const auto b = read_tallpack(dir / "a.tlpk");
    for (const auto& label : {"alpha", "beta"}) EXPECT_TRUE(bit_identical(a.reconstruct_task(label), b.reconstruct_task(label)));
    EXPECT_EQ(b.reconstruct_task("alpha").at("w").data, (std::vector<float>{1.25f, 2.0f, 5.0f}));
    EXPECT_EQ(b.reconstruct_task("alpha").at("head").data, (std::vector<float>{0.5f, -0.5f}));
    EXPECT_THROW(b.reconstruct_task("gamma"), error);
}

TEST(Storage, FormulaArithmetic) {
    const auto r = storage_report(4, 1000, 100);
    EXPECT_EQ(r.row("fine_tuned").bits, 131200u);
    EXPECT_EQ(r.row("single_model").bits, 35200u);
    EXPECT_EQ(r.row("tallpack").bits, 71200u);
    EXPECT_EQ(r.row("magnitude_masking").bits, 71200u);
    EXPECT_TRUE(r.row("magnitude_pruning").lower_bound);
}

TEST(Storage, GrowsByTrainableCountPerTask) {
    for (std::uint64_t t = 1; t < 30; ++t)
        EXPECT_EQ(storage_report(t + 1, 12345, 678).row("tallpack").bits - storage_report(t, 12345, 678).row("tallpack").bits,
                  12345u);
}

TEST(Storage, PublishedVisionTable) {
    const auto r = storage_report(20, 87'800'000, 24'700'000);
    EXPECT_EQ(StorageReport::format_gb(r.row("fine_tuned")), "57.0");
    EXPECT_EQ(StorageReport::format_gb(r.row("single_model")), "3.6");
    EXPECT_EQ(StorageReport::format_gb(r.row("tallpack")), "8.2");
    EXPECT_EQ(StorageReport::format_gb(r.row("magnitude_pruning")), ">8.2");
}

TEST(Storage, PublishedLanguageTableWithinOnePercent) {
    const auto r = storage_report(7, 750'000'000, 34'400'000);
    EXPECT_NEAR(r.row("fine_tuned").gigabits(), 169.1, 0.01 * 169.1);
    EXPECT_NEAR(r.row("single_model").gigabits(), 25.1, 0.01 * 25.1);
    EXPECT_NEAR(r.row("tallpack").gigabits(), 54.3, 0.01 * 54.3);
}

TEST(Storage, Exports) {
    const auto r = storage_report(4, 1000, 100);
    EXPECT_EQ(r.to_csv().substr(0, 15), "method,bits,gb\n");
    EXPECT_NE(r.to_csv().find("tallpack,71200,0.0"), std::string::npos);
    EXPECT_EQ(r.to_json()["rows"][0]["bits"], 131200);
    EXPECT_THROW(storage_report(0, 1, 1), error);
}
