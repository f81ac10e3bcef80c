#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <set>

#include "fedsim/data.hpp"

using namespace fedsim;
namespace fs = std::filesystem;

namespace {

std::vector<std::size_t> all_train(const std::vector<ClientSplit>& splits) {
    std::vector<std::size_t> out;
    for (const auto& s : splits) out.insert(out.end(), s.train_indices.begin(), s.train_indices.end());
    std::sort(out.begin(), out.end());
    return out;
}

void write_be32(std::ofstream& f, std::uint32_t v) {
    const unsigned char b[4] = {static_cast<unsigned char>(v >> 24), static_cast<unsigned char>(v >> 16),
                                static_cast<unsigned char>(v >> 8), static_cast<unsigned char>(v)};
    f.write(reinterpret_cast<const char*>(b), 4);
}

}  // namespace

TEST_CASE("shard partition: disjoint, exact sizes, class-pure shards") {
    const LabeledDataset ds = synthetic_gaussian(10, 100, 4, 0.1, 1);
    PartitionSpec spec{PartitionMode::Shard, 20, 2, 0.5, 3};
    const auto splits = shard_partition(ds, spec);
    REQUIRE(splits.size() == 20);
    const std::size_t shard = ds.size() / (20 * 2);
    const auto all = all_train(splits);
    CHECK(std::adjacent_find(all.begin(), all.end()) == all.end());
    CHECK(all.size() == 20 * 2 * shard);
    for (const auto& s : splits) {
        CHECK(s.train_indices.size() == 2 * shard);
        const auto h = label_histogram(ds, s.train_indices);
        CHECK(std::count_if(h.begin(), h.end(), [](std::size_t n) { return n > 0; }) <= 2);
        for (std::size_t n : h) CHECK(n % shard == 0);
    }
    CHECK(splits_to_json(shard_partition(ds, spec)) == splits_to_json(splits));
    spec.seed = 4;
    CHECK(splits_to_json(shard_partition(ds, spec)) != splits_to_json(splits));
}

TEST_CASE("shard partition drops the remainder") {
    const LabeledDataset ds = synthetic_gaussian(3, 7, 2, 0.1, 1);  // 21 samples, 4 shards of 5
    const auto splits = shard_partition(ds, {PartitionMode::Shard, 2, 2, 0.5, 1});
    CHECK(all_train(splits).size() == 20);
}

TEST_CASE("dirichlet partition conserves every class exactly") {
    const LabeledDataset ds = synthetic_gaussian(5, 203, 3, 0.1, 2);
    for (double beta : {0.05, 0.5, 100.0}) {
        const PartitionSpec spec{PartitionMode::Dirichlet, 13, 0, beta, 5};
        const auto splits = dirichlet_partition(ds, spec);
        REQUIRE(splits.size() == 13);
        const auto all = all_train(splits);
        std::vector<std::size_t> expected(ds.size());
        std::iota(expected.begin(), expected.end(), 0);
        CHECK(all == expected);
        std::vector<std::size_t> per_class(5, 0);
        for (const auto& s : splits) {
            const auto h = label_histogram(ds, s.train_indices);
            for (int c = 0; c < 5; ++c) per_class[std::size_t(c)] += h[std::size_t(c)];
        }
        for (std::size_t n : per_class) CHECK(n == 203);
        CHECK(splits_to_json(dirichlet_partition(ds, spec)) == splits_to_json(splits));
    }
}

TEST_CASE("iid partition deals near-equal parts") {
    const LabeledDataset ds = synthetic_gaussian(4, 25, 2, 0.1, 3);
    const auto splits = iid_partition(ds, {PartitionMode::Iid, 7, 0, 0.5, 1});
    for (const auto& s : splits) CHECK((s.train_indices.size() == 14 || s.train_indices.size() == 15));
    CHECK(all_train(splits).size() == 100);
}

TEST_CASE("largest-remainder apportionment") {
    const std::vector<double> w{1, 1, 1};
    const auto a = apportion(10, w);
    CHECK(std::accumulate(a.begin(), a.end(), std::size_t{0}) == 10);
    CHECK(a == std::vector<std::size_t>{4, 3, 3});
    const std::vector<double> w2{0.5, 0.3, 0.2};
    CHECK(apportion(7, w2) == std::vector<std::size_t>{4, 2, 1});
}

TEST_CASE("matched test split follows the client's train classes") {
    const LabeledDataset train = synthetic_gaussian(10, 100, 4, 0.1, 1, 0);
    const LabeledDataset test = synthetic_gaussian(10, 50, 4, 0.1, 1, 1);
    const auto parts = shard_partition(train, {PartitionMode::Shard, 10, 2, 0.5, 1});
    const auto splits = split_client_test(train, test, parts, TestMode::Matched, 1);
    for (const auto& s : splits) {
        CHECK(s.test_indices.size() == s.train_indices.size() / 5);
        const auto htr = label_histogram(train, s.train_indices);
        const auto hts = label_histogram(test, s.test_indices);
        for (std::size_t c = 0; c < 10; ++c) {
            if (htr[c] == 0) CHECK(hts[c] == 0);
            else CHECK(hts[c] == htr[c] / 5);
        }
        std::set<std::size_t> uniq(s.test_indices.begin(), s.test_indices.end());
        CHECK(uniq.size() == s.test_indices.size());
    }
    const auto global = split_client_test(train, test, parts, TestMode::Global, 1);
    for (const auto& s : global) CHECK(s.test_indices.size() == test.size());
}

TEST_CASE("matched test split rejects a class missing from the test pool") {
    LabeledDataset train = synthetic_gaussian(3, 10, 2, 0.1, 1, 0);
    LabeledDataset test = synthetic_gaussian(2, 10, 2, 0.1, 1, 1);
    test.num_classes = 3;
    const auto parts = iid_partition(train, {PartitionMode::Iid, 2, 0, 0.5, 1});
    CHECK_THROWS(split_client_test(train, test, parts, TestMode::Matched, 1));
}

TEST_CASE("synthetic gaussians: shared clusters, independent draws") {
    const auto a = synthetic_gaussian(4, 10, 8, 0.2, 5, 0);
    const auto b = synthetic_gaussian(4, 10, 8, 0.2, 5, 1);
    CHECK(a.features != b.features);
    CHECK(a.labels == b.labels);
    const auto m = synthetic_means(4, 8, 5);
    for (int c = 0; c < 4; ++c) {
        double n = 0;
        for (std::size_t j = 0; j < 8; ++j) n += m[std::size_t(c) * 8 + j] * m[std::size_t(c) * 8 + j];
        CHECK(n == doctest::Approx(1.0));
    }
    const auto exact = synthetic_gaussian(4, 3, 8, 0.0, 5, 0);
    for (std::size_t i = 0; i < exact.size(); ++i)
        for (std::size_t j = 0; j < 8; ++j)
            CHECK(exact.sample(i)[j] == doctest::Approx(m[std::size_t(exact.labels[i]) * 8 + j]));
    CHECK(synthetic_gaussian(4, 10, 8, 0.2, 5, 0).features == a.features);
}

TEST_CASE("IDX loader") {
    const fs::path dir = fs::temp_directory_path() / "fedsim_idx_test";
    fs::create_directories(dir);
    {
        std::ofstream img(dir / "img", std::ios::binary);
        write_be32(img, 0x803);
        write_be32(img, 3);
        write_be32(img, 2);
        write_be32(img, 2);
        for (int i = 0; i < 12; ++i) img.put(static_cast<char>(i * 20));
        std::ofstream lab(dir / "lab", std::ios::binary);
        write_be32(lab, 0x801);
        write_be32(lab, 3);
        lab.put(2);
        lab.put(0);
        lab.put(7);
    }
    const LabeledDataset ds = load_idx(dir / "img", dir / "lab");
    CHECK(ds.size() == 3);
    CHECK(ds.sample_shape == Shape{2, 2});
    CHECK(ds.num_classes == 8);
    CHECK(ds.labels == std::vector<int>{2, 0, 7});
    CHECK(ds.sample(1)[0] == doctest::Approx(80.0 / 255.0));

    {
        std::ofstream lab(dir / "short", std::ios::binary);
        write_be32(lab, 0x801);
        write_be32(lab, 5);
        lab.put(1);
    }
    CHECK_THROWS(load_idx(dir / "img", dir / "short"));
    CHECK_THROWS(load_idx(dir / "lab", dir / "lab"));
    CHECK_THROWS(load_idx(dir / "missing", dir / "lab"));
    fs::remove_all(dir);
}

TEST_CASE("splits JSON round-trips") {
    std::vector<ClientSplit> s{{0, {1, 2}, {3}}, {1, {4}, {}}};
    const auto back = splits_from_json(splits_to_json(s));
    REQUIRE(back.size() == 2);
    CHECK(back[0].train_indices == s[0].train_indices);
    CHECK(back[0].test_indices == s[0].test_indices);
    CHECK(back[1].client_id == 1);
}

TEST_CASE("gather and validation") {
    LabeledDataset ds = synthetic_gaussian(2, 3, 2, 0.1, 1);
    const std::vector<std::size_t> idx{4, 0};
    const Tensor t = ds.gather(idx);
    CHECK(t.shape == Shape{2, 2});
    CHECK(t.data[0] == ds.sample(4)[0]);
    CHECK(ds.gather_labels(idx) == std::vector<int>{ds.labels[4], ds.labels[0]});
    ds.labels[0] = 5;
    CHECK_THROWS(ds.validate());
}
