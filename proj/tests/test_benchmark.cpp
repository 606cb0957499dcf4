#include <gtest/gtest.h>

#include <fstream>
#include <sstream>

#include "dynvar/benchmark.hpp"

using namespace dynvar;

namespace {

BenchmarkDesign tiny_design() {
    BenchmarkDesign b;
    b.subjects = {6};
    b.times = {40};
    b.subgroups = {2};
    b.balances = {Balance::balanced};
    b.replications = 3;
    b.d = 3;
    b.seed = 11;
    b.run.cv.grid_size = 2;
    b.run.cv.folds = 3;
    b.run.initial.grid_size = 4;
    return b;
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

}  // namespace

TEST(BenchmarkDesign, CellOrderAndLabels) {
    BenchmarkDesign b;
    const auto cells = b.cells();
    ASSERT_EQ(cells.size(), 16u);
    EXPECT_EQ(cells.front().label(), "T=50/K=50/S=2/balanced");
    EXPECT_EQ(cells.back().label(), "T=100/K=100/S=3/unbalanced");
}

TEST(BenchmarkDesign, ConfigReducedAndFull) {
    auto kv = KeyValueConfig::parse("version = 1\nsubjects = 50\ntimes = 100\nsubgroups = 2\nbalance = balanced\n");
    const auto reduced = benchmark_design_from(kv, true);
    EXPECT_EQ(reduced.replications, 10);
    EXPECT_EQ(reduced.cells().size(), 1u);
    auto kv2 = KeyValueConfig::parse("version = 1\n");
    EXPECT_EQ(benchmark_design_from(kv2, false).replications, 50);
    auto bad = KeyValueConfig::parse("version = 1\nsubjects = 4.5\n");
    EXPECT_THROW(benchmark_design_from(bad), ConfigError);
}

TEST(Benchmark, ReducedDesignAccounting) {
    const auto res = run_benchmark(tiny_design());
    ASSERT_EQ(res.records.size(), 3u);
    for (const auto& r : res.records) EXPECT_TRUE(r.ok) << r.error;
    // one aggregate row per (estimator, metric) of the single cell; ARI only for subgrouping
    std::size_t rows = 0;
    for (const auto& s : res.summary) {
        EXPECT_EQ(s.condition, "T=40/K=6/S=2/balanced");
        if (s.metric == "ari") {
            EXPECT_EQ(s.estimator, "subgrouping");
        }
        EXPECT_EQ(s.n, 3);
        ++rows;
    }
    EXPECT_EQ(rows, 3u * 5u + 1u);
    EXPECT_TRUE(res.flagged.empty());
}

TEST(Benchmark, SeedsAreDistinctPerReplication) {
    EXPECT_NE(replication_seed(1, 0, 0), replication_seed(1, 0, 1));
    EXPECT_NE(replication_seed(1, 0, 0), replication_seed(1, 1, 0));
}

TEST(Benchmark, RepeatableAcrossRunsAndThreadCounts) {
    auto design = tiny_design();
    design.replications = 2;
    const auto a_dir = fs::temp_directory_path() / "dynvar_bench_a";
    const auto b_dir = fs::temp_directory_path() / "dynvar_bench_b";
    fs::remove_all(a_dir);
    fs::remove_all(b_dir);
    write_benchmark(a_dir, run_benchmark(design));
    design.threads = 2;
    write_benchmark(b_dir, run_benchmark(design));
    for (const char* f : {"records.csv", "summary.csv", "table_support.csv", "table_recovery.csv", "table_quality.csv"}) {
        EXPECT_FALSE(slurp(a_dir / f).empty()) << f;
        EXPECT_EQ(slurp(a_dir / f), slurp(b_dir / f)) << f;
    }
}
