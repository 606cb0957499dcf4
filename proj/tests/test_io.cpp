#include <gtest/gtest.h>

#include <cstdlib>
#include <fstream>
#include <sstream>

#include "dynvar/io.hpp"
#include "dynvar/pipeline.hpp"
#include "dynvar/simulate.hpp"

using namespace dynvar;

namespace {

fs::path scratch(const std::string& name) {
    const fs::path p = fs::temp_directory_path() / ("dynvar_test_" + name);
    fs::remove_all(p);
    fs::create_directories(p);
    return p;
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

void write_text(const fs::path& p, const std::string& text) {
    std::ofstream out(p, std::ios::binary);
    out << text;
}

int run_cli(const std::string& args) {
    const std::string cmd = std::string(DYNVAR_CLI) + " " + args + " > /dev/null 2>&1";
    const int status = std::system(cmd.c_str());
    return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

GeneratedDataset tiny_dataset(std::uint64_t seed = 7) {
    SimulationDesign design;
    design.dims = {3, 20, 4, 1};
    design.S = 2;
    design.seed = seed;
    return generate_dataset(design);
}

RunConfig quick_config() {
    RunConfig c;
    c.cv.grid_size = 3;
    c.cv.folds = 3;
    c.initial.grid_size = 5;
    return c;
}

}  // namespace

TEST(Csv, MatrixRoundTripIsExact) {
    const auto dir = scratch("matrix");
    const Matrix m = (Matrix(2, 3) << 0.1, -1e-300, 3.0 / 7.0, 12345.678, 0.0, -2.5).finished();
    write_matrix_csv(dir / "m.csv", m);
    EXPECT_EQ(read_matrix_csv(dir / "m.csv"), m);
}

TEST(Csv, SeriesWithMissingValues) {
    const auto dir = scratch("series");
    write_text(dir / "s.csv", "A,B\n1,2\nNA,3\n4,\n");
    const auto s = read_series_csv(dir / "s.csv", {"A", "B"}, "x");
    EXPECT_EQ(s.length(), 3);
    EXPECT_TRUE(s.is_missing(1, 0));
    EXPECT_TRUE(s.is_missing(2, 1));
    EXPECT_FALSE(s.is_missing(0, 0));
    EXPECT_EQ(s.values(2, 0), 4.0);
    EXPECT_THROW(read_series_csv(dir / "s.csv", {"A", "C"}, "x"), IoError);
    write_text(dir / "bad.csv", "A,B\n1,zz\n");
    EXPECT_THROW(read_series_csv(dir / "bad.csv", {"A", "B"}, "x"), IoError);
}

TEST(Panel, SaveLoadRoundTrip) {
    const auto dir = scratch("panel");
    const auto data = tiny_dataset();
    save_panel(dir, data.panel);
    const auto back = load_panel(dir / "manifest.json");
    ASSERT_EQ(back.size(), data.panel.size());
    EXPECT_EQ(back.dims.d, 3);
    for (std::size_t k = 0; k < back.size(); ++k) {
        EXPECT_EQ(back.subjects[k].subject_id, data.panel.subjects[k].subject_id);
        EXPECT_EQ(back.subjects[k].values, data.panel.subjects[k].values);
    }
}

TEST(Panel, ManifestLengthMismatchRejected) {
    const auto dir = scratch("manifest");
    save_panel(dir, tiny_dataset().panel);
    auto j = read_json(dir / "manifest.json");
    j["subjects"][0]["T"] = 19;
    write_json(dir / "manifest.json", j);
    EXPECT_THROW(load_panel(dir / "manifest.json"), IoError);
    j["version"] = 2;
    write_json(dir / "manifest.json", j);
    EXPECT_THROW(load_panel(dir / "manifest.json"), Error);
}

TEST(Decomposition, SaveLoadRoundTrip) {
    const auto dir = scratch("decomp");
    const auto data = tiny_dataset();
    std::vector<std::string> ids;
    for (const auto& s : data.panel.subjects) ids.push_back(s.subject_id);
    save_decomposition(dir, data.truth, ids);
    const auto back = load_decomposition(dir);
    EXPECT_EQ(back.subject_ids, ids);
    EXPECT_EQ(back.decomposition.gamma, data.truth.gamma);
    EXPECT_EQ(back.decomposition.assignment.labels, data.true_assignment.labels);
    for (std::size_t k = 0; k < ids.size(); ++k)
        EXPECT_EQ(compose_transition(back.decomposition, k), compose_transition(data.truth, k));
}

TEST(Config, ParsingRules) {
    auto kv = KeyValueConfig::parse("version = 1  # comment\nfolds = 4\nlist = 1, 2.5,3\nflag = yes\n");
    EXPECT_EQ(kv.get_int("folds", 5), 4);
    EXPECT_EQ(kv.get_doubles("list"), (std::vector<double>{1, 2.5, 3}));
    EXPECT_TRUE(kv.get_bool("flag", false));
    EXPECT_EQ(kv.get_int("absent", 9), 9);
    EXPECT_NO_THROW(kv.finish());
    EXPECT_THROW(KeyValueConfig::parse("folds = 4\n"), ConfigError);
    EXPECT_THROW(KeyValueConfig::parse("version = 2\n"), ConfigError);
    EXPECT_THROW(KeyValueConfig::parse("version = 1\na = 1\na = 2\n"), ConfigError);
    EXPECT_THROW(KeyValueConfig::parse("version = 1\njunk\n"), ConfigError);
}

TEST(Config, UnknownAndMalformedFieldsNamed) {
    auto kv = KeyValueConfig::parse("version = 1\ngrid_sise = 4\n");
    try {
        run_config_from(kv);
        FAIL();
    } catch (const ConfigError& e) {
        EXPECT_NE(std::string(e.what()).find("grid_sise"), std::string::npos);
    }
    auto bad = KeyValueConfig::parse("version = 1\nfolds = four\n");
    try {
        run_config_from(bad);
        FAIL();
    } catch (const ConfigError& e) {
        EXPECT_NE(std::string(e.what()).find("folds"), std::string::npos);
    }
    auto mode = KeyValueConfig::parse("version = 1\nmode = clustering\n");
    EXPECT_THROW(run_config_from(mode), ConfigError);
    auto rule = KeyValueConfig::parse("version = 1\ninitial_cv_rule = median\n");
    EXPECT_THROW(run_config_from(rule), ConfigError);
    auto ose = KeyValueConfig::parse("version = 1\ninitial_cv_rule = one_standard_error\n");
    EXPECT_EQ(run_config_from(ose).initial.rule, CvRule::one_standard_error);
    auto det = KeyValueConfig::parse("version = 1\ngrid_ratio = 0.05\ndetection_grid_ratio = 0.002\n");
    const RunConfig dc = run_config_from(det);
    EXPECT_DOUBLE_EQ(dc.detection(3, 1).estimation.cv.grid_ratio, 0.002);
    EXPECT_DOUBLE_EQ(dc.estimation(3, 1).cv.grid_ratio, 0.05);
    auto zero = KeyValueConfig::parse("version = 1\ndetection_grid_ratio = 0\n");
    EXPECT_THROW(run_config_from(zero).validate(), ConfigError);
}

TEST(Pipeline, StandardModeHasNoSubgroups) {
    const auto data = tiny_dataset();
    RunConfig c = quick_config();
    c.mode = AnalysisMode::standard;
    const auto r = run_analysis(data.panel, c);
    EXPECT_EQ(r.estimate.fit.decomposition.subgroups(), 0);
    const auto dir = scratch("standard");
    save_results(dir, r, c);
    EXPECT_FALSE(fs::exists(dir / "pi_1.csv"));
    EXPECT_TRUE(fs::exists(dir / "phi_S001.csv"));
    const auto j = read_json(dir / "results.json");
    EXPECT_EQ(j["mode"], "standard");
    EXPECT_EQ(j["cv"]["mse_surface"].size(), 9u);
}

TEST(Pipeline, ConfirmatoryUsesKnownAssignment) {
    const auto data = tiny_dataset();
    RunConfig c = quick_config();
    c.mode = AnalysisMode::confirmatory;
    EXPECT_THROW(run_analysis(data.panel, c), ConfigError);
    c.known_assignment = data.true_assignment;
    const auto r = run_analysis(data.panel, c);
    EXPECT_FALSE(r.detection.has_value());
    EXPECT_EQ(r.assignment.labels, data.true_assignment.labels);
    EXPECT_EQ(r.estimate.fit.decomposition.subgroups(), 2);
}

TEST(Pipeline, PreprocessImputesAndCentres) {
    auto data = tiny_dataset();
    auto& s = data.panel.subjects[0];
    s.missing_mask = BoolMatrix::Constant(s.values.rows(), s.values.cols(), false);
    s.missing_mask(3, 1) = true;
    s.values(3, 1) = std::nan("");
    const auto p = preprocess(data.panel);
    EXPECT_TRUE(p.centered);
    EXPECT_TRUE(p.subjects[0].values.allFinite());
    EXPECT_LT(p.subjects[0].values.colwise().mean().cwiseAbs().maxCoeff(), 1e-12);
}

#ifdef DYNVAR_CLI

TEST(Cli, SimulateShapeAndDeterminism) {
    const auto dir = scratch("cli_sim");
    write_text(dir / "sim.cfg", "version = 1\nvariables = 3\nsubjects = 4\ntime = 20\nsubgroups = 2\nbalance = balanced\nseed = 7\n");
    ASSERT_EQ(run_cli("simulate --config " + (dir / "sim.cfg").string() + " --out " + (dir / "a").string()), 0);
    ASSERT_EQ(run_cli("simulate --config " + (dir / "sim.cfg").string() + " --out " + (dir / "b").string()), 0);
    int csvs = 0;
    for (const auto& e : fs::directory_iterator(dir / "a"))
        if (e.path().extension() == ".csv") {
            ++csvs;
            const auto m = read_series_csv(e.path(), {"V1", "V2", "V3"}, "x");
            EXPECT_EQ(m.values.rows(), 20);
            EXPECT_EQ(slurp(e.path()), slurp(dir / "b" / e.path().filename()));
        }
    EXPECT_EQ(csvs, 4);
    EXPECT_TRUE(fs::exists(dir / "a" / "manifest.json"));
    EXPECT_TRUE(fs::exists(dir / "a" / "truth" / "gamma.csv"));
    EXPECT_EQ(slurp(dir / "a" / "truth" / "phi_S004.csv"), slurp(dir / "b" / "truth" / "phi_S004.csv"));
}

TEST(Cli, FitEvaluateAndExitCodes) {
    const auto dir = scratch("cli_fit");
    write_text(dir / "sim.cfg", "version = 1\nvariables = 3\nsubjects = 4\ntime = 30\nsubgroups = 2\nseed = 3\n");
    write_text(dir / "fit.cfg", "version = 1\ngrid_size = 3\nfolds = 3\ninitial_grid_size = 5\n");
    ASSERT_EQ(run_cli("simulate --config " + (dir / "sim.cfg").string() + " --out " + (dir / "data").string()), 0);
    ASSERT_EQ(run_cli("fit --manifest " + (dir / "data" / "manifest.json").string() + " --config " +
                      (dir / "fit.cfg").string() + " --out " + (dir / "res").string()),
              0);
    ASSERT_EQ(run_cli("evaluate --results " + (dir / "res").string() + " --truth " + (dir / "data" / "truth").string()), 0);
    const auto m = read_json(dir / "res" / "metrics.json");
    EXPECT_GE(m["sensitivity"].get<double>(), 0.0);
    EXPECT_TRUE(fs::exists(dir / "res" / "metrics.csv"));

    // truth scored against itself is perfect
    ASSERT_EQ(run_cli("evaluate --results " + (dir / "data" / "truth").string() + " --truth " +
                      (dir / "data" / "truth").string() + " --out " + dir.string()),
              0);
    const auto self = read_json(dir / "metrics.json");
    EXPECT_EQ(self["mcc"].get<double>(), 1.0);
    EXPECT_EQ(self["ari"].get<double>(), 1.0);
    EXPECT_EQ(self["rmse"].get<double>(), 0.0);

    write_text(dir / "bad.cfg", "version = 1\nfolds = 1\n");
    EXPECT_EQ(run_cli("fit --manifest " + (dir / "data" / "manifest.json").string() + " --config " +
                      (dir / "bad.cfg").string() + " --out " + (dir / "x").string()),
              2);
    EXPECT_EQ(run_cli("fit --manifest " + (dir / "missing.json").string() + " --out " + (dir / "x").string()), 3);
    write_text(dir / "slow.cfg", "version = 1\ngrid_size = 2\nfolds = 3\nmax_iterations = 1\n");
    EXPECT_EQ(run_cli("fit --mode standard --penalty standard --manifest " + (dir / "data" / "manifest.json").string() +
                      " --config " + (dir / "slow.cfg").string() + " --out " + (dir / "y").string()),
              4);
    EXPECT_EQ(run_cli("frobnicate"), 2);
}

#endif
