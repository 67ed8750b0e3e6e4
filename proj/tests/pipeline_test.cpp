#include "rtprop/pipeline.hpp"

#include <gtest/gtest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <sys/wait.h>

using namespace rtprop;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
    const fs::path p = fs::temp_directory_path() / ("rtprop_pipeline_test_" + std::to_string(::getpid())) / name;
    fs::remove_all(p);
    fs::create_directories(p);
    return p;
}

std::map<std::string, std::string> snapshot(const fs::path& dir) {
    std::map<std::string, std::string> files;
    for (const auto& e : fs::directory_iterator(dir)) {
        std::ifstream in(e.path(), std::ios::binary);
        std::ostringstream s;
        s << in.rdbuf();
        files[e.path().filename().string()] = s.str();
    }
    return files;
}

PipelineConfig small_config(const fs::path& out) {
    PipelineConfig c;
    c.output_dir = out.string();
    c.run_name = "run";
    c.threads = 1;
    c.sim.n_students = 60;
    c.sim.n_skills = 6;
    c.seed = 11;
    return c;
}

int run_cli(const std::string& args) {
    const char* cli = std::getenv("RTPROP_CLI");
    if (!cli) return -1;
    const int status = std::system((std::string(cli) + " " + args + " >/dev/null 2>&1").c_str());
    return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

} // namespace

TEST(Pipeline, ConfigHashIgnoresOutputLocation) {
    PipelineConfig a;
    PipelineConfig b = a;
    b.output_dir = "elsewhere";
    b.run_name = "named";
    EXPECT_EQ(config_hash(a), config_hash(b));
    EXPECT_EQ(config_hash(a).size(), 16u);
    b.sim.seed = 2;
    EXPECT_NE(config_hash(a), config_hash(b));
    EXPECT_NE(canonical_config(a), canonical_config(b));
}

TEST(Pipeline, ReportRunsAreByteIdentical) {
    const fs::path base = scratch("repeat");
    const CommandResult a = cmd_report(small_config(base / "a"));
    const CommandResult b = cmd_report(small_config(base / "b"));
    const auto fa = snapshot(a.run_dir), fb = snapshot(b.run_dir);
    EXPECT_EQ(fa, fb);
    for (const char* name : {"transactions.tsv", "ground_truth.json", "steps.csv", "quality.json", "report.md",
                             "slices.csv", "stability_rt.csv", "moderation.json"})
        EXPECT_TRUE(fa.count(name)) << name;
    EXPECT_NE(fa.at("report.md").find("Q1"), std::string::npos);
}

TEST(Pipeline, StagedCommandsShareOneRunDirectory) {
    const fs::path base = scratch("staged");
    PipelineConfig c = small_config(base);
    cmd_simulate(c);
    const CommandResult ing = cmd_ingest(c);
    const CommandResult rt = cmd_fit(c, FitModel::Rt, FitScope::Global);
    cmd_fit(c, FitModel::Iafm, FitScope::Global);
    EXPECT_EQ(ing.run_dir, rt.run_dir);
    const auto rt_rows = read_rt_student_table(rt.run_dir / "rt_student_blups.csv");
    const auto iafm_rows = read_iafm_student_table(rt.run_dir / "iafm_student_params.csv");
    EXPECT_EQ(rt_rows.size(), 60u);
    EXPECT_EQ(iafm_rows.size(), 60u);
    const CommandResult slices = cmd_fit(c, FitModel::Rt, FitScope::BySlice);
    for (int q = 1; q <= 4; ++q) EXPECT_TRUE(fs::exists(slices.run_dir / ("rt_fit_Q" + std::to_string(q) + ".json")));
}

TEST(Pipeline, MissingInputIsConfigError) {
    PipelineConfig c = small_config(scratch("missing"));
    c.input = "/nonexistent/transactions.tsv";
    try {
        cmd_ingest(c);
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.kind(), ErrorKind::Config);
    }
}

TEST(Cli, ExitCodes) {
    if (!std::getenv("RTPROP_CLI")) GTEST_SKIP() << "RTPROP_CLI not set";
    const fs::path base = scratch("cli");
    EXPECT_EQ(run_cli("--version"), 0);
    EXPECT_EQ(run_cli("--no-such-flag simulate"), 1);
    EXPECT_EQ(run_cli("--criterion XYZ --output-dir " + base.string() + " simulate"), 1);
    EXPECT_EQ(run_cli("--output-dir " + base.string() + " --input /nonexistent ingest"), 1);
    std::ofstream(base / "empty.csv").close();
    EXPECT_EQ(run_cli("--output-dir " + base.string() + " --steps " + (base / "empty.csv").string() + " fit"), 2);
    EXPECT_EQ(exit_code(ErrorKind::Numerical), 3);
}

TEST(Cli, SameSeedSameRunDirectory) {
    if (!std::getenv("RTPROP_CLI")) GTEST_SKIP() << "RTPROP_CLI not set";
    const fs::path base = scratch("cli_repeat");
    const std::string args = " --run-name r --sim-students 40 --sim-skills 5 --seed 9 --threads 1 report";
    ASSERT_EQ(run_cli("--output-dir " + (base / "a").string() + args), 0);
    ASSERT_EQ(run_cli("--output-dir " + (base / "b").string() + args), 0);
    EXPECT_EQ(snapshot(base / "a" / "r"), snapshot(base / "b" / "r"));
}

TEST(Cli, TomlConfigFile) {
    if (!std::getenv("RTPROP_CLI")) GTEST_SKIP() << "RTPROP_CLI not set";
    const fs::path base = scratch("cli_toml");
    std::ofstream(base / "c.toml") << "sim-students = 20\nsim-skills = 4\nseed = 3\n";
    ASSERT_EQ(run_cli("--config " + (base / "c.toml").string() + " --output-dir " + base.string() +
                      " --run-name t simulate"),
              0);
    std::ifstream truth(base / "t" / "ground_truth.json");
    std::stringstream s;
    s << truth.rdbuf();
    EXPECT_NE(s.str().find("stu20"), std::string::npos);
    EXPECT_EQ(s.str().find("stu21"), std::string::npos);
}
