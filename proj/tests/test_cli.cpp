#include <doctest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include <sys/wait.h>

#include "test_util.hpp"

namespace fs = std::filesystem;
using tnr::test::TempDir;

namespace {

const std::string kSmoke = (fs::path(TNR_CONFIG_DIR) / "smoke.json").string();

int tnr_cli(const std::string& args) {
    const std::string cmd = std::string("\"") + TNR_CLI + "\" " + args + " >/dev/null 2>&1";
    const int status = std::system(cmd.c_str());
    REQUIRE(WIFEXITED(status));
    return WEXITSTATUS(status);
}

std::string slurp(const fs::path& p) {
    std::ifstream f(p, std::ios::binary);
    std::ostringstream s;
    s << f.rdbuf();
    return s.str();
}

}  // namespace

TEST_SUITE("cli") {

TEST_CASE("exit codes") {
    TempDir dir("cli");
    const std::string out = " --out " + dir.path.string();
    CHECK(tnr_cli("--help") == 0);
    CHECK(tnr_cli("") == 1);
    CHECK(tnr_cli("frobnicate") == 1);
    CHECK(tnr_cli("run --config " + (dir.path / "none.json").string() + out) == 1);
    CHECK(tnr_cli("reproduce --config " + kSmoke + " --scenario table7" + out) == 1);
    CHECK(tnr_cli("eval --config " + kSmoke + " --checkpoint " + (dir.path / "none.tnrc").string() + out) == 1);

    std::ofstream(dir.path / "noseed.json") << R"({"desk_scale": true})";
    CHECK(tnr_cli("run --config " + (dir.path / "noseed.json").string() + out) == 1);

    // an unreadable data path surfaces only at load time
    std::ofstream(dir.path / "nodata.json")
        << R"({"seed": 1, "desk_scale": true, "dataset": {"dir": "/nonexistent"}})";
    CHECK(tnr_cli("run --config " + (dir.path / "nodata.json").string() + out) == 1);

    // an output path that is a regular file cannot be created
    std::ofstream(dir.path / "blocker") << "x";
    CHECK(tnr_cli("run --config " + kSmoke + " --out " + (dir.path / "blocker" / "sub").string()) == 2);
}

TEST_CASE("run is byte-identical across invocations and --seed changes it") {
    TempDir a("cli"), b("cli"), c("cli");
    REQUIRE(tnr_cli("run --config " + kSmoke + " --out " + a.path.string()) == 0);
    REQUIRE(tnr_cli("run --config " + kSmoke + " --out " + b.path.string()) == 0);
    for (const char* f : {"model.tnrc", "stage1.tnrc", "report.json", "results.csv"})
        CHECK(slurp(a.path / f) == slurp(b.path / f));

    REQUIRE(tnr_cli("run --config " + kSmoke + " --seed 8 --out " + c.path.string()) == 0);
    CHECK(slurp(a.path / "model.tnrc") != slurp(c.path / "model.tnrc"));

    CHECK(tnr_cli("eval --config " + kSmoke + " --checkpoint " + (a.path / "model.tnrc").string() + " --out " +
                  (a.path / "ev").string()) == 0);
    CHECK(fs::exists(a.path / "ev" / "eval_report.json"));
    CHECK(tnr_cli("pca --config " + kSmoke + " --checkpoint " + (a.path / "model.tnrc").string() + " --out " +
                  (a.path / "pc").string()) == 0);
    CHECK(tnr_cli("poison --config " + kSmoke + " --out " + (a.path / "po").string()) == 0);
    CHECK(fs::exists(a.path / "po" / "plan.json"));
}

}  // TEST_SUITE
