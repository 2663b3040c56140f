#include <catch_amalgamated.hpp>

#include <sys/wait.h>

#include "support.hpp"

using namespace cora::testing;
using nlohmann::json;

namespace {

struct Run {
    int code = -1;
    std::string out;
    std::string err;
};

Run cli(const std::string& args, const TempDir& scratch) {
    const auto out = scratch / "stdout.txt", err = scratch / "stderr.txt";
    const std::string cmd =
        std::string(CORA_CLI_PATH) + " " + args + " >" + out.string() + " 2>" + err.string();
    const int status = std::system(cmd.c_str());
    return {WIFEXITED(status) ? WEXITSTATUS(status) : -1, read_bytes(out), read_bytes(err)};
}

std::string p(const std::filesystem::path& x) { return x.string(); }

} // namespace

TEST_CASE("usage errors exit 1 with a JSON line", "[cli]") {
    TempDir t("cli_usage");
    auto r = cli("", t);
    CHECK(r.code == 1);
    r = cli("gen-data --n 3", t); // --out missing
    CHECK(r.code == 1);
    const auto j = json::parse(r.err.substr(0, r.err.find('\n')));
    CHECK(j["code"] == "UsageError");
    CHECK(j.contains("message"));
    CHECK(cli("train --data x --out y --stage 7", t).code == 1);
    CHECK(cli("frobnicate", t).code == 1);
}

TEST_CASE("help lists defaults", "[cli]") {
    TempDir t("cli_help");
    const auto r = cli("train --help", t);
    CHECK(r.code == 0);
    CHECK(r.out.find("--sigma") != std::string::npos);
    CHECK(r.out.find("0.001") != std::string::npos);
    CHECK(r.out.find("--k") != std::string::npos);
    CHECK(r.out.find("--batch-size") != std::string::npos);
    CHECK(r.out.find("2e-05") != std::string::npos);
}

TEST_CASE("data errors exit 2", "[cli]") {
    TempDir t("cli_data_err");
    auto r = cli("train --data " + p(t / "nowhere") + " --out " + p(t / "run"), t);
    CHECK(r.code == 2);
    CHECK(json::parse(r.err.substr(0, r.err.find('\n')))["code"] == "DataError");
    r = cli("inspect-ckpt --ckpt " + p(t / "none.bin"), t);
    CHECK(r.code == 2);
}

TEST_CASE("gen-data is deterministic", "[cli]") {
    TempDir t("cli_gen");
    REQUIRE(cli("--seed 7 gen-data --n 10 --out " + p(t / "a"), t).code == 0);
    REQUIRE(cli("--seed 7 gen-data --n 10 --out " + p(t / "b"), t).code == 0);
    REQUIRE(cli("--seed 8 gen-data --n 10 --out " + p(t / "c"), t).code == 0);
    const auto a = snapshot_tree(t / "a");
    CHECK(a.size() == 22);
    CHECK(a == snapshot_tree(t / "b"));
    CHECK(a != snapshot_tree(t / "c"));
}

TEST_CASE("gen-instructions, build-querydb and pseudo-label write their artifacts", "[cli]") {
    TempDir t("cli_instr");
    REQUIRE(cli("--seed 3 gen-data --n 6 --out " + p(t / "d"), t).code == 0);
    REQUIRE(cli("--seed 3 gen-instructions --data " + p(t / "d") + " --out " + p(t / "i"), t).code == 0);
    for (const char* f : {"semantic.jsonl", "attribute.jsonl", "conditional.jsonl"})
        CHECK(std::filesystem::exists(t / "i" / f));
    REQUIRE(cli("--seed 3 gen-instructions --data " + p(t / "d") + " --out " + p(t / "i2"), t).code == 0);
    CHECK(snapshot_tree(t / "i") == snapshot_tree(t / "i2"));

    REQUIRE(cli("--seed 3 build-querydb --lexicon " + p(t / "d" / "lexicon.json") + " --out " + p(t / "db.json"), t)
                .code == 0);
    const auto db = json::parse(read_bytes(t / "db.json"));
    CHECK(db.dump().find("circle") == std::string::npos);

    REQUIRE(cli("--seed 3 pseudo-label --data " + p(t / "d") + " --out " + p(t / "pl"), t).code == 0);
    CHECK(std::filesystem::exists(t / "pl" / "labels" / "000000.pgm"));
}

TEST_CASE("train writes three equal stage logs and eval scores the checkpoint", "[cli]") {
    TempDir t("cli_train");
    REQUIRE(cli("--seed 2 gen-data --n 16 --out " + p(t / "d"), t).code == 0);
    const auto r = cli("--seed 2 train --data " + p(t / "d") + " --out " + p(t / "run") +
                           " --stage all --split 0.25 --iterations 5 --batch-size 2 --lr 0.005",
                       t);
    INFO(r.err);
    REQUIRE(r.code == 0);
    std::map<int, int> per_stage;
    std::ifstream log(t / "run" / "log.jsonl");
    for (std::string line; std::getline(log, line);) ++per_stage[json::parse(line)["stage"].get<int>()];
    CHECK(per_stage == std::map<int, int>{{1, 5}, {2, 5}, {3, 5}});
    for (const char* f : {"config.json", "split.json", "metrics.json", "ckpt_final.bin", "ckpt_s1_000005.bin",
                          "ckpt_s2_000005.bin", "ckpt_s3_000005.bin"})
        CHECK(std::filesystem::exists(t / "run" / f));
    const auto split = json::parse(read_bytes(t / "run" / "split.json"));
    CHECK(split["labeled"].size() == 4);

    REQUIRE(cli("--seed 2 gen-instructions --data " + p(t / "d") + " --out " + p(t / "i"), t).code == 0);
    const auto e = cli("eval --ckpt " + p(t / "run" / "ckpt_final.bin") + " --set " + p(t / "i" / "semantic.jsonl") +
                           " --data " + p(t / "d") + " --out " + p(t / "m.json"),
                       t);
    INFO(e.err);
    REQUIRE(e.code == 0);
    const auto m = json::parse(read_bytes(t / "m.json"));
    CHECK(m["ciou"].get<double>() >= 0.0);
    CHECK(m["ciou"].get<double>() <= 1.0);
    CHECK(m["stage"] == 3);

    const auto ins = cli("inspect-ckpt --ckpt " + p(t / "run" / "ckpt_final.bin"), t);
    REQUIRE(ins.code == 0);
    CHECK(json::parse(ins.out)["stage"] == 3);

    // later stages need a starting checkpoint
    CHECK(cli("train --data " + p(t / "d") + " --out " + p(t / "run2") + " --stage 3", t).code == 1);
    const auto resumed = cli("--seed 2 train --data " + p(t / "d") + " --out " + p(t / "run3") +
                                 " --stage 3 --split 0.25 --iterations 2 --batch-size 2 --init " +
                                 p(t / "run" / "ckpt_s2_000005.bin"),
                             t);
    CHECK(resumed.code == 0);
}

TEST_CASE("config file feeds flags, explicit flags win", "[cli]") {
    TempDir t("cli_config");
    std::ofstream(t / "cfg.json") << R"({"seed": 5, "gen-data": {"n": 4}})";
    REQUIRE(cli("--config " + p(t / "cfg.json") + " gen-data --out " + p(t / "a"), t).code == 0);
    CHECK(json::parse(read_bytes(t / "a" / "manifest.json"))["n_images"] == 4);
    REQUIRE(cli("--config " + p(t / "cfg.json") + " gen-data --n 2 --out " + p(t / "b"), t).code == 0);
    CHECK(json::parse(read_bytes(t / "b" / "manifest.json"))["n_images"] == 2);
    std::ofstream(t / "bad.json") << R"({"seed": 5, "no-such-flag": 1})";
    CHECK(cli("--config " + p(t / "bad.json") + " gen-data --out " + p(t / "c"), t).code == 1);
}
