#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include "cfreg/checkpoint.hpp"
#include "cfreg/field_algebra.hpp"
#include "cfreg/nifti.hpp"
#include "cfreg/volumes.hpp"
#include "cfreg/run_config.hpp"
#include "helpers.hpp"

#include <cstdio>
#include <sys/wait.h>

using namespace cfreg;
namespace fs = std::filesystem;

namespace {

struct Run {
    int status = -1;
    std::string output;
};

Run cfreg_cli(const std::string& args)
{
    const std::string cmd = std::string(CFREG_BIN) + " " + args + " 2>&1";
    Run r;
    FILE* pipe = ::popen(cmd.c_str(), "r");
    REQUIRE(pipe != nullptr);
    char buf[4096];
    for (std::size_t n; (n = std::fread(buf, 1, sizeof buf, pipe)) > 0;) {
        r.output.append(buf, n);
    }
    const int st = ::pclose(pipe);
    r.status = WIFEXITED(st) ? WEXITSTATUS(st) : -1;
    return r;
}

// Three-level model small enough for seconds-long runs on 16^3 volumes.
const char* tiny_ini = R"([model]
affine_steps = 1
deform_steps = 2
encoder_dims = 4,8,8
decoder_dims = 8,8,4
attn_heads = 2,2,0
encoder_attn_heads = 0,2,2
window = 3
mlp_ratio = 2
[train]
learning_rate = 0.01
)";

fs::path synth_data(const std::string& name, int n)
{
    const auto dir = test::scratch_dir(name);
    const auto r = cfreg_cli("synth --out " + dir.string() + " --n " + std::to_string(n) +
                             " --seed 3 --shape 16,16,16 --deform-amp 1");
    REQUIRE_MESSAGE(r.status == 0, r.output);
    return dir;
}

} // namespace

TEST_CASE("synth writes n pairs deterministically")
{
    const auto a = synth_data("cli_synth_a", 4);
    const auto b = synth_data("cli_synth_b", 4);
    for (int i = 0; i < 4; ++i) {
        char id[16];
        std::snprintf(id, sizeof id, "pair_%03d", i);
        CHECK(fs::is_directory(a / id));
        for (const char* f : {"fixed.nii.gz", "moving.nii.gz", "labels_fixed.nii.gz", "labels_moving.nii.gz",
                              "truth_field.nii.gz", "spec.txt"}) {
            CHECK(test::read_text(a / id / f) == test::read_text(b / id / f));
        }
    }
    CHECK(read_manifest(a.string()).size() == 4);
}

TEST_CASE("synth refuses folding deformations")
{
    const auto dir = test::scratch_dir("cli_fold");
    const auto r = cfreg_cli("synth --out " + dir.string() + " --n 2 --shape 16,16,16 --deform-amp 12 --deform-smooth 1.5");
    CHECK(r.status != 0);
    CHECK(r.output.find("folds") != std::string::npos);
}

TEST_CASE("train, resume, register and evaluate")
{
    const auto data = synth_data("cli_data", 2);
    const auto work = test::scratch_dir("cli_work");
    test::write_text(work / "tiny.ini", tiny_ini);
    const std::string common = " --data " + data.string() + " --config " + (work / "tiny.ini").string();

    SUBCASE("zero iterations writes an initial checkpoint")
    {
        const auto r = cfreg_cli("train" + common + " --out " + (work / "zero").string() + " --iterations 0");
        REQUIRE_MESSAGE(r.status == 0, r.output);
        const auto ck = load_checkpoint((work / "zero" / "final.bin").string());
        CHECK(ck.iteration == 0);
        CHECK(ck.params.config.levels() == 3);
        const auto cfg = load_run_config((work / "zero" / "config.ini").string());
        CHECK(cfg.train.iterations == 0);
        CHECK(cfg.train.learning_rate == 0.01);
        CHECK(cfg.data_dir == data.string());
    }

    SUBCASE("resume continues exactly")
    {
        auto r = cfreg_cli("train" + common + " --out " + (work / "full").string() + " --iterations 3 --seed 4");
        REQUIRE_MESSAGE(r.status == 0, r.output);
        r = cfreg_cli("train" + common + " --out " + (work / "part").string() + " --iterations 2 --seed 4");
        REQUIRE_MESSAGE(r.status == 0, r.output);
        r = cfreg_cli("train" + common + " --out " + (work / "part").string() + " --iterations 1 --resume " +
                      (work / "part" / "final.bin").string());
        REQUIRE_MESSAGE(r.status == 0, r.output);
        const auto full = load_checkpoint((work / "full" / "final.bin").string());
        const auto part = load_checkpoint((work / "part" / "final.bin").string());
        CHECK(part.iteration == 3);
        for (std::size_t i = 0; i < full.params.named.size(); ++i) {
            CHECK(full.params.named[i].var->value == part.params.named[i].var->value);
        }
        const auto log = test::read_text(work / "full" / "train.log");
        CHECK(log.find("iter=3 total=") != std::string::npos);
        // resumed log is appended, and its last line matches the straight run
        const auto plog = test::read_text(work / "part" / "train.log");
        CHECK(plog.substr(plog.rfind("iter=3")) == log.substr(log.rfind("iter=3")));
    }

    SUBCASE("register writes a field that reproduces the warped volume")
    {
        auto r = cfreg_cli("train" + common + " --out " + (work / "reg_model").string() + " --iterations 3");
        REQUIRE_MESSAGE(r.status == 0, r.output);
        const auto out = work / "reg";
        r = cfreg_cli("register --checkpoint " + (work / "reg_model" / "final.bin").string() + " --fixed " +
                      (data / "pair_000" / "fixed.nii.gz").string() + " --moving " +
                      (data / "pair_000" / "moving.nii.gz").string() + " --fixed-labels " +
                      (data / "pair_000" / "labels_fixed.nii.gz").string() + " --moving-labels " +
                      (data / "pair_000" / "labels_moving.nii.gz").string() + " --out " + out.string());
        REQUIRE_MESSAGE(r.status == 0, r.output);
        CHECK(r.output.find("dsc_after=") != std::string::npos);
        const auto field = load_field((out / "field.nii.gz").string());
        const auto moving = load_volume((out / "moving_prepared.nii.gz").string());
        const auto warped = load_volume((out / "warped.nii.gz").string());
        bool nonzero = false;
        for (float v : field.data()) {
            nonzero = nonzero || v != 0.0f;
        }
        CHECK(nonzero);
        const auto again = warp(moving, field);
        CHECK(test::rel_error(again.data(), warped.data(), 1.0) <= 1e-5);
        for (const char* f : {"difference.nii.gz", "labels_warped.nii.gz", "affine.txt", "report.txt", "config.ini"}) {
            CHECK(fs::exists(out / f));
        }

        // evaluate the same checkpoint on the dataset
        r = cfreg_cli("evaluate --checkpoint " + (work / "reg_model" / "final.bin").string() + " --data " +
                      data.string() + " --out " + (work / "eval").string());
        REQUIRE_MESSAGE(r.status == 0, r.output);
        const auto csv = test::read_text(work / "eval" / "eval.csv");
        CHECK(std::count(csv.begin(), csv.end(), '\n') == 3);
        CHECK(fs::exists(work / "eval" / "report.txt"));

        r = cfreg_cli("register --checkpoint " + (work / "reg_model" / "final.bin").string() + " --fixed " +
                      (data / "pair_000" / "fixed.nii.gz").string() + " --moving " +
                      (data / "pair_000" / "moving.nii.gz").string() + " --affine-only --no-affine --out " +
                      out.string());
        CHECK(r.status != 0);
        CHECK(r.output.find("mutually exclusive") != std::string::npos);
    }

    SUBCASE("evaluate on an empty dataset fails")
    {
        auto r = cfreg_cli("train" + common + " --out " + (work / "m").string() + " --iterations 0");
        REQUIRE(r.status == 0);
        const auto empty = test::scratch_dir("cli_empty");
        r = cfreg_cli("evaluate --checkpoint " + (work / "m" / "final.bin").string() + " --data " + empty.string() +
                      " --out " + (work / "e").string());
        CHECK(r.status != 0);
        CHECK(r.output.find("no pairs") != std::string::npos);
    }

    SUBCASE("variant sweep reports one row per variant")
    {
        const auto r = cfreg_cli("sweep" + common + " --axis variant --iterations 1 --out " + (work / "sw").string());
        REQUIRE_MESSAGE(r.status == 0, r.output);
        const auto csv = test::read_text(work / "sw" / "sweep.csv");
        CHECK(std::count(csv.begin(), csv.end(), '\n') == 5);
        for (const char* v : {"baseline", "trans_encoder", "trans_decoder", "trans_all"}) {
            CHECK(csv.find(v) != std::string::npos);
        }
    }
}

TEST_CASE("usage errors exit non-zero")
{
    CHECK(cfreg_cli("").status != 0);
    CHECK(cfreg_cli("frobnicate").status != 0);
    const auto r = cfreg_cli("sweep --axis width --data /nonexistent");
    CHECK(r.status != 0);
    CHECK(cfreg_cli("train --data /nonexistent --iterations 1 --out " + test::scratch_dir("cli_bad").string())
              .status != 0);
}
