#include "doctest.h"

#include "cfreg/checkpoint.hpp"
#include "cfreg/run_config.hpp"
#include "helpers.hpp"

#include <fstream>

using namespace cfreg;

namespace {

ModelConfig small_model()
{
    ModelConfig c = config_for_steps(ModelConfig{}, 1, 2);
    c.encoder_dims = {4, 8, 8};
    c.decoder_dims = {8, 8, 4};
    c.attn_heads = {2, 2, 0};
    c.encoder_attn_heads = {0, 2, 2};
    c.window = 3;
    c.variant = Variant::trans_all;
    return c;
}

} // namespace

TEST_CASE("checkpoint round trip keeps every field")
{
    const auto dir = test::scratch_dir("ckpt");
    Checkpoint ck;
    ck.params = init_params(small_model(), 3);
    ck.seed = 3;
    ck.iteration = 17;
    ck.rng_state = "1 2 3";
    ck.extra = R"({"note":"x"})";
    ck.adam.step = 17;
    for (const auto& p : ck.params.named) {
        ck.adam.m.emplace_back(p.var->value.size(), 0.25f);
        ck.adam.v.emplace_back(p.var->value.size(), 0.5f);
    }
    const auto path = (dir / "a.bin").string();
    save_checkpoint(path, ck);
    const auto back = load_checkpoint(path);
    CHECK(back.seed == 3);
    CHECK(back.iteration == 17);
    CHECK(back.rng_state == "1 2 3");
    CHECK(back.extra == ck.extra);
    CHECK(back.adam.step == 17);
    CHECK(back.adam.m == ck.adam.m);
    CHECK(back.adam.v == ck.adam.v);
    CHECK(config_to_json(back.params.config) == config_to_json(ck.params.config));
    REQUIRE(back.params.named.size() == ck.params.named.size());
    for (std::size_t i = 0; i < ck.params.named.size(); ++i) {
        CHECK(back.params.named[i].name == ck.params.named[i].name);
        CHECK(back.params.named[i].var->value == ck.params.named[i].var->value);
    }

    // a fresh optimizer state round trips as empty
    Checkpoint plain;
    plain.params = init_params(small_model(), 1);
    save_checkpoint(path, plain);
    CHECK(load_checkpoint(path).adam.m.empty());
}

TEST_CASE("checkpoint loading rejects bad files")
{
    const auto dir = test::scratch_dir("ckpt_bad");
    CHECK_THROWS_WITH_AS(load_checkpoint((dir / "none.bin").string()), doctest::Contains("missing checkpoint"),
                         std::runtime_error);
    test::write_text(dir / "junk.bin", "not a checkpoint at all");
    CHECK_THROWS_WITH_AS(load_checkpoint((dir / "junk.bin").string()), doctest::Contains("not a checkpoint"),
                         std::runtime_error);

    Checkpoint ck;
    ck.params = init_params(small_model(), 1);
    const auto good = (dir / "good.bin").string();
    save_checkpoint(good, ck);
    auto bytes = test::read_text(good);

    auto versioned = bytes;
    versioned[8] = 9;
    test::write_text(dir / "v.bin", versioned);
    CHECK_THROWS_WITH_AS(load_checkpoint((dir / "v.bin").string()), doctest::Contains("unsupported version"),
                         std::runtime_error);

    test::write_text(dir / "short.bin", bytes.substr(0, bytes.size() - 10));
    CHECK_THROWS_WITH_AS(load_checkpoint((dir / "short.bin").string()), doctest::Contains("truncated"),
                         std::runtime_error);

    ck.adam.m.resize(1);
    ck.adam.v.resize(1);
    CHECK_THROWS_AS(save_checkpoint(good, ck), std::invalid_argument);
}

TEST_CASE("model config json round trip")
{
    auto c = small_model();
    c.mlp_ratio = 3;
    const auto back = config_from_json(config_to_json(c));
    CHECK(back.encoder_dims == c.encoder_dims);
    CHECK(back.decoder_dims == c.decoder_dims);
    CHECK(back.attn_heads == c.attn_heads);
    CHECK(back.encoder_attn_heads == c.encoder_attn_heads);
    CHECK(back.window == 3);
    CHECK(back.mlp_ratio == 3);
    CHECK(back.variant == Variant::trans_all);
    CHECK(back.affine_steps == 1);
    CHECK(back.deform_steps == 2);
}

TEST_CASE("run config parsing")
{
    const auto rc = parse_run_config(R"(
[model]
affine_steps = 1
deform_steps = 2
encoder_dims = 4,8,8
decoder_dims = 8,8,4
attn_heads = 2,2,0
encoder_attn_heads = 0,2,2
variant = baseline
[loss]
lambda = 0.001
ncc_window = 7
[train]
iterations = 12
learning_rate = 0.0005
seed = 9
affine_only = true
[data]
dir = /tmp/x
shape = 48,40,32
preprocess = false
[output]
dir = results
)");
    CHECK(rc.train.model.levels() == 3);
    CHECK(rc.train.model.variant == Variant::baseline);
    CHECK(rc.train.loss.lambda == 1e-3);
    CHECK(rc.train.loss.ncc_window == 7);
    CHECK(rc.train.loss.sigma == 1.0);
    CHECK(rc.train.iterations == 12);
    CHECK(rc.train.learning_rate == 5e-4);
    CHECK(rc.train.seed == 9);
    CHECK(rc.train.affine_only);
    CHECK(rc.data_dir == "/tmp/x");
    CHECK(rc.shape == Dims{48, 40, 32});
    CHECK_FALSE(rc.preprocess);
    CHECK(rc.out_dir == "results");

    // written config parses back to the same text
    const auto text = format_run_config(rc);
    CHECK(format_run_config(parse_run_config(text)) == text);

    const auto defaults = parse_run_config("");
    CHECK(defaults.train.iterations == 1000);
    CHECK(defaults.train.loss.lambda == 1e-4);
    CHECK(defaults.train.model.variant == Variant::trans_decoder);

    CHECK_THROWS_WITH_AS(parse_run_config("[modle]\nwindow = 3\n"), doctest::Contains("unknown section"),
                         std::invalid_argument);
    CHECK_THROWS_WITH_AS(parse_run_config("[model]\nwindw = 3\n"), doctest::Contains("unknown key"),
                         std::invalid_argument);
    CHECK_THROWS_AS(parse_run_config("[train]\niterations = many\n"), std::invalid_argument);
    CHECK_THROWS_AS(parse_run_config("[loss]\nncc_window = 4\n"), std::invalid_argument);
    CHECK_THROWS_AS(parse_run_config("[model]\nattn_heads = 2,2,2,2,2\n"), std::invalid_argument);
    CHECK_THROWS_AS(load_run_config("/nonexistent/run.ini"), std::runtime_error);

    CHECK(parse_int_list("8, 16,32") == std::vector<int>{8, 16, 32});
    CHECK_THROWS_AS(parse_int_list("8,,16"), std::invalid_argument);
    CHECK_THROWS_AS(parse_dims("4,4"), std::invalid_argument);
}

TEST_CASE("synthetic dataset on disk")
{
    const auto dir = test::scratch_dir("dataset");
    SyntheticMagnitudes mag;
    mag.shape = {16, 16, 16};
    mag.rotation = 0.05;
    mag.translation = 2.0;
    mag.deform_amplitude = 1.0;
    const auto files = write_synthetic_dataset(dir.string(), 3, 7, mag);
    REQUIRE(files.size() == 3);
    CHECK(files[1].id == "pair_001");
    CHECK(std::filesystem::exists(dir / "pair_002" / "truth_field.nii.gz"));
    CHECK(std::filesystem::exists(dir / "pair_000" / "spec.txt"));

    const auto manifest = read_manifest(dir.string());
    REQUIRE(manifest.size() == 3);
    CHECK(manifest[2].labels_moving == files[2].labels_moving);

    // the same seed reproduces the same files
    const auto again = test::scratch_dir("dataset_again");
    write_synthetic_dataset(again.string(), 3, 7, mag);
    for (const char* f : {"pair_000/moving.nii.gz", "pair_002/labels_fixed.nii.gz", "pair_001/spec.txt"}) {
        CHECK(test::read_text(dir / f) == test::read_text(again / f));
    }

    const auto d = load_dataset(dir.string(), 1, true, {0, 0, 0});
    CHECK(d.images.size() == 4);
    REQUIRE(d.validation.size() == 1);
    CHECK(d.validation[0].id == "pair_002");
    const auto cropped = load_dataset(dir.string(), 0, true, {12, 14, 16});
    CHECK(cropped.images[0].dims() == Dims{12, 14, 16});
    CHECK(cropped.validation.empty());

    // one pair: its two volumes train and it also validates
    const auto single = test::scratch_dir("dataset_single");
    write_synthetic_dataset(single.string(), 1, 7, mag);
    const auto s = load_dataset(single.string(), 0, true, {0, 0, 0});
    CHECK(s.images.size() == 2);
    CHECK(s.validation.size() == 1);

    CHECK_THROWS_WITH_AS(read_manifest(test::scratch_dir("empty").string()), doctest::Contains("no pairs"),
                         std::runtime_error);
    CHECK_THROWS_AS(write_synthetic_dataset(dir.string(), 0, 1, mag), std::invalid_argument);
    mag.deform_amplitude = 12.0;
    mag.deform_smoothness = 1.5;
    const auto folded = test::scratch_dir("dataset_folded");
    CHECK_THROWS_WITH_AS(write_synthetic_dataset(folded.string(), 2, 1, mag), doctest::Contains("folds"),
                         std::invalid_argument);
    CHECK(std::filesystem::is_empty(folded));
}
