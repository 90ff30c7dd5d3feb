import re
from pathlib import Path

import numpy as np
import pytest

from semflow.cli import build_parser, run
from semflow.config import SCHEMA, apply_overrides, dump_config, model_config, parse_config, resolved, train_config
from semflow.data import gen_synthetic
from semflow.errors import ConfigError
from semflow.net import ModelConfig, build_model, save_checkpoint
from semflow.pnm import write_pnm

CONFIGS = Path(__file__).resolve().parents[1] / "configs"
SHIPPED = ["sfnet_toy.cfg", "sfnet_lite_toy.cfg", "fpn_baseline_toy.cfg"]
TINY_SET = [
    "model.stem_channels=4", "model.stage_channels=4,4,8,8", "model.blocks_per_stage=1",
    "model.decoder_channels=4", "train.total_iters=3", "train.batch_size=2", "train.eval_every=3",
    "data.train_count=4", "data.val_count=2", "data.size=32",
]


# ------------------------------------------------------------------ parsing


def test_string_and_float_entries():
    e = parse_config("model.variant = sfnet_lite\ntrain.base_lr = 0.01\n")
    assert e["model.variant"].value == "sfnet_lite"
    assert isinstance(e["train.base_lr"].value, float) and e["train.base_lr"].value == 0.01


def test_duplicate_key_cites_both_lines():
    text = "\n".join(
        ["# header", "", "train.seed = 1", "model.seed = 0", "", "", "", "# again", "train.seed = 2"]
    )
    with pytest.raises(ConfigError, match=r"lines 3 and 9"):
        parse_config(text)


def test_comments_blank_lines_and_bools():
    e = parse_config("  # only a comment\n\nmodel.norm = none  # trailing\n")
    assert list(e) == ["model.norm"] and e["model.norm"].line == 3


def test_unknown_key_lists_known_keys():
    with pytest.raises(ConfigError) as info:
        parse_config("model.colour = red\n")
    assert "line 1" in str(info.value)
    assert all(k in str(info.value) for k in SCHEMA)


@pytest.mark.parametrize(
    "text,line",
    [("model.seed = 1.5", 1), ("\ntrain.base_lr = fast", 2), ("\n\nmodel.variant 3", 3), ("train.seed =", 1),
     ("model.num_classes = true", 1)],
)
def test_syntax_and_type_errors_name_the_line(text, line):
    with pytest.raises(ConfigError, match=rf"line {line}\b"):
        parse_config(text)


def test_int_accepted_for_float_key():
    assert parse_config("train.scale_max = 2")["train.scale_max"].value == 2.0


def test_overrides_win_in_order():
    e = apply_overrides(parse_config("train.seed = 1"), ["train.seed=2", "train.seed=3", "model.variant=fpn_baseline"])
    assert e["train.seed"].value == 3 and e["model.variant"].value == "fpn_baseline"
    with pytest.raises(ConfigError):
        apply_overrides(e, ["nokey"])
    with pytest.raises(ConfigError):
        apply_overrides(e, ["model.colour=1"])


def test_dump_is_reparseable():
    e = parse_config("train.base_lr = 0.02")
    again = parse_config(dump_config(e))
    assert resolved(again) == resolved(e)


@pytest.mark.parametrize("name", SHIPPED)
def test_shipped_configs_cover_schema_with_defaults(name):
    e = parse_config((CONFIGS / name).read_text())
    assert list(e) == list(SCHEMA)
    for key, (_, default) in SCHEMA.items():
        if key not in ("model.variant", "model.fam_positions"):
            assert e[key].value == default, key
    model_config(e), train_config(e)


def test_shipped_configs_differ_only_in_variant_and_positions():
    values = [resolved(parse_config((CONFIGS / n).read_text())) for n in SHIPPED]
    differing = {k for k in SCHEMA if len({str(v[k]) for v in values}) > 1}
    assert differing == {"model.variant", "model.fam_positions"}
    assert model_config(parse_config((CONFIGS / SHIPPED[2]).read_text())).fam_positions == ()


def test_shipped_defaults_are_training_recipe():
    t = train_config(parse_config((CONFIGS / "sfnet_toy.cfg").read_text()))
    assert (t.base_lr, t.momentum, t.weight_decay, t.power, t.ohem_keep_frac) == (0.01, 0.9, 5e-4, 0.9, 0.1)
    assert (t.scale_min, t.scale_max) == (0.75, 2.0)


# -------------------------------------------------------------------- run()


def test_unknown_and_missing_subcommand(capsys):
    assert run(["frobnicate"]) == 2
    err = capsys.readouterr().err
    assert err.startswith("usage:") and "error:" in err
    assert run([]) == 2
    assert "usage:" in capsys.readouterr().err


def test_missing_checkpoint_message(tmp_path, capsys):
    missing = tmp_path / "nope.sfnc"
    code = run(["eval", "--config", str(CONFIGS / "sfnet_toy.cfg"), "--checkpoint", str(missing)])
    assert code == 2
    assert capsys.readouterr().err.strip().splitlines()[-1] == f"error: checkpoint not found: {missing}"


def test_config_errors_exit_two(tmp_path, capsys):
    bad = tmp_path / "bad.cfg"
    bad.write_text("model.seed = 0\nmodel.seed = 1\n")
    assert run(["train", "--config", str(bad), "--out", str(tmp_path / "r")]) == 2
    err = capsys.readouterr().err.strip().splitlines()
    assert len(err) == 1 and err[0].startswith("error:")
    assert run(["train", "--config", str(tmp_path / "none.cfg"), "--out", str(tmp_path / "r")]) == 2
    assert run(["bench", "--config", str(CONFIGS / "sfnet_toy.cfg"), "--size", "100x64"]) == 2
    assert run(["gradcheck", "--op", "nosuchop"]) == 2


@pytest.mark.parametrize("command", ["gen-data", "train", "eval", "bench", "gradcheck", "viz-flow"])
def test_help_lists_every_flag_with_default(command, capsys):
    with pytest.raises(SystemExit) as info:
        build_parser().parse_args([command, "--help"])
    assert info.value.code == 0
    text = capsys.readouterr().out
    sub = next(a for a in build_parser()._actions if a.dest == "command").choices[command]
    for action in sub._actions:
        if action.option_strings and action.dest != "help":
            assert action.option_strings[-1] in text
            if not action.required:
                assert "default:" in text
    if command in ("train", "eval", "bench", "viz-flow"):
        for key, (_, default) in SCHEMA.items():
            assert f"{key} = {default}" in text


def test_gen_data_train_eval_viz(tmp_path, capsys):
    assert run(["gen-data", "--out", str(tmp_path / "d"), "--count", "4", "--size", "32"]) == 0
    assert (tmp_path / "d" / "images" / "00003.ppm").exists()
    cfg = str(CONFIGS / "sfnet_toy.cfg")
    sets = sum((["--set", s] for s in TINY_SET), [])
    assert run(["train", "--config", cfg, *sets, "--out", str(tmp_path / "r"), "--data", str(tmp_path / "d")]) == 0
    assert sorted(p.name for p in (tmp_path / "r").iterdir()) == ["config.cfg", "history.csv", "model.sfnc"]
    ckpt = str(tmp_path / "r" / "model.sfnc")
    capsys.readouterr()
    assert run(["eval", "--config", cfg, *sets, "--checkpoint", ckpt, "--data", str(tmp_path / "d")]) == 0
    out = capsys.readouterr().out
    assert re.search(r"^mIoU \d\.\d{4}$", out, re.M) and len(re.findall(r"^\s+\d\s", out, re.M)) == 6
    assert run(["eval", "--config", cfg, *sets, "--checkpoint", ckpt, "--min-miou", "1.01"]) == 1

    img = np.round(gen_synthetic(0, 1, 32, 6)[0].image.transpose(1, 2, 0) * 255).astype(np.uint8)
    write_pnm(tmp_path / "in.ppm", b"P6", img)
    viz = ["viz-flow", "--config", cfg, *sets, "--checkpoint", ckpt, "--image", str(tmp_path / "in.ppm")]
    assert run([*viz, "--out-dir", str(tmp_path / "v1")]) == 0
    assert run([*viz, "--out-dir", str(tmp_path / "v2")]) == 0
    names = sorted(p.name for p in (tmp_path / "v1").iterdir())
    assert names == ["flow_f3.ppm", "flow_f4.ppm", "flow_f5.ppm", "heatmap_f3.ppm", "heatmap_f4.ppm", "heatmap_f5.ppm"]
    for n in names:
        assert (tmp_path / "v1" / n).read_bytes() == (tmp_path / "v2" / n).read_bytes()


def test_viz_lite_writes_gate(tmp_path):
    cfg = ModelConfig(stem_channels=4, stage_channels=(4, 4, 8, 8), blocks_per_stage=1, decoder_channels=4,
                      variant="sfnet_lite")
    save_checkpoint(build_model(cfg), tmp_path / "m.sfnc")
    write_pnm(tmp_path / "in.ppm", b"P6", np.zeros((32, 32, 3), np.uint8))
    sets = sum((["--set", s] for s in TINY_SET + ["model.variant=sfnet_lite"]), [])
    code = run(["viz-flow", "--config", str(CONFIGS / "sfnet_lite_toy.cfg"), *sets, "--checkpoint",
                str(tmp_path / "m.sfnc"), "--image", str(tmp_path / "in.ppm"), "--out-dir", str(tmp_path / "v")])
    assert code == 0
    names = sorted(p.name for p in (tmp_path / "v").iterdir())
    assert names == ["flow_gdfam_high.ppm", "flow_gdfam_low.ppm", "gate.ppm", "heatmap_fused.ppm"]


def test_bench_writes_reports(tmp_path):
    sets = sum((["--set", s] for s in TINY_SET), [])
    args = ["bench", "--config", str(CONFIGS / "sfnet_toy.cfg"), *sets, "--size", "32x64", "--warmup", "5",
            "--runs", "30", "--out", str(tmp_path)]
    assert run(args) == 0 and run(args) == 0
    assert sorted(p.name for p in tmp_path.iterdir()) == [
        "bench_0000.csv", "bench_0000.txt", "bench_0001.csv", "bench_0001.txt"]
    a, b = ((tmp_path / f"bench_000{i}.csv").read_text().splitlines() for i in (0, 1))
    assert a[0] == b[0] and [r.split(",")[:2] for r in a] == [r.split(",")[:2] for r in b]


def test_gradcheck_single_op(capsys):
    assert run(["gradcheck", "--op", "conv2d", "--tol", "1e-4"]) == 0
    lines = capsys.readouterr().out.strip().splitlines()
    assert lines and all(l.startswith("PASS conv2d") for l in lines)
    assert run(["gradcheck", "--op", "conv2d", "--tol", "1e-30"]) == 1
