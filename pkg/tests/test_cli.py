import json

import numpy as np
import pytest

from alast import cli
from alast.cli import apply_overrides, inspect_rows, main, read_csv
from alast.controller import read_trajectory
from alast.data import write_idx
from alast.errors import ConfigError
from alast.train import RunConfig, load_data, read_metrics_csv
from alast.vit import PRESETS, ViT, forward, layer_inputs, load_checkpoint, relative_magnitude, save_checkpoint

SMALL = {"model": "tiny", "method": "alast", "K": 1, "alpha": 20.0, "lr": 1e-3, "batch_size": 8,
         "epochs": 1, "data": {"kind": "synthetic", "train_per_class": 8, "eval_per_class": 4, "seed": 0}}


def write_config(tmp_path, **changes):
    cfg = dict(SMALL, **changes)
    path = tmp_path / "config.json"
    path.write_text(json.dumps(cfg))
    return path


def test_train_writes_all_artifacts(tmp_path, capsys):
    out = tmp_path / "run"
    assert main(["train", "--config", str(write_config(tmp_path)), "--out", str(out)]) == 0
    for name in ("metrics.csv", "trajectory.jsonl", "checkpoint.bin", "summary.json"):
        assert (out / name).is_file(), name
    summary = json.loads((out / "summary.json").read_text())
    assert summary["method"] == "alast" and summary["config"]["K"] == 1
    records = read_metrics_csv(out / "metrics.csv")
    assert summary["total_flops"] == records[-1].flops_cum and len(records) == summary["steps"]
    assert len(read_trajectory(out / "trajectory.jsonl")) == 2 * len(records)
    assert load_checkpoint(out / "checkpoint.bin").config == PRESETS["tiny"]


def test_train_default_output_root(tmp_path, monkeypatch):
    monkeypatch.setenv("ALAST_OUTPUT_ROOT", str(tmp_path / "root"))
    assert main(["train", "--config", str(write_config(tmp_path)), "--seed", "3"]) == 0
    assert (tmp_path / "root" / "alast-seed3" / "summary.json").is_file()


def test_train_K_too_large_exit_2(tmp_path, capsys):
    code = main(["train", "--config", str(write_config(tmp_path, K=3)), "--out", str(tmp_path / "r")])
    assert code == 2
    assert "K" in capsys.readouterr().err


def test_override_precedence(tmp_path):
    out = tmp_path / "run"
    args = ["train", "--config", str(write_config(tmp_path)), "--out", str(out),
            "--override", "method=ft_full", "--override", "data.train_per_class=4"]
    assert main(args) == 0
    summary = json.loads((out / "summary.json").read_text())
    assert summary["method"] == "ft_full"
    assert summary["config"]["data"]["train_per_class"] == 4


@pytest.mark.parametrize("override", ["colour=red", "data.colour=1", "model.depth=2", "novalue"])
def test_unknown_keys_exit_2(tmp_path, override, capsys):
    code = main(["train", "--config", str(write_config(tmp_path)), "--out", str(tmp_path / "r"),
                 "--override", override])
    assert code == 2
    assert "error" in capsys.readouterr().err


def test_missing_or_bad_config_exit_2(tmp_path):
    assert main(["train", "--config", str(tmp_path / "absent.json")]) == 2
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    assert main(["train", "--config", str(bad)]) == 2
    bad.write_text("[1, 2]")
    assert main(["train", "--config", str(bad)]) == 2


def test_runtime_failure_exit_1(tmp_path, capsys):
    img, lab = tmp_path / "i.idx", tmp_path / "l.idx"
    write_idx(img, lab, np.zeros((4, 9, 9)), np.zeros(4))
    img.write_bytes(img.read_bytes()[:-5])
    data = {"kind": "idx", "train_images": str(img), "train_labels": str(lab),
            "eval_images": str(img), "eval_labels": str(lab)}
    cfg = write_config(tmp_path, data=data)
    assert main(["train", "--config", str(cfg), "--out", str(tmp_path / "r")]) == 1
    assert "failed" in capsys.readouterr().err


def test_argparse_usage_errors_exit_2():
    for argv in ([], ["train"], ["bogus"]):
        with pytest.raises(SystemExit) as err:
            main(argv)
        assert err.value.code == 2


def test_apply_overrides_expands_presets():
    cfg = apply_overrides({"model": "tiny"}, ["model.num_classes=5", "lr=0.5", "method=ft_head"])
    assert cfg["model"]["num_classes"] == 5 and cfg["model"]["embed_dim"] == 8
    assert cfg["lr"] == 0.5 and cfg["method"] == "ft_head"
    with pytest.raises(ConfigError):
        apply_overrides({"model": "galaxy"}, ["model.num_classes=5"])


def _inspect(tmp_path, model, name="inspect"):
    ckpt = tmp_path / f"{name}.bin"
    save_checkpoint(model, ckpt)
    cfg = write_config(tmp_path)
    out = tmp_path / name
    assert main(["inspect", "--checkpoint", str(ckpt), "--config", str(cfg), "--out", str(out),
                 "--num-images", "6"]) == 0
    return read_csv(out / "relative_magnitude.csv"), read_csv(out / "cls_attention.csv")


def test_inspect_zero_initialized_model(tmp_path):
    rel, att = _inspect(tmp_path, ViT.init(PRESETS["tiny"], zero_residual_branches=True))
    assert [r["relative_magnitude"] for r in rel] == [0.0, 0.0]
    for layer in (0, 1):
        scores = [r["score"] for r in att if r["layer"] == layer]
        assert len(scores) == 9 and sum(scores) <= 1 + 1e-12


def test_inspect_matches_direct_calls(tmp_path):
    rc = RunConfig.from_dict(dict(SMALL, epochs=2))
    from alast.train import train
    model = train(rc).model
    rel, att = _inspect(tmp_path, model, "trained")
    _, ev = load_data(rc)
    images = ev.images[:6]
    direct = [relative_magnitude(layer, seq, 2) for layer, seq in zip(model.layers, layer_inputs(model, images))]
    assert [r["relative_magnitude"] for r in rel] == direct
    _, _, traces = forward(model, images)
    for r in att:
        expected = traces[r["layer"]].cls_attention_scores.mean(axis=0)[3 * r["patch_row"] + r["patch_col"]]
        assert r["score"] == expected
    rows = inspect_rows(model, images)
    assert [tuple(d.values()) for d in rel] == [tuple(r) for r in rows[0]]


def test_inspect_per_image_mass(tmp_path):
    model = ViT.init(PRESETS["tiny"], seed=4)
    _, ev = load_data(RunConfig.from_dict(SMALL))
    _, _, traces = forward(model, ev.images[:6])
    for t in traces:
        assert np.all(t.cls_attention_scores.sum(axis=1) <= 1 + 1e-12)


def test_inspect_missing_checkpoint_exit_2(tmp_path, capsys):
    assert main(["inspect", "--checkpoint", str(tmp_path / "none.bin")]) == 2
    junk = tmp_path / "junk.bin"
    junk.write_bytes(b"xx")
    assert main(["inspect", "--checkpoint", str(junk)]) == 2


def _train_run(tmp_path, name, **changes):
    out = tmp_path / name
    assert main(["train", "--config", str(write_config(tmp_path, **changes)), "--out", str(out)]) == 0
    return out


def test_report_ratios(tmp_path):
    full = _train_run(tmp_path, "full", method="ft_full")
    head = _train_run(tmp_path, "head", method="ft_head")
    out = tmp_path / "report"
    assert main(["report", str(full), str(full.parent / "full"), str(head), "--out", str(out)]) == 0
    rows = read_csv(out / "comparison.csv")
    assert list(rows[0]) == list(cli.COMPARISON_COLUMNS)
    by_name = {r["run"]: r for r in rows}
    assert by_name["full"]["flops_ratio"] == 1.0 and by_name["full"]["peak_bytes_ratio"] == 1.0
    assert by_name["full"]["accuracy_ratio"] == 1.0 and by_name["full"]["wallclock_ratio"] == 1.0
    assert by_name["head"]["flops_ratio"] < 1.0


def test_report_missing_summary_exit_2(tmp_path, capsys):
    full = _train_run(tmp_path, "full", method="ft_full")
    empty = tmp_path / "empty"
    empty.mkdir()
    assert main(["report", str(full), str(empty), "--out", str(tmp_path / "rep")]) == 2
    assert str(empty) in capsys.readouterr().err
    assert main(["report", str(full)]) == 2


def test_csv_round_trip(tmp_path):
    rows = [(0, 0.1, "x", 3), (1, 1e-300, "y", -2)]
    path = tmp_path / "t.csv"
    cli._write_csv(path, ("a", "b", "c", "d"), rows)
    assert [tuple(r.values()) for r in read_csv(path)] == rows
