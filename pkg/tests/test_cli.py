import json

import numpy as np
import pytest
from PIL import Image

from rgbt_sod.checkpoint import load_checkpoint
from rgbt_sod.cli import main
from rgbt_sod.synthetic import make_dataset

TINY = ["--width_divisor", "8", "--input_size", "64", "--batch_size", "2", "--epochs", "1",
        "--max_steps", "2"]


def _train(data, out, *extra):
    assert main(["train", "--data", str(data), "--out", str(out), *TINY, *extra]) == 0
    (ckpt,) = out.glob("*/checkpoint.safetensors")
    return ckpt


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    return make_dataset(tmp_path_factory.mktemp("cli_ds"), n=3, height=64, width=80, seed=7,
                        attributes={0: ["LI"], 1: ["LI", "SSO"]})


@pytest.fixture(scope="module")
def checkpoints(dataset, tmp_path_factory):
    base = tmp_path_factory.mktemp("cli_runs")
    clean = _train(dataset, base / "plain", "--corruption.p_corrupt", "0")
    noisy = _train(dataset, base / "noisy", "--corruption.p_corrupt", "1.0")
    return clean, noisy


def test_train_writes_checkpoint_and_config(checkpoints):
    ckpt = checkpoints[0]
    assert ckpt.is_file()
    echoed = json.loads((ckpt.parent / "config.json").read_text())
    assert echoed == load_checkpoint(ckpt).config


def test_train_missing_root(tmp_path, capsys):
    missing = tmp_path / "nowhere"
    assert main(["train", "--data", str(missing), "--out", str(tmp_path)]) == 2
    assert str(missing) in capsys.readouterr().err


def test_train_bad_override(dataset, tmp_path, capsys):
    assert main(["train", "--data", str(dataset), "--out", str(tmp_path), "--learning_rate", "1"]) == 2
    assert main(["train", "--data", str(dataset), "--out", str(tmp_path), "--batch_size", "x"]) == 2
    assert main(["train", "--data", str(dataset), "--out", str(tmp_path),
                 "--lr_schedule", "0:1e-3,0:1e-4"]) == 2


def test_single_decoder_flag_recorded(dataset, tmp_path):
    ckpt = _train(dataset, tmp_path, "--ablation.single_decoder", "true", "--max_steps", "1")
    assert load_checkpoint(ckpt).config["ablation.single_decoder"] is True


def test_config_file_and_precedence(dataset, tmp_path):
    cfg = tmp_path / "c.toml"
    cfg.write_text('seed = 5\nlr_schedule = [[0, 0.01]]\n[ablation]\nglobal_interaction = false\n'
                   '[corruption]\np_corrupt = 0.0\n')
    ckpt = _train(dataset, tmp_path / "runs", "--config", str(cfg), "--seed", "6")
    c = load_checkpoint(ckpt).config
    assert c["seed"] == 6 and c["lr_schedule"] == [[0, 0.01]] and c["ablation.global_interaction"] is False
    bad = tmp_path / "bad.toml"
    bad.write_text("nonsense = 1\n")
    assert main(["train", "--data", str(dataset), "--out", str(tmp_path), "--config", str(bad)]) == 2


def _gt_as_pred(dataset, tmp_path):
    pred = tmp_path / "gt_pred"
    pred.mkdir()
    for p in (dataset / "GT").iterdir():
        (pred / p.name).write_bytes(p.read_bytes())
    return pred


def test_eval_perfect_table(dataset, tmp_path, capsys):
    pred = _gt_as_pred(dataset, tmp_path)
    results = tmp_path / "res.jsonl"
    assert main(["eval", "--pred", str(pred), "--gt", str(dataset / "GT"), "--results", str(results),
                 "--attributes", str(dataset / "attributes.txt")]) == 0
    out = capsys.readouterr().out
    header, row = out.splitlines()[:2]
    cells = dict(zip(header.split()[1:], row.split()[1:]))
    assert cells["MAE"] == "0.000" and cells["FM"] == "1.000" and cells["EM"] == "1.000"
    rows = [json.loads(x) for x in results.read_text().splitlines()]
    assert [r["id"] for r in rows][-3:] == ["__aggregate__", "__group__:LI", "__group__:SSO"]
    assert next(r for r in rows if r["id"] == "__group__:LI")["count"] == 2


def test_eval_two_image_mean(tmp_path, capsys):
    gt, pred = tmp_path / "gt", tmp_path / "pred"
    gt.mkdir(), pred.mkdir()
    y = np.zeros((10, 10), dtype=np.uint8)
    y[2:6, 2:6] = 255
    for name, value in (("a", 0), ("b", 51)):
        Image.fromarray(y).save(gt / f"{name}.png")
        p = y.copy()
        p[p == 0] = value
        Image.fromarray(p).save(pred / f"{name}.png")
    assert main(["eval", "--pred", str(pred), "--gt", str(gt), "--results", str(tmp_path / "r.jsonl")]) == 0
    rows = {r["id"]: r for r in map(json.loads, (tmp_path / "r.jsonl").read_text().splitlines())}
    # image a is perfect; image b has 84 background pixels at 0.2
    assert rows["a"]["mae"] == 0.0
    assert rows["b"]["mae"] == pytest.approx(84 * 0.2 / 100, abs=1e-12)
    assert rows["__aggregate__"]["mae"] == pytest.approx(84 * 0.2 / 200, abs=1e-12)


def test_eval_empty_intersection(tmp_path):
    (tmp_path / "p").mkdir(), (tmp_path / "g").mkdir()
    Image.fromarray(np.zeros((4, 4), dtype=np.uint8)).save(tmp_path / "p" / "x.png")
    Image.fromarray(np.zeros((4, 4), dtype=np.uint8)).save(tmp_path / "g" / "y.png")
    assert main(["eval", "--pred", str(tmp_path / "p"), "--gt", str(tmp_path / "g")]) == 1


def test_curves(dataset, tmp_path, checkpoints):
    perfect = _gt_as_pred(dataset, tmp_path)
    model = tmp_path / "model_pred"
    assert main(["infer", "--checkpoint", str(checkpoints[0]), "--data", str(dataset), "--out", str(model)]) == 0
    out = tmp_path / "curves"
    assert main(["curves", "--pred", str(perfect), str(model), "--label", "perfect", "model",
                 "--gt", str(dataset / "GT"), "--out", str(out)]) == 0
    rows = np.loadtxt(out / "perfect.curve.txt")
    assert rows.shape == (20, 4) and np.all(rows[:, 3] == pytest.approx(1.0))
    assert np.loadtxt(out / "model.curve.txt").shape == (20, 4)
    assert (out / "curves.png").stat().st_size > 0


def test_curves_plot_has_two_series(dataset, tmp_path):
    import matplotlib
    from rgbt_sod import cli

    captured = {}
    real = cli.plot_curves

    def spy(series, path):
        captured["labels"] = [label for label, _ in series]
        return real(series, path)

    perfect = _gt_as_pred(dataset, tmp_path)
    cli.plot_curves = spy
    try:
        assert main(["curves", "--pred", str(perfect), str(perfect), "--label", "a", "b",
                     "--gt", str(dataset / "GT"), "--out", str(tmp_path / "c")]) == 0
    finally:
        cli.plot_curves = real
    assert captured["labels"] == ["a", "b"]
    assert matplotlib.get_backend().lower() == "agg"


def test_infer_collision_exit_code(dataset, tmp_path, checkpoints):
    args = ["infer", "--checkpoint", str(checkpoints[0]), "--data", str(dataset), "--out", str(tmp_path)]
    assert main(args) == 0
    assert main(args) == 1
    assert main(args + ["--overwrite"]) == 0
    assert main(args + ["--overwrite", "--backbone", "resnet50"]) == 1


def _report(out):
    return json.loads((out / "corruption_report.json").read_text())


def test_corrupt_eval_zero_thermal(dataset, tmp_path, checkpoints):
    out = tmp_path / "rob"
    assert main(["corrupt-eval", "--checkpoint", str(checkpoints[0]), "--data", str(dataset),
                 "--modality", "thermal", "--kind", "zero", "--out", str(out)]) == 0
    (res,) = _report(out)["results"].values()
    assert res["clean"]["mae"] is not None and res["corrupted"]["mae"] is not None
    assert res["delta"]["mae"] == pytest.approx(res["corrupted"]["mae"] - res["clean"]["mae"])


def test_corrupt_eval_noise_reproducible(dataset, tmp_path, checkpoints):
    reports = []
    for name in ("a", "b"):
        out = tmp_path / name
        assert main(["corrupt-eval", "--checkpoint", str(checkpoints[0]), "--data", str(dataset),
                     "--kind", "noise", "--seed", "3", "--out", str(out)]) == 0
        reports.append(_report(out))
    assert reports[0] == reports[1]


def test_corrupt_eval_two_checkpoints(dataset, tmp_path, checkpoints, capsys):
    out = tmp_path / "both"
    assert main(["corrupt-eval", "--checkpoint", *map(str, checkpoints), "--data", str(dataset),
                 "--out", str(out)]) == 0
    table = capsys.readouterr().out
    names = [c.parent.name for c in checkpoints]
    assert set(_report(out)["results"]) == set(names)
    for n in names:
        assert f"{n} delta" in table
