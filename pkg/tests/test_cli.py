import csv
import json

import numpy as np
import pytest

from gloriprobe.cli import EXIT_DATA, EXIT_NUMERIC, EXIT_OK, EXIT_USAGE, main, read_pgm
from gloriprobe.data import SurvivalTable, load_dataset, read_checkpoint, write_checkpoint, write_survival
from gloriprobe.head import GLoRIConfig, GLoRIHead, init_glori_params
from gloriprobe.tensor import Tensor

SPEC = {
    "n_train": 200, "n_val": 100, "n_test": 100, "grid": [8, 8], "d_layer": 4, "n_layers": 2,
    "findings": [
        {"name": "spot", "kind": "focal", "prevalence": 0.3, "amplitude": 5.0},
        {"name": "haze", "kind": "global", "prevalence": 0.3, "amplitude": 2.0},
    ],
}


def run(*argv):
    return main([str(a) for a in argv])


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    spec = root / "spec.json"
    spec.write_text(json.dumps(SPEC))
    assert run("gen-synth", "--spec", spec, "--out", root / "data", "--seed", 4) == EXIT_OK
    assert run("train", "--head", "linear", "--data", root / "data", "--out", root / "lin.glrm",
               "--epochs", 5, "--lr", 5e-3, "--batch-size", 64) == EXIT_OK
    return root


def test_gen_synth_outputs(workdir, tmp_path):
    files = sorted(p.name for p in (workdir / "data").iterdir())
    assert files == sorted(["train.glre", "val.glre", "test.glre", "labels.csv", "survival.csv",
                            "data.json", "gen-synth.manifest.json"])
    manifest = json.loads((workdir / "data" / "gen-synth.manifest.json").read_text())
    assert manifest["command"] == "gen-synth" and manifest["seed"] == 4
    assert len(manifest["outputs"]) == 6
    assert run("gen-synth", "--spec", workdir / "spec.json", "--out", tmp_path / "again", "--seed", 4) == EXIT_OK
    for name in ("train.glre", "labels.csv", "survival.csv", "data.json"):
        assert (tmp_path / "again" / name).read_bytes() == (workdir / "data" / name).read_bytes()


def test_usage_errors(tmp_path):
    assert run("gen-synth", "--spec", "{not json", "--out", tmp_path / "x") == EXIT_USAGE
    assert run("gen-synth", "--spec", '{"grid": [12, 12]}', "--out", tmp_path / "x") == EXIT_USAGE
    assert run("train", "--head", "resnet", "--data", tmp_path, "--out", tmp_path / "m") == EXIT_USAGE
    assert run("frobnicate") == EXIT_USAGE
    assert run("train", "--head", "linear", "--data", tmp_path, "--out", tmp_path / "m", "--lr", "1", "--lr-search") == EXIT_USAGE


def test_data_errors(workdir, tmp_path):
    assert run("train", "--head", "linear", "--data", tmp_path / "nope", "--out", tmp_path / "m") == EXIT_DATA
    bad = tmp_path / "bad.glrm"
    bad.write_bytes(b"junk")
    assert run("eval", "--ckpt", bad, "--data", workdir / "data", "--out", tmp_path / "r") == EXIT_DATA


def test_train_writes_checkpoint_log_and_manifest(workdir):
    head, meta = read_checkpoint(workdir / "lin.glrm")
    assert head.config.kind == "linear"
    assert meta["findings"] == ["spot", "haze"]
    log = (workdir / "lin.glrm.log").read_text().splitlines()
    assert len(log) == 5 and log[-1].startswith("epoch=5 ")
    manifest = json.loads((workdir / "lin.glrm.manifest.json").read_text())
    assert manifest["command"] == "train"
    assert any(k.endswith("train.glre") for k in manifest["inputs"])


def test_lr_search_logs_grid(workdir, tmp_path):
    out = tmp_path / "s.glrm"
    assert run("train", "--head", "linear", "--data", workdir / "data", "--out", out,
               "--epochs", 2, "--batch-size", 64, "--lr-search") == EXIT_OK
    log = (tmp_path / "s.glrm.log").read_text().splitlines()
    grid = [l for l in log if l.startswith("grid lr=")]
    assert [l.split()[1] for l in grid] == [
        "lr=1e-05", "lr=2e-05", "lr=5e-05", "lr=0.0001", "lr=0.0002",
        "lr=0.0005", "lr=0.001", "lr=0.002", "lr=0.005",
    ]
    assert any(l.startswith("selected lr=") for l in log)
    _, meta = read_checkpoint(out)
    assert meta["train"]["lr"] == meta["lr_search"]["selected_lr"]


def test_eval_report_and_self_comparison(workdir, tmp_path):
    ckpt = workdir / "lin.glrm"
    args = ["eval", "--ckpt", ckpt, "--compare-ckpt", ckpt, "--data", workdir / "data",
            "--bootstrap", 100, "--permutations", 100, "--seed", 3]
    assert run(*args, "--out", tmp_path / "a") == EXIT_OK
    assert run(*args, "--out", tmp_path / "b") == EXIT_OK
    for name in ("report.json", "report.csv"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    report = json.loads((tmp_path / "a" / "report.json").read_text())
    assert report["macro"]["auroc"]["pvalue"] == 1.0
    assert all(report["per_finding"][f]["auroc_pvalue"] == 1.0 for f in ("spot", "haze"))
    assert set(report["tiers"]) == {"high", "medium", "low"}
    rows = list(csv.reader((tmp_path / "a" / "report.csv").open()))
    assert [r[0] for r in rows[1:]] == ["spot", "haze"]


def test_eval_rejects_mismatched_checkpoint(workdir, tmp_path):
    other = GLoRIHead(GLoRIConfig(3, 8, d_glori=8, heads=1, temp_hidden=4))
    write_checkpoint(tmp_path / "o.glrm", other, {"findings": ["a", "b", "c"]})
    assert run("eval", "--ckpt", tmp_path / "o.glrm", "--data", workdir / "data", "--out", tmp_path / "r") == EXIT_DATA


def test_numeric_failure_exit_code(workdir, tmp_path):
    head, meta = read_checkpoint(workdir / "lin.glrm")
    head.params["probe.W"] = Tensor(np.full_like(head.params["probe.W"].data, 1e308))
    write_checkpoint(tmp_path / "inf.glrm", head, meta)
    code = run("eval", "--ckpt", tmp_path / "inf.glrm", "--data", workdir / "data", "--out", tmp_path / "r")
    assert code == EXIT_NUMERIC


def oracle_head(ds):
    """Fine query aligned with the planted focal direction, estimated from the
    planted regions of the training split; temperature MLP zeroed (tau = 1)."""
    data = ds.splits["train"].data
    L, D = data.n_layers, data.d_layer
    grid = np.concatenate([data.patches[:, l] for l in range(L)], axis=-1)  # n,H,W,L*D
    inside = []
    for (image_id, m), (r0, c0, h, w) in ds.planted_regions("train").items():
        if m == 0:
            i = data.index_of(image_id)
            inside.append(grid[i, r0 : r0 + h, c0 : c0 + w].reshape(-1, L * D))
    direction = np.concatenate(inside).mean(axis=0) - grid.reshape(-1, L * D).mean(axis=0)
    direction /= np.linalg.norm(direction)
    d = L * D
    cfg = GLoRIConfig(2, d, d_glori=2 * d, heads=1, temp_hidden=4, use_pyramid=False)
    p = {k: Tensor(np.zeros_like(v.data)) for k, v in init_glori_params(cfg).items()}
    eye = np.eye(d)
    p["embed.W"] = Tensor(np.hstack([eye, -eye]))  # [relu(u), relu(-u)]
    key = np.zeros((2 * d, 2 * d))
    key[:d, :d], key[d:, :d] = eye, -eye  # recovers u
    p["fine.key.W"] = Tensor(key)
    q = np.zeros((2, 2 * d))
    q[0, :d] = 20.0 * direction
    p["fine.query"] = Tensor(q)
    return GLoRIHead(cfg, p)


def test_attn_maps_outputs_and_planted_oracle(workdir, tmp_path):
    ds = load_dataset(workdir / "data")
    write_checkpoint(tmp_path / "oracle.glrm", oracle_head(ds), {"findings": ds.findings})
    regions = ds.planted_regions("test")
    hits = 0
    for (image_id, m), (r0, c0, h, w) in sorted(regions.items()):
        if m != 0:
            continue
        out = tmp_path / f"maps{image_id}"
        assert run("attn-maps", "--ckpt", tmp_path / "oracle.glrm", "--data", workdir / "data",
                   "--image-id", image_id, "--finding", "spot", "--out", out) == EXIT_OK
        stem = out / f"attn_{image_id}_spot_fine"
        grid = np.array([[float(v) for v in row] for row in csv.reader(open(f"{stem}.csv"))])
        assert abs(grid.sum() - 1.0) <= 1e-9
        pgm = read_pgm(f"{stem}.pgm")
        assert pgm.shape == (8, 8) and pgm.max() == 255
        r, c = np.unravel_index(grid.argmax(), grid.shape)
        hits += r0 <= r < r0 + h and c0 <= c < c0 + w
        if hits >= 10:
            break
    assert hits == 10


def test_attn_maps_errors(workdir, tmp_path):
    ds = load_dataset(workdir / "data")
    write_checkpoint(tmp_path / "o.glrm", oracle_head(ds), {"findings": ds.findings})
    base = ["attn-maps", "--ckpt", tmp_path / "o.glrm", "--data", workdir / "data", "--out", tmp_path / "m"]
    test_id = int(ds.splits["test"].data.ids[0])
    assert run(*base, "--image-id", 999999, "--finding", "spot") == EXIT_DATA
    assert run(*base, "--image-id", test_id, "--finding", "nope") == EXIT_DATA
    assert run(*base, "--image-id", test_id, "--finding", "spot", "--branch", "coarse") == EXIT_DATA
    lin = ["attn-maps", "--ckpt", workdir / "lin.glrm", "--data", workdir / "data", "--out", tmp_path / "m"]
    assert run(*lin, "--image-id", test_id, "--finding", "spot") == EXIT_DATA


def test_km_outputs_and_group_sizes(workdir, tmp_path):
    assert run("km", "--ckpt", workdir / "lin.glrm", "--data", workdir / "data", "--out", tmp_path / "k") == EXIT_OK
    res = json.loads((tmp_path / "k" / "logrank.json").read_text())
    assert abs(res["n_low"] - res["n_high"]) <= 1
    assert 0.0 <= res["p_value"] <= 1.0
    rows = list(csv.reader((tmp_path / "k" / "km.csv").open()))
    assert rows[0] == ["time", "survival_low", "survival_high"]
    assert rows[1] == ["0.0", "1.0", "1.0"]


def test_km_without_events(workdir, tmp_path):
    ds = load_dataset(workdir / "data")
    ids = ds.splits["test"].data.ids
    surv = tmp_path / "none.csv"
    write_survival(surv, SurvivalTable(ids, np.linspace(1, 100, len(ids)), np.zeros(len(ids), np.int8)))
    code = run("km", "--ckpt", workdir / "lin.glrm", "--data", workdir / "data",
               "--survival", surv, "--out", tmp_path / "k")
    assert code == EXIT_DATA
    rows = list(csv.reader((tmp_path / "k" / "km.csv").open()))[1:]
    assert all(r[1] == "1.0" and r[2] == "1.0" for r in rows)
    assert not (tmp_path / "k" / "logrank.json").exists()


def test_km_detects_planted_hazard(tmp_path):
    spec = dict(SPEC, n_train=400, n_val=100, n_test=1000)
    spec["findings"] = [{"name": "haze", "kind": "global", "prevalence": 0.3, "amplitude": 2.0}]
    (tmp_path / "spec.json").write_text(json.dumps(spec))
    assert run("gen-synth", "--spec", tmp_path / "spec.json", "--out", tmp_path / "d", "--seed", 1) == EXIT_OK
    assert run("train", "--head", "linear", "--data", tmp_path / "d", "--out", tmp_path / "m.glrm",
               "--epochs", 10, "--lr", 5e-3, "--batch-size", 64) == EXIT_OK
    assert run("km", "--ckpt", tmp_path / "m.glrm", "--data", tmp_path / "d", "--out", tmp_path / "k") == EXIT_OK
    res = json.loads((tmp_path / "k" / "logrank.json").read_text())
    assert res["n_low"] + res["n_high"] == 1000
    assert res["p_value"] < 0.01
