import json
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest
from click.testing import CliRunner

from texqual.cli import main
from texqual.image import read_png


@pytest.fixture()
def runner():
    return CliRunner()


def _write(path: Path, obj):
    path.write_text(json.dumps(obj))
    return str(path)


@pytest.fixture()
def chart_dir(tmp_path, runner):
    spec = _write(tmp_path / "chart.json",
                  {"kind": "deadleaves", "size": 256, "r_min": 3, "r_max": 40,
                   "seed": 5})
    out = tmp_path / "charts"
    res = runner.invoke(main, ["gen-chart", "--spec", spec, "--out", str(out)])
    assert res.exit_code == 0, res.output
    return out


def test_gen_chart_outputs_and_determinism(tmp_path, runner, chart_dir):
    png = chart_dir / "deadleaves.png"
    sidecar = chart_dir / "deadleaves.json"
    assert png.exists() and sidecar.exists()
    meta = json.loads(sidecar.read_text())
    assert meta["seed"] == 5
    first = png.read_bytes()
    res = runner.invoke(main, [
        "gen-chart", "--spec",
        _write(tmp_path / "chart2.json",
               {"kind": "deadleaves", "size": 256, "r_min": 3, "r_max": 40, "seed": 5}),
        "--out", str(tmp_path / "charts_again")])
    assert res.exit_code == 0
    assert (tmp_path / "charts_again" / "deadleaves.png").read_bytes() == first


def test_gen_chart_malformed_spec(tmp_path, runner):
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    res = runner.invoke(main, ["gen-chart", "--spec", str(bad), "--out", str(tmp_path / "o")])
    assert res.exit_code != 0


def test_gen_fleet_and_simulate(tmp_path, runner, chart_dir):
    fspec = _write(tmp_path / "fleet.json", {"n_devices": 4, "n_brands": 2, "seed": 3})
    fdir = tmp_path / "fleet"
    res = runner.invoke(main, ["gen-fleet", "--spec", fspec, "--out", str(fdir)])
    assert res.exit_code == 0, res.output
    fleet_json = json.loads((fdir / "fleet.json").read_text())
    assert len(fleet_json["devices"]) == 4

    cap_dir = tmp_path / "captures"
    res = runner.invoke(main, [
        "simulate", "--fleet", str(fdir / "fleet.json"),
        "--chart", str(chart_dir / "deadleaves.png"),
        "--chart-id", "dl", "--out", str(cap_dir)])
    assert res.exit_code == 0, res.output
    subdirs = [p for p in cap_dir.iterdir() if p.is_dir()]
    assert len(subdirs) == 4
    labels = (cap_dir / "labels.csv").read_text().strip().splitlines()
    assert labels[0] == "device_id,chart_id,label"
    assert len(labels) == 5

    # Byte-identical rerun.
    cap2 = tmp_path / "captures2"
    res = runner.invoke(main, [
        "simulate", "--fleet", str(fdir / "fleet.json"),
        "--chart", str(chart_dir / "deadleaves.png"),
        "--chart-id", "dl", "--out", str(cap2)])
    assert res.exit_code == 0
    assert (cap2 / "labels.csv").read_bytes() == (cap_dir / "labels.csv").read_bytes()
    dev = subdirs[0].name
    assert (cap2 / dev / "dl.png").read_bytes() == (cap_dir / dev / "dl.png").read_bytes()


@pytest.fixture()
def sim_setup(tmp_path, runner, chart_dir):
    """Fleet + captures of the dead-leaves chart and a uniform chart."""
    fspec = _write(tmp_path / "fleet.json", {"n_devices": 3, "n_brands": 3, "seed": 8})
    fdir = tmp_path / "fleet"
    assert runner.invoke(main, ["gen-fleet", "--spec", fspec, "--out", str(fdir)]).exit_code == 0
    cap_dir = tmp_path / "captures"
    assert runner.invoke(main, [
        "simulate", "--fleet", str(fdir / "fleet.json"),
        "--chart", str(chart_dir / "deadleaves.png"),
        "--chart-id", "dl", "--out", str(cap_dir)]).exit_code == 0
    # Uniform chart for RR noise estimation.
    from texqual.image import ImageF, write_png

    uni_png = tmp_path / "uniform.png"
    write_png(ImageF.full(256, 256, 0.5), uni_png)
    assert runner.invoke(main, [
        "simulate", "--fleet", str(fdir / "fleet.json"),
        "--chart", str(uni_png), "--chart-id", "uniform",
        "--out", str(cap_dir)]).exit_code == 0
    return chart_dir, cap_dir


def test_acutance_fr_and_rr(tmp_path, runner, sim_setup):
    chart_dir, cap_dir = sim_setup
    out = tmp_path / "acu"
    res = runner.invoke(main, [
        "acutance", "--captures", str(cap_dir),
        "--reference", str(chart_dir / "deadleaves.png"),
        "--mode", "fr", "--chart-id", "dl", "--out", str(out)])
    assert res.exit_code == 0, res.output
    table = (out / "acutance_fr.csv").read_text().strip().splitlines()
    assert len(table) == 4
    res = runner.invoke(main, [
        "acutance", "--captures", str(cap_dir),
        "--reference", str(chart_dir / "deadleaves.png"),
        "--mode", "rr", "--chart-id", "dl", "--uniform-id", "uniform",
        "--out", str(out)])
    assert res.exit_code == 0, res.output
    assert (out / "acutance_rr.csv").exists()


def test_acutance_identity_capture_is_one(tmp_path, runner, chart_dir):
    # A perfect device: captures == chart.
    cap_dir = tmp_path / "perfect"
    (cap_dir / "dev000").mkdir(parents=True)
    png = (chart_dir / "deadleaves.png").read_bytes()
    (cap_dir / "dev000" / "dl.png").write_bytes(png)
    out = tmp_path / "acu"
    res = runner.invoke(main, [
        "acutance", "--captures", str(cap_dir),
        "--reference", str(chart_dir / "deadleaves.png"),
        "--mode", "fr", "--chart-id", "dl", "--out", str(out)])
    assert res.exit_code == 0, res.output
    scores = json.loads((out / "acutance_fr.json").read_text())
    assert abs(scores["dev000"] - 1.0) < 1e-3


def test_acutance_blur_sweep_monotone(tmp_path, runner, chart_dir):
    from texqual.devices import DeviceProfile, simulate as dev_simulate
    from texqual.image import read_png as rp, write_png

    chart = rp(chart_dir / "deadleaves.png")
    cap_dir = tmp_path / "sweep"
    for i, s in enumerate((0.5, 1.0, 2.0, 3.0)):
        d = cap_dir / f"dev{i:03d}"
        d.mkdir(parents=True)
        write_png(dev_simulate(chart, DeviceProfile("x", 0, blur_sigma=s)), d / "dl.png")
    out = tmp_path / "acu"
    res = runner.invoke(main, [
        "acutance", "--captures", str(cap_dir),
        "--reference", str(chart_dir / "deadleaves.png"),
        "--mode", "fr", "--chart-id", "dl", "--out", str(out)])
    assert res.exit_code == 0, res.output
    scores = json.loads((out / "acutance_fr.json").read_text())
    vals = [scores[f"dev{i:03d}"] for i in range(4)]
    assert all(a > b for a, b in zip(vals, vals[1:]))


def test_acutance_missing_reference_usage_error(tmp_path, runner, sim_setup):
    _, cap_dir = sim_setup
    res = runner.invoke(main, [
        "acutance", "--captures", str(cap_dir), "--mode", "fr",
        "--chart-id", "dl", "--out", str(tmp_path / "acu")])
    assert res.exit_code == 2


def test_register_cli(tmp_path, runner, chart_dir):
    from texqual.image import read_png as rp, write_png
    from texqual.register import Homography, warp

    chart = rp(chart_dir / "deadleaves.png")
    h = Homography(np.array([[1.0, 0.01, 6.0], [-0.01, 1.0, -4.0], [0, 0, 1.0]]))
    warped = warp(chart, h, (256, 256))
    wpath = tmp_path / "warped.png"
    write_png(warped, wpath)
    out = tmp_path / "reg"
    res = runner.invoke(main, [
        "register", "--capture", str(wpath),
        "--reference", str(chart_dir / "deadleaves.png"), "--out", str(out)])
    assert res.exit_code == 0, res.output
    rep = json.loads((out / "homography.json").read_text())
    assert rep["inliers"] >= 10
    assert rep["rms_px"] < 1.0
    assert (out / "aligned.png").exists()


def _smoke_config(tmp_path, seed=71):
    return _write(tmp_path / "run.json", {
        "seed": seed,
        "chart": {"kind": "composite", "size": 512},
        "fleet": {"n_devices": 6, "n_brands": 3},
        "train": {"epochs": 10, "patches_per_image": 6, "batch_size": 16,
                  "decay_every": 5, "seed": 0},
        "region_size": 192,
        "folds": 2,
        "methods": ["random_patch", "selected_region"],
        "n_random_regions": 2,
        "predict_patches": 16,
    })


def test_dr2s_smoke_and_resume(tmp_path, runner):
    cfg_path = _smoke_config(tmp_path)
    out = tmp_path / "runs"
    res = runner.invoke(main, ["dr2s", "--config", cfg_path, "--out", str(out),
                               "--workers", "2"])
    assert res.exit_code == 0, res.output
    run_dirs = list(out.iterdir())
    assert len(run_dirs) == 1
    run_dir = run_dirs[0]
    metrics = json.loads((run_dir / "metrics.json").read_text())
    assert metrics["schema"] == "texqual/dr2s-report/v1"
    assert set(metrics["methods"]) == {"random_patch", "selected_region"}
    sr = metrics["methods"]["selected_region"]
    assert "pooled" in sr and "selected_rects" in sr
    assert (run_dir / "confidence_fold0.png").exists()
    assert (run_dir / "confidence_fold0.npy").exists()
    assert (run_dir / "selected_fold0.png").exists()
    assert (run_dir / "checkpoints" / "fold0_stage1.ckpt").exists()
    assert (run_dir / "loss_fold0_stage3.csv").exists()
    # Fold assignment is brand-disjoint.
    brands = {d["device_id"]: d["brand_id"] for d in metrics["fleet"]["devices"]}
    fold_of_brand = {}
    for dev, fold in metrics["folds"]["assignment"].items():
        assert fold_of_brand.setdefault(brands[dev], fold) == fold

    # --stage map must reuse the stage-1 checkpoints (byte-identical report).
    first = (run_dir / "metrics.json").read_bytes()
    res = runner.invoke(main, ["dr2s", "--config", cfg_path, "--out", str(out),
                               "--stage", "map", "--workers", "2"])
    assert res.exit_code == 0, res.output
    assert (run_dir / "metrics.json").read_bytes() == first


def test_dr2s_corrupt_checkpoint(tmp_path, runner):
    cfg_path = _smoke_config(tmp_path, seed=72)
    out = tmp_path / "runs"
    res = runner.invoke(main, ["dr2s", "--config", cfg_path, "--out", str(out),
                               "--workers", "2"])
    assert res.exit_code == 0, res.output
    run_dir = next(out.iterdir())
    ckpt = run_dir / "checkpoints" / "fold0_stage1.ckpt"
    ckpt.write_bytes(b"TXQNgarbage")
    res = runner.invoke(main, ["dr2s", "--config", cfg_path, "--out", str(out),
                               "--stage", "map"])
    assert res.exit_code != 0
    assert "fold0_stage1.ckpt" in str(res.exception)


def test_predict_cli(tmp_path, runner, chart_dir):
    from texqual.regressor import RegressorNet, save_net

    net = RegressorNet(1, widths=(3, 4, 5, 4), dtype=np.float64, init_seed=2)
    ckpt = tmp_path / "net.ckpt"
    save_net(net, ckpt)
    res = runner.invoke(main, [
        "predict", "--model", str(ckpt),
        "--capture", str(chart_dir / "deadleaves.png"),
        "--region", "10", "10", "128", "128", "--patches", "8"])
    assert res.exit_code == 0, res.output
    payload = json.loads(res.output)
    assert 0.0 < payload["score"] < 1.0


def test_map_cli(tmp_path, runner, sim_setup):
    from texqual.regressor import RegressorNet, save_net

    chart_dir, cap_dir = sim_setup
    net = RegressorNet(1, widths=(3, 4, 5, 4), dtype=np.float64, init_seed=4)
    ckpt = tmp_path / "net.ckpt"
    save_net(net, ckpt)
    out = tmp_path / "map"
    res = runner.invoke(main, [
        "map", "--model", str(ckpt), "--captures", str(cap_dir),
        "--chart-id", "dl", "--region-size", "96", "--out", str(out)])
    assert res.exit_code == 0, res.output
    assert (out / "confidence.png").exists()
    payload = json.loads((out / "map.json").read_text())
    assert len(payload["selected_region"]) == 4
    values = np.load(out / "confidence.npy")
    assert values.shape == (256, 256)


def _fake_report(run_id, fleet_sig, srocc_rp, srocc_sr):
    return {
        "run_id": run_id,
        "fleet": fleet_sig,
        "methods": {
            "random_patch": {"pooled": {"srocc": srocc_rp, "krocc": 0.5}},
            "selected_region": {"pooled": {"srocc": srocc_sr, "krocc": 0.7}},
        },
    }


def test_compare_cli(tmp_path, runner):
    fleet = {"devices": [{"device_id": "d0", "brand_id": 0}], "labels": {"d0": 0.5}}
    a = tmp_path / "a.json"
    b = tmp_path / "b.json"
    a.write_text(json.dumps(_fake_report("runA", fleet, 0.7, 0.9)))
    b.write_text(json.dumps(_fake_report("runB", fleet, 0.72, 0.91)))
    out = tmp_path / "table.csv"
    res = runner.invoke(main, ["compare", str(a), str(b), "--out", str(out)])
    assert res.exit_code == 0, res.output
    rows = out.read_text().strip().splitlines()
    assert rows[0] == "run_id,method,srocc_pooled,krocc_pooled"
    assert len(rows) == 5

    # Mismatched fleets refused.
    other = {"devices": [{"device_id": "dX", "brand_id": 1}], "labels": {"dX": 0.1}}
    c = tmp_path / "c.json"
    c.write_text(json.dumps(_fake_report("runC", other, 0.5, 0.6)))
    res = runner.invoke(main, ["compare", str(a), str(c), "--out", str(out)])
    assert res.exit_code != 0


def test_exit_codes_via_entry(tmp_path):
    env_script = (
        "import sys; sys.argv = ['texqual', 'gen-chart', '--spec', %r, "
        "'--out', %r]; from texqual.cli import entry; entry()"
    )
    bad = tmp_path / "bad.json"
    bad.write_text("{broken")
    proc = subprocess.run(
        [sys.executable, "-c", env_script % (str(bad), str(tmp_path / "o"))],
        capture_output=True, text=True)
    assert proc.returncode == 2
    missing = tmp_path / "missing.json"
    proc = subprocess.run(
        [sys.executable, "-c", env_script % (str(missing), str(tmp_path / "o"))],
        capture_output=True, text=True)
    assert proc.returncode == 2


def test_exit_code_data_error(tmp_path):
    script = (
        "import sys; sys.argv = ['texqual', 'acutance', '--captures', %r, "
        "'--reference', %r, '--mode', 'fr', '--chart-id', 'dl', '--out', %r]; "
        "from texqual.cli import entry; entry()"
    )
    from texqual.charts import DeadLeavesParams, gen_dead_leaves
    from texqual.image import write_png

    ref = tmp_path / "ref.png"
    write_png(gen_dead_leaves(DeadLeavesParams(size=64, r_min=2, r_max=20, seed=1)), ref)
    proc = subprocess.run(
        [sys.executable, "-c",
         script % (str(tmp_path / "nonexistent"), str(ref), str(tmp_path / "o"))],
        capture_output=True, text=True)
    assert proc.returncode == 3


def test_out_root_env_override(tmp_path, runner, monkeypatch):
    monkeypatch.setenv("TEXQUAL_OUT_ROOT", str(tmp_path / "root"))
    spec = _write(tmp_path / "c.json",
                  {"kind": "deadleaves", "size": 64, "r_min": 2, "r_max": 20, "seed": 1})
    res = runner.invoke(main, ["gen-chart", "--spec", spec, "--out", "rel"])
    assert res.exit_code == 0, res.output
    assert (tmp_path / "root" / "rel" / "deadleaves.png").exists()
