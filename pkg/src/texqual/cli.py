"""Command-line front end.

Commands: gen-chart, gen-fleet, simulate, register, acutance, dr2s,
predict, compare, map.  Configuration files are JSON with documented
keys (see README).  All randomness flows from one master seed through
named sub-seed derivation, so reruns with identical inputs produce
byte-identical outputs; wall-clock timestamps only ever appear in the
log file.  Report directories are named by a run id (a hash of the
configuration) and are treated as append-only.

Exit codes: 0 success, 2 config error, 3 data error, 4 numeric failure.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import os
import sys
from pathlib import Path

import click
import numpy as np

from .charts import (CompositeChartSpec, DeadLeavesParams, finest_tile,
                     gen_composite, gen_dead_leaves, tiles_from_json,
                     tiles_to_json)
from .devices import (capture_chart, fleet_from_json, fleet_to_json, gen_fleet,
                      oracle_label)
from .errors import ConfigError, DataError, NumericError, TexqualError
from .image import ImageF, Rect, read_png, write_png, write_raw
from .pipeline import RunConfig, build_chart, run_ablation, run_id_for
from .rng import derive_seed
from .spectral import (MtfCurve, ViewingConditions, acutance, mtf_fr, mtf_rr,
                       psd_radial, spectrum_to_csv)

log = logging.getLogger("texqual")


def _load_json(path, what="config"):
    try:
        with open(path) as fh:
            return json.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read {what} {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(
            f"malformed {what} {path}: line {exc.lineno}, col {exc.colno}: {exc.msg}"
        ) from exc


def _out_root(out) -> Path:
    root = os.environ.get("TEXQUAL_OUT_ROOT")
    p = Path(out)
    if root and not p.is_absolute():
        return Path(root) / p
    return p


def _write_text(path: Path, text: str):
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        fh.write(text)


@click.group()
@click.option("-v", "--verbose", is_flag=True, help="Log INFO to stderr.")
def main(verbose):
    """Texture quality evaluation toolkit."""
    logging.basicConfig(
        level=logging.INFO if verbose else logging.WARNING,
        format="%(asctime)s %(name)s %(levelname)s %(message)s",
        stream=sys.stderr,
    )


@main.command("gen-chart")
@click.option("--spec", "spec_path", required=True, type=click.Path(),
              help="Chart spec JSON.")
@click.option("--out", required=True, type=click.Path(), help="Output directory.")
def cmd_gen_chart(spec_path, out):
    """Render a chart PNG plus a JSON sidecar with tile metadata."""
    raw = _load_json(spec_path, "chart spec")
    out_dir = _out_root(out)
    out_dir.mkdir(parents=True, exist_ok=True)
    kind = raw.get("kind", "composite")
    seed = raw.get("seed", 0)
    if kind == "composite":
        spec = CompositeChartSpec(**{k: v for k, v in raw.items() if k != "kind"})
        img, tiles = gen_composite(spec)
        sidecar = tiles_to_json(tiles, spec.seed, spec.size)
        name = "composite"
    elif kind == "deadleaves":
        params = DeadLeavesParams(**{k: v for k, v in raw.items() if k != "kind"})
        img = gen_dead_leaves(params)
        sidecar = json.dumps(
            {"kind": "deadleaves", "seed": params.seed, "size": params.size,
             "r_min": params.r_min, "r_max": params.r_max,
             "radius_exponent": params.radius_exponent, "gray": params.gray},
            indent=2, sort_keys=True)
        name = "deadleaves"
    else:
        raise ConfigError(f"unknown chart kind {kind!r} in {spec_path}")
    write_png(img, out_dir / f"{name}.png")
    write_raw(img, out_dir / f"{name}.npy")
    _write_text(out_dir / f"{name}.json", sidecar)
    click.echo(f"wrote {out_dir}/{name}.png (+ .npy, .json)")


@main.command("gen-fleet")
@click.option("--spec", "spec_path", required=True, type=click.Path(),
              help="Fleet spec JSON: n_devices, n_brands, seed.")
@click.option("--out", required=True, type=click.Path())
def cmd_gen_fleet(spec_path, out):
    """Draw a device fleet and write fleet.json."""
    raw = _load_json(spec_path, "fleet spec")
    try:
        fleet = gen_fleet(raw["n_devices"], raw["n_brands"], raw.get("seed", 0))
    except KeyError as exc:
        raise ConfigError(f"fleet spec {spec_path} missing key {exc}") from exc
    out_dir = _out_root(out)
    out_dir.mkdir(parents=True, exist_ok=True)
    _write_text(out_dir / "fleet.json", fleet_to_json(fleet, raw.get("seed", 0)))
    click.echo(f"wrote {out_dir}/fleet.json ({len(fleet)} devices)")


@main.command("simulate")
@click.option("--fleet", "fleet_path", required=True, type=click.Path())
@click.option("--chart", "chart_path", required=True, type=click.Path(),
              help="Chart PNG (a .json sidecar next to it is used when present).")
@click.option("--chart-id", default=None, help="Capture subdirectory name.")
@click.option("--out", required=True, type=click.Path())
@click.option("--format", "fmt", type=click.Choice(["png", "npy"]), default="png")
def cmd_simulate(fleet_path, chart_path, chart_id, out, fmt):
    """Capture a chart with every fleet device; write labels.csv."""
    fleet = fleet_from_json(Path(fleet_path).read_text())
    chart = read_png(chart_path)
    sidecar = Path(chart_path).with_suffix(".json")
    window = None
    if sidecar.exists():
        meta = _load_json(sidecar, "chart sidecar")
        if "tiles" in meta:
            tiles = tiles_from_json(json.dumps(meta))
            window = finest_tile(tiles)
    cid = chart_id or Path(chart_path).stem
    out_dir = _out_root(out)
    rows = []
    for d in fleet:
        cap = capture_chart(chart, d, cid)
        dev_dir = out_dir / d.device_id
        dev_dir.mkdir(parents=True, exist_ok=True)
        if fmt == "png":
            write_png(cap, dev_dir / f"{cid}.png")
        else:
            write_raw(cap, dev_dir / f"{cid}.npy")
        rows.append((d.device_id, cid, oracle_label(chart, cap, window)))
    buf = io.StringIO()
    w = csv.writer(buf)
    w.writerow(["device_id", "chart_id", "label"])
    for r in rows:
        w.writerow([r[0], r[1], repr(r[2])])
    _write_text(out_dir / "labels.csv", buf.getvalue())
    click.echo(f"wrote {len(rows)} captures under {out_dir}")


@main.command("register")
@click.option("--capture", "capture_path", required=True, type=click.Path())
@click.option("--reference", "reference_path", required=True, type=click.Path())
@click.option("--out", required=True, type=click.Path())
@click.option("--seed", default=0, type=int)
def cmd_register(capture_path, reference_path, out, seed):
    """Align a capture to a reference chart; write homography + warped PNG."""
    from .register import register_capture

    cap = read_png(capture_path)
    ref = read_png(reference_path)
    h, aligned, inliers, rms = register_capture(cap, ref, seed=seed)
    out_dir = _out_root(out)
    out_dir.mkdir(parents=True, exist_ok=True)
    write_png(aligned, out_dir / "aligned.png")
    _write_text(
        out_dir / "homography.json",
        json.dumps(
            {"matrix_row_major": [float(v) for v in h.matrix.ravel()],
             "inliers": inliers, "rms_px": rms},
            indent=2, sort_keys=True),
    )
    click.echo(f"registered: {inliers} inliers, rms {rms:.3f} px")


def _acutance_one(cap: ImageF, reference: ImageF | None, mode: str,
                  ideal_psd, uniform: ImageF | None, vc: ViewingConditions):
    if mode == "fr":
        curve = mtf_fr(cap, reference)
    else:
        curve = mtf_rr(cap, uniform, ideal_psd)
    return curve, acutance(curve, vc, cap.height)


@main.command("acutance")
@click.option("--captures", "captures_dir", required=True, type=click.Path(),
              help="Directory layout <dir>/<device_id>/<chart_id>.png")
@click.option("--reference", "reference_path", type=click.Path(), default=None,
              help="Noise-free chart PNG (required for fr; rr uses its PSD).")
@click.option("--mode", type=click.Choice(["rr", "fr"]), required=True)
@click.option("--chart-id", required=True, help="Texture chart id to score.")
@click.option("--uniform-id", default=None,
              help="Uniform chart id for rr noise estimation.")
@click.option("--print-height", default=120.0, type=float)
@click.option("--view-distance", default=100.0, type=float)
@click.option("--out", required=True, type=click.Path())
def cmd_acutance(captures_dir, reference_path, mode, chart_id, uniform_id,
                 print_height, view_distance, out):
    """Acutance per device from RR or FR MTF estimation."""
    if reference_path is None:
        raise click.UsageError(f"--reference is required for {mode} mode")
    if mode == "rr" and uniform_id is None:
        raise click.UsageError("--uniform-id is required for rr mode")
    reference = read_png(reference_path)
    ideal = psd_radial(reference) if mode == "rr" else None
    vc = ViewingConditions(print_height=print_height, view_distance=view_distance)
    cap_root = Path(captures_dir)
    if not cap_root.is_dir():
        raise DataError(f"captures directory {cap_root} not found")
    out_dir = _out_root(out)
    out_dir.mkdir(parents=True, exist_ok=True)
    rows = []
    for dev_dir in sorted(p for p in cap_root.iterdir() if p.is_dir()):
        img_path = dev_dir / f"{chart_id}.png"
        if not img_path.exists():
            raise DataError(f"missing capture {img_path}")
        cap = read_png(img_path)
        uniform = None
        if mode == "rr":
            upath = dev_dir / f"{uniform_id}.png"
            if not upath.exists():
                raise DataError(f"missing uniform capture {upath}")
            uniform = read_png(upath)
        curve, score = _acutance_one(cap, reference, mode, ideal, uniform, vc)
        _write_text(out_dir / f"mtf_{mode}_{dev_dir.name}.csv", spectrum_to_csv(curve))
        rows.append((dev_dir.name, score))
    buf = io.StringIO()
    w = csv.writer(buf)
    w.writerow(["device_id", f"acutance_{mode}"])
    for dev, score in rows:
        w.writerow([dev, repr(score)])
    _write_text(out_dir / f"acutance_{mode}.csv", buf.getvalue())
    _write_text(
        out_dir / f"acutance_{mode}.json",
        json.dumps({dev: score for dev, score in rows}, indent=2, sort_keys=True),
    )
    click.echo(f"wrote acutance for {len(rows)} devices to {out_dir}")


def _heatmap_png(values: np.ndarray, path: Path):
    from .regionsel import equalized_heatmap

    eq = equalized_heatmap(values)
    write_png(ImageF.from_array(eq), path)


def _overlay_png(chart: ImageF, rect: Rect, path: Path):
    rgb = np.repeat(chart.luma()[:, :, None], 3, axis=2)
    x0, y0, w, h = rect.as_tuple()
    t = 3
    rgb[y0 : y0 + t, x0 : x0 + w, :] = [1.0, 0.1, 0.1]
    rgb[y0 + h - t : y0 + h, x0 : x0 + w, :] = [1.0, 0.1, 0.1]
    rgb[y0 : y0 + h, x0 : x0 + t, :] = [1.0, 0.1, 0.1]
    rgb[y0 : y0 + h, x0 + w - t : x0 + w, :] = [1.0, 0.1, 0.1]
    write_png(ImageF.from_array(rgb), path)


@main.command("dr2s")
@click.option("--config", "config_path", required=True, type=click.Path())
@click.option("--out", required=True, type=click.Path(),
              help="Output root; the report goes to <out>/<run_id>/.")
@click.option("--stage", type=click.Choice(["all", "map"]), default="all",
              help="'map' reuses existing stage-1 checkpoints.")
@click.option("--workers", default=None, type=int,
              help="Worker threads (default: CPU count).")
def cmd_dr2s(config_path, out, stage, workers):
    """Full three-stage pipeline with cross-validated ablation."""
    raw = _load_json(config_path, "run config")
    cfg = RunConfig.from_dict(raw)
    if workers is not None:
        cfg.workers = workers
    elif not cfg.workers:
        cfg.workers = os.cpu_count() or 1
    run_id = run_id_for(cfg)
    out_dir = _out_root(out) / run_id
    ckpt_dir = out_dir / "checkpoints"
    ckpt_dir.mkdir(parents=True, exist_ok=True)

    fh = logging.FileHandler(out_dir / "run.log")
    fh.setFormatter(logging.Formatter("%(asctime)s %(name)s %(message)s"))
    logging.getLogger().addHandler(fh)
    try:
        report, artifacts = run_ablation(
            cfg, checkpoint_dir=str(ckpt_dir), resume=(stage == "map")
        )
    finally:
        logging.getLogger().removeHandler(fh)

    _write_text(out_dir / "metrics.json",
                json.dumps(report, indent=2, sort_keys=True))
    for fold, art in artifacts.get("folds", {}).items():
        conf = art["confidence"]
        np.save(out_dir / f"confidence_fold{fold}.npy",
                conf.values.astype("<f4"), allow_pickle=False)
        _heatmap_png(conf.values, out_dir / f"confidence_fold{fold}.png")
        _overlay_png(artifacts["chart"], conf.selected,
                     out_dir / f"selected_fold{fold}.png")
        from .regressor import save_net

        save_net(art["net_final"], ckpt_dir / f"fold{fold}_stage3.ckpt",
                 meta={"fold": fold, "stage": 3})
        trace = art["report"].get("stage3_loss_trace", [])
        buf = io.StringIO()
        w = csv.writer(buf)
        w.writerow(["epoch", "loss"])
        for e, v in enumerate(trace):
            w.writerow([e, repr(v)])
        _write_text(out_dir / f"loss_fold{fold}_stage3.csv", buf.getvalue())
    click.echo(f"report written to {out_dir}")


@main.command("predict")
@click.option("--model", "model_path", required=True, type=click.Path())
@click.option("--capture", "capture_path", required=True, type=click.Path())
@click.option("--region", nargs=4, type=int, default=None,
              help="x y w h (default: centered 384px window)")
@click.option("--patches", default=64, type=int)
@click.option("--seed", default=0, type=int)
def cmd_predict(model_path, capture_path, region, patches, seed):
    """Average patch score of a capture under a trained model."""
    from .regionsel import predict_device
    from .regressor import load_net

    net = load_net(model_path)
    cap = read_png(capture_path)
    if region:
        rect = Rect(*region)
    else:
        size = min(384, cap.width, cap.height)
        rect = Rect((cap.width - size) // 2, (cap.height - size) // 2, size, size)
    score = predict_device(net, cap, rect, patches, seed)
    click.echo(json.dumps({"score": score, "region": list(rect.as_tuple())}))


@main.command("map")
@click.option("--model", "model_path", required=True, type=click.Path())
@click.option("--captures", "captures_dir", required=True, type=click.Path())
@click.option("--chart-id", required=True)
@click.option("--region-size", default=384, type=int)
@click.option("--split", is_flag=True,
              help="Also split into low/high-quality maps by median label.")
@click.option("--out", required=True, type=click.Path())
def cmd_map(model_path, captures_dir, chart_id, region_size, split, out):
    """Confidence map from a stage-1 model over a capture directory."""
    from .regionsel import compute_score_maps, confidence_map, split_confidence_maps
    from .regressor import load_net

    net = load_net(model_path)
    cap_root = Path(captures_dir)
    labels_path = cap_root / "labels.csv"
    labels = {}
    if labels_path.exists():
        with open(labels_path) as fh:
            for row in csv.DictReader(fh):
                if row["chart_id"] == chart_id:
                    labels[row["device_id"]] = float(row["label"])
    images, ids = [], []
    for dev_dir in sorted(p for p in cap_root.iterdir() if p.is_dir()):
        img_path = dev_dir / f"{chart_id}.png"
        if img_path.exists():
            images.append(read_png(img_path))
            ids.append(dev_dir.name)
    if len(images) < 2:
        raise DataError(f"need >= 2 captures of {chart_id} under {cap_root}")
    maps = compute_score_maps(net, images)
    conf = confidence_map(maps, region_size)
    out_dir = _out_root(out)
    out_dir.mkdir(parents=True, exist_ok=True)
    np.save(out_dir / "confidence.npy", conf.values.astype("<f4"), allow_pickle=False)
    _heatmap_png(conf.values, out_dir / "confidence.png")
    result = {"selected_region": list(conf.selected.as_tuple()), "n_images": len(images)}
    if split:
        if not labels:
            raise DataError("--split requires labels.csv next to the captures")
        lab = [labels[i] for i in ids]
        low, high = split_confidence_maps(maps, lab, region_size)
        _heatmap_png(low.values, out_dir / "confidence_low.png")
        _heatmap_png(high.values, out_dir / "confidence_high.png")
        np.save(out_dir / "confidence_low.npy", low.values.astype("<f4"),
                allow_pickle=False)
        np.save(out_dir / "confidence_high.npy", high.values.astype("<f4"),
                allow_pickle=False)
        result["split_threshold"] = float(np.median(lab))
    _write_text(out_dir / "map.json", json.dumps(result, indent=2, sort_keys=True))
    click.echo(f"confidence map written to {out_dir}")


@main.command("compare")
@click.argument("reports", nargs=-1, required=True, type=click.Path())
@click.option("--out", required=True, type=click.Path())
def cmd_compare(reports, out):
    """Merge dr2s reports into one ablation table CSV.

    Refuses to compare reports that ran on different fleets or labels.
    """
    loaded = []
    for path in reports:
        p = Path(path)
        if p.is_dir():
            p = p / "metrics.json"
        loaded.append((str(p), _load_json(p, "report")))
    ref_fleet = None
    rows = []
    for path, rep in loaded:
        fleet_sig = json.dumps(rep.get("fleet", {}), sort_keys=True)
        if ref_fleet is None:
            ref_fleet = fleet_sig
        elif fleet_sig != ref_fleet:
            raise DataError(
                f"report {path} ran on a different fleet/labels than "
                f"{loaded[0][0]}; refusing to compare"
            )
        for method, m in sorted(rep.get("methods", {}).items()):
            if method == "random_region":
                rows.append([rep["run_id"], method,
                             m.get("mean_pooled_srocc"), m.get("mean_pooled_krocc")])
            else:
                rows.append([rep["run_id"], method,
                             m["pooled"]["srocc"], m["pooled"]["krocc"]])
    buf = io.StringIO()
    w = csv.writer(buf)
    w.writerow(["run_id", "method", "srocc_pooled", "krocc_pooled"])
    for r in rows:
        w.writerow([r[0], r[1]] + [("" if v is None else repr(v)) for v in r[2:]])
    out_path = _out_root(out)
    _write_text(out_path, buf.getvalue())
    click.echo(f"wrote {out_path} ({len(rows)} rows)")


def entry():
    try:
        main(standalone_mode=False)
    except click.UsageError as exc:
        click.echo(f"usage error: {exc}", err=True)
        sys.exit(2)
    except click.ClickException as exc:
        exc.show()
        sys.exit(2)
    except click.exceptions.Abort:
        sys.exit(1)
    except ConfigError as exc:
        click.echo(f"config error: {exc}", err=True)
        sys.exit(2)
    except DataError as exc:
        click.echo(f"data error: {exc}", err=True)
        sys.exit(3)
    except (NumericError, TexqualError) as exc:
        click.echo(f"numeric error: {exc}", err=True)
        sys.exit(4)


if __name__ == "__main__":
    entry()
