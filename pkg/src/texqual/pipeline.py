"""End-to-end runs: fleet simulation, ablation methods, fold evaluation.

The ablation compares three patch-sourcing strategies with identical
training hyperparameters, mirroring the standard comparison:

* random_patch: patches drawn from the whole chart at train and test;
* random_region: patches restricted to one randomly placed window
  (averaged over several windows);
* selected_region: the full three-stage pipeline with the
  confidence-selected window.

Every stochastic choice derives from the master seed, so a run's report
is a pure function of its configuration.
"""

from __future__ import annotations

import json
import logging
import os
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .charts import (CompositeChartSpec, DeadLeavesParams, finest_tile,
                     gen_composite, gen_dead_leaves)
from .devices import LabeledCapture, capture_chart, gen_fleet, oracle_label
from .errors import ConfigError
from .image import ImageF, Rect, read_png
from .ranking import evaluate_folds, make_folds
from .regionsel import (Dr2sConfig, compute_score_maps, confidence_map,
                        predict_device, run_dr2s, whole_chart_region)
from .regressor import TrainConfig, train
from .rng import derive_seed, spawn

log = logging.getLogger(__name__)

METHODS = ("random_patch", "random_region", "selected_region")


@dataclass
class RunConfig:
    seed: int = 0
    chart: dict = field(default_factory=lambda: {"kind": "composite", "size": 1024})
    fleet: dict = field(default_factory=lambda: {"n_devices": 30, "n_brands": 6})
    train: TrainConfig = field(default_factory=TrainConfig)
    region_size: int = 384
    folds: int = 5
    methods: tuple = METHODS
    n_random_regions: int = 5
    predict_patches: int = 64
    border_crop: float = 0.05
    register: bool = False
    workers: int = 0

    def __post_init__(self):
        for m in self.methods:
            if m not in METHODS:
                raise ConfigError(f"unknown method {m!r}; choose from {METHODS}")
        self.methods = tuple(self.methods)

    @classmethod
    def from_dict(cls, raw: dict) -> "RunConfig":
        raw = dict(raw)
        train_raw = raw.pop("train", {})
        try:
            train_cfg = TrainConfig(**train_raw)
            return cls(train=train_cfg, **raw)
        except TypeError as exc:
            raise ConfigError(f"bad run config: {exc}") from exc

    def to_dict(self) -> dict:
        d = asdict(self)
        d["methods"] = list(self.methods)
        return d


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def run_id_for(cfg: RunConfig) -> str:
    import hashlib

    return hashlib.sha256(canonical_json(cfg.to_dict()).encode()).hexdigest()[:16]


def build_chart(chart_cfg: dict, master_seed: int):
    """Chart from a config dict: (image, tiles-or-None, chart_id).

    Kinds: 'composite', 'deadleaves', 'uniform', or {'path': ...} to load
    a PNG (with optional 'sidecar' JSON for tile metadata).
    """
    c = dict(chart_cfg)
    if "path" in c:
        img = read_png(c["path"])
        tiles = None
        if c.get("sidecar"):
            from .charts import tiles_from_json

            with open(c["sidecar"]) as fh:
                tiles = tiles_from_json(fh.read())
        return img, tiles, c.get("chart_id", "file")
    kind = c.pop("kind", "composite")
    seed = c.pop("seed", derive_seed(master_seed, "chart"))
    if kind == "composite":
        spec = CompositeChartSpec(seed=seed, **c)
        img, tiles = gen_composite(spec)
        return img, tiles, f"composite{spec.size}"
    if kind == "deadleaves":
        params = DeadLeavesParams(seed=seed, **c)
        return gen_dead_leaves(params), None, f"deadleaves{params.size}"
    if kind == "uniform":
        size = c.get("size", 512)
        return ImageF.full(size, size, c.get("level", 0.5)), None, f"uniform{size}"
    raise ConfigError(f"unknown chart kind {kind!r}")


def build_fleet(fleet_cfg: dict, master_seed: int):
    c = dict(fleet_cfg)
    if "path" in c:
        from .devices import fleet_from_json

        with open(c["path"]) as fh:
            return fleet_from_json(fh.read())
    try:
        return gen_fleet(
            n_devices=c["n_devices"],
            n_brands=c["n_brands"],
            seed=c.get("seed", derive_seed(master_seed, "fleet")),
        )
    except KeyError as exc:
        raise ConfigError(f"fleet config needs n_devices and n_brands: {exc}") from exc


def simulate_fleet(chart: ImageF, fleet, chart_id: str, label_window: Rect | None,
                   workers: int = 0):
    """Captures and oracle labels for every device; order-independent."""

    def one(d):
        img = capture_chart(chart, d, chart_id)
        return LabeledCapture(
            image=img,
            label=oracle_label(chart, img, label_window),
            device=d,
            chart_id=chart_id,
        )

    if workers and workers > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(max_workers=workers) as pool:
            caps = list(pool.map(one, fleet))
    else:
        caps = [one(d) for d in fleet]
    return {c.device.device_id: c for c in caps}


def _tile_kind_means(values: np.ndarray, tiles) -> dict:
    out: dict = {}
    for t in tiles:
        sy, sx = t.rect.slices()
        out.setdefault(t.kind, []).append(float(values[sy, sx].mean()))
    return {k: float(np.mean(v)) for k, v in sorted(out.items())}


def run_ablation(cfg: RunConfig, checkpoint_dir=None, resume: bool = False,
                 artifact_sink=None):
    """Cross-validated comparison of the configured methods.

    Returns (report_dict, artifacts) where artifacts maps fold index to
    the confidence map and nets of the selected_region method.  With
    `resume`, existing stage-1 checkpoints under `checkpoint_dir` are
    loaded instead of retraining.
    """
    from .regressor import load_net, save_net

    chart, tiles, chart_id = build_chart(cfg.chart, cfg.seed)
    fleet = build_fleet(cfg.fleet, cfg.seed)
    label_window = finest_tile(tiles) if tiles else None
    log.info("simulating %d captures of %s", len(fleet), chart_id)
    captures = simulate_fleet(chart, fleet, chart_id, label_window, cfg.workers)
    labels = {d: c.label for d, c in captures.items()}
    plan = make_folds(fleet, cfg.folds, derive_seed(cfg.seed, "folds"))

    base = next(iter(captures.values())).image
    full_region = whole_chart_region(base, cfg.border_crop)
    artifacts: dict = {"plan": plan, "chart": chart, "tiles": tiles,
                       "captures": captures, "folds": {}}
    methods_report: dict = {}

    stage1_nets: dict = {}

    def stage1_for(fold: int, train_ids):
        """Whole-chart net shared by random_patch and selected_region."""
        if fold in stage1_nets:
            return stage1_nets[fold]
        ckpt = None
        if checkpoint_dir is not None:
            ckpt = os.path.join(checkpoint_dir, f"fold{fold}_stage1.ckpt")
        net = None
        if resume and ckpt is not None and os.path.exists(ckpt):
            # Checkpoints store float64; restore the training dtype so a
            # resumed run is bit-identical to the original.
            dtype = np.float32 if cfg.train.dtype == "float32" else np.float64
            net = load_net(ckpt).astype(dtype)
            log.info("fold %d: reusing stage-1 checkpoint %s", fold, ckpt)
        if net is None:
            tcfg = replace(cfg.train, seed=derive_seed(cfg.seed, "fold", fold, "stage1"))
            data = [captures[d] for d in train_ids]
            net = train(data, full_region, tcfg).net
            if ckpt is not None:
                save_net(net, ckpt, meta={"fold": fold, "stage": 1,
                                          "seed": tcfg.seed})
        stage1_nets[fold] = net
        return net

    if "random_patch" in cfg.methods:
        def rp_pipeline(train_ids, test_ids, fold):
            net = stage1_for(fold, train_ids)
            return {
                d: predict_device(
                    net, captures[d].image, full_region, cfg.predict_patches,
                    derive_seed(cfg.seed, "fold", fold, "predict_rp", d),
                    cfg.train.patch_size,
                )
                for d in test_ids
            }

        log.info("method random_patch")
        methods_report["random_patch"] = evaluate_folds(rp_pipeline, labels, plan).to_dict()

    if "random_region" in cfg.methods:
        runs = []
        regions_used = []
        for r in range(cfg.n_random_regions):
            # One randomly placed zone per run, shared by all folds.
            rng = spawn(cfg.seed, "rr", r)
            max_x = base.width - cfg.region_size
            max_y = base.height - cfg.region_size
            x0 = int(rng.integers(full_region.x, min(full_region.x + full_region.w - cfg.region_size, max_x) + 1))
            y0 = int(rng.integers(full_region.y, min(full_region.y + full_region.h - cfg.region_size, max_y) + 1))
            region = Rect(x0, y0, cfg.region_size, cfg.region_size)
            regions_used.append({"run": r, "rect": list(region.as_tuple())})

            def rr_pipeline(train_ids, test_ids, fold, r=r, region=region):
                tcfg = replace(cfg.train, seed=derive_seed(cfg.seed, "fold", fold, "rr", r))
                data = [captures[d] for d in train_ids]
                net = train(data, region, tcfg).net
                return {
                    d: predict_device(
                        net, captures[d].image, region, cfg.predict_patches,
                        derive_seed(cfg.seed, "fold", fold, "predict_rr", r, d),
                        cfg.train.patch_size,
                    )
                    for d in test_ids
                }

            log.info("method random_region, run %d/%d", r + 1, cfg.n_random_regions)
            runs.append(evaluate_folds(rr_pipeline, labels, plan).to_dict())
        pooled = [x["pooled"]["srocc"] for x in runs if x["pooled"]["srocc"] is not None]
        pooled_k = [x["pooled"]["krocc"] for x in runs if x["pooled"]["krocc"] is not None]
        methods_report["random_region"] = {
            "runs": runs,
            "regions": regions_used,
            "mean_pooled_srocc": float(np.mean(pooled)) if pooled else None,
            "mean_pooled_krocc": float(np.mean(pooled_k)) if pooled_k else None,
        }

    if "selected_region" in cfg.methods:
        selected_rects = {}

        def sr_pipeline(train_ids, test_ids, fold):
            data = [captures[d] for d in train_ids]
            stage1_net = stage1_for(fold, train_ids)
            dcfg = Dr2sConfig(
                train=cfg.train,
                region_size=cfg.region_size,
                border_crop=cfg.border_crop,
                predict_patches=cfg.predict_patches,
                seed=derive_seed(cfg.seed, "fold", fold),
            )
            map_images = None
            if cfg.register:
                from .register import register_capture

                map_images = []
                for c in data:
                    _, aligned, _, _ = register_capture(
                        c.image, chart,
                        seed=derive_seed(cfg.seed, "fold", fold, "register",
                                         c.device.device_id),
                    )
                    map_images.append(aligned)
            res = run_dr2s(
                [c.image for c in data], [c.label for c in data], dcfg,
                workers=cfg.workers, stage1_net=stage1_net, map_images=map_images,
            )
            selected_rects[fold] = list(res.confidence.selected.as_tuple())
            fold_art = {
                "confidence": res.confidence,
                "net_final": res.net_final,
                "net_stage1": res.net_stage1,
                "report": res.report,
            }
            if tiles:
                fold_art["tile_means"] = _tile_kind_means(res.confidence.values, tiles)
            artifacts["folds"][fold] = fold_art
            return {
                d: predict_device(
                    res.net_final, captures[d].image, res.confidence.selected,
                    cfg.predict_patches,
                    derive_seed(cfg.seed, "fold", fold, "predict_sr", d),
                    cfg.train.patch_size,
                )
                for d in test_ids
            }

        log.info("method selected_region")
        sr = evaluate_folds(sr_pipeline, labels, plan).to_dict()
        sr["selected_rects"] = {str(f): selected_rects[f] for f in sorted(selected_rects)}
        if tiles:
            sr["tile_means"] = {
                str(f): artifacts["folds"][f]["tile_means"]
                for f in sorted(artifacts["folds"])
            }
        methods_report["selected_region"] = sr

    report = {
        "schema": "texqual/dr2s-report/v1",
        "run_id": run_id_for(cfg),
        "seed": cfg.seed,
        "config": cfg.to_dict(),
        "chart": {
            "chart_id": chart_id,
            "size": [base.width, base.height],
            "tiles": [
                {"kind": t.kind, "rect": list(t.rect.as_tuple())} for t in tiles
            ] if tiles else None,
        },
        "fleet": {
            "devices": [
                {"device_id": d.device_id, "brand_id": d.brand_id} for d in fleet
            ],
            "labels": {k: labels[k] for k in sorted(labels)},
        },
        "folds": {
            "k": plan.k,
            "assignment": {k: plan.assignment[k] for k in sorted(plan.assignment)},
        },
        "methods": methods_report,
    }
    return report, artifacts
