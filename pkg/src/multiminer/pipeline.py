"""Pipeline stages and the run-directory layout they share.

Every stage reads its inputs from disk, writes its outputs into the run
directory and leaves a completion marker, so any stage can be rerun from
the artifacts of the one before it.
"""
from __future__ import annotations

import csv
import json
import logging
import shutil
import time
from pathlib import Path

import numpy as np

from . import distmap, pngio
from .autodiff import resize_np
from .config import RunConfig, config_from_dict
from .errors import MissingArtifactError
from .metrics import mining_report
from .mining import MiningConfig, erasure_probe, load_pools, merge_final, run_mining, save_pools
from .nets import MinerNetworks, pretrain_classifier
from .scenes import Dataset, category_color, generate_dataset, load_dataset, save_dataset

log = logging.getLogger(__name__)

OUT_ENV = "MULTIMINER_OUT"
# report sections that hold wall-clock values; everything else is deterministic
TIMING_KEY = "timing"


class RunDir:
    """Paths of one run directory plus marker, log and report helpers."""

    def __init__(self, root):
        self.root = Path(root)
        self.config = self.root / "config.json"
        self.dataset = self.root / "dataset"
        self.ckpt = self.root / "ckpt"
        self.pools = self.root / "pools"
        self.steps = self.root / "steps"
        self.ablations = self.root / "ablations"
        self.gan = self.root / "gan"
        self.figures = self.root / "figures"
        self.report = self.root / "report.json"
        self.markers = self.root / "markers"
        self.log_path = self.root / "run_log.jsonl"

    def ensure(self) -> "RunDir":
        self.root.mkdir(parents=True, exist_ok=True)
        return self

    def log(self, record: dict) -> None:
        self.ensure()
        with self.log_path.open("a") as fh:
            fh.write(json.dumps(record) + "\n")

    def mark(self, stage: str, info: dict | None = None) -> None:
        self.markers.mkdir(parents=True, exist_ok=True)
        (self.markers / f"{stage}.done").write_text(json.dumps(info or {}))
        self.log({"event": "stage_complete", "stage": stage})

    def is_done(self, stage: str) -> bool:
        return (self.markers / f"{stage}.done").exists()

    def read_report(self) -> dict:
        return json.loads(self.report.read_text()) if self.report.exists() else {}

    def update_report(self, section: str, value, seconds: float | None = None) -> dict:
        report = self.read_report()
        report[section] = value
        if seconds is not None:
            report.setdefault(TIMING_KEY, {})[section] = seconds
        self.ensure()
        self.report.write_text(json.dumps(report, indent=1, sort_keys=True))
        return report

    def record_time(self, name: str, seconds: float) -> dict:
        report = self.read_report()
        report.setdefault(TIMING_KEY, {})[name] = seconds
        self.report.write_text(json.dumps(report, indent=1, sort_keys=True))
        return report

    def reset(self) -> None:
        """Forget results of an earlier run in this directory (report and markers)."""
        self.report.unlink(missing_ok=True)
        if self.markers.exists():
            shutil.rmtree(self.markers)

    def load_config(self) -> RunConfig:
        if not self.config.exists():
            raise MissingArtifactError(f"no config.json in {self.root}")
        return config_from_dict(json.loads(self.config.read_text()))


def metric_view(report: dict) -> dict:
    """The report without its wall-clock section (what determinism compares)."""
    return {k: v for k, v in report.items() if k != TIMING_KEY}


def _write_csv(path: Path, rows: list[dict]) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        if rows:
            writer = csv.DictWriter(fh, fieldnames=list(rows[0]))
            writer.writeheader()
            writer.writerows(rows)
    return path


def _mining_scenes(ds: Dataset) -> list:
    # image-level labels are all the miner sees, so it runs on the training split
    return ds.subset("train")


def _fresh_miner_nets(ckpt: Path) -> MinerNetworks:
    nets = MinerNetworks.load(ckpt)
    nets.init_generator_from_modulator()
    return nets


def _eval_resolution(cfg: RunConfig, mining: MiningConfig) -> int:
    return int(mining.scales[-1]) // cfg.networks.extractor.stride


# ---------------------------------------------------------------------------
# stages
# ---------------------------------------------------------------------------

def stage_gen_data(cfg: RunConfig, out: Path) -> Dataset:
    ds = generate_dataset(cfg.dataset)
    save_dataset(ds, out)
    return ds


def stage_pretrain(cfg: RunConfig, ds: Dataset, out: Path, log_fn=None) -> tuple[MinerNetworks, dict]:
    nets = MinerNetworks(cfg.networks)
    t0 = time.perf_counter()

    def on_epoch(epoch, loss):
        if log_fn is not None:
            log_fn({"event": "pretrain_epoch", "epoch": epoch, "loss": loss})

    metrics = pretrain_classifier(nets, ds, cfg.pretrain, on_epoch=on_epoch)
    seconds = time.perf_counter() - t0
    nets.save(out)
    (out / "pretrain.json").write_text(json.dumps({**metrics, "seconds": seconds}, indent=1))
    return nets, {**metrics, "seconds": seconds}


def stage_mine(cfg: RunConfig, ds: Dataset, ckpt: Path, out: Path, mining: MiningConfig | None = None,
               log_fn=None, keep_steps: bool = True) -> dict:
    """Mine the training split and store the final pools under ``out/pools``."""
    mining = mining or cfg.mining
    nets = _fresh_miner_nets(ckpt)
    if (out / "steps").exists():
        shutil.rmtree(out / "steps")
    t0 = time.perf_counter()
    miner = run_mining(nets, _mining_scenes(ds), mining, run_dir=out if keep_steps else None,
                       log_fn=log_fn)
    seconds = time.perf_counter() - t0
    save_pools(miner.pools, out / "pools")
    return {"steps_run": miner.step, "seconds": seconds}


def evaluate_pools(cfg: RunConfig, ds: Dataset, pools_dir: Path, mining: MiningConfig | None = None) -> dict:
    mining = mining or cfg.mining
    pools = load_pools(pools_dir)
    scenes = _mining_scenes(ds)
    if len(pools) != len(scenes):
        raise MissingArtifactError(f"{pools_dir} holds {len(pools)} images, "
                                   f"dataset split has {len(scenes)}")
    return mining_report(pools, scenes, _eval_resolution(cfg, mining), cfg.eval.theta_fg,
                         mining.theta_mask)


def write_mining_figures(report: dict, figures: Path, prefix: str = "") -> None:
    curve = report["step_curve"]
    _write_csv(figures / f"{prefix}step_curve.csv", curve)
    chart = {k: [(r["T"], r[k]) for r in curve] for k in ("recall", "precision", "pseudo_iou")}
    pngio.write_png(figures / f"{prefix}step_curve.png", pngio.line_chart(chart))
    area = [{"step": int(t), "new_area_frac": v} for t, v in report["new_area_per_step"].items()]
    _write_csv(figures / f"{prefix}new_area.csv", area)
    top = max([r["new_area_frac"] for r in area] + [1e-9])
    pngio.write_png(figures / f"{prefix}new_area.png", pngio.line_chart(
        {"new_area": [(r["step"], r["new_area_frac"]) for r in area]}, y_range=(0.0, top)))
    _write_csv(figures / f"{prefix}per_object.csv", report["per_object"])


def stage_ablations(cfg: RunConfig, ds: Dataset, ckpt: Path, root: Path,
                    log_fn=None) -> tuple[dict, dict]:
    """Fixed-scale baselines; returns (metrics per scale, seconds per scale)."""
    out, seconds = {}, {}
    for s in cfg.eval.ablation_scales:
        mining = MiningConfig.fixed_scale(cfg.mining, int(s))
        d = root / f"scale_{int(s)}"
        summary = stage_mine(cfg, ds, ckpt, d, mining, log_fn=log_fn, keep_steps=False)
        rep = evaluate_pools(cfg, ds, d / "pools", mining)
        out[str(int(s))] = {"final": rep["final"], "adaptivity": rep["adaptivity"],
                            "t_max": rep["t_max"], "steps_run": summary["steps_run"]}
        seconds[str(int(s))] = summary["seconds"]
    return out, seconds


def stage_probe(cfg: RunConfig, ds: Dataset, ckpt: Path) -> dict:
    """Blank one category out of the input and check its pools stop; every category in turn."""
    nets = _fresh_miner_nets(ckpt)
    scenes = _mining_scenes(ds)
    results = [erasure_probe(nets, scenes, j, cfg.mining, n_images=cfg.eval.probe_images)
               for j in range(cfg.dataset.num_categories)]
    return {"categories": results, "passed": all(r["passed"] for r in results)}


def stage_ganverify(cfg: RunConfig, out: Path) -> dict:
    p0 = distmap.ToyDistribution(cfg.gan.p0["kind"], dict(cfg.gan.p0.get("params", {})))
    p1 = distmap.ToyDistribution(cfg.gan.p1["kind"], dict(cfg.gan.p1.get("params", {})))
    report, pair = distmap.verify(p0, p1, cfg.gan.train)
    distmap.write_report(report, pair, p0, p1, out)
    with (out / "gan_hist.csv").open() as fh:
        rows = [{k: float(v) for k, v in r.items()} for r in csv.DictReader(fh)]
    top = max(max(r["p0"], r["p1"], r["q1"]) for r in rows)
    chart = {k: [(0.5 * (r["lo"] + r["hi"]), r[k]) for r in rows] for k in ("p0", "p1", "q1")}
    pngio.write_png(out / "gan_hist.png", pngio.line_chart(chart, y_range=(0.0, top)))
    return report


# ---------------------------------------------------------------------------
# panels
# ---------------------------------------------------------------------------

# 3x5 bitmap glyphs for the labels drawn on panels
_GLYPHS = {
    "S": ["111", "100", "111", "001", "111"], "T": ["111", "010", "010", "010", "010"],
    "O": ["111", "101", "101", "101", "111"], "P": ["111", "101", "111", "100", "100"],
}


def _stamp_text(tile: np.ndarray, text: str, color, scale: int = 3) -> None:
    h, w = tile.shape[:2]
    width = (4 * len(text) - 1) * scale
    y0, x0 = (h - 5 * scale) // 2, (w - width) // 2
    for k, ch in enumerate(text):
        glyph = np.array([[c == "1" for c in row] for row in _GLYPHS[ch]])
        block = pngio.upscale(glyph, scale)
        ys, xs = np.nonzero(block)
        tile[y0 + ys, x0 + k * 4 * scale + xs] = color


def render_panel(scene, pools_i: dict, res: int, zoom: int = 2) -> np.ndarray:
    """One row per positive category: input, each stored map, a Stop tile, the merged region."""
    size = scene.image.shape[-1]
    tile = size * zoom
    gap = 4
    image = pngio.upscale(np.transpose(scene.image, (1, 2, 0)), zoom)
    n_cols = 3 + max((p.num_steps for p in pools_i.values()), default=0)
    rows = []
    for j, pool in sorted(pools_i.items()):
        color = category_color(j, len(scene.labels))
        tiles = [image]
        for m in pool.maps:
            heat = 1.0 - resize_np(m.values, size, size)
            tiles.append(pngio.upscale(heat[..., None] * color, zoom))
        stop = np.ones((tile, tile, 3))
        if pool.stopped and not pool.forced:
            _stamp_text(stop, "STOP", (0.85, 0.1, 0.1))
        tiles.append(stop)
        merged = 1.0 - resize_np(merge_final(pool, res), size, size) if pool.maps \
            else np.zeros((size, size))
        overlay = np.transpose(scene.image, (1, 2, 0)) * 0.4 + 0.6 * merged[..., None] * color
        tiles.append(pngio.upscale(overlay, zoom))
        while len(tiles) < n_cols:
            tiles.insert(-1, np.ones((tile, tile, 3)))
        spacer = np.ones((tile, gap, 3))
        rows.append(np.concatenate([x for t in tiles for x in (t, spacer)][:-1], axis=1))
    if not rows:
        return image
    hspacer = np.ones((gap, rows[0].shape[1], 3))
    return np.concatenate([x for r in rows for x in (r, hspacer)][:-1], axis=0)


def stage_render(run: RunDir, image_ids: list[str] | None = None) -> list[Path]:
    cfg = run.load_config()
    ds = load_dataset(run.dataset)
    pools = load_pools(run.pools)
    scenes = _mining_scenes(ds)
    by_id = {sc.id: (sc, p) for sc, p in zip(scenes, pools)}
    if image_ids is None:
        image_ids = [sc.id for sc in scenes[:cfg.eval.render_images]]
    missing = [i for i in image_ids if i not in by_id]
    if missing:
        raise MissingArtifactError(f"no mined pools for image(s) {', '.join(missing)}")
    res = _eval_resolution(cfg, cfg.mining)
    out = []
    for image_id in image_ids:
        sc, pools_i = by_id[image_id]
        out.append(pngio.write_png(run.figures / "panels" / f"{image_id}.png",
                                   render_panel(sc, pools_i, res)))
    return out


# ---------------------------------------------------------------------------
# acceptance statistics
# ---------------------------------------------------------------------------

def acceptance_summary(report: dict, cfg: RunConfig) -> dict:
    """Statistics and pass flags for every criterion the pipeline itself can measure."""
    out = {}
    pre = report.get("pretrain")
    if pre:
        out["pretrain_gate"] = {"eval_macro_f1": pre["eval_macro_f1"],
                                "passed": pre["eval_macro_f1"] >= 0.95}
    probe = report.get("probe")
    if probe:
        out["stop_probe"] = {"per_category": {str(r["category"]): r["passed"]
                                              for r in probe["categories"]},
                             "passed": probe["passed"]}
    mining = report.get("mining")
    if mining:
        ad = mining["adaptivity"]
        if "spearman" in ad:
            med = ad["median_steps"]
            out["adaptivity"] = {"spearman": ad["spearman"], "median_steps": med,
                                 "passed": ad["spearman"] >= 0.5 and med["large"] > med["small"]}
        curve = mining["step_curve"]
        recalls = [r["recall"] for r in curve]
        monotone = all(b >= a - 0.01 for a, b in zip(recalls, recalls[1:]))
        gain = curve[-1]["pseudo_iou"] - curve[0]["pseudo_iou"]
        out["step_curve"] = {"recall": recalls, "recall_monotone": monotone,
                             "pseudo_iou_gain": gain, "passed": monotone and gain >= 0.05}
        area = mining["new_area_per_step"]
        k = len(cfg.mining.scales)
        first, at_k = area.get("1"), area.get(str(k))
        area_ok = first is not None and (at_k is None or first > at_k)
        multi = mining["final"]["iou"]
        singles = {s: a["final"]["iou"] for s, a in report.get("ablations", {}).items()}
        scale_ok = all(multi >= v - 0.02 for v in singles.values())
        out["multi_scale"] = {"new_area_step1": first, "new_area_stepK": at_k,
                              "final_iou": multi, "single_scale_iou": singles,
                              "passed": area_ok and scale_ok}
    gan = report.get("gan")
    if gan:
        ok = gan["divergence_post"] < 0.1 * gan["divergence_pre"] \
            and 0.4 <= gan["d_accuracy"] <= 0.6
        out["gan"] = {"ratio": gan["ratio"], "d_accuracy": gan["d_accuracy"], "passed": ok}
    return out
