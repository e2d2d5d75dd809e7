"""Experiment runner, EPE evaluation, comparison reports, overlap analysis,
and prediction visualization."""

from __future__ import annotations

import time
import warnings
from dataclasses import dataclass, field, replace
from fractions import Fraction
from pathlib import Path

import numpy as np

from . import data as data_mod
from . import formats
from .networks import NetworkInstance, build_network, count_params, topology
from .tensor import Tensor
from .training import (
    AugmentConfig,
    TrainConfig,
    assemble_batch,
    mean_epe,
    train,
)
from .weights_io import save_weights

__all__ = [
    "evaluate",
    "checkerboard_overlap",
    "OverlapReport",
    "ResultRow",
    "compare",
    "parse_rows_csv",
    "visualize",
    "ExperimentConfig",
    "desk_preset",
    "run_experiment",
    "zero_predictor_epe",
    "mean_predictor_epe",
]


def evaluate(net: NetworkInstance, dataset) -> tuple[float, list[float]]:
    """Mean full-resolution EPE over a dataset, plus the per-sample values."""
    return mean_epe(net, dataset)


def _gt_array(sample) -> np.ndarray:
    return sample.flow if isinstance(sample, data_mod.FlowSample) else sample.disparity


def zero_predictor_epe(dataset) -> float:
    """EPE of the all-zeros prediction: the trivial baseline every model must beat."""
    vals = []
    for s in dataset:
        gt = _gt_array(s).astype(np.float64)
        norm = np.abs(gt[0]) if gt.shape[0] == 1 else np.sqrt((gt * gt).sum(axis=0))
        vals.append(norm.mean())
    return float(np.mean(vals))


def mean_predictor_epe(train_set, eval_set) -> float:
    """EPE of predicting the training set's per-channel mean everywhere."""
    mean_vec = np.mean([_gt_array(s).mean(axis=(1, 2)) for s in train_set], axis=0)
    vals = []
    for s in eval_set:
        gt = _gt_array(s).astype(np.float64)
        diff = gt - mean_vec[:, None, None]
        norm = np.abs(diff[0]) if gt.shape[0] == 1 else np.sqrt((diff * diff).sum(axis=0))
        vals.append(norm.mean())
    return float(np.mean(vals))


@dataclass(frozen=True)
class OverlapReport:
    counts: np.ndarray  # contribution count per interior output position
    uniform: bool


def checkerboard_overlap(k: int, s: int, length: int = 16) -> OverlapReport:
    """Contribution counts of a 1-D transposed convolution's interior outputs.

    Position t of an (unbounded-input) transposed convolution receives one
    contribution per kernel index j with j = t mod s (mod s and j < k), so
    the count pattern is periodic with period s and is uniform exactly when
    k is divisible by s (for k >= s).
    """
    if k < 1 or s < 1 or length < 1:
        raise ValueError(f"need k, s, length >= 1, got {(k, s, length)}")
    counts = np.empty(length, dtype=np.int64)
    for i in range(length):
        r = (k - 1 + i) % s  # interior positions start at output index k-1
        counts[i] = 0 if r > k - 1 else (k - 1 - r) // s + 1
    return OverlapReport(counts=counts, uniform=bool((counts == counts[0]).all()))


@dataclass(frozen=True)
class ResultRow:
    method: str
    params: int
    train_epe: float
    val_epe: float
    seconds: float
    seed: int

    def __post_init__(self) -> None:
        if self.params <= 0:
            raise ValueError("params must be positive")
        if self.train_epe < 0 or self.val_epe < 0:
            raise ValueError("EPE must be non-negative")


_CSV_HEADER = "method,params,train_epe,val_epe,seconds,seed"


def compare(rows: list[ResultRow], fmt: str = "markdown") -> str:
    """Comparison table over methods, ordered by name; csv or markdown."""
    if not rows:
        raise ValueError("compare: need at least one row")
    rows = sorted(rows, key=lambda r: r.method)
    if fmt == "csv":
        lines = [_CSV_HEADER]
        for r in rows:
            lines.append(f"{r.method},{r.params},{r.train_epe!r},{r.val_epe!r},{r.seconds!r},{r.seed}")
        return "\n".join(lines) + "\n"
    if fmt != "markdown":
        raise ValueError(f"unknown format {fmt!r}")
    lines = [
        "| Method | Params (Mils) | Train EPE | Val EPE | Time (s) | Seed |",
        "|---|---|---|---|---|---|",
    ]
    for r in rows:
        lines.append(
            f"| {r.method} | {r.params / 1e6:.3f} | {r.train_epe:.4f} "
            f"| {r.val_epe:.4f} | {r.seconds:.1f} | {r.seed} |"
        )
    return "\n".join(lines) + "\n"


def parse_rows_csv(text: str) -> list[ResultRow]:
    lines = [l for l in text.splitlines() if l.strip()]
    if not lines or lines[0] != _CSV_HEADER:
        raise ValueError(f"rows CSV must start with {_CSV_HEADER!r}")
    rows = []
    for line in lines[1:]:
        method, params, tr, va, sec, seed = line.split(",")
        rows.append(ResultRow(method, int(params), float(tr), float(va), float(sec), int(seed)))
    return rows


def _normalize_plane(plane: np.ndarray, symmetric: bool) -> np.ndarray:
    if not np.isfinite(plane).all():
        warnings.warn("visualize: clamping non-finite values", stacklevel=2)
        plane = np.nan_to_num(plane, nan=0.0, posinf=0.0, neginf=0.0)
    if symmetric:
        span = float(np.abs(plane).max())
        if span == 0.0:
            return np.full_like(plane, 0.5)
        return 0.5 + 0.5 * plane / span
    lo, hi = float(plane.min()), float(plane.max())
    if hi == lo:
        return np.full_like(plane, 0.5)  # degenerate range renders mid-gray
    return (plane - lo) / (hi - lo)


def visualize(pred: Tensor, kind: str, path_prefix) -> list[Path]:
    """Render a prediction to PGM files; returns the paths written.

    Disparity becomes one min-max normalized grayscale image.  Flow becomes
    u and v images normalized symmetrically about mid-gray plus a magnitude
    image (black at zero motion).
    """
    if pred.c not in (1, 2):
        raise ValueError(f"visualize: prediction must have 1 or 2 channels, got {pred.c}")
    prefix = Path(path_prefix)
    arr = pred.data[0].astype(np.float64)
    written = []
    if kind == "disparity":
        if pred.c != 1:
            raise ValueError("disparity visualization needs a 1-channel prediction")
        out = prefix.with_suffix(".pgm")
        formats.write_pgm(_normalize_plane(arr[0], symmetric=False)[None].astype(np.float32), out)
        written.append(out)
    elif kind == "flow":
        if pred.c != 2:
            raise ValueError("flow visualization needs a 2-channel prediction")
        for i, tag in enumerate(("u", "v")):
            out = prefix.with_name(prefix.name + f".{tag}.pgm")
            formats.write_pgm(_normalize_plane(arr[i], symmetric=True)[None].astype(np.float32), out)
            written.append(out)
        mag = np.sqrt((arr * arr).sum(axis=0))
        peak = float(mag.max())
        scaled = mag / peak if peak > 0 else mag  # zero motion stays black
        out = prefix.with_name(prefix.name + ".mag.pgm")
        formats.write_pgm(scaled[None].astype(np.float32), out)
        written.append(out)
    else:
        raise ValueError(f"visualize: unknown kind {kind!r}")
    return written


@dataclass(frozen=True)
class ExperimentConfig:
    """Everything one training/evaluation run needs."""

    topology_name: str
    width_mult: Fraction = Fraction(1)
    num_stages: int = 6
    max_disp: int = 35
    dataset_mode: str = "flow"  # flow | stereo
    n_samples: int = 200
    size: tuple[int, int] = (64, 64)
    manifest_path: str | None = None  # overrides the synthetic generator
    train_cfg: TrainConfig = field(default_factory=TrainConfig)
    augment_cfg: AugmentConfig | None = None
    out_dir: str = "runs"

    def to_config_text(self) -> str:
        t = self.train_cfg
        a = self.augment_cfg
        lines = [
            f"topology = {self.topology_name}",
            f"width_mult = {self.width_mult}",
            f"num_stages = {self.num_stages}",
            f"max_disp = {self.max_disp}",
            f"dataset_mode = {self.dataset_mode}",
            f"n_samples = {self.n_samples}",
            f"size = {self.size[0]}x{self.size[1]}",
            f"manifest = {self.manifest_path or 'none'}",
            f"out_dir = {self.out_dir}",
            f"batch_size = {t.batch_size}",
            f"base_lr = {t.base_lr!r}",
            f"epochs = {t.epochs}",
            f"milestones = {','.join(str(m) for m in t.milestones) or 'none'}",
            f"decay = {t.decay!r}",
            f"seed = {t.seed}",
        ]
        if a is not None:
            lines += [
                f"augment_crop = {f'{a.crop[0]}x{a.crop[1]}' if a.crop else 'none'}",
                f"augment_rotate = {int(a.rotate)}",
                f"augment_translate = {int(a.translate)}",
                f"augment_hflip = {int(a.hflip)}",
                f"augment_vflip = {int(a.vflip)}",
            ]
        return "\n".join(lines) + "\n"

    @staticmethod
    def from_config_text(text: str) -> "ExperimentConfig":
        from .networks import parse_kv_config

        kv = parse_kv_config(text)
        required = ("topology", "dataset_mode")
        missing = [k for k in required if k not in kv]
        if missing:
            raise ValueError(f"experiment config missing keys: {missing}")
        milestones_txt = kv.get("milestones", "none")
        milestones = (
            () if milestones_txt == "none"
            else tuple(int(v) for v in milestones_txt.split(","))
        )
        tc = TrainConfig(
            batch_size=int(kv.get("batch_size", "8")),
            base_lr=float(kv.get("base_lr", "1e-4")),
            epochs=int(kv.get("epochs", "300")),
            milestones=milestones,
            decay=float(kv.get("decay", "0.5")),
            seed=int(kv.get("seed", "0")),
        )
        mode = kv["dataset_mode"]
        aug_mode = "flow" if mode == "flow" else "stereo"
        crop_txt = kv.get("augment_crop", "none")
        ac = AugmentConfig(
            mode=aug_mode,
            crop=None if crop_txt == "none" else tuple(int(v) for v in crop_txt.split("x")),
            rotate=bool(int(kv.get("augment_rotate", "0"))),
            translate=bool(int(kv.get("augment_translate", "0"))),
            hflip=bool(int(kv.get("augment_hflip", "1"))),
            vflip=bool(int(kv.get("augment_vflip", "1"))),
        )
        h, w = (int(v) for v in kv.get("size", "64x64").split("x"))
        manifest = kv.get("manifest", "none")
        return ExperimentConfig(
            topology_name=kv["topology"],
            width_mult=Fraction(kv.get("width_mult", "1")),
            num_stages=int(kv.get("num_stages", "6")),
            max_disp=int(kv.get("max_disp", "35")),
            dataset_mode=mode,
            n_samples=int(kv.get("n_samples", "200")),
            size=(h, w),
            manifest_path=None if manifest == "none" else manifest,
            train_cfg=tc,
            augment_cfg=ac,
            out_dir=kv.get("out_dir", "runs"),
        )


# frozen desk-scale recipe: milestones keep the 1/3, 1/2, 2/3 fractions of
# the full 300-epoch schedule, scaled down to 50 epochs
DESK_EPOCHS = 50
DESK_MILESTONES = (17, 25, 34)
DESK_SAMPLES = 200
DESK_SIZE = (64, 64)
DESK_WIDTH = Fraction(1, 8)
DESK_STAGES = 5
DESK_LR = 1e-3  # desk-scale nets are tiny; the full-scale 1e-4 is needlessly slow here


def desk_preset(topology_name: str, out_dir: str = "runs", seed: int = 7) -> ExperimentConfig:
    """The shipped desk-scale experiment: width 1/8, 64x64, 200 samples, 50 epochs."""
    mode = "flow" if topology_name in ("flownet", "flospnet") else "stereo"
    return ExperimentConfig(
        topology_name=topology_name,
        width_mult=DESK_WIDTH,
        num_stages=DESK_STAGES,
        dataset_mode=mode,
        n_samples=DESK_SAMPLES,
        size=DESK_SIZE,
        train_cfg=TrainConfig(
            batch_size=8,
            base_lr=DESK_LR,
            epochs=DESK_EPOCHS,
            milestones=DESK_MILESTONES,
            decay=0.5,
            seed=seed,
        ),
        augment_cfg=AugmentConfig(mode=mode, hflip=True, vflip=True),
        out_dir=out_dir,
    )


def _load_dataset(cfg: ExperimentConfig):
    if cfg.manifest_path is not None:
        manifest = data_mod.load_manifest(cfg.manifest_path)
        base = Path(cfg.manifest_path).parent
        train_set = data_mod.load_samples(manifest, base, split="train")
        val_set = data_mod.load_samples(manifest, base, split="val")
        return train_set, val_set
    gen = (data_mod.gen_synthetic_flow if cfg.dataset_mode == "flow"
           else data_mod.gen_synthetic_stereo)
    samples = gen(cfg.n_samples, cfg.size, np.random.default_rng(cfg.train_cfg.seed))
    tags = [data_mod.split_tag(cfg.train_cfg.seed, i) for i in range(len(samples))]
    train_set = [s for s, t in zip(samples, tags) if t == "train"]
    val_set = [s for s, t in zip(samples, tags) if t == "val"]
    return train_set, val_set


def run_experiment(cfg: ExperimentConfig) -> ResultRow:
    """Build, train, evaluate and persist one experiment; deterministic per seed."""
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    try:
        spec = topology(cfg.topology_name, width_mult=cfg.width_mult,
                        num_stages=cfg.num_stages, max_disp=cfg.max_disp)
        net = build_network(spec, cfg.train_cfg.seed)
        train_set, val_set = _load_dataset(cfg)
        if not train_set or not val_set:
            raise ValueError("experiment needs non-empty train and val splits")

        aug = cfg.augment_cfg
        if aug is None:
            aug = AugmentConfig(mode="flow" if cfg.dataset_mode == "flow" else "stereo")
        if spec.encoder.variant == "mono" and aug.mode != "mono":
            aug = replace(aug, mode="mono")

        started = time.time()
        history = train(net, train_set, cfg.train_cfg, aug, val_dataset=val_set)
        seconds = time.time() - started

        train_epe = mean_epe(net, train_set)[0]
        val_epe = mean_epe(net, val_set)[0]

        (out / "experiment.cfg").write_text(cfg.to_config_text(), encoding="ascii")
        save_weights(net, out / f"{cfg.topology_name}.weights")
        history.to_csv(out / "history.csv")
        inputs, _ = assemble_batch([val_set[0]], spec)
        pred = net.forward(*inputs).full
        visualize(pred, "flow" if cfg.dataset_mode == "flow" else "disparity",
                  out / "val_sample0")

        row = ResultRow(cfg.topology_name, count_params(net), train_epe, val_epe,
                        seconds, cfg.train_cfg.seed)
        baselines = (
            f"zero_predictor_val_epe = {zero_predictor_epe(val_set)!r}\n"
            f"mean_predictor_val_epe = {mean_predictor_epe(train_set, val_set)!r}\n"
        )
        (out / "baselines.cfg").write_text(baselines, encoding="ascii")
        (out / "result.csv").write_text(compare([row], "csv"), encoding="ascii")
        return row
    except Exception as e:
        e.args = (f"[experiment {cfg.topology_name} seed {cfg.train_cfg.seed}] {e}",)
        raise
