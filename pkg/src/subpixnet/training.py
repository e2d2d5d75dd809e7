"""Supervised training: multi-scale endpoint-error loss, Adam, milestone
learning-rate decay, and mode-aware augmentation."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import ops
from .data import FlowSample, StereoSample
from .networks import NetworkInstance, TopologySpec
from .tensor import Tape, Tensor, backward, record_op

__all__ = [
    "TrainConfig",
    "AugmentConfig",
    "OptimizerState",
    "TrainHistory",
    "EpochStats",
    "TrainingDiverged",
    "epe",
    "downsample_field",
    "epe_loss_term",
    "multiscale_epe_loss",
    "lr_at",
    "adam_step",
    "augment",
    "assemble_batch",
    "mean_epe",
    "train",
]


@dataclass(frozen=True)
class TrainConfig:
    """Optimizer and schedule hyperparameters."""

    batch_size: int = 8
    base_lr: float = 1e-4
    epochs: int = 300
    milestones: tuple[int, ...] = (100, 150, 200)
    decay: float = 0.5
    adam_betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    seed: int = 0
    scale_weights: tuple[float, ...] | None = None  # None: equal weights summing to 1

    def __post_init__(self) -> None:
        if self.batch_size < 1 or self.epochs < 1:
            raise ValueError("batch_size and epochs must be positive")
        if any(m2 <= m1 for m1, m2 in zip(self.milestones, self.milestones[1:])):
            raise ValueError(f"milestones must be strictly increasing, got {self.milestones}")
        if any(m >= self.epochs for m in self.milestones):
            raise ValueError(f"milestones {self.milestones} must all be < epochs {self.epochs}")
        if self.scale_weights is not None and any(w <= 0 for w in self.scale_weights):
            raise ValueError("scale_weights must be positive")


@dataclass(frozen=True)
class AugmentConfig:
    """Which random modifications to apply; stereo/mono modes are restricted."""

    mode: str  # flow | stereo | mono
    crop: tuple[int, int] | None = None
    rotate: bool = False
    translate: bool = False
    hflip: bool = True
    vflip: bool = True

    def __post_init__(self) -> None:
        if self.mode not in ("flow", "stereo", "mono"):
            raise ValueError(f"unknown augmentation mode {self.mode!r}")


@dataclass
class OptimizerState:
    """Per-parameter Adam moment buffers plus the shared step counter."""

    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0


class TrainingDiverged(RuntimeError):
    """Raised when the loss becomes non-finite."""


def _per_pixel_epe(diff: np.ndarray) -> np.ndarray:
    """Euclidean norm over the channel axis; plain |d| for one channel."""
    if diff.shape[1] == 1:
        return np.abs(diff[:, 0])
    return np.sqrt((diff * diff).sum(axis=1))


def epe(pred: Tensor, gt: Tensor) -> float:
    """Mean endpoint error: per-pixel Euclidean distance, averaged over batch and pixels."""
    if pred.shape != gt.shape:
        raise ValueError(f"epe: shape mismatch {pred.shape} vs {gt.shape}")
    if pred.c not in (1, 2):
        raise ValueError(f"epe: channels must be 1 or 2, got {pred.c}")
    diff = pred.data.astype(np.float64) - gt.data.astype(np.float64)
    return float(_per_pixel_epe(diff).mean())


def downsample_field(gt: np.ndarray, factor: int) -> np.ndarray:
    """Average-pool a GT field by ``factor`` and rescale magnitudes to the new grid."""
    if factor == 1:
        return gt
    n, c, h, w = gt.shape
    if h % factor or w % factor:
        raise ValueError(f"GT dims {(h, w)} not divisible by downsample factor {factor}")
    pooled = gt.reshape(n, c, h // factor, factor, w // factor, factor).mean(axis=(3, 5))
    return (pooled / factor).astype(np.float32)


def epe_loss_term(pred: Tensor, gt: np.ndarray) -> Tensor:
    """Differentiable mean endpoint error against a constant GT array."""
    gt = np.asarray(gt, dtype=np.float32)
    if pred.shape != gt.shape:
        raise ValueError(f"epe_loss_term: shape mismatch {pred.shape} vs {gt.shape}")
    if pred.c not in (1, 2):
        raise ValueError(f"epe_loss_term: channels must be 1 or 2, got {pred.c}")
    n, c, h, w = pred.shape
    diff = pred.data.astype(np.float64) - gt
    per = _per_pixel_epe(diff)  # (n, h, w)
    result = Tensor(np.full((1, 1, 1, 1), per.mean(), dtype=np.float32))

    def backward_fn(g: np.ndarray) -> None:
        upstream = float(g.reshape(())) / (n * h * w)
        if c == 1:
            d = np.sign(diff) * upstream
        else:
            norm = per[:, None]
            with np.errstate(invalid="ignore", divide="ignore"):
                d = np.where(norm > 0, diff / norm, 0.0) * upstream
        pred.accumulate_grad(d)

    return record_op("epe_loss", (pred,), result, backward_fn)


def multiscale_epe_loss(preds: Sequence[Tensor], gt: Tensor | np.ndarray,
                        weights: Sequence[float]) -> Tensor:
    """Weighted sum of per-scale endpoint errors against pooled-and-rescaled GT."""
    if len(weights) != len(preds):
        raise ValueError(f"got {len(preds)} predictions but {len(weights)} weights")
    gt_arr = gt.data if isinstance(gt, Tensor) else np.asarray(gt, dtype=np.float32)
    total: Tensor | None = None
    for pred, weight in zip(preds, weights):
        if gt_arr.shape[2] % pred.h or gt_arr.shape[3] % pred.w:
            raise ValueError(
                f"GT {gt_arr.shape[2:]} is not an integer multiple of prediction {(pred.h, pred.w)}"
            )
        factor = gt_arr.shape[2] // pred.h
        term = ops.scale(epe_loss_term(pred, downsample_field(gt_arr, factor)), weight)
        total = term if total is None else ops.add(total, term)
    return total


def lr_at(epoch: int, cfg: TrainConfig) -> float:
    """base_lr decayed once per milestone that has passed."""
    if not 0 <= epoch < cfg.epochs:
        raise ValueError(f"epoch {epoch} outside [0, {cfg.epochs})")
    drops = sum(1 for m in cfg.milestones if m <= epoch)
    return cfg.base_lr * cfg.decay**drops


def adam_step(params: dict[str, Tensor], grads: dict[str, np.ndarray],
              state: OptimizerState, lr: float, cfg: TrainConfig) -> OptimizerState:
    """Bias-corrected Adam update, in place on the parameter tensors."""
    b1, b2 = cfg.adam_betas
    state.step += 1
    t = state.step
    corr1 = 1.0 - b1**t
    corr2 = 1.0 - b2**t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        elif g.shape != p.data.shape:
            raise ValueError(f"adam_step: grad shape {g.shape} != param {p.data.shape} for {name}")
        m = state.m.setdefault(name, np.zeros_like(p.data))
        v = state.v.setdefault(name, np.zeros_like(p.data))
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        m_hat = m / corr1
        v_hat = v / corr2
        p.data -= (lr * m_hat / (np.sqrt(v_hat) + cfg.adam_eps)).astype(np.float32)
    return state


def _bilinear_sample(img: np.ndarray, ys: np.ndarray, xs: np.ndarray) -> np.ndarray:
    """Sample (c, h, w) planes at float coordinates with clamp-to-edge."""
    h, w = img.shape[1:]
    ys = np.clip(ys, 0.0, h - 1.0)
    xs = np.clip(xs, 0.0, w - 1.0)
    y0 = np.floor(ys).astype(np.int64)
    x0 = np.floor(xs).astype(np.int64)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    wy = (ys - y0).astype(np.float32)
    wx = (xs - x0).astype(np.float32)
    top = img[:, y0, x0] * (1 - wx) + img[:, y0, x1] * wx
    bot = img[:, y1, x0] * (1 - wx) + img[:, y1, x1] * wx
    return top * (1 - wy) + bot * wy


def _rotate_flow_sample(s: FlowSample, theta: float) -> FlowSample:
    """Rotate both frames about the center and rotate the flow vectors with them."""
    h, w = s.hw
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    cos, sin = math.cos(theta), math.sin(theta)
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    # inverse mapping: output pixel -> source pixel
    dx, dy = xs - cx, ys - cy
    src_x = cos * dx + sin * dy + cx
    src_y = -sin * dx + cos * dy + cy
    frame1 = _bilinear_sample(s.frame1, src_y, src_x)
    frame2 = _bilinear_sample(s.frame2, src_y, src_x)
    fl = _bilinear_sample(s.flow, src_y, src_x)
    u = cos * fl[0] - sin * fl[1]
    v = sin * fl[0] + cos * fl[1]
    flow = np.stack([u, v]).astype(np.float32)
    return FlowSample(frame1, frame2, flow, provenance=list(s.provenance))


def _translate_frame2(s: FlowSample, ty: int, tx: int) -> FlowSample:
    """Shift frame2 content by (ty, tx) with zero fill; GT flow gains a constant."""
    h, w = s.hw
    frame2 = np.zeros_like(s.frame2)
    sy0, sy1 = max(-ty, 0), min(h - ty, h)
    sx0, sx1 = max(-tx, 0), min(w - tx, w)
    frame2[:, sy0 + ty : sy1 + ty, sx0 + tx : sx1 + tx] = s.frame2[:, sy0:sy1, sx0:sx1]
    flow = s.flow.copy()
    flow[0] += tx
    flow[1] += ty
    return FlowSample(s.frame1.copy(), frame2, flow, provenance=list(s.provenance))


def augment(sample, cfg: AugmentConfig, rng: np.random.Generator):
    """Apply the configured random modifications, keeping images and GT consistent.

    Stereo and mono modes never rotate or translate (and stereo never flips
    horizontally); a requested-but-disabled transform is noted in the
    returned sample's provenance.
    """
    is_flow = isinstance(sample, FlowSample)
    if cfg.mode == "flow" and not is_flow:
        raise ValueError("flow augmentation needs a FlowSample")
    if cfg.mode in ("stereo", "mono") and is_flow:
        raise ValueError(f"{cfg.mode} augmentation needs a StereoSample")
    h, w = sample.hw
    prov = list(sample.provenance)

    if is_flow:
        planes = dict(frame1=sample.frame1, frame2=sample.frame2, flow=sample.flow)
    else:
        planes = dict(left=sample.left, right=sample.right, disparity=sample.disparity)
    planes = {k: v.copy() for k, v in planes.items()}

    if cfg.crop is not None:
        ch, cw = cfg.crop
        if ch > h or cw > w:
            raise ValueError(f"crop {cfg.crop} larger than image {(h, w)}")
        y0 = int(rng.integers(0, h - ch + 1))
        x0 = int(rng.integers(0, w - cw + 1))
        planes = {k: v[:, y0 : y0 + ch, x0 : x0 + cw].copy() for k, v in planes.items()}
        h, w = ch, cw
        prov.append(f"crop({y0},{x0})")

    flippable_h = cfg.hflip and cfg.mode != "stereo"
    if cfg.hflip and cfg.mode == "stereo":
        prov.append("hflip:disabled(stereo)")
    if flippable_h and rng.random() < 0.5:
        planes = {k: v[:, :, ::-1].copy() for k, v in planes.items()}
        if is_flow:
            planes["flow"][0] = -planes["flow"][0]
        prov.append("hflip")

    if cfg.vflip and rng.random() < 0.5:
        planes = {k: v[:, ::-1, :].copy() for k, v in planes.items()}
        if is_flow:
            planes["flow"][1] = -planes["flow"][1]
        prov.append("vflip")

    if is_flow:
        out = FlowSample(planes["frame1"], planes["frame2"], planes["flow"], provenance=prov)
    else:
        out = StereoSample(planes["left"], planes["right"], planes["disparity"], provenance=prov)

    if cfg.rotate:
        if cfg.mode == "flow":
            if rng.random() < 0.5:
                theta = float(rng.uniform(-math.pi / 18, math.pi / 18))  # +/- 10 degrees
                out = _rotate_flow_sample(out, theta)
                out.provenance.append(f"rotate({theta:.4f})")
        else:
            out.provenance.append(f"rotate:disabled({cfg.mode})")

    if cfg.translate:
        if cfg.mode == "flow":
            if rng.random() < 0.5:
                span_x = max(1, int(round(0.1 * w)))
                span_y = max(1, int(round(0.1 * h)))
                tx = int(rng.integers(-span_x, span_x + 1))
                ty = int(rng.integers(-span_y, span_y + 1))
                out = _translate_frame2(out, ty, tx)
                out.provenance.append(f"translate({tx},{ty})")
        else:
            out.provenance.append(f"translate:disabled({cfg.mode})")

    return out


def assemble_batch(samples: Sequence, topology: TopologySpec) -> tuple[tuple[Tensor, ...], np.ndarray]:
    """Stack samples into network inputs plus the GT array for the loss.

    Raises when the sample kind does not match the topology's task.
    """
    flow_task = topology.decoder.pred_ch == 2
    for s in samples:
        if flow_task != isinstance(s, FlowSample):
            need = "FlowSample" if flow_task else "StereoSample"
            raise ValueError(f"{topology.name}: dataset mode mismatch, need {need}")
    if flow_task:
        stacked = np.stack([np.concatenate([s.frame1, s.frame2]) for s in samples])
        gt = np.stack([s.flow for s in samples])
        return (Tensor(stacked),), gt
    gt = np.stack([s.disparity for s in samples])
    if topology.encoder.variant == "siamese-correlation":
        left = np.stack([s.left for s in samples])
        right = np.stack([s.right for s in samples])
        return (Tensor(left), Tensor(right)), gt
    if topology.encoder.variant == "mono":
        return (Tensor(np.stack([s.left for s in samples])),), gt
    stacked = np.stack([np.concatenate([s.left, s.right]) for s in samples])
    return (Tensor(stacked),), gt


def mean_epe(net: NetworkInstance, samples: Sequence) -> tuple[float, list[float]]:
    """Full-resolution mean EPE over samples (mean of per-sample means)."""
    if not samples:
        raise ValueError("mean_epe: empty sample list")
    per_sample = []
    for s in samples:
        inputs, gt = assemble_batch([s], net.topology)
        out = net.forward(*inputs)
        per_sample.append(epe(out.full, Tensor(gt)))
    return float(np.mean(per_sample)), per_sample


@dataclass(frozen=True)
class EpochStats:
    epoch: int
    loss: float
    lr: float
    val_epe: float  # nan when no validation set was supplied


@dataclass
class TrainHistory:
    epochs: list[EpochStats] = field(default_factory=list)

    def to_csv(self, path) -> None:
        with open(path, "w", encoding="ascii") as f:
            f.write("epoch,loss,lr,val_epe\n")
            for e in self.epochs:
                f.write(f"{e.epoch},{e.loss!r},{e.lr!r},{e.val_epe!r}\n")

    @staticmethod
    def from_csv(path) -> "TrainHistory":
        lines = Path(path).read_text(encoding="ascii").splitlines()
        if not lines or lines[0] != "epoch,loss,lr,val_epe":
            raise ValueError(f"{path}: not a training history CSV")
        hist = TrainHistory()
        for line in lines[1:]:
            epoch, loss, lr, val = line.split(",")
            hist.epochs.append(EpochStats(int(epoch), float(loss), float(lr), float(val)))
        return hist


def train(
    net: NetworkInstance,
    dataset: Sequence,
    cfg: TrainConfig,
    aug: AugmentConfig,
    val_dataset: Sequence = (),
    checkpoint_every: int = 0,
    checkpoint_path=None,
) -> TrainHistory:
    """Run the full training recipe; deterministic for a fixed seed.

    Per-sample augmentation draws come from generators keyed by
    (seed, epoch, sample index), so results do not depend on batch layout.
    """
    if not dataset:
        raise ValueError("train: empty dataset")
    weights = cfg.scale_weights
    rng = np.random.default_rng(cfg.seed)
    state = OptimizerState()
    history = TrainHistory()
    for epoch in range(cfg.epochs):
        lr = lr_at(epoch, cfg)
        order = rng.permutation(len(dataset))
        epoch_losses = []
        for start in range(0, len(order), cfg.batch_size):
            chunk = order[start : start + cfg.batch_size]
            samples = [
                augment(dataset[i], aug, np.random.default_rng((cfg.seed, epoch, int(i))))
                for i in chunk
            ]
            inputs, gt = assemble_batch(samples, net.topology)
            tape = Tape()
            with tape:
                out = net.forward(*inputs)
                if weights is None:
                    w = [1.0 / len(out.preds)] * len(out.preds)
                else:
                    if len(weights) != len(out.preds):
                        raise ValueError(
                            f"scale_weights has {len(weights)} entries for {len(out.preds)} scales"
                        )
                    w = list(weights)
                loss = multiscale_epe_loss(out.preds, gt, w)
            loss_val = loss.item()
            if not math.isfinite(loss_val):
                raise TrainingDiverged(
                    f"non-finite loss {loss_val} at epoch {epoch}, batch starting {start}"
                )
            for p in net.params.values():
                p.zero_grad()
            backward(loss, tape)
            grads = {name: p.grad for name, p in net.params.items() if p.grad is not None}
            adam_step(net.params, grads, state, lr, cfg)
            epoch_losses.append(loss_val)
        val = mean_epe(net, val_dataset)[0] if val_dataset else float("nan")
        history.epochs.append(EpochStats(epoch, float(np.mean(epoch_losses)), lr, val))
        if checkpoint_every and checkpoint_path and (epoch + 1) % checkpoint_every == 0:
            from .weights_io import save_checkpoint

            save_checkpoint(net, state, checkpoint_path)
    return history
