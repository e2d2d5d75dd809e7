"""Synthetic training scenes with exact ground truth, plus dataset manifests.

Scenes are textured rectangles over a textured background.  All motion and
disparity values are integers, so warping one view by the ground truth
reproduces the other view *exactly* outside dis-occluded regions; that
exactness is what the warp-consistency oracles lean on.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import formats

__all__ = [
    "FlowSample",
    "StereoSample",
    "ManifestRecord",
    "DatasetManifest",
    "gen_synthetic_flow",
    "gen_synthetic_stereo",
    "split_tag",
    "flow_warp_check",
    "stereo_warp_check",
    "save_samples",
    "load_manifest",
    "load_samples",
]

MAX_FLOW_SHIFT = 8  # integer motion components are drawn from [-8, 8]
MAX_DISPARITY = 16
VAL_FRACTION_DENOM = 10  # every 10th hash bucket is validation


@dataclass
class FlowSample:
    """Two frames in [0, 1] plus dense ground-truth flow, in pixels.

    flow[0] is the horizontal component u, flow[1] the vertical component v,
    mapping frame1 pixels onto frame2: frame2[y + v, x + u] == frame1[y, x].
    """

    frame1: np.ndarray  # (3, h, w)
    frame2: np.ndarray  # (3, h, w)
    flow: np.ndarray  # (2, h, w)
    provenance: list[str] = field(default_factory=list)
    layer_ids: np.ndarray | None = None  # (h, w) int, which layer is visible

    def __post_init__(self) -> None:
        if self.frame1.shape != self.frame2.shape or self.frame1.shape[0] != 3:
            raise ValueError(f"frames must agree and be (3, h, w), got {self.frame1.shape} / {self.frame2.shape}")
        if self.flow.shape != (2,) + self.frame1.shape[1:]:
            raise ValueError(f"flow shape {self.flow.shape} does not match frames {self.frame1.shape}")
        if not np.isfinite(self.flow).all():
            raise ValueError("flow must be finite")

    @property
    def hw(self) -> tuple[int, int]:
        return self.frame1.shape[1:]


@dataclass
class StereoSample:
    """Rectified stereo pair plus non-negative disparity: right[x - d] matches left[x]."""

    left: np.ndarray  # (3, h, w)
    right: np.ndarray  # (3, h, w)
    disparity: np.ndarray  # (1, h, w)
    provenance: list[str] = field(default_factory=list)
    layer_ids: np.ndarray | None = None

    def __post_init__(self) -> None:
        if self.left.shape != self.right.shape or self.left.shape[0] != 3:
            raise ValueError(f"views must agree and be (3, h, w), got {self.left.shape} / {self.right.shape}")
        if self.disparity.shape != (1,) + self.left.shape[1:]:
            raise ValueError(f"disparity shape {self.disparity.shape} does not match views {self.left.shape}")
        if (self.disparity < 0).any():
            raise ValueError("disparity must be non-negative")

    @property
    def hw(self) -> tuple[int, int]:
        return self.left.shape[1:]


def _texture(rng: np.random.Generator, h: int, w: int) -> np.ndarray:
    """Band-limited random texture in roughly [0.05, 0.95]: noise + 3x3 box blur.

    The short correlation length keeps local matching well-posed without
    the aperture ambiguity of flat regions.
    """
    noise = rng.uniform(0.0, 1.0, size=(3, h + 2, w + 2)).astype(np.float32)
    acc = np.zeros((3, h, w), dtype=np.float32)
    for dy in range(3):
        for dx in range(3):
            acc += noise[:, dy : dy + h, dx : dx + w]
    tex = acc / 9.0
    return (0.05 + 0.9 * tex).astype(np.float32)


@dataclass
class _Layer:
    texture: np.ndarray  # (3, lh, lw)
    y: int
    x: int
    shift: tuple[int, int]  # (dy, dx) frame-2 motion, or (0, -d) for stereo


def _paint(canvas: np.ndarray, ids: np.ndarray, layer: _Layer, layer_id: int,
           offset: tuple[int, int]) -> None:
    """Draw a layer onto the canvas at its position plus offset, clipped."""
    _, h, w = canvas.shape
    lh, lw = layer.texture.shape[1:]
    y, x = layer.y + offset[0], layer.x + offset[1]
    y0, y1 = max(y, 0), min(y + lh, h)
    x0, x1 = max(x, 0), min(x + lw, w)
    if y0 >= y1 or x0 >= x1:
        return
    canvas[:, y0:y1, x0:x1] = layer.texture[:, y0 - y : y1 - y, x0 - x : x1 - x]
    ids[y0:y1, x0:x1] = layer_id


def _validate_size(size: tuple[int, int]) -> None:
    h, w = size
    if h < 16 or w < 16:
        raise ValueError(f"scene size must be at least 16x16, got {size}")


def gen_synthetic_flow(n: int, size: tuple[int, int], rng: np.random.Generator | int) -> list[FlowSample]:
    """Generate flow scenes: 3-8 textured rectangles translating over a moving background."""
    _validate_size(size)
    gen = np.random.default_rng(rng) if isinstance(rng, int) else rng
    h, w = size
    out = []
    for _ in range(n):
        m = MAX_FLOW_SHIFT
        bg_tex = _texture(gen, h + 2 * m, w + 2 * m)
        bg_shift = (int(gen.integers(-m, m + 1)), int(gen.integers(-m, m + 1)))
        layers = []
        for _ in range(int(gen.integers(3, 9))):
            lh = int(gen.integers(h // 8, h // 3 + 1))
            lw = int(gen.integers(w // 8, w // 3 + 1))
            layers.append(_Layer(
                texture=_texture(gen, lh, lw),
                y=int(gen.integers(0, h - lh + 1)),
                x=int(gen.integers(0, w - lw + 1)),
                shift=(int(gen.integers(-m, m + 1)), int(gen.integers(-m, m + 1))),
            ))

        frame1 = bg_tex[:, m : m + h, m : m + w].copy()
        frame2 = bg_tex[:, m - bg_shift[0] : m - bg_shift[0] + h,
                        m - bg_shift[1] : m - bg_shift[1] + w].copy()
        ids1 = np.zeros((h, w), dtype=np.int32)
        ids2 = np.zeros((h, w), dtype=np.int32)
        flow = np.empty((2, h, w), dtype=np.float32)
        flow[0] = bg_shift[1]
        flow[1] = bg_shift[0]
        for i, layer in enumerate(layers, start=1):  # later layers are topmost
            _paint(frame1, ids1, layer, i, (0, 0))
            _paint(frame2, ids2, layer, i, layer.shift)
            lh, lw = layer.texture.shape[1:]
            y0, y1 = max(layer.y, 0), min(layer.y + lh, h)
            x0, x1 = max(layer.x, 0), min(layer.x + lw, w)
            flow[0, y0:y1, x0:x1] = layer.shift[1]
            flow[1, y0:y1, x0:x1] = layer.shift[0]
        out.append(FlowSample(frame1, frame2, flow, layer_ids=ids1))
    return out


def gen_synthetic_stereo(n: int, size: tuple[int, int], rng: np.random.Generator | int) -> list[StereoSample]:
    """Generate rectified stereo scenes: layers shift purely left by their disparity."""
    _validate_size(size)
    gen = np.random.default_rng(rng) if isinstance(rng, int) else rng
    h, w = size
    out = []
    for _ in range(n):
        md = MAX_DISPARITY
        bg_tex = _texture(gen, h, w + md)
        bg_disp = int(gen.integers(0, 5))
        layers = []
        for _ in range(int(gen.integers(3, 9))):
            lh = int(gen.integers(h // 8, h // 3 + 1))
            lw = int(gen.integers(w // 8, w // 3 + 1))
            layers.append(_Layer(
                texture=_texture(gen, lh, lw),
                y=int(gen.integers(0, h - lh + 1)),
                x=int(gen.integers(0, w - lw + 1)),
                shift=(0, -int(gen.integers(bg_disp, md + 1))),
            ))
        # nearer layers (larger disparity) must occlude farther ones
        layers.sort(key=lambda l: -l.shift[1])

        left = bg_tex[:, :, :w].copy()
        right = bg_tex[:, :, bg_disp : bg_disp + w].copy()
        ids_l = np.zeros((h, w), dtype=np.int32)
        ids_r = np.zeros((h, w), dtype=np.int32)
        disp = np.full((1, h, w), float(bg_disp), dtype=np.float32)
        for i, layer in enumerate(layers, start=1):
            _paint(left, ids_l, layer, i, (0, 0))
            _paint(right, ids_r, layer, i, layer.shift)
            lh, lw = layer.texture.shape[1:]
            y0, y1 = max(layer.y, 0), min(layer.y + lh, h)
            x0, x1 = max(layer.x, 0), min(layer.x + lw, w)
            disp[0, y0:y1, x0:x1] = -layer.shift[1]
        out.append(StereoSample(left, right, disp, layer_ids=ids_l))
    return out


def flow_warp_check(sample: FlowSample) -> float:
    """Fraction of pixels where frame2[p + flow(p)] exactly equals frame1[p].

    Out-of-bounds targets count as mismatches, so the returned fraction is a
    lower bound on photometric consistency.
    """
    h, w = sample.hw
    ys, xs = np.mgrid[0:h, 0:w]
    tx = xs + sample.flow[0].round().astype(np.int64)
    ty = ys + sample.flow[1].round().astype(np.int64)
    valid = (tx >= 0) & (tx < w) & (ty >= 0) & (ty < h)
    txc, tyc = np.clip(tx, 0, w - 1), np.clip(ty, 0, h - 1)
    match = (sample.frame2[:, tyc, txc] == sample.frame1).all(axis=0) & valid
    return float(match.mean())


def stereo_warp_check(sample: StereoSample) -> float:
    """Fraction of pixels where right[x - d] exactly equals left[x]."""
    h, w = sample.hw
    ys, xs = np.mgrid[0:h, 0:w]
    tx = xs - sample.disparity[0].round().astype(np.int64)
    valid = (tx >= 0) & (tx < w)
    txc = np.clip(tx, 0, w - 1)
    match = (sample.right[:, ys, txc] == sample.left).all(axis=0) & valid
    return float(match.mean())


def split_tag(seed: int, index: int) -> str:
    """Seed-stable train/val assignment: ~10% of samples become validation."""
    digest = zlib.crc32(f"{seed}:{index}".encode("ascii"))
    return "val" if digest % VAL_FRACTION_DENOM == 0 else "train"


@dataclass(frozen=True)
class ManifestRecord:
    mode: str  # flow | stereo
    source: str  # path prefix, or "gen:<seed>:<index>:<h>x<w>"
    split: str  # train | val


@dataclass
class DatasetManifest:
    records: list[ManifestRecord]

    def __post_init__(self) -> None:
        modes = {r.mode for r in self.records}
        if len(modes) > 1:
            raise ValueError(f"manifest mixes modes: {sorted(modes)}")

    @property
    def mode(self) -> str:
        return self.records[0].mode if self.records else "flow"

    def write(self, path) -> None:
        with open(path, "w", encoding="ascii") as f:
            for r in self.records:
                f.write(f"{r.mode}\t{r.source}\t{r.split}\n")


def load_manifest(path) -> DatasetManifest:
    records = []
    for lineno, line in enumerate(Path(path).read_text(encoding="ascii").splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 3:
            raise ValueError(f"{path}:{lineno}: expected 'mode<TAB>source<TAB>split'")
        mode, source, split = parts
        if mode not in ("flow", "stereo"):
            raise ValueError(f"{path}:{lineno}: unknown mode {mode!r}")
        records.append(ManifestRecord(mode, source, split))
    return DatasetManifest(records)


def save_samples(samples, out_dir, seed: int, prefix: str = "sample") -> DatasetManifest:
    """Write samples in interchange formats and return the on-disk manifest."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    records = []
    for i, s in enumerate(samples):
        stem = f"{prefix}_{i:05d}"
        if isinstance(s, FlowSample):
            formats.write_ppm(s.frame1, out / f"{stem}.frame1.ppm")
            formats.write_ppm(s.frame2, out / f"{stem}.frame2.ppm")
            formats.write_flo(s.flow, out / f"{stem}.flow.flo")
            mode = "flow"
        else:
            formats.write_ppm(s.left, out / f"{stem}.left.ppm")
            formats.write_ppm(s.right, out / f"{stem}.right.ppm")
            formats.write_pfm(s.disparity, out / f"{stem}.disp.pfm")
            mode = "stereo"
        records.append(ManifestRecord(mode, stem, split_tag(seed, i)))
    manifest = DatasetManifest(records)
    manifest.write(out / "manifest.tsv")
    return manifest


def _load_record(record: ManifestRecord, base: Path):
    if record.source.startswith("gen:"):
        parts = record.source.split(":")
        if len(parts) != 4:
            raise ValueError(f"bad generator record {record.source!r}")
        seed, index = int(parts[1]), int(parts[2])
        h, w = (int(v) for v in parts[3].split("x"))
        gen_fn = gen_synthetic_flow if record.mode == "flow" else gen_synthetic_stereo
        # per-record rng keyed by (seed, index) so loading is order-independent
        return gen_fn(1, (h, w), np.random.default_rng((seed, index)))[0]
    stem = base / record.source
    if record.mode == "flow":
        return FlowSample(
            frame1=formats.read_ppm(f"{stem}.frame1.ppm"),
            frame2=formats.read_ppm(f"{stem}.frame2.ppm"),
            flow=formats.read_flo(f"{stem}.flow.flo"),
        )
    return StereoSample(
        left=formats.read_ppm(f"{stem}.left.ppm"),
        right=formats.read_ppm(f"{stem}.right.ppm"),
        disparity=formats.read_pfm(f"{stem}.disp.pfm"),
    )


def load_samples(manifest: DatasetManifest, base_dir, split: str | None = None) -> list:
    """Materialize manifest records (optionally one split) into samples."""
    base = Path(base_dir)
    return [_load_record(r, base) for r in manifest.records
            if split is None or r.split == split]
