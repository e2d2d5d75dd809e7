"""Encoder-decoder network builders for flow and disparity estimation.

Two decoder flavors share one encoder family:

* ``deconv``: each stage upscales features with a 4x4/stride-2 transposed
  convolution, concatenates the encoder skip and the bilinearly upscaled
  previous prediction, then refines with an iconv and emits a prediction.
* ``subpixel``: each stage feeds concat[previous iconv, previous
  prediction] through a sub-pixel block (two conv+leaky-relu layers, then
  a conv producing pred_ch * r^2 channels rearranged by pixel shuffle),
  concatenates the encoder skip, then iconv + prediction as above.

The sub-pixel block emits only pred_ch channels at the doubled resolution,
which is where the parameter savings over the transposed-convolution
decoder come from.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Sequence

import numpy as np

from . import ops
from .tensor import ConvParams, Tensor

__all__ = [
    "SubPixelModuleSpec",
    "EncoderStage",
    "EncoderSpec",
    "DecoderStageSpec",
    "DecoderSpec",
    "TopologySpec",
    "NetworkInstance",
    "NetworkOutput",
    "LayerInfo",
    "TOPOLOGY_NAMES",
    "topology",
    "custom_topology",
    "build_network",
    "build_subpixel_module",
    "count_params",
    "describe",
    "format_layer_table",
    "topology_to_config",
    "topology_from_config",
    "parse_kv_config",
]

LEAKY_SLOPE = 0.1
DECONV_KERNEL = 4  # stride-2, pad-1: exactly doubles the spatial dims

# channel ladder of the shared encoder family, one entry per resolution drop
_ENCODER_CHANNELS = (64, 128, 256, 512, 512, 1024)
_ENCODER_KERNELS = ((7, 7), (5, 5), (5, 5), (3, 3), (3, 3), (3, 3))
_RECT_KERNELS = ((3, 7), (3, 5), (3, 5))  # first three drops of the rectangular variant
_REDIR_CHANNELS = 64  # 1x1 redirect of the left branch alongside the correlation volume
_CORRELATION_AFTER_DROPS = 3  # correlation sits at 1/8 resolution


@dataclass(frozen=True)
class SubPixelModuleSpec:
    """Sub-pixel upscaling block: two conv-relu layers, then conv + pixel shuffle."""

    in_ch: int
    hidden_ch: int = 32
    out_ch: int = 1
    r: int = 2

    def param_count(self) -> int:
        k = 9  # all three convs are 3x3
        return (
            k * (self.in_ch * self.hidden_ch + self.hidden_ch * self.hidden_ch
                 + self.hidden_ch * self.out_ch * self.r * self.r)
            + self.hidden_ch + self.hidden_ch + self.out_ch * self.r * self.r
        )


@dataclass(frozen=True)
class EncoderStage:
    out_ch: int
    k_h: int
    k_w: int
    stride: int


@dataclass(frozen=True)
class EncoderSpec:
    """Encoder as a flat stage list; stride-2 stages drop the resolution."""

    stages: tuple[EncoderStage, ...]
    variant: str = "standard"  # standard | rectangular | siamese-correlation | mono
    width_mult: Fraction = Fraction(1)
    input_ch: int = 6


@dataclass(frozen=True)
class DecoderStageSpec:
    skip_scale: int  # encoder scale (1/2^k) whose features are concatenated in
    feat_ch: int  # unscaled iconv width at this stage


@dataclass(frozen=True)
class DecoderSpec:
    flavor: str  # deconv | subpixel
    stages: tuple[DecoderStageSpec, ...]
    pred_ch: int
    final_upsample_factor: int
    sp_hidden: int = 32


@dataclass(frozen=True)
class TopologySpec:
    name: str
    encoder: EncoderSpec
    decoder: DecoderSpec
    max_disp: int | None = None  # correlation variants only

    @property
    def num_stages(self) -> int:
        return sum(1 for s in self.encoder.stages if s.stride == 2)

    @property
    def input_arity(self) -> int:
        return 2 if self.encoder.variant == "siamese-correlation" else 1


TOPOLOGY_NAMES = (
    "flownet",
    "flospnet",
    "dispnet",
    "despnet",
    "despnet2",
    "dispnet_c",
    "despnet_c",
    "dispnet_mono",
    "despnet_mono",
)

_MENU: dict[str, tuple[str, str, str]] = {
    # name -> (task, decoder flavor, encoder variant)
    "flownet": ("flow", "deconv", "standard"),
    "flospnet": ("flow", "subpixel", "standard"),
    "dispnet": ("disp", "deconv", "standard"),
    "despnet": ("disp", "subpixel", "standard"),
    "despnet2": ("disp", "subpixel", "rectangular"),
    "dispnet_c": ("disp", "deconv", "siamese-correlation"),
    "despnet_c": ("disp", "subpixel", "siamese-correlation"),
    "dispnet_mono": ("disp", "deconv", "mono"),
    "despnet_mono": ("disp", "subpixel", "mono"),
}


def _scaled(ch: int, width_mult: Fraction) -> int:
    """Round a channel count under the width multiplier, never below 1."""
    return max(1, int(Fraction(ch) * width_mult + Fraction(1, 2)))


def _encoder_stages(num_stages: int, rectangular: bool) -> tuple[EncoderStage, ...]:
    if not 3 <= num_stages <= len(_ENCODER_CHANNELS):
        raise ValueError(f"num_stages must be in [3, {len(_ENCODER_CHANNELS)}], got {num_stages}")
    stages: list[EncoderStage] = []
    for drop in range(num_stages):
        kh, kw = _RECT_KERNELS[drop] if rectangular and drop < 3 else _ENCODER_KERNELS[drop]
        ch = _ENCODER_CHANNELS[drop]
        stages.append(EncoderStage(ch, kh, kw, 2))
        if drop >= 2:  # deeper drops get a stride-1 refinement conv
            stages.append(EncoderStage(ch, 3, 3, 1))
    return tuple(stages)


def _decoder_stages(num_stages: int, task: str) -> tuple[DecoderStageSpec, ...]:
    stop_scale = 2 if task == "flow" else 1  # disparity decoders upscale one stage further
    return tuple(
        DecoderStageSpec(skip_scale=k, feat_ch=min(512, 16 * 2**k))
        for k in range(num_stages - 1, stop_scale - 1, -1)
    )


def custom_topology(
    name: str,
    task: str,
    flavor: str,
    variant: str = "standard",
    width_mult: Fraction | int | str = 1,
    num_stages: int = 6,
    max_disp: int = 35,
    sp_hidden: int = 32,
) -> TopologySpec:
    """Assemble a topology from its axes; used by :func:`topology` and tests."""
    if task not in ("flow", "disp"):
        raise ValueError(f"unknown task {task!r}")
    if flavor not in ("deconv", "subpixel"):
        raise ValueError(f"unknown decoder flavor {flavor!r}")
    if variant not in ("standard", "rectangular", "siamese-correlation", "mono"):
        raise ValueError(f"unknown encoder variant {variant!r}")
    wm = Fraction(width_mult)
    if wm <= 0:
        raise ValueError(f"width_mult must be positive, got {width_mult}")
    input_ch = 3 if variant in ("siamese-correlation", "mono") else 6
    encoder = EncoderSpec(
        stages=_encoder_stages(num_stages, variant == "rectangular"),
        variant=variant,
        width_mult=wm,
        input_ch=input_ch,
    )
    decoder = DecoderSpec(
        flavor=flavor,
        stages=_decoder_stages(num_stages, task),
        pred_ch=2 if task == "flow" else 1,
        final_upsample_factor=4 if task == "flow" else 2,
        sp_hidden=sp_hidden,
    )
    corr = max_disp if variant == "siamese-correlation" else None
    return TopologySpec(name=name, encoder=encoder, decoder=decoder, max_disp=corr)


def topology(
    name: str,
    width_mult: Fraction | int | str = 1,
    num_stages: int = 6,
    max_disp: int = 35,
    sp_hidden: int = 32,
) -> TopologySpec:
    """One of the nine named topologies at the requested width and depth."""
    if name not in _MENU:
        raise ValueError(f"unknown topology {name!r}; choose from {TOPOLOGY_NAMES}")
    task, flavor, variant = _MENU[name]
    return custom_topology(
        name, task, flavor, variant,
        width_mult=width_mult, num_stages=num_stages,
        max_disp=max_disp, sp_hidden=sp_hidden,
    )


@dataclass(frozen=True)
class LayerInfo:
    name: str
    kind: str  # conv | deconv | correlation | pixel_shuffle
    kernel: tuple[int, int] | None
    stride: tuple[int, int] | None
    in_ch: int
    out_ch: int
    param_count: int
    out_scale: int  # output resolution is input / 2^out_scale


class _ConvLayer:
    def __init__(self, params: ConvParams, act: bool):
        self.params = params
        self.act = act

    def __call__(self, x: Tensor) -> Tensor:
        y = ops.conv2d(x, self.params)
        return ops.leaky_relu(y, LEAKY_SLOPE) if self.act else y


class _DeconvLayer:
    def __init__(self, params: ConvParams):
        self.params = params

    def __call__(self, x: Tensor) -> Tensor:
        return ops.leaky_relu(ops.conv2d_transpose(x, self.params), LEAKY_SLOPE)


class _SubPixelModule:
    def __init__(self, conv1: _ConvLayer, conv2: _ConvLayer, conv3: _ConvLayer, r: int):
        self.conv1, self.conv2, self.conv3, self.r = conv1, conv2, conv3, r

    def __call__(self, x: Tensor) -> Tensor:
        return ops.pixel_shuffle(self.conv3(self.conv2(self.conv1(x))), self.r)


class _Builder:
    """Allocates parameters, registers them by name, and records the layer table."""

    def __init__(self, rng: np.random.Generator):
        self.rng = rng
        self.params: dict[str, Tensor] = {}
        self.table: list[LayerInfo] = []

    def _kaiming_uniform(self, shape: tuple[int, ...], fan_in: int) -> np.ndarray:
        bound = math.sqrt(6.0 / fan_in)
        return self.rng.uniform(-bound, bound, size=shape).astype(np.float32)

    def conv(
        self,
        name: str,
        in_ch: int,
        out_ch: int,
        k: tuple[int, int],
        stride: int = 1,
        act: bool = True,
        scale: int = 0,
    ) -> _ConvLayer:
        kh, kw = k
        kernel = Tensor(self._kaiming_uniform((out_ch, in_ch, kh, kw), in_ch * kh * kw), requires_grad=True)
        bias = Tensor.zeros((1, out_ch, 1, 1), requires_grad=True)
        self.params[f"{name}.weight"] = kernel
        self.params[f"{name}.bias"] = bias
        pad = ((kh - 1) // 2, (kw - 1) // 2)
        self.table.append(LayerInfo(name, "conv", k, (stride, stride), in_ch, out_ch,
                                    out_ch * in_ch * kh * kw + out_ch, scale))
        return _ConvLayer(ConvParams(kernel, bias, (stride, stride), pad), act)

    def deconv(self, name: str, in_ch: int, out_ch: int, scale: int) -> _DeconvLayer:
        k = DECONV_KERNEL
        kernel = Tensor(self._kaiming_uniform((in_ch, out_ch, k, k), in_ch * k * k), requires_grad=True)
        bias = Tensor.zeros((1, out_ch, 1, 1), requires_grad=True)
        self.params[f"{name}.weight"] = kernel
        self.params[f"{name}.bias"] = bias
        self.table.append(LayerInfo(name, "deconv", (k, k), (2, 2), in_ch, out_ch,
                                    out_ch * in_ch * k * k + out_ch, scale))
        return _DeconvLayer(ConvParams(kernel, bias, (2, 2), (1, 1)))

    def subpixel(self, name: str, spec: SubPixelModuleSpec, scale: int) -> _SubPixelModule:
        mid = spec.out_ch * spec.r * spec.r
        c1 = self.conv(f"{name}.conv1", spec.in_ch, spec.hidden_ch, (3, 3), act=True, scale=scale + 1)
        c2 = self.conv(f"{name}.conv2", spec.hidden_ch, spec.hidden_ch, (3, 3), act=True, scale=scale + 1)
        c3 = self.conv(f"{name}.conv3", spec.hidden_ch, mid, (3, 3), act=False, scale=scale + 1)
        self.table.append(LayerInfo(f"{name}.shuffle", "pixel_shuffle", None, None, mid, spec.out_ch, 0, scale))
        return _SubPixelModule(c1, c2, c3, spec.r)

    def marker(self, name: str, kind: str, in_ch: int, out_ch: int, scale: int) -> None:
        self.table.append(LayerInfo(name, kind, None, None, in_ch, out_ch, 0, scale))


def build_subpixel_module(spec: SubPixelModuleSpec, rng: np.random.Generator | int):
    """Standalone parameterized sub-pixel block; returns (module, named params)."""
    if min(spec.in_ch, spec.hidden_ch, spec.out_ch, spec.r) < 1:
        raise ValueError(f"sub-pixel module dims must be >= 1, got {spec}")
    b = _Builder(np.random.default_rng(rng) if isinstance(rng, int) else rng)
    module = b.subpixel("subpixel", spec, scale=-1)
    return module, b.params


@dataclass
class _DecoderStage:
    scale: int
    iconv: _ConvLayer
    pred: _ConvLayer
    deconv: _DeconvLayer | None = None
    sp: _SubPixelModule | None = None


@dataclass
class NetworkOutput:
    """Multi-scale predictions ordered coarse to fine, plus the full-resolution map."""

    preds: list[Tensor]
    full: Tensor


class NetworkInstance:
    """Instantiated parameters plus the forward procedure for one topology."""

    def __init__(self, topology_spec: TopologySpec, params: dict[str, Tensor],
                 layer_table: list[LayerInfo], enc_pre, enc_post, redir,
                 bottleneck_pred, stages):
        self.topology = topology_spec
        self.params = params
        self.layer_table = layer_table
        self._enc_pre = enc_pre
        self._enc_post = enc_post
        self._redir = redir
        self._bottleneck_pred = bottleneck_pred
        self._stages = stages

    def _check_input(self, x: Tensor, expect_ch: int) -> None:
        if x.c != expect_ch:
            raise ValueError(
                f"{self.topology.name}: expected {expect_ch}-channel input, got {x.c}"
            )
        div = 2 ** self.topology.num_stages
        if x.h % div or x.w % div:
            raise ValueError(
                f"{self.topology.name}: spatial dims {(x.h, x.w)} must be divisible by {div}"
            )

    def forward(self, *inputs: Tensor) -> NetworkOutput:
        t = self.topology
        siamese = t.encoder.variant == "siamese-correlation"
        if siamese:
            if len(inputs) != 2:
                raise ValueError(f"{t.name}: expects (left, right) inputs, got {len(inputs)}")
            left, right = inputs
            self._check_input(left, t.encoder.input_ch)
            if left.shape != right.shape:
                raise ValueError(f"{t.name}: left/right shape mismatch {left.shape} vs {right.shape}")
        else:
            if len(inputs) != 1:
                raise ValueError(f"{t.name}: expects a single input, got {len(inputs)}")
            self._check_input(inputs[0], t.encoder.input_ch)

        skips: dict[int, Tensor] = {}

        def center(x: Tensor) -> Tensor:
            # images arrive in [0, 1]; zero-center them before the encoder
            return ops.add(x, Tensor.full(x.shape, -0.5))

        def run(x: Tensor, layers, scale: int, record: bool) -> tuple[Tensor, int]:
            for layer, ds in layers:
                x = layer(x)
                scale += ds
                if record:
                    skips[scale] = x
            return x, scale

        if siamese:
            fl, sc = run(center(left), self._enc_pre, 0, record=True)
            fr, _ = run(center(right), self._enc_pre, 0, record=False)
            corr = ops.correlation_1d(fl, fr, t.max_disp)
            red = self._redir(fl)
            x = ops.concat_channels([red, corr])
            x, sc = run(x, self._enc_post, sc, record=True)
        else:
            x, sc = run(center(inputs[0]), self._enc_pre, 0, record=True)

        pred = self._bottleneck_pred(x)
        preds = [pred]
        feat = x
        for st in self._stages:
            skip = skips[st.scale]
            if st.deconv is not None:
                up = st.deconv(feat)
                pred_up = ops.upsample(pred, 2, "bilinear")
                cat = ops.concat_channels([up, skip, pred_up])
            else:
                sp_in = ops.concat_channels([feat, pred])
                sp_out = st.sp(sp_in)
                cat = ops.concat_channels([sp_out, skip])
            feat = st.iconv(cat)
            pred = st.pred(feat)
            preds.append(pred)
        # predictions live in their own scale's pixel units (training rescales
        # GT magnitudes per level), so the full-resolution map restores units
        factor = t.decoder.final_upsample_factor
        full = ops.scale(ops.upsample(pred, factor, "bilinear"), float(factor))
        return NetworkOutput(preds=preds, full=full)


def build_network(t: TopologySpec, rng: np.random.Generator | int) -> NetworkInstance:
    """Instantiate a topology with Kaiming-uniform weights and zero biases."""
    gen = np.random.default_rng(rng) if isinstance(rng, int) else rng
    b = _Builder(gen)
    wm = t.encoder.width_mult
    siamese = t.encoder.variant == "siamese-correlation"
    if siamese and (t.max_disp is None or t.max_disp < 0):
        raise ValueError(f"{t.name}: correlation variant needs a non-negative max_disp")

    # encoder: (layer, resolution-drop) pairs, split at the correlation point
    enc_pre: list[tuple[_ConvLayer, int]] = []
    enc_post: list[tuple[_ConvLayer, int]] = []
    redir = None
    skip_ch: dict[int, int] = {}
    in_ch = t.encoder.input_ch
    drops = 0
    split = False
    for i, st in enumerate(t.encoder.stages):
        out_ch = _scaled(st.out_ch, wm)
        if siamese and not split and drops == _CORRELATION_AFTER_DROPS and st.stride == 1:
            # merge point: redirect + correlation volume feed the refinement conv
            redir_ch = _scaled(_REDIR_CHANNELS, wm)
            redir = b.conv("encoder.redir", in_ch, redir_ch, (1, 1), act=True, scale=drops)
            b.marker("encoder.correlation", "correlation", in_ch, t.max_disp + 1, drops)
            in_ch = redir_ch + t.max_disp + 1
            split = True
        name = f"encoder.conv{drops + 1}" if st.stride == 2 else f"encoder.conv{drops}_1"
        layer = b.conv(name, in_ch, out_ch, (st.k_h, st.k_w), stride=st.stride,
                       act=True, scale=drops + (1 if st.stride == 2 else 0))
        target = enc_post if split else enc_pre
        target.append((layer, 1 if st.stride == 2 else 0))
        if st.stride == 2:
            drops += 1
        in_ch = out_ch
        skip_ch[drops] = out_ch
    if siamese and not split:
        raise ValueError("siamese-correlation encoder needs a stride-1 stage after drop 3")
    bottleneck_ch = in_ch
    num_stages = drops

    # decoder
    d = t.decoder
    pred_ch = d.pred_ch
    bottleneck_pred = b.conv(f"decoder.pred{num_stages}", bottleneck_ch, pred_ch, (3, 3),
                             act=False, scale=num_stages)
    stages: list[_DecoderStage] = []
    prev_feat_ch = bottleneck_ch
    for ss in d.stages:
        k = ss.skip_scale
        feat_ch = _scaled(ss.feat_ch, wm)
        if d.flavor == "deconv":
            deconv = b.deconv(f"decoder.deconv{k}", prev_feat_ch, feat_ch, scale=k)
            cat_ch = feat_ch + skip_ch[k] + pred_ch
            iconv = b.conv(f"decoder.iconv{k}", cat_ch, feat_ch, (3, 3), act=True, scale=k)
            stage = _DecoderStage(scale=k, iconv=iconv,
                                  pred=b.conv(f"decoder.pred{k}", feat_ch, pred_ch, (3, 3),
                                              act=False, scale=k),
                                  deconv=deconv)
        else:
            sp_spec = SubPixelModuleSpec(
                in_ch=prev_feat_ch + pred_ch,
                hidden_ch=_scaled(d.sp_hidden, wm),
                out_ch=pred_ch,
                r=2,
            )
            sp = b.subpixel(f"decoder.sp{k}", sp_spec, scale=k)
            cat_ch = pred_ch + skip_ch[k]
            iconv = b.conv(f"decoder.iconv{k}", cat_ch, feat_ch, (3, 3), act=True, scale=k)
            stage = _DecoderStage(scale=k, iconv=iconv,
                                  pred=b.conv(f"decoder.pred{k}", feat_ch, pred_ch, (3, 3),
                                              act=False, scale=k),
                                  sp=sp)
        stages.append(stage)
        prev_feat_ch = feat_ch

    return NetworkInstance(t, b.params, b.table, enc_pre, enc_post, redir,
                           bottleneck_pred, stages)


def count_params(net: NetworkInstance) -> int:
    """Total element count over all parameter tensors (weights and biases)."""
    return sum(p.data.size for p in net.params.values())


def describe(t: TopologySpec) -> list[LayerInfo]:
    """Per-layer table (name, kernel, stride, channels, params, output scale)."""
    return build_network(t, rng=0).layer_table


def format_layer_table(rows: Sequence[LayerInfo], input_hw: tuple[int, int] | None = None) -> str:
    """Render a layer table as aligned text; shapes are filled in from input_hw."""
    header = ["layer", "kind", "kernel", "stride", "in", "out", "params", "output"]
    lines = [header]
    total = 0
    for r in rows:
        total += r.param_count
        kernel = f"{r.kernel[0]}x{r.kernel[1]}" if r.kernel else "-"
        stride = f"{r.stride[0]}" if r.stride else "-"
        if input_hw is not None:
            oh, ow = input_hw[0] >> r.out_scale, input_hw[1] >> r.out_scale
            out = f"{r.out_ch}x{oh}x{ow}"
        else:
            out = f"{r.out_ch}@1/{2 ** r.out_scale}"
        lines.append([r.name, r.kind, kernel, stride, str(r.in_ch), str(r.out_ch),
                      str(r.param_count), out])
    lines.append(["total", "", "", "", "", "", str(total), ""])
    widths = [max(len(row[i]) for row in lines) for i in range(len(header))]
    return "\n".join("  ".join(cell.ljust(w) for cell, w in zip(row, widths)).rstrip()
                     for row in lines)


def parse_kv_config(text: str) -> dict[str, str]:
    """Parse line-oriented ``key = value`` text; '#' starts a comment."""
    result: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, value = line.split("=", 1)
        result[key.strip()] = value.strip()
    return result


def topology_to_config(t: TopologySpec) -> str:
    """Serialize a topology as ``key = value`` lines."""
    task = "flow" if t.decoder.pred_ch == 2 else "disp"
    lines = [
        f"name = {t.name}",
        f"task = {task}",
        f"flavor = {t.decoder.flavor}",
        f"variant = {t.encoder.variant}",
        f"width_mult = {t.encoder.width_mult}",
        f"num_stages = {t.num_stages}",
        f"input_ch = {t.encoder.input_ch}",
        f"pred_ch = {t.decoder.pred_ch}",
        f"final_upsample_factor = {t.decoder.final_upsample_factor}",
        f"sp_hidden = {t.decoder.sp_hidden}",
        f"max_disp = {t.max_disp if t.max_disp is not None else 'none'}",
    ]
    return "\n".join(lines) + "\n"


def topology_from_config(text: str) -> TopologySpec:
    """Rebuild a topology from its ``key = value`` serialization."""
    kv = parse_kv_config(text)
    required = ("name", "task", "flavor", "variant", "width_mult", "num_stages")
    missing = [k for k in required if k not in kv]
    if missing:
        raise ValueError(f"topology config missing keys: {missing}")
    max_disp = kv.get("max_disp", "none")
    return custom_topology(
        kv["name"],
        task=kv["task"],
        flavor=kv["flavor"],
        variant=kv["variant"],
        width_mult=Fraction(kv["width_mult"]),
        num_stages=int(kv["num_stages"]),
        max_disp=35 if max_disp == "none" else int(max_disp),
        sp_hidden=int(kv.get("sp_hidden", "32")),
    )
