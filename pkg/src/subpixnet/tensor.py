"""Rank-4 float32 tensors with tape-based reverse-mode automatic differentiation.

Every value in this library is a ``Tensor``: a float32 array in
(batch, channels, height, width) layout, optionally carrying a gradient
buffer of the same shape.  Operations executed while a :class:`Tape` is
active are recorded on it; :func:`backward` replays the record in reverse
to accumulate gradients into every ``requires_grad`` tensor that fed the
loss.  Gradients accumulate additively, so a tensor used twice receives
the sum of both contributions.
"""

from __future__ import annotations

import io
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "ConvParams",
    "Tape",
    "active_tape",
    "record_op",
    "backward",
    "grad_check",
    "GradCheckResult",
    "dump_tensor",
    "load_tensor_dump",
]


class Tensor:
    """Float32 array in (n, c, h, w) layout with an optional grad buffer.

    The data buffer is treated as immutable once the tensor has entered a
    computation; only ``grad`` is mutated (by :func:`backward`).  All four
    dimensions must be >= 1.
    """

    __slots__ = ("data", "requires_grad", "grad", "_tape", "_gen")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float32)
        if arr.ndim != 4:
            raise ValueError(f"tensor must be rank 4 (n, c, h, w), got shape {arr.shape}")
        if min(arr.shape) < 1:
            raise ValueError(f"all tensor dimensions must be >= 1, got {arr.shape}")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._tape: "Tape | None" = None
        self._gen = 0

    @property
    def shape(self) -> tuple[int, int, int, int]:
        return self.data.shape  # type: ignore[return-value]

    @property
    def n(self) -> int:
        return self.data.shape[0]

    @property
    def c(self) -> int:
        return self.data.shape[1]

    @property
    def h(self) -> int:
        return self.data.shape[2]

    @property
    def w(self) -> int:
        return self.data.shape[3]

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        self.grad = None

    def accumulate_grad(self, g: np.ndarray) -> None:
        """Add ``g`` into this tensor's grad buffer (no-op unless requires_grad)."""
        if not self.requires_grad:
            return
        g = np.asarray(g)
        if g.shape != self.data.shape:
            raise ValueError(f"gradient shape {g.shape} does not match tensor shape {self.shape}")
        if self.grad is None:
            self.grad = g.astype(np.float32, copy=True)
        else:
            self.grad += g.astype(np.float32, copy=False)

    @staticmethod
    def zeros(shape: Sequence[int], requires_grad: bool = False) -> "Tensor":
        return Tensor(np.zeros(tuple(shape), dtype=np.float32), requires_grad)

    @staticmethod
    def full(shape: Sequence[int], value: float, requires_grad: bool = False) -> "Tensor":
        return Tensor(np.full(tuple(shape), value, dtype=np.float32), requires_grad)

    def __repr__(self) -> str:  # pragma: no cover - debugging aid
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"


@dataclass
class ConvParams:
    """Kernel, bias, stride and zero-padding for the convolution ops.

    ``kernel`` is (out_ch, in_ch, k_h, k_w) for :func:`~subpixnet.ops.conv2d`.
    :func:`~subpixnet.ops.conv2d_transpose` reads the same buffer with the
    channel axes swapped, i.e. as (in_ch, out_ch, k_h, k_w); this is what
    makes a single parameter set usable on both sides of the adjointness
    identity.  ``bias`` is carried as a (1, ch, 1, 1) tensor (the universal
    rank-4 layout) or ``None`` for bias-free use.
    """

    kernel: Tensor
    bias: Tensor | None = None
    stride: tuple[int, int] = (1, 1)
    padding: tuple[int, int] = (0, 0)

    def __post_init__(self) -> None:
        kh, kw = self.kernel.shape[2], self.kernel.shape[3]
        if kh < 1 or kw < 1:
            raise ValueError(f"kernel spatial dims must be >= 1, got {(kh, kw)}")
        if self.stride[0] < 1 or self.stride[1] < 1:
            raise ValueError(f"stride must be positive, got {self.stride}")
        if self.padding[0] < 0 or self.padding[1] < 0:
            raise ValueError(f"padding must be non-negative, got {self.padding}")
        if self.bias is not None:
            b = self.bias.shape
            if b[0] != 1 or b[2] != 1 or b[3] != 1:
                raise ValueError(f"bias must be shaped (1, ch, 1, 1), got {b}")


@dataclass
class _TapeEntry:
    name: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    backward_fn: Callable[[np.ndarray], None] | None


class Tape:
    """Ordered record of executed operations.

    Used as a context manager: ops run inside the ``with`` block are
    appended in execution order.  :meth:`reset` clears the record and
    invalidates tensors produced under the previous generation, so reusing
    them afterwards raises instead of silently producing wrong gradients.
    """

    def __init__(self) -> None:
        self._entries: list[_TapeEntry] = []
        self._generation = 0

    def __enter__(self) -> "Tape":
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, *exc) -> None:
        popped = _TAPE_STACK.pop()
        assert popped is self, "tape stack corrupted"

    def __len__(self) -> int:
        return len(self._entries)

    def reset(self) -> None:
        self._entries.clear()
        self._generation += 1

    def op_names(self) -> list[str]:
        """Names of the recorded ops, in execution order."""
        return [e.name for e in self._entries]


_TAPE_STACK: list[Tape] = []


def active_tape() -> Tape | None:
    return _TAPE_STACK[-1] if _TAPE_STACK else None


def record_op(
    name: str,
    inputs: Sequence[Tensor],
    output: Tensor,
    backward_fn: Callable[[np.ndarray], None] | None,
) -> Tensor:
    """Register an executed op with the active tape (if any) and return its output.

    ``backward_fn`` receives the gradient w.r.t. ``output`` and must
    accumulate into the inputs via :meth:`Tensor.accumulate_grad`.  The op
    is recorded regardless of gradient needs so that tapes double as op
    traces; entries whose inputs carry no gradient are skipped on replay.
    """
    output.requires_grad = any(t.requires_grad for t in inputs)
    tape = active_tape()
    if tape is None:
        return output
    for t in inputs:
        if t._tape is tape and t._gen != tape._generation:
            raise RuntimeError(
                f"{name}: an input tensor was produced before this tape was reset "
                "and cannot be reused"
            )
    output._tape = tape
    output._gen = tape._generation
    tape._entries.append(
        _TapeEntry(name, tuple(inputs), output, backward_fn if output.requires_grad else None)
    )
    return output


def backward(loss: Tensor, tape: Tape) -> None:
    """Accumulate d(loss)/d(leaf) into every requires_grad tensor on the tape.

    ``loss`` must be scalar-shaped (1, 1, 1, 1) and must have been produced
    while ``tape`` was active (and not reset since).
    """
    if loss.shape != (1, 1, 1, 1):
        raise ValueError(f"loss must be scalar-shaped (1, 1, 1, 1), got {loss.shape}")
    if loss._tape is not tape:
        raise RuntimeError("loss was not recorded on this tape")
    if loss._gen != tape._generation:
        raise RuntimeError("tape was reset after the loss was recorded")
    loss.grad = np.ones((1, 1, 1, 1), dtype=np.float32)
    for entry in reversed(tape._entries):
        if entry.backward_fn is None or entry.output.grad is None:
            continue
        entry.backward_fn(entry.output.grad)


@dataclass
class GradCheckResult:
    """Outcome of a finite-difference gradient check."""

    max_err: float
    tol: float
    checked: int

    @property
    def passed(self) -> bool:
        return self.max_err <= self.tol

    def __str__(self) -> str:
        verdict = "pass" if self.passed else "FAIL"
        return f"grad_check: max err {self.max_err:.3e} vs tol {self.tol:.3e} over {self.checked} coords -> {verdict}"


def grad_check(
    fn: Callable[..., Tensor],
    inputs: Sequence[Tensor],
    eps: float = 1e-3,
    tol: float = 1e-3,
    max_coords: int | None = None,
    rng: np.random.Generator | None = None,
) -> GradCheckResult:
    """Compare analytic gradients of ``fn`` against central finite differences.

    ``fn`` must map ``inputs`` to a scalar-shaped tensor and be pure (it is
    re-evaluated under perturbed inputs).  Each coordinate's error is
    |analytic - numeric| / max(1, |analytic|, |numeric|); the report carries
    the maximum.  Failures are reported, never raised.

    ``max_coords`` limits the number of coordinates probed per input
    (sampled with ``rng``), which makes whole-network spot checks cheap.
    """
    tape = Tape()
    with tape:
        out = fn(*inputs)
    if out.shape != (1, 1, 1, 1):
        raise ValueError("grad_check closure must produce a scalar-shaped tensor")
    for t in inputs:
        t.zero_grad()
    backward(out, tape)
    analytic = [
        t.grad.copy() if t.grad is not None else np.zeros_like(t.data) for t in inputs
    ]

    max_err = 0.0
    checked = 0
    for t, a in zip(inputs, analytic):
        if not t.requires_grad:
            continue
        coords = np.arange(t.data.size)
        if max_coords is not None and t.data.size > max_coords:
            gen = rng if rng is not None else np.random.default_rng(0)
            coords = gen.choice(t.data.size, size=max_coords, replace=False)
        flat = t.data.reshape(-1)
        for idx in coords:
            orig = flat[idx]
            flat[idx] = orig + eps
            hi = np.float32(flat[idx])
            f_hi = fn(*inputs).item()
            flat[idx] = orig - eps
            lo = np.float32(flat[idx])
            f_lo = fn(*inputs).item()
            flat[idx] = orig
            # use the perturbation actually applied after float32 rounding
            numeric = (f_hi - f_lo) / (float(hi) - float(lo))
            ana = float(a.reshape(-1)[idx])
            err = abs(ana - numeric) / max(1.0, abs(ana), abs(numeric))
            max_err = max(max_err, err)
            checked += 1
    return GradCheckResult(max_err=max_err, tol=tol, checked=checked)


def dump_tensor(t: Tensor, f) -> None:
    """Write a tensor in the text debug format: a shape line, then the floats.

    ``f`` is a text-mode file object or a path.
    """
    if not hasattr(f, "write"):
        with open(f, "w", encoding="ascii") as fh:
            dump_tensor(t, fh)
        return
    n, c, h, w = t.shape
    f.write(f"shape: {n} {c} {h} {w}\n")
    flat = t.data.reshape(-1)
    f.write(" ".join(repr(float(v)) for v in flat))
    f.write("\n")


def load_tensor_dump(f) -> Tensor:
    """Read a tensor written by :func:`dump_tensor`."""
    if not hasattr(f, "read"):
        with open(f, "r", encoding="ascii") as fh:
            return load_tensor_dump(fh)
    text = f.read()
    buf = io.StringIO(text)
    header = buf.readline().strip()
    if not header.startswith("shape:"):
        raise ValueError(f"bad tensor dump header: {header!r}")
    dims = [int(v) for v in header[len("shape:"):].split()]
    if len(dims) != 4:
        raise ValueError(f"tensor dump header must carry 4 dims, got {dims}")
    values = np.array([float(v) for v in buf.read().split()], dtype=np.float32)
    if values.size != int(np.prod(dims)):
        raise ValueError(
            f"tensor dump payload has {values.size} values, expected {int(np.prod(dims))}"
        )
    return Tensor(values.reshape(dims))
