"""Dense tensors and the differentiable layer primitives of the CNN.

Everything here is a pure function from input tensors to an output tensor.
Passing a ``Tape`` records the op so that :func:`backward` can later replay
the whole forward pass in reverse and hand out gradients for every value
that took part, parameters and intermediate feature maps included.

Layout conventions: feature maps are ``(channels, height, width)``,
convolution kernels ``(out_channels, in_channels, kh, kw)``, dense weights
``(out_features, in_features)``. All arithmetic is double precision.
"""

from __future__ import annotations

import itertools
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import DimensionError

_next_uid = itertools.count(1)


class Tensor:
    """A shape-checked, row-major float64 array with a unique value id.

    Tensors are treated as immutable once produced; ops always allocate a
    fresh output. The ``uid`` identifies the value inside a gradient store.
    """

    __slots__ = ("data", "uid")

    def __init__(self, data):
        arr = np.asarray(data, dtype=np.float64)
        self.data = arr
        self.uid = next(_next_uid)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def copy(self) -> "Tensor":
        return Tensor(self.data.copy())

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, uid={self.uid})"


class Tape:
    """Ordered record of executed ops, replayed in reverse by backward().

    Each entry holds the output tensor, the input tensors, and a closure
    mapping the output gradient to per-input gradients. A tape belongs to
    one logical thread of execution.
    """

    def __init__(self):
        self._entries: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []

    def record(self, output: Tensor, inputs: Iterable[Tensor], backward_fn: Callable) -> None:
        self._entries.append((output, tuple(inputs), backward_fn))

    @property
    def last_output(self) -> Tensor:
        if not self._entries:
            raise ValueError("tape is empty")
        return self._entries[-1][0]

    def __len__(self) -> int:
        return len(self._entries)


class GradientStore:
    """Gradients keyed by tensor uid, as returned by backward()."""

    def __init__(self, grads: dict[int, np.ndarray]):
        self._grads = grads

    def __contains__(self, value: Tensor) -> bool:
        return value.uid in self._grads

    def __getitem__(self, value: Tensor) -> np.ndarray:
        return self._grads[value.uid]

    def get(self, value: Tensor, default=None):
        return self._grads.get(value.uid, default)


def backward(tape: Tape, seed: Tensor, output: Tensor | None = None) -> GradientStore:
    """Reverse sweep: gradients of ``seed . output`` w.r.t. every recorded value.

    ``output`` defaults to the last value the tape produced; passing an
    intermediate value (e.g. pre-sigmoid logits) differentiates the prefix
    of the computation that produced it. Values recorded on the tape but
    not on any path to ``output`` get zero gradients of their own shape.
    """
    target = tape.last_output if output is None else output
    if seed.shape != target.shape:
        raise DimensionError(
            f"seed shape {seed.shape} does not match output shape {target.shape}"
        )
    grads: dict[int, np.ndarray] = {target.uid: np.array(seed.data, dtype=np.float64)}
    for out, inputs, backward_fn in reversed(tape._entries):
        gout = grads.get(out.uid)
        if gout is None:
            continue
        for tensor, gin in zip(inputs, backward_fn(gout)):
            if gin is None:
                continue
            acc = grads.get(tensor.uid)
            grads[tensor.uid] = gin if acc is None else acc + gin
    # values that never fed the target still get well-shaped zero gradients
    for out, inputs, _ in tape._entries:
        for t in (out, *inputs):
            if t.uid not in grads:
                grads[t.uid] = np.zeros_like(t.data)
    return GradientStore(grads)


# ---------------------------------------------------------------------------
# convolution


def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int) -> np.ndarray:
    """Patches of a padded (C, Hp, Wp) input as rows of a (Ho*Wo, C*kh*kw) matrix."""
    windows = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(1, 2))
    windows = windows[:, ::stride, ::stride]
    c, ho, wo = windows.shape[:3]
    return np.ascontiguousarray(windows.transpose(1, 2, 0, 3, 4).reshape(ho * wo, c * kh * kw))


def _correlate(xp: np.ndarray, kernels: np.ndarray, stride: int) -> tuple[np.ndarray, np.ndarray]:
    """Valid cross-correlation of a padded input; returns (output, patch matrix)."""
    c_out, _, kh, kw = kernels.shape
    cols = _im2col(xp, kh, kw, stride)
    out = cols @ kernels.reshape(c_out, -1).T
    ho = (xp.shape[1] - kh) // stride + 1
    wo = (xp.shape[2] - kw) // stride + 1
    return out.T.reshape(c_out, ho, wo), cols


def conv2d(
    x: Tensor,
    kernels: Tensor,
    bias: Tensor,
    stride: int = 1,
    padding: int = 0,
    tape: Tape | None = None,
) -> Tensor:
    """2-D cross-correlation (no kernel flip) over a (C_in, H, W) input.

    Output spatial size is floor((H + 2*padding - kh) / stride) + 1 per axis.
    """
    if x.data.ndim != 3 or kernels.data.ndim != 4:
        raise DimensionError(
            f"conv2d expects (C,H,W) input and (O,C,kh,kw) kernels, got {x.shape} and {kernels.shape}"
        )
    c_out, c_in, kh, kw = kernels.shape
    if x.shape[0] != c_in:
        raise DimensionError(f"input has {x.shape[0]} channels, kernels expect {c_in}")
    if bias.shape != (c_out,):
        raise DimensionError(f"bias shape {bias.shape} does not match {c_out} output channels")
    if stride < 1:
        raise ValueError(f"stride must be >= 1, got {stride}")
    if padding < 0:
        raise ValueError(f"padding must be >= 0, got {padding}")
    _, h, w = x.shape
    hp, wp = h + 2 * padding, w + 2 * padding
    if kh > hp or kw > wp:
        raise DimensionError(f"kernel {kh}x{kw} exceeds padded input {hp}x{wp}")

    xp = np.pad(x.data, ((0, 0), (padding, padding), (padding, padding))) if padding else x.data
    raw, cols = _correlate(xp, kernels.data, stride)
    out = Tensor(raw + bias.data[:, None, None])

    if tape is not None:
        kern = kernels.data
        ho, wo = out.shape[1:]

        def bwd(gout: np.ndarray):
            gy = gout.reshape(c_out, -1)
            gk = (gy @ cols).reshape(kern.shape)
            gb = gout.sum(axis=(1, 2))
            # input gradient: dilate the output grad by the stride, pad by the
            # kernel extent, and correlate with spatially flipped kernels
            if stride == 1:
                gy_dil = gout
            else:
                gy_dil = np.zeros((c_out, (ho - 1) * stride + 1, (wo - 1) * stride + 1))
                gy_dil[:, ::stride, ::stride] = gout
            gy_pad = np.pad(gy_dil, ((0, 0), (kh - 1, kh - 1), (kw - 1, kw - 1)))
            flipped = kern[:, :, ::-1, ::-1].transpose(1, 0, 2, 3)
            core, _ = _correlate(gy_pad, np.ascontiguousarray(flipped), 1)
            gxp = np.zeros((c_in, hp, wp))
            gxp[:, : core.shape[1], : core.shape[2]] = core
            gx = gxp[:, padding : padding + h, padding : padding + w]
            return gx, gk, gb

        tape.record(out, (x, kernels, bias), bwd)
    return out


# ---------------------------------------------------------------------------
# pooling


def maxpool2x2(x: Tensor, tape: Tape | None = None) -> Tensor:
    """Non-overlapping 2x2 max pooling; gradients route to the window argmax."""
    if x.data.ndim != 3:
        raise DimensionError(f"maxpool2x2 expects (C,H,W), got {x.shape}")
    c, h, w = x.shape
    if h % 2 or w % 2:
        raise DimensionError(f"maxpool2x2 needs even spatial dims, got {h}x{w}")
    ho, wo = h // 2, w // 2
    windows = x.data.reshape(c, ho, 2, wo, 2).transpose(0, 1, 3, 2, 4).reshape(c, ho, wo, 4)
    idx = windows.argmax(axis=-1)  # first max in row-major window order
    out = Tensor(np.take_along_axis(windows, idx[..., None], axis=-1)[..., 0])

    if tape is not None:

        def bwd(gout: np.ndarray):
            gwin = np.zeros((c, ho, wo, 4))
            np.put_along_axis(gwin, idx[..., None], gout[..., None], axis=-1)
            gx = gwin.reshape(c, ho, wo, 2, 2).transpose(0, 1, 3, 2, 4).reshape(c, h, w)
            return (gx,)

        tape.record(out, (x,), bwd)
    return out


def global_avg_pool(x: Tensor, tape: Tape | None = None) -> Tensor:
    """Spatial mean of each feature map: (K, H, W) -> (K,)."""
    if x.data.ndim != 3:
        raise DimensionError(f"global_avg_pool expects (K,H,W), got {x.shape}")
    k, h, w = x.shape
    if h < 1 or w < 1:
        raise DimensionError("global_avg_pool needs at least one spatial cell")
    z = h * w
    out = Tensor(x.data.mean(axis=(1, 2)))

    if tape is not None:

        def bwd(gout: np.ndarray):
            return (np.broadcast_to(gout[:, None, None] / z, (k, h, w)).copy(),)

        tape.record(out, (x,), bwd)
    return out


# ---------------------------------------------------------------------------
# affine


def dense(x: Tensor, weight: Tensor, bias: Tensor, tape: Tape | None = None) -> Tensor:
    """Affine map W @ x + b for a flat input vector."""
    if x.data.ndim != 1 or weight.data.ndim != 2:
        raise DimensionError(f"dense expects vector input and matrix weight, got {x.shape}, {weight.shape}")
    m, n = weight.shape
    if x.shape != (n,):
        raise DimensionError(f"dense weight {weight.shape} incompatible with input {x.shape}")
    if bias.shape != (m,):
        raise DimensionError(f"dense bias {bias.shape} incompatible with {m} outputs")
    out = Tensor(weight.data @ x.data + bias.data)

    if tape is not None:
        xd, wd = x.data, weight.data

        def bwd(gout: np.ndarray):
            return wd.T @ gout, np.outer(gout, xd), gout.copy()

        tape.record(out, (x, weight, bias), bwd)
    return out


# ---------------------------------------------------------------------------
# activations


def relu(x: Tensor, tape: Tape | None = None) -> Tensor:
    """Elementwise max(0, x); gradient is zeroed exactly where the input was < 0."""
    out = Tensor(np.maximum(x.data, 0.0))
    if tape is not None:
        mask = x.data >= 0

        def bwd(gout: np.ndarray):
            return (gout * mask,)

        tape.record(out, (x,), bwd)
    return out


def sigmoid(x: Tensor, tape: Tape | None = None) -> Tensor:
    """Numerically stable elementwise logistic function."""
    xd = x.data
    out_data = np.empty_like(xd, dtype=np.float64)
    pos = xd >= 0
    out_data[pos] = 1.0 / (1.0 + np.exp(-xd[pos]))
    e = np.exp(xd[~pos])
    out_data[~pos] = e / (1.0 + e)
    out = Tensor(out_data)

    if tape is not None:
        s = out_data

        def bwd(gout: np.ndarray):
            return (gout * s * (1.0 - s),)

        tape.record(out, (x,), bwd)
    return out


def dropout(
    x: Tensor,
    p: float,
    seed: int,
    train_mode: bool,
    tape: Tape | None = None,
) -> Tensor:
    """Inverted dropout: zero with probability p, scale survivors by 1/(1-p).

    In inference mode this is the identity, bit for bit. The mask is a pure
    function of the seed.
    """
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout probability must be in [0, 1), got {p}")
    if not train_mode or p == 0.0:
        out = Tensor(x.data.copy())
        if tape is not None:
            tape.record(out, (x,), lambda gout: (gout.copy(),))
        return out

    rng = np.random.Generator(np.random.PCG64(seed))
    keep = rng.random(x.shape) >= p
    scale = 1.0 / (1.0 - p)
    out = Tensor(x.data * keep * scale)

    if tape is not None:

        def bwd(gout: np.ndarray):
            return (gout * keep * scale,)

        tape.record(out, (x,), bwd)
    return out


# ---------------------------------------------------------------------------
# verification oracle


def finite_difference_gradient(
    f: Callable[[Tensor], float], x: Tensor, h: float = 1e-5
) -> Tensor:
    """Central-difference gradient of a scalar function, one coordinate at a time."""
    if h <= 0:
        raise ValueError(f"step size must be positive, got {h}")
    work = x.data.copy()
    grad = np.zeros_like(work)
    flat, gflat = work.reshape(-1), grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(f(Tensor(work)))
        flat[i] = orig - h
        fm = float(f(Tensor(work)))
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * h)
    return Tensor(grad)


def max_relative_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-6) -> float:
    """max |a-b| / max(|a|, |b|, floor), the metric used by the gradient checks."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float(np.max(np.abs(a - b) / denom)) if a.size else 0.0
