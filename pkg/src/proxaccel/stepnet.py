"""Small convolutional stepsize predictor with hand-written backpropagation.

The network sees the current iterate and its gradient laid out as wavelet
pyramid mosaics (one channel each, every channel divided by its own l2 norm)
and emits either one stepsize or one scaling per wavelet subband.

Layout is NHWC throughout. Convolutions are 3x3, stride 1, zero padded, each
followed by a ReLU; 2x2 max pools follow the convolutions listed in
``pool_after``. The head averages the last feature map over one region per
output (the whole map for the scalar head, each subband's footprint for the
grouped head), applies a per-output affine map, then ``softplus`` and a clamp.

Head outputs are relative: the scalar head's value multiplies ``1/L`` and the
grouped head's values are the diagonal of ``D`` in ``(1/L) * D``.
"""

from __future__ import annotations

import json
import math
import struct
import zlib
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .objective import DiagScaling, LassoProblem, soft_threshold
from .wavelet import CoeffVector, layout, mosaic_order

__all__ = [
    "PredictorArch",
    "PredictorParams",
    "StepNet",
    "AdamConfig",
    "AdamState",
    "SerializationError",
    "TrainingDiverged",
    "init",
    "forward",
    "features",
    "loss_one_step",
    "batch_loss_and_grad",
    "train_step",
    "serialize",
    "deserialize",
    "save_params",
    "load_params",
    "MAGIC",
]

MAGIC = b"PXL1"
_NORM_EPS = 1e-12
_SOFTPLUS_ONE = math.log(math.e - 1.0)  # softplus(_SOFTPLUS_ONE) == 1


class SerializationError(ValueError):
    pass


class TrainingDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class PredictorArch:
    in_channels: int = 2
    channels: tuple[int, ...] = (16, 32)
    pool_after: tuple[int, ...] = (0,)
    head: str = "scalar"
    levels: int = 3
    step_range: tuple[float, float] = (1e-4, 10.0)
    delta: float = 10.0

    def __post_init__(self):
        object.__setattr__(self, "channels", tuple(int(c) for c in self.channels))
        object.__setattr__(self, "pool_after", tuple(int(i) for i in self.pool_after))
        object.__setattr__(self, "step_range", tuple(float(v) for v in self.step_range))
        if self.in_channels not in (2, 4):
            raise ValueError("in_channels must be 2 (real) or 4 (complex measurements)")
        if not self.channels:
            raise ValueError("at least one convolution layer is required")
        if any(not 0 <= i < len(self.channels) for i in self.pool_after):
            raise ValueError("pool_after refers to a missing convolution")
        if self.head not in ("scalar", "grouped"):
            raise ValueError(f"unknown head {self.head!r}")
        lo, hi = self.step_range
        if not 0 < lo <= hi:
            raise ValueError("step_range must satisfy 0 < lo <= hi")
        if self.delta < 1:
            raise ValueError("delta must be >= 1")

    @property
    def n_outputs(self) -> int:
        return 1 if self.head == "scalar" else 3 * self.levels + 1

    @property
    def output_range(self) -> tuple[float, float]:
        if self.head == "scalar":
            return self.step_range
        return (1.0 / self.delta, self.delta)

    @property
    def pool_factor(self) -> int:
        return 2 ** len(self.pool_after)

    def param_shapes(self) -> list[tuple[int, ...]]:
        shapes = []
        cin = self.in_channels
        for cout in self.channels:
            shapes += [(cout, cin, 3, 3), (cout,)]
            cin = cout
        shapes += [(self.n_outputs, cin), (self.n_outputs,)]
        return shapes

    def param_count(self) -> int:
        return sum(int(np.prod(s)) for s in self.param_shapes())

    def records(self) -> list[dict]:
        """Layer list used by the model file header."""
        recs = []
        cin = self.in_channels
        for i, cout in enumerate(self.channels):
            recs.append({"type": "conv", "in": cin, "out": cout, "kernel": 3})
            recs.append({"type": "relu"})
            if i in self.pool_after:
                recs.append({"type": "maxpool", "size": 2})
            cin = cout
        recs.append({"type": "head", "kind": self.head, "in": cin, "out": self.n_outputs,
                     "levels": self.levels, "step_range": list(self.step_range), "delta": self.delta})
        return recs

    @classmethod
    def from_records(cls, recs: list[dict]) -> "PredictorArch":
        channels, pools, in_channels, head = [], [], None, None
        for rec in recs:
            kind = rec.get("type")
            if kind == "conv":
                if in_channels is None:
                    in_channels = rec["in"]
                channels.append(rec["out"])
            elif kind == "maxpool":
                pools.append(len(channels) - 1)
            elif kind == "head":
                head = rec
            elif kind != "relu":
                raise SerializationError(f"unknown layer record {kind!r}")
        if head is None or in_channels is None:
            raise SerializationError("model header lacks convolution or head records")
        return cls(in_channels, tuple(channels), tuple(pools), head["kind"], head["levels"],
                   tuple(head["step_range"]), head["delta"])


@dataclass(eq=False)
class PredictorParams:
    arch: PredictorArch
    tensors: list[np.ndarray]
    seed: int | None = None

    def __post_init__(self):
        shapes = self.arch.param_shapes()
        if len(self.tensors) != len(shapes):
            raise ValueError("tensor count does not match architecture")
        for t, s in zip(self.tensors, shapes):
            if t.shape != s:
                raise ValueError(f"tensor shape {t.shape} does not match expected {s}")
            if not np.all(np.isfinite(t)):
                raise ValueError("parameters must be finite")

    def copy(self) -> "PredictorParams":
        return PredictorParams(self.arch, [t.copy() for t in self.tensors], self.seed)


def init(arch: PredictorArch, seed: int) -> PredictorParams:
    """He-normal weights, zero biases, head bias set so the initial output is 1."""
    rng = np.random.default_rng(seed)
    tensors = []
    for shape in arch.param_shapes()[:-2:2]:
        fan_in = shape[1] * shape[2] * shape[3]
        tensors += [rng.standard_normal(shape) * math.sqrt(2.0 / fan_in), np.zeros(shape[0])]
    wshape = arch.param_shapes()[-2]
    tensors += [rng.standard_normal(wshape) * math.sqrt(2.0 / wshape[1]), np.full(wshape[0], _SOFTPLUS_ONE)]
    return PredictorParams(arch, tensors, seed)


# ---------------------------------------------------------------- inputs

def features(x, grad, levels: int, shape: tuple[int, int], grad_imag=None, in_channels: int = 2) -> np.ndarray:
    """Stack normalized mosaics into an ``(H, W, C)`` input.

    With four channels the order is (iterate real, iterate imaginary,
    gradient real, gradient imaginary); iterates are real so channel 1 is zero.
    """
    order = mosaic_order(levels, tuple(shape))
    chans = [np.asarray(x, dtype=float), np.asarray(grad, dtype=float)]
    if in_channels == 4:
        gi = np.zeros_like(chans[1]) if grad_imag is None else np.asarray(grad_imag, dtype=float)
        chans = [chans[0], np.zeros_like(chans[0]), chans[1], gi]
    out = np.empty(tuple(shape) + (len(chans),))
    for c, v in enumerate(chans):
        if not np.all(np.isfinite(v)):
            raise ValueError("predictor inputs must be finite")
        out[..., c] = (v[order] / (np.linalg.norm(v) + _NORM_EPS)).reshape(shape)
    return out


@lru_cache(maxsize=32)
def _region_weights(arch: PredictorArch, shape: tuple[int, int]) -> np.ndarray:
    """``(G, Hf*Wf)`` averaging weights over the final feature map."""
    f = arch.pool_factor
    hf, wf = shape[0] // f, shape[1] // f
    if hf < 1 or wf < 1:
        raise ValueError(f"image shape {shape} too small for {len(arch.pool_after)} pooling stages")
    if arch.head == "scalar":
        w = np.full((1, hf * wf), 1.0 / (hf * wf))
    else:
        w = np.zeros((arch.n_outputs, hf, wf))
        for g, sb in enumerate(layout(arch.levels, shape)):
            r0 = min(sb.rows.start // f, hf - 1)
            c0 = min(sb.cols.start // f, wf - 1)
            r1 = max(sb.rows.stop // f, r0 + 1)
            c1 = max(sb.cols.stop // f, c0 + 1)
            w[g, r0:r1, c0:c1] = 1.0 / ((r1 - r0) * (c1 - c0))
        w = w.reshape(arch.n_outputs, hf * wf)
    w.setflags(write=False)
    return w


# ---------------------------------------------------------------- layers

def _im2col(x: np.ndarray) -> np.ndarray:
    b, h, w, c = x.shape
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
    win = sliding_window_view(xp, (3, 3), axis=(1, 2))  # (B, H, W, C, 3, 3)
    return win.reshape(b * h * w, c * 9)


def _col2im(dcols: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    b, h, w, c = shape
    d = dcols.reshape(b, h, w, c, 3, 3)
    dxp = np.zeros((b, h + 2, w + 2, c))
    for i in range(3):
        for j in range(3):
            dxp[:, i:i + h, j:j + w, :] += d[..., i, j]
    return dxp[:, 1:-1, 1:-1, :]


def _maxpool(x: np.ndarray):
    b, h, w, c = x.shape
    blocks = x.reshape(b, h // 2, 2, w // 2, 2, c).transpose(0, 1, 3, 5, 2, 4).reshape(b, h // 2, w // 2, c, 4)
    arg = blocks.argmax(axis=-1)
    return np.take_along_axis(blocks, arg[..., None], axis=-1)[..., 0], arg


def _maxpool_back(dout: np.ndarray, arg: np.ndarray, shape) -> np.ndarray:
    b, h, w, c = shape
    blocks = np.zeros(dout.shape + (4,))
    np.put_along_axis(blocks, arg[..., None], dout[..., None], axis=-1)
    return blocks.reshape(b, h // 2, w // 2, c, 2, 2).transpose(0, 1, 4, 2, 5, 3).reshape(shape)


def _forward(params: PredictorParams, inputs: np.ndarray, keep: bool = False):
    """Run the network on ``(B, H, W, C)`` inputs; returns outputs and the tape."""
    arch = params.arch
    t = params.tensors
    if inputs.ndim != 4 or inputs.shape[-1] != arch.in_channels:
        raise ValueError(f"expected (B, H, W, {arch.in_channels}) inputs, got {inputs.shape}")
    if inputs.shape[1] % arch.pool_factor or inputs.shape[2] % arch.pool_factor:
        raise ValueError("input size must be divisible by the total pooling factor")
    shape = inputs.shape[1:3]
    tape = []
    a = inputs
    for i in range(len(arch.channels)):
        wgt, bias = t[2 * i], t[2 * i + 1]
        cols = _im2col(a)
        pre = cols @ wgt.reshape(wgt.shape[0], -1).T + bias
        pre = pre.reshape(a.shape[:3] + (wgt.shape[0],))
        out = np.maximum(pre, 0.0)
        entry = {"in_shape": a.shape, "cols": cols, "pre": pre}
        if i in arch.pool_after:
            entry["pool_shape"] = out.shape
            out, entry["arg"] = _maxpool(out)
        if keep:
            tape.append(entry)
        a = out
    weights = _region_weights(arch, tuple(shape))
    b = a.shape[0]
    fmap = a.reshape(b, -1, a.shape[-1])
    pooled = np.einsum("gk,bkc->bgc", weights, fmap)
    hw, hb = t[-2], t[-1]
    s = np.einsum("bgc,gc->bg", pooled, hw) + hb
    soft = np.logaddexp(0.0, s)
    lo, hi = arch.output_range
    out = np.clip(soft, lo, hi)
    cache = {"tape": tape, "fmap": fmap, "fshape": a.shape, "pooled": pooled, "s": s, "soft": soft}
    return out, cache


def _backward(params: PredictorParams, cache: dict, dout: np.ndarray) -> list[np.ndarray]:
    """Gradients of ``sum(dout * out)`` with respect to every tensor."""
    arch = params.arch
    t = params.tensors
    lo, hi = arch.output_range
    inside = (cache["soft"] > lo) & (cache["soft"] < hi)
    ds = dout * inside / (1.0 + np.exp(-cache["s"]))  # softplus' = sigmoid
    grads: list[np.ndarray] = [None] * len(t)  # type: ignore[list-item]
    grads[-1] = ds.sum(axis=0)
    grads[-2] = np.einsum("bg,bgc->gc", ds, cache["pooled"])
    dpooled = ds[:, :, None] * t[-2][None, :, :]
    weights = _region_weights(arch, tuple(cache["tape"][0]["in_shape"][1:3]))
    da = np.einsum("gk,bgc->bkc", weights, dpooled).reshape(cache["fshape"])
    for i in range(len(arch.channels) - 1, -1, -1):
        entry = cache["tape"][i]
        wgt = t[2 * i]
        if "arg" in entry:
            da = _maxpool_back(da, entry["arg"], entry["pool_shape"])
        dpre = (da * (entry["pre"] > 0)).reshape(-1, wgt.shape[0])
        grads[2 * i] = (dpre.T @ entry["cols"]).reshape(wgt.shape)
        grads[2 * i + 1] = dpre.sum(axis=0)
        if i > 0:
            da = _col2im(dpre @ wgt.reshape(wgt.shape[0], -1), entry["in_shape"])
    return grads


def forward(params: PredictorParams, x, grad, grad_imag=None, shape=None) -> np.ndarray:
    """Relative head output for one input pair: shape ``(1,)`` or ``(G,)``.

    ``shape`` may be omitted when ``x`` is a :class:`CoeffVector`.
    """
    if shape is None:
        if not isinstance(x, CoeffVector):
            raise ValueError("image shape required for plain coefficient arrays")
        shape = x.shape
    feats = features(np.asarray(x), np.asarray(grad), params.arch.levels, tuple(shape),
                     grad_imag, params.arch.in_channels)
    out, _ = _forward(params, feats[None])
    return out[0]


# ---------------------------------------------------------------- loss

def _group_index(arch: PredictorArch, shape: tuple[int, int]) -> np.ndarray:
    n = shape[0] * shape[1]
    if arch.head == "scalar":
        return np.zeros(n, dtype=np.intp)
    idx = np.empty(n, dtype=np.intp)
    for g, sb in enumerate(layout(arch.levels, shape)):
        idx[sb.index] = g
    return idx


def batch_loss_and_grad(params: PredictorParams, feats: np.ndarray, x: np.ndarray, grad: np.ndarray,
                        x_star: np.ndarray, lam: np.ndarray, step: np.ndarray, need_grad: bool = True):
    """Mean over the batch of ``0.5*||x* - T_{lam*s}(x - s*grad)||^2`` with ``s = step * out``.

    Arrays ``x``, ``grad``, ``x_star`` are ``(B, n)``; ``lam`` and ``step``
    (the ``1/L`` of each problem) are ``(B,)``. Returns ``(loss, grads)``;
    ``grads`` is None when ``need_grad`` is false.
    """
    arch = params.arch
    out, cache = _forward(params, feats, keep=need_grad)
    gidx = _group_index(arch, tuple(feats.shape[1:3]))
    lam = np.asarray(lam, dtype=float)[:, None]
    step = np.asarray(step, dtype=float)[:, None]
    s = step * out[:, gidx]
    u = x - s * grad
    sgn = np.sign(u)
    shrunk = np.maximum(np.abs(u) - lam * s, 0.0)
    r = sgn * shrunk - x_star
    batch = x.shape[0]
    loss = 0.5 * float(np.sum(r * r)) / batch
    if not need_grad:
        return loss, None
    active = shrunk > 0
    ds = r * active * (-grad - lam * sgn) / batch
    starts = np.flatnonzero(np.r_[True, gidx[1:] != gidx[:-1]])  # groups are contiguous
    dout = np.add.reduceat(ds, starts, axis=1) * step
    return loss, _backward(params, cache, dout)


def loss_one_step(params: PredictorParams, p: LassoProblem, x, x_star):
    """One-iteration loss and its exact gradient for a single problem."""
    x = np.asarray(x, dtype=float)
    r = p.model.apply(x) - p.y
    grad = p.model.adjoint(r)
    gi = p.model.adjoint_imag(r) if params.arch.in_channels == 4 else None
    feats = features(x, grad, params.arch.levels, p.model.shape, gi, params.arch.in_channels)
    return batch_loss_and_grad(params, feats[None], x[None], grad[None], np.asarray(x_star, dtype=float)[None],
                               np.array([p.lam]), np.array([p.step]))


# ---------------------------------------------------------------- optimizer

@dataclass(frozen=True)
class AdamConfig:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    t: int = 0
    initial_loss: float | None = None
    bad_steps: int = 0

    @classmethod
    def zeros(cls, params: PredictorParams) -> "AdamState":
        return cls([np.zeros_like(x) for x in params.tensors], [np.zeros_like(x) for x in params.tensors])


def train_step(params: PredictorParams, batch: dict, state: AdamState, cfg: AdamConfig = AdamConfig(),
               patience: int = 50) -> tuple[PredictorParams, float]:
    """One Adam update on ``batch`` (keys as in :func:`batch_loss_and_grad`).

    Raises :class:`TrainingDiverged` once the loss has exceeded ten times the
    first observed loss for ``patience`` consecutive steps.
    """
    loss, grads = batch_loss_and_grad(params, batch["feats"], batch["x"], batch["grad"], batch["x_star"],
                                      batch["lam"], batch["step"])
    if state.initial_loss is None:
        state.initial_loss = loss
    if not math.isfinite(loss) or loss > 10.0 * state.initial_loss:
        state.bad_steps += 1
        if state.bad_steps >= patience or not math.isfinite(loss):
            raise TrainingDiverged(
                f"loss {loss:.6g} vs initial {state.initial_loss:.6g} after {state.t} steps "
                f"({state.bad_steps} consecutive bad steps)")
    else:
        state.bad_steps = 0
    state.t += 1
    if cfg.lr == 0.0:
        return params, loss
    b1, b2 = cfg.beta1, cfg.beta2
    new = []
    for i, (w, g) in enumerate(zip(params.tensors, grads)):
        state.m[i] = b1 * state.m[i] + (1 - b1) * g
        state.v[i] = b2 * state.v[i] + (1 - b2) * g * g
        mhat = state.m[i] / (1 - b1**state.t)
        vhat = state.v[i] / (1 - b2**state.t)
        new.append(w - cfg.lr * mhat / (np.sqrt(vhat) + cfg.eps))
    return PredictorParams(params.arch, new, params.seed), loss


# ---------------------------------------------------------------- predictor

class StepNet:
    """Callable predictor ``(problem, x, grad) -> stepsize or DiagScaling``."""

    def __init__(self, params: PredictorParams):
        self.params = params
        self.arch = params.arch

    def relative(self, p: LassoProblem, x: np.ndarray, grad: np.ndarray) -> np.ndarray:
        gi = None
        if self.arch.in_channels == 4:
            gi = p.model.adjoint_imag(p.model.apply(x) - p.y)
        return forward(self.params, x, grad, gi, shape=p.model.shape)

    def __call__(self, p: LassoProblem, x: np.ndarray, grad: np.ndarray):
        out = self.relative(p, x, grad)
        if self.arch.head == "scalar":
            return float(out[0]) * p.step
        groups = [sb.index for sb in layout(self.arch.levels, p.model.shape)]
        return DiagScaling(out, groups, self.arch.delta, p.n)

    def step(self, p: LassoProblem, x: np.ndarray, grad: np.ndarray) -> np.ndarray:
        """Per-coefficient stepsizes implied by the prediction."""
        out = self.relative(p, x, grad)
        return p.step * out[_group_index(self.arch, p.model.shape)]

    def advance(self, p: LassoProblem, x: np.ndarray, grad: np.ndarray) -> np.ndarray:
        s = self.step(p, x, grad)
        return soft_threshold(x - s * grad, p.lam * s)


# ---------------------------------------------------------------- model file

def serialize(params: PredictorParams) -> bytes:
    """Model file bytes: magic, layer records, float64 tensors, CRC32 trailer."""
    buf = bytearray(MAGIC)
    recs = params.arch.records() + [{"type": "meta", "seed": params.seed}]
    body = [json.dumps(r, sort_keys=True, separators=(",", ":")).encode() for r in recs]
    buf += struct.pack("<I", len(body))
    for rec in body:
        buf += struct.pack("<I", len(rec)) + rec
    buf += struct.pack("<I", len(params.tensors))
    for t in params.tensors:
        buf += struct.pack("<I", t.ndim) + struct.pack("<%dI" % t.ndim, *t.shape)
        buf += np.ascontiguousarray(t, dtype="<f8").tobytes()
    buf += struct.pack("<I", zlib.crc32(bytes(buf)))
    return bytes(buf)


def deserialize(data: bytes) -> PredictorParams:
    if len(data) < 12 or data[:3] != MAGIC[:3]:
        raise SerializationError("not a predictor model file")
    if data[:4] != MAGIC:
        raise SerializationError(f"unsupported model file version {data[3:4]!r}")
    (crc,) = struct.unpack("<I", data[-4:])
    if zlib.crc32(data[:-4]) != crc:
        raise SerializationError("model file checksum mismatch")
    pos = 4

    def take(fmt):
        nonlocal pos
        vals = struct.unpack_from(fmt, data, pos)
        pos += struct.calcsize(fmt)
        return vals

    try:
        (nrec,) = take("<I")
        recs = []
        for _ in range(nrec):
            (ln,) = take("<I")
            recs.append(json.loads(data[pos:pos + ln].decode()))
            pos += ln
        meta = [r for r in recs if r.get("type") == "meta"]
        arch = PredictorArch.from_records([r for r in recs if r.get("type") != "meta"])
        (ntens,) = take("<I")
        tensors = []
        for _ in range(ntens):
            (ndim,) = take("<I")
            shape = take("<%dI" % ndim)
            count = int(np.prod(shape))
            tensors.append(np.frombuffer(data, dtype="<f8", count=count, offset=pos).reshape(shape).astype(float))
            pos += 8 * count
    except (struct.error, ValueError, KeyError) as exc:
        raise SerializationError(f"malformed model file: {exc}") from exc
    if pos != len(data) - 4:
        raise SerializationError("trailing bytes in model file")
    return PredictorParams(arch, tensors, meta[0].get("seed") if meta else None)


def save_params(params: PredictorParams, path) -> None:
    with open(path, "wb") as fh:
        fh.write(serialize(params))


def load_params(path) -> PredictorParams:
    with open(path, "rb") as fh:
        return deserialize(fh.read())
