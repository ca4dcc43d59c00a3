"""Trainable parameters, Glorot initialization, Adam, and the loss heads.

Loss functions are composed from autodiff primitives so their gradients come
off the tape like everything else. Probabilities are clamped to
[CLAMP_EPS, 1 - CLAMP_EPS] before any log.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, fields

import numpy as np

from .autodiff import Tensor, add, clip, mul, powc, tlog, tmean, tsum

CLAMP_EPS = 1e-7

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


class ParamStore:
    """Ordered, uniquely named map of trainable tensors.

    Names are stable hierarchical paths such as ``enc.block1.conv1.weight``;
    iteration follows insertion order, which makes optimizer trajectories and
    checkpoints deterministic.
    """

    def __init__(self):
        self._params: dict[str, Tensor] = {}

    def add(self, name: str, tensor: Tensor) -> Tensor:
        if name in self._params:
            raise ValueError(f"duplicate parameter name: {name}")
        tensor.requires_grad = True
        self._params[name] = tensor
        return tensor

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __len__(self) -> int:
        return len(self._params)

    def names(self) -> list[str]:
        return list(self._params)

    def items(self):
        return self._params.items()

    def zero_grad(self) -> None:
        for t in self._params.values():
            t.grad = None

    def copy(self, dtype=None) -> "ParamStore":
        """Deep copy, optionally changing precision (used by gradient oracles)."""
        out = ParamStore()
        for name, t in self._params.items():
            data = t.data.astype(dtype) if dtype is not None else t.data.copy()
            out.add(name, Tensor(data))
        return out

    def total_size(self) -> int:
        return sum(t.size for t in self._params.values())


@dataclass
class AdamState:
    """Per-parameter moment accumulators plus the scalar knobs."""

    learning_rate: float
    beta1: float = ADAM_BETA1
    beta2: float = ADAM_BETA2
    epsilon: float = ADAM_EPS
    step_count: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def for_params(cls, params: ParamStore, learning_rate: float, **kw) -> "AdamState":
        state = cls(learning_rate=learning_rate, **kw)
        for name, t in params.items():
            state.m[name] = np.zeros_like(t.data)
            state.v[name] = np.zeros_like(t.data)
        return state


def adam_step(params: ParamStore, state: AdamState) -> None:
    """Bias-corrected Adam update; clears gradients afterwards."""
    for name, t in params.items():
        if t.grad is None:
            raise ValueError(f"adam_step: parameter {name!r} has no gradient")
    state.step_count += 1
    t_ = state.step_count
    bc1 = 1.0 - state.beta1 ** t_
    bc2 = 1.0 - state.beta2 ** t_
    for name, p in params.items():
        g = p.grad
        m = state.m[name]
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        m_hat = m / bc1
        v_hat = v / bc2
        p.data -= (state.learning_rate * m_hat / (np.sqrt(v_hat) + state.epsilon)).astype(p.data.dtype)
        p.grad = None


def glorot_init(shape, fan_in: int, fan_out: int, rng) -> Tensor:
    """Uniform draw from +/- sqrt(6 / (fan_in + fan_out)).

    ``rng`` is an integer seed or a numpy Generator; an integer gives a fully
    reproducible stand-alone draw.
    """
    if fan_in < 1 or fan_out < 1:
        raise ValueError("glorot_init: fan_in and fan_out must be >= 1")
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(int(rng))
    bound = float(np.sqrt(6.0 / (fan_in + fan_out)))
    data = rng.uniform(-bound, bound, size=shape).astype(np.float32)
    return Tensor(data)


@dataclass
class LossConfig:
    """Knobs of the composite training loss.

    ``pos_weight=None`` means the positive-class weight is computed per batch
    as (negative pixels) / (positive pixels). ``gamma=0`` with ``pos_weight=1``
    reduces the focal term to plain BCE exactly.
    """

    gamma: float = 2.0
    pos_weight: float | None = None
    lambda_edge: float = 1.0
    lambda_reg: float = 0.004

    def validate(self) -> list[str]:
        errs = []
        if self.gamma < 0:
            errs.append("loss.gamma must be >= 0")
        if self.pos_weight is not None and self.pos_weight <= 0:
            errs.append("loss.pos_weight must be positive")
        if self.lambda_edge < 0:
            errs.append("loss.lambda_edge must be >= 0")
        if self.lambda_reg < 0:
            errs.append("loss.lambda_reg must be >= 0")
        return errs

    def to_dict(self) -> dict:
        return {"gamma": self.gamma, "pos_weight": self.pos_weight,
                "lambda_edge": self.lambda_edge, "lambda_reg": self.lambda_reg}

    @classmethod
    def from_dict(cls, d: dict) -> "LossConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ValueError(f"unknown loss config keys: {', '.join(unknown)}")
        return cls(**d)


def _check_pair(pred: Tensor, target: Tensor) -> None:
    if pred.shape != target.shape:
        raise ValueError(f"loss: prediction shape {pred.shape} != target shape {target.shape}")


def bce_loss(pred: Tensor, target: Tensor) -> Tensor:
    """Mean binary cross entropy over all elements."""
    _check_pair(pred, target)
    p = clip(pred, CLAMP_EPS, 1.0 - CLAMP_EPS)
    y = target if isinstance(target, Tensor) else Tensor(target)
    term = add(mul(y, tlog(p)), mul(1.0 - y, tlog(1.0 - p)))
    return mul(tmean(term), -1.0)


def focal_bce_loss(pred: Tensor, target: Tensor, cfg: LossConfig) -> Tensor:
    """Class-weighted focal BCE; hard pixels keep their BCE weight, easy
    pixels are damped by (1-p)^gamma / p^gamma."""
    _check_pair(pred, target)
    alpha = cfg.pos_weight
    if alpha is None:
        pos = float(np.sum(target.data, dtype=np.float64))
        neg = float(target.data.size - pos)
        alpha = neg / pos if pos > 0 else 1.0
    p = clip(pred, CLAMP_EPS, 1.0 - CLAMP_EPS)
    y = target
    pos_term = mul(mul(y, powc(1.0 - p, cfg.gamma)), tlog(p))
    neg_term = mul(mul(1.0 - y, powc(p, cfg.gamma)), tlog(1.0 - p))
    term = add(mul(pos_term, float(alpha)), neg_term)
    return mul(tmean(term), -1.0)


def l2_penalty(params: ParamStore, lambda_reg: float) -> Tensor:
    """lambda * sum of squared weights; biases are exempt."""
    if lambda_reg < 0:
        raise ValueError("l2_penalty: lambda_reg must be >= 0")
    total = None
    for name, p in params.items():
        if not name.endswith("weight"):
            continue
        sq = tsum(mul(p, p))
        total = sq if total is None else add(total, sq)
    if total is None or lambda_reg == 0.0:
        return Tensor(np.zeros((), dtype=np.float32))
    return mul(total, float(lambda_reg))


# checkpoint format: one line of JSON (parameter names, shapes, byte offsets)
# terminated by "\n", then raw little-endian float32 data.


def save_checkpoint(path, params: ParamStore, extra: dict | None = None) -> None:
    entries = []
    offset = 0
    blobs = []
    for name, t in params.items():
        arr = np.ascontiguousarray(t.data.astype("<f4"))
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
        blobs.append(arr.tobytes())
        offset += arr.nbytes
    header = {"format": "agseg-checkpoint-v1", "params": entries, "total_bytes": offset}
    if extra:
        header["extra"] = extra
    with open(path, "wb") as f:
        f.write(json.dumps(header, sort_keys=True).encode("utf-8"))
        f.write(b"\n")
        for blob in blobs:
            f.write(blob)


def load_checkpoint(path) -> tuple[ParamStore, dict]:
    with open(path, "rb") as f:
        header_line = f.readline()
        raw = f.read()
    header = json.loads(header_line.decode("utf-8"))
    if header.get("format") != "agseg-checkpoint-v1":
        raise ValueError(f"{path}: not an agseg checkpoint")
    if len(raw) != header["total_bytes"]:
        raise ValueError(f"{path}: payload is {len(raw)} bytes, header says {header['total_bytes']}")
    params = ParamStore()
    for entry in header["params"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        start = entry["offset"]
        arr = np.frombuffer(raw, dtype="<f4", count=count, offset=start).reshape(shape)
        params.add(entry["name"], Tensor(arr.astype(np.float32)))
    return params, header.get("extra", {})
