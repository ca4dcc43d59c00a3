"""Grid attention gate for skip connections.

A skip feature x and a coarser gating signal g are each projected to an
intermediate width by 1x1 convolutions; their sum (gate upsampled to the skip
resolution) passes through relu, a third 1x1 convolution, and a sigmoid to
produce a single-channel attention map alpha in (0,1). The gated skip is
x * alpha broadcast over channels.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor, add, conv2d, relu, sigmoid, tsum, upsample_nearest
from .nn import ParamStore, glorot_init


@dataclass
class AttentionGateParams:
    """1x1 projection weights; only the gate path and psi carry biases."""

    wx: Tensor    # (F_int, Cx, 1, 1)
    wg: Tensor    # (F_int, Cg, 1, 1)
    bg: Tensor    # (F_int,)
    psi: Tensor   # (1, F_int, 1, 1)
    bpsi: Tensor  # (1,)

    @property
    def f_int(self) -> int:
        return self.wx.shape[0]

    def named(self, prefix: str) -> list[tuple[str, Tensor]]:
        return [
            (f"{prefix}.wx.weight", self.wx),
            (f"{prefix}.wg.weight", self.wg),
            (f"{prefix}.wg.bias", self.bg),
            (f"{prefix}.psi.weight", self.psi),
            (f"{prefix}.psi.bias", self.bpsi),
        ]


def init_attention_gate(
    store: ParamStore, prefix: str, skip_channels: int, gate_channels: int, rng,
    f_int: int | None = None,
) -> AttentionGateParams:
    """Glorot-initialized gate registered under ``prefix`` in ``store``."""
    if f_int is None:
        f_int = max(1, skip_channels // 2)
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(int(rng))
    params = AttentionGateParams(
        wx=glorot_init((f_int, skip_channels, 1, 1), skip_channels, f_int, rng),
        wg=glorot_init((f_int, gate_channels, 1, 1), gate_channels, f_int, rng),
        bg=Tensor(np.zeros(f_int, dtype=np.float32)),
        psi=glorot_init((1, f_int, 1, 1), f_int, 1, rng),
        bpsi=Tensor(np.zeros(1, dtype=np.float32)),
    )
    for name, tensor in params.named(prefix):
        store.add(name, tensor)
    return params


def _zero_bias(channels: int, dtype) -> Tensor:
    return Tensor(np.zeros(channels, dtype=dtype))


def ag_forward(x_skip: Tensor, g: Tensor, params: AttentionGateParams) -> tuple[Tensor, Tensor]:
    """Returns (gated skip, alpha map of shape (N, 1, H, W))."""
    n, cx, h, w = x_skip.shape
    ng, cg, hg, wg = g.shape
    if n != ng:
        raise ValueError(f"ag_forward: batch mismatch {n} vs {ng}")
    if hg > h or wg > w:
        raise ValueError(f"ag_forward: gating signal {hg}x{wg} is finer than skip {h}x{w}")
    if h % hg != 0 or w % wg != 0 or h // hg != w // wg:
        raise ValueError(f"ag_forward: skip {h}x{w} is not an integer multiple of gate {hg}x{wg}")
    factor = h // hg

    theta_x = conv2d(x_skip, params.wx, _zero_bias(params.f_int, x_skip.dtype))
    phi_g = conv2d(g, params.wg, params.bg)
    if factor > 1:
        phi_g = upsample_nearest(phi_g, factor)
    q = relu(add(theta_x, phi_g))
    alpha = sigmoid(conv2d(q, params.psi, params.bpsi))
    gated = alpha * x_skip
    return gated, alpha


def ag_gradcheck(params: AttentionGateParams, x_skip: Tensor, g: Tensor,
                 tol: float = 1e-3, step: float = 1e-3) -> dict:
    """Check tape gradients of every gate parameter against central differences.

    Runs entirely in float64. The probe loss sum(gated) + sum(alpha) keeps
    every parameter on the differentiation path even when x_skip is zero.
    Returns per-parameter relative errors plus a ``passed`` flag.
    """
    arrays = {name: t.data.astype(np.float64) for name, t in params.named("ag")}
    xs = Tensor(x_skip.data.astype(np.float64))
    gs = Tensor(g.data.astype(np.float64))

    def build() -> AttentionGateParams:
        return AttentionGateParams(
            wx=Tensor(arrays["ag.wx.weight"]),
            wg=Tensor(arrays["ag.wg.weight"]),
            bg=Tensor(arrays["ag.wg.bias"]),
            psi=Tensor(arrays["ag.psi.weight"]),
            bpsi=Tensor(arrays["ag.psi.bias"]),
        )

    tape_params = build()
    for _, t in tape_params.named("ag"):
        t.requires_grad = True
    gated, alpha = ag_forward(xs, gs, tape_params)
    loss = add(tsum(gated), tsum(alpha))
    loss.backward()
    tape_grads = {name: t.grad if t.grad is not None else np.zeros_like(t.data)
                  for name, t in tape_params.named("ag")}

    def probe() -> float:
        gd, al = ag_forward(xs, gs, build())
        return float(np.sum(gd.data, dtype=np.float64) + np.sum(al.data, dtype=np.float64))

    report = {"per_param": {}, "tolerance": tol}
    worst = 0.0
    for name, arr in arrays.items():
        fd = _central_diff(probe, arr, step)
        rel = _max_rel(tape_grads[name], fd)
        report["per_param"][name] = rel
        worst = max(worst, rel)
    report["max_rel_error"] = worst
    report["passed"] = worst < tol
    return report


def _central_diff(fn, arr: np.ndarray, step: float) -> np.ndarray:
    grad = np.zeros_like(arr)
    flat = arr.ravel()
    gflat = grad.ravel()
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        fp = fn()
        flat[i] = orig - step
        fm = fn()
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * step)
    return grad


def _max_rel(a: np.ndarray, b: np.ndarray, floor: float = 1e-6) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float(np.max(np.abs(a - b) / denom)) if a.size else 0.0
