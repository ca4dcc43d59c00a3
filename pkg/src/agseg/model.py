"""The full attention-gated, edge-supervised convolutional autoencoder.

Encoder: four blocks of [conv3x3 -> relu -> conv3x3 -> relu -> maxpool2],
filter widths widest-first by default. The edge head taps the pooled output
of one encoder block (block 0 means the raw image) and its conditioned
feature continues down the encoder. One skip connection leaves the chosen
encoder block before pooling, passes through the attention gate, and is added
to the decoder feature at the matching resolution; the gating signal is the
decoder feature one level coarser. Decoder: four blocks of
[2x upsample -> optional gated-skip merge -> conv3x3 -> relu], then a 1x1
conv and sigmoid produce the segmentation probability map at input
resolution.

Composite loss: focal BCE on the segmentation map, plus lambda_edge times BCE
between the edge head and the mask's boundary map (max-pooled to the tap
resolution), plus an L2 penalty on conv weights.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields

import numpy as np

from .attention import AttentionGateParams, ag_forward, init_attention_gate
from .autodiff import (
    Tensor,
    add,
    conv2d,
    conv_transpose2d,
    maxpool2d,
    mul,
    relu,
    sigmoid,
    upsample_nearest,
)
from .edge import EdgeHeadParams, ea_forward, edge_loss, edge_target_from_mask, init_edge_head, pool_target
from .nn import LossConfig, ParamStore, focal_bce_loss, glorot_init, l2_penalty, load_checkpoint, save_checkpoint

N_BLOCKS = 4
GATE_MODES = ("learned", "ones", "off")
UPSAMPLE_MODES = ("transpose", "nearest")


@dataclass
class NetworkConfig:
    input_channels: int = 3
    input_size: int = 128
    encoder_filters: tuple[int, ...] = (512, 256, 128, 64)
    decoder_filters: tuple[int, ...] = (64, 128, 256, 512)
    base_filter_scale: float = 1.0
    ag_after_block: int = 2
    ea_tap_block: int = 1
    kernel_size: int = 3
    upsample_mode: str = "transpose"
    seed: int = 0

    def scaled_encoder_filters(self) -> list[int]:
        return [max(1, int(round(f * self.base_filter_scale))) for f in self.encoder_filters]

    def scaled_decoder_filters(self) -> list[int]:
        return [max(1, int(round(f * self.base_filter_scale))) for f in self.decoder_filters]

    def validate(self) -> list[str]:
        errs = []
        if self.input_channels < 1:
            errs.append("input_channels must be >= 1")
        if len(self.encoder_filters) != N_BLOCKS:
            errs.append(f"encoder_filters must list exactly {N_BLOCKS} widths")
        if len(self.decoder_filters) != N_BLOCKS:
            errs.append(f"decoder_filters must list exactly {N_BLOCKS} widths")
        if self.input_size < 2 ** N_BLOCKS or self.input_size % (2 ** N_BLOCKS) != 0:
            errs.append(f"input_size must be a positive multiple of {2 ** N_BLOCKS}")
        if self.base_filter_scale <= 0:
            errs.append("base_filter_scale must be positive")
        if not 1 <= self.ag_after_block <= N_BLOCKS:
            errs.append(f"ag_after_block must be in 1..{N_BLOCKS}")
        if not 0 <= self.ea_tap_block <= N_BLOCKS:
            errs.append(f"ea_tap_block must be in 0..{N_BLOCKS}")
        if self.kernel_size < 1 or self.kernel_size % 2 == 0:
            errs.append("kernel_size must be odd")
        if self.upsample_mode not in UPSAMPLE_MODES:
            errs.append(f"upsample_mode must be one of {UPSAMPLE_MODES}")
        if (len(self.encoder_filters) == N_BLOCKS and len(self.decoder_filters) == N_BLOCKS
                and 1 <= self.ag_after_block <= N_BLOCKS):
            enc = self.scaled_encoder_filters()
            dec = self.scaled_decoder_filters()
            skip_ch = enc[self.ag_after_block - 1]
            merge_ch = dec[N_BLOCKS - self.ag_after_block]
            if skip_ch != merge_ch:
                errs.append(
                    "additive skip merge needs encoder_filters[ag_after_block-1] == "
                    f"decoder_filters[{N_BLOCKS}-ag_after_block] (got {skip_ch} vs {merge_ch})")
        return errs

    def to_dict(self) -> dict:
        return {
            "input_channels": self.input_channels,
            "input_size": self.input_size,
            "encoder_filters": list(self.encoder_filters),
            "decoder_filters": list(self.decoder_filters),
            "base_filter_scale": self.base_filter_scale,
            "ag_after_block": self.ag_after_block,
            "ea_tap_block": self.ea_tap_block,
            "kernel_size": self.kernel_size,
            "upsample_mode": self.upsample_mode,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ValueError(f"unknown network config keys: {', '.join(unknown)}")
        kwargs = dict(d)
        for key in ("encoder_filters", "decoder_filters"):
            if key in kwargs:
                kwargs[key] = tuple(kwargs[key])
        return cls(**kwargs)


@dataclass
class NetworkState:
    config: NetworkConfig
    params: ParamStore
    enc: list[dict] = field(default_factory=list)      # per block: conv1/conv2 (w, b)
    dec: list[dict] = field(default_factory=list)      # per block: up/conv (w, b)
    ag: AttentionGateParams | None = None
    ea: EdgeHeadParams | None = None
    head: tuple[Tensor, Tensor] | None = None


def _require_valid(config: NetworkConfig) -> None:
    errs = config.validate()
    if errs:
        raise ValueError("invalid network config: " + "; ".join(errs))


def build_network(config: NetworkConfig) -> NetworkState:
    """Glorot-initialize every block from config.seed (fixed draw order:
    encoder blocks, edge head, attention gate, decoder blocks, head)."""
    _require_valid(config)
    rng = np.random.default_rng(config.seed)
    store = ParamStore()
    k = config.kernel_size
    enc_f = config.scaled_encoder_filters()
    dec_f = config.scaled_decoder_filters()

    enc = []
    cin = config.input_channels
    for b, cout in enumerate(enc_f, start=1):
        w1 = store.add(f"enc.block{b}.conv1.weight",
                       glorot_init((cout, cin, k, k), cin * k * k, cout * k * k, rng))
        b1 = store.add(f"enc.block{b}.conv1.bias", Tensor(np.zeros(cout, dtype=np.float32)))
        w2 = store.add(f"enc.block{b}.conv2.weight",
                       glorot_init((cout, cout, k, k), cout * k * k, cout * k * k, rng))
        b2 = store.add(f"enc.block{b}.conv2.bias", Tensor(np.zeros(cout, dtype=np.float32)))
        enc.append({"conv1": (w1, b1), "conv2": (w2, b2)})
        cin = cout

    ea_channels = config.input_channels if config.ea_tap_block == 0 else enc_f[config.ea_tap_block - 1]
    ea = init_edge_head(store, "ea", ea_channels, rng)

    skip_ch = enc_f[config.ag_after_block - 1]
    merge_block = N_BLOCKS + 1 - config.ag_after_block
    gate_ch = enc_f[-1] if merge_block == 1 else dec_f[merge_block - 2]
    ag = init_attention_gate(store, "ag", skip_ch, gate_ch, rng)

    dec = []
    cin = enc_f[-1]
    for d, cout in enumerate(dec_f, start=1):
        if config.upsample_mode == "transpose":
            uw = store.add(f"dec.block{d}.up.weight",
                           glorot_init((cin, cout, 2, 2), cin * 4, cout * 4, rng))
        else:
            uw = store.add(f"dec.block{d}.up.weight",
                           glorot_init((cout, cin, k, k), cin * k * k, cout * k * k, rng))
        ub = store.add(f"dec.block{d}.up.bias", Tensor(np.zeros(cout, dtype=np.float32)))
        cw = store.add(f"dec.block{d}.conv.weight",
                       glorot_init((cout, cout, k, k), cout * k * k, cout * k * k, rng))
        cb = store.add(f"dec.block{d}.conv.bias", Tensor(np.zeros(cout, dtype=np.float32)))
        dec.append({"up": (uw, ub), "conv": (cw, cb)})
        cin = cout

    hw = store.add("head.weight", glorot_init((1, dec_f[-1], 1, 1), dec_f[-1], 1, rng))
    hb = store.add("head.bias", Tensor(np.zeros(1, dtype=np.float32)))

    return NetworkState(config=config, params=store, enc=enc, dec=dec, ag=ag, ea=ea, head=(hw, hb))


def wire_state(config: NetworkConfig, params: ParamStore) -> NetworkState:
    """Rebind block handles onto an existing parameter store (checkpoint load)."""
    _require_valid(config)
    enc = [{"conv1": (params[f"enc.block{b}.conv1.weight"], params[f"enc.block{b}.conv1.bias"]),
            "conv2": (params[f"enc.block{b}.conv2.weight"], params[f"enc.block{b}.conv2.bias"])}
           for b in range(1, N_BLOCKS + 1)]
    dec = [{"up": (params[f"dec.block{d}.up.weight"], params[f"dec.block{d}.up.bias"]),
            "conv": (params[f"dec.block{d}.conv.weight"], params[f"dec.block{d}.conv.bias"])}
           for d in range(1, N_BLOCKS + 1)]
    ag = AttentionGateParams(
        wx=params["ag.wx.weight"], wg=params["ag.wg.weight"], bg=params["ag.wg.bias"],
        psi=params["ag.psi.weight"], bpsi=params["ag.psi.bias"])
    ea = EdgeHeadParams(we=params["ea.weight"], be=params["ea.bias"])
    return NetworkState(config=config, params=params, enc=enc, dec=dec, ag=ag, ea=ea,
                        head=(params["head.weight"], params["head.bias"]))


def parameter_count(config: NetworkConfig) -> int:
    """Closed-form trainable parameter count for a config."""
    _require_valid(config)
    k2 = config.kernel_size ** 2
    enc_f = config.scaled_encoder_filters()
    dec_f = config.scaled_decoder_filters()
    total = 0
    cin = config.input_channels
    for cout in enc_f:
        total += cout * cin * k2 + cout + cout * cout * k2 + cout
        cin = cout
    ea_ch = config.input_channels if config.ea_tap_block == 0 else enc_f[config.ea_tap_block - 1]
    total += ea_ch + 1
    skip_ch = enc_f[config.ag_after_block - 1]
    merge_block = N_BLOCKS + 1 - config.ag_after_block
    gate_ch = enc_f[-1] if merge_block == 1 else dec_f[merge_block - 2]
    f_int = max(1, skip_ch // 2)
    total += f_int * skip_ch + f_int * gate_ch + f_int + f_int + 1
    cin = enc_f[-1]
    for cout in dec_f:
        up_w = cin * cout * 4 if config.upsample_mode == "transpose" else cout * cin * k2
        total += up_w + cout + cout * cout * k2 + cout
        cin = cout
    total += dec_f[-1] + 1
    return total


def forward(state: NetworkState, image: Tensor, gate: str = "learned") -> tuple[Tensor, Tensor, Tensor | None]:
    """Full forward pass.

    gate: "learned" applies the attention gate; "ones" forces alpha to the
    all-ones map (ungated skip); "off" drops the skip merge entirely.
    Returns (seg_prob, edge_prob, alpha); alpha is None when gate="off".
    """
    if gate not in GATE_MODES:
        raise ValueError(f"forward: gate must be one of {GATE_MODES}")
    cfg = state.config
    n, c, h, w = image.shape
    if c != cfg.input_channels or h != cfg.input_size or w != cfg.input_size:
        raise ValueError(
            f"forward: expected (N,{cfg.input_channels},{cfg.input_size},{cfg.input_size}), got {image.shape}")
    pad = cfg.kernel_size // 2

    x = image
    edge_prob = None
    skip = None
    if cfg.ea_tap_block == 0:
        edge_prob, x = ea_forward(x, state.ea)
    for b in range(1, N_BLOCKS + 1):
        blk = state.enc[b - 1]
        x = relu(conv2d(x, *blk["conv1"], padding=pad))
        x = relu(conv2d(x, *blk["conv2"], padding=pad))
        if b == cfg.ag_after_block:
            skip = x
        x = maxpool2d(x, 2)
        if b == cfg.ea_tap_block:
            edge_prob, x = ea_forward(x, state.ea)

    alpha = None
    merge_block = N_BLOCKS + 1 - cfg.ag_after_block
    for d in range(1, N_BLOCKS + 1):
        blk = state.dec[d - 1]
        gate_feat = x
        if cfg.upsample_mode == "transpose":
            x = conv_transpose2d(x, *blk["up"], stride=2)
        else:
            x = conv2d(upsample_nearest(x, 2), *blk["up"], padding=pad)
        if d == merge_block and gate != "off":
            if gate == "learned":
                gated, alpha = ag_forward(skip, gate_feat, state.ag)
            else:
                alpha = Tensor(np.ones((n, 1) + skip.shape[2:], dtype=skip.dtype))
                gated = mul(skip, alpha)
            x = add(x, gated)
        x = relu(conv2d(x, *blk["conv"], padding=pad))

    seg_prob = sigmoid(conv2d(x, *state.head))
    return seg_prob, edge_prob, alpha


def total_loss(seg_prob: Tensor, edge_prob: Tensor, mask, cfg: LossConfig, params: ParamStore) -> Tensor:
    """focal(seg, mask) + lambda_edge * bce(edge, pooled boundary) + l2(weights)."""
    mask_t = mask if isinstance(mask, Tensor) else Tensor(np.asarray(mask))
    seg_term = focal_bce_loss(seg_prob, mask_t, cfg)
    target = edge_target_from_mask(mask_t)
    eh = edge_prob.shape[2]
    mh = mask_t.shape[2]
    if mh % eh != 0:
        raise ValueError(f"total_loss: mask height {mh} not divisible by edge map height {eh}")
    pooled = pool_target(target, mh // eh)
    edge_term = mul(edge_loss(edge_prob, pooled), cfg.lambda_edge)
    reg_term = l2_penalty(params, cfg.lambda_reg)
    return add(add(seg_term, edge_term), reg_term)


def save_network(path, state: NetworkState, extra: dict | None = None) -> None:
    payload = {"config": state.config.to_dict()}
    if extra:
        payload.update(extra)
    save_checkpoint(path, state.params, extra=payload)


def load_network(path) -> NetworkState:
    params, extra = load_checkpoint(path)
    if "config" not in extra:
        raise ValueError(f"{path}: checkpoint has no embedded network config")
    config = NetworkConfig.from_dict(extra["config"])
    return wire_state(config, params)


def network_gradcheck(config: NetworkConfig, loss_cfg: LossConfig | None = None,
                      coords_per_param: int = 2, tol: float = 1e-2,
                      step: float = 1e-5, seed: int = 0) -> dict:
    """Compare 32-bit tape gradients against a float64 finite-difference
    shadow of the full composite loss, sampling a few coordinates per
    parameter tensor. Returns per-parameter worst relative errors.

    The step is small because relu and maxpool kinks make larger probes
    cross activation boundaries; the float64 shadow keeps the quotient
    accurate at this scale.
    """
    loss_cfg = loss_cfg or LossConfig(pos_weight=1.0)
    rng = np.random.default_rng(seed)
    state = build_network(config)
    n, c, s = 1, config.input_channels, config.input_size
    image_np = rng.uniform(0.0, 1.0, size=(n, c, s, s))
    mask_np = (rng.uniform(size=(n, 1, s, s)) > 0.7).astype(np.float64)

    image32 = Tensor(image_np.astype(np.float32))
    seg, edge, _ = forward(state, image32)
    loss32 = total_loss(seg, edge, Tensor(mask_np.astype(np.float32)), loss_cfg, state.params)
    loss32.backward()
    grads32 = {name: t.grad.copy() for name, t in state.params.items()}

    params64 = state.params.copy(dtype=np.float64)
    for _, t in params64.items():
        t.requires_grad = False
    shadow = wire_state(config, params64)
    image64 = Tensor(image_np)
    mask64 = Tensor(mask_np)

    def probe() -> float:
        sp, ep, _ = forward(shadow, image64)
        return total_loss(sp, ep, mask64, loss_cfg, params64).item()

    report = {"per_param": {}, "tolerance": tol}
    worst = 0.0
    for name, t in params64.items():
        flat = t.data.ravel()
        g32 = grads32[name].ravel()
        idx = rng.choice(flat.size, size=min(coords_per_param, flat.size), replace=False)
        rel_worst = 0.0
        for i in idx:
            orig = flat[i]
            flat[i] = orig + step
            fp = probe()
            flat[i] = orig - step
            fm = probe()
            flat[i] = orig
            fd = (fp - fm) / (2.0 * step)
            denom = max(abs(fd), abs(float(g32[i])), 1e-4)
            rel_worst = max(rel_worst, abs(fd - float(g32[i])) / denom)
        report["per_param"][name] = rel_worst
        worst = max(worst, rel_worst)
    report["max_rel_error"] = worst
    report["passed"] = worst < tol
    return report


def toy_config(**overrides) -> NetworkConfig:
    """Small config for fast tests: [4,4,4,4] filters, 32x32 single channel."""
    base = dict(input_channels=1, input_size=32,
                encoder_filters=(4, 4, 4, 4), decoder_filters=(4, 4, 4, 4),
                base_filter_scale=1.0, seed=0)
    base.update(overrides)
    return NetworkConfig(**base)
