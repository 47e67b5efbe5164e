"""CGM-JEPA / X-CGM-JEPA: masked latent prediction over hourly patches with an
optional cross-view Glucodensity objective, the pretraining loop and
checkpoint files.
"""

from __future__ import annotations

import copy
import hashlib
import json
import logging
import math
import os
import struct
import tempfile
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import nn

from . import __version__
from .data import make_rng
from .glucodensity import N_TILES, TOKEN_DIM
from .neural import (Block, EncoderConfig, OptimState, PatchEncoder, Predictor,
                     PredictorConfig, adam_step, backward, ema_update, lr_at,
                     sinusoidal_positions, NonFiniteError)
from .views import PATCHES_PER_DAY, mask_count

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class GlucoConfig:
    token_dim: int = TOKEN_DIM
    n_tokens: int = N_TILES
    embed_dim: int = 96
    heads: int = 6
    layers: int = 1
    mlp_ratio: int = 2


@dataclass(frozen=True)
class ModelConfig:
    encoder: EncoderConfig = EncoderConfig()
    predictor: PredictorConfig = PredictorConfig()
    gluco: GlucoConfig = GlucoConfig()
    mode: str = "cross"

    def __post_init__(self):
        if self.mode not in ("vanilla", "cross"):
            raise ValueError("mode must be 'vanilla' or 'cross'")
        if self.gluco.embed_dim != self.encoder.embed_dim:
            raise ValueError("gluco embed_dim must equal the encoder embed_dim")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(EncoderConfig(**d["encoder"]), PredictorConfig(**d["predictor"]),
                   GlucoConfig(**d["gluco"]), d["mode"])


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 100
    batch_size: int = 128
    seed: int = 43
    mask_ratio: float = 0.25
    lam: float = 1.0
    ema_momentum: float = 0.997
    stride: int = 288
    base_lr: float = 1e-4
    warmup_ratio: float = 0.15
    step_size: int = 100
    gamma: float = 0.99
    clip_norm: float = 1.0
    ipe_scale: float = 1.25

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError("lambda must be >= 0")
        if not 0 < self.mask_ratio < 1:
            raise ValueError("mask_ratio must lie in (0, 1)")
        if not 0 <= self.ema_momentum <= 1:
            raise ValueError("ema_momentum must lie in [0, 1]")

    def scheduled_steps(self, n_windows: int) -> int:
        """Schedule horizon: epochs * batches per epoch * ipe_scale."""
        per_epoch = math.ceil(n_windows / self.batch_size)
        return max(1, int(math.ceil(self.epochs * per_epoch * self.ipe_scale)))


@dataclass
class LossBreakdown:
    l_cgm: torch.Tensor
    l_gd: torch.Tensor
    l_total: torch.Tensor

    def item(self) -> tuple[float, float, float]:
        return float(self.l_cgm.detach()), float(self.l_gd.detach()), float(self.l_total.detach())


class GlucoEncoder(nn.Module):
    """Transformer over a subset of Glucodensity tile tokens, mean-pooled."""

    def __init__(self, cfg: GlucoConfig = GlucoConfig()):
        super().__init__()
        self.cfg = cfg
        self.use_positions = True
        self.embed = nn.Linear(cfg.token_dim, cfg.embed_dim)
        self.register_buffer("pos", sinusoidal_positions(cfg.n_tokens, cfg.embed_dim), persistent=False)
        self.blocks = nn.ModuleList(Block(cfg.embed_dim, cfg.heads, cfg.mlp_ratio)
                                    for _ in range(cfg.layers))
        self.norm = nn.LayerNorm(cfg.embed_dim)

    def forward(self, tokens, positions):
        x = self.embed(tokens)
        if self.use_positions:
            x = x + self.pos.to(x.dtype)[positions]
        for blk in self.blocks:
            x = blk(x)
        return self.norm(x).mean(dim=1)


class CrossPredictor(nn.Module):
    def __init__(self, dim: int):
        super().__init__()
        self.net = nn.Sequential(nn.Linear(dim, dim), nn.GELU(), nn.Linear(dim, dim))

    def forward(self, z):
        return self.net(z)


class ModelState(nn.Module):
    """Context encoder, EMA target encoder, predictor and (cross mode) the
    Glucodensity encoder and cross-view predictor."""

    def __init__(self, cfg: ModelConfig = ModelConfig(), seed: int = 43):
        super().__init__()
        self.cfg = cfg
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            self.context_encoder = PatchEncoder(cfg.encoder)
            self.predictor = Predictor(cfg.encoder.embed_dim, cfg.predictor, cfg.encoder.max_patches)
            self.gluco_encoder = GlucoEncoder(cfg.gluco)
            self.cross_predictor = CrossPredictor(cfg.encoder.embed_dim)
        self.target_encoder = copy.deepcopy(self.context_encoder)
        for p in self.target_encoder.parameters():
            p.requires_grad_(False)

    @property
    def mode(self) -> str:
        return self.cfg.mode

    def trainable(self) -> list[tuple[str, nn.Parameter]]:
        mods = ["context_encoder", "predictor"]
        if self.mode == "cross":
            mods += ["gluco_encoder", "cross_predictor"]
        return [(f"{m}.{n}", p) for m in mods for n, p in getattr(self, m).named_parameters()]


def _gather(x, idx):
    """x: (B, N, ...) rows selected per batch element by idx (B, K)."""
    return x[torch.arange(x.shape[0])[:, None], idx]


def forward_cgm(state: ModelState, tokens, masked, visible):
    """Returns (pooled context embedding, predictions, detached targets).

    tokens (B, P, 12); masked (B, K) and visible (B, P-K) index tensors.
    """
    ctx = state.context_encoder(_gather(tokens, visible), visible)
    with torch.no_grad():
        full = state.target_encoder(tokens)
        z_tgt = _gather(full, masked)
    z_hat = state.predictor(ctx, visible, masked)
    return ctx.mean(dim=1), z_hat, z_tgt.detach()


def forward_gluco(state: ModelState, gtokens, gmasked):
    """Encode only the masked-out Glucodensity tokens (gradients flow)."""
    return state.gluco_encoder(_gather(gtokens, gmasked), gmasked)


def loss_cgm(z_hat, z_tgt):
    return (z_hat - z_tgt).abs().mean()


def loss_gd(u_hat, u):
    return (u_hat - u).abs().mean()


def compute_losses(state: ModelState, tokens, masked, visible, lam: float,
                   gtokens=None, gmasked=None) -> LossBreakdown:
    z_ctx, z_hat, z_tgt = forward_cgm(state, tokens, masked, visible)
    l_cgm = loss_cgm(z_hat, z_tgt)
    if state.mode == "vanilla":
        l_gd = torch.zeros((), dtype=l_cgm.dtype)
        return LossBreakdown(l_cgm, l_gd, l_cgm)
    u = forward_gluco(state, gtokens, gmasked)
    l_gd = loss_gd(state.cross_predictor(z_ctx), u)
    return LossBreakdown(l_cgm, l_gd, l_cgm + lam * l_gd)


def batch_masks(n: int, P: int, ratio: float, rng: np.random.Generator):
    """Fresh per-sample masks: (masked, visible) long tensors of shape (n, K), (n, P-K)."""
    k = mask_count(P, ratio)
    masked = np.empty((n, k), dtype=np.int64)
    visible = np.empty((n, P - k), dtype=np.int64)
    for i in range(n):
        perm = rng.permutation(P)
        masked[i] = np.sort(perm[:k])
        visible[i] = np.sort(perm[k:])
    return torch.from_numpy(masked), torch.from_numpy(visible)


@dataclass
class TrainResult:
    state: ModelState
    history: list[dict] = field(default_factory=list)  # one row per epoch
    step_losses: list[float] = field(default_factory=list)


def train(state: ModelState, windows, gd_tokens, cfg: TrainConfig, target_trace=None) -> TrainResult:
    """Pretrain in place.

    ``windows``: (N, 24, 12) array of day-window tokens. ``gd_tokens``: (N, 16, 192)
    Glucodensity tokens aligned with ``windows`` (ignored in vanilla mode).
    ``target_trace`` is an optional callback invoked after every step. Inputs are
    cast to the dtype of the model parameters.
    """
    dtype = next(state.parameters()).dtype
    x_all = torch.as_tensor(np.asarray(windows), dtype=dtype)
    n, P = x_all.shape[0], x_all.shape[1]
    if state.mode == "cross":
        if gd_tokens is None or len(gd_tokens) != n:
            raise ValueError("cross mode needs one Glucodensity entry per window")
        g_all = torch.as_tensor(np.asarray(gd_tokens), dtype=dtype)
        G = g_all.shape[1]
    rng = make_rng(cfg.seed)
    named = state.trainable()
    params = [p for _, p in named]
    opt = OptimState(base_lr=cfg.base_lr, warmup_ratio=cfg.warmup_ratio, step_size=cfg.step_size,
                     gamma=cfg.gamma, clip_norm=cfg.clip_norm,
                     total_steps=cfg.scheduled_steps(n)).init_moments(params)
    ctx_params = list(state.context_encoder.parameters())
    tgt_params = list(state.target_encoder.parameters())
    result = TrainResult(state)
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        sums = np.zeros(3)
        for start in range(0, n, cfg.batch_size):
            idx = torch.from_numpy(order[start:start + cfg.batch_size])
            masked, visible = batch_masks(len(idx), P, cfg.mask_ratio, rng)
            if state.mode == "cross":
                gmasked, _ = batch_masks(len(idx), G, cfg.mask_ratio, rng)
                losses = compute_losses(state, x_all[idx], masked, visible, cfg.lam, g_all[idx], gmasked)
            else:
                losses = compute_losses(state, x_all[idx], masked, visible, cfg.lam)
            try:
                grads = backward(losses.l_total, params)
            except NonFiniteError as exc:
                raise NonFiniteError(f"epoch {epoch} step {opt.step}: {exc}") from None
            lr = lr_at(min(opt.step, opt.total_steps - 1), opt.total_steps, opt)
            adam_step(params, grads, opt, lr)
            ema_update(tgt_params, ctx_params, cfg.ema_momentum)
            vals = losses.item()
            sums += np.array(vals) * len(idx)
            result.step_losses.append(vals[2])
            if target_trace is not None:
                target_trace(state)
        mean = sums / n
        result.history.append({"epoch": epoch + 1, "l_cgm": mean[0], "l_gd": mean[1],
                               "l_total": mean[2], "lr": lr})
        log.debug("epoch %d: L_total=%.5f", epoch + 1, mean[2])
    return result


@torch.no_grad()
def encode(encoder: PatchEncoder, tokens) -> torch.Tensor:
    """Frozen forward over all patches; (B, P, 12) -> per-patch (B, P, D)."""
    x = torch.as_tensor(np.asarray(tokens, dtype=np.float32))
    if x.ndim == 2:
        x = x[None]
    return encoder(x)


# ---------------------------------------------------------------------------
# checkpoints
#
# Layout (little-endian): b"CGMJEPA\0" | u32 version | u32 header_len | header JSON
# (sorted keys: model config, train config, metadata, tool version)
# | u32 n_params | per param: u32 name_len | name | u32 ndim | u32 dims[ndim]
# | float32 data.

CKPT_MAGIC = b"CGMJEPA\0"
CKPT_VERSION = 1


class CheckpointError(ValueError):
    pass


def _state_tensors(state: ModelState):
    return [(n, p.detach()) for n, p in state.state_dict().items()]


def checkpoint_bytes(state: ModelState, train_cfg: TrainConfig | None = None, metadata=None) -> bytes:
    header = {
        "model": state.cfg.to_dict(),
        "train": asdict(train_cfg) if train_cfg is not None else None,
        "metadata": metadata or {},
        "version": __version__,
    }
    hb = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    parts = [CKPT_MAGIC, struct.pack("<II", CKPT_VERSION, len(hb)), hb]
    tensors = _state_tensors(state)
    parts.append(struct.pack("<I", len(tensors)))
    for name, t in tensors:
        nb = name.encode("utf-8")
        arr = np.ascontiguousarray(t.cpu().numpy(), dtype="<f4")
        parts.append(struct.pack("<I", len(nb)) + nb)
        parts.append(struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
        parts.append(arr.tobytes())
    return b"".join(parts)


def save_checkpoint(path, state, train_cfg=None, metadata=None) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=".ckpt-")
    with os.fdopen(fd, "wb") as fh:
        fh.write(checkpoint_bytes(state, train_cfg, metadata))
    os.replace(tmp, path)


def read_checkpoint_header(path) -> dict:
    raw = Path(path).read_bytes()
    header, _ = _parse_header(raw, path)
    return header


def _parse_header(raw: bytes, path):
    if raw[:8] != CKPT_MAGIC:
        raise CheckpointError(f"{path}: not a CGM-JEPA checkpoint")
    version, hlen = struct.unpack_from("<II", raw, 8)
    if version != CKPT_VERSION:
        raise CheckpointError(f"{path}: checkpoint version {version}, expected {CKPT_VERSION}")
    header = json.loads(raw[16:16 + hlen].decode("utf-8"))
    return header, 16 + hlen


def load_checkpoint(path, expect: ModelConfig | None = None):
    """Return (state, train config or None, metadata). Nothing is returned on error."""
    raw = Path(path).read_bytes()
    header, off = _parse_header(raw, path)
    try:
        cfg = ModelConfig.from_dict(header["model"])
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointError(f"{path}: bad model config block: {exc}") from None
    if expect is not None and cfg != expect:
        raise CheckpointError(f"{path}: checkpoint config {cfg} does not match expected {expect}")
    state = ModelState(cfg)
    want = dict(state.state_dict())
    (n,) = struct.unpack_from("<I", raw, off)
    off += 4
    loaded = {}
    for _ in range(n):
        (nl,) = struct.unpack_from("<I", raw, off)
        off += 4
        name = raw[off:off + nl].decode("utf-8")
        off += nl
        (ndim,) = struct.unpack_from("<I", raw, off)
        off += 4
        shape = struct.unpack_from(f"<{ndim}I", raw, off)
        off += 4 * ndim
        count = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(raw, dtype="<f4", count=count, offset=off).reshape(shape)
        off += 4 * count
        if name not in want:
            raise CheckpointError(f"{path}: unexpected parameter {name!r}")
        if tuple(want[name].shape) != tuple(shape):
            raise CheckpointError(f"{path}: parameter {name!r} has shape {tuple(shape)}, "
                                  f"config implies {tuple(want[name].shape)}")
        loaded[name] = torch.from_numpy(arr.copy())
    missing = set(want) - set(loaded)
    if missing:
        raise CheckpointError(f"{path}: missing parameters {sorted(missing)[:5]}")
    state.load_state_dict(loaded)
    train_cfg = TrainConfig(**header["train"]) if header.get("train") else None
    return state, train_cfg, header.get("metadata", {})


def fingerprint(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()[:16]


def day_tokens(windows) -> np.ndarray:
    """Stack DayWindows into a (N, 24, 12) token array."""
    return np.stack([w.values.reshape(PATCHES_PER_DAY, -1) for w in windows])
