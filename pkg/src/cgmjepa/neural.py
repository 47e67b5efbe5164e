"""Small transformer substrate on top of torch autograd: convolutional patch
embedder, pre-norm blocks, sinusoidal positions, clipped Adam with a warmup +
step-decay schedule, and EMA parameter tracking.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import torch
from torch import nn


@dataclass(frozen=True)
class EncoderConfig:
    embed_dim: int = 96
    heads: int = 6
    layers: int = 3
    patch_size: int = 12
    conv_kernel: int = 3
    dropout: float = 0.0
    max_patches: int = 24
    bias: bool = True
    # fixed unit rescale of mg/dL inputs (not fitted, not per subject)
    input_scale: float = 0.01
    mlp_ratio: int = 2

    def __post_init__(self):
        if self.embed_dim % self.heads:
            raise ValueError("embed_dim must be divisible by heads")
        if self.dropout != 0.0:
            raise ValueError("only dropout=0.0 is supported")


@dataclass(frozen=True)
class PredictorConfig:
    embed_dim: int = 48
    heads: int = 2
    layers: int = 1
    mlp_ratio: int = 2

    def __post_init__(self):
        if self.embed_dim % self.heads:
            raise ValueError("embed_dim must be divisible by heads")


def sinusoidal_positions(P: int, dim: int, dtype=torch.float32) -> torch.Tensor:
    """Interleaved sin/cos table: row p = (sin(p w_0), cos(p w_0), sin(p w_1), ...)."""
    pos = torch.arange(P, dtype=torch.float64)[:, None]
    i = torch.arange(0, dim, 2, dtype=torch.float64)
    freq = torch.exp(-math.log(10000.0) * i / dim)
    pe = torch.zeros(P, dim, dtype=torch.float64)
    pe[:, 0::2] = torch.sin(pos * freq)
    pe[:, 1::2] = torch.cos(pos * freq)[:, : dim // 2]
    return pe.to(dtype)


class PatchEmbed(nn.Module):
    """Per-patch 1-d convolution (kernel 3, same padding) to ``embed_dim``
    channels, averaged over the in-patch positions."""

    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.input_scale = cfg.input_scale
        self.conv = nn.Conv1d(1, cfg.embed_dim, cfg.conv_kernel,
                              padding=cfg.conv_kernel // 2, bias=cfg.bias)

    def forward(self, tokens: torch.Tensor) -> torch.Tensor:
        # tokens: (B, P, patch_size)
        B, P, S = tokens.shape
        x = (tokens * self.input_scale).reshape(B * P, 1, S)
        return self.conv(x).mean(dim=-1).reshape(B, P, -1)


class MultiHeadSelfAttention(nn.Module):
    def __init__(self, dim: int, heads: int, bias: bool = True):
        super().__init__()
        self.heads = heads
        self.qkv = nn.Linear(dim, 3 * dim, bias=bias)
        self.proj = nn.Linear(dim, dim, bias=bias)

    def forward(self, x, return_weights: bool = False):
        B, N, D = x.shape
        h = self.heads
        q, k, v = self.qkv(x).reshape(B, N, 3, h, D // h).permute(2, 0, 3, 1, 4)
        att = (q @ k.transpose(-2, -1)) / math.sqrt(D // h)
        att = att.softmax(dim=-1)
        out = (att @ v).transpose(1, 2).reshape(B, N, D)
        out = self.proj(out)
        return (out, att) if return_weights else out


class Block(nn.Module):
    """Pre-norm block: x + MHA(LN(x)), then + MLP(LN(.))."""

    def __init__(self, dim: int, heads: int, mlp_ratio: int = 2, bias: bool = True):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = MultiHeadSelfAttention(dim, heads, bias)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(nn.Linear(dim, mlp_ratio * dim, bias=bias), nn.GELU(),
                                 nn.Linear(mlp_ratio * dim, dim, bias=bias))

    def forward(self, x):
        x = x + self.attn(self.norm1(x))
        return x + self.mlp(self.norm2(x))


def transformer_block(x, block: Block):
    return block(x)


class PatchEncoder(nn.Module):
    """Patch tokens (B, N, patch_size) at positions (B, N) -> (B, N, embed_dim)."""

    def __init__(self, cfg: EncoderConfig = EncoderConfig(), use_positions: bool = True):
        super().__init__()
        self.cfg = cfg
        self.use_positions = use_positions
        self.embed = PatchEmbed(cfg)
        self.register_buffer("pos", sinusoidal_positions(cfg.max_patches, cfg.embed_dim), persistent=False)
        self.blocks = nn.ModuleList(Block(cfg.embed_dim, cfg.heads, cfg.mlp_ratio, cfg.bias)
                                    for _ in range(cfg.layers))
        self.norm = nn.LayerNorm(cfg.embed_dim)

    def forward(self, tokens, positions=None):
        B, N, _ = tokens.shape
        if N > self.cfg.max_patches:
            raise ValueError(f"{N} patches exceed max_patches={self.cfg.max_patches}")
        x = self.embed(tokens)
        if self.use_positions:
            if positions is None:
                positions = torch.arange(N).expand(B, N)
            x = x + self.pos.to(x.dtype)[positions]
        for blk in self.blocks:
            x = blk(x)
        return self.norm(x)


class Predictor(nn.Module):
    """Narrow transformer over projected context tokens plus positional mask
    tokens; emits one encoder-width vector per masked position."""

    def __init__(self, enc_dim: int, cfg: PredictorConfig = PredictorConfig(), max_patches: int = 24):
        super().__init__()
        self.cfg = cfg
        self.in_proj = nn.Linear(enc_dim, cfg.embed_dim)
        self.mask_token = nn.Parameter(torch.zeros(cfg.embed_dim))
        nn.init.trunc_normal_(self.mask_token, std=0.02)
        self.register_buffer("pos", sinusoidal_positions(max_patches, cfg.embed_dim), persistent=False)
        self.blocks = nn.ModuleList(Block(cfg.embed_dim, cfg.heads, cfg.mlp_ratio)
                                    for _ in range(cfg.layers))
        self.norm = nn.LayerNorm(cfg.embed_dim)
        self.out_proj = nn.Linear(cfg.embed_dim, enc_dim)

    def forward(self, ctx, ctx_pos, tgt_pos):
        pos = self.pos.to(ctx.dtype)
        x = self.in_proj(ctx) + pos[ctx_pos]
        m = self.mask_token.to(ctx.dtype) + pos[tgt_pos]
        x = torch.cat([x, m], dim=1)
        for blk in self.blocks:
            x = blk(x)
        x = self.norm(x[:, ctx.shape[1]:])
        return self.out_proj(x)


# ---------------------------------------------------------------------------
# gradients and optimisation


class NonFiniteError(FloatingPointError):
    pass


def backward(loss: torch.Tensor, params) -> list[torch.Tensor]:
    """Reverse-mode gradients of scalar ``loss``; unused parameters get zeros."""
    params = list(params)
    if not torch.isfinite(loss).item():
        raise NonFiniteError(f"non-finite loss {loss.item()!r}")
    grads = torch.autograd.grad(loss, params, allow_unused=True)
    return [torch.zeros_like(p) if g is None else g for p, g in zip(params, grads)]


@dataclass
class OptimState:
    base_lr: float = 1e-4
    warmup_ratio: float = 0.15
    step_size: int = 100
    gamma: float = 0.99
    clip_norm: float = 1.0
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    total_steps: int = 1
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)

    def init_moments(self, params):
        self.m = [torch.zeros_like(p) for p in params]
        self.v = [torch.zeros_like(p) for p in params]
        return self


def warmup_end(total_steps: int, warmup_ratio: float) -> int:
    return int(math.floor(warmup_ratio * total_steps))


def lr_at(step: int, total_steps: int, opt: OptimState) -> float:
    """Linear warmup to base_lr, then base_lr * gamma ** floor((step - warmup) / step_size)."""
    if not 0 <= step < total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps})")
    w = warmup_end(total_steps, opt.warmup_ratio)
    if step < w:
        return opt.base_lr * step / w
    return opt.base_lr * opt.gamma ** ((step - w) // opt.step_size)


def clip_by_global_norm(grads, max_norm: float):
    total = math.sqrt(sum(float(g.double().pow(2).sum()) for g in grads))
    if total > max_norm:
        scale = max_norm / total
        grads = [g * scale for g in grads]
    return grads, total


@torch.no_grad()
def adam_step(params, grads, opt: OptimState, lr: float | None = None) -> float:
    """Clip to the global norm, then one bias-corrected Adam update in place.

    Returns the pre-clip gradient norm.
    """
    params = list(params)
    if len(params) != len(grads):
        raise ValueError("params and grads differ in length")
    for g in grads:
        if not torch.isfinite(g).all():
            raise NonFiniteError("non-finite gradient")
    if not opt.m:
        opt.init_moments(params)
    grads, norm = clip_by_global_norm(grads, opt.clip_norm)
    if lr is None:
        lr = lr_at(min(opt.step, opt.total_steps - 1), opt.total_steps, opt)
    b1, b2 = opt.betas
    t = opt.step + 1
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for p, g, m, v in zip(params, grads, opt.m, opt.v):
        if p.shape != g.shape:
            raise ValueError("parameter/gradient shape mismatch")
        m.mul_(b1).add_(g, alpha=1.0 - b1)
        v.mul_(b2).addcmul_(g, g, value=1.0 - b2)
        denom = (v / c2).sqrt_().add_(opt.eps)
        p.addcdiv_(m / c1, denom, value=-lr)
    opt.step += 1
    return norm


@torch.no_grad()
def ema_update(target_params, context_params, m: float) -> None:
    """target <- m * target + (1 - m) * context, in place."""
    for t, c in zip(target_params, context_params):
        if t.shape != c.shape:
            raise ValueError("EMA parameter shapes differ")
        t.mul_(m).add_(c, alpha=1.0 - m)

