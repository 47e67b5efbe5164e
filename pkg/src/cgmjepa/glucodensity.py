"""Glucodensity images: pairwise 2-d Gaussian KDEs of level, speed and
acceleration of a smoothed day window, tiled into ViT-style tokens, plus an
on-disk precompute cache.

Image layout: ``img[i, j, c]`` is the density of channel pair ``c`` at
``(xgrid[i], ygrid[j])``; the first variable of the pair runs along rows.
Token layout: tiles in row-major order, each tile flattened as (row, col, channel).
"""

from __future__ import annotations

import logging
import os
import struct
import tempfile
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import spline
from .views import PATCH_SIZE, WINDOW_LEN, DayWindow

log = logging.getLogger(__name__)

GRIDSIZE = 32
SPATIAL_PATCH = 8
N_TILES = (GRIDSIZE // SPATIAL_PATCH) ** 2  # 16
TOKEN_DIM = SPATIAL_PATCH * SPATIAL_PATCH * 3  # 192
SPLINE_LAMBDA = 1.0
PERCENTILES = (1.0, 99.0)
CHANNEL_PAIRS = ((0, 1), (0, 2), (1, 2))  # (G, G'), (G, G''), (G', G'')


class StaleCacheError(RuntimeError):
    """Cache was written under a different configuration fingerprint."""


@dataclass(frozen=True)
class GlucodensityImage:
    grid: np.ndarray  # (32, 32, 3)
    ranges: np.ndarray  # (3, 2, 2): pair, axis, (lo, hi)


def channels(window: DayWindow, lam: float = SPLINE_LAMBDA):
    """Level, speed and acceleration (per hour, per hour^2) of the smoothed window."""
    t = 5.0 * np.arange(WINDOW_LEN) / 60.0
    sf = spline.fit(t, window.values, lam)
    return sf(t, 0), sf(t, 1), sf(t, 2)


def _axis_grid(v, gridsize):
    lo, hi = np.percentile(v, PERCENTILES)
    return np.linspace(lo, hi, gridsize), (lo, hi)


def kde2d(xs, ys, gridsize: int = GRIDSIZE):
    """Scott-bandwidth Gaussian KDE on a percentile-trimmed grid, max-normalised.

    Returns ``(density, ranges)`` with ``density[i, j]`` at ``(xgrid[i], ygrid[j])``.
    An axis without spread collapses to its single value and drops out of the
    kernel; with no spread on either axis every cell is the occupied point and
    the channel is all ones.
    """
    data = np.vstack([np.asarray(xs, dtype=np.float64), np.asarray(ys, dtype=np.float64)])
    n = data.shape[1]
    if n < 2:
        raise ValueError("kde2d needs at least 2 samples")
    gx, rx = _axis_grid(data[0], gridsize)
    gy, ry = _axis_grid(data[1], gridsize)
    ranges = np.array([rx, ry])
    spread = np.array([np.ptp(data[0]) > 0, np.ptp(data[1]) > 0])
    if not spread.any():
        return np.ones((gridsize, gridsize)), ranges

    factor = n ** (-1.0 / 6.0)
    active = np.flatnonzero(spread)
    cov = np.atleast_2d(np.cov(data[active], ddof=1)) * factor ** 2
    if len(active) == 2 and np.linalg.matrix_rank(cov) < 2:
        cov = cov + np.eye(2) * 1e-9 * np.trace(cov)
    prec = np.linalg.inv(cov)

    grids = (gx, gy)
    if len(active) == 2:
        dx = gx[:, None, None] - data[0][None, None, :]
        dy = gy[None, :, None] - data[1][None, None, :]
        q = prec[0, 0] * dx * dx + 2.0 * prec[0, 1] * dx * dy + prec[1, 1] * dy * dy
        dens = np.exp(-0.5 * q).sum(axis=-1)
    else:
        a = active[0]
        d = grids[a][:, None] - data[a][None, :]
        prof = np.exp(-0.5 * prec[0, 0] * d * d).sum(axis=-1)
        dens = np.broadcast_to(prof[:, None] if a == 0 else prof[None, :],
                               (gridsize, gridsize)).copy()
    return dens / dens.max(), ranges


def build_image(window: DayWindow) -> GlucodensityImage:
    ch = channels(window)
    layers, ranges = [], []
    for a, b in CHANNEL_PAIRS:
        dens, rng_ = kde2d(ch[a], ch[b])
        layers.append(dens)
        ranges.append(rng_)
    return GlucodensityImage(np.stack(layers, axis=-1), np.array(ranges))


def patchify_image(img) -> np.ndarray:
    """(32, 32, 3) image -> (16, 192) tokens."""
    grid = img.grid if isinstance(img, GlucodensityImage) else np.asarray(img)
    if grid.shape != (GRIDSIZE, GRIDSIZE, 3):
        raise ValueError(f"expected a {GRIDSIZE}x{GRIDSIZE}x3 image, got {grid.shape}")
    t = GRIDSIZE // SPATIAL_PATCH
    tiles = grid.reshape(t, SPATIAL_PATCH, t, SPATIAL_PATCH, 3).transpose(0, 2, 1, 3, 4)
    return tiles.reshape(N_TILES, TOKEN_DIM).copy()


def unpatchify_image(tokens) -> np.ndarray:
    tokens = np.asarray(tokens)
    t = GRIDSIZE // SPATIAL_PATCH
    tiles = tokens.reshape(t, t, SPATIAL_PATCH, SPATIAL_PATCH, 3).transpose(0, 2, 1, 3, 4)
    return tiles.reshape(GRIDSIZE, GRIDSIZE, 3)


def window_tokens(window: DayWindow) -> np.ndarray:
    return patchify_image(build_image(window)).astype(np.float32)


# ---------------------------------------------------------------------------
# precompute cache
#
# Layout (little-endian):
#   b"GDCACHE\0" | u32 version | u32 gridsize | u32 spatial_patch | u32 patch_size
#   | u32 window | u32 n_entries
#   then per entry: u32 key_len | key utf-8 (subject_id) | u32 split_idx
#   | u32 n_tokens | u32 token_dim | float32[n_tokens * token_dim]
# Entries are sorted by (subject_id, split_idx).

MAGIC = b"GDCACHE\0"
VERSION = 1
FINGERPRINT = (GRIDSIZE, SPATIAL_PATCH, PATCH_SIZE, WINDOW_LEN)


class GdCache:
    def __init__(self, path, fingerprint=FINGERPRINT):
        self.path = Path(path)
        self.fingerprint = tuple(fingerprint)
        self.entries: dict[tuple[str, int], np.ndarray] = {}
        if self.path.exists():
            self._read()

    def __len__(self):
        return len(self.entries)

    def __contains__(self, key):
        return tuple(key) in self.entries

    def __getitem__(self, key) -> np.ndarray:
        try:
            return self.entries[tuple(key)]
        except KeyError:
            raise KeyError(f"no Glucodensity entry for {key}; run precompute-gd") from None

    def _read(self):
        raw = self.path.read_bytes()
        if raw[:8] != MAGIC:
            raise ValueError(f"{self.path}: not a Glucodensity cache")
        version, *fp, n = struct.unpack_from("<6I", raw, 8)
        if version != VERSION or tuple(fp) != self.fingerprint:
            raise StaleCacheError(
                f"{self.path}: cache fingerprint {tuple(fp)} (v{version}) does not match "
                f"{self.fingerprint} (v{VERSION}); delete it and rerun precompute-gd")
        off = 8 + 24
        for _ in range(n):
            (klen,) = struct.unpack_from("<I", raw, off)
            off += 4
            sid = raw[off:off + klen].decode("utf-8")
            off += klen
            split_idx, nt, dim = struct.unpack_from("<3I", raw, off)
            off += 12
            arr = np.frombuffer(raw, dtype="<f4", count=nt * dim, offset=off).reshape(nt, dim)
            off += 4 * nt * dim
            self.entries[(sid, int(split_idx))] = arr.astype(np.float32)

    def to_bytes(self) -> bytes:
        parts = [MAGIC, struct.pack("<6I", VERSION, *self.fingerprint, len(self.entries))]
        for (sid, split_idx) in sorted(self.entries):
            arr = np.ascontiguousarray(self.entries[(sid, split_idx)], dtype="<f4")
            key = sid.encode("utf-8")
            parts.append(struct.pack("<I", len(key)))
            parts.append(key)
            parts.append(struct.pack("<3I", split_idx, *arr.shape))
            parts.append(arr.tobytes())
        return b"".join(parts)

    def write(self):
        self.path.parent.mkdir(parents=True, exist_ok=True)
        fd, tmp = tempfile.mkstemp(dir=self.path.parent, prefix=".gdcache-")
        with os.fdopen(fd, "wb") as fh:
            fh.write(self.to_bytes())
        os.replace(tmp, self.path)


def precompute_cache(corpus, cache: GdCache, workers: int = 1) -> GdCache:
    """Fill ``cache`` for every window not yet present and write it to disk."""
    todo = [w for w in corpus if w.key not in cache]
    if todo:
        if workers > 1 and len(todo) > 1:
            with ProcessPoolExecutor(max_workers=workers) as ex:
                results = list(ex.map(window_tokens, todo, chunksize=max(1, len(todo) // (4 * workers))))
        else:
            results = [window_tokens(w) for w in todo]
        for w, toks in zip(todo, results):
            cache.entries[w.key] = toks
        log.info("computed %d Glucodensity views (%d cached)", len(todo), len(cache) - len(todo))
    if todo or not cache.path.exists():
        cache.write()
    return cache
