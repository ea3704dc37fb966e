"""Fractal positive-pair synthesis and the streaming pair archive.

A pair is two composite images built from the same small set of IFS codes:
each code is rendered twice (independent iterations), colored, resized,
flipped and pasted at random locations, then both composites get standard
image-level augmentation. Pair i of an archive derives all randomness from
(master_seed, i), so worker count never changes the output bytes.
"""

from __future__ import annotations

import colorsys
import os
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .ifs import CodePool, iterate_ifs, render
from .seeding import make_rng

ARCHIVE_MAGIC = b"FPSA"
ARCHIVE_VERSION = 1
HEADER = struct.Struct("<4sIIIIQ")  # magic, version, width, height, channels, n_pairs


@dataclass
class PairParams:
    width: int = 32
    height: int = 32
    n_iters: int = 1000
    i_policy: str = "fixed"          # "fixed" (I=i_fixed) or "uniform" (I in i_range)
    i_fixed: int = 2
    i_range: tuple[int, int] = (2, 5)
    fractal_scale: tuple[float, float] = (0.5, 1.0)
    fractal_flip_prob: float = 0.5
    crop_scale: tuple[float, float] = (0.2, 1.0)
    jitter: float = 0.4
    flip_prob: float = 0.5
    # degenerate-mode switches used to pin pair generation down in tests
    duplicate_realizations: bool = False
    pin_paste: bool = False

    def record_size(self, n_codes: int) -> int:
        return 4 + 8 * n_codes + 2 * self.width * self.height * 3 * 4


@dataclass
class FpsPair:
    left: np.ndarray   # (H, W, 3) in [0, 1]
    right: np.ndarray
    code_ids: tuple[int, ...]

    def __post_init__(self):
        if self.left.shape != self.right.shape:
            raise ValueError("pair images must share dimensions")
        if len(set(self.code_ids)) != len(self.code_ids):
            raise ValueError("code ids must be distinct")


def bilinear_resize(img: np.ndarray, height: int, width: int) -> np.ndarray:
    """Bilinear resample (half-pixel centers); identity when sizes match."""
    h, w = img.shape[:2]
    ys = (np.arange(height) + 0.5) * h / height - 0.5
    xs = (np.arange(width) + 0.5) * w / width - 0.5
    y0 = np.clip(np.floor(ys).astype(np.intp), 0, h - 1)
    x0 = np.clip(np.floor(xs).astype(np.intp), 0, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    wy = np.clip(ys - y0, 0.0, 1.0)[:, None, None]
    wx = np.clip(xs - x0, 0.0, 1.0)[None, :, None]
    top = img[y0][:, x0] * (1 - wx) + img[y0][:, x1] * wx
    bot = img[y1][:, x0] * (1 - wx) + img[y1][:, x1] * wx
    return top * (1 - wy) + bot * wy


def _augment(img: np.ndarray, rng: np.random.Generator, params: PairParams) -> np.ndarray:
    """Random resized crop, color jitter, horizontal flip."""
    h, w = img.shape[:2]
    side = np.sqrt(rng.uniform(*params.crop_scale))
    ch = max(1, round(side * h))
    cw = max(1, round(side * w))
    y = int(rng.integers(0, h - ch + 1))
    x = int(rng.integers(0, w - cw + 1))
    img = bilinear_resize(img[y:y + ch, x:x + cw], h, w)
    j = params.jitter
    brightness, contrast, saturation = 1.0 + rng.uniform(-j, j, size=3)
    img = img * brightness
    img = img.mean() + contrast * (img - img.mean())
    gray = img.mean(axis=2, keepdims=True)
    img = gray + saturation * (img - gray)
    if rng.uniform() < params.flip_prob:
        img = img[:, ::-1]
    return np.clip(img, 0.0, 1.0)


def _draw_fractal(code, params: PairParams, rng: np.random.Generator):
    """One colored/resized/flipped realization plus its paste offset."""
    points = iterate_ifs(code, params.n_iters, rng)
    scale = rng.uniform(*params.fractal_scale)
    size = max(2, round(scale * min(params.width, params.height)))
    gray = render(points, size, size)
    if rng.uniform() < params.fractal_flip_prob:
        gray = gray[:, ::-1]
    color = np.array(colorsys.hsv_to_rgb(rng.uniform(), 1.0, 1.0))
    patch = gray[:, :, None] * color[None, None, :]
    if params.pin_paste:
        y = (params.height - size) // 2
        x = (params.width - size) // 2
    else:
        y = int(rng.integers(0, params.height - size + 1))
        x = int(rng.integers(0, params.width - size + 1))
    return patch, y, x


def compose_fps_pair(pool: CodePool, params: PairParams,
                     rng: np.random.Generator) -> FpsPair:
    """Draw I distinct codes and build the two composite views."""
    if len(pool) == 0:
        raise ValueError("code pool is empty")
    if params.i_policy == "fixed":
        n_codes = params.i_fixed
    elif params.i_policy == "uniform":
        n_codes = int(rng.integers(params.i_range[0], params.i_range[1] + 1))
    else:
        raise ValueError(f"unknown i_policy {params.i_policy!r}")
    idxs = rng.choice(len(pool), size=min(n_codes, len(pool)), replace=False)
    codes = [pool.codes[int(i)] for i in idxs]

    views = [np.zeros((params.height, params.width, 3)) for _ in range(2)]
    for code in codes:
        if params.duplicate_realizations:
            patch, y, x = _draw_fractal(code, params, rng)
            draws = [(patch, y, x)] * 2
        else:
            draws = [_draw_fractal(code, params, rng) for _ in range(2)]
        for view, (patch, y, x) in zip(views, draws):
            view[y:y + patch.shape[0], x:x + patch.shape[1]] += patch
    views = [np.clip(v, 0.0, 1.0) for v in views]
    views = [_augment(v, rng, params) for v in views]
    return FpsPair(left=views[0], right=views[1],
                   code_ids=tuple(int(c.id) for c in codes))


PAIR_STREAM_TAG = 0xFA12


def pair_for_index(pool: CodePool, params: PairParams, master_seed: int,
                   index: int) -> FpsPair:
    """Pair ``index`` of the stream defined by ``master_seed``."""
    return compose_fps_pair(pool, params, make_rng(master_seed, PAIR_STREAM_TAG, index))


def _encode_pair(pair: FpsPair) -> bytes:
    parts = [struct.pack("<I", len(pair.code_ids)),
             struct.pack(f"<{len(pair.code_ids)}Q", *pair.code_ids),
             pair.left.astype("<f4").tobytes(),
             pair.right.astype("<f4").tobytes()]
    return b"".join(parts)


def generate_archive(pool: CodePool, n_pairs: int, params: PairParams,
                     master_seed: int, path, n_workers: int = 1) -> None:
    """Write ``n_pairs`` records; output bytes are worker-count independent."""
    def job(i):
        return _encode_pair(pair_for_index(pool, params, master_seed, i))

    try:
        with open(path, "wb") as f:
            f.write(HEADER.pack(ARCHIVE_MAGIC, ARCHIVE_VERSION, params.width,
                                params.height, 3, n_pairs))
            if n_workers <= 1:
                for i in range(n_pairs):
                    f.write(job(i))
            else:
                with ThreadPoolExecutor(max_workers=n_workers) as pool_exec:
                    for rec in pool_exec.map(job, range(n_pairs)):
                        f.write(rec)
    except Exception:
        if os.path.exists(path):
            os.remove(path)
        raise


class ArchiveError(RuntimeError):
    pass


def read_archive(path):
    """Yield (left, right, code_ids) records after validating the header."""
    with open(path, "rb") as f:
        head = f.read(HEADER.size)
        if len(head) < HEADER.size:
            raise ArchiveError("truncated header")
        magic, version, width, height, channels, n_pairs = HEADER.unpack(head)
        if magic != ARCHIVE_MAGIC or version != ARCHIVE_VERSION:
            raise ArchiveError(f"bad magic/version: {magic!r} v{version}")
        img_bytes = width * height * channels * 4
        for i in range(n_pairs):
            raw = f.read(4)
            if len(raw) < 4:
                raise ArchiveError(f"truncated record {i}")
            (n_codes,) = struct.unpack("<I", raw)
            body = f.read(8 * n_codes + 2 * img_bytes)
            if len(body) < 8 * n_codes + 2 * img_bytes:
                raise ArchiveError(f"truncated record {i}")
            ids = struct.unpack(f"<{n_codes}Q", body[:8 * n_codes])
            shape = (height, width, channels)
            left = np.frombuffer(body[8 * n_codes:8 * n_codes + img_bytes],
                                 dtype="<f4").reshape(shape)
            right = np.frombuffer(body[8 * n_codes + img_bytes:],
                                  dtype="<f4").reshape(shape)
            yield left.astype(np.float64), right.astype(np.float64), ids


def archive_info(path):
    with open(path, "rb") as f:
        head = f.read(HEADER.size)
    if len(head) < HEADER.size:
        raise ArchiveError("truncated header")
    magic, version, width, height, channels, n_pairs = HEADER.unpack(head)
    if magic != ARCHIVE_MAGIC or version != ARCHIVE_VERSION:
        raise ArchiveError(f"bad magic/version: {magic!r} v{version}")
    return {"width": width, "height": height, "channels": channels,
            "n_pairs": n_pairs}
