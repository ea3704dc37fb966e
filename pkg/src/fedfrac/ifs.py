"""Iterated function systems: code sampling, point iteration, rendering.

An IFS code is a small set of 2x2 affine maps with selection probabilities.
Iterating the maps from a start point traces a fractal point cloud which is
then accumulated onto a grayscale canvas.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .seeding import make_rng, mix64

try:
    from . import _ifs_kernel as _kernel

    KERNEL_BACKEND = "cython"
except ImportError:  # compiled extension not built; identical results, slower
    from . import _ifs_fallback as _kernel

    KERNEL_BACKEND = "python"

# divergence guard: a contractive code never gets anywhere near this
COORD_LIMIT = 1e6

# acceptance band on the per-map mean singular-value sum, applied after
# scale jittering; configurable because the upstream sampling scheme does
# not pin it down
DEFAULT_BAND = (1.0, 1.3)
SCALE_JITTER = (0.9, 1.1)
PROB_FLOOR = 0.01
MAX_REJECTIONS = 10_000
BURN_IN = 100


class IfsSamplingError(RuntimeError):
    """Raised when code sampling cannot satisfy the acceptance band."""


class DivergentIfsError(RuntimeError):
    """Raised when iteration escapes the coordinate guard."""


@dataclass(frozen=True)
class AffineMap:
    a: np.ndarray  # (2, 2)
    b: np.ndarray  # (2,)
    p: float

    def __post_init__(self):
        if self.p < 0 or not np.isfinite(self.a).all() or not np.isfinite(self.b).all():
            raise ValueError("affine map must have finite entries and p >= 0")


@dataclass(frozen=True)
class IfsCode:
    maps: tuple[AffineMap, ...]
    id: int

    def __post_init__(self):
        k = len(self.maps)
        if k not in (2, 3, 4):
            raise ValueError(f"map count must be in {{2,3,4}}, got {k}")
        total = sum(m.p for m in self.maps)
        if abs(total - 1.0) > 1e-12:
            raise ValueError(f"probabilities sum to {total}, expected 1")

    @property
    def a_stack(self) -> np.ndarray:
        return np.ascontiguousarray(np.stack([m.a for m in self.maps]))

    @property
    def b_stack(self) -> np.ndarray:
        return np.ascontiguousarray(np.stack([m.b for m in self.maps]))

    @property
    def probs(self) -> np.ndarray:
        return np.array([m.p for m in self.maps])


@dataclass
class CodePool:
    codes: list[IfsCode]
    master_seed: int

    def __len__(self):
        return len(self.codes)


def singular_value_sum(a: np.ndarray) -> float:
    """sigma_1 + sigma_2 of a 2x2 matrix."""
    return float(np.linalg.svd(a, compute_uv=False).sum())


def sample_ifs_code(rng: np.random.Generator, code_id: int = 0,
                    band: tuple[float, float] = DEFAULT_BAND) -> IfsCode:
    """Rejection-sample one IFS code inside the contractivity band.

    Matrix entries are U(-1,1), each map is scale-jittered, probabilities
    are proportional to |det| with a floor. Accepts iff the per-map mean
    singular-value sum lies in ``band``.
    """
    lo, hi = band
    for _ in range(MAX_REJECTIONS):
        k = int(rng.integers(2, 5))
        mats = rng.uniform(-1.0, 1.0, size=(k, 2, 2))
        offs = rng.uniform(-1.0, 1.0, size=(k, 2))
        jitter = rng.uniform(*SCALE_JITTER, size=k)
        mats = mats * jitter[:, None, None]
        svs = [np.linalg.svd(mats[i], compute_uv=False) for i in range(k)]
        sv_mean = float(np.mean([s.sum() for s in svs]))
        # every map strictly contractive: the band alone still admits a map
        # with sigma_1 > 1 whose repeated selection diverges
        if not (lo <= sv_mean <= hi) or max(s[0] for s in svs) >= 1.0:
            continue
        dets = np.abs(np.linalg.det(mats)) + PROB_FLOOR
        probs = dets / dets.sum()
        maps = tuple(AffineMap(a=mats[i], b=offs[i], p=float(probs[i]))
                     for i in range(k))
        return IfsCode(maps=maps, id=code_id)
    raise IfsSamplingError(
        f"no code accepted after {MAX_REJECTIONS} draws; band {band} is "
        "likely misconfigured")


def build_code_pool(n_codes: int, master_seed: int,
                    band: tuple[float, float] = DEFAULT_BAND) -> CodePool:
    """Pre-sample a pool of codes; regeneration from the seed is identical."""
    codes = []
    for i in range(n_codes):
        rng = make_rng(master_seed, 0xC0DE, i)
        codes.append(sample_ifs_code(rng, code_id=mix64(master_seed, i), band=band))
    return CodePool(codes=codes, master_seed=master_seed)


def save_code_pool(pool: CodePool, path) -> None:
    ks = np.array([len(c.maps) for c in pool.codes], dtype=np.int64)
    np.savez(path,
             a=np.concatenate([c.a_stack for c in pool.codes]) if pool.codes
             else np.zeros((0, 2, 2)),
             b=np.concatenate([c.b_stack for c in pool.codes]) if pool.codes
             else np.zeros((0, 2)),
             p=np.concatenate([c.probs for c in pool.codes]) if pool.codes
             else np.zeros(0),
             ids=np.array([c.id for c in pool.codes], dtype=np.uint64),
             ks=ks, master_seed=np.uint64(pool.master_seed))


def load_code_pool(path) -> CodePool:
    data = np.load(path)
    codes, off = [], 0
    for i, k in enumerate(data["ks"]):
        k = int(k)
        maps = tuple(AffineMap(a=data["a"][off + j], b=data["b"][off + j],
                               p=float(data["p"][off + j])) for j in range(k))
        codes.append(IfsCode(maps=maps, id=int(data["ids"][i])))
        off += k
    return CodePool(codes=codes, master_seed=int(data["master_seed"]))


def iterate_ifs(code: IfsCode, n_iters: int, rng: np.random.Generator,
                burn_in: int = BURN_IN, v0=(0.0, 0.0)) -> np.ndarray:
    """Run the chaos game for ``n_iters`` recorded points.

    Map k at each step is drawn with probability p_k; the first ``burn_in``
    points after v0 are discarded to forget the start point.
    """
    if n_iters < 1:
        raise ValueError("n_iters must be >= 1")
    n_total = n_iters + burn_in
    choices = rng.choice(len(code.maps), size=n_total, p=code.probs).astype(np.int64)
    points, diverged_at = _kernel.iterate_points(
        code.a_stack, code.b_stack, choices, float(v0[0]), float(v0[1]),
        burn_in, COORD_LIMIT)
    if diverged_at >= 0:
        raise DivergentIfsError(
            f"coordinate exceeded {COORD_LIMIT:g} at step {diverged_at}; "
            "non-contractive code escaped the acceptance filter")
    return points


def render(points: np.ndarray, width: int, height: int,
           gain: float = 0.25) -> np.ndarray:
    """Accumulate points onto a black canvas, values clamped to [0,1].

    The point bounding box is mapped affinely to the central 90% of the
    canvas; a degenerate (single-point) box renders one centered pixel.
    """
    points = np.asarray(points, dtype=np.float64)
    if points.ndim != 2 or points.shape[0] < 1:
        raise ValueError("need at least one 2-d point")
    canvas = np.zeros((height, width), dtype=np.float64)
    mins = points.min(axis=0)
    maxs = points.max(axis=0)
    span = maxs - mins
    if span[0] == 0.0 and span[1] == 0.0:
        canvas[height // 2, width // 2] = min(gain * points.shape[0], 1.0)
        return canvas
    span = np.where(span == 0.0, 1.0, span)
    unit = (points - mins) / span
    xs = np.rint(0.05 * (width - 1) + unit[:, 0] * 0.9 * (width - 1)).astype(np.intp)
    ys = np.rint(0.05 * (height - 1) + unit[:, 1] * 0.9 * (height - 1)).astype(np.intp)
    np.add.at(canvas, (ys, xs), gain)
    np.clip(canvas, 0.0, 1.0, out=canvas)
    return canvas
