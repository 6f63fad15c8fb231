"""Fitting arbitrary-size radar maps to a ViT pre-trained on a 14x14 token grid.

The input-size-agnostic (ISA) path:

1. ``k = ceil(longer_side / 14)`` and ``side_extended = 14 * k``;
2. bilinearly stretch the map to ``side_extended x side_extended`` (both scale
   factors are >= 1, so nothing is down-sampled);
3. average the pre-trained RGB projection kernel over channels and resize it
   from 16x16 to ``k x k`` (interpolation when growing, area pooling when
   shrinking);
4. project non-overlapping ``k x k`` patches and add the untouched pre-trained
   14x14 positional embedding grid.

Three competing ways of feeding the same map are provided for comparison:
simple resizing to 224x224, stretched rectangular patches over a padded
input, and 16x16 patches with a cropped/interpolated PEV grid.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .domainmaps import DomainMap
from .resample import kernel_matrix, linear_matrix, resize_bilinear, resize_separable

__all__ = [
    "GRID",
    "K_ORIGINAL",
    "IMAGE_SIDE",
    "STRATEGIES",
    "PatchPlan",
    "ProjectionKernel",
    "PevGrid",
    "TokenSequence",
    "compute_patch_plan",
    "extend_and_resize",
    "average_kernel_channels",
    "adapt_kernel",
    "resize_kernel",
    "patchify",
    "patch_embed",
    "baseline_simple_resize",
    "patch_shape_for",
    "baseline_adjust_patch_shape",
    "pev_grid_shape_for",
    "manipulate_pev_grid",
    "baseline_manipulate_pev",
    "InputAdapter",
    "make_adapter",
]

GRID = 14
K_ORIGINAL = 16
IMAGE_SIDE = GRID * K_ORIGINAL  # 224
STRATEGIES = ("isa", "simple", "patchshape", "pevmanip")


def _as_array(x) -> np.ndarray:
    return x.data if isinstance(x, DomainMap) else np.asarray(x)


@dataclass(frozen=True)
class PatchPlan:
    k: int
    side_extended: int
    source_shape: tuple[int, int]
    num_patches_per_side: int = GRID

    @property
    def scale_factors(self) -> tuple[float, float]:
        r, c = self.source_shape
        return self.side_extended / r, self.side_extended / c


@dataclass
class ProjectionKernel:
    """Patch projection: ``weights`` is ``(k, k)`` or ``(d, k, k)``; ``bias`` scalar or ``(d,)``."""

    weights: np.ndarray
    bias: np.ndarray | float = 0.0
    provenance: str = "adapted"

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        if self.weights.ndim not in (2, 3):
            raise ValueError(f"kernel weights must be (k, k) or (d, k, k), got {self.weights.shape}")
        if not np.all(np.isfinite(self.weights)):
            raise ValueError("kernel weights must be finite")
        self.bias = np.asarray(self.bias, dtype=np.float64)

    @property
    def k(self) -> int:
        return self.weights.shape[-1]

    @property
    def patch_shape(self) -> tuple[int, int]:
        return self.weights.shape[-2:]

    def as_matrix(self) -> np.ndarray:
        """``(d, ph*pw)`` projection matrix (``d = 1`` for a single kernel)."""
        w = self.weights if self.weights.ndim == 3 else self.weights[None]
        return w.reshape(w.shape[0], -1)


@dataclass
class PevGrid:
    grid: np.ndarray  # (rows, cols, d), pre-trained as (14, 14, d)
    class_token_pev: np.ndarray  # (d,)

    def __post_init__(self):
        self.grid = np.asarray(self.grid, dtype=np.float64)
        self.class_token_pev = np.asarray(self.class_token_pev, dtype=np.float64)
        if self.grid.ndim != 3 or self.class_token_pev.shape != (self.grid.shape[2],):
            raise ValueError(f"PEV grid {self.grid.shape} and class PEV {self.class_token_pev.shape} disagree")
        if not (np.all(np.isfinite(self.grid)) and np.all(np.isfinite(self.class_token_pev))):
            raise ValueError("PEVs must be finite")

    @property
    def d(self) -> int:
        return self.grid.shape[2]

    @property
    def flat(self) -> np.ndarray:
        return self.grid.reshape(-1, self.d)


@dataclass
class TokenSequence:
    tokens: np.ndarray  # (1 + rows*cols, d), class token first
    grid_shape: tuple[int, int]
    plan: PatchPlan | None = None
    patch_shape: tuple[int, int] = field(default=(K_ORIGINAL, K_ORIGINAL))

    def __len__(self):
        return self.tokens.shape[0]


# ---------------------------------------------------------------------------
# ISA path


def compute_patch_plan(rows: int, cols: int) -> PatchPlan:
    """Smallest ``k`` with ``14 * k >= max(rows, cols)``."""
    rows, cols = int(rows), int(cols)
    if rows < 1 or cols < 1:
        raise ValueError(f"input sides must be >= 1, got {rows}x{cols}")
    k = -(-max(rows, cols) // GRID)
    return PatchPlan(k=k, side_extended=GRID * k, source_shape=(rows, cols))


def extend_and_resize(x, plan: PatchPlan) -> np.ndarray:
    """Stretch a map to ``side_extended`` square; never shrinks either axis."""
    a = _as_array(x)
    if a.shape[-2:] != plan.source_shape:
        raise ValueError(f"plan was computed for {plan.source_shape}, input is {a.shape[-2:]}")
    s = plan.side_extended
    return resize_bilinear(a, (s, s))


def average_kernel_channels(rgb_kernel: np.ndarray) -> np.ndarray:
    """``(..., 3, 16, 16) -> (..., 1, 16, 16)`` channel mean."""
    w = np.asarray(rgb_kernel, dtype=np.float64)
    if w.ndim < 3 or w.shape[-3:] != (3, K_ORIGINAL, K_ORIGINAL):
        raise ValueError(f"expected (..., 3, 16, 16) kernel, got {w.shape}")
    return (w[..., 0:1, :, :] + w[..., 1:2, :, :] + w[..., 2:3, :, :]) / 3.0


def resize_kernel(kernel: np.ndarray, out_shape: tuple[int, int]) -> np.ndarray:
    """Resize the last two axes of a kernel stack, each axis by its own grow/shrink rule."""
    w = np.asarray(kernel, dtype=np.float64)
    ph, pw = int(out_shape[0]), int(out_shape[1])
    if ph < 1 or pw < 1:
        raise ValueError(f"kernel side must be >= 1, got {out_shape}")
    if w.shape[-2:] == (ph, pw):
        return w.copy()
    return resize_separable(w, kernel_matrix(w.shape[-2], ph), kernel_matrix(w.shape[-1], pw))


def adapt_kernel(kernel16: np.ndarray, k: int, bias=0.0) -> ProjectionKernel:
    """Resize a single-channel 16x16 kernel (or a ``(d, [1,] 16, 16)`` stack) to ``k x k``."""
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    w = np.asarray(kernel16, dtype=np.float64)
    if w.ndim == 4:
        if w.shape[1] != 1:
            raise ValueError(f"average the channels first; got {w.shape[1]} channels")
        w = w[:, 0]
    elif w.ndim == 3 and w.shape[0] == 1:
        w = w[0]
    if w.shape[-2:] != (K_ORIGINAL, K_ORIGINAL):
        raise ValueError(f"expected 16x16 kernel(s), got {w.shape}")
    return ProjectionKernel(resize_kernel(w, (k, k)), bias=bias, provenance="adapted")


def patchify(image: np.ndarray, ph: int, pw: int) -> np.ndarray:
    """Non-overlapping ``ph x pw`` patches, row-major: ``(..., H, W) -> (..., gh*gw, ph*pw)``."""
    a = np.asarray(image)
    h, w = a.shape[-2:]
    if h % ph or w % pw:
        raise ValueError(f"{h}x{w} input is not tiled by {ph}x{pw} patches")
    gh, gw = h // ph, w // pw
    lead = a.shape[:-2]
    p = a.reshape(*lead, gh, ph, gw, pw)
    n = len(lead)
    p = p.transpose(*range(n), n, n + 2, n + 1, n + 3)
    return p.reshape(*lead, gh * gw, ph * pw)


def patch_embed(image: np.ndarray, kernel: ProjectionKernel, pev: PevGrid, class_token=None) -> TokenSequence:
    """Project patches of an ``S x S`` image (``S = 14 k``) and add the PEV grid."""
    a = _as_array(image)
    ph, pw = kernel.patch_shape
    gh, gw = pev.grid.shape[:2]
    if a.shape != (gh * ph, gw * pw):
        raise ValueError(f"image {a.shape} does not match {gh}x{gw} patches of {ph}x{pw}")
    w = kernel.as_matrix()
    if w.shape[0] != pev.d:
        raise ValueError(f"kernel has {w.shape[0]} output dims, PEVs have {pev.d}")
    tokens = patchify(a, ph, pw) @ w.T + np.broadcast_to(kernel.bias, (pev.d,)) + pev.flat
    cls = np.zeros(pev.d) if class_token is None else np.asarray(class_token, dtype=np.float64)
    seq = np.vstack([cls + pev.class_token_pev, tokens])
    plan = compute_patch_plan(*a.shape) if ph == pw and a.shape[0] == a.shape[1] else None
    return TokenSequence(seq, (gh, gw), plan=plan, patch_shape=(ph, pw))


# ---------------------------------------------------------------------------
# baselines


def baseline_simple_resize(x) -> np.ndarray:
    """Bilinear up/down-sampling to 224x224, whatever the source shape."""
    return resize_bilinear(_as_array(x), (IMAGE_SIDE, IMAGE_SIDE))


def patch_shape_for(rows: int, cols: int) -> tuple[int, int]:
    """Rectangular patch that tiles a 14x14 grid over the (padded) input."""
    if rows < 1 or cols < 1:
        raise ValueError(f"input sides must be >= 1, got {rows}x{cols}")
    return -(-rows // GRID), -(-cols // GRID)


def _pad_to(a, h, w):
    out = np.zeros(a.shape[:-2] + (h, w), dtype=a.dtype if np.issubdtype(a.dtype, np.floating) else np.float64)
    out[..., : a.shape[-2], : a.shape[-1]] = a
    return out


def baseline_adjust_patch_shape(x, kernel16: np.ndarray, pev: PevGrid, bias=0.0, class_token=None) -> TokenSequence:
    """Zero-pad to ``(14 ph, 14 pw)`` and project ``ph x pw`` patches with a stretched kernel."""
    a = _as_array(x)
    ph, pw = patch_shape_for(*a.shape)
    w = np.asarray(kernel16, dtype=np.float64)
    if w.ndim == 4:
        w = w[:, 0]
    kern = ProjectionKernel(resize_kernel(w, (ph, pw)), bias=bias, provenance="adapted")
    return patch_embed(_pad_to(a, GRID * ph, GRID * pw), kern, pev, class_token)


def pev_grid_shape_for(rows: int, cols: int) -> tuple[int, int]:
    """Number of 16x16 patches per side over the zero-padded input."""
    if rows < 1 or cols < 1:
        raise ValueError(f"input sides must be >= 1, got {rows}x{cols}")
    return -(-rows // K_ORIGINAL), -(-cols // K_ORIGINAL)


def _fit_axis(grid, n, axis):
    m = grid.shape[axis]
    if n == m:
        return grid
    if n < m:
        # keep the central n positions
        start = m // 2 - n // 2
        return np.take(grid, np.arange(start, start + n), axis=axis)
    op = linear_matrix(m, n)
    return np.moveaxis(np.tensordot(op, np.moveaxis(grid, axis, 0), axes=(1, 0)), 0, axis)


def manipulate_pev_grid(pev: PevGrid, gh: int, gw: int) -> PevGrid:
    """Crop (centre) or linearly interpolate each grid axis independently; class PEV unchanged."""
    g = _fit_axis(pev.grid, gw, 1)
    g = _fit_axis(g, gh, 0)
    return PevGrid(g, pev.class_token_pev.copy())


def baseline_manipulate_pev(x, pev: PevGrid, kernel16: np.ndarray, bias=0.0, class_token=None) -> TokenSequence:
    """16x16 patches over the raw (zero-padded) input with a reshaped PEV grid."""
    a = _as_array(x)
    gh, gw = pev_grid_shape_for(*a.shape)
    w = np.asarray(kernel16, dtype=np.float64)
    if w.ndim == 4:
        w = w[:, 0]
    kern = ProjectionKernel(w, bias=bias, provenance="pretrained-16")
    return patch_embed(_pad_to(a, K_ORIGINAL * gh, K_ORIGINAL * gw), kern, manipulate_pev_grid(pev, gh, gw), class_token)


# ---------------------------------------------------------------------------
# batched adapters used by the trainable model


@dataclass(frozen=True)
class InputAdapter:
    """Deterministic map -> patch-matrix front end for one strategy and input shape.

    ``patches(x)`` turns ``(..., rows, cols)`` maps (or ``(..., C, rows, cols)``
    channel stacks) into ``(..., n_tokens, C * ph * pw)``; ``init_projection``
    derives the starting projection matrix and PEVs from pre-trained weights.
    """

    strategy: str
    source_shape: tuple[int, int]
    channels: int = 1

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ValueError(f"unknown strategy {self.strategy!r}; choose from {STRATEGIES}")
        r, c = self.source_shape
        if r < 1 or c < 1:
            raise ValueError(f"input sides must be >= 1, got {self.source_shape}")

    @property
    def plan(self) -> PatchPlan:
        return compute_patch_plan(*self.source_shape)

    @property
    def patch_shape(self) -> tuple[int, int]:
        if self.strategy == "isa":
            k = self.plan.k
            return k, k
        if self.strategy == "patchshape":
            return patch_shape_for(*self.source_shape)
        return K_ORIGINAL, K_ORIGINAL

    @property
    def grid_shape(self) -> tuple[int, int]:
        if self.strategy == "pevmanip":
            return pev_grid_shape_for(*self.source_shape)
        return GRID, GRID

    @property
    def n_tokens(self) -> int:
        gh, gw = self.grid_shape
        return gh * gw

    @property
    def patch_dim(self) -> int:
        ph, pw = self.patch_shape
        return self.channels * ph * pw

    def canvas(self, x: np.ndarray) -> np.ndarray:
        """The image actually cut into patches."""
        x = np.asarray(x)
        if x.shape[-2:] != tuple(self.source_shape):
            raise ValueError(f"adapter built for {self.source_shape}, got {x.shape[-2:]}")
        if self.strategy == "isa":
            return extend_and_resize(x, self.plan)
        if self.strategy == "simple":
            return resize_bilinear(x, (IMAGE_SIDE, IMAGE_SIDE))
        ph, pw = self.patch_shape
        gh, gw = self.grid_shape
        return _pad_to(x, gh * ph, gw * pw)

    def patches(self, x: np.ndarray) -> np.ndarray:
        ph, pw = self.patch_shape
        p = patchify(self.canvas(x), ph, pw)
        if self.channels == 1:
            return p
        # (..., C, N, P) -> (..., N, C*P)
        p = np.moveaxis(p, -3, -2)
        return p.reshape(*p.shape[:-2], -1)

    def init_projection(self, kernel_rgb: np.ndarray, pev: PevGrid) -> tuple[np.ndarray, np.ndarray]:
        """Projection matrix ``(d, C*ph*pw)`` and flattened PEVs ``(n_tokens, d)``."""
        k1 = average_kernel_channels(kernel_rgb)[:, 0]  # (d, 16, 16)
        w = resize_kernel(k1, self.patch_shape).reshape(k1.shape[0], -1)
        if self.channels > 1:
            w = np.concatenate([w] * self.channels, axis=1)
        grid = manipulate_pev_grid(pev, *self.grid_shape) if self.strategy == "pevmanip" else pev
        return w, grid.flat.copy()


def make_adapter(strategy: str, source_shape: tuple[int, int], channels: int = 1) -> InputAdapter:
    return InputAdapter(strategy, (int(source_shape[0]), int(source_shape[1])), channels)
