"""Graph Ginzburg-Landau segmentation.

    E(u) = sum_ij eps/2 w_ij (u_i - u_j)^2 + W(u)/eps + eta/2 sum_i Lam_i (u_i - y_i)^2

with the double well ``W(u) = 1/4 sum (u_i^2 - 1)^2``.  The quadratic part is
``H`` and the double well is ``F``; ``f`` is cubic, so its Lipschitz constant
is taken over the box ``|u_i| <= r`` and the box is monitored while solving.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy.sparse as sps
from numpy.lib.stride_tricks import sliding_window_view

from .splitting import QuadraticLinearProblem

__all__ = [
    "GlParams",
    "GlInstance",
    "GlProblem",
    "BoxViolation",
    "PgmError",
    "build_weights",
    "graph_laplacian",
    "make_instance",
    "gl_energy",
    "gl_energy_bruteforce",
    "gl_split",
    "dice",
    "synthetic_phantom",
    "load_pgm",
    "save_pgm",
]

log = logging.getLogger(__name__)


class BoxViolation(ValueError):
    """An iterate left the box on which the local Lipschitz bound holds."""


class PgmError(ValueError):
    def __init__(self, msg: str, offset: int):
        super().__init__(f"{msg} (at byte {offset})")
        self.offset = offset


@dataclass(frozen=True)
class GlParams:
    epsilon: float = 30.0
    eta: float = 30.0
    sigma: float = 0.1
    window: int = 1
    neighborhood: int = 5
    box_radius: float = 1.2

    def __post_init__(self):
        if self.epsilon <= 0 or self.eta <= 0 or self.sigma <= 0:
            raise ValueError("epsilon, eta and sigma must be positive")
        if self.window < 0 or self.neighborhood < 1:
            raise ValueError("window must be >= 0 and neighborhood >= 1")
        if self.box_radius <= 1.0 / math.sqrt(3.0):
            raise ValueError("box_radius must exceed 1/sqrt(3)")

    @property
    def lipschitz_box(self) -> float:
        """``max |f'|`` over ``|u| <= r``: ``(3r^2 - 1)/eps``."""
        r = self.box_radius
        return (3.0 * r * r - 1.0) / self.epsilon


def build_weights(image, params: GlParams) -> sps.csr_matrix:
    """Nonlocal weights ``w_ij = exp(-d(P_i, P_j)/sigma^2) * N(i, j)``.

    ``P_i`` is the ``(2*window+1)^2`` patch around pixel ``i`` on the
    edge-replicated image and ``d`` is the mean squared difference over the
    patch.  ``N(i, j) = 1`` iff ``i != j`` and the Chebyshev distance is at
    most ``neighborhood``.  Pixels are flattened in row-major order.
    """
    img = np.asarray(image, dtype=float)
    if img.ndim != 2 or min(img.shape) < 2:
        raise ValueError(f"need a 2-D image with both sides >= 2, got shape {img.shape}")
    if not np.all(np.isfinite(img)) or img.min() < 0.0 or img.max() > 1.0:
        raise ValueError("intensities must lie in [0, 1]")
    rows, cols = img.shape
    w, R = params.window, params.neighborhood
    pad = w + R
    P = np.pad(img, pad, mode="edge")
    psize = (2 * w + 1) ** 2
    idx = np.arange(rows * cols).reshape(rows, cols)
    ri, ci, vals = [], [], []
    # half of the offsets; the mirror entries come from symmetry
    offsets = [(dr, dc) for dr in range(0, R + 1) for dc in range(-R, R + 1)
               if dr > 0 or dc > 0]
    for dr, dc in offsets:
        r0, r1 = max(0, -dr), min(rows, rows - dr)
        c0, c1 = max(0, -dc), min(cols, cols - dc)
        if r0 >= r1 or c0 >= c1:
            continue
        # patch sums over pixels p in [r0,r1)x[c0,c1); patch rows p-w..p+w in padded coords
        a = P[r0 + R:r1 + R + 2 * w, c0 + R:c1 + R + 2 * w]
        b = P[r0 + R + dr:r1 + R + dr + 2 * w, c0 + R + dc:c1 + R + dc + 2 * w]
        sq = (a - b) ** 2
        dist = sliding_window_view(sq, (2 * w + 1, 2 * w + 1)).sum(axis=(-2, -1)) / psize
        wt = np.exp(-dist / (params.sigma ** 2))
        i = idx[r0:r1, c0:c1].ravel()
        j = idx[r0 + dr:r1 + dr, c0 + dc:c1 + dc].ravel()
        ri.append(i)
        ci.append(j)
        vals.append(wt.ravel())
    ri = np.concatenate(ri)
    ci = np.concatenate(ci)
    vals = np.concatenate(vals)
    n = rows * cols
    W = sps.coo_matrix((np.concatenate([vals, vals]),
                        (np.concatenate([ri, ci]), np.concatenate([ci, ri]))), shape=(n, n))
    return W.tocsr()


def graph_laplacian(W) -> sps.csr_matrix:
    W = sps.csr_matrix(W)
    d = np.asarray(W.sum(axis=1)).ravel()
    return (sps.diags(d) - W).tocsr()


@dataclass(frozen=True)
class GlInstance:
    weights: sps.csr_matrix
    label_mask: np.ndarray
    label_values: np.ndarray
    image_dims: tuple
    truth: np.ndarray | None = None
    image: np.ndarray | None = None

    def __post_init__(self):
        n = self.weights.shape[0]
        if self.weights.shape != (n, n):
            raise ValueError("weights must be square")
        if self.label_mask.shape != (n,) or self.label_values.shape != (n,):
            raise ValueError("label arrays must be flat with one entry per node")
        if not np.all(np.isin(self.label_mask, (0.0, 1.0))):
            raise ValueError("label mask entries must be 0 or 1")
        if np.any(self.label_values[self.label_mask == 0] != 0):
            raise ValueError("label values must vanish off the label mask")

    @property
    def n(self) -> int:
        return self.weights.shape[0]

    @property
    def laplacian(self) -> sps.csr_matrix:
        return graph_laplacian(self.weights)

    def initial_guess(self) -> np.ndarray:
        """``Lam y``: the labels, zero elsewhere."""
        return self.label_mask * self.label_values


def make_instance(image, label_mask, label_values, params: GlParams, truth=None) -> GlInstance:
    img = np.asarray(image, dtype=float)
    W = build_weights(img, params)
    return GlInstance(W, np.asarray(label_mask, dtype=float).ravel(),
                      np.asarray(label_values, dtype=float).ravel(), img.shape,
                      None if truth is None else np.asarray(truth, dtype=bool), img)


def _double_well(u) -> float:
    return 0.25 * float(np.sum((u * u - 1.0) ** 2))


def gl_energy(u, inst: GlInstance, params: GlParams) -> float:
    """``E1 + E2 + E3`` using ``E1 = eps * u^T (D - W) u``."""
    u = np.asarray(u, dtype=float)
    if u.shape != (inst.n,):
        raise ValueError(f"u has shape {u.shape}, expected ({inst.n},)")
    e1 = params.epsilon * float(u @ (inst.laplacian @ u))
    e2 = _double_well(u) / params.epsilon
    r = u - inst.label_values
    e3 = 0.5 * params.eta * float(np.sum(inst.label_mask * r * r))
    return e1 + e2 + e3


def gl_energy_bruteforce(u, inst: GlInstance, params: GlParams) -> float:
    """Literal double sum over stored edges; meant for small graphs."""
    u = np.asarray(u, dtype=float)
    W = inst.weights.tocoo()
    e1 = 0.5 * params.epsilon * float(np.sum(W.data * (u[W.row] - u[W.col]) ** 2))
    e2 = _double_well(u) / params.epsilon
    e3 = 0.5 * params.eta * float(np.sum(inst.label_mask * (u - inst.label_values) ** 2))
    return e1 + e2 + e3


class GlProblem(QuadraticLinearProblem):
    """Quadratic-linear view of the GL energy with a runtime box monitor."""

    def __init__(self, inst: GlInstance, params: GlParams):
        eps, eta = params.epsilon, params.eta
        K = (2.0 * eps * inst.laplacian + eta * sps.diags(inst.label_mask)).tocsr()
        b0 = eta * inst.label_mask * inst.label_values
        c0 = 0.5 * eta * float(np.sum(inst.label_mask * inst.label_values ** 2))
        super().__init__(K, b0,
                         grad_F=lambda u: (u ** 3 - u) / eps,
                         F_value=lambda u: _double_well(u) / eps,
                         lipschitz=params.lipschitz_box, c0=c0,
                         prior_diag=eta * inst.label_mask)
        self.inst = inst
        self.params = params
        self.box_radius = params.box_radius

    def check_iterate(self, u) -> None:
        m = float(np.max(np.abs(u)))
        if m > self.box_radius:
            i = int(np.argmax(np.abs(u)))
            raise BoxViolation(f"|u[{i}]| = {m:.6g} exceeds the box radius {self.box_radius}; "
                               "the local Lipschitz bound no longer applies")


def gl_split(inst: GlInstance, params: GlParams) -> GlProblem:
    """``K = 2 eps L_w + eta Lam``, ``b0 = eta Lam y``, ``f(u) = (u^3 - u)/eps``."""
    return GlProblem(inst, params)


def dice(seg, truth) -> float:
    """``2|X & Y| / (|X| + |Y|)``, with 1 when both masks are empty."""
    seg = np.asarray(seg, dtype=bool)
    truth = np.asarray(truth, dtype=bool)
    if seg.shape != truth.shape:
        raise ValueError(f"mask shapes differ: {seg.shape} vs {truth.shape}")
    denom = int(seg.sum()) + int(truth.sum())
    if denom == 0:
        return 1.0
    return 2.0 * int(np.logical_and(seg, truth).sum()) / denom


def synthetic_phantom(rows: int = 64, cols: int = 64, seed: int = 0, noise: float = 0.05,
                      label_fraction: float = 0.02):
    """Two-region test image with a smooth star-shaped boundary.

    Returns ``(image, truth, label_mask, label_values)``; the foreground has
    intensity 0.75 on a 0.25 background plus Gaussian noise, clipped to
    ``[0, 1]``.  ``label_fraction`` of each region is labelled, +1 in the
    foreground and -1 in the background.
    """
    if rows < 16 or cols < 16:
        raise ValueError("phantom needs at least 16x16 pixels")
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:rows, 0:cols].astype(float)
    cy, cx = (rows - 1) / 2.0, (cols - 1) / 2.0
    r0 = 0.3 * min(rows, cols)
    theta = np.arctan2(yy - cy, xx - cx)
    rad = np.hypot(yy - cy, xx - cx)
    truth = rad <= r0 * (1.0 + 0.15 * np.sin(3.0 * theta))
    image = np.where(truth, 0.75, 0.25)
    if noise > 0:
        image = np.clip(image + noise * rng.standard_normal(image.shape), 0.0, 1.0)
    label_mask = np.zeros(rows * cols)
    label_values = np.zeros(rows * cols)
    flat = truth.ravel()
    for region, sign in ((np.flatnonzero(flat), 1.0), (np.flatnonzero(~flat), -1.0)):
        k = max(1, int(round(label_fraction * region.size)))
        pick = rng.choice(region, size=k, replace=False)
        label_mask[pick] = 1.0
        label_values[pick] = sign
    return image, truth, label_mask, label_values


# ---------------------------------------------------------------------------
# PGM I/O
# ---------------------------------------------------------------------------

def _header_tokens(data: bytes, count: int):
    """Read ``count`` whitespace-separated header tokens, skipping comments."""
    tokens = []
    pos = 0
    n = len(data)
    while len(tokens) < count:
        while pos < n and (data[pos:pos + 1].isspace() or data[pos:pos + 1] == b"#"):
            if data[pos:pos + 1] == b"#":
                while pos < n and data[pos:pos + 1] not in (b"\n", b"\r"):
                    pos += 1
            else:
                pos += 1
        if pos >= n:
            raise PgmError("truncated header", pos)
        start = pos
        while pos < n and not data[pos:pos + 1].isspace() and data[pos:pos + 1] != b"#":
            pos += 1
        tokens.append((data[start:pos], start))
    return tokens, pos


def load_pgm(path) -> np.ndarray:
    """Read a P2 or P5 PGM and scale intensities to ``[0, 1]``."""
    data = Path(path).read_bytes()
    if len(data) < 2 or data[:2] not in (b"P2", b"P5"):
        raise PgmError("not a P2/P5 PGM file", 0)
    magic = data[:2]
    tokens, pos = _header_tokens(data[2:], 3)
    (tw, ow), (th, oh), (tm, om) = tokens
    pos += 2
    vals = []
    for tok, off in ((tw, ow), (th, oh), (tm, om)):
        try:
            vals.append(int(tok))
        except ValueError:
            raise PgmError(f"bad header field {tok!r}", off + 2) from None
    width, height, maxval = vals
    if width < 1 or height < 1:
        raise PgmError("image dimensions must be positive", ow + 2)
    if not 1 <= maxval <= 65535:
        raise PgmError(f"maxval {maxval} outside 1..65535", om + 2)
    count = width * height
    if magic == b"P5":
        if pos >= len(data) or not data[pos:pos + 1].isspace():
            raise PgmError("missing whitespace after header", pos)
        pos += 1
        dtype = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
        need = count * dtype.itemsize
        if len(data) - pos < need:
            raise PgmError(f"truncated raster: need {need} bytes, have {len(data) - pos}", len(data))
        raw = np.frombuffer(data, dtype=dtype, count=count, offset=pos).astype(float)
    else:
        body = data[pos:].split()
        if len(body) < count:
            raise PgmError(f"truncated raster: need {count} samples, have {len(body)}", len(data))
        try:
            raw = np.array([int(t) for t in body[:count]], dtype=float)
        except ValueError:
            raise PgmError("non-integer sample in raster", pos) from None
    if raw.max(initial=0) > maxval:
        raise PgmError("sample exceeds maxval", pos)
    return raw.reshape(height, width) / maxval


def save_pgm(image, path, maxval: int = 65535, plain: bool = False) -> None:
    """Write ``image`` (values in ``[0, 1]``) as P5, or P2 with ``plain=True``."""
    img = np.asarray(image, dtype=float)
    if img.ndim != 2:
        raise ValueError("PGM needs a 2-D image")
    if not 1 <= maxval <= 65535:
        raise ValueError("maxval must lie in 1..65535")
    if img.size and (img.min() < 0.0 or img.max() > 1.0):
        raise ValueError("intensities must lie in [0, 1]")
    q = np.rint(img * maxval).astype(np.int64)
    h, w = img.shape
    header = f"{'P2' if plain else 'P5'}\n{w} {h}\n{maxval}\n".encode()
    if plain:
        body = "\n".join(" ".join(str(v) for v in row) for row in q).encode() + b"\n"
    else:
        dtype = ">u2" if maxval > 255 else "u1"
        body = q.astype(dtype).tobytes()
    Path(path).write_bytes(header + body)
