"""Soft capsule silhouettes, distance transforms and the pyramid mismatch energy.

Projected capsules are tapered 2D stadiums: the convex hull of the two
endpoint discs, whose radii are the 3D radius scaled by f/z at each endpoint.
For a point p the hull's signed function is

    f(p) = min_t |p - c(t)| - r(t),   c(t) = (1-t)a + t b,  r(t) = (1-t)ra + t rb

which is the exact Euclidean distance outside and negative inside. A capsule
covers a pixel center with I_c = sigmoid(-sharpness * f) and the capsules
combine as 1 - prod(1 - I_c) ("soft"), or through the closest capsule alone,
sigmoid(-sharpness * min_c f) ("max").

The mismatch energy builds the per-pixel summand

    s = lam1 * I * DT(mask) + lam2 * (1 - I) * DT(~mask)

takes its Gaussian pyramid and adds up the mean of every level. The pyramid
is linear, so this equals sum(w * s) for a fixed weight image w that depends
only on the image size; the fast path uses that identity.
"""
from __future__ import annotations

import os
from dataclasses import dataclass

import numba
import numpy as np
from scipy import ndimage

from .errors import EmptyMask, ShapeMismatch, TooSmall

PYRAMID_LEVELS = 4
# sigmoid(-20) ~ 2e-9: a capsule does not cover pixels with sharpness * f beyond this.
CUTOFF = 20.0

_g = np.exp(-0.5 * np.arange(-2, 3) ** 2)
GAUSS5 = _g / _g.sum()


# ---------------------------------------------------------------------------
# masks and distance fields


def distance_transform(mask) -> np.ndarray:
    """Exact Euclidean distance (pixels) from every pixel to the nearest set pixel."""
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        raise EmptyMask("mask has no set pixels")
    return ndimage.distance_transform_edt(~mask)


def pyramid(field, levels: int = PYRAMID_LEVELS) -> list:
    """Gaussian pyramid: level 0 is the input, each next level blurs (5 taps, sigma 1) and halves."""
    field = np.asarray(field, dtype=float)
    H, W = field.shape
    if min(H, W) < 2 ** (levels - 1):
        raise TooSmall(f"{W}x{H} field cannot hold {levels} pyramid levels")
    out = [field]
    for _ in range(levels - 1):
        f = ndimage.correlate1d(out[-1], GAUSS5, axis=0, mode="nearest")
        f = ndimage.correlate1d(f, GAUSS5, axis=1, mode="nearest")
        out.append(f[::2, ::2].copy())
    return out


def level_shapes(shape, levels: int = PYRAMID_LEVELS):
    H, W = shape
    out = []
    for _ in range(levels):
        out.append((H, W))
        H, W = (H + 1) // 2, (W + 1) // 2
    return out


def _pyramid_operator_1d(n: int, levels: int) -> list:
    """Dense matrices mapping a length-n signal to each pyramid level along one axis."""
    ops = [np.eye(n)]
    for _ in range(levels - 1):
        m = ops[-1].shape[0]
        blur = np.zeros((m, m))
        for i in range(m):
            for k, w in zip(range(-2, 3), GAUSS5):
                blur[i, min(max(i + k, 0), m - 1)] += w
        ops.append(blur[::2] @ ops[-1])
    return ops


def pyramid_weights(shape, levels: int = PYRAMID_LEVELS) -> np.ndarray:
    """Weight image w with sum(w * s) == sum over levels of mean(pyramid(s)[level])."""
    H, W = shape
    if min(H, W) < 2 ** (levels - 1):
        raise TooSmall(f"{W}x{H} field cannot hold {levels} pyramid levels")
    rows, cols = _pyramid_operator_1d(H, levels), _pyramid_operator_1d(W, levels)
    w = np.zeros((H, W))
    for R, C in zip(rows, cols):
        w += np.outer(R.sum(axis=0), C.sum(axis=0)) / (R.shape[0] * C.shape[0])
    return w


@dataclass(frozen=True)
class SilhouetteTarget:
    """Distance fields of an observed mask and its complement, plus pyramid weights."""

    dt_mask: np.ndarray  # distance to nearest foreground pixel
    dt_inv: np.ndarray  # distance to nearest background pixel
    weights: np.ndarray
    levels: int

    @classmethod
    def from_mask(cls, mask, levels: int = PYRAMID_LEVELS) -> "SilhouetteTarget":
        mask = np.asarray(mask, dtype=bool)
        if mask.all():
            raise EmptyMask("mask covers the whole image; its complement is empty")
        return cls(distance_transform(mask), distance_transform(~mask),
                   pyramid_weights(mask.shape, levels), levels)

    @property
    def shape(self):
        return self.dt_mask.shape


# ---------------------------------------------------------------------------
# kernels


@numba.njit(cache=True)
def _closest(A, B, ra, rb, H, W, stride, margin):
    """Per-pixel min of the hull function over capsules, with bounding-box culling.

    Returns the min value, the winning capsule (-1 where culled) and its
    minimizing t. The unit vectors are recomputed later for winners only.
    """
    fbest = np.full((H, W), np.inf)
    arg = np.full((H, W), -1, dtype=np.int64)
    tb = np.zeros((H, W))
    for c in range(A.shape[0]):
        ax, ay, bx, by, r0, r1 = A[c, 0], A[c, 1], B[c, 0], B[c, 1], ra[c], rb[c]
        x0 = min(ax - r0, bx - r1) - margin
        x1 = max(ax + r0, bx + r1) + margin
        y0 = min(ay - r0, by - r1) - margin
        y1 = max(ay + r0, by + r1) + margin
        j0 = max(int(np.ceil((x0 - 0.5) / stride)), 0)
        j1 = min(int(np.floor((x1 - 0.5) / stride)), W - 1)
        i0 = max(int(np.ceil((y0 - 0.5) / stride)), 0)
        i1 = min(int(np.floor((y1 - 0.5) / stride)), H - 1)
        ex = bx - ax
        ey = by - ay
        d = np.sqrt(ex * ex + ey * ey)
        dr = r0 - r1
        contained = d <= abs(dr) + 1e-12
        if not contained:
            ex /= d
            ey /= d
            s = dr / d
            co = np.sqrt(1.0 - s * s)
            tn = s / co
        else:
            s = co = tn = 0.0
        for i in range(i0, i1 + 1):
            py = i * stride + 0.5
            for j in range(j0, j1 + 1):
                px = j * stride + 0.5
                qx = px - ax
                qy = py - ay
                if contained:
                    t = 0.0 if r0 >= r1 else 1.0
                else:
                    x = qx * ex + qy * ey
                    y = abs(qx * ey - qy * ex)
                    t = (x - y * tn) / d
                    if 0.0 < t < 1.0:
                        f = y * co + x * s - r0
                        if f < fbest[i, j]:
                            fbest[i, j] = f
                            arg[i, j] = c
                            tb[i, j] = t
                        continue
                    t = 0.0 if t <= 0.0 else 1.0
                vx = qx - t * (bx - ax)
                vy = qy - t * (by - ay)
                f = np.sqrt(vx * vx + vy * vy) - (r0 + t * (r1 - r0))
                if f < fbest[i, j]:
                    fbest[i, j] = f
                    arg[i, j] = c
                    tb[i, j] = t
    return fbest, arg, tb


@numba.njit(cache=True)
def _sigmoid_neg(z):
    """sigmoid(-z), overflow safe."""
    if z >= 0:
        e = np.exp(-z)
        return e / (1.0 + e)
    return 1.0 / (1.0 + np.exp(z))


@numba.njit(cache=True)
def _log_sigmoid(z):
    if z >= 0:
        return -np.log1p(np.exp(-z))
    return z - np.log1p(np.exp(z))


@numba.njit(cache=True)
def _coverage(fbest, arg, sharp):
    H, W = fbest.shape
    out = np.zeros((H, W))
    for i in range(H):
        for j in range(W):
            if arg[i, j] >= 0:
                out[i, j] = _sigmoid_neg(sharp * fbest[i, j])
    return out


@numba.njit(cache=True)
def _hull(px, py, ax, ay, bx, by, r0, r1, ex, ey, d, s, co, tn, contained):
    """Hull function value and minimizing t at one point (see _closest)."""
    qx = px - ax
    qy = py - ay
    if contained:
        t = 0.0 if r0 >= r1 else 1.0
    else:
        x = qx * ex + qy * ey
        y = abs(qx * ey - qy * ex)
        t = (x - y * tn) / d
        if 0.0 < t < 1.0:
            return y * co + x * s - r0, t
        t = 0.0 if t <= 0.0 else 1.0
    vx = qx - t * (bx - ax)
    vy = qy - t * (by - ay)
    return np.sqrt(vx * vx + vy * vy) - (r0 + t * (r1 - r0)), t


@numba.njit(cache=True)
def _frame(ax, ay, bx, by, r0, r1):
    ex = bx - ax
    ey = by - ay
    d = np.sqrt(ex * ex + ey * ey)
    contained = d <= abs(r0 - r1) + 1e-12
    if contained:
        return ex, ey, d, 0.0, 0.0, 0.0, True
    s = (r0 - r1) / d
    co = np.sqrt(1.0 - s * s)
    return ex / d, ey / d, d, s, co, s / co, False


@numba.njit(cache=True)
def _bbox(ax, ay, bx, by, r0, r1, margin, H, W):
    j0 = max(int(np.ceil(min(ax - r0, bx - r1) - margin - 0.5)), 0)
    j1 = min(int(np.floor(max(ax + r0, bx + r1) + margin - 0.5)), W - 1)
    i0 = max(int(np.ceil(min(ay - r0, by - r1) - margin - 0.5)), 0)
    i1 = min(int(np.floor(max(ay + r0, by + r1) + margin - 0.5)), H - 1)
    return i0, i1, j0, j1


@numba.njit(cache=True)
def _log_uncovered(A, B, ra, rb, H, W, sharp):
    """Per-pixel sum over capsules of log(1 - sigmoid(-sharp f))."""
    L = np.zeros((H, W))
    for c in range(A.shape[0]):
        ax, ay, bx, by, r0, r1 = A[c, 0], A[c, 1], B[c, 0], B[c, 1], ra[c], rb[c]
        ex, ey, d, s, co, tn, contained = _frame(ax, ay, bx, by, r0, r1)
        i0, i1, j0, j1 = _bbox(ax, ay, bx, by, r0, r1, CUTOFF / sharp, H, W)
        for i in range(i0, i1 + 1):
            for j in range(j0, j1 + 1):
                f, t = _hull(j + 0.5, i + 0.5, ax, ay, bx, by, r0, r1, ex, ey, d, s, co, tn, contained)
                z = sharp * f
                if z <= -CUTOFF:
                    L[i, j] += z  # log sigmoid(z) == z to double precision here
                elif z < CUTOFF:
                    L[i, j] += _log_sigmoid(z)
    return L


@numba.njit(cache=True)
def _soft_union_energy(A, B, ra, rb, dt_mask, dt_inv, weights, sharp, lam1, lam2, want_grad):
    """Energy with coverage 1 - prod_c (1 - sigmoid(-sharp f_c)), plus its gradient."""
    H, W = dt_mask.shape
    L = _log_uncovered(A, B, ra, rb, H, W, sharp)
    P = np.exp(L)  # 1 - coverage
    total = 0.0
    for i in range(H):
        row = 0.0
        for j in range(W):
            row += weights[i, j] * (lam1 * (1.0 - P[i, j]) * dt_mask[i, j] + lam2 * P[i, j] * dt_inv[i, j])
        total += row
    C = A.shape[0]
    gA = np.zeros((C, 2))
    gB = np.zeros((C, 2))
    gra = np.zeros(C)
    grb = np.zeros(C)
    if not want_grad:
        return total, gA, gB, gra, grb
    for c in range(C):
        ax, ay, bx, by, r0, r1 = A[c, 0], A[c, 1], B[c, 0], B[c, 1], ra[c], rb[c]
        ex, ey, d, s, co, tn, contained = _frame(ax, ay, bx, by, r0, r1)
        i0, i1, j0, j1 = _bbox(ax, ay, bx, by, r0, r1, CUTOFF / sharp, H, W)
        for i in range(i0, i1 + 1):
            for j in range(j0, j1 + 1):
                if P[i, j] < 1e-12:  # fully covered: no gradient
                    continue
                px = j + 0.5
                py = i + 0.5
                f, t = _hull(px, py, ax, ay, bx, by, r0, r1, ex, ey, d, s, co, tn, contained)
                z = sharp * f
                if z >= CUTOFF:
                    continue
                # dI/df_c = -sharp * sigmoid(-z) * prod_c (1 - sigmoid(-sharp f_c))
                g = -weights[i, j] * (lam1 * dt_mask[i, j] - lam2 * dt_inv[i, j]) \
                    * sharp * _sigmoid_neg(z) * P[i, j]
                vx = px - (ax + t * (bx - ax))
                vy = py - (ay + t * (by - ay))
                dist = np.sqrt(vx * vx + vy * vy)
                if dist > 1e-12:
                    vx /= dist
                    vy /= dist
                gA[c, 0] -= g * (1.0 - t) * vx
                gA[c, 1] -= g * (1.0 - t) * vy
                gB[c, 0] -= g * t * vx
                gB[c, 1] -= g * t * vy
                gra[c] -= g * (1.0 - t)
                grb[c] -= g * t
    return total, gA, gB, gra, grb


@numba.njit(cache=True)
def _max_union_energy(A, B, ra, rb, dt_mask, dt_inv, weights, sharp, lam1, lam2, want_grad):
    """Energy with coverage sigmoid(-sharp min_c f_c), plus its gradient."""
    H, W = dt_mask.shape
    fbest, arg, tb = _closest(A, B, ra, rb, H, W, 1.0, CUTOFF / sharp)
    C = A.shape[0]
    gA = np.zeros((C, 2))
    gB = np.zeros((C, 2))
    gra = np.zeros(C)
    grb = np.zeros(C)
    total = 0.0
    for i in range(H):
        row = 0.0
        for j in range(W):
            c = arg[i, j]
            w = weights[i, j]
            if c < 0:
                row += w * lam2 * dt_inv[i, j]
                continue
            I = _sigmoid_neg(sharp * fbest[i, j])
            row += w * (lam1 * I * dt_mask[i, j] + lam2 * (1.0 - I) * dt_inv[i, j])
            if want_grad and I > 1e-300:
                # dE/df = w (lam1 dt_mask - lam2 dt_inv) dI/df, dI/df = -sharp I (1-I)
                g = -w * (lam1 * dt_mask[i, j] - lam2 * dt_inv[i, j]) * sharp * I * (1.0 - I)
                t = tb[i, j]
                vx = j + 0.5 - (A[c, 0] + t * (B[c, 0] - A[c, 0]))
                vy = i + 0.5 - (A[c, 1] + t * (B[c, 1] - A[c, 1]))
                dist = np.sqrt(vx * vx + vy * vy)
                if dist > 1e-12:
                    vx /= dist
                    vy /= dist
                gA[c, 0] -= g * (1.0 - t) * vx
                gA[c, 1] -= g * (1.0 - t) * vy
                gB[c, 0] -= g * t * vx
                gB[c, 1] -= g * t * vy
                gra[c] -= g * (1.0 - t)
                grb[c] -= g * t
        total += row
    return total, gA, gB, gra, grb


# ---------------------------------------------------------------------------
# public API


@dataclass(frozen=True)
class Capsules2D:
    """Projected capsules in level-0 pixel coordinates."""

    a: np.ndarray  # (C, 2)
    b: np.ndarray  # (C, 2)
    ra: np.ndarray  # (C,)
    rb: np.ndarray  # (C,)


def project_capsules(body, camera) -> Capsules2D:
    """Stadium outlines of a posed body's capsules under a camera."""
    from .projection import project

    a = np.array([c[0] for c in body.capsules])
    b = np.array([c[1] for c in body.capsules])
    r = np.array([c[2] for c in body.capsules])
    za = a[:, 2] + camera.translation[2]
    zb = b[:, 2] + camera.translation[2]
    return Capsules2D(project(a, camera), project(b, camera), r * camera.focal / za, r * camera.focal / zb)


def _arrays(caps):
    return (np.ascontiguousarray(caps.a, dtype=float), np.ascontiguousarray(caps.b, dtype=float),
            np.ascontiguousarray(caps.ra, dtype=float), np.ascontiguousarray(caps.rb, dtype=float))


def rasterize_capsules(caps: Capsules2D, shape, sharpness: float = 2.0, union: str = "soft") -> np.ndarray:
    """Soft coverage image of shape (H, W) sampled at pixel centers."""
    H, W = shape
    if union == "soft":
        return -np.expm1(_log_uncovered(*_arrays(caps), H, W, float(sharpness)))
    if union == "max":
        fbest, arg, _ = _closest(*_arrays(caps), H, W, 1.0, CUTOFF / sharpness)
        return _coverage(fbest, arg, float(sharpness))
    raise ValueError(f"union must be 'soft' or 'max', got {union!r}")


def hard_mask(body, camera) -> np.ndarray:
    """Exact binary silhouette: pixel centers inside at least one projected capsule."""
    W, H = camera.image_size
    fbest, _, _ = _closest(*_arrays(project_capsules(body, camera)), H, W, 1.0, 1.0)
    return fbest < 0


def rasterize(body, camera, sharpness: float = 2.0, union: str = "soft") -> np.ndarray:
    """Soft silhouette (H, W) of a posed body; values in [0, 1]."""
    W, H = camera.image_size
    return rasterize_capsules(project_capsules(body, camera), (H, W), sharpness, union)


def silhouette_energy(model, dt_mask, dt_inv_mask, lam1: float = 1.0, lam2: float = 1.0,
                      levels: int = PYRAMID_LEVELS) -> float:
    """Pyramid mismatch between a model coverage image and an observed mask.

    ``dt_mask`` and ``dt_inv_mask`` are the distance fields of the mask and of
    its complement. The per-pixel mismatch image is pyramided and the mean of
    each level is summed.
    """
    model = np.asarray(model, dtype=float)
    if model.shape != np.shape(dt_mask) or model.shape != np.shape(dt_inv_mask):
        raise ShapeMismatch(f"model {model.shape} vs distance fields {np.shape(dt_mask)}, {np.shape(dt_inv_mask)}")
    summand = lam1 * model * dt_mask + lam2 * (1.0 - model) * dt_inv_mask
    return float(sum(level.mean() for level in pyramid(summand, levels)))


def capsule_energy(caps: Capsules2D, target: SilhouetteTarget, sharpness=2.0, lam1=1.0, lam2=1.0, grad=True,
                   union: str = "soft"):
    """Silhouette energy of projected capsules against a target, fused with its gradient.

    Returns ``(energy, Capsules2D-of-gradients)``; the gradient is None when
    ``grad`` is false.
    """
    kernel = {"soft": _soft_union_energy, "max": _max_union_energy}.get(union)
    if kernel is None:
        raise ValueError(f"union must be 'soft' or 'max', got {union!r}")
    e, gA, gB, gra, grb = kernel(*_arrays(caps), target.dt_mask, target.dt_inv, target.weights,
                                 float(sharpness), float(lam1), float(lam2), grad)
    if not grad:
        return e, None
    return e, Capsules2D(gA, gB, gra, grb)


def hull_inside_bruteforce(px, py, a, b, ra, rb, samples: int = 2001) -> bool:
    """Membership test in the convex hull of two discs by sweeping interpolated discs."""
    t = np.linspace(0.0, 1.0, samples)
    cx = a[0] + t * (b[0] - a[0])
    cy = a[1] + t * (b[1] - a[1])
    r = ra + t * (rb - ra)
    return bool(np.any(np.hypot(px - cx, py - cy) <= r))


# ---------------------------------------------------------------------------
# mask files


def read_mask(path) -> np.ndarray:
    """Binary mask from an 8-bit PGM (P5) or PNG; any nonzero pixel is foreground."""
    path = os.fspath(path)
    with open(path, "rb") as fh:
        head = fh.read(2)
    if head == b"P5":
        return _read_pgm(path) > 0
    from PIL import Image

    with Image.open(path) as im:
        return np.asarray(im.convert("L")) > 0


def _read_pgm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        data = fh.read()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            while data[pos:pos + 1] not in (b"\n", b""):
                pos += 1
            continue
        start = pos
        while not data[pos:pos + 1].isspace():
            pos += 1
        tokens.append(data[start:pos])
    if tokens[0] != b"P5":
        raise ValueError(f"{path}: not a binary PGM")
    W, H, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    if maxval > 255:
        raise ValueError(f"{path}: only 8-bit PGM is supported")
    pos += 1
    return np.frombuffer(data[pos:pos + W * H], dtype=np.uint8).reshape(H, W)


def write_mask(path, mask) -> None:
    mask = np.asarray(mask, dtype=bool)
    H, W = mask.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{W} {H}\n255\n".encode("ascii"))
        fh.write((mask.astype(np.uint8) * 255).tobytes())
