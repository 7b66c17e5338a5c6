"""Polarimetric target decompositions on covariance / coherency matrices.

All functions accept a single ``(3, 3)`` matrix or a stack ``(..., 3, 3)``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import polmath

__all__ = [
    "FreemanPowers",
    "HAlpha",
    "ZONES",
    "pauli_rgb",
    "freeman_durden",
    "cloude_pottier",
    "h_alpha_classify",
]


@dataclass(frozen=True)
class FreemanPowers:
    ps: np.ndarray  # surface
    pd: np.ndarray  # double bounce
    pv: np.ndarray  # volume


@dataclass(frozen=True)
class HAlpha:
    entropy: np.ndarray
    alpha: np.ndarray  # degrees
    probabilities: np.ndarray  # (..., 3), descending


# Zone id -> (name, entropy band, alpha range in degrees).  Intervals are
# half-open [lo, hi); the infeasible high-entropy/low-alpha corner is folded
# into the high-entropy vegetation zone.
ZONES = {
    1: ("high-entropy multiple scattering", (0.9, 1.0), (55.0, 90.0)),
    2: ("high-entropy vegetation", (0.9, 1.0), (0.0, 55.0)),
    3: ("medium-entropy multiple scattering", (0.5, 0.9), (50.0, 90.0)),
    4: ("medium-entropy vegetation", (0.5, 0.9), (40.0, 50.0)),
    5: ("medium-entropy surface", (0.5, 0.9), (0.0, 40.0)),
    6: ("low-entropy multiple scattering", (0.0, 0.5), (47.5, 90.0)),
    7: ("low-entropy dipole", (0.0, 0.5), (42.5, 47.5)),
    8: ("low-entropy surface", (0.0, 0.5), (0.0, 42.5)),
}


def pauli_rgb(c: np.ndarray):
    """Pauli powers ``(|Shh-Svv|^2/2, 2|Shv|^2, |Shh+Svv|^2/2)`` as ``(r, g, b)``."""
    c = np.asarray(c)
    c11 = c[..., 0, 0].real
    c22 = c[..., 1, 1].real
    c33 = c[..., 2, 2].real
    re13 = c[..., 0, 2].real
    r = np.clip(0.5 * (c11 + c33 - 2.0 * re13), 0.0, None)
    g = np.clip(c22, 0.0, None)
    b = np.clip(0.5 * (c11 + c33 + 2.0 * re13), 0.0, None)
    return r, g, b


def freeman_durden(c: np.ndarray, eps: float = 1e-12) -> FreemanPowers:
    """Three-component Freeman-Durden powers.

    The volume contribution is fitted from the cross-pol channel and
    removed.  If either co-pol power left over is not positive the whole span
    is assigned to volume.  Otherwise the rank-2 co-pol system is solved with
    alpha = -1 (surface dominant, ``Re C13 >= 0`` after removal) or beta = 1.
    A negative surface or double-bounce power is clamped to zero and its
    deficit taken from the other co-pol term, so the three powers always sum
    to the span.
    """
    c = np.asarray(c, dtype=np.complex128)
    total = polmath.span(c)
    c11 = c[..., 0, 0].real
    c22 = c[..., 1, 1].real
    c33 = c[..., 2, 2].real
    c13 = c[..., 0, 2]

    fv = 1.5 * c22
    a11 = c11 - fv
    a33 = c33 - fv
    a13 = c13 - fv / 3.0
    floor = eps * np.maximum(total, np.finfo(float).tiny)
    volume_only = (a11 <= floor) | (a33 <= floor)

    a11s = np.where(volume_only, 1.0, a11)
    a33s = np.where(volume_only, 1.0, a33)
    a13s = np.where(volume_only, 0.0, a13)
    # non-realizable co-pol correlation: shrink |C13| to sqrt(C11 C33)
    mag2 = np.abs(a13s) ** 2
    lim = a11s * a33s
    a13s = np.where(mag2 > lim, a13s * np.sqrt(lim / np.where(mag2 > 0, mag2, 1.0)), a13s)
    re = a13s.real
    det = a11s * a33s - np.abs(a13s) ** 2

    surface_dom = re >= 0.0
    copol = a11s + a33s
    # alpha = -1: double-bounce power 2 fd, surface takes the rest
    # beta = 1: surface power 2 fs, double bounce takes the rest
    with np.errstate(divide="ignore", invalid="ignore"):
        pd1 = 2.0 * det / (copol + 2.0 * re)
        ps2 = 2.0 * det / (copol - 2.0 * re)
    ps = np.where(surface_dom, copol - pd1, ps2)
    pd = np.where(surface_dom, pd1, copol - ps2)

    # clamp and hand the deficit to the other co-pol term
    ps, pd = np.where(ps < 0, 0.0, ps), np.where(ps < 0, pd + ps, pd)
    ps, pd = np.where(pd < 0, ps + pd, ps), np.where(pd < 0, 0.0, pd)

    pv = np.where(volume_only, total, 4.0 * c22)
    ps = np.where(volume_only, 0.0, ps)
    pd = np.where(volume_only, 0.0, pd)
    return FreemanPowers(ps, pd, pv)


def cloude_pottier(t: np.ndarray) -> HAlpha:
    """Entropy and mean alpha angle from a coherency matrix.

    Raises:
        ValueError: ``"zero-power pixel"`` when any trace is not positive.
    """
    t = np.asarray(t, dtype=np.complex128)
    tr = polmath.span(t)
    if np.any(~(tr > 0.0)):
        raise ValueError("zero-power pixel")
    vals, vecs = np.linalg.eigh(t)
    vals = np.clip(vals[..., ::-1], 0.0, None)
    vecs = vecs[..., :, ::-1]
    p = vals / np.sum(vals, axis=-1, keepdims=True)
    with np.errstate(divide="ignore", invalid="ignore"):
        plogp = np.where(p > 0, p * np.log(p), 0.0)
    entropy = np.clip(-np.sum(plogp, axis=-1) / np.log(3.0), 0.0, 1.0)
    alphas = np.degrees(np.arccos(np.clip(np.abs(vecs[..., 0, :]), 0.0, 1.0)))
    alpha = np.sum(p * alphas, axis=-1)
    return HAlpha(entropy, alpha, p)


def h_alpha_classify(h, alpha_deg) -> np.ndarray:
    """Zone id (1-8, see ``ZONES``) of entropy/alpha pairs."""
    h = np.asarray(h, dtype=np.float64)
    a = np.asarray(alpha_deg, dtype=np.float64)
    if np.any((h < 0) | (h > 1) | np.isnan(h)) or np.any((a < 0) | (a > 90) | np.isnan(a)):
        raise ValueError("entropy must lie in [0, 1] and alpha in [0, 90] degrees")
    low = np.where(a < 42.5, 8, np.where(a < 47.5, 7, 6))
    mid = np.where(a < 40.0, 5, np.where(a < 50.0, 4, 3))
    high = np.where(a < 55.0, 2, 1)
    return np.where(h < 0.5, low, np.where(h < 0.9, mid, high)).astype(np.int32)
