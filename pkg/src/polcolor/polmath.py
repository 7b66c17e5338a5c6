"""Polarimetric covariance algebra.

Covariance matrices are handled as complex arrays of shape ``(..., 3, 3)`` in
the lexicographic basis ``k = (Shh, sqrt(2) Shv, Svv)``.  Every function is
vectorized over the leading axes, so a whole image can be passed at once.

The normalized feature of a covariance matrix ``C`` with span ``P`` is the
triple of power ratios ``delta = diag(C) / P`` plus the three complex channel
correlations ``rho = (rho13, rho23, rho12)``.  ``C`` is recovered from the
feature and ``P`` exactly, and a reconstructed feature that is not a valid
(positive semi-definite) correlation structure can be repaired in closed form
by :func:`psd_correct`.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

__all__ = [
    "Channel",
    "PolFeature",
    "PsdReport",
    "DELTA_FLOOR",
    "PSD_TOLERANCE",
    "covariance_from_looks",
    "span",
    "normalize",
    "reconstruct",
    "power_from_channel",
    "recover_power",
    "psd_margin",
    "psd_check",
    "psd_correct",
    "covariance_to_coherency",
    "hermitian",
    "PARAM_NAMES",
]

DELTA_FLOOR = 1e-6
PSD_TOLERANCE = 1e-9

# Order of the nine real parameters predicted by the translator heads.
PARAM_NAMES = (
    "delta1",
    "delta2",
    "delta3",
    "Re(rho13)",
    "Im(rho13)",
    "Re(rho23)",
    "Im(rho23)",
    "Re(rho12)",
    "Im(rho12)",
)

_PAULI = np.array(
    [[1.0, 0.0, 1.0], [1.0, 0.0, -1.0], [0.0, np.sqrt(2.0), 0.0]]
) / np.sqrt(2.0)


class Channel(enum.Enum):
    """Single-pol input channel, valued by its diagonal index in ``C``."""

    HH = 0
    HV = 1
    VV = 2

    @classmethod
    def parse(cls, value: "Channel | str") -> "Channel":
        if isinstance(value, cls):
            return value
        try:
            return cls[str(value).upper()]
        except KeyError:
            raise ValueError(f"unknown channel {value!r}; expected HH, HV or VV") from None


@dataclass(frozen=True)
class PolFeature:
    """Normalized polarimetric feature, possibly batched.

    Attributes:
        delta: real array ``(..., 3)`` holding (delta1, delta2, delta3).
        rho: complex array ``(..., 3)`` holding (rho13, rho23, rho12).
    """

    delta: np.ndarray
    rho: np.ndarray

    def __post_init__(self):
        delta = np.asarray(self.delta, dtype=np.float64)
        rho = np.asarray(self.rho, dtype=np.complex128)
        if delta.shape[-1:] != (3,) or rho.shape != delta.shape:
            raise ValueError(
                f"delta and rho must both have shape (..., 3); got {delta.shape} and {rho.shape}"
            )
        object.__setattr__(self, "delta", delta)
        object.__setattr__(self, "rho", rho)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.delta.shape[:-1]

    def to_params(self) -> np.ndarray:
        """Stack into the nine real parameters, last axis ordered as ``PARAM_NAMES``."""
        r = self.rho
        return np.concatenate(
            [
                self.delta,
                np.stack(
                    [r[..., 0].real, r[..., 0].imag, r[..., 1].real,
                     r[..., 1].imag, r[..., 2].real, r[..., 2].imag],
                    axis=-1,
                ),
            ],
            axis=-1,
        )

    @classmethod
    def from_params(cls, params: np.ndarray) -> "PolFeature":
        params = np.asarray(params, dtype=np.float64)
        if params.shape[-1:] != (9,):
            raise ValueError(f"expected (..., 9) parameters, got {params.shape}")
        rho = params[..., 3::2] + 1j * params[..., 4::2]
        return cls(params[..., :3].copy(), rho)

    def __getitem__(self, index) -> "PolFeature":
        return PolFeature(self.delta[index], self.rho[index])


@dataclass(frozen=True)
class PsdReport:
    """Outcome of a PSD check or correction (arrays broadcast like the feature).

    ``margin`` is the determinant of the unit-diagonal correlation matrix,
    ``eta`` the amplitude shrink applied to rho12/rho23 and ``delta_phi`` the
    total phase shift split evenly between them.
    """

    margin: np.ndarray
    satisfied: np.ndarray
    eta: np.ndarray
    delta_phi: np.ndarray


def hermitian(upper: np.ndarray) -> np.ndarray:
    """Mirror the upper triangle of ``(..., 3, 3)`` into a Hermitian matrix.

    Diagonal entries are forced real.
    """
    upper = np.asarray(upper, dtype=np.complex128)
    iu = np.triu_indices(3, 1)
    out = np.zeros_like(upper)
    out[..., iu[0], iu[1]] = upper[..., iu[0], iu[1]]
    out[..., iu[1], iu[0]] = np.conj(upper[..., iu[0], iu[1]])
    d = np.arange(3)
    out[..., d, d] = upper[..., d, d].real
    return out


def covariance_from_looks(looks) -> np.ndarray:
    """Multilook covariance ``mean_l k_l k_l^H``.

    Args:
        looks: scattering vectors, shape ``(L, ..., 3)``; a plain list of
            3-vectors also works.

    Returns:
        Hermitian PSD matrices of shape ``(..., 3, 3)``.
    """
    k = np.asarray(looks, dtype=np.complex128)
    if k.ndim == 0 or k.shape[0] == 0:
        raise ValueError("no looks")
    if k.shape[-1] != 3:
        raise ValueError(f"scattering vectors must have 3 components, got shape {k.shape}")
    if not np.all(np.isfinite(k)):
        raise ValueError("scattering vectors must be finite")
    c = np.einsum("l...i,l...j->...ij", k, np.conj(k)) / k.shape[0]
    return hermitian(c)


def span(c: np.ndarray) -> np.ndarray:
    """Total power ``trace(C)``."""
    c = np.asarray(c)
    return np.real(np.trace(c, axis1=-2, axis2=-1))


def _correlation(cij: np.ndarray, cii: np.ndarray, cjj: np.ndarray) -> np.ndarray:
    denom = np.sqrt(np.clip(cii, 0.0, None) * np.clip(cjj, 0.0, None))
    ok = denom > 0.0
    return np.where(ok, cij / np.where(ok, denom, 1.0), 0.0)


def normalize(c: np.ndarray) -> tuple[PolFeature, np.ndarray]:
    """Split covariance matrices into normalized features and span.

    Channels with zero power get a zero correlation coefficient; the matching
    reconstruction entries are multiplied by zero anyway.

    Raises:
        ValueError: if any matrix has non-positive span.
    """
    c = np.asarray(c, dtype=np.complex128)
    p = span(c)
    if np.any(~(p > 0.0)):
        raise ValueError("zero-power pixel")
    c11 = c[..., 0, 0].real
    c22 = c[..., 1, 1].real
    c33 = c[..., 2, 2].real
    delta = np.stack([c11, c22, c33], axis=-1) / p[..., None]
    rho = np.stack(
        [
            _correlation(c[..., 0, 2], c11, c33),
            _correlation(c[..., 1, 2], c22, c33),
            _correlation(c[..., 0, 1], c11, c22),
        ],
        axis=-1,
    )
    return PolFeature(delta, rho), p


def reconstruct(feat: PolFeature, power) -> np.ndarray:
    """Covariance ``P * C_norm(feat)``; Hermitian by construction."""
    d = np.clip(feat.delta, 0.0, None)
    power = np.asarray(power, dtype=np.float64)
    r13, r23, r12 = feat.rho[..., 0], feat.rho[..., 1], feat.rho[..., 2]
    upper = np.zeros(feat.shape + (3, 3), dtype=np.complex128)
    upper[..., 0, 0] = d[..., 0]
    upper[..., 1, 1] = d[..., 1]
    upper[..., 2, 2] = d[..., 2]
    upper[..., 0, 1] = r12 * np.sqrt(d[..., 0] * d[..., 1])
    upper[..., 0, 2] = r13 * np.sqrt(d[..., 0] * d[..., 2])
    upper[..., 1, 2] = r23 * np.sqrt(d[..., 1] * d[..., 2])
    return hermitian(upper * power[..., None, None])


def recover_power(intensity, delta: np.ndarray, channel, floor: float = DELTA_FLOOR):
    """Total power from one channel intensity, with per-pixel fallback.

    Where the channel's power ratio is at or below ``floor`` the power cannot
    be recovered and the intensity itself is used instead.

    Returns:
        ``(power, fallback)`` where ``fallback`` is a boolean mask.
    """
    channel = Channel.parse(channel)
    intensity = np.asarray(intensity, dtype=np.float64)
    ratio = np.asarray(delta, dtype=np.float64)[..., channel.value]
    fallback = ~(ratio > floor)
    power = np.where(fallback, intensity, intensity / np.where(fallback, 1.0, ratio))
    return power, fallback


def power_from_channel(channel_intensity, feat: PolFeature, channel) -> np.ndarray:
    """Invert one diagonal entry of ``C`` for the total power.

    Raises:
        ValueError: ``"unrecoverable power"`` when the channel's ratio is at or
            below ``DELTA_FLOOR``; callers wanting a fallback use
            :func:`recover_power`.
    """
    power, fallback = recover_power(channel_intensity, feat.delta, channel)
    if np.any(fallback):
        raise ValueError("unrecoverable power")
    return power


def psd_margin(rho: np.ndarray) -> np.ndarray:
    """Determinant of the unit-diagonal correlation matrix built from ``rho``."""
    r13, r23, r12 = rho[..., 0], rho[..., 1], rho[..., 2]
    return (
        1.0
        + 2.0 * np.real(r12 * r23 * np.conj(r13))
        - np.abs(r13) ** 2
        - np.abs(r23) ** 2
        - np.abs(r12) ** 2
    )


def psd_check(feat: PolFeature, tolerance: float = PSD_TOLERANCE) -> PsdReport:
    margin = psd_margin(feat.rho)
    return PsdReport(
        margin=margin,
        satisfied=margin >= -tolerance,
        eta=np.ones_like(margin),
        delta_phi=np.zeros_like(margin),
    )


def psd_correct(feat: PolFeature, tolerance: float = PSD_TOLERANCE) -> tuple[PolFeature, PsdReport]:
    """Repair rho12 and rho23 so the reconstructed matrix is PSD.

    rho13 is left alone.  Pixels already within ``tolerance`` are returned
    untouched (bit-identical).  For the others, the cross-pol amplitudes are
    first shrunk by a common factor until the amplitude-only bound holds with
    equality, then the two cross-pol phases are rotated by the same amount so
    the closing phase ``phi12 + phi23 - phi13`` lands on ``acos(R)``.
    """
    rho = feat.rho
    margin = psd_margin(rho)
    bad = margin < -tolerance

    r13 = np.minimum(np.abs(rho[..., 0]), 1.0)
    r23 = np.abs(rho[..., 1])
    r12 = np.abs(rho[..., 2])

    # step a: amplitude shrink, written without dividing by r12*r13*r23
    excess = r13**2 + r23**2 + r12**2 - 1.0
    amp_bad = bad & (excess > 2.0 * r12 * r13 * r23)
    denom = r23**2 + r12**2 - 2.0 * r13 * r23 * r12
    safe = np.where(amp_bad, denom, 1.0)
    eta = np.where(amp_bad, np.sqrt(np.clip(1.0 - r13**2, 0.0, None) / safe), 1.0)
    eta = np.minimum(eta, 1.0)
    r23a = eta * r23
    r12a = eta * r12

    # step b: phase rotation to reach cos(psi) = R
    prod = 2.0 * r12a * r13 * r23a
    has_prod = prod > 0.0
    with np.errstate(over="ignore"):
        ratio = np.where(
            has_prod,
            (r13**2 + r23a**2 + r12a**2 - 1.0) / np.where(has_prod, prod, 1.0),
            -np.inf,
        )
    ratio = np.clip(ratio, -1.0, 1.0)
    psi = np.angle(rho[..., 2] * rho[..., 1] * np.conj(rho[..., 0]))
    phase_bad = bad & has_prod & (np.cos(psi) < ratio)
    delta_phi = np.where(phase_bad, np.arccos(ratio) - psi, 0.0)

    rot = eta * np.exp(0.5j * delta_phi)
    new_rho = rho.copy()
    new_rho[..., 1] = np.where(bad, rho[..., 1] * rot, rho[..., 1])
    new_rho[..., 2] = np.where(bad, rho[..., 2] * rot, rho[..., 2])

    out = PolFeature(feat.delta, new_rho)
    new_margin = np.where(bad, psd_margin(new_rho), margin)
    report = PsdReport(
        margin=new_margin,
        satisfied=new_margin >= -tolerance,
        eta=eta,
        delta_phi=delta_phi,
    )
    return out, report


def covariance_to_coherency(c: np.ndarray) -> np.ndarray:
    """Lexicographic covariance to Pauli coherency, ``T = U C U^H``."""
    c = np.asarray(c, dtype=np.complex128)
    t = _PAULI @ c @ _PAULI.T
    return hermitian(t)
