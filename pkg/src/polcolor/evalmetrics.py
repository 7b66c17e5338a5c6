"""Similarity metrics between reconstructed and reference covariance images."""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from . import polmath, quantizer

__all__ = [
    "COV_CHANNELS",
    "HIST_BIN_WIDTH",
    "HIST_RANGE",
    "MetricReport",
    "mae",
    "coi",
    "bartlett",
    "bartlett_histogram",
    "evaluate",
]

# Complex channel planes reported by COI, as (name, row, col).
COV_CHANNELS = (
    ("C11", 0, 0),
    ("C22", 1, 1),
    ("C33", 2, 2),
    ("C13", 0, 2),
    ("C23", 1, 2),
    ("C12", 0, 1),
)
HIST_BIN_WIDTH = 0.1
HIST_RANGE = (0.0, 10.0)
RIDGE = 1e-10


def mae(a, b) -> float:
    """Mean absolute difference of two equally shaped planes."""
    a = np.asarray(a)
    b = np.asarray(b)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    return float(np.mean(np.abs(a - b)))


def coi(a, b) -> complex:
    """Normalized complex inner product of two planes; modulus at most 1."""
    a = np.asarray(a, dtype=np.complex128)
    b = np.asarray(b, dtype=np.complex128)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    ea = np.sum(np.abs(a) ** 2)
    eb = np.sum(np.abs(b) ** 2)
    if ea == 0 or eb == 0:
        raise ValueError("undefined coherency")
    return complex(np.sum(a * np.conj(b)) / np.sqrt(ea * eb))


def _regularize(m: np.ndarray) -> np.ndarray:
    vals = np.linalg.eigvalsh(m)
    tr = np.real(np.trace(m, axis1=-2, axis2=-1))
    scale = np.maximum(tr, np.finfo(float).tiny)
    if np.any(vals[..., 0] < -1e-9 * scale):
        raise ValueError("matrix is not positive semi-definite")
    # numerically zero eigenvalue: anything at or below the ridge itself
    singular = vals[..., 0] <= RIDGE * scale
    ridge = np.where(singular, RIDGE * scale, 0.0)
    return m + ridge[..., None, None] * np.eye(3)


def _logdet(m: np.ndarray) -> np.ndarray:
    sign, logdet = np.linalg.slogdet(m)
    return logdet


def bartlett(a, b) -> np.ndarray:
    """Bartlett distance ``2 ln(det((A+B)/2) / sqrt(det A det B))``.

    Matrices with a numerically zero eigenvalue (at most ``1e-10 * trace``)
    get a ridge of ``1e-10 * trace`` first; clearly indefinite inputs raise ``ValueError``.
    """
    a = _regularize(np.asarray(a, dtype=np.complex128))
    b = _regularize(np.asarray(b, dtype=np.complex128))
    d = 2.0 * _logdet(0.5 * (a + b)) - _logdet(a) - _logdet(b)
    return np.maximum(d, 0.0) if np.ndim(d) else max(float(d), 0.0)


def bartlett_histogram(distances: np.ndarray) -> np.ndarray:
    """Counts in 0.1-wide bins over [0, 10) plus one overflow bin at the end."""
    d = np.asarray(distances, dtype=np.float64).ravel()
    n_bins = int(round((HIST_RANGE[1] - HIST_RANGE[0]) / HIST_BIN_WIDTH))
    idx = np.floor((d - HIST_RANGE[0]) / HIST_BIN_WIDTH).astype(np.int64)
    idx = np.clip(idx, 0, n_bins)
    return np.bincount(idx, minlength=n_bins + 1)


@dataclass
class MetricReport:
    """Error table of one reconstruction.

    ``mae_total`` compares the reconstructed parameters with the truth;
    ``mae_quant`` and ``mae_quant_uniform`` only quantize and decode the truth
    through the histogram-equalized and uniform tables respectively.
    """

    mae_total: np.ndarray  # (9,)
    mae_quant: np.ndarray | None
    mae_quant_uniform: np.ndarray | None
    coi: np.ndarray  # (6,) complex, order of COV_CHANNELS
    bartlett_map: np.ndarray
    histogram: np.ndarray

    def rows(self) -> list[dict[str, str]]:
        rows = []
        for j, name in enumerate(polmath.PARAM_NAMES):
            rows.append({
                "name": name,
                "mae_uniform_quant": _fmt(None if self.mae_quant_uniform is None else self.mae_quant_uniform[j]),
                "mae_quant": _fmt(None if self.mae_quant is None else self.mae_quant[j]),
                "mae_total": _fmt(self.mae_total[j]),
                "coi_abs": "", "coi_re": "", "coi_im": "",
            })
        for (name, _, _), value in zip(COV_CHANNELS, self.coi):
            rows.append({
                "name": name,
                "mae_uniform_quant": "", "mae_quant": "", "mae_total": "",
                "coi_abs": _fmt(abs(value)), "coi_re": _fmt(value.real), "coi_im": _fmt(value.imag),
            })
        d = self.bartlett_map
        rows.append({
            "name": "bartlett_median",
            "mae_uniform_quant": "", "mae_quant": "", "mae_total": _fmt(float(np.median(d))),
            "coi_abs": "", "coi_re": "", "coi_im": "",
        })
        return rows

    def to_csv(self, path) -> None:
        fields = ["name", "mae_uniform_quant", "mae_quant", "mae_total", "coi_abs", "coi_re", "coi_im"]
        with open(path, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=fields, lineterminator="\n")
            writer.writeheader()
            writer.writerows(self.rows())

    def histogram_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["bin_start", "bin_end", "count"])
            for i, count in enumerate(self.histogram):
                lo = HIST_RANGE[0] + i * HIST_BIN_WIDTH
                hi = lo + HIST_BIN_WIDTH if i < len(self.histogram) - 1 else float("inf")
                writer.writerow([f"{lo:.1f}", f"{hi:.1f}" if np.isfinite(hi) else "inf", int(count)])


def _fmt(value) -> str:
    return "" if value is None else f"{float(value):.6g}"


def evaluate(recon: np.ndarray, truth: np.ndarray, tables=None, k: int = quantizer.DEFAULT_BINS,
             recon_params: np.ndarray | None = None) -> MetricReport:
    """All metrics for covariance rasters of shape ``(H, W, 3, 3)``.

    Args:
        tables: quantizer tables for the quantization-only error; when
            omitted, equalized tables are fitted on the truth itself.
        recon_params: decoded parameter planes ``(H, W, 9)`` if available;
            otherwise they are recomputed by normalizing ``recon``.
    """
    recon = np.asarray(recon)
    truth = np.asarray(truth)
    if recon.shape != truth.shape or recon.shape[-2:] != (3, 3):
        raise ValueError(f"shape mismatch: {recon.shape} vs {truth.shape}")
    true_params = polmath.normalize(truth)[0].to_params()
    if recon_params is None:
        recon_params = polmath.normalize(recon)[0].to_params()
    if recon_params.shape != true_params.shape:
        raise ValueError("decoded parameter planes do not match the truth")
    mae_total = np.array([mae(recon_params[..., j], true_params[..., j]) for j in range(9)])

    if tables is None:
        tables = quantizer.fit_all(true_params, k)
    uniform = [quantizer.fit_uniform(t.k, quantizer.PARAM_RANGES[j], j) for j, t in enumerate(tables)]
    mae_q = np.empty(9)
    mae_qu = np.empty(9)
    for j in range(9):
        plane = true_params[..., j]
        for out, tab in ((mae_q, tables[j]), (mae_qu, uniform[j])):
            decoded = tab.centers[quantizer.encode(plane, tab)]
            out[j] = mae(decoded, plane)

    coi_vals = np.array([coi(recon[..., r, c], truth[..., r, c]) for _, r, c in COV_CHANNELS])
    dmap = bartlett(recon, truth)
    return MetricReport(mae_total, mae_q, mae_qu, coi_vals, dmap, bartlett_histogram(dmap))
