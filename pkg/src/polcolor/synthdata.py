"""Synthetic multilook full-pol scenes.

A scene is a class map whose regions are filled with circular complex
Gaussian speckle drawn from each class's covariance.  Classes may carry a
speckle correlation length, which gives them a spatial texture without
changing their per-pixel statistics.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from . import polmath
from .polmath import Channel, PolFeature

__all__ = [
    "ClassArchetype",
    "SceneSpec",
    "Scene",
    "ARCHETYPES",
    "REGION_MODELS",
    "generate_class_map",
    "sample_looks",
    "render_scene",
]

REGION_MODELS = ("voronoi", "blobs", "stripes")


@dataclass(frozen=True)
class ClassArchetype:
    name: str
    feature: PolFeature
    power: float
    texture_scale: float = 0.0

    def __post_init__(self):
        if not self.power > 0:
            raise ValueError(f"archetype {self.name!r}: power must be positive")
        if self.texture_scale < 0:
            raise ValueError(f"archetype {self.name!r}: negative texture scale")
        if self.feature.shape != ():
            raise ValueError("archetype feature must describe a single pixel")
        if not polmath.psd_check(self.feature).satisfied:
            raise ValueError(f"archetype {self.name!r}: feature is not positive semi-definite")

    @property
    def covariance(self) -> np.ndarray:
        return polmath.reconstruct(self.feature, self.power)


ARCHETYPES = {
    # single bounce, low entropy
    "sea": ClassArchetype("sea", PolFeature([0.45, 0.02, 0.53], [0.9, 0.0, 0.0]), 0.01, 0.0),
    # volume-like, strong cross-pol, medium entropy
    "vegetation": ClassArchetype(
        "vegetation", PolFeature([0.57, 0.33, 0.10], [0.78, 0.0, 0.0]), 0.1, 1.5
    ),
    # double bounce: co-pol correlation with phase pi
    "urban": ClassArchetype(
        "urban", PolFeature([0.50, 0.12, 0.38], [0.5 * np.exp(1j * np.pi), 0.0, 0.0]), 0.5, 0.7
    ),
}


@dataclass(frozen=True)
class SceneSpec:
    width: int = 64
    height: int = 64
    seed: int = 0
    region_model: str = "voronoi"
    classes: tuple[str, ...] = ("sea", "vegetation", "urban")
    looks: int = 9
    sites: int | None = None

    def __post_init__(self):
        object.__setattr__(self, "classes", tuple(self.classes))
        if self.width < 4 or self.height < 4 or self.width % 4 or self.height % 4:
            raise ValueError(f"scene dimensions must be positive multiples of 4, got {self.width}x{self.height}")
        if self.looks < 1:
            raise ValueError("looks must be >= 1")
        if self.region_model not in REGION_MODELS:
            raise ValueError(f"unknown region model {self.region_model!r}")
        if not self.classes:
            raise ValueError("a scene needs at least one class")
        if self.sites is not None and self.sites < len(self.classes):
            raise ValueError("need at least one site per class")

    @property
    def n_sites(self) -> int:
        return self.sites if self.sites is not None else 2 * len(self.classes)


@dataclass
class Scene:
    covariance: np.ndarray  # (H, W, 3, 3)
    classes: np.ndarray  # (H, W) indices into spec.classes
    spec: SceneSpec
    intensity: dict[Channel, np.ndarray] = field(default_factory=dict)


def _voronoi(spec: SceneSpec, rng: np.random.Generator) -> np.ndarray:
    h, w, n = spec.height, spec.width, spec.n_sites
    min_dist = 0.5 * np.sqrt(h * w / n)
    sites: list[tuple[int, int]] = []
    for _ in range(10000):
        if len(sites) == n:
            break
        cand = (int(rng.integers(h)), int(rng.integers(w)))
        if all(np.hypot(cand[0] - a, cand[1] - b) >= min_dist for a, b in sites):
            sites.append(cand)
    if len(sites) < n:
        raise RuntimeError("could not place voronoi sites")
    yy, xx = np.mgrid[0:h, 0:w]
    pts = np.array(sites)
    d2 = (yy[..., None] - pts[:, 0]) ** 2 + (xx[..., None] - pts[:, 1]) ** 2
    owner = np.argmin(d2, axis=-1)
    site_class = rng.permutation(np.arange(n) % len(spec.classes))
    return site_class[owner]


def _blobs(spec: SceneSpec, rng: np.random.Generator) -> np.ndarray:
    h, w, k = spec.height, spec.width, len(spec.classes)
    sigma = min(h, w) / 8.0
    for _ in range(100):
        noise = rng.standard_normal((k, h, w))
        smooth = ndimage.gaussian_filter(noise, sigma=(0, sigma, sigma), mode="wrap")
        labels = np.argmax(smooth, axis=0)
        if np.unique(labels).size == k:
            return labels
    raise RuntimeError("could not draw a blob map containing every class")


def _stripes(spec: SceneSpec) -> np.ndarray:
    k = len(spec.classes)
    n = max(spec.n_sites if spec.sites is not None else k, k)
    cols = (np.arange(spec.width) * n) // spec.width
    return np.broadcast_to(cols % k, (spec.height, spec.width)).copy()


def generate_class_map(spec: SceneSpec) -> np.ndarray:
    """Integer class raster; a function of ``spec`` alone."""
    rng = np.random.default_rng([spec.seed, 0])
    if spec.region_model == "voronoi":
        labels = _voronoi(spec, rng)
    elif spec.region_model == "blobs":
        labels = _blobs(spec, rng)
    else:
        labels = _stripes(spec)
    return labels.astype(np.int32)


def _factor(cov: np.ndarray) -> np.ndarray:
    """``L`` with ``L L^H = cov``: Cholesky, or the eigen square root when singular."""
    try:
        return np.linalg.cholesky(cov)
    except np.linalg.LinAlgError:
        vals, vecs = np.linalg.eigh(cov)
        return vecs * np.sqrt(np.clip(vals, 0.0, None))


def _white(rng: np.random.Generator, shape) -> np.ndarray:
    return (rng.standard_normal(shape) + 1j * rng.standard_normal(shape)) / np.sqrt(2.0)


def sample_looks(archetype: ClassArchetype, n_looks: int, rng: np.random.Generator) -> np.ndarray:
    """``n_looks`` independent scattering vectors ``L z`` with ``z ~ CN(0, I)``.

    Returns:
        complex array ``(n_looks, 3)``.
    """
    if n_looks < 1:
        raise ValueError("need at least one look")
    z = _white(rng, (n_looks, 3))
    return z @ _factor(archetype.covariance).T


def _correlated(rng: np.random.Generator, looks: int, h: int, w: int, scale: float) -> np.ndarray:
    z = _white(rng, (looks, h, w, 3))
    if scale <= 0:
        return z
    sigma = (0, scale, scale, 0)
    delta = np.zeros((1, h, w, 1))
    delta[0, h // 2, w // 2, 0] = 1.0
    energy = np.sum(ndimage.gaussian_filter(delta, sigma, mode="wrap") ** 2)
    re = ndimage.gaussian_filter(z.real, sigma, mode="wrap")
    im = ndimage.gaussian_filter(z.imag, sigma, mode="wrap")
    return (re + 1j * im) / np.sqrt(energy)


def render_scene(spec: SceneSpec, archetypes: dict[str, ClassArchetype] | None = None) -> Scene:
    """Draw a multilook covariance image for ``spec``.

    Every pixel averages ``spec.looks`` outer products of vectors drawn from
    its class covariance.  Classes sharing a texture scale share one noise
    field; each field is spatially correlated but keeps unit variance, so the
    per-pixel expectation is exactly the class covariance.
    """
    archetypes = ARCHETYPES if archetypes is None else archetypes
    missing = [c for c in spec.classes if c not in archetypes]
    if missing:
        raise ValueError(f"unknown classes {missing}")
    labels = generate_class_map(spec)
    h, w = labels.shape
    rng = np.random.default_rng([spec.seed, 1])
    fields = {}
    for name in spec.classes:
        scale = archetypes[name].texture_scale
        if scale not in fields:
            fields[scale] = _correlated(rng, spec.looks, h, w, scale)

    k = np.zeros((spec.looks, h, w, 3), dtype=np.complex128)
    for idx, name in enumerate(spec.classes):
        arch = archetypes[name]
        mask = labels == idx
        z = fields[arch.texture_scale][:, mask]
        k[:, mask] = z @ _factor(arch.covariance).T
    cov = polmath.covariance_from_looks(k)
    intensity = {ch: cov[..., ch.value, ch.value].real.copy() for ch in Channel}
    return Scene(cov, labels, spec, intensity)
