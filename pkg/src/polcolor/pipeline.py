"""Single-pol to full-pol reconstruction pipeline.

A convolutional extractor turns the log-scaled intensity patch into seven
ReLU feature maps at three scales.  The maps are bilinearly upsampled back to
the patch size, standardized per channel, and stacked with the input pixel
into one hypercolumn per pixel.  A fully connected translator with a shared
trunk and nine softmax heads predicts a distribution over quantizer bins for
each of the nine normalized polarimetric parameters.  Decoding the heads,
repairing positive semi-definiteness and restoring the total power from the
input channel yields a covariance matrix per pixel.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from . import neuralnet as nn
from . import polmath, quantizer
from .polmath import Channel, PolFeature

__all__ = [
    "ExtractorConfig",
    "TranslatorConfig",
    "TrainConfig",
    "NormStats",
    "Model",
    "ModelCheckpoint",
    "ColorizeResult",
    "DESK_EXTRACTOR",
    "PAPER_EXTRACTOR",
    "DESK_TRANSLATOR",
    "PAPER_TRANSLATOR",
    "FLAG_POWER_FALLBACK",
    "FLAG_DELTA_FALLBACK",
    "preprocess_intensity",
    "extract_features",
    "feature_stats",
    "apply_norm",
    "fit_norm_stats",
    "build_hypercolumn",
    "hypercolumns",
    "translate",
    "loss_and_grads",
    "activation_pattern",
    "make_patches",
    "train",
    "decode_features",
    "colorize",
]

log = logging.getLogger(__name__)

FLAG_POWER_FALLBACK = 1
FLAG_DELTA_FALLBACK = 2
SIGMA_FLOOR = 1e-8


@dataclass(frozen=True)
class ExtractorConfig:
    """Seven 3x3 conv widths; pools follow the 2nd and 4th conv."""

    widths: tuple[int, ...] = (8, 8, 16, 16, 32, 32, 32)
    db_floor: float = -25.0

    def __post_init__(self):
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))
        if len(self.widths) != 7 or min(self.widths) < 1:
            raise ValueError("the extractor has exactly seven positive conv widths")
        if not self.db_floor < 0:
            raise ValueError("db_floor must be negative")

    def layer_specs(self) -> list[nn.LayerSpec]:
        specs = []
        c_in = 1
        for i, w in enumerate(self.widths):
            specs.append(nn.LayerSpec("conv3x3", c_in, w))
            specs.append(nn.LayerSpec("relu"))
            if i in (1, 3):
                specs.append(nn.LayerSpec("maxpool2x2", stride=2))
            c_in = w
        return specs

    def feature_layers(self) -> list[int]:
        """Indices (into :meth:`layer_specs`) of the ReLU outputs that feed hypercolumns."""
        return [i for i, s in enumerate(self.layer_specs()) if s.kind == "relu"]

    @property
    def n_features(self) -> int:
        return sum(self.widths)

    @property
    def hypercolumn_length(self) -> int:
        return 1 + self.n_features

    pool_factor = 4


@dataclass(frozen=True)
class TranslatorConfig:
    trunk: tuple[int, ...] = (128, 64)
    head_hidden: int = 32
    heads: int = 9
    bins: int = quantizer.DEFAULT_BINS

    def __post_init__(self):
        object.__setattr__(self, "trunk", tuple(int(w) for w in self.trunk))
        if self.heads != 9:
            raise ValueError("the translator predicts exactly nine parameters")
        if self.bins < 2 or self.head_hidden < 1 or not self.trunk or min(self.trunk) < 1:
            raise ValueError("invalid translator widths")

    def trunk_specs(self, input_length: int) -> list[nn.LayerSpec]:
        specs = []
        c_in = input_length
        for w in self.trunk:
            specs += [nn.LayerSpec("fully_connected", c_in, w), nn.LayerSpec("relu")]
            c_in = w
        return specs

    def head_specs(self) -> list[nn.LayerSpec]:
        return [
            nn.LayerSpec("fully_connected", self.trunk[-1], self.head_hidden),
            nn.LayerSpec("relu"),
            nn.LayerSpec("fully_connected", self.head_hidden, self.bins),
            nn.LayerSpec("softmax_head"),
        ]


DESK_EXTRACTOR = ExtractorConfig()
PAPER_EXTRACTOR = ExtractorConfig((64, 64, 128, 128, 256, 256, 256))
DESK_TRANSLATOR = TranslatorConfig()
PAPER_TRANSLATOR = TranslatorConfig((2048, 1024), 512)


@dataclass(frozen=True)
class TrainConfig:
    batch_pixels: int = 2000
    patch: int = 64
    epochs: int = 30
    seed: int = 0
    precision: str = "float32"
    learning_rate: float = 1e-4
    train_extractor: bool = True

    def __post_init__(self):
        if self.batch_pixels < 1:
            raise ValueError("batch_pixels must be >= 1")
        if self.patch < 2 * ExtractorConfig.pool_factor or self.patch % ExtractorConfig.pool_factor:
            raise ValueError("patch must be a multiple of 4 and at least 8")
        if self.precision not in ("float32", "float64"):
            raise ValueError("precision is float32 or float64")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")

    @property
    def dtype(self):
        return np.dtype(self.precision)


@dataclass(frozen=True)
class NormStats:
    mean: np.ndarray
    std: np.ndarray

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=np.float64)
        std = np.maximum(np.asarray(self.std, dtype=np.float64), SIGMA_FLOOR)
        if mean.shape != std.shape or mean.ndim != 1:
            raise ValueError("mean and std must be 1-D arrays of equal length")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "std", std)


@dataclass(frozen=True)
class Model:
    """Layer layout of extractor + translator over one flat :class:`NetParams`."""

    extractor: ExtractorConfig = DESK_EXTRACTOR
    translator: TranslatorConfig = DESK_TRANSLATOR

    @property
    def specs(self) -> list[nn.LayerSpec]:
        specs = self.extractor.layer_specs()
        specs += self.translator.trunk_specs(self.extractor.hypercolumn_length)
        for _ in range(self.translator.heads):
            specs += self.translator.head_specs()
        return specs

    @property
    def n_extractor(self) -> int:
        return len(self.extractor.layer_specs())

    @property
    def n_trunk(self) -> int:
        return 2 * len(self.translator.trunk)

    def head_slices(self) -> list[slice]:
        start = self.n_extractor + self.n_trunk
        n = len(self.translator.head_specs())
        return [slice(start + h * n, start + (h + 1) * n) for h in range(self.translator.heads)]

    def init_params(self, seed: int = 0, dtype=np.float64, zero_output: bool = True) -> nn.NetParams:
        """He-uniform init; the last layer of every head starts at zero (uniform softmax) unless disabled."""
        zero = [s.start + 2 for s in self.head_slices()] if zero_output else []
        return nn.init_params(self.specs, seed, dtype, zero)


@dataclass
class ModelCheckpoint:
    extractor: ExtractorConfig
    translator: TranslatorConfig
    train: TrainConfig
    params: nn.NetParams
    norm: NormStats
    quantizers: list[quantizer.QuantizerTable]
    adam: nn.AdamState | None = None
    epochs_done: int = 0
    version: int = 1

    @property
    def model(self) -> Model:
        return Model(self.extractor, self.translator)


@dataclass
class ColorizeResult:
    covariance: np.ndarray  # (H, W, 3, 3) complex
    params: np.ndarray  # (H, W, 9) decoded, corrected parameters
    flags: np.ndarray  # (H, W) uint8 bitmask
    probs: np.ndarray | None = None


def preprocess_intensity(intensity, db_floor: float = -25.0) -> np.ndarray:
    """Map linear intensity to ``[0, 1]`` through decibels clamped to ``[db_floor, 0]``."""
    x = np.asarray(intensity, dtype=np.float64)
    if np.any(x < 0) or np.any(np.isnan(x)):
        raise ValueError("intensity must be non-negative")
    with np.errstate(divide="ignore"):
        db = 10.0 * np.log10(x)
    db = np.clip(db, db_floor, 0.0)
    return (db - db_floor) / (-db_floor)


def _as_batch(image: np.ndarray) -> np.ndarray:
    image = np.asarray(image)
    if image.ndim == 2:
        image = image[None]
    if image.ndim != 3:
        raise ValueError(f"expected (H, W) or (N, H, W) image, got {image.shape}")
    return image[:, None]


def _extractor_forward(model: Model, params: nn.NetParams, x: np.ndarray):
    """Returns native-resolution ReLU maps plus the caches for backprop."""
    specs = model.extractor.layer_specs()
    wanted = set(model.extractor.feature_layers())
    maps, caches = [], []
    for i, spec in enumerate(specs):
        x, cache = nn.layer_forward(spec, params.layers[i], x)
        caches.append(cache)
        if i in wanted:
            maps.append(x)
    return maps, caches


def _raw_features(model: Model, params: nn.NetParams, x: np.ndarray):
    h, w = x.shape[-2:]
    if h % 4 or w % 4:
        raise ValueError(f"patch dimensions must be divisible by 4, got {h}x{w}")
    maps, caches = _extractor_forward(model, params, x)
    up = np.concatenate([nn.bilinear_upsample(m, h, w) for m in maps], axis=1)
    return up, maps, caches


def apply_norm(features: np.ndarray, stats: NormStats) -> np.ndarray:
    """Standardize ``(N, F, H, W)`` features channel by channel."""
    mu = stats.mean.astype(features.dtype)[None, :, None, None]
    sd = stats.std.astype(features.dtype)[None, :, None, None]
    return (features - mu) / sd


def feature_stats(features: Sequence[np.ndarray]) -> NormStats:
    """Two-pass per-channel mean/std over every pixel of every ``(N, F, H, W)`` block."""
    count = sum(f.shape[0] * f.shape[2] * f.shape[3] for f in features)
    total = sum(np.sum(f, axis=(0, 2, 3), dtype=np.float64) for f in features)
    mean = total / count
    sq = sum(
        np.sum((f.astype(np.float64) - mean[None, :, None, None]) ** 2, axis=(0, 2, 3))
        for f in features
    )
    return NormStats(mean, np.sqrt(sq / count))


def extract_features(image, model: Model | ExtractorConfig, params: nn.NetParams,
                     stats: NormStats | None = None) -> np.ndarray:
    """Upsampled (and, given ``stats``, standardized) feature maps ``(N, F, H, W)``.

    ``image`` is already preprocessed to ``[0, 1]``.
    """
    if isinstance(model, ExtractorConfig):
        model = Model(model)
    x = _as_batch(image).astype(params.dtype, copy=False)
    feats, _, _ = _raw_features(model, params, x)
    return feats if stats is None else apply_norm(feats, stats)


def fit_norm_stats(patches: Sequence[np.ndarray], model: Model | ExtractorConfig,
                   params: nn.NetParams) -> NormStats:
    """Feature statistics over all pixels of the (preprocessed) training patches."""
    if not len(patches):
        raise ValueError("need at least one patch")
    return feature_stats([extract_features(p, model, params) for p in patches])


def hypercolumns(features: np.ndarray, image: np.ndarray) -> np.ndarray:
    """All hypercolumns of one patch, ``(H*W, 1 + F)``, input pixel first."""
    features = np.asarray(features)
    if features.ndim == 4:
        features = features[0]
    image = np.asarray(image, dtype=features.dtype)
    f, h, w = features.shape
    return np.concatenate([image.reshape(1, h * w), features.reshape(f, h * w)], axis=0).T


def build_hypercolumn(features: np.ndarray, image: np.ndarray, i: int, j: int) -> np.ndarray:
    features = np.asarray(features)
    if features.ndim == 4:
        features = features[0]
    return np.concatenate([[np.asarray(image)[i, j]], features[:, i, j]]).astype(features.dtype)


def _translator_logits(model: Model, params: nn.NetParams, hc: np.ndarray):
    n_ext = model.n_extractor
    trunk = model.specs[n_ext:n_ext + model.n_trunk]
    z, trunk_caches = nn.forward(trunk, params.layers[n_ext:n_ext + model.n_trunk], hc)
    logits, head_caches = [], []
    specs = model.specs
    for sl in model.head_slices():
        out, caches = nn.forward(specs[sl][:-1], params.layers[sl][:-1], z)
        logits.append(out)
        head_caches.append(caches)
    return np.stack(logits, axis=1), trunk_caches, head_caches


def translate(hypercolumn: np.ndarray, model: Model | TranslatorConfig, params: nn.NetParams,
              chunk: int = 16384) -> np.ndarray:
    """Per-head bin distributions ``(B, 9, K)`` for hypercolumns ``(B, L)`` (or one ``(L,)``)."""
    if isinstance(model, TranslatorConfig):
        raise TypeError("translate needs the full Model to locate the translator parameters")
    hc = np.asarray(hypercolumn, dtype=params.dtype)
    single = hc.ndim == 1
    hc = np.atleast_2d(hc)
    if hc.shape[1] != model.extractor.hypercolumn_length:
        raise ValueError(
            f"hypercolumn length {hc.shape[1]} != expected {model.extractor.hypercolumn_length}"
        )
    out = []
    for start in range(0, hc.shape[0], chunk):
        logits, _, _ = _translator_logits(model, params, hc[start:start + chunk])
        out.append(nn.softmax_head(logits))
    probs = np.concatenate(out, axis=0) if out else np.zeros((0, 9, model.translator.bins))
    return probs[0] if single else probs


def loss_and_grads(model: Model, params: nn.NetParams, image: np.ndarray, stats: NormStats,
                   pixels: np.ndarray, targets: np.ndarray, train_extractor: bool = True):
    """Cross-entropy of the selected pixels of one patch and its parameter gradients.

    Args:
        image: preprocessed ``(H, W)`` patch.
        pixels: flat pixel indices ``(B,)`` into the patch, without repeats.
        targets: ``(B, 9)`` bin indices.

    Returns:
        ``(loss, grads)`` with ``grads`` aligned with ``params.layers``.
    """
    dtype = params.dtype
    x = _as_batch(image).astype(dtype, copy=False)
    h, w = x.shape[-2:]
    feats, maps, ext_caches = _raw_features(model, params, x)
    normed = apply_norm(feats, stats)
    hc_all = np.concatenate([x, normed], axis=1)[0].reshape(1 + feats.shape[1], h * w)
    hc = np.ascontiguousarray(hc_all[:, pixels].T)

    logits, trunk_caches, head_caches = _translator_logits(model, params, hc)
    loss, dlogits = nn.softmax_cross_entropy(logits, targets)
    dlogits = dlogits.astype(dtype, copy=False)

    specs = model.specs
    grads: list = [None] * len(specs)
    dz = np.zeros((hc.shape[0], model.translator.trunk[-1]), dtype=dtype)
    for k, sl in enumerate(model.head_slices()):
        g, head_grads = nn.backward(specs[sl][:-1], params.layers[sl][:-1], head_caches[k], dlogits[:, k])
        dz += g
        for off, gr in enumerate(head_grads):
            grads[sl.start + off] = gr
        grads[sl.stop - 1] = ()
    n_ext = model.n_extractor
    tsl = slice(n_ext, n_ext + model.n_trunk)
    dhc, trunk_grads = nn.backward(specs[tsl], params.layers[tsl], trunk_caches, dz)
    grads[tsl] = trunk_grads

    ext_specs = specs[:n_ext]
    if not train_extractor:
        for i in range(n_ext):
            grads[i] = tuple(np.zeros_like(a) for a in params.layers[i])
        return loss, grads

    dfull = np.zeros((1 + feats.shape[1], h * w), dtype=dtype)
    dfull[:, pixels] = dhc.T
    dnorm = dfull[1:].reshape(1, feats.shape[1], h, w)
    dfeat = dnorm / stats.std.astype(dtype)[None, :, None, None]
    per_layer = {}
    start = 0
    for idx, m in zip(model.extractor.feature_layers(), maps):
        c = m.shape[1]
        per_layer[idx] = nn.bilinear_upsample_backward(dfeat[:, start:start + c], *m.shape[-2:])
        start += c
    grad = None
    for i in range(n_ext - 1, -1, -1):
        if i in per_layer:
            grad = per_layer[i] if grad is None else grad + per_layer[i]
        grad, grads[i] = nn.layer_backward(ext_specs[i], params.layers[i], ext_caches[i], grad)
    return loss, grads


def activation_pattern(model: Model, params: nn.NetParams, image: np.ndarray, stats: NormStats,
                       pixels: np.ndarray) -> np.ndarray:
    """ReLU masks and pool choices touched by :func:`loss_and_grads` on the same inputs."""
    x = _as_batch(image).astype(params.dtype, copy=False)
    feats, _, ext_caches = _raw_features(model, params, x)
    hc = hypercolumns(apply_norm(feats, stats), x[0, 0])[pixels]
    _, trunk_caches, head_caches = _translator_logits(model, params, hc)
    caches = ext_caches + trunk_caches + [c for hcs in head_caches for c in hcs]
    return nn.activation_pattern(caches)


def make_patches(intensity: np.ndarray, covariance: np.ndarray, patch: int):
    """Cut co-registered rasters into non-overlapping square tiles (edge remainders are dropped)."""
    h, w = intensity.shape
    out = []
    for i in range(0, h - patch + 1, patch):
        for j in range(0, w - patch + 1, patch):
            out.append((intensity[i:i + patch, j:j + patch], covariance[i:i + patch, j:j + patch]))
    if not out:
        raise ValueError(f"image {h}x{w} is smaller than one {patch}x{patch} patch")
    return out


def _targets(covariance: np.ndarray, tables) -> np.ndarray:
    feat, _ = polmath.normalize(covariance)
    planes = feat.to_params()
    return np.stack([quantizer.encode(planes[..., j], tables[j]) for j in range(9)], axis=-1)


def train(dataset, extractor: ExtractorConfig = DESK_EXTRACTOR,
          translator: TranslatorConfig = DESK_TRANSLATOR, config: TrainConfig = TrainConfig(),
          resume: ModelCheckpoint | None = None, quantizers=None,
          on_step: Callable[[int, int, float], None] | None = None):
    """Fit the network on ``(intensity patch, covariance patch)`` pairs.

    Quantizer tables (unless given) and feature statistics are fitted on the
    dataset first.  Each epoch splits every patch's pixels into shuffled
    mini-batches of ``config.batch_pixels``, shuffles the mini-batch order
    and applies one Adam step per mini-batch.  The shuffling stream for an
    epoch depends only on ``(seed, epoch)``, which makes resuming exact.

    Returns:
        ``(checkpoint, losses)`` where ``losses`` holds one entry per step
        taken in this call.
    """
    if not len(dataset):
        raise ValueError("empty dataset")
    images, targets = [], []
    shape = None
    for intensity, cov in dataset:
        intensity = np.asarray(intensity)
        cov = np.asarray(cov)
        if cov.shape != intensity.shape + (3, 3):
            raise ValueError(f"intensity {intensity.shape} and covariance {cov.shape} do not match")
        if shape is not None and intensity.shape != shape:
            raise ValueError("all patches must share one size")
        shape = intensity.shape
    if shape[0] % 4 or shape[1] % 4:
        raise ValueError(f"patch dimensions must be divisible by 4, got {shape}")

    model = Model(extractor, translator)
    dtype = config.dtype
    if resume is not None:
        if (resume.extractor, resume.translator) != (extractor, translator):
            raise ValueError("checkpoint architecture does not match the requested configs")
        tables = resume.quantizers
        params = resume.params.astype(dtype)
        stats = resume.norm
        adam = resume.adam
        epoch0 = resume.epochs_done
    else:
        tables = quantizers
        if tables is None:
            planes = np.concatenate(
                [polmath.normalize(np.asarray(c))[0].to_params().reshape(-1, 9) for _, c in dataset]
            )
            tables = quantizer.fit_all(planes, translator.bins)
        params = model.init_params(config.seed, dtype)
        stats = None
        adam = None
        epoch0 = 0
    if any(t.k != translator.bins for t in tables):
        raise ValueError("quantizer bin count does not match translator")

    for intensity, cov in dataset:
        images.append(preprocess_intensity(intensity, extractor.db_floor).astype(dtype))
        targets.append(_targets(np.asarray(cov), tables).reshape(-1, 9))
    if stats is None:
        stats = fit_norm_stats(images, model, params)
    if adam is None:
        adam = nn.AdamState.zeros_like(params, learning_rate=config.learning_rate)

    n_pix = shape[0] * shape[1]
    losses = []
    for epoch in range(epoch0, config.epochs):
        rng = np.random.default_rng([config.seed, epoch])
        batches = []
        for p in range(len(images)):
            perm = rng.permutation(n_pix)
            batches += [(p, perm[s:s + config.batch_pixels]) for s in range(0, n_pix, config.batch_pixels)]
        order = rng.permutation(len(batches))
        for b in order:
            p, pix = batches[b]
            loss, grads = loss_and_grads(model, params, images[p], stats, pix, targets[p][pix],
                                         config.train_extractor)
            if not np.isfinite(loss):
                raise FloatingPointError(f"non-finite loss at epoch {epoch}")
            params, adam = nn.adam_step(params, grads, adam)
            losses.append(loss)
            if on_step is not None:
                on_step(epoch, len(losses), loss)
        log.info("epoch %d: mean loss %.6f", epoch + 1, np.mean(losses[-len(batches):]))

    ckpt = ModelCheckpoint(extractor, translator, config, params, stats, list(tables), adam,
                           max(epoch0, config.epochs))
    return ckpt, losses


def decode_features(probs: np.ndarray, tables, rule: str = "mode"):
    """Turn head distributions into a valid normalized feature.

    Ratios are clamped to ``[0, 1]`` and rescaled to sum to one (an all-zero
    triple falls back to 1/3 each and is flagged); correlations with modulus
    above one are pulled back onto the unit circle.

    Returns:
        ``(feature, delta_fallback_mask)``.
    """
    values = np.stack([quantizer.decode(probs[..., j, :], tables[j], rule) for j in range(9)], axis=-1)
    delta = np.clip(values[..., :3], 0.0, 1.0)
    total = delta.sum(axis=-1, keepdims=True)
    fallback = total[..., 0] < 1e-6
    delta = np.where(fallback[..., None], 1.0 / 3.0, delta / np.where(total > 0, total, 1.0))
    rho = values[..., 3::2] + 1j * values[..., 4::2]
    mod = np.abs(rho)
    rho = np.where(mod > 1.0, rho / np.where(mod > 1.0, mod, 1.0), rho)
    return PolFeature(delta, rho), fallback


def colorize(intensity: np.ndarray, channel, checkpoint: ModelCheckpoint, rule: str = "mode",
             keep_probs: bool = False) -> ColorizeResult:
    """Reconstruct a covariance image from one channel's linear intensity.

    The image is processed in non-overlapping tiles of the training patch size.
    """
    channel = Channel.parse(channel)
    intensity = np.asarray(intensity, dtype=np.float64)
    if intensity.ndim != 2:
        raise ValueError("intensity must be a 2-D image")
    h, w = intensity.shape
    if h % 4 or w % 4:
        raise ValueError(f"image dimensions must be divisible by 4, got {h}x{w}")
    model = checkpoint.model
    params = checkpoint.params
    tile = checkpoint.train.patch
    image = preprocess_intensity(intensity, checkpoint.extractor.db_floor)
    probs = np.zeros((h, w, 9, checkpoint.translator.bins), dtype=params.dtype)
    for i in range(0, h, tile):
        for j in range(0, w, tile):
            sub = image[i:i + tile, j:j + tile].astype(params.dtype)
            feats = extract_features(sub, model, params, checkpoint.norm)
            hc = hypercolumns(feats, sub)
            th, tw = sub.shape
            probs[i:i + th, j:j + tw] = translate(hc, model, params).reshape(th, tw, 9, -1)
    probs64 = probs.astype(np.float64)
    probs64 /= probs64.sum(axis=-1, keepdims=True)
    feat, delta_fallback = decode_features(probs64, checkpoint.quantizers, rule)
    feat, _ = polmath.psd_correct(feat)
    power, power_fallback = polmath.recover_power(intensity, feat.delta, channel)
    cov = polmath.reconstruct(feat, power)
    # write the input channel back verbatim: P * delta can be off by one ulp
    ok = ~power_fallback
    d = channel.value
    cov[..., d, d] = np.where(ok, intensity, cov[..., d, d].real)
    flags = (power_fallback * FLAG_POWER_FALLBACK | delta_fallback * FLAG_DELTA_FALLBACK).astype(np.uint8)
    if np.any(power_fallback):
        log.warning("%d pixels fell back to P = intensity (ratio below floor)", int(power_fallback.sum()))
    return ColorizeResult(cov, feat.to_params(), flags, probs64 if keep_probs else None)
