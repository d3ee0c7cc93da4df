"""LIME image explanations.

Superpixels are switched on and off in a binary interpretable space; the
classifier's probability for its predicted class on the perturbed images is
fitted by a proximity-weighted ridge regression, and the superpixels with the
largest positive coefficients form the explanation.
"""

import itertools
import math
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from ._io import atomic_path, write_json


class RankDeficiencyError(np.linalg.LinAlgError):
    pass


@dataclass(frozen=True)
class LimeConfig:
    num_samples: int = 1000
    num_features: int = 5
    positive_only: bool = True
    hide_color: float = 0.0
    min_weight: float = 0.0
    kernel_width: float | None = None  # None -> 0.25 * sqrt(d)
    ridge_lambda: float = 1.0
    seed: int = 0
    batch_size: int = 64
    exhaustive: bool = False  # enumerate all 2**d rows instead of sampling
    # quickshift superpixels, then adjacent segments with equal mean colour merged
    kernel_size: float = 4.0
    max_dist: float = 200.0
    ratio: float = 0.2
    merge_tolerance: float = 1.0

    def __post_init__(self):
        if self.num_samples < 1 or self.num_features < 1:
            raise ValueError("num_samples and num_features must be >= 1")
        if self.kernel_width is not None and self.kernel_width <= 0:
            raise ValueError("kernel_width must be positive")
        if self.ridge_lambda < 0:
            raise ValueError("ridge_lambda must be nonnegative")

    def width_for(self, d):
        return self.kernel_width if self.kernel_width is not None else 0.25 * math.sqrt(d)


@dataclass
class SegmentMap:
    labels: np.ndarray  # H x W ints in 0..d-1

    @property
    def segment_count(self):
        return int(self.labels.max()) + 1 if self.labels.size else 0


@dataclass
class SurrogateFit:
    coefficients: np.ndarray
    intercept: float
    local_fidelity: float


@dataclass
class Explanation:
    segment_weights: np.ndarray
    selected_segments: list
    predicted_class: int
    surrogate_intercept: float
    local_fidelity: float
    segments: SegmentMap | None = None
    target_probability: float | None = None
    config: LimeConfig | None = None
    warnings: list = field(default_factory=list)

    def to_dict(self):
        return {
            "predicted_class": int(self.predicted_class),
            "selected_segments": [int(s) for s in self.selected_segments],
            "coefficients": [float(w) for w in self.segment_weights],
            "intercept": float(self.surrogate_intercept),
            "local_fidelity": float(self.local_fidelity),
            "target_probability": None if self.target_probability is None else float(self.target_probability),
            "segment_count": None if self.segments is None else self.segments.segment_count,
            "config": None if self.config is None else asdict(self.config),
            "warnings": list(self.warnings),
        }


# -- segmentation ------------------------------------------------------------------

def _relabel(labels):
    """Consecutive ids in raster order of first appearance."""
    _, first = np.unique(labels.ravel(), return_index=True)
    order = labels.ravel()[np.sort(first)]
    lut = np.empty(labels.max() + 1, dtype=np.int64)
    lut[order] = np.arange(len(order))
    return lut[labels]


def merge_uniform_segments(image, labels, tolerance=1.0):
    """Union adjacent segments whose mean colours differ by at most
    ``tolerance`` (max abs channel difference, 0-255 scale)."""
    labels = _relabel(labels)
    d = labels.max() + 1
    flat = labels.ravel()
    img = np.asarray(image, dtype=np.float64).reshape(-1, 3)
    means = np.stack([np.bincount(flat, img[:, c], d) for c in range(3)], 1) / np.bincount(flat, minlength=d)[:, None]

    pairs = set()
    for a, b in ((labels[:, :-1], labels[:, 1:]), (labels[:-1, :], labels[1:, :])):
        diff = a != b
        pairs.update(zip(a[diff].tolist(), b[diff].tolist()))

    parent = list(range(d))

    def find(i):
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    for a, b in sorted(pairs):
        if np.abs(means[a] - means[b]).max() <= tolerance:
            ra, rb = find(a), find(b)
            if ra != rb:
                parent[max(ra, rb)] = min(ra, rb)
    roots = np.array([find(i) for i in range(d)])
    return _relabel(roots[labels])


def segment_image(image, config=None):
    """Quickshift superpixels with uniform neighbours merged; deterministic."""
    from skimage.segmentation import quickshift

    config = config or LimeConfig()
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[2] != 3:
        raise ValueError(f"expected H x W x 3 image, got shape {image.shape}")
    as_float = np.clip(image.astype(np.float64) / 255.0, 0, 1)
    labels = quickshift(as_float, kernel_size=config.kernel_size, max_dist=config.max_dist,
                        ratio=config.ratio, rng=config.seed)
    labels = merge_uniform_segments(image, labels, config.merge_tolerance)
    segments = SegmentMap(labels)
    d = segments.segment_count
    if d == 1:
        warnings.warn("image produced a single segment", stacklevel=2)
    elif image.shape[:2] == (224, 224) and not 10 <= d <= 200:
        warnings.warn(f"segment count {d} outside the expected 10..200 range", stacklevel=2)
    return segments


# -- perturbation and surrogate -------------------------------------------------------

def sample_perturbations(d, num_samples, seed=0, exhaustive=False):
    """Binary design matrix; row 0 is the unperturbed instance (all ones).

    ``exhaustive`` returns all ``2**d`` rows, all-ones first, then the rest in
    lexicographic order.
    """
    if d < 1:
        raise ValueError("d must be >= 1")
    if exhaustive:
        rows = [r for r in itertools.product((0, 1), repeat=d) if sum(r) < d]
        return np.array([(1,) * d] + rows, dtype=np.int8)
    rng = np.random.default_rng(seed)
    z = np.ones((num_samples, d), dtype=np.int8)
    z[1:] = rng.integers(0, 2, size=(num_samples - 1, d), dtype=np.int8)
    return z


def apply_mask(image, segments, z, hide_color=0.0):
    """Keep segment ``k`` where ``z[k] == 1``; paint it ``hide_color`` otherwise."""
    labels = segments.labels if isinstance(segments, SegmentMap) else np.asarray(segments)
    z = np.asarray(z)
    if len(z) != labels.max() + 1:
        raise ValueError(f"mask has {len(z)} entries for {labels.max() + 1} segments")
    out = np.array(image, copy=True)
    out[z[labels] == 0] = hide_color
    return out


def kernel_weight(z, kernel_width):
    """``exp(-D**2 / width**2)`` with ``D`` the fraction of hidden segments."""
    if kernel_width <= 0:
        raise ValueError("kernel_width must be positive")
    z = np.asarray(z)
    distance = 1.0 - z.mean(axis=-1)
    return np.exp(-(distance ** 2) / kernel_width ** 2)


def fit_surrogate(Z, y, sample_weights, ridge_lambda=1.0):
    """Weighted ridge regression with an unpenalized intercept.

    Solves the normal equations of
    ``sum_i w_i (y_i - b0 - z_i . b)**2 + lambda * |b|**2``.  Eliminating the
    intercept leaves the weighted-centred system
    ``(Zc' W Zc + lambda I) b = Zc' W yc``; a constant target gives exactly
    zero coefficients.
    """
    Z = np.asarray(Z, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    w = np.asarray(sample_weights, dtype=np.float64)
    if Z.ndim != 2 or len(Z) != len(y) or len(y) != len(w):
        raise ValueError("Z must be n x d with y and weights of length n")
    if (w < 0).any() or not w.any():
        raise ValueError("weights must be nonnegative and not all zero")
    d = Z.shape[1]
    y_ref = y[0]
    yr = y - y_ref
    total = w.sum()
    z_mean = w @ Z / total
    y_mean = w @ yr / total
    Zc = Z - z_mean
    yc = yr - y_mean
    A = Zc.T @ (w[:, None] * Zc) + ridge_lambda * np.eye(d)
    if np.linalg.matrix_rank(A) < d:
        raise RankDeficiencyError("surrogate normal equations are singular; use ridge_lambda > 0")
    beta = np.linalg.solve(A, Zc.T @ (w * yc))
    intercept = y_ref + y_mean - z_mean @ beta

    resid = yc - Zc @ beta
    ss_res = (w * resid ** 2).sum()
    ss_tot = (w * yc ** 2).sum()
    if ss_tot > 0:
        fidelity = 1.0 - ss_res / ss_tot
    else:
        fidelity = 1.0 if ss_res <= 1e-24 else 0.0
    return SurrogateFit(beta, float(intercept), float(fidelity))


def select_features(coefficients, num_features=5, positive_only=True, min_weight=0.0):
    """Up to ``num_features`` segment ids, strongest first, ties to the lower id."""
    coef = np.asarray(coefficients, dtype=np.float64)
    ids = np.arange(len(coef))
    if positive_only:
        ids = ids[coef > min_weight]
        strength = coef[ids]
    else:
        strength = np.abs(coef[ids])
    order = np.lexsort((ids, -strength))
    return [int(i) for i in ids[order][:num_features]]


def _predict(model, images, batch_size):
    if callable(getattr(model, "predict_proba", None)):
        return np.asarray(model.predict_proba(images, batch_size=batch_size))
    return np.asarray(model(images))


def explain_instance(model, image, config=None, segments=None):
    """Explain ``model``'s top class for one 224 x 224 x 3 image.

    ``model`` exposes ``predict_proba(pixels, batch_size=...)`` or is a callable
    mapping an ``N x H x W x 3`` batch to class probabilities.
    """
    config = config or LimeConfig()
    image = np.asarray(image, dtype=np.float32)
    notes = []
    if segments is None:
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always")
            segments = segment_image(image, config)
        notes += [str(w.message) for w in caught]
        for msg in notes:
            warnings.warn(msg, stacklevel=2)
    d = segments.segment_count

    Z = sample_perturbations(d, config.num_samples, config.seed, config.exhaustive)
    probs = []
    for start in range(0, len(Z), config.batch_size):
        batch = np.stack([apply_mask(image, segments, z, config.hide_color) for z in Z[start:start + config.batch_size]])
        probs.append(_predict(model, batch, config.batch_size))
    probs = np.concatenate(probs)
    predicted = int(np.argmax(probs[0]))
    y = probs[:, predicted]
    weights = kernel_weight(Z, config.width_for(d))
    fit = fit_surrogate(Z, y, weights, config.ridge_lambda)
    selected = select_features(fit.coefficients, config.num_features, config.positive_only, config.min_weight)
    return Explanation(fit.coefficients, selected, predicted, fit.intercept, fit.local_fidelity,
                       segments, float(y[0]), config, notes)


# -- rendering --------------------------------------------------------------------------

YELLOW = np.array([255.0, 255.0, 0.0])


def render_overlay(image, segments, explanation, alpha=0.45, outline=True):
    """Tint the selected segments yellow and trace their inner boundaries.

    Pixels outside the selected segments are returned unchanged.
    """
    from skimage.segmentation import find_boundaries

    labels = segments.labels if isinstance(segments, SegmentMap) else np.asarray(segments)
    base = np.asarray(image, dtype=np.float64)
    out = np.clip(np.rint(base), 0, 255).astype(np.uint8)
    if not explanation.selected_segments:
        return out
    mask = np.isin(labels, explanation.selected_segments)
    tinted = base.copy()
    tinted[mask] = (1 - alpha) * base[mask] + alpha * YELLOW
    if outline:
        edge = find_boundaries(np.where(mask, labels, -1), mode="inner") & mask
        tinted[edge] = YELLOW
    return np.clip(np.rint(tinted), 0, 255).astype(np.uint8)


def save_explanation(out_dir, name, image, overlay, explanation):
    """Write ``<name>_raw.png``, ``<name>_lime.png`` and ``<name>_explanation.json``."""
    from PIL import Image

    out_dir = Path(out_dir)
    paths = {}
    for suffix, arr in (("raw", image), ("lime", overlay)):
        paths[suffix] = out_dir / f"{name}_{suffix}.png"
        with atomic_path(paths[suffix]) as tmp:
            Image.fromarray(np.clip(np.rint(np.asarray(arr, dtype=np.float64)), 0, 255).astype(np.uint8)).save(tmp, format="PNG")
    paths["sidecar"] = write_json(out_dir / f"{name}_explanation.json", explanation.to_dict())
    return paths
