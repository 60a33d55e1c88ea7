"""Flat-parameter models, losses and hand-written gradients.

Two desk-scale architectures share one parameter layout
(``hidden.weight``, ``hidden.bias``, ``out.weight``, ``out.bias``):

* a one-hidden-layer tanh MLP, used as a sigmoid multi-label classifier
  (and, with a softmax head, as the FedSM client selector);
* a per-pixel patch perceptron: every pixel's ``(2r+1)**2`` neighbourhood
  (edge-replicated at the border) goes through the same two-layer MLP to
  produce class logits.

Everything operates on :class:`ParamVector`, an immutable flat vector with
named contiguous segments.  That vector is the only thing clients and the
server exchange.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import expit, log_softmax, softmax

from .errors import ConfigurationError, NumericError, ParseError, ShapeError

PROB_EPS = 1e-7
LOSS_KINDS = ("bce", "masked_ce", "softmax_ce", "consistency")


class Segment(NamedTuple):
    name: str
    offset: int
    length: int
    shape: tuple[int, ...]


class ParamVector:
    """Immutable flat parameter vector with an ordered segment layout.

    Supports ``+``/``-`` between vectors of identical layout and scaling by
    Python scalars, which keeps the strategy code close to the math.
    """

    __slots__ = ("values", "layout")

    def __init__(self, values, layout):
        values = np.array(values, dtype=np.float64).reshape(-1)
        layout = tuple(Segment(s[0], int(s[1]), int(s[2]), tuple(s[3])) for s in layout)
        expected = 0
        for seg in layout:
            if seg.offset != expected or seg.length < 0:
                raise ShapeError(f"segment {seg.name!r} is not contiguous at offset {expected}")
            if int(np.prod(seg.shape, dtype=np.int64)) != seg.length:
                raise ShapeError(f"segment {seg.name!r} shape {seg.shape} != length {seg.length}")
            expected += seg.length
        if expected != values.size:
            raise ShapeError(f"layout covers {expected} values, vector has {values.size}")
        bad = ~np.isfinite(values)
        if bad.any():
            first = int(np.argmax(bad))
            name = next(s.name for s in layout if s.offset <= first < s.offset + s.length)
            raise NumericError(f"non-finite parameter in segment {name!r}", layer=name)
        values.setflags(write=False)
        self.values = values
        self.layout = layout

    def __len__(self):
        return self.values.size

    def __repr__(self):
        names = ", ".join(s.name for s in self.layout)
        return f"ParamVector(n={len(self)}, segments=[{names}])"

    def segment(self, name):
        for seg in self.layout:
            if seg.name == name:
                return self.values[seg.offset:seg.offset + seg.length].reshape(seg.shape)
        raise KeyError(name)

    def layer_groups(self):
        """Segment groups keyed by layer prefix, ordered input to output."""
        groups: dict[str, list[Segment]] = {}
        for seg in self.layout:
            groups.setdefault(seg.name.split(".")[0], []).append(seg)
        return groups

    def like(self, values):
        return ParamVector(values, self.layout)

    def zeros_like(self):
        return ParamVector(np.zeros_like(self.values), self.layout)

    def check_layout(self, other):
        if self.layout != other.layout:
            raise ShapeError("parameter layouts differ")

    def norm(self):
        return float(np.linalg.norm(self.values))

    def bitwise_equal(self, other):
        return self.layout == other.layout and self.values.tobytes() == other.values.tobytes()

    def __add__(self, other):
        self.check_layout(other)
        return self.like(self.values + other.values)

    def __sub__(self, other):
        self.check_layout(other)
        return self.like(self.values - other.values)

    def __mul__(self, scalar):
        return self.like(self.values * float(scalar))

    __rmul__ = __mul__

    def __truediv__(self, scalar):
        return self.like(self.values / float(scalar))

    def __neg__(self):
        return self.like(-self.values)


GradientVector = ParamVector


@dataclass(frozen=True)
class ModelSpec:
    kind: str
    hidden_dim: int
    input_dim: int = 0
    n_labels: int = 0
    grid_h: int = 16
    grid_w: int = 16
    patch_radius: int = 2
    n_classes: int = 0

    @classmethod
    def multilabel(cls, input_dim, n_labels, hidden_dim=32):
        return cls("multilabel", hidden_dim, input_dim=input_dim, n_labels=n_labels)

    @classmethod
    def classifier(cls, input_dim, n_labels, hidden_dim=16):
        return cls("classifier", hidden_dim, input_dim=input_dim, n_labels=n_labels)

    @classmethod
    def segmentation(cls, n_classes=4, hidden_dim=16, grid_h=16, grid_w=16, patch_radius=2):
        return cls("segmentation", hidden_dim, grid_h=grid_h, grid_w=grid_w,
                   patch_radius=patch_radius, n_classes=n_classes)

    def validate(self):
        if self.hidden_dim < 1:
            raise ConfigurationError("hidden_dim must be a positive integer")
        if self.kind in ("multilabel", "classifier"):
            if self.input_dim < 1:
                raise ConfigurationError("input_dim must be a positive integer")
            if self.n_labels < 2:
                raise ConfigurationError("n_labels must be at least 2")
        elif self.kind == "segmentation":
            if self.grid_h < 1 or self.grid_w < 1 or self.patch_radius < 0:
                raise ConfigurationError("invalid segmentation grid or patch radius")
            if self.n_classes < 2:
                raise ConfigurationError("n_classes must be at least 2 (class 0 is background)")
        else:
            raise ConfigurationError(f"unknown model kind {self.kind!r}")

    @property
    def fan_in(self):
        if self.kind == "segmentation":
            return (2 * self.patch_radius + 1) ** 2
        return self.input_dim

    @property
    def n_out(self):
        return self.n_classes if self.kind == "segmentation" else self.n_labels


def make_layout(spec):
    shapes = [
        ("hidden.weight", (spec.fan_in, spec.hidden_dim)),
        ("hidden.bias", (spec.hidden_dim,)),
        ("out.weight", (spec.hidden_dim, spec.n_out)),
        ("out.bias", (spec.n_out,)),
    ]
    layout, offset = [], 0
    for name, shape in shapes:
        n = int(np.prod(shape))
        layout.append(Segment(name, offset, n, shape))
        offset += n
    return tuple(layout)


def init_model(spec, seed):
    """Glorot-uniform weights, zero biases; a pure function of ``(spec, seed)``."""
    spec.validate()
    layout = make_layout(spec)
    rng = np.random.default_rng(seed)
    values = np.zeros(layout[-1].offset + layout[-1].length)
    for seg in layout:
        if seg.name.endswith(".weight"):
            fan_in, fan_out = seg.shape
            bound = np.sqrt(6.0 / (fan_in + fan_out))
            values[seg.offset:seg.offset + seg.length] = rng.uniform(-bound, bound, seg.length)
    return ParamVector(values, layout)


@dataclass(frozen=True)
class Batch:
    """A group of samples.

    ``features`` is ``(n, d)`` for vector models or ``(n, H, W)`` for images.
    ``targets`` is a binary ``(n, L)`` matrix, an integer mask stack
    ``(n, H, W)``, or soft targets for the ``softmax_ce``/``consistency``
    losses.  ``ignore_mask`` marks cells excluded from the loss (1 = ignored).
    """

    features: np.ndarray
    targets: np.ndarray
    ignore_mask: np.ndarray | None = None

    def __post_init__(self):
        if len(self.features) < 1:
            raise ShapeError("a batch needs at least one sample")
        if len(self.targets) != len(self.features):
            raise ShapeError("features and targets disagree on sample count")
        if self.ignore_mask is not None and self.ignore_mask.shape != self.targets.shape[:self.ignore_mask.ndim]:
            raise ShapeError("ignore_mask shape does not match targets")

    def __len__(self):
        return len(self.features)

    def take(self, idx):
        idx = np.asarray(idx, dtype=np.int64)
        ignore = None if self.ignore_mask is None else self.ignore_mask[idx]
        return Batch(self.features[idx], self.targets[idx], ignore)

    @staticmethod
    def concat(batches):
        batches = list(batches)
        has_ignore = any(b.ignore_mask is not None for b in batches)
        ignore = None
        if has_ignore:
            ignore = np.concatenate([
                b.ignore_mask if b.ignore_mask is not None else np.zeros(b.targets.shape, dtype=np.int8)
                for b in batches
            ])
        return Batch(np.concatenate([b.features for b in batches]),
                     np.concatenate([b.targets for b in batches]), ignore)


@dataclass(frozen=True)
class AuxTerm:
    """Strategy-specific extra terms for :func:`backprop`.

    ``prox_anchor``/``mu`` add ``(mu/2)||w - anchor||^2`` to the loss;
    ``correction`` is added to the gradient as-is (Scaffold's ``c - c_i``).
    """

    prox_anchor: ParamVector | None = None
    mu: float = 0.0
    correction: ParamVector | None = None


def _unpack(params):
    return (params.segment("hidden.weight"), params.segment("hidden.bias"),
            params.segment("out.weight"), params.segment("out.bias"))


def patch_radius_of(params):
    side = int(round(np.sqrt(params.segment("hidden.weight").shape[0])))
    if side * side != params.segment("hidden.weight").shape[0] or side % 2 == 0:
        raise ShapeError("parameters do not describe a square odd-sized patch model")
    return (side - 1) // 2


def extract_patches(images, radius):
    """``(n, H, W)`` images to ``(n*H*W, (2r+1)**2)`` edge-padded neighbourhoods."""
    images = np.asarray(images, dtype=np.float64)
    if images.ndim != 3:
        raise ShapeError("expected an (n, H, W) image stack")
    padded = np.pad(images, ((0, 0), (radius, radius), (radius, radius)), mode="edge")
    k = 2 * radius + 1
    windows = sliding_window_view(padded, (k, k), axis=(1, 2))
    return windows.reshape(-1, k * k)


def _mlp(params, x):
    w1, b1, w2, b2 = _unpack(params)
    if x.ndim != 2 or x.shape[1] != w1.shape[0]:
        raise ShapeError(f"input width {x.shape[-1]} does not match model fan-in {w1.shape[0]}")
    with np.errstate(over="ignore", invalid="ignore"):
        pre = x @ w1 + b1
    if not np.all(np.isfinite(pre)):
        raise NumericError("non-finite activations in layer 'hidden'", layer="hidden")
    h = np.tanh(pre)
    with np.errstate(over="ignore", invalid="ignore"):
        z = h @ w2 + b2
    if not np.all(np.isfinite(z)):
        raise NumericError("non-finite activations in layer 'out'", layer="out")
    return h, z


def _mlp_grad(params, x, h, gz):
    _, _, w2, _ = _unpack(params)
    gw2 = h.T @ gz
    gb2 = gz.sum(axis=0)
    gpre = (gz @ w2.T) * (1.0 - h * h)
    gw1 = x.T @ gpre
    gb1 = gpre.sum(axis=0)
    return params.like(np.concatenate([gw1.ravel(), gb1, gw2.ravel(), gb2]))


def _as_matrix(features):
    features = np.asarray(features, dtype=np.float64)
    return features.reshape(len(features), -1) if features.ndim > 2 else features


def mlp_logits(params, features):
    return _mlp(params, _as_matrix(features))[1]


def forward_multilabel(params, features):
    features = np.asarray(features, dtype=np.float64)
    if features.ndim != 2:
        raise ShapeError("expected an (n, input_dim) feature matrix")
    return expit(_mlp(params, features)[1])


def forward_segmentation(params, image):
    """Per-pixel logits: ``(H, W)`` -> ``(H, W, C)``, or ``(n, H, W)`` -> ``(n, H, W, C)``."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim not in (2, 3):
        raise ShapeError("expected an (H, W) image or (n, H, W) stack")
    stack = image[None] if image.ndim == 2 else image
    z = _mlp(params, extract_patches(stack, patch_radius_of(params)))[1]
    z = z.reshape(stack.shape + (-1,))
    return z[0] if image.ndim == 2 else z


def bce_loss(probs, targets):
    probs = np.asarray(probs, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    if probs.shape != targets.shape:
        raise ShapeError(f"probs {probs.shape} vs targets {targets.shape}")
    p = np.clip(probs, PROB_EPS, 1.0 - PROB_EPS)
    per_sample = -(targets * np.log(p) + (1.0 - targets) * np.log1p(-p)).sum(axis=-1)
    return float(np.mean(per_sample))


def masked_ce_loss(logits, mask_true, ignore_mask=None):
    """Mean softmax cross-entropy over non-ignored pixels; 0 when every pixel is ignored."""
    logits = np.asarray(logits, dtype=np.float64)
    mask_true = np.asarray(mask_true)
    if logits.shape[:-1] != mask_true.shape:
        raise ShapeError(f"logits {logits.shape} vs mask {mask_true.shape}")
    keep = np.ones(mask_true.shape, dtype=bool) if ignore_mask is None else (np.asarray(ignore_mask) == 0)
    if ignore_mask is not None and keep.shape != mask_true.shape:
        raise ShapeError("ignore_mask shape does not match mask")
    n_keep = int(keep.sum())
    if n_keep == 0:
        return 0.0
    logp = log_softmax(logits[keep], axis=-1)
    picked = np.take_along_axis(logp, mask_true[keep].astype(np.int64)[:, None], axis=1)
    return float(-picked.mean())


def _bce_head(z, targets):
    p = expit(z)
    pc = np.clip(p, PROB_EPS, 1.0 - PROB_EPS)
    y = np.asarray(targets, dtype=np.float64)
    if y.shape != z.shape:
        raise ShapeError(f"targets {y.shape} vs outputs {z.shape}")
    n = len(z)
    loss = float(np.mean(-(y * np.log(pc) + (1.0 - y) * np.log1p(-pc)).sum(axis=-1)))
    active = (p == pc)
    gz = (p - y) * active / n
    return loss, gz


def _masked_ce_head(z, mask, ignore):
    # z: (m, C) flat over pixels
    mask = np.asarray(mask).reshape(-1).astype(np.int64)
    keep = np.ones(mask.shape, dtype=bool) if ignore is None else (np.asarray(ignore).reshape(-1) == 0)
    if mask.shape[0] != z.shape[0]:
        raise ShapeError("mask does not match image stack")
    gz = np.zeros_like(z)
    n_keep = int(keep.sum())
    if n_keep == 0:
        return 0.0, gz
    logp = log_softmax(z[keep], axis=1)
    rows = np.arange(n_keep)
    loss = float(-logp[rows, mask[keep]].mean())
    g = np.exp(logp)
    g[rows, mask[keep]] -= 1.0
    gz[keep] = g / n_keep
    return loss, gz


def _softmax_ce_head(z, soft_targets):
    t = np.asarray(soft_targets, dtype=np.float64)
    if t.shape != z.shape:
        raise ShapeError(f"targets {t.shape} vs logits {z.shape}")
    logp = log_softmax(z, axis=1)
    n = len(z)
    loss = float(-(t * logp).sum(axis=1).mean())
    gz = (np.exp(logp) * t.sum(axis=1, keepdims=True) - t) / n
    return loss, gz


def _consistency_head(z, target_probs, ignore, per_pixel):
    """Mean squared probability gap between predictions and (fixed) targets.

    ``per_pixel`` selects softmax over the last axis with the squared L2 gap
    summed over classes; otherwise each sigmoid output is its own cell.
    """
    t = np.asarray(target_probs, dtype=np.float64).reshape(z.shape)
    keep = np.ones(z.shape[0] if per_pixel else z.shape, dtype=bool)
    if ignore is not None:
        keep = np.asarray(ignore).reshape(keep.shape) == 0
    n_keep = int(keep.sum())
    gz = np.zeros_like(z)
    if n_keep == 0:
        return 0.0, gz
    if per_pixel:
        p = softmax(z, axis=1)
        diff = p - t
        loss = float((diff[keep] ** 2).sum() / n_keep)
        v = 2.0 * diff / n_keep
        gz = p * (v - (p * v).sum(axis=1, keepdims=True))
        gz[~keep] = 0.0
    else:
        p = expit(z)
        diff = (p - t) * keep
        loss = float((diff ** 2).sum() / n_keep)
        gz = 2.0 * diff * p * (1.0 - p) / n_keep
    return loss, gz


def backprop(params, batch, loss_kind, aux=None):
    """Loss and exact gradient w.r.t. every parameter.

    ``loss_kind`` is one of ``bce`` (multilabel), ``masked_ce`` (segmentation),
    ``softmax_ce`` (selector with soft targets) or ``consistency`` (targets are
    fixed probabilities; segmentation when features are images).
    """
    if loss_kind not in LOSS_KINDS:
        raise ConfigurationError(f"unknown loss kind {loss_kind!r}")
    if loss_kind == "masked_ce" or (loss_kind == "consistency" and np.asarray(batch.features).ndim == 3):
        x = extract_patches(batch.features, patch_radius_of(params))
        h, z = _mlp(params, x)
        if loss_kind == "masked_ce":
            loss, gz = _masked_ce_head(z, batch.targets, batch.ignore_mask)
        else:
            loss, gz = _consistency_head(z, batch.targets, batch.ignore_mask, per_pixel=True)
    else:
        x = _as_matrix(batch.features)
        h, z = _mlp(params, x)
        if loss_kind == "bce":
            loss, gz = _bce_head(z, batch.targets)
        elif loss_kind == "softmax_ce":
            loss, gz = _softmax_ce_head(z, batch.targets)
        else:
            loss, gz = _consistency_head(z, batch.targets, batch.ignore_mask, per_pixel=False)
    grad = _mlp_grad(params, x, h, gz)
    if aux is not None:
        if aux.prox_anchor is not None and aux.mu:
            delta = params - aux.prox_anchor
            loss += 0.5 * aux.mu * float(delta.values @ delta.values)
            grad = grad + aux.mu * delta
        if aux.correction is not None:
            grad = grad + aux.correction
    return loss, grad


def loss_value(params, batch, loss_kind, aux=None):
    return backprop(params, batch, loss_kind, aux)[0]


def sgd_step(params, grad, lr):
    params.check_layout(grad)
    if lr < 0:
        raise ConfigurationError("learning rate must be non-negative")
    # overflow surfaces as a NumericError from the finite check in ParamVector
    with np.errstate(over="ignore", invalid="ignore"):
        values = params.values - lr * grad.values
    return params.like(values)


def prox_sgd_step(params, grad, lr, anchor, mu):
    """Implicit (proximal) step on ``task + (mu/2)||w - anchor||^2``.

    ``grad`` is the task gradient only.  Stable for any ``lr * mu``; reduces
    to :func:`sgd_step` when ``mu == 0``.
    """
    if not mu:
        return sgd_step(params, grad, lr)
    params.check_layout(grad)
    params.check_layout(anchor)
    scale = 1.0 + lr * mu
    with np.errstate(over="ignore", invalid="ignore"):
        values = (params.values - lr * grad.values + lr * mu * anchor.values) / scale
    return params.like(values)


def finite_diff_check(params, batch, loss_kind, eps=1e-5, aux=None, n_coords=200, seed=0,
                      floor=1e-6):
    """Max relative error between :func:`backprop` and central differences.

    Checks every coordinate when the model has at most ``n_coords`` parameters,
    otherwise a seeded subsample of ``n_coords``.  Denominators are floored at
    ``floor`` so vanishing coordinates are judged on absolute error.
    """
    if eps <= 0:
        raise ConfigurationError("eps must be positive")
    _, grad = backprop(params, batch, loss_kind, aux)
    n = len(params)
    if n <= n_coords:
        coords = np.arange(n)
    else:
        coords = np.sort(np.random.default_rng(seed).choice(n, size=n_coords, replace=False))
    base = params.values.copy()
    worst = 0.0
    for i in coords:
        up = base.copy()
        up[i] += eps
        down = base.copy()
        down[i] -= eps
        f_up = loss_value(params.like(up), batch, loss_kind, aux)
        f_down = loss_value(params.like(down), batch, loss_kind, aux)
        numeric = (f_up - f_down) / (2.0 * eps)
        analytic = grad.values[i]
        denom = max(abs(numeric), abs(analytic), floor)
        worst = max(worst, abs(numeric - analytic) / denom)
    return worst


PARAMS_FORMAT = "fedbench-params"
PARAMS_VERSION = 1


def save_params(params, path, kind=None):
    """Write a versioned text file: a layout header followed by one value per line."""
    lines = [f"{PARAMS_FORMAT} {PARAMS_VERSION}"]
    if kind:
        lines.append(f"kind {kind}")
    lines.append(f"segments {len(params.layout)}")
    for seg in params.layout:
        shape = "x".join(str(d) for d in seg.shape)
        lines.append(f"{seg.name} {seg.offset} {seg.length} {shape}")
    lines.append("values")
    lines.extend(f"{v:.17g}" for v in params.values)
    Path(path).write_text("\n".join(lines) + "\n")


def load_params(path):
    """Inverse of :func:`save_params`; returns ``(params, kind)``."""
    text = Path(path).read_text().splitlines()
    if not text or not text[0].startswith(PARAMS_FORMAT):
        raise ParseError("not a parameter file", line=1)
    version = int(text[0].split()[1])
    if version != PARAMS_VERSION:
        raise ParseError(f"unsupported parameter file version {version}", line=1)
    i, kind = 1, None
    if text[i].startswith("kind "):
        kind = text[i].split()[1]
        i += 1
    try:
        n_seg = int(text[i].split()[1])
        layout = []
        for j in range(n_seg):
            name, offset, length, shape = text[i + 1 + j].split()
            layout.append(Segment(name, int(offset), int(length), tuple(int(d) for d in shape.split("x"))))
        start = i + 1 + n_seg
        if text[start] != "values":
            raise ParseError("missing 'values' marker", line=start + 1)
        values = [float(v) for v in text[start + 1:]]
    except (IndexError, ValueError) as exc:
        raise ParseError(f"malformed parameter file: {exc}") from exc
    return ParamVector(values, layout), kind
