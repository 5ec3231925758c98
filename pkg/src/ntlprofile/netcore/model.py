"""Shared per-channel ConvNet, RoI max pooling and the classifier head."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .layers import (
    EVAL,
    TRAIN,
    BatchNorm,
    Conv2d,
    Dense,
    Dropout,
    GaussianNoise,
    LeakyReLU,
    MaxPool2x2,
    ShapeError,
    run_backward,
    run_forward,
)
from .params import ParamSet

ROI_BINS = 3


@dataclass(frozen=True)
class NetConfig:
    """Architecture knobs; the defaults reproduce the full-size network."""

    input_size: int = 50
    n_channels: int = 7
    widths: tuple[int, ...] = (32, 32, 64, 64, 128, 128, 256, 128, 64)
    noise_sigma: float = 0.15
    dropout: float = 0.5
    lrelu_alpha: float = 0.1
    bn_momentum: float = 0.99
    bn_eps: float = 1e-5

    @classmethod
    def reduced(cls, input_size: int = 12, n_channels: int = 2) -> "NetConfig":
        return cls(input_size=input_size, n_channels=n_channels, widths=(16, 16, 32, 32, 64, 64, 128, 64, 32))

    @property
    def feature_size(self) -> int:
        return self.input_size // 2 // 2 // 2

    @property
    def embedding_dim(self) -> int:
        return self.n_channels * self.widths[-1] * ROI_BINS * ROI_BINS


def build_convnet(cfg: NetConfig) -> list:
    """Layer stack applied to every single-channel profile image."""
    w = cfg.widths
    kernels = (3, 3, 3, 3, 3, 3, 3, 1, 1)
    layers: list = [GaussianNoise(cfg.noise_sigma)]
    cin = 1
    for i, (cout, k) in enumerate(zip(w, kernels), start=1):
        layers += [
            # the network input needs no gradient
            Conv2d(f"conv{i}", cin, cout, k, input_grad=i > 1),
            LeakyReLU(cfg.lrelu_alpha),
            BatchNorm(f"bn{i}", cout, cfg.bn_momentum, cfg.bn_eps),
        ]
        if i in (2, 4, 6):
            layers += [MaxPool2x2(), Dropout(cfg.dropout)]
        cin = cout
    return layers


def shape_trace(layers, shape) -> list[tuple[int, ...]]:
    trace = [tuple(shape)]
    for layer in layers:
        shape = layer.out_shape(shape)
        if shape != trace[-1]:
            trace.append(shape)
    return trace


# -- RoI pooling --------------------------------------------------------------

def project_bbox(bbox, input_size: int, feature_size: int) -> tuple[int, int, int, int]:
    """Map an inclusive pixel box to a half-open feature-map region.

    Returns ``(xs, ys, xe, ye)`` with at least one cell along each axis.
    """
    scale = feature_size / input_size
    x0, y0, x1, y1 = (float(v) for v in bbox)
    out = []
    for lo, hi in ((x0, x1), (y0, y1)):
        s = min(max(int(np.floor(lo * scale)), 0), feature_size - 1)
        e = min(max(int(np.ceil(hi * scale)), s + 1), feature_size)
        out.append((s, e))
    (xs, xe), (ys, ye) = out
    return xs, ys, xe, ye


def _bin_edges(start: int, end: int, bins: int = ROI_BINS) -> list[tuple[int, int]]:
    size = end - start
    return [
        (start + int(np.floor(i * size / bins)), start + int(np.ceil((i + 1) * size / bins)))
        for i in range(bins)
    ]


def roi_masks(bboxes: np.ndarray, input_size: int, feature_size: int) -> np.ndarray:
    """Boolean membership ``(N, bins*bins, F*F)`` of feature cells per output bin."""
    n = len(bboxes)
    masks = np.zeros((n, ROI_BINS * ROI_BINS, feature_size, feature_size), dtype=bool)
    for i, box in enumerate(bboxes):
        xs, ys, xe, ye = project_bbox(box, input_size, feature_size)
        for by, (r0, r1) in enumerate(_bin_edges(ys, ye)):
            for bx, (c0, c1) in enumerate(_bin_edges(xs, xe)):
                masks[i, by * ROI_BINS + bx, r0:r1, c0:c1] = True
    return masks.reshape(n, ROI_BINS * ROI_BINS, feature_size * feature_size)


def roi_pool_forward(fmap: np.ndarray, masks: np.ndarray):
    """Max over each bin's cells. ``fmap`` is (N, C, F, F); returns (N, C, 3, 3)."""
    n, c, f, _ = fmap.shape
    flat = fmap.reshape(n, c, 1, f * f)
    neg = np.array(-np.inf, dtype=fmap.dtype)
    masked = np.where(masks[:, None, :, :], flat, neg)
    arg = masked.argmax(axis=-1)  # (N, C, 9)
    out = np.take_along_axis(flat[:, :, 0, :], arg, axis=-1)
    return out.reshape(n, c, ROI_BINS, ROI_BINS), (arg, fmap.shape)


def roi_pool_backward(dy: np.ndarray, cache) -> np.ndarray:
    arg, shape = cache
    n, c, f, _ = shape
    dx = np.zeros((n * c, f * f), dtype=dy.dtype)
    rows = np.repeat(np.arange(n * c), ROI_BINS * ROI_BINS)
    np.add.at(dx, (rows, arg.reshape(-1)), dy.reshape(-1))
    return dx.reshape(shape)


def roi_project_pool(fmap: np.ndarray, bbox, input_size: int = 50) -> np.ndarray:
    """Single-map convenience wrapper: (C, F, F) feature map -> (C, 3, 3)."""
    f = fmap.shape[-1]
    masks = roi_masks(np.asarray([bbox]), input_size, f)
    out, _ = roi_pool_forward(fmap[None], masks)
    return out[0]


# -- full network ---------------------------------------------------------------

@dataclass
class ForwardOutput:
    logits: np.ndarray  # (B, 2)
    probs: np.ndarray  # (B, 2)
    embedding: np.ndarray  # (B, embedding_dim), before L2 normalisation
    cache: dict | None = field(default=None, repr=False)


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def l2_normalize(x: np.ndarray, eps: float = 1e-12):
    norm = np.sqrt((x * x).sum(axis=-1, keepdims=True)) + eps
    return x / norm, norm


def l2_normalize_backward(dy: np.ndarray, y: np.ndarray, norm: np.ndarray) -> np.ndarray:
    return (dy - y * (dy * y).sum(axis=-1, keepdims=True)) / norm


class InferenceNet:
    """Shared ConvNet over each profile channel, RoI pooling, concat, dense head."""

    def __init__(self, cfg: NetConfig = NetConfig()):
        self.cfg = cfg
        self.convnet = build_convnet(cfg)
        self.head = Dense("head", cfg.embedding_dim, 2)
        trace = shape_trace(self.convnet, (1, cfg.input_size, cfg.input_size))
        spatial = [s[1] for s in trace]
        expected = [cfg.input_size // 2**i for i in range(4)]
        if sorted(set(spatial), reverse=True) != expected:
            raise ShapeError(f"unexpected spatial trace {spatial}")
        self.trace = trace

    def init_params(self, seed: int = 0, dtype=np.float32) -> ParamSet:
        rng = np.random.default_rng(seed)
        params = ParamSet()
        for layer in self.convnet + [self.head]:
            layer.init_params(params, rng)
        return params.astype(dtype)

    def convnet_param_count(self) -> int:
        return sum(getattr(layer, "n_params", 0) for layer in self.convnet)

    def shared_convnet(self, x, params, mode=EVAL, rng=None, keep_cache=False, update_stats=True):
        if x.ndim != 4 or x.shape[1:] != (1, self.cfg.input_size, self.cfg.input_size):
            raise ShapeError(f"shared convnet expects (N, 1, {self.cfg.input_size}, {self.cfg.input_size}), got {x.shape}")
        return run_forward(self.convnet, x, params, mode, rng, keep_cache, update_stats)

    def forward(
        self,
        params: ParamSet,
        images: np.ndarray,
        bboxes: np.ndarray,
        mode: str = EVAL,
        rng: np.random.Generator | None = None,
        keep_cache: bool = False,
        update_stats: bool = True,
    ) -> ForwardOutput:
        """``images`` (B, C, S, S); ``bboxes`` (B, C, 4) inclusive pixel boxes."""
        cfg = self.cfg
        b, c = images.shape[:2]
        if c != cfg.n_channels or images.shape[2:] != (cfg.input_size, cfg.input_size):
            raise ShapeError(f"expected (B, {cfg.n_channels}, {cfg.input_size}, {cfg.input_size}), got {images.shape}")
        if mode == TRAIN and rng is None:
            raise ValueError("train mode needs an rng")
        dtype = params["head.w"].dtype
        x = images.reshape(b * c, 1, cfg.input_size, cfg.input_size).astype(dtype, copy=False)
        fmap, conv_caches = run_forward(self.convnet, x, params, mode, rng, keep_cache, update_stats)
        masks = roi_masks(np.asarray(bboxes).reshape(b * c, 4), cfg.input_size, cfg.feature_size)
        pooled, roi_cache = roi_pool_forward(fmap, masks)
        embedding = pooled.reshape(b, cfg.embedding_dim)
        logits, head_cache = self.head.forward(embedding, params, mode, rng)
        cache = None
        if keep_cache:
            cache = {"conv": conv_caches, "roi": roi_cache, "head": head_cache, "shape": (b, c)}
        return ForwardOutput(logits, softmax(logits), embedding, cache)

    def backward(self, params: ParamSet, out: ForwardOutput, dlogits: np.ndarray, dembedding=None) -> dict:
        cache = out.cache
        if cache is None:
            raise RuntimeError("forward was run without keep_cache")
        grads: dict[str, np.ndarray] = {}
        demb = self.head.backward(dlogits.astype(out.logits.dtype), cache["head"], params, grads)
        if dembedding is not None:
            demb = demb + dembedding.astype(demb.dtype)
        b, c = cache["shape"]
        f = self.cfg.feature_size
        dpooled = demb.reshape(b * c, self.cfg.widths[-1], ROI_BINS, ROI_BINS)
        dfmap = roi_pool_backward(dpooled, cache["roi"])
        run_backward(self.convnet, cache["conv"], dfmap, params, grads)
        return grads


def cross_entropy(logits: np.ndarray, targets: np.ndarray):
    """Mean cross-entropy and its gradient w.r.t. the logits."""
    z = logits - logits.max(axis=-1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
    n = len(targets)
    loss = -logp[np.arange(n), targets].mean()
    grad = np.exp(logp)
    grad[np.arange(n), targets] -= 1.0
    return float(loss), grad / n
