"""Shallow MLP decoding hash features into density and color.

Two-branch layout: the density branch reads only the encoded feature and
emits a density logit plus a narrow geometry feature; the color branch
reads that geometry feature, a spherical-harmonics view encoding, and a
per-image appearance embedding. The backward pass is hand-written
reverse mode so gradients stay exact and inspectable.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field

import numpy as np


class EvaluationError(ValueError):
    """Raised when the decoder is fed non-finite inputs."""


@dataclass(frozen=True)
class DecoderConfig:
    feature_dim: int
    depth: int = 5
    width: int = 128
    geo_features: int = 15
    view_degree: int = 4  # 0 disables view conditioning entirely
    appearance_dim: int = 8
    n_appearance: int = 1  # rows in the appearance table (training images)

    def __post_init__(self):
        if self.depth < 3:
            raise ValueError("need at least 3 layers (2 density + 1 color)")
        if not (0 <= self.view_degree <= 4):
            raise ValueError("view_degree must be in [0, 4]")
        if self.n_appearance < 1 or self.appearance_dim < 1:
            raise ValueError("appearance table must be nonempty")

    @property
    def sh_dim(self) -> int:
        return self.view_degree**2

    @property
    def color_in_dim(self) -> int:
        return self.geo_features + self.sh_dim + self.appearance_dim

    @property
    def density_depth(self) -> int:
        return 2  # split point: the first two hidden layers are geometry-only

    @property
    def color_depth(self) -> int:
        return self.depth - self.density_depth


@dataclass
class Dense:
    w: np.ndarray  # (fan_in, fan_out)
    b: np.ndarray  # (fan_out,)


@dataclass
class MlpDecoder:
    config: DecoderConfig
    density_layers: list[Dense]
    density_head: Dense
    color_layers: list[Dense]
    color_head: Dense
    appearance_table: np.ndarray  # (n_appearance, appearance_dim)

    @property
    def dtype(self):
        return self.density_layers[0].w.dtype

    def layers(self) -> list[Dense]:
        return [*self.density_layers, self.density_head, *self.color_layers, self.color_head]

    def parameters(self) -> list[np.ndarray]:
        out = []
        for layer in self.layers():
            out.extend((layer.w, layer.b))
        out.append(self.appearance_table)
        return out


def _he_uniform(rng, fan_in: int, fan_out: int, dtype) -> np.ndarray:
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, (fan_in, fan_out)).astype(dtype)


def create_decoder(config: DecoderConfig, seed: int = 0, dtype=np.float32) -> MlpDecoder:
    rng = np.random.default_rng(seed)

    def dense(fan_in, fan_out):
        return Dense(w=_he_uniform(rng, fan_in, fan_out, dtype), b=np.zeros(fan_out, dtype=dtype))

    density = [dense(config.feature_dim, config.width)]
    for _ in range(config.density_depth - 1):
        density.append(dense(config.width, config.width))
    density_head = dense(config.width, 1 + config.geo_features)

    color = [dense(config.color_in_dim, config.width)]
    for _ in range(config.color_depth - 1):
        color.append(dense(config.width, config.width))
    color_head = dense(config.width, 3)

    return MlpDecoder(
        config=config,
        density_layers=density,
        density_head=density_head,
        color_layers=color,
        color_head=color_head,
        appearance_table=np.zeros((config.n_appearance, config.appearance_dim), dtype=dtype),
    )


def clone_decoder(dec: MlpDecoder) -> MlpDecoder:
    """Deep copy; fine-tuning the clone never touches the source."""
    return copy.deepcopy(dec)


def mean_appearance(dec: MlpDecoder) -> np.ndarray:
    """Mean of all training-image embeddings, used for validation renders."""
    if dec.appearance_table.size == 0:
        raise ValueError("appearance table is empty")
    return dec.appearance_table.mean(axis=0)


# Real spherical harmonics constants, bands l = 0..3.
_SH_C0 = 0.28209479177387814
_SH_C1 = 0.4886025119029199
_SH_C2 = (1.0925484305920792, 0.9461746957575601, 0.5462742152960396)
_SH_C3 = (
    0.5900435899266435,
    2.890611442640554,
    0.4570457994644658,
    0.3731763325901154,
    1.445305721320277,
)


def sh_basis(dirs: np.ndarray, degree: int) -> np.ndarray:
    """Spherical-harmonics basis of unit directions, degree^2 components."""
    dirs = np.atleast_2d(np.asarray(dirs))
    x, y, z = dirs[:, 0], dirs[:, 1], dirs[:, 2]
    cols = [np.full_like(x, _SH_C0)]
    if degree > 1:
        cols += [_SH_C1 * y, _SH_C1 * z, _SH_C1 * x]
    if degree > 2:
        cols += [
            _SH_C2[0] * x * y,
            _SH_C2[0] * y * z,
            _SH_C2[1] * (2 * z * z - x * x - y * y),
            _SH_C2[0] * z * x,
            _SH_C2[2] * (x * x - y * y),
        ]
    if degree > 3:
        cols += [
            _SH_C3[0] * y * (3 * x * x - y * y),
            _SH_C3[1] * x * y * z,
            _SH_C3[2] * y * (5 * z * z - 1),
            _SH_C3[3] * z * (5 * z * z - 3),
            _SH_C3[2] * x * (5 * z * z - 1),
            _SH_C3[4] * z * (x * x - y * y),
            _SH_C3[0] * x * (x * x - 3 * y * y),
        ]
    if degree == 0:
        return np.zeros((dirs.shape[0], 0), dtype=dirs.dtype)
    return np.stack(cols, axis=1)


def _softplus(z):
    return np.logaddexp(0.0, z)


def _sigmoid(z):
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


@dataclass
class DecoderCache:
    """Activations recorded by the forward pass, consumed by backward."""

    density_inputs: list[np.ndarray] = field(default_factory=list)
    head_input: np.ndarray | None = None
    density_logit: np.ndarray | None = None
    color_inputs: list[np.ndarray] = field(default_factory=list)
    color: np.ndarray | None = None
    n: int = 0


def _as_batch(arr, dim, name) -> np.ndarray:
    out = np.atleast_2d(np.asarray(arr))
    if out.shape[-1] != dim:
        raise ValueError(f"{name} must have {dim} components, got shape {out.shape}")
    return out


def decoder_forward_cached(
    dec: MlpDecoder, feature, view_dir, appearance
) -> tuple[np.ndarray, np.ndarray, DecoderCache]:
    cfg = dec.config
    feat = _as_batch(feature, cfg.feature_dim, "feature")
    app = _as_batch(appearance, cfg.appearance_dim, "appearance")
    dirs = _as_batch(view_dir, 3, "view_dir")
    n = feat.shape[0]
    if app.shape[0] == 1 and n > 1:
        app = np.broadcast_to(app, (n, cfg.appearance_dim))
    if dirs.shape[0] == 1 and n > 1:
        dirs = np.broadcast_to(dirs, (n, 3))
    if not (np.all(np.isfinite(feat)) and np.all(np.isfinite(dirs)) and np.all(np.isfinite(app))):
        raise EvaluationError("non-finite decoder input")

    cache = DecoderCache(n=n)
    h = feat.astype(dec.dtype, copy=False)
    for layer in dec.density_layers:
        cache.density_inputs.append(h)
        h = np.maximum(h @ layer.w + layer.b, 0.0)
    cache.head_input = h
    head = h @ dec.density_head.w + dec.density_head.b
    cache.density_logit = head[:, 0]
    sigma = _softplus(head[:, 0])
    geo = head[:, 1:]

    sh = sh_basis(dirs, cfg.view_degree).astype(dec.dtype, copy=False)
    g = np.concatenate([geo, sh, app.astype(dec.dtype, copy=False)], axis=1)
    for layer in dec.color_layers:
        cache.color_inputs.append(g)
        g = np.maximum(g @ layer.w + layer.b, 0.0)
    cache.color_inputs.append(g)
    logits = g @ dec.color_head.w + dec.color_head.b
    color = _sigmoid(logits)
    cache.color = color
    return sigma, color, cache


def decoder_forward(dec: MlpDecoder, feature, view_dir, appearance):
    """Density and RGB for encoded features.

    Accepts single vectors or (N, dim) batches; appearance and view_dir
    broadcast when given once for a whole batch.
    """
    single = np.asarray(feature).ndim == 1
    sigma, color, _ = decoder_forward_cached(dec, feature, view_dir, appearance)
    if single:
        return float(sigma[0]), color[0]
    return sigma, color


def density_forward(dec: MlpDecoder, feature) -> np.ndarray:
    """Density-branch-only evaluation (occupancy updates skip the color net)."""
    feat = _as_batch(feature, dec.config.feature_dim, "feature")
    h = feat.astype(dec.dtype, copy=False)
    for layer in dec.density_layers:
        h = np.maximum(h @ layer.w + layer.b, 0.0)
    logit = h @ dec.density_head.w[:, 0] + dec.density_head.b[0]
    return _softplus(logit)


@dataclass
class DecoderGrads:
    density_layers: list[Dense]
    density_head: Dense
    color_layers: list[Dense]
    color_head: Dense
    appearance_table: np.ndarray  # (n_appearance, appearance_dim)
    d_feature: np.ndarray  # (N, feature_dim), chains into the encoder
    d_appearance_input: np.ndarray  # (N, appearance_dim)

    def layers(self) -> list[Dense]:
        return [*self.density_layers, self.density_head, *self.color_layers, self.color_head]


def _dense_backward(layer: Dense, x: np.ndarray, h: np.ndarray, dout: np.ndarray):
    """Backward through h = relu(x @ w + b). Returns (dx, Dense grads)."""
    dpre = dout * (h > 0)
    return dpre @ layer.w.T, Dense(w=x.T @ dpre, b=dpre.sum(axis=0))


def decoder_backward(
    dec: MlpDecoder,
    cache: DecoderCache,
    d_sigma,
    d_color,
    appearance_ids: np.ndarray | None = None,
) -> DecoderGrads:
    """Exact reverse-mode gradients for a cached forward pass.

    When appearance_ids is given (one table row per sample), per-sample
    appearance gradients are scattered into the table gradient; rows not
    referenced stay zero.
    """
    cfg = dec.config
    d_sigma = np.atleast_1d(np.asarray(d_sigma, dtype=dec.dtype))
    d_color = np.atleast_2d(np.asarray(d_color, dtype=dec.dtype))

    # color head: c = sigmoid(logits)
    c = cache.color
    dlogits = d_color * c * (1.0 - c)
    g_color_head = Dense(
        w=cache.color_inputs[-1].T @ dlogits, b=dlogits.sum(axis=0)
    )
    dg = dlogits @ dec.color_head.w.T

    g_color_layers: list[Dense] = []
    for i in range(len(dec.color_layers) - 1, -1, -1):
        dg, grad = _dense_backward(
            dec.color_layers[i], cache.color_inputs[i], cache.color_inputs[i + 1], dg
        )
        g_color_layers.append(grad)
    g_color_layers.reverse()

    d_geo = dg[:, : cfg.geo_features]
    d_app = dg[:, cfg.geo_features + cfg.sh_dim :]

    # density head: sigma = softplus(head[:, 0]), geo = head[:, 1:]
    dhead = np.empty((cache.n, 1 + cfg.geo_features), dtype=dec.dtype)
    dhead[:, 0] = d_sigma * _sigmoid(cache.density_logit)
    dhead[:, 1:] = d_geo
    g_density_head = Dense(w=cache.head_input.T @ dhead, b=dhead.sum(axis=0))
    dh = dhead @ dec.density_head.w.T

    g_density_layers: list[Dense] = []
    acts = [*cache.density_inputs[1:], cache.head_input]
    for i in range(len(dec.density_layers) - 1, -1, -1):
        dh, grad = _dense_backward(dec.density_layers[i], cache.density_inputs[i], acts[i], dh)
        g_density_layers.append(grad)
    g_density_layers.reverse()

    app_grad = np.zeros_like(dec.appearance_table)
    if appearance_ids is not None:
        ids = np.asarray(appearance_ids).reshape(-1)
        np.add.at(app_grad, ids, d_app)

    return DecoderGrads(
        density_layers=g_density_layers,
        density_head=g_density_head,
        color_layers=g_color_layers,
        color_head=g_color_head,
        appearance_table=app_grad,
        d_feature=dh,
        d_appearance_input=d_app,
    )


def parameter_checksum(dec: MlpDecoder) -> int:
    """Order-stable hash of every parameter byte; cheap identity check."""
    import zlib

    crc = 0
    for p in dec.parameters():
        crc = zlib.crc32(np.ascontiguousarray(p).tobytes(), crc)
    return crc
