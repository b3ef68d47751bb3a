"""Photometric training of (hash grid, decoder) models.

Covers the coarse global stage and the per-block local stages. Block
training clones a shared decoder and fine-tunes the copy at a reduced
learning rate (or freezes it), while its hash grid starts fresh.
"""

from __future__ import annotations

import dataclasses
import io
import json
import struct
import sys
from dataclasses import dataclass, field, replace

import numpy as np

from .core import Aabb, SceneDataset, SceneNormalization
from .decoder import (
    DecoderConfig,
    MlpDecoder,
    clone_decoder,
    create_decoder,
    decoder_backward,
    decoder_forward_cached,
)
from .hashgrid import (
    HashGrid,
    HashGridConfig,
    encode_backward_from_cache,
    encode_cache,
    encode_from_cache,
)
from .renderer import (
    Model,
    OccupancyGrid,
    RenderConfig,
    composite_backward_batch,
    composite_batch,
    contract,
    cube_from_contracted,
    field_density_fn,
    occupancy_domain,
    sample_ray_batch,
    update_occupancy,
)
from .rng import STREAM_BATCH, STREAM_INIT, STREAM_OCCUPANCY, STREAM_SAMPLES, rng_for


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    iterations: int = 2000
    batch_rays: int = 1024
    base_lr: float = 1e-3
    decoder_ft_lr: float = 5e-5
    warmup_iters: int = 0  # 0: scaled automatically to 2.5% of iterations
    decay_rate: float = 0.1
    beta1: float = 0.9
    beta2: float = 0.99
    adam_eps: float = 1e-15
    decoder_policy: str = "train"  # train | finetune | freeze
    seed: int = 0
    occupancy_resolution: int = 64
    occupancy_decay: float = 0.95
    occupancy_threshold: float = 1e-2
    occupancy_interval: int = 16
    render: RenderConfig = field(default_factory=RenderConfig)
    log_every: int = 100

    def __post_init__(self):
        if self.decoder_policy not in ("train", "finetune", "freeze"):
            raise ValueError(f"unknown decoder policy {self.decoder_policy!r}")
        if self.base_lr <= 0 or self.decoder_ft_lr <= 0:
            raise ValueError("learning rates must be positive")
        if self.iterations > 0:
            _ = self.warmup  # validates warmup < iterations

    @property
    def warmup(self) -> int:
        w = self.warmup_iters if self.warmup_iters > 0 else max(1, round(0.025 * self.iterations))
        if self.iterations > 0 and w >= self.iterations:
            raise ValueError("warmup must be shorter than the run")
        return w


def lr_schedule(iteration: int, cfg: TrainConfig, base: float | None = None) -> float:
    """Linear warmup to the base rate, then exponential decay to decay_rate x base."""
    base = cfg.base_lr if base is None else base
    w = cfg.warmup
    if iteration < w:
        return base * (iteration + 1) / w
    span = max(cfg.iterations - w, 1)
    return base * cfg.decay_rate ** ((iteration - w) / span)


class Adam:
    """Adam over a flat list of parameter arrays."""

    def __init__(self, params: list[np.ndarray], beta1: float, beta2: float, eps: float):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0

    def step(self, params: list[np.ndarray], grads: list[np.ndarray], lr: float,
             row_mask: np.ndarray | None = None) -> None:
        """In-place update. With row_mask (bool, first axis of every param),
        only masked rows advance; others keep parameters and moments."""
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for p, g, m, v in zip(params, grads, self.m, self.v):
            if row_mask is None:
                m += (1.0 - self.beta1) * (g - m)
                v += (1.0 - self.beta2) * (g * g - v)
                p -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
            else:
                gm = g[row_mask]
                m[row_mask] += (1.0 - self.beta1) * (gm - m[row_mask])
                v[row_mask] += (1.0 - self.beta2) * (gm * gm - v[row_mask])
                p[row_mask] -= lr * (m[row_mask] / c1) / (np.sqrt(v[row_mask] / c2) + self.eps)


@dataclass
class TrainState:
    table_adam: Adam
    decoder_adam: Adam
    appearance_adam: Adam
    iteration: int = 0


@dataclass
class RayBatch:
    origins: np.ndarray  # (B, 3) world space
    dirs: np.ndarray  # (B, 3) unit
    targets: np.ndarray  # (B, 3) rgb in [0, 1]
    appearance_ids: np.ndarray  # (B,) rows of the appearance table


def make_state(model: Model, cfg: TrainConfig) -> TrainState:
    dec = model.decoder
    dec_params = [a for layer in dec.layers() for a in (layer.w, layer.b)]
    return TrainState(
        table_adam=Adam(model.grid.tables, cfg.beta1, cfg.beta2, cfg.adam_eps),
        decoder_adam=Adam(dec_params, cfg.beta1, cfg.beta2, cfg.adam_eps),
        appearance_adam=Adam([dec.appearance_table], cfg.beta1, cfg.beta2, cfg.adam_eps),
    )


def train_step(model: Model, batch: RayBatch, cfg: TrainConfig, state: TrainState) -> float:
    """One MSE step over a ray batch; returns the loss before the update."""
    grid, dec = model.grid, model.decoder
    it = state.iteration
    rng = rng_for(cfg.seed, STREAM_SAMPLES, it)

    o_norm = model.normalization.apply(batch.origins)
    rcfg = cfg.render
    t_near, t_far = model.ray_spans(o_norm, batch.dirs, rcfg)
    t, delta, mask = sample_ray_batch(
        o_norm, batch.dirs, t_near, t_far, model.occupancy, rcfg.max_samples, rng
    )
    r, s = t.shape
    flat = mask.reshape(-1)
    sigma = np.zeros((r, s), dtype=np.float32)
    color = np.zeros((r, s, 3), dtype=np.float32)

    have_samples = bool(flat.any())
    if have_samples:
        pts = (o_norm[:, None, :] + t[:, :, None] * batch.dirs[:, None, :]).reshape(-1, 3)[flat]
        cube = cube_from_contracted(contract(pts))
        cache = encode_cache(grid, cube)
        feats = encode_from_cache(grid, cache)
        view = np.broadcast_to(batch.dirs[:, None, :], (r, s, 3)).reshape(-1, 3)[flat]
        ids = np.broadcast_to(batch.appearance_ids[:, None], (r, s)).reshape(-1)[flat]
        app = dec.appearance_table[ids]
        sg, cl, dcache = decoder_forward_cached(dec, feats, view, app)
        sigma.reshape(-1)[flat] = sg
        color.reshape(-1, 3)[flat] = cl

    bg = rcfg.background_rgb
    rgb, _, _ = composite_batch(t, delta, sigma, color, mask, bg)
    err = rgb - batch.targets
    loss = float(np.mean(err**2))
    if not np.isfinite(loss):
        raise TrainingError(f"non-finite loss at iteration {it}")
    state.iteration += 1
    if not have_samples:
        return loss

    d_rgb = (2.0 / err.size) * err
    d_sigma, d_color = composite_backward_batch(t, delta, sigma, color, mask, bg, d_rgb)
    grads = decoder_backward(
        dec,
        dcache,
        d_sigma.reshape(-1)[flat].astype(grid.dtype),
        d_color.reshape(-1, 3)[flat].astype(grid.dtype),
        appearance_ids=ids,
    )
    table_grads = encode_backward_from_cache(grid, cache, grads.d_feature)

    lr = lr_schedule(it, cfg)
    state.table_adam.step(grid.tables, table_grads, lr)

    if cfg.decoder_policy != "freeze":
        dec_lr = lr if cfg.decoder_policy == "train" else lr_schedule(it, cfg, base=cfg.decoder_ft_lr)
        dec_params = [a for layer in dec.layers() for a in (layer.w, layer.b)]
        dec_grads = [a for layer in grads.layers() for a in (layer.w, layer.b)]
        state.decoder_adam.step(dec_params, dec_grads, dec_lr)
        present = np.zeros(dec.appearance_table.shape[0], dtype=bool)
        present[ids] = True
        state.appearance_adam.step(
            [dec.appearance_table], [grads.appearance_table], dec_lr, row_mask=present
        )
    return loss


def _train_rays(dataset: SceneDataset) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Precompute every training ray: origins, dirs, targets, appearance ids."""
    from .core import pixel_rays

    origins, dirs, targets, ids = [], [], [], []
    for i in dataset.train_indices:
        pose, img = dataset.poses[i], dataset.images[i]
        px, py = np.meshgrid(np.arange(pose.width), np.arange(pose.height), indexing="xy")
        o, d = pixel_rays(pose, px.ravel(), py.ravel())
        origins.append(o)
        dirs.append(d)
        targets.append(img.pixels.reshape(-1, 3).astype(np.float64))
        ids.append(np.full(o.shape[0], dataset.appearance_index[i], dtype=np.int64))
    return (
        np.concatenate(origins),
        np.concatenate(dirs),
        np.concatenate(targets),
        np.concatenate(ids),
    )


def _train_loop(
    model: Model, dataset: SceneDataset, cfg: TrainConfig, log: bool = True
) -> Model:
    origins, dirs, targets, ids = _train_rays(dataset)
    n_rays = origins.shape[0]
    state = make_state(model, cfg)
    density = field_density_fn(model.grid, model.decoder)
    n_updates = 0
    for it in range(cfg.iterations):
        if it % cfg.occupancy_interval == 0:
            update_occupancy(
                model.occupancy, density, cfg.occupancy_decay,
                rng_for(cfg.seed, STREAM_OCCUPANCY, n_updates),
            )
            n_updates += 1
        pick = rng_for(cfg.seed, STREAM_BATCH, it).integers(0, n_rays, cfg.batch_rays)
        batch = RayBatch(origins[pick], dirs[pick], targets[pick], ids[pick])
        loss = train_step(model, batch, cfg, state)
        if log and it % cfg.log_every == 0:
            print(f"{it} {loss:.6f} {lr_schedule(it, cfg):.6e}", file=sys.stdout)
    return model


def train_coarse(
    dataset: SceneDataset,
    cfg: TrainConfig,
    hash_config: HashGridConfig = HashGridConfig(),
    decoder_config: DecoderConfig | None = None,
    log: bool = True,
) -> "Checkpoint":
    """Train the coarse global model on every training image."""
    if len(dataset) == 0:
        raise ValueError("empty dataset")
    if decoder_config is None:
        decoder_config = DecoderConfig(
            feature_dim=hash_config.feature_dim, n_appearance=max(dataset.n_train, 1)
        )
    cam_box = Aabb.from_points(dataset.camera_centers())
    normalization = SceneNormalization.from_aabb(cam_box)
    content = _normalized_content(dataset, normalization)
    grid = HashGrid.create(hash_config, seed=rng_for(cfg.seed, STREAM_INIT, 0).integers(2**31))
    decoder = create_decoder(decoder_config, seed=rng_for(cfg.seed, STREAM_INIT, 1).integers(2**31))
    model = Model(
        grid=grid,
        decoder=decoder,
        occupancy=OccupancyGrid(
            cfg.occupancy_resolution, cfg.occupancy_threshold, aabb=occupancy_domain(content)
        ),
        normalization=normalization,
        content_aabb=content,
    )
    _train_loop(model, dataset, cfg, log=log)
    return Checkpoint(train_config=cfg, model=model)


def _normalized_content(dataset: SceneDataset, norm: SceneNormalization) -> Aabb | None:
    """The dataset's content bounds mapped into the normalized frame."""
    if dataset.scene_aabb is None:
        return None
    return Aabb(norm.apply(dataset.scene_aabb.lo), norm.apply(dataset.scene_aabb.hi))


def train_block(
    block_dataset: SceneDataset,
    shared_decoder: MlpDecoder | None,
    cfg: TrainConfig,
    hash_config: HashGridConfig = HashGridConfig(),
    block_aabb: Aabb | None = None,
    log: bool = True,
) -> "Checkpoint":
    """Train one local block model.

    The hash grid starts fresh; the decoder is a deep copy of the shared
    one, driven by cfg.decoder_policy (default finetune). Passing
    shared_decoder=None trains a fresh random decoder instead (the
    no-sharing ablation).
    """
    if len(block_dataset) == 0:
        raise ValueError("empty block")
    if block_aabb is None:
        block_aabb = Aabb.from_points(block_dataset.camera_centers())
    normalization = SceneNormalization.from_aabb(block_aabb)
    content = _normalized_content(block_dataset, normalization)
    grid = HashGrid.create(hash_config, seed=rng_for(cfg.seed, STREAM_INIT, 2).integers(2**31))
    if shared_decoder is not None:
        decoder = clone_decoder(shared_decoder)
    else:
        decoder_config = DecoderConfig(
            feature_dim=hash_config.feature_dim, n_appearance=max(block_dataset.n_train, 1)
        )
        decoder = create_decoder(
            decoder_config, seed=rng_for(cfg.seed, STREAM_INIT, 3).integers(2**31)
        )
        if cfg.decoder_policy == "finetune":
            cfg = replace(cfg, decoder_policy="train")
    model = Model(
        grid=grid,
        decoder=decoder,
        occupancy=OccupancyGrid(
            cfg.occupancy_resolution, cfg.occupancy_threshold, aabb=occupancy_domain(content)
        ),
        normalization=normalization,
        content_aabb=content,
    )
    _train_loop(model, block_dataset, cfg, log=log)
    return Checkpoint(train_config=cfg, model=model)


# ---------------------------------------------------------------------------
# checkpoint serialization
# ---------------------------------------------------------------------------

CHECKPOINT_MAGIC = b"SCLR"
CHECKPOINT_VERSION = 1


@dataclass
class Checkpoint:
    train_config: TrainConfig
    model: Model
    version: int = CHECKPOINT_VERSION


def _write_array(buf: io.BufferedIOBase, arr: np.ndarray) -> None:
    data = np.ascontiguousarray(arr, dtype="<f4")
    buf.write(data.tobytes())


def _read_array(buf: io.BufferedIOBase, shape: tuple[int, ...]) -> np.ndarray:
    n = int(np.prod(shape))
    raw = buf.read(n * 4)
    if len(raw) != n * 4:
        raise ValueError("truncated checkpoint")
    return np.frombuffer(raw, dtype="<f4").reshape(shape).copy()


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    """Binary layout: magic, u32 version, u32 header length, JSON header
    (configs + normalization), then little-endian f32 blocks in a fixed
    order: hash tables by level, decoder layers (w then b, density
    branch, density head, color branch, color head), appearance table,
    occupancy values."""
    m = ckpt.model
    header = {
        "train": dataclasses.asdict(ckpt.train_config),
        "hash": dataclasses.asdict(m.grid.config),
        "decoder": dataclasses.asdict(m.decoder.config),
        "occupancy": {
            "resolution": m.occupancy.resolution,
            "threshold": m.occupancy.threshold,
            "aabb": [list(map(float, m.occupancy.aabb.lo)), list(map(float, m.occupancy.aabb.hi))],
        },
        "normalization": {
            "center": [float(c) for c in m.normalization.center],
            "scale": float(m.normalization.scale),
        },
        "content_aabb": None
        if m.content_aabb is None
        else [list(map(float, m.content_aabb.lo)), list(map(float, m.content_aabb.hi))],
    }
    blob = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<II", ckpt.version, len(blob)))
        f.write(blob)
        for table in m.grid.tables:
            _write_array(f, table)
        for layer in m.decoder.layers():
            _write_array(f, layer.w)
            _write_array(f, layer.b)
        _write_array(f, m.decoder.appearance_table)
        _write_array(f, m.occupancy.values)


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as f:
        if f.read(4) != CHECKPOINT_MAGIC:
            raise ValueError(f"{path}: not a checkpoint file")
        version, hlen = struct.unpack("<II", f.read(8))
        header = json.loads(f.read(hlen).decode())
        train_cfg = _train_config_from_dict(header["train"])
        hash_cfg = HashGridConfig(**header["hash"])
        dec_cfg = DecoderConfig(**header["decoder"])
        tables = [
            _read_array(f, (hash_cfg.table_size, hash_cfg.features_per_level))
            for _ in range(hash_cfg.levels)
        ]
        grid = HashGrid(config=hash_cfg, tables=tables)
        decoder = create_decoder(dec_cfg)
        for layer in decoder.layers():
            layer.w = _read_array(f, layer.w.shape)
            layer.b = _read_array(f, layer.b.shape)
        decoder.appearance_table = _read_array(f, decoder.appearance_table.shape)
        occ_meta = header["occupancy"]
        values = _read_array(f, (occ_meta["resolution"] ** 3,))
        occupancy = OccupancyGrid(
            resolution=occ_meta["resolution"], threshold=occ_meta["threshold"], values=values
        )
        norm = SceneNormalization(
            center=np.array(header["normalization"]["center"]),
            scale=header["normalization"]["scale"],
        )
    model = Model(grid=grid, decoder=decoder, occupancy=occupancy, normalization=norm)
    return Checkpoint(train_config=train_cfg, model=model, version=version)


def _train_config_from_dict(d: dict) -> TrainConfig:
    d = dict(d)
    render = d.pop("render", None)
    cfg = TrainConfig(**d, render=RenderConfig(**_tupled(render)) if render else RenderConfig())
    return cfg


def _tupled(render: dict) -> dict:
    out = dict(render)
    if "background" in out:
        out["background"] = tuple(out["background"])
    return out
