"""Contrastive pretraining over frozen tile-embedding banks.

Each training step draws two views per slide (a view is T tiles from one or
more augmentation slices, placed on the lattice and optionally transformed at
the slide level), embeds them with the pooling network, projects them, and
applies the normalized-temperature cross-entropy loss across the batch.
Augmentation slice 0 is never drawn here; it is reserved for inference.

Everything is seeded: epoch e uses the stream [seed, 1, e], so a resumed run
continues bit-identically to an uninterrupted one.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .bank import EmbeddingBank, list_banks, load_bank
from .errors import (
    DegenerateBatch,
    DegenerateProjection,
    DimensionMismatch,
    FormatError,
    InsufficientTiles,
)
from .numcore import (
    AdamConfig,
    ParamStore,
    PROJECTOR_DIM,
    adam_step,
    init_projector,
    load_checkpoint,
    mlp_projector_backward,
    mlp_projector_forward,
    save_checkpoint,
)
from .sparseconv import PoolingNetwork, PoolingNetworkConfig
from .sparsemap import (
    SlideAugParams,
    SparseMap,
    augment_sparse_map,
    build_sparse_map,
    sample_slide_aug,
)


@dataclass(frozen=True)
class ViewSpec:
    """Record of the random draws that produced one view."""

    slide_id: str
    shared: bool
    aug_indices: tuple[int, ...]
    tile_indices: tuple[int, ...]
    slide_aug: SlideAugParams | None


@dataclass(frozen=True)
class TrainConfig:
    tiles: int = 5
    batch_size: int = 16
    temperature: float = 0.5
    epochs: int = 1000
    shared_aug: bool = True
    slide_aug: bool = True
    adam: AdamConfig = field(default_factory=AdamConfig)
    seed: int = 0

    def __post_init__(self):
        if self.tiles < 1:
            raise ValueError(f"tiles must be >= 1, got {self.tiles}")
        if self.batch_size < 2:
            raise ValueError(f"batch_size must be >= 2, got {self.batch_size}")
        if self.temperature <= 0:
            raise ValueError(f"temperature must be > 0, got {self.temperature}")
        if self.epochs < 0:
            raise ValueError(f"epochs must be >= 0, got {self.epochs}")


# ---------------------------------------------------------------------------
# Config files: flat key=value lines, '#' comments, adam fields dotted.

_CONFIG_KEYS = {
    "tiles": int,
    "batch_size": int,
    "temperature": float,
    "epochs": int,
    "shared_aug": bool,
    "slide_aug": bool,
    "seed": int,
    "adam.lr": float,
    "adam.beta1": float,
    "adam.beta2": float,
    "adam.eps": float,
    "adam.weight_decay": float,
}


def _parse_bool(text: str) -> bool:
    lowered = text.strip().lower()
    if lowered in ("true", "1", "yes", "on"):
        return True
    if lowered in ("false", "0", "no", "off"):
        return False
    raise FormatError(f"cannot parse boolean from '{text}'")


def parse_config_text(text: str) -> dict:
    """Parse key=value lines into typed values; unknown keys are errors."""
    values: dict = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise FormatError(f"config line {lineno}: expected key=value, "
                              f"got '{raw.strip()}'")
        key, _, value = line.partition("=")
        key = key.strip()
        value = value.strip()
        if key not in _CONFIG_KEYS:
            raise FormatError(f"config line {lineno}: unknown key '{key}'")
        caster = _CONFIG_KEYS[key]
        try:
            values[key] = _parse_bool(value) if caster is bool else caster(value)
        except ValueError as exc:
            raise FormatError(
                f"config line {lineno}: bad value for '{key}': {value}") from exc
    return values


def train_config_from_values(values: dict, base: TrainConfig | None = None
                             ) -> TrainConfig:
    """Overlay flat config values (as from a file or CLI) onto a base config."""
    cfg = base or TrainConfig()
    adam_kwargs = {k.split(".", 1)[1]: v for k, v in values.items()
                   if k.startswith("adam.")}
    plain = {k: v for k, v in values.items() if not k.startswith("adam.")}
    if adam_kwargs:
        plain["adam"] = replace(cfg.adam, **adam_kwargs)
    return replace(cfg, **plain)


def load_train_config(path, base: TrainConfig | None = None) -> TrainConfig:
    return train_config_from_values(parse_config_text(Path(path).read_text()),
                                    base)


# ---------------------------------------------------------------------------
# View sampling

def sample_view(bank: EmbeddingBank, cfg: TrainConfig, rng: np.random.Generator
                ) -> tuple[SparseMap, ViewSpec]:
    """Draw one training view from a bank.

    Shared mode draws a single augmentation slice k >= 1 and then T tile
    indices without replacement; not-shared mode draws the T tile indices
    first and then an independent slice index per tile. Draw order is fixed
    so a seeded generator reproduces the view exactly.
    """
    if cfg.tiles > bank.n_tiles:
        raise InsufficientTiles(
            f"bank '{bank.slide_id}' has {bank.n_tiles} tiles per slice, "
            f"view needs {cfg.tiles}")
    if bank.n_augs < 2:
        raise InsufficientTiles(
            f"bank '{bank.slide_id}' has no augmentation slices beyond the "
            f"identity slice; training needs at least 2")

    if cfg.shared_aug:
        k = int(rng.integers(1, bank.n_augs))
        tiles = np.sort(rng.choice(bank.n_tiles, size=cfg.tiles, replace=False))
        coords = bank.coords[k, tiles]
        feats = bank.features[k, tiles]
        augs = (k,)
    else:
        tiles = np.sort(rng.choice(bank.n_tiles, size=cfg.tiles, replace=False))
        ks = rng.integers(1, bank.n_augs, size=cfg.tiles)
        coords = bank.coords[ks, tiles]
        feats = bank.features[ks, tiles]
        augs = tuple(int(k) for k in ks)

    smap = build_sparse_map((coords.astype(np.int64), feats))
    params = None
    if cfg.slide_aug:
        params = sample_slide_aug(rng)
        smap = augment_sparse_map(smap, params)
    spec = ViewSpec(bank.slide_id, cfg.shared_aug, augs,
                    tuple(int(t) for t in tiles), params)
    return smap, spec


# ---------------------------------------------------------------------------
# Loss

def interleaved_pairing(n_views: int) -> np.ndarray:
    """Partner indices when rows (2i, 2i+1) are the two views of slide i."""
    pairing = np.arange(n_views)
    pairing[0::2] += 1
    pairing[1::2] -= 1
    return pairing


def nt_xent(z: np.ndarray, pairing: np.ndarray | None = None,
            temperature: float = 0.5) -> tuple[float, np.ndarray]:
    """Normalized-temperature cross entropy over 2B projected views.

    For view i with partner p(i), the per-view term is
    -log( exp(cos(z_i, z_p(i))/tau) / sum over x != i of exp(cos(z_i, z_x)/tau) );
    the loss is the mean over all views. Returns the loss and its exact
    gradient with respect to every (unnormalized) projection.
    """
    z = np.asarray(z)
    if z.ndim != 2 or len(z) < 2 or len(z) % 2 != 0:
        raise DimensionMismatch(
            f"projections must be (2B, D) with B >= 1, got {z.shape}")
    n = len(z)
    if pairing is None:
        pairing = interleaved_pairing(n)
    else:
        pairing = np.asarray(pairing, dtype=np.int64)
        if pairing.shape != (n,) or np.any(pairing[pairing] != np.arange(n)) \
                or np.any(pairing == np.arange(n)):
            raise DimensionMismatch(
                "pairing must be a fixed-point-free involution on the views")
    if temperature <= 0:
        raise ValueError(f"temperature must be > 0, got {temperature}")

    norms = np.linalg.norm(z, axis=1)
    if np.any(norms == 0.0):
        bad = int(np.argmin(norms))
        raise DegenerateProjection(f"projection {bad} has zero norm")
    zhat = z / norms[:, None]

    sims = zhat @ zhat.T
    logits = sims / temperature
    np.fill_diagonal(logits, -np.inf)
    row_max = logits.max(axis=1, keepdims=True)
    shifted = logits - row_max
    exp = np.exp(shifted)
    denom = exp.sum(axis=1)
    log_denom = np.log(denom) + row_max[:, 0]
    pos = logits[np.arange(n), pairing]
    losses = log_denom - pos
    loss = float(losses.mean())

    g = exp / denom[:, None]
    g[np.arange(n), pairing] -= 1.0
    np.fill_diagonal(g, 0.0)
    g /= n * temperature

    dzhat = (g + g.T) @ zhat
    # through the normalization: remove the radial component, scale by 1/|z|
    radial = np.sum(dzhat * zhat, axis=1, keepdims=True)
    dz = (dzhat - zhat * radial) / norms[:, None]
    return loss, dz.astype(z.dtype, copy=False)


# ---------------------------------------------------------------------------
# Model bundle

@dataclass
class SlideModel:
    """Pooling network + projector sharing one parameter store.

    ``train_tiles`` remembers the per-view tile count the model was trained
    with; inference defaults to it and warns when overridden.
    """

    store: ParamStore
    net: PoolingNetwork
    net_config: PoolingNetworkConfig
    proj_dim: int
    dtype: type
    train_tiles: int | None = None

    @property
    def feat_dim(self) -> int:
        return self.net_config.in_channels


def build_model(net_config: PoolingNetworkConfig, proj_dim: int = PROJECTOR_DIM,
                seed: int = 0, dtype=np.float32,
                train_tiles: int | None = None) -> SlideModel:
    store = ParamStore()
    rng = np.random.default_rng([seed, 0])
    net = PoolingNetwork(net_config, store, rng, dtype=dtype)
    init_projector(store, net_config.out_dim, proj_dim, rng, dtype=dtype)
    return SlideModel(store, net, net_config, proj_dim, dtype, train_tiles)


def _config_json_array(model: SlideModel) -> np.ndarray:
    doc = {
        "in_channels": model.net_config.in_channels,
        "block_channels": list(model.net_config.block_channels),
        "kernel_size": model.net_config.kernel_size,
        "out_dim": model.net_config.out_dim,
        "proj_dim": model.proj_dim,
        "train_tiles": model.train_tiles,
    }
    raw = json.dumps(doc, sort_keys=True).encode("utf-8")
    return np.frombuffer(raw, dtype=np.uint8).astype("<f4")


def save_model(model: SlideModel, path, epoch: int):
    """Checkpoint parameters, optimizer moments, BN buffers, and metadata."""
    arrays = dict(model.store.state_arrays(include_optimizer=True))
    arrays.update(model.net.buffers)
    arrays["meta.state"] = np.array([epoch, model.store.t], dtype=np.float32)
    arrays["meta.config_json"] = _config_json_array(model)
    save_checkpoint(path, arrays)


def load_model(path, dtype=np.float32) -> tuple[SlideModel, int]:
    """Rebuild a model from a checkpoint; returns (model, next epoch)."""
    arrays = load_checkpoint(path)
    if "meta.config_json" not in arrays or "meta.state" not in arrays:
        raise FormatError(f"{Path(path).name}: missing model metadata")
    raw = arrays["meta.config_json"].astype(np.uint8).tobytes()
    doc = json.loads(raw.decode("utf-8"))
    net_config = PoolingNetworkConfig(
        in_channels=int(doc["in_channels"]),
        block_channels=tuple(int(c) for c in doc["block_channels"]),
        kernel_size=int(doc["kernel_size"]),
        out_dim=int(doc["out_dim"]))
    tiles = doc.get("train_tiles")
    model = build_model(net_config, proj_dim=int(doc["proj_dim"]), dtype=dtype,
                        train_tiles=None if tiles is None else int(tiles))
    model.store.load_state(arrays)
    for name, buf in model.net.buffers.items():
        if name not in arrays:
            raise FormatError(f"{Path(path).name}: missing buffer '{name}'")
        buf[...] = arrays[name].astype(dtype)
    epoch, t = arrays["meta.state"]
    model.store.t = int(t)
    return model, int(epoch)


# ---------------------------------------------------------------------------
# Optimization

def train_step(banks: list[EmbeddingBank], model: SlideModel, cfg: TrainConfig,
               rng: np.random.Generator) -> float:
    """One optimizer step on a batch of slides; returns the batch loss."""
    if len(banks) < 2:
        raise DegenerateBatch(
            f"contrastive batch needs >= 2 slides, got {len(banks)}")
    maps = []
    for bank in banks:
        for _ in range(2):
            smap, _ = sample_view(bank, cfg, rng)
            maps.append(smap)
    model.store.zero_grads()
    pooled, cache = model.net.forward(maps, training=True)
    proj, pcache = mlp_projector_forward(pooled, model.store.params)
    loss, dproj = nt_xent(proj, temperature=cfg.temperature)
    dpooled, proj_grads = mlp_projector_backward(dproj, pcache)
    for name, gradval in proj_grads.items():
        model.store.accumulate(name, gradval.astype(model.store[name].dtype,
                                                    copy=False))
    model.net.backward(dpooled.astype(pooled.dtype, copy=False), cache)
    adam_step(model.store, cfg.adam)
    return loss


def pretrain(cfg: TrainConfig, bank_dir, out_checkpoint,
             net_config: PoolingNetworkConfig | None = None,
             proj_dim: int = PROJECTOR_DIM, resume: bool = False,
             log_path=None, report_path=None, dtype=np.float32) -> dict:
    """Train over every bank in a directory; write checkpoint, CSV log, report.

    The per-epoch log is "epoch,loss" CSV. With ``resume`` the checkpoint's
    epoch counter continues the schedule; the random stream of epoch e is
    derived from (seed, e) alone, so the loss trajectory matches an
    uninterrupted run exactly.
    """
    paths = list_banks(bank_dir)
    if len(paths) < 2:
        raise DegenerateBatch(
            f"need at least 2 banks to pretrain, found {len(paths)} in {bank_dir}")
    banks = [load_bank(p) for p in paths]
    feat_dims = {b.feat_dim for b in banks}
    if len(feat_dims) != 1:
        raise DimensionMismatch(
            f"banks disagree on feature dimension: {sorted(feat_dims)}")
    feat_dim = feat_dims.pop()

    out_checkpoint = Path(out_checkpoint)
    start_epoch = 0
    if resume and out_checkpoint.exists():
        model, start_epoch = load_model(out_checkpoint, dtype=dtype)
        if model.feat_dim != feat_dim:
            raise DimensionMismatch(
                f"checkpoint expects {model.feat_dim} feature dims, "
                f"banks carry {feat_dim}")
    else:
        if net_config is None:
            net_config = PoolingNetworkConfig(in_channels=feat_dim)
        model = build_model(net_config, proj_dim=proj_dim, seed=cfg.seed,
                            dtype=dtype, train_tiles=cfg.tiles)
    model.train_tiles = cfg.tiles

    if log_path is None:
        log_path = out_checkpoint.with_suffix(".log.csv")
    log_path = Path(log_path)
    mode = "a" if (resume and start_epoch > 0 and log_path.exists()) else "w"

    last_loss = float("nan")
    with open(log_path, mode) as log:
        if mode == "w":
            log.write("epoch,loss\n")
        for epoch in range(start_epoch, cfg.epochs):
            rng = np.random.default_rng([cfg.seed, 1, epoch])
            order = rng.permutation(len(banks))
            losses = []
            for lo in range(0, len(order), cfg.batch_size):
                batch = [banks[i] for i in order[lo:lo + cfg.batch_size]]
                if len(batch) < 2:
                    continue
                losses.append(train_step(batch, model, cfg, rng))
            last_loss = float(np.mean(losses))
            log.write(f"{epoch},{last_loss!r}\n")
            log.flush()

    save_model(model, out_checkpoint, epoch=cfg.epochs)
    report = {
        "banks": len(banks),
        "feat_dim": feat_dim,
        "epochs": cfg.epochs,
        "start_epoch": start_epoch,
        "final_loss": last_loss,
        "shared_aug": cfg.shared_aug,
        "slide_aug": cfg.slide_aug,
        "tiles": cfg.tiles,
        "batch_size": cfg.batch_size,
        "temperature": cfg.temperature,
        "seed": cfg.seed,
        "checkpoint": out_checkpoint.name,
    }
    if report_path is not None:
        with open(report_path, "w") as fh:
            json.dump(report, fh, sort_keys=True, indent=1)
            fh.write("\n")
    return report
