"""Submanifold sparse convolutional pooling network with exact backprop.

The pooling function maps a sparse lattice of tile features to a fixed-size
vector: a stack of residual blocks (conv-BN-ReLU-conv-BN plus skip, final
ReLU) over active sites only, a global average pool, and a linear head.

Convolutions are submanifold: the output active-site set equals the input
active-site set, and only active neighbors contribute. Site adjacency is
enumerated once per map into a Rulebook (per kernel offset, the list of
(input site, output site) index pairs), which both directions of the
convolution then replay.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import (
    DegenerateBatch,
    DimensionMismatch,
    EmptyBag,
    NoForwardCache,
    StaleRulebook,
)
from .sparsemap import SparseMap


def kernel_offsets(kernel_size: int) -> list[tuple[int, int]]:
    """Row-major offsets of a k x k window centered on zero."""
    c = kernel_size // 2
    return [(di, dj) for di in range(-c, c + 1) for dj in range(-c, c + 1)]


@dataclass
class Rulebook:
    """Per kernel offset, (input site index, output site index) pairs.

    ``sites`` keeps a copy of the map's site array so any attempt to replay
    the book against a different map is caught.
    """

    kernel_size: int
    sites: np.ndarray
    pairs: list[np.ndarray] = field(default_factory=list)

    @property
    def n_sites(self) -> int:
        return len(self.sites)

    def matches(self, smap: SparseMap) -> bool:
        return (len(self.sites) == smap.n_sites
                and np.array_equal(self.sites, smap.sites))


def build_rulebook(smap: SparseMap, kernel_size: int = 3) -> Rulebook:
    """Enumerate active-neighbor pairs for every kernel offset.

    Offsets are scanned row-major over the window; the zero offset is always
    the complete identity pairing.
    """
    if kernel_size < 1 or kernel_size % 2 == 0:
        raise ValueError(f"kernel_size must be odd and positive, got {kernel_size}")
    sites = smap.sites
    index = {(int(i), int(j)): idx for idx, (i, j) in enumerate(sites)}
    pairs: list[np.ndarray] = []
    for di, dj in kernel_offsets(kernel_size):
        if di == 0 and dj == 0:
            eye = np.arange(len(sites), dtype=np.int64)
            pairs.append(np.stack([eye, eye], axis=1))
            continue
        found = [(index[(int(i) + di, int(j) + dj)], out_idx)
                 for out_idx, (i, j) in enumerate(sites)
                 if (int(i) + di, int(j) + dj) in index]
        pairs.append(np.array(found, dtype=np.int64).reshape(-1, 2))
    return Rulebook(kernel_size, sites.copy(), pairs)


def merge_rulebooks(books: list[Rulebook], starts: list[int]) -> list[np.ndarray]:
    """Concatenate per-map pair lists into global-index pair lists."""
    n_off = len(books[0].pairs)
    merged = []
    for o in range(n_off):
        parts = [b.pairs[o] + s for b, s in zip(books, starts) if len(b.pairs[o])]
        merged.append(np.concatenate(parts, axis=0) if parts
                      else np.zeros((0, 2), dtype=np.int64))
    return merged


def _conv_pairs(x: np.ndarray, weights: np.ndarray, bias: np.ndarray,
                pairs: list[np.ndarray], n_out: int) -> np.ndarray:
    """out[t] = bias + sum over offsets o of W_o . x[source of t under o]."""
    k = weights.shape[0]
    out = np.tile(bias, (n_out, 1))
    for o, pr in enumerate(pairs):
        if len(pr) == 0:
            continue
        w = weights[o // k, o % k]
        # within one offset the output indices are distinct, += is safe
        out[pr[:, 1]] += x[pr[:, 0]] @ w
    return out


def _conv_pairs_backward(grad_out: np.ndarray, x: np.ndarray,
                         weights: np.ndarray, pairs: list[np.ndarray]
                         ) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    k = weights.shape[0]
    dx = np.zeros_like(x)
    dw = np.zeros_like(weights)
    db = grad_out.sum(axis=0)
    for o, pr in enumerate(pairs):
        if len(pr) == 0:
            continue
        w = weights[o // k, o % k]
        src, dst = pr[:, 0], pr[:, 1]
        dw[o // k, o % k] = x[src].T @ grad_out[dst]
        dx[src] += grad_out[dst] @ w.T
    return dx, dw, db


def submconv_forward(smap: SparseMap, weights: np.ndarray, bias: np.ndarray,
                     rulebook: Rulebook) -> tuple[SparseMap, dict]:
    """Submanifold convolution over one map; returns output map and cache."""
    if weights.ndim != 4 or weights.shape[0] != weights.shape[1]:
        raise DimensionMismatch(f"weights must be (k, k, C_in, C_out), "
                                f"got {weights.shape}")
    if weights.shape[0] != rulebook.kernel_size:
        raise StaleRulebook(
            f"rulebook built for kernel {rulebook.kernel_size}, "
            f"weights are {weights.shape[0]}x{weights.shape[1]}")
    if not rulebook.matches(smap):
        raise StaleRulebook("rulebook was built for a different site set")
    if smap.feat_dim != weights.shape[2]:
        raise DimensionMismatch(
            f"map has {smap.feat_dim} channels, weights expect {weights.shape[2]}")
    out = _conv_pairs(smap.features, weights, bias, rulebook.pairs, smap.n_sites)
    cache = {"x": smap.features, "weights": weights, "rulebook": rulebook}
    return SparseMap(smap.sites, out), cache


def submconv_backward(grad_out: np.ndarray, cache: dict | None
                      ) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Gradients w.r.t. input features, weights, and bias."""
    if not cache or not all(k in cache for k in ("x", "weights", "rulebook")):
        raise NoForwardCache("submconv_backward needs the forward cache")
    x, w, rb = cache["x"], cache["weights"], cache["rulebook"]
    grad_out = np.asarray(grad_out)
    if grad_out.shape != (len(x), w.shape[3]):
        raise DimensionMismatch(
            f"grad_out shape {grad_out.shape}, expected ({len(x)}, {w.shape[3]})")
    return _conv_pairs_backward(grad_out, x, w, rb.pairs)


# ---------------------------------------------------------------------------
# Batch normalization over all active sites of the minibatch

@dataclass
class BatchNormState:
    """Per-channel affine normalization state (running stats are buffers)."""

    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.1
    eps: float = 1e-5

    def __post_init__(self):
        if self.eps <= 0:
            raise ValueError(f"eps must be > 0, got {self.eps}")
        if np.any(self.running_var < 0):
            raise ValueError("running variance must be non-negative")


def sparse_batchnorm_forward(x: np.ndarray, state: BatchNormState,
                             training: bool) -> tuple[np.ndarray, dict]:
    """Normalize each channel over every active site in the batch.

    Train mode uses biased batch statistics and folds them into the running
    stats; eval mode normalizes with the running stats unchanged.
    """
    if training:
        if len(x) < 2:
            raise DegenerateBatch(
                f"batch normalization over {len(x)} active site(s); need >= 2")
        mean = x.mean(axis=0)
        var = x.var(axis=0)  # biased
        state.running_mean += state.momentum * (mean - state.running_mean)
        state.running_var += state.momentum * (var - state.running_var)
    else:
        mean = state.running_mean
        var = state.running_var
    inv_std = 1.0 / np.sqrt(var + state.eps)
    xhat = (x - mean) * inv_std
    out = state.gamma * xhat + state.beta
    cache = {"xhat": xhat, "inv_std": inv_std, "gamma": state.gamma,
             "training": training}
    return out, cache


def sparse_batchnorm_backward(grad_out: np.ndarray, cache: dict | None
                              ) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Gradients w.r.t. input, gamma, beta."""
    if not cache or "xhat" not in cache:
        raise NoForwardCache("sparse_batchnorm_backward needs the forward cache")
    xhat, inv_std, gamma = cache["xhat"], cache["inv_std"], cache["gamma"]
    dgamma = (grad_out * xhat).sum(axis=0)
    dbeta = grad_out.sum(axis=0)
    if cache["training"]:
        n = len(xhat)
        dx = (gamma * inv_std) * (
            grad_out
            - dbeta / n
            - xhat * (dgamma / n))
    else:
        dx = grad_out * (gamma * inv_std)
    return dx, dgamma, dbeta


def global_average_pool(smap: SparseMap) -> np.ndarray:
    """Element-wise mean of the features over active sites."""
    if smap.n_sites == 0:
        raise EmptyBag("cannot pool an empty map")
    return smap.features.mean(axis=0)


# ---------------------------------------------------------------------------
# Network

@dataclass(frozen=True)
class PoolingNetworkConfig:
    in_channels: int
    block_channels: tuple[int, ...] = (64, 64)
    kernel_size: int = 3
    out_dim: int = 64

    def __post_init__(self):
        if self.kernel_size < 1 or self.kernel_size % 2 == 0:
            raise ValueError(f"kernel_size must be odd, got {self.kernel_size}")
        if self.in_channels < 1 or self.out_dim < 1:
            raise ValueError("channel counts must be >= 1")
        if len(self.block_channels) < 1 or min(self.block_channels) < 1:
            raise ValueError("need at least one block of width >= 1")

    @property
    def n_blocks(self) -> int:
        return len(self.block_channels)


class PoolingNetwork:
    """Residual conv stack -> global average pool -> linear head.

    Parameters live in the supplied ParamStore under ``net.``; running BN
    statistics live in ``self.buffers`` and ride along in checkpoints.
    """

    def __init__(self, config: PoolingNetworkConfig, store, rng: np.random.Generator,
                 dtype=np.float64, prefix: str = "net."):
        self.config = config
        self.store = store
        self.prefix = prefix
        self.dtype = dtype
        self.buffers: dict[str, np.ndarray] = {}
        k = config.kernel_size

        def conv_init(c_in, c_out, ksz):
            std = np.sqrt(2.0 / (ksz * ksz * c_in))
            return rng.normal(0.0, std, size=(ksz, ksz, c_in, c_out)).astype(dtype)

        c_prev = config.in_channels
        for b, c in enumerate(config.block_channels):
            p = f"{prefix}block{b}."
            store.add(p + "conv1.w", conv_init(c_prev, c, k))
            store.add(p + "conv1.b", np.zeros(c, dtype=dtype))
            store.add(p + "bn1.gamma", np.ones(c, dtype=dtype))
            store.add(p + "bn1.beta", np.zeros(c, dtype=dtype))
            store.add(p + "conv2.w", conv_init(c, c, k))
            store.add(p + "conv2.b", np.zeros(c, dtype=dtype))
            store.add(p + "bn2.gamma", np.ones(c, dtype=dtype))
            store.add(p + "bn2.beta", np.zeros(c, dtype=dtype))
            if c_prev != c:
                store.add(p + "proj.w", conv_init(c_prev, c, 1))
            for bn in ("bn1", "bn2"):
                self.buffers[p + bn + ".run_mean"] = np.zeros(c, dtype=dtype)
                self.buffers[p + bn + ".run_var"] = np.ones(c, dtype=dtype)
            c_prev = c
        head_std = np.sqrt(1.0 / c_prev)
        store.add(prefix + "head.w",
                  rng.normal(0.0, head_std,
                             size=(c_prev, config.out_dim)).astype(dtype))
        store.add(prefix + "head.b", np.zeros(config.out_dim, dtype=dtype))

    def _bn_state(self, name: str) -> BatchNormState:
        return BatchNormState(
            gamma=self.store[name + ".gamma"],
            beta=self.store[name + ".beta"],
            running_mean=self.buffers[name + ".run_mean"],
            running_var=self.buffers[name + ".run_var"],
        )

    def forward(self, maps: list[SparseMap], training: bool
                ) -> tuple[np.ndarray, dict]:
        """Embed a batch of maps; returns (B, out_dim) and the backward cache.

        Convolutions act per map (adjacency never crosses views); batch
        normalization pools statistics over every active site of the batch.
        """
        if len(maps) == 0:
            raise EmptyBag("empty batch")
        for m in maps:
            if m.feat_dim != self.config.in_channels:
                raise DimensionMismatch(
                    f"map has {m.feat_dim} channels, "
                    f"network expects {self.config.in_channels}")
        books = [build_rulebook(m, self.config.kernel_size) for m in maps]
        starts = np.cumsum([0] + [m.n_sites for m in maps])[:-1].tolist()
        pairs = merge_rulebooks(books, starts)
        segs = [(s, s + m.n_sites) for s, m in zip(starts, maps)]
        x = np.concatenate([m.features for m in maps], axis=0)

        cache: dict = {"segs": segs, "pairs": pairs, "training": training,
                       "blocks": []}
        for b in range(self.config.n_blocks):
            x, bc = self._block_forward(b, x, pairs, training)
            cache["blocks"].append(bc)

        pooled = np.stack([x[s:e].mean(axis=0) for s, e in segs])
        w, bias = self.store[self.prefix + "head.w"], self.store[self.prefix + "head.b"]
        z = pooled @ w + bias
        cache["pooled"] = pooled
        cache["x_final"] = x
        return z, cache

    def _block_forward(self, b: int, x: np.ndarray, pairs: list[np.ndarray],
                       training: bool) -> tuple[np.ndarray, dict]:
        p = f"{self.prefix}block{b}."
        st = self.store
        n = len(x)
        y1 = _conv_pairs(x, st[p + "conv1.w"], st[p + "conv1.b"], pairs, n)
        y1n, bn1c = sparse_batchnorm_forward(y1, self._bn_state(p + "bn1"), training)
        a1 = np.maximum(y1n, 0.0)
        y2 = _conv_pairs(a1, st[p + "conv2.w"], st[p + "conv2.b"], pairs, n)
        y2n, bn2c = sparse_batchnorm_forward(y2, self._bn_state(p + "bn2"), training)
        if p + "proj.w" in st:
            skip = x @ st[p + "proj.w"][0, 0]
        else:
            skip = x
        pre = y2n + skip
        out = np.maximum(pre, 0.0)
        return out, {"x": x, "a1": a1, "mask1": y1n > 0.0, "masko": pre > 0.0,
                     "bn1": bn1c, "bn2": bn2c, "p": p}

    def backward(self, grad_z: np.ndarray, cache: dict) -> list[np.ndarray]:
        """Accumulate parameter gradients; return per-map input-feature grads."""
        if not cache or "pooled" not in cache:
            raise NoForwardCache("network backward needs the forward cache")
        st = self.store
        segs = cache["segs"]
        pairs = cache["pairs"]
        grad_z = np.asarray(grad_z)

        w = st[self.prefix + "head.w"]
        st.accumulate(self.prefix + "head.w", cache["pooled"].T @ grad_z)
        st.accumulate(self.prefix + "head.b", grad_z.sum(axis=0))
        dpooled = grad_z @ w.T

        dx = np.zeros_like(cache["x_final"])
        for (s, e), row in zip(segs, dpooled):
            dx[s:e] = row / (e - s)

        for b in range(self.config.n_blocks - 1, -1, -1):
            dx = self._block_backward(dx, cache["blocks"][b], pairs)

        return [dx[s:e] for s, e in segs]

    def _block_backward(self, dout: np.ndarray, bc: dict,
                        pairs: list[np.ndarray]) -> np.ndarray:
        st = self.store
        p = bc["p"]
        dpre = dout * bc["masko"]
        dy2n, dskip = dpre, dpre
        dy2, dg2, db2 = sparse_batchnorm_backward(dy2n, bc["bn2"])
        st.accumulate(p + "bn2.gamma", dg2)
        st.accumulate(p + "bn2.beta", db2)
        da1, dw2, dbias2 = _conv_pairs_backward(dy2, bc["a1"],
                                                st[p + "conv2.w"], pairs)
        st.accumulate(p + "conv2.w", dw2)
        st.accumulate(p + "conv2.b", dbias2)
        dy1n = da1 * bc["mask1"]
        dy1, dg1, db1 = sparse_batchnorm_backward(dy1n, bc["bn1"])
        st.accumulate(p + "bn1.gamma", dg1)
        st.accumulate(p + "bn1.beta", db1)
        dx, dw1, dbias1 = _conv_pairs_backward(dy1, bc["x"],
                                               st[p + "conv1.w"], pairs)
        st.accumulate(p + "conv1.w", dw1)
        st.accumulate(p + "conv1.b", dbias1)
        if p + "proj.w" in st:
            wp = st[p + "proj.w"]
            dwp = np.zeros_like(wp)
            dwp[0, 0] = bc["x"].T @ dskip
            st.accumulate(p + "proj.w", dwp)
            dx = dx + dskip @ wp[0, 0].T
        else:
            dx = dx + dskip
        return dx


def residual_block_forward(network: PoolingNetwork, block: int,
                           smap: SparseMap, training: bool = False
                           ) -> tuple[SparseMap, dict]:
    """Run one residual block of the network over a single map."""
    rb = build_rulebook(smap, network.config.kernel_size)
    out, bc = network._block_forward(block, smap.features, rb.pairs, training)
    return SparseMap(smap.sites, out), bc


def pool_forward(smap: SparseMap, network: PoolingNetwork,
                 training: bool = False) -> np.ndarray:
    """Embed a single map to a vector of length ``config.out_dim``."""
    z, _ = network.forward([smap], training)
    return z[0]
