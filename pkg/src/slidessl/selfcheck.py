"""Self-contained invariant checks runnable from the command line.

Each check exercises one property the package is built around, end to end
and without pytest, so an installed copy can validate itself in seconds.
"""

from __future__ import annotations

import tempfile
from pathlib import Path

import numpy as np

from .bank import EmbeddingBank, list_banks, load_bank, save_bank
from .datagen import GenConfig, generate_corpus, verify_marginal_equality
from .gradcheck import PASS_BOUND, run_gradcheck
from .inference import embed_slide
from .numcore import AdamConfig, ParamStore, adam_step, load_checkpoint, save_checkpoint
from .probe import auc, fit_logistic
from .sparseconv import PoolingNetworkConfig
from .sparsemap import (
    SlideAugParams,
    augment_sparse_map,
    build_sparse_map,
    sample_slide_aug,
)
from .training import build_model, interleaved_pairing, nt_xent


def _random_bank(rng, n_tiles=30, n_augs=3, feat_dim=6):
    grid = rng.choice(24 * 24, size=n_tiles, replace=False)
    coords = np.stack([grid // 24, grid % 24], axis=1) * 224
    coords = np.repeat(coords[None], n_augs, axis=0)
    feats = rng.normal(size=(n_augs, n_tiles, feat_dim))
    return EmbeddingBank("s", coords, feats)


def check_map_permutation_invariance():
    rng = np.random.default_rng(0)
    coords = rng.integers(0, 4000, size=(40, 2))
    feats = rng.normal(size=(40, 5))
    base = build_sparse_map((coords, feats))
    for seed in range(5):
        perm = np.random.default_rng(seed).permutation(40)
        other = build_sparse_map((coords[perm], feats[perm]))
        assert np.array_equal(base.sites, other.sites), "sites changed"
        assert np.array_equal(base.features, other.features), "features changed"


def check_map_rigid_identities():
    rng = np.random.default_rng(1)
    coords = rng.integers(0, 4000, size=(30, 2))
    feats = rng.normal(size=(30, 4))
    base = build_sparse_map((coords, feats))
    turned = base
    quarter = SlideAugParams(rot_quarters=1)
    for _ in range(4):
        turned = augment_sparse_map(turned, quarter)
    assert np.array_equal(turned.sites, base.sites), "4 quarter turns moved sites"
    assert np.array_equal(turned.features, base.features), "4 quarter turns changed features"
    both = SlideAugParams(flip_x=True, flip_y=True)
    flipped = augment_sparse_map(augment_sparse_map(base, both), both)
    assert np.array_equal(flipped.sites, base.sites), "double flip moved sites"


def check_augmentation_sampler():
    rng = np.random.default_rng(2)
    for _ in range(200):
        params = sample_slide_aug(rng)
        assert 0 <= params.rot_quarters <= 3
        assert 0.5 <= params.scale_x <= 2.0 and 0.5 <= params.scale_y <= 2.0


def check_nt_xent_closed_forms():
    one_pair = np.array([[1.0, 0.0], [0.0, 1.0]])
    loss, _ = nt_xent(one_pair, temperature=0.5)
    assert loss == 0.0, f"B=1 loss {loss}"
    same = np.tile(np.array([[1.0, 2.0, 3.0]]), (4, 1))
    loss, _ = nt_xent(same, temperature=0.5)
    assert abs(loss - np.log(3.0)) < 1e-9, f"identical-views loss {loss}"
    # two aligned pairs, orthogonal across pairs
    pairs = np.array([[1.0, 0.0], [1.0, 0.0], [0.0, 1.0], [0.0, 1.0]])
    loss, _ = nt_xent(pairs, temperature=1.0,
                      pairing=interleaved_pairing(4))
    expect = np.log((np.e + 2.0) / np.e)
    assert abs(loss - expect) < 1e-9, f"orthogonal-pairs loss {loss}"


def check_gradients():
    results = run_gradcheck(n_instances=3, seed=1)
    bad = {k: v for k, v in results.items() if v >= PASS_BOUND}
    assert not bad, f"gradient checks over bound: {bad}"


def check_adam_first_step():
    store = ParamStore()
    store.add("w", np.array([1.0, -2.0]))
    store.accumulate("w", np.array([1.0, -3.0]))
    cfg = AdamConfig(lr=1e-3, weight_decay=0.0)
    adam_step(store, cfg)
    # unit gradient: bias corrections cancel, step is exactly lr/(1+eps)
    expect = 1.0 - cfg.lr / (1.0 + cfg.eps)
    assert abs(store["w"][0] - expect) < 1e-12, "first Adam step off closed form"


def check_checkpoint_roundtrip():
    store = ParamStore()
    rng = np.random.default_rng(3)
    store.add("a.w", rng.normal(size=(4, 3)).astype(np.float32))
    store.add("b.w", rng.normal(size=7).astype(np.float32))
    with tempfile.TemporaryDirectory() as tmp:
        p1, p2 = Path(tmp) / "a.ckpt", Path(tmp) / "b.ckpt"
        save_checkpoint(p1, dict(store.state_arrays()))
        save_checkpoint(p2, dict(store.state_arrays()))
        assert p1.read_bytes() == p2.read_bytes(), "checkpoint bytes differ"
        back = load_checkpoint(p1)
        assert np.array_equal(back["a.w"], store["a.w"]), "values changed"


def check_bank_roundtrip():
    bank = _random_bank(np.random.default_rng(4))
    with tempfile.TemporaryDirectory() as tmp:
        path = Path(tmp) / "s.gsb"
        save_bank(bank, path)
        back = load_bank(path)
        assert back.slide_id == bank.slide_id
        assert np.array_equal(back.coords, bank.coords)
        assert np.allclose(back.features,
                           bank.features.astype(np.float32), atol=0)


def check_embedding_invariances():
    rng = np.random.default_rng(5)
    bank = _random_bank(rng)
    model = build_model(
        PoolingNetworkConfig(in_channels=6, block_channels=(8, 8), out_dim=8),
        proj_dim=8, seed=0, train_tiles=5)
    emb = embed_slide(bank, model, r_views=4, rng=np.random.default_rng(0))
    assert abs(np.linalg.norm(emb.vector) - 1.0) < 1e-6, "not unit norm"
    moved = EmbeddingBank(bank.slide_id, bank.coords + 224 * 3, bank.features)
    emb2 = embed_slide(moved, model, r_views=4, rng=np.random.default_rng(0))
    assert np.allclose(emb.vector, emb2.vector, atol=1e-9), "translation leaked"


def check_ensembling_variance():
    rng = np.random.default_rng(6)
    bank = _random_bank(rng, n_tiles=40)
    model = build_model(
        PoolingNetworkConfig(in_channels=6, block_channels=(8, 8), out_dim=8),
        proj_dim=8, seed=0, train_tiles=5)
    spread = []
    for r in (1, 10):
        vecs = [embed_slide(bank, model, r_views=r,
                            rng=np.random.default_rng(s)).vector
                for s in range(12)]
        spread.append(float(np.stack(vecs).var(axis=0).mean()))
    assert spread[1] < spread[0], f"variance did not shrink: {spread}"


def check_probe_oracles():
    assert auc(np.array([0.9, 0.8, 0.2, 0.1]), np.array([1, 1, 0, 0])) == 1.0
    assert auc(np.array([0.1, 0.4, 0.35, 0.8]), np.array([0, 0, 1, 1])) == 0.75
    assert auc(np.full(4, 0.3), np.array([1, 0, 1, 0])) == 0.5
    rng = np.random.default_rng(7)
    x = rng.normal(size=(60, 2))
    y = (x @ np.array([1.0, -2.0]) > 0).astype(int)
    probe = fit_logistic(x, y, normalization="standard")
    assert probe.grad_norm < 1e-6, "fit did not converge"
    assert auc(probe.scores(x), y) == 1.0, "separable fit below AUC 1"


def check_corpus_marginals():
    with tempfile.TemporaryDirectory() as tmp:
        cfg = GenConfig(n_slides=40, n_classes=2, n_tiles=48, n_augs=2,
                        feat_dim=12, grid_extent=2048, seed=11)
        generate_corpus(cfg, tmp)
        stat = verify_marginal_equality(tmp)
        assert stat < 3.0, f"marginal statistic {stat}"
        assert len(list_banks(tmp)) == 40


CHECKS = (
    ("map permutation invariance", check_map_permutation_invariance),
    ("map rigid-motion identities", check_map_rigid_identities),
    ("augmentation sampler ranges", check_augmentation_sampler),
    ("contrastive loss closed forms", check_nt_xent_closed_forms),
    ("gradient finite differences", check_gradients),
    ("optimizer first step", check_adam_first_step),
    ("checkpoint roundtrip", check_checkpoint_roundtrip),
    ("bank roundtrip", check_bank_roundtrip),
    ("embedding invariances", check_embedding_invariances),
    ("ensembling variance", check_ensembling_variance),
    ("probe oracles", check_probe_oracles),
    ("corpus marginal equality", check_corpus_marginals),
)


def run_selftest(verbose: bool = True) -> bool:
    """Run every check; print one PASS/FAIL line each; True if all passed."""
    all_ok = True
    for name, fn in CHECKS:
        try:
            fn()
            line = f"PASS  {name}"
        except Exception as exc:  # noqa: BLE001  (report, do not abort)
            line = f"FAIL  {name}: {exc}"
            all_ok = False
        if verbose:
            print(line)
    return all_ok
