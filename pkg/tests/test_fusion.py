import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mmglab.encoders import EncodedModality
from mmglab.errors import ConfigError
from mmglab.fusion import (DropConfig, FusionConfig, build_fusion, build_mlp_fusion, fuse, fuse_tokens,
                           fusion_param_count, mlp_fuse, mlp_hidden_width, mlp_param_count, sample_modality_drop,
                           unimodal_project)
from mmglab.modality import MODALITIES, ModalityMask, nonempty_masks
from mmglab.numcore import backprop, finite_difference_check, parameter
from mmglab.numcore import autograd as ag

CFG = FusionConfig(d_model=16, depth=2, heads=4, mlp_ratio=2)
TOKENS = {"video": 5, "audio": 4, "imu": 3}


def _encoded(rng, d=16):
    return {m: EncodedModality(m, parameter(rng.standard_normal((t, d))), None) for m, t in TOKENS.items()}


def test_singleton_fuse_equals_unimodal_project():
    rng = np.random.default_rng(0)
    for seed in range(10):
        p = build_fusion(CFG, seed)
        enc = _encoded(rng)
        for m in MODALITIES:
            a = fuse(enc, ModalityMask([m]), p, CFG).z.data
            b = unimodal_project(enc[m], p, CFG).z.data
            assert a.tobytes() == b.tobytes()


def test_token_permutation_leaves_fused_feature_unchanged():
    rng = np.random.default_rng(1)
    p = build_fusion(CFG, 2)
    enc = _encoded(rng)
    x = ag.concat([enc[m].tokens_out + p[f"emb.{m}"] for m in MODALITIES], axis=0)
    base = fuse(enc, ModalityMask.full(), p, CFG).z.data
    no_emb = FusionConfig(16, 2, 4, 2, modality_embeddings=False)
    for _ in range(10):
        perm = rng.permutation(x.shape[0])
        shuffled = {"video": parameter(x.data[perm])}
        out = fuse_tokens(shuffled, ModalityMask(["video"]), p, no_emb).data
        assert out.tobytes() == base.tobytes()


def test_modality_embeddings_disambiguate():
    rng = np.random.default_rng(2)
    p = build_fusion(CFG, 0)
    tok = parameter(rng.standard_normal((4, 16)))
    a = unimodal_project(EncodedModality("audio", tok, None), p, CFG).z.data
    v = unimodal_project(EncodedModality("video", tok, None), p, CFG).z.data
    assert not np.allclose(a, v)
    for m in MODALITIES:
        p[f"emb.{m}"].data[:] = 0.0
    a = unimodal_project(EncodedModality("audio", tok, None), p, CFG).z.data
    v = unimodal_project(EncodedModality("video", tok, None), p, CFG).z.data
    assert a.tobytes() == v.tobytes()


def test_fuse_errors():
    rng = np.random.default_rng(3)
    p = build_fusion(CFG, 0)
    enc = _encoded(rng)
    with pytest.raises(ConfigError):
        fuse(enc, ModalityMask(), p, CFG)
    with pytest.raises(ConfigError):
        fuse({"video": enc["video"]}, ModalityMask(["video", "imu"]), p, CFG)
    with pytest.raises(ConfigError):
        unimodal_project(EncodedModality("smell", enc["video"].tokens_out, None), p, CFG)


def test_masked_out_modality_gets_zero_gradient():
    rng = np.random.default_rng(4)
    p = build_fusion(CFG, 0)
    enc = _encoded(rng)
    z = fuse(enc, ModalityMask(["video", "audio"]), p, CFG).z
    grads = backprop((z * z).sum(), [enc["imu"].tokens_out, p["emb.imu"], enc["audio"].tokens_out])
    assert not np.any(grads[enc["imu"].tokens_out]) and not np.any(grads[p["emb.imu"]])
    assert np.any(grads[enc["audio"].tokens_out])


def test_fusion_gradcheck():
    rng = np.random.default_rng(5)
    cfg = FusionConfig(d_model=4, depth=1, heads=2, mlp_ratio=2)
    p = build_fusion(cfg, 0)
    for t in p.values():
        t.data = t.data + rng.standard_normal(t.shape) * 0.3
    enc = _encoded(rng, d=4)
    w = rng.standard_normal(4)
    fn = lambda: (fuse(enc, ModalityMask.full(), p, cfg).z * w).sum()  # noqa: E731
    for t in (enc["video"].tokens_out, p["emb.audio"], p["block0.attn.wk"], p["ln.g"]):
        assert finite_difference_check(fn, t).passed


def test_cls_pooling_uses_the_prepended_token():
    rng = np.random.default_rng(6)
    p = build_fusion(CFG, 0)
    enc = _encoded(rng)
    z_cls = fuse(enc, ModalityMask.full(), p, CFG, pooling="cls").z
    z_mean = fuse(enc, ModalityMask.full(), p, CFG).z
    assert z_cls.shape == (16,) and not np.allclose(z_cls.data, z_mean.data)
    assert np.any(backprop((z_cls * z_cls).sum(), [p["cls"]])[p["cls"]])


def test_batched_fuse_matches_per_example():
    rng = np.random.default_rng(7)
    p = build_fusion(CFG, 1)
    batch = {m: rng.standard_normal((3, t, 16)) for m, t in TOKENS.items()}
    mask = ModalityMask(["audio", "imu"])
    out = fuse_tokens(batch, mask, p, CFG).data
    for i in range(3):
        single = fuse_tokens({m: batch[m][i] for m in mask}, mask, p, CFG).data
        assert np.allclose(out[i], single, atol=1e-12)


# -- modality drop ------------------------------------------------------------------

def test_drop_p_zero_keeps_mask():
    rng = np.random.default_rng(0)
    for mask in nonempty_masks():
        assert sample_modality_drop(mask, DropConfig(p=0.0), rng) == mask


def test_drop_p_one_keeps_one_uniformly():
    rng = np.random.default_rng(1)
    counts = {m: 0 for m in MODALITIES}
    n = 30000
    for _ in range(n):
        kept = sample_modality_drop(ModalityMask.full(), DropConfig(p=1.0), rng)
        assert len(kept) == 1
        counts[kept.modalities[0]] += 1
    for c in counts.values():
        assert abs(c / n - 1 / 3) < 0.01


def test_drop_survival_rate():
    rng = np.random.default_rng(2)
    n = 100_000
    hits = {m: 0 for m in MODALITIES}
    for _ in range(n):
        kept = sample_modality_drop(ModalityMask.full(), DropConfig(p=0.6), rng)
        for m in kept:
            hits[m] += 1
    # each modality survives w.p. 0.4, plus 1/3 of the all-dropped mass
    expected = 0.4 + 0.6 ** 3 / 3
    for m in MODALITIES:
        assert abs(hits[m] / n - expected) < 0.01


@settings(max_examples=200, deadline=None)
@given(st.floats(0.0, 1.0), st.integers(0, 2 ** 32 - 1), st.sampled_from(nonempty_masks()))
def test_drop_never_empty_and_within_mask(p, seed, mask):
    rng = np.random.default_rng(seed)
    for _ in range(50):
        kept = sample_modality_drop(mask, DropConfig(p=p), rng)
        assert kept and kept.issubset(mask)


def test_drop_never_empty_over_a_million_draws():
    rng = np.random.default_rng(3)
    masks = nonempty_masks()
    empty = 0
    for p in np.linspace(0.0, 1.0, 11):
        cfg = DropConfig(p=float(p))
        for i in range(1_000_000 // 11 + 1):
            empty += not sample_modality_drop(masks[i % len(masks)], cfg, rng)
    assert empty == 0


def test_drop_config_bounds():
    with pytest.raises(ConfigError):
        DropConfig(p=1.5)


# -- MLP baseline -------------------------------------------------------------------

def test_mlp_zero_slot_for_masked_modality():
    rng = np.random.default_rng(8)
    p = build_mlp_fusion(CFG, 0)
    pooled = {m: parameter(rng.standard_normal(16)) for m in ("audio", "imu")}
    seen = {}
    orig = ag.concat

    def spy(parts, axis=0):
        seen["x"] = orig(parts, axis)
        return seen["x"]

    ag.concat = spy
    try:
        mlp_fuse(pooled, ModalityMask(["audio", "imu"]), p)
    finally:
        ag.concat = orig
    x = seen["x"].data
    assert np.array_equal(x[:16], np.zeros(16))
    assert np.array_equal(x[16:32], pooled["audio"].data)


def test_mlp_zero_inputs_give_bias_pathway():
    p = build_mlp_fusion(CFG, 0)
    p["b1"].data = np.linspace(-1, 1, p["b1"].shape[0])
    z = mlp_fuse({m: np.zeros(16) for m in MODALITIES}, ModalityMask.full(), p).z.data
    h = ag.gelu(parameter(p["b1"].data)).data
    assert np.allclose(z, h @ p["w2"].data + p["b2"].data, atol=1e-14)


def test_mlp_parameter_count_matches_transformer():
    for cfg in (FusionConfig(), CFG, FusionConfig(d_model=32, depth=1, heads=4, mlp_ratio=2)):
        h = mlp_hidden_width(cfg)
        p = build_mlp_fusion(cfg, 0)
        assert sum(t.data.size for t in p.values()) == mlp_param_count(cfg.d_model, h)
        assert abs(mlp_param_count(cfg.d_model, h) / fusion_param_count(cfg) - 1) <= 0.10
        tp = build_fusion(cfg, 0)
        assert sum(t.data.size for k, t in tp.items() if k != "cls") == fusion_param_count(cfg)


def test_mlp_empty_mask():
    with pytest.raises(ConfigError):
        mlp_fuse({}, ModalityMask(), build_mlp_fusion(CFG, 0))
