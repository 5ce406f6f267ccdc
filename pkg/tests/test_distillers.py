import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sakd import autodiff as ad
from sakd.autodiff import Tensor
from sakd.distillers import (
    DistillConfig,
    DistillerKind,
    HintProjections,
    assemble_student_loss,
    attention_transfer,
    attention_vector,
    fitnets_hint,
    sp_loss,
)
from sakd.errors import ConfigError, UsageError
from sakd.network import FeatureBundle, NetworkSpec


def sp_oracle(fs, ft):
    """Loop-based similarity-preserving loss."""
    b = len(fs)

    def gram(f):
        g = [[sum(f[i][k] * f[j][k] for k in range(len(f[0]))) for j in range(b)] for i in range(b)]
        out = []
        for row in g:
            n = math.sqrt(sum(v * v for v in row))
            out.append([v / n if n else 0.0 for v in row])
        return out

    gs, gt = gram(fs), gram(ft)
    return sum((gs[i][j] - gt[i][j]) ** 2 for i in range(b) for j in range(b)) / b**2


def test_fitnets_hand_computed():
    out = fitnets_hint(Tensor([[1.0, 2.0], [0.0, 0.0]]), np.array([[1.0, 0.0], [1.0, 1.0]]))
    np.testing.assert_array_equal(out.data, [2.0, 1.0])


def test_fitnets_width_mismatch_needs_projection():
    with pytest.raises(ConfigError):
        fitnets_hint(Tensor(np.ones((1, 2))), np.ones((1, 3)))


def test_fitnets_with_projection():
    cfg = DistillConfig(spots=(1,)).resolve(1)
    proj = HintProjections.build(cfg, NetworkSpec.mlp(2, [3], 2), NetworkSpec.mlp(2, [2], 2), 0)
    w, b = proj.params[1]
    fs = np.array([[1.0, -1.0]])
    out = fitnets_hint(Tensor(fs), np.zeros((1, 3)), proj, 1)
    assert out.data[0] == pytest.approx(((fs @ w.data + b.data) ** 2).mean(), abs=1e-15)


def test_attention_vector_hand_computed():
    a = attention_vector(np.array([[3.0, -4.0]]), 2.0)
    np.testing.assert_allclose(a, [[9 / math.hypot(9, 16), 16 / math.hypot(9, 16)]], atol=1e-15)
    np.testing.assert_allclose(attention_vector(Tensor([[3.0, -4.0]])).data, a, atol=1e-15)


@settings(max_examples=50, deadline=None)
@given(st.floats(0.1, 10.0), st.booleans(), st.integers(0, 1000))
def test_attention_transfer_scale_invariant(c, negate, seed):
    rng = np.random.default_rng(seed)
    fs, ft = rng.normal(size=(3, 5)), rng.normal(size=(3, 5))
    c = -c if negate else c
    base = attention_transfer(Tensor(fs), ft).data
    scaled = attention_transfer(Tensor(c * fs), c * ft).data
    np.testing.assert_allclose(scaled, base, atol=1e-12)


def test_attention_transfer_identical_is_zero():
    f = np.random.default_rng(0).normal(size=(4, 6))
    np.testing.assert_allclose(attention_transfer(Tensor(f), f).data, 0.0, atol=1e-15)


@pytest.mark.parametrize("seed", range(5))
def test_sp_matches_loop_oracle(seed):
    rng = np.random.default_rng(seed)
    fs, ft = rng.normal(size=(5, 3)), rng.normal(size=(5, 7))
    assert abs(sp_loss(Tensor(fs), ft).item() - sp_oracle(fs.tolist(), ft.tolist())) <= 1e-12


def test_sp_permutation_invariant_and_zero_on_identity():
    rng = np.random.default_rng(1)
    fs, ft = rng.normal(size=(6, 3)), rng.normal(size=(6, 4))
    perm = rng.permutation(6)
    assert sp_loss(Tensor(fs[perm]), ft[perm]).item() == pytest.approx(sp_loss(Tensor(fs), ft).item(), abs=1e-12)
    assert sp_loss(Tensor(fs), fs).item() == pytest.approx(0.0, abs=1e-15)


def test_sp_needs_two_samples():
    with pytest.raises(ConfigError):
        sp_loss(Tensor(np.ones((1, 2))), np.ones((1, 2)))


def test_default_spots_and_betas():
    assert DistillerKind.FITNETS.default_spots(4) == (3,)
    assert DistillerKind.FITNETS.default_spots(2) == (2,)
    assert DistillerKind.AT.default_spots(4) == (2, 3)
    assert DistillerKind.AT.default_spots(2) == (2,)
    assert DistillerKind.SP.default_spots(4) == (3,)
    assert DistillerKind.KD_KL.default_spots(4) == ()
    assert DistillConfig(kind="at").resolve(4).beta2 == 1000.0
    assert DistillConfig(kind="sp").resolve(4).beta2 == 3000.0


def test_config_validation():
    with pytest.raises(ConfigError):
        DistillConfig(T=0)
    with pytest.raises(ConfigError):
        DistillConfig(beta1=-1)
    with pytest.raises(ConfigError):
        DistillConfig(spots=(5,)).resolve(4)


def bundles(rng, b=6, n=2, ws=3, wt=3, c=4):
    s = FeatureBundle([Tensor(rng.normal(size=(b, ws)), True) for _ in range(n)], Tensor(rng.normal(size=(b, c)), True))
    t = FeatureBundle([Tensor(rng.normal(size=(b, wt))) for _ in range(n)], Tensor(rng.normal(size=(b, c))))
    return s, t, rng.integers(0, c, size=b)


def test_zero_gate_reduces_to_cross_entropy():
    rng = np.random.default_rng(0)
    s, t, y = bundles(rng)
    cfg = DistillConfig(spots=(1, 2)).resolve(2)
    loss = assemble_student_loss(s, t, y, np.zeros((6, 3)), cfg)
    assert loss.total.item() == ad.cross_entropy(s.logits, y).item()
    assert loss.kl == 0.0 and loss.kd == 0.0


def test_gated_terms_match_manual_assembly():
    rng = np.random.default_rng(1)
    s, t, y = bundles(rng)
    cfg = DistillConfig(spots=(1, 2), beta1=0.7, beta2=2.0).resolve(2)
    d = (rng.random((6, 3)) < 0.5).astype(float)
    loss = assemble_student_loss(s, t, y, d, cfg)
    kl = ad.kl_divergence(s.logits, t.logits.data, 4.0).data
    hints = [fitnets_hint(s.block_features[i], t.block_features[i].data).data for i in range(2)]
    ce = ad.cross_entropy(s.logits, y).item()
    kd = sum(np.mean(h * d[:, i]) for i, h in enumerate(hints))
    assert loss.kl == pytest.approx(np.mean(kl * d[:, 2]), abs=1e-14)
    assert loss.kd == pytest.approx(kd, abs=1e-14)
    assert loss.total.item() == pytest.approx(ce + 0.7 * loss.kl + 2.0 * kd, abs=1e-12)


def test_sp_scaled_by_batch_mean_of_gate():
    rng = np.random.default_rng(2)
    s, t, y = bundles(rng, ws=3, wt=5)
    cfg = DistillConfig(kind="sp", spots=(1,), logit_spot_active=False).resolve(2)
    d = np.zeros((6, 3))
    d[:3, 0] = 1.0
    loss = assemble_student_loss(s, t, y, d, cfg)
    assert loss.kd == pytest.approx(0.5 * sp_loss(s.block_features[0], t.block_features[0].data).item(), abs=1e-14)


def test_kl_t_squared_flag():
    rng = np.random.default_rng(3)
    s, t, y = bundles(rng)
    d = np.ones((6, 3))
    on = assemble_student_loss(s, t, y, d, DistillConfig(kind="kd_kl").resolve(2)).kl
    off = assemble_student_loss(s, t, y, d, DistillConfig(kind="kd_kl", kl_t_squared=False).resolve(2)).kl
    assert on == pytest.approx(16.0 * off, rel=1e-12)


def test_gate_must_be_detached():
    rng = np.random.default_rng(4)
    s, t, y = bundles(rng)
    with pytest.raises(UsageError):
        assemble_student_loss(s, t, y, Tensor(np.ones((6, 3)), True), DistillConfig().resolve(2))


def test_gate_shape_checked():
    rng = np.random.default_rng(4)
    s, t, y = bundles(rng)
    with pytest.raises(ConfigError):
        assemble_student_loss(s, t, y, np.ones((6, 2)), DistillConfig().resolve(2))


def test_teacher_features_get_no_gradient():
    rng = np.random.default_rng(5)
    s, t, y = bundles(rng)
    t = FeatureBundle([Tensor(f.data, True) for f in t.block_features], Tensor(t.logits.data, True))
    g = ad.backward(assemble_student_loss(s, t, y, np.ones((6, 3)), DistillConfig(spots=(1, 2)).resolve(2)).total)
    assert all(f not in g for f in t.block_features) and t.logits not in g
    assert s.logits in g
