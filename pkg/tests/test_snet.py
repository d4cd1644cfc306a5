import math

import numpy as np
import pytest

from dcnet import snet
from dcnet import tensor as T
from dcnet.imaging import HsiCube, Psf, spatial_degrade
from dcnet.tensor import Tensor, grad_check


def unit(v):
    v = np.asarray(v, dtype=np.float64)
    return Tensor(v / np.linalg.norm(v))


def test_grouping_partition():
    scheme = snet.GroupingScheme(32, 8)
    A = Tensor(np.random.default_rng(0).uniform(size=(32, 4, 4)))
    groups = snet.group_abundances(A, scheme)
    assert len(groups) == 8 and all(g.shape == (4, 4, 4) for g in groups)
    np.testing.assert_array_equal(T.concat(groups, axis=0).data, A.data)
    assert sorted(scheme.assignment) == [c // 4 for c in range(32)]
    assert list(scheme.channels(2)) == [8, 9, 10, 11]
    with pytest.raises(T.ContractError):
        snet.GroupingScheme(30, 8)


def test_pooling_plan():
    assert snet.pooling_plan(16, 4) == (2, 2)
    assert snet.pooling_plan(64, 4) == (4, 4)
    assert snet.pooling_plan(8, 4) == (2, 1)
    with pytest.raises(T.DimensionError):
        snet.pooling_plan(10, 4)


@pytest.fixture(scope="module")
def params():
    return snet.SnetParams.create(np.random.default_rng(1), 32, 64, 8)


def test_embedding_norm_and_dimension(params):
    rng = np.random.default_rng(2)
    z_hr = snet.embed_group(Tensor(rng.uniform(size=(4, 64, 64))), "hr", params)
    z_lr = snet.embed_group(Tensor(rng.uniform(size=(4, 8, 8))), "lr", params)
    assert z_hr.shape == z_lr.shape == (snet.EMBED_DIM,)
    assert abs(np.linalg.norm(z_hr.data) - 1) < 1e-9 and abs(np.linalg.norm(z_lr.data) - 1) < 1e-9
    with pytest.raises(T.DimensionError):
        snet.embed_group(Tensor(rng.uniform(size=(4, 8, 8))), "hr", params)


def test_embedding_gradient():
    p = snet.SnetParams.create(np.random.default_rng(3), 4, 8, 4, m=2, hidden=3, d=5)
    other = unit(np.random.default_rng(4).normal(size=5))
    x = np.random.default_rng(5).uniform(size=(2, 4, 4))
    assert grad_check(lambda t: T.total(T.mul(snet.embed_group(t, "lr", p), other)), x) < 1e-4


def test_infonce_closed_forms():
    z = [unit(np.ones(4))] * 8
    assert abs(snet.infonce_loss(z, z).item() - math.log(8)) < 1e-9
    e1, e2 = unit([1.0, 0.0]), unit([0.0, 1.0])
    assert abs(snet.infonce_loss([e1, e2], [e1, e2]).item() - math.log(1 + math.exp(-1))) < 1e-9


def test_infonce_matches_loop():
    rng = np.random.default_rng(6)
    a = [unit(rng.normal(size=6)) for _ in range(5)]
    b = [unit(rng.normal(size=6)) for _ in range(5)]
    tau = 0.7
    ref = 0.0
    for p in range(5):
        logits = [float(np.dot(a[p].data, b[q].data)) / tau for q in range(5)]
        ref += -logits[p] + math.log(sum(math.exp(v) for v in logits))
    ref /= 5
    assert abs(snet.infonce_loss(a, b, tau).item() - ref) < 1e-12
    sym = snet.infonce_loss(a, b, tau, symmetric=True).item()
    assert abs(sym - 0.5 * (ref + snet.infonce_loss(b, a, tau).item())) < 1e-12
    with pytest.raises(T.ContractError):
        snet.infonce_loss(a, b[:3])


def test_self_loss_is_finite(params):
    rng = np.random.default_rng(7)
    v = snet.self_loss(Tensor(rng.uniform(size=(32, 64, 64))), Tensor(rng.uniform(size=(32, 8, 8))), params)
    assert np.isfinite(v.item()) and v.item() > 0


def _smooth_maps(rng, n, size):
    base = rng.uniform(size=(n, size // 4, size // 4))
    return np.repeat(np.repeat(base, 4, axis=1), 4, axis=2)


def test_alignment_self_consistent_and_permuted():
    rng = np.random.default_rng(8)
    scheme = snet.GroupingScheme(8, 4)
    A = _smooth_maps(rng, 8, 16)
    psf = Psf.box(2)
    low = spatial_degrade(HsiCube.from_chw(A), psf).chw()
    rep = snet.alignment_report(A, low, scheme, psf)
    assert rep.score == 1.0
    np.testing.assert_allclose(np.diag(rep.similarity), 1.0, atol=1e-12)
    perm = np.concatenate([low[4:], low[:4]])
    assert snet.alignment_report(A, perm, scheme, psf).score < 1.0
    assert rep.to_csv().splitlines()[-1].startswith("score,")


def test_alignment_random_maps_near_chance():
    scheme = snet.GroupingScheme(8, 4)
    psf = Psf.box(2)
    scores = []
    for seed in range(100):
        rng = np.random.default_rng(seed)
        scores.append(snet.alignment_report(rng.uniform(size=(8, 8, 8)), rng.uniform(size=(8, 4, 4)), scheme, psf).score)
    assert abs(np.mean(scores) - 1 / 4) < 0.1
