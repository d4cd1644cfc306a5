"""Finite-difference checks for every differentiable operation.

Inputs are drawn so that no coordinate sits within ``KINK_MARGIN`` of a
non-differentiable point (relu/abs at 0, clamp at 0 and 1).
"""

from __future__ import annotations

import numpy as np

from . import cnet, dnet, snet
from . import tensor as T
from .imaging import substream
from .tensor import Tensor, grad_check

TOLERANCE = 1e-4
EPS = 1e-5
KINK_MARGIN = 10 * EPS


def _away(rng, shape, kinks=(0.0,), lo=-1.0, hi=1.0):
    """Uniform samples in ``[lo, hi]`` kept at least ``KINK_MARGIN`` from each kink."""
    x = rng.uniform(lo, hi, size=shape)
    for k in kinks:
        close = np.abs(x - k) < KINK_MARGIN
        x[close] = k + np.where(x[close] >= k, 1.0, -1.0) * 2 * KINK_MARGIN
    return x


def _const(rng, shape, scale=1.0):
    return Tensor(rng.normal(0.0, scale, size=shape))


def _weighted_sum(rng, shape):
    """Scalar head ``sum(w * t)`` with fixed random ``w`` so every output coordinate matters."""
    w = Tensor(rng.normal(size=shape))
    return lambda t: T.total(T.mul(t, w))


def _cases(rng):
    """``(name, f, x)`` triples; ``f`` maps a tensor to a scalar."""
    cases = []

    def add(name, f, x):
        cases.append((name, f, x))

    b = _const(rng, (4, 2))
    add("matmul", lambda t: T.total(T.matmul(t, b)), rng.normal(size=(3, 4)))
    a = _const(rng, (3, 4))
    add("matmul.rhs", lambda t: T.total(T.matmul(a, t)), rng.normal(size=(4, 2)))

    k = _const(rng, (4, 3, 3, 3), 0.5)
    head = _weighted_sum(rng, (4, 8, 8))
    add("conv2d.input", lambda t: head(T.conv2d(t, k, padding=1)), rng.normal(size=(3, 8, 8)))
    xin = _const(rng, (3, 8, 8))
    add("conv2d.kernel", lambda t: head(T.conv2d(xin, t, padding=1)), rng.normal(size=(4, 3, 3, 3)))
    bias_head = _weighted_sum(rng, (4, 3, 3))
    add("conv2d.stride2", lambda t: bias_head(T.conv2d(t, k, stride=2)), rng.normal(size=(3, 8, 8)))
    k1 = _const(rng, (2, 3, 1, 1))
    head1 = _weighted_sum(rng, (2, 5, 5))
    add("conv2d.1x1", lambda t: head1(T.conv2d(t, k1)), rng.normal(size=(3, 5, 5)))
    kb = _const(rng, (2, 3, 3, 3), 0.5)
    headb = _weighted_sum(rng, (2, 4, 4))
    xb = _const(rng, (3, 4, 4))
    add("conv2d.bias", lambda t: headb(T.conv2d(xb, kb, t, padding=1)), rng.normal(size=(2,)))

    h6 = _weighted_sum(rng, (6,))
    add("relu", lambda t: h6(T.relu(t)), _away(rng, 6))
    add("clamp01", lambda t: h6(T.clamp01(t)), _away(rng, 6, kinks=(0.0, 1.0), lo=-0.5, hi=1.5))
    add("sigmoid", lambda t: h6(T.sigmoid(t)), rng.normal(size=6))
    add("log", lambda t: h6(T.log(t)), rng.uniform(0.2, 2.0, size=6))
    add("exp", lambda t: h6(T.exp(t)), rng.normal(size=6))
    add("absolute", lambda t: h6(T.absolute(t)), _away(rng, 6))
    add("clip", lambda t: h6(T.clip(t, -0.3, 0.4)), _away(rng, 6, kinks=(-0.3, 0.4)))
    add("mul", lambda t: T.total(T.mul(t, t)), rng.normal(size=5))
    add("sub.scale", lambda t: T.total(T.scale(T.sub(t, T.add_const(t, 2.0)), 3.0)) + T.total(T.mul(t, t)),
        rng.normal(size=4))

    hp = _weighted_sum(rng, (2, 4, 4))
    add("pool_avg", lambda t: hp(T.pool_avg(t, 2)), rng.normal(size=(2, 8, 8)))
    hp3 = _weighted_sum(rng, (2, 3, 3))
    add("pool_avg.overlap", lambda t: hp3(T.pool_avg(t, 3, 2)), rng.normal(size=(2, 7, 7)))

    w = _const(rng, (3, 5))
    bb = _const(rng, (3,))
    h3 = _weighted_sum(rng, (3,))
    add("fully_connected.input", lambda t: h3(T.fully_connected(t, w, bb)), rng.normal(size=5))
    xv = _const(rng, (5,))
    add("fully_connected.weight", lambda t: h3(T.fully_connected(xv, t, bb)), rng.normal(size=(3, 5)))
    add("fully_connected.bias", lambda t: h3(T.fully_connected(xv, w, t)), rng.normal(size=3))

    tgt = Tensor(rng.normal(size=(3, 3)))
    add("l1_loss", lambda t: T.l1_loss(t, tgt), tgt.data + _away(rng, (3, 3)))
    add("mean", lambda t: T.mean(T.mul(t, t)), rng.normal(size=(3, 3)))
    add("sum", lambda t: T.total(T.mul(t, t)), rng.normal(size=(3, 3)))
    h23 = _weighted_sum(rng, (2,))
    add("sum_axis", lambda t: h23(T.sum_axis(t, (1, 2))), rng.normal(size=(2, 3, 3)))
    add("logsumexp", lambda t: h3(T.logsumexp(t, axis=1)), rng.normal(size=(3, 4)))
    h5 = _weighted_sum(rng, (5,))
    add("l2_normalize", lambda t: h5(T.l2_normalize(t)), rng.normal(size=5))
    h24 = _weighted_sum(rng, (2, 4))
    add("abs_normalize", lambda t: h24(T.abs_normalize(t, axis=1)), _away(rng, (2, 4)))
    h43 = _weighted_sum(rng, (4, 3))
    add("transpose", lambda t: h43(T.transpose(t)), rng.normal(size=(3, 4)))
    add("reshape", lambda t: h43(T.reshape(t, (4, 3))), rng.normal(size=(2, 6)))
    c0 = _const(rng, (1, 3))
    add("concat", lambda t: h43(T.concat([c0, t], axis=0)), rng.normal(size=(3, 3)))
    add("stack", lambda t: h24(T.stack([t, T.scale(t, 2.0)])), rng.normal(size=4))
    h2 = _weighted_sum(rng, (2, 3))
    add("slice", lambda t: h2(T.slice_axis0(t, 1, 3)), rng.normal(size=(4, 3)))
    add("diagonal", lambda t: h3(T.diagonal(t)), rng.normal(size=(3, 3)))

    # composite blocks used by the networks
    net_rng = substream(int(rng.integers(1 << 30)), "gradcheck/nets")
    dp = dnet.DnetParams.create(net_rng, 4, 2, c_code=3, hidden=4)
    add("discriminator", lambda t: T.total(dnet.discriminate(t, dp)), rng.normal(size=(3, 4, 4)))
    cp = cnet.CnetParams.create(net_rng, 5, 2, 2, n=4, hidden=4)
    cp.srf_kernel.data = _away(rng, (2, 5)) + 0.0
    cp.psf_kernel.data = _away(rng, (2, 2)) + 0.0
    zc = Tensor(rng.uniform(size=(5, 4, 4)))
    hs_ = _weighted_sum(rng, (2, 4, 4))
    add("learned_srf.theta", lambda t: hs_(cnet.apply_learned_srf(zc, _with(cp, srf_kernel=t))), cp.srf_kernel.data)
    hpsf = _weighted_sum(rng, (5, 2, 2))
    add("learned_psf.theta", lambda t: hpsf(cnet.apply_learned_psf(zc, _with(cp, psf_kernel=t))), cp.psf_kernel.data)
    add("learned_psf.input", lambda t: hpsf(cnet.apply_learned_psf(t, cp)), rng.uniform(size=(5, 4, 4)))

    zl = [Tensor(v / np.linalg.norm(v)) for v in rng.normal(size=(3, 4))]

    def rows(t):
        return [T.l2_normalize(T.reshape(T.slice_axis0(t, i, i + 1), (4,))) for i in range(3)]

    add("infonce", lambda t: snet.infonce_loss(rows(t), zl), rng.normal(size=(3, 4)))
    add("infonce.symmetric", lambda t: snet.infonce_loss(rows(t), zl, 0.5, symmetric=True), rng.normal(size=(3, 4)))
    return cases


class _ThetaView:
    """Stand-in for a Param whose value is a tensor under test."""

    def __init__(self, t):
        self.t = t
        self.shape = t.shape

    def on(self, tape):
        return self.t


def _with(params, **tensors):
    out = cnet.CnetParams(params.enc_lr, params.enc_hr, params.dec_hs, params.dec_ms,
                          params.srf_kernel, params.psf_kernel, params.tie_endmembers)
    for k, t in tensors.items():
        setattr(out, k, _ThetaView(t))
    return out


def gradcheck_suite(seed=0, eps=EPS):
    """``[(op name, max relative error)]`` over every case for one seed."""
    rng = substream(seed, "gradcheck")
    return [(name, grad_check(f, x, eps)) for name, f, x in _cases(rng)]


def failures(results, tol=TOLERANCE):
    return [(n, e) for n, e in results if not (e < tol)]

