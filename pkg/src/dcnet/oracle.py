"""Network-free coupled spectral unmixing with known SRF and PSF.

Minimizes

    f(S, A) = ||X - S (A R)||_F^2 + ||Y - (H S) A||_F^2

over nonnegative endmembers ``S`` and abundance columns on the probability
simplex, by alternating accelerated projected gradient steps.  Everything here is plain
numpy so that it can serve as an independent check on the network.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .imaging import HsiCube, Psf, Srf, substream
from .metrics import PSNR_CAP, evaluate, psnr
from .tensor import ContractError, DimensionError


def project_simplex(v) -> np.ndarray:
    """Euclidean projection of ``v`` onto ``{x >= 0, sum(x) = 1}`` (sort and threshold)."""
    v = np.asarray(v, dtype=np.float64)
    u = np.sort(v)[::-1]
    css = np.cumsum(u) - 1.0
    k = np.arange(1, v.size + 1)
    rho = np.nonzero(u - css / k > 0)[0][-1]
    tau = css[rho] / (rho + 1)
    return np.maximum(v - tau, 0.0)


def project_simplex_columns(M) -> np.ndarray:
    """Column-wise :func:`project_simplex` for an ``n x N`` matrix."""
    M = np.asarray(M, dtype=np.float64)
    n = M.shape[0]
    u = -np.sort(-M, axis=0)
    css = np.cumsum(u, axis=0) - 1.0
    k = np.arange(1, n + 1)[:, None]
    cond = u - css / k > 0
    rho = n - 1 - np.argmax(cond[::-1], axis=0)
    tau = css[rho, np.arange(M.shape[1])] / (rho + 1)
    return np.maximum(M - tau, 0.0)


class SpatialOperator:
    """``M -> M R`` and its adjoint for ``k x (H*W)`` matrices."""

    def __init__(self, psf: Psf, height: int, width: int):
        self.kernel = psf.kernel
        self.stride = psf.stride
        self.height, self.width = height, width
        kk = self.kernel.shape[0]
        self.h = (height - kk) // self.stride + 1
        self.w = (width - kk) // self.stride + 1

    def apply(self, M):
        planes = M.reshape(-1, self.height, self.width)
        win = sliding_window_view(planes, self.kernel.shape, axis=(1, 2))[:, :: self.stride, :: self.stride]
        return np.tensordot(win, self.kernel, axes=([-2, -1], [0, 1])).reshape(M.shape[0], -1)

    def adjoint(self, M):
        planes = M.reshape(-1, self.h, self.w)
        out = np.zeros((planes.shape[0], self.height, self.width))
        s = self.stride
        kk = self.kernel.shape[0]
        for a in range(kk):
            for b in range(kk):
                out[:, a : a + s * self.h : s, b : b + s * self.w : s] += planes * self.kernel[a, b]
        return out.reshape(M.shape[0], -1)


@dataclass
class CsuState:
    S: np.ndarray
    A: np.ndarray
    history: list = field(default_factory=list)
    height: int = 0
    width: int = 0

    @property
    def zhat(self) -> HsiCube:
        return HsiCube.from_matrix(self.S @ self.A, self.height, self.width)


def objective(X, Y, Hm, R: SpatialOperator, S, A) -> float:
    rx = X - S @ R.apply(A)
    ry = Y - (Hm @ S) @ A
    return float(np.sum(rx * rx) + np.sum(ry * ry))


def _power(op, shape, rng, rounds=10):
    v = rng.normal(size=shape)
    v /= np.linalg.norm(v)
    lam = 0.0
    for _ in range(rounds):
        w = op(v)
        lam = float(np.linalg.norm(w))
        if lam == 0.0:
            return 0.0
        v = w / lam
    return lam


def _safeguarded_step(f, x, grad, lip, project, f0, max_halvings=20):
    step = 1.0 / lip if lip > 0 else 1.0
    for _ in range(max_halvings + 1):
        cand = project(x - step * grad)
        fc = f(cand)
        if fc <= f0:
            return cand, fc
        step *= 0.5
    return x, f0


def _accelerated(f, grad, x, lip, project, f0, steps):
    """Projected gradient with Nesterov momentum and gradient-based restart.

    The result is only accepted if it does not increase ``f``; otherwise a
    single safeguarded step is taken instead, so the outer loop stays monotone.
    """
    if lip <= 0:
        return x, f0
    x0 = x
    y = x.copy()
    t = 1.0
    for _ in range(steps):
        xn = project(y - grad(y) / lip)
        if np.sum((y - xn) * (xn - x)) > 0:
            t = 1.0
            y = xn
        else:
            tn = 0.5 * (1.0 + np.sqrt(1.0 + 4.0 * t * t))
            y = xn + ((t - 1.0) / tn) * (xn - x)
            t = tn
        x = xn
    fx = f(x)
    if fx <= f0:
        return x, fx
    return _safeguarded_step(f, x0, grad(x0), lip, project, f0)


def spread_sample(Xm, n, rng) -> np.ndarray:
    """Column indices of ``n`` distinct pixels chosen by farthest-point sampling.

    The first pixel is drawn at random; each further pick maximizes the
    distance to the nearest pixel already chosen.
    """
    npix = Xm.shape[1]
    picks = [int(rng.integers(npix))]
    dist = np.linalg.norm(Xm - Xm[:, picks[0], None], axis=0)
    for _ in range(n - 1):
        dist[picks] = -1.0
        nxt = int(np.argmax(dist))
        picks.append(nxt)
        dist = np.minimum(dist, np.linalg.norm(Xm - Xm[:, nxt, None], axis=0))
    return np.array(picks)


def csu_solve(X: HsiCube, Y: HsiCube, H: Srf, R: Psf, n: int, iters: int = 500, seed: int = 0,
              init=None, inner_a: int = 50, inner_s: int = 3) -> CsuState:
    """Alternating minimization for the coupled mixing model.

    Each outer iteration runs ``inner_a`` accelerated projected-gradient steps
    on the abundances (simplex columns) and then ``inner_s`` on the endmembers
    (clipped at zero), with steps of 1/L from a power-iteration estimate.
    ``init`` may be an ``(S, A)`` pair; otherwise ``S`` is ``n`` LrHS pixel
    spectra picked by :func:`spread_sample` and ``A`` is uniform.
    """
    Xm, Ym = X.matrix, Y.matrix
    Hm = H.weights
    if Hm.shape != (Y.bands, X.bands):
        raise DimensionError(f"SRF {Hm.shape} incompatible with {Y.bands} MS and {X.bands} HS bands")
    op = SpatialOperator(R, Y.height, Y.width)
    if (op.h, op.w) != (X.height, X.width):
        raise DimensionError(f"PSF maps {Y.height}x{Y.width} to {op.h}x{op.w}, LrHS is {X.height}x{X.width}")
    npix = Xm.shape[1]
    rng = substream(seed, "sampling")
    if init is None:
        if n > npix:
            raise ContractError(f"{n} endmembers but only {npix} LrHS pixels to sample from")
        S = Xm[:, spread_sample(Xm, n, rng)].copy()
        A = np.full((n, Ym.shape[1]), 1.0 / n)
    else:
        S, A = (np.array(m, dtype=np.float64) for m in init)
    f = objective(Xm, Ym, Hm, op, S, A)
    state = CsuState(S, A, [f], Y.height, Y.width)
    power_rng = substream(seed, "power")
    HtH = Hm.T @ Hm

    for _ in range(iters):
        HS = Hm @ S
        StS, HStHS = S.T @ S, HS.T @ HS
        StX, HStY = S.T @ op.adjoint(Xm), HS.T @ Ym

        def grad_A(M):
            return 2.0 * (StS @ op.adjoint(op.apply(M)) + HStHS @ M - StX - HStY)

        # 1% margin keeps the power-iteration underestimate from overshooting
        lip_A = 2.02 * _power(lambda V: StS @ op.adjoint(op.apply(V)) + HStHS @ V, A.shape, power_rng)
        A, f = _accelerated(lambda M: objective(Xm, Ym, Hm, op, S, M), grad_A, A, lip_A,
                            project_simplex_columns, f, inner_a)

        At = op.apply(A)
        AtAt, AAt = At @ At.T, A @ A.T
        XAt, HtYA = Xm @ At.T, Hm.T @ (Ym @ A.T)

        def grad_S(M):
            return 2.0 * (M @ AtAt - XAt + HtH @ M @ AAt - HtYA)

        lip_S = 2.02 * _power(lambda V: V @ AtAt + HtH @ V @ AAt, S.shape, power_rng)
        S, f = _accelerated(lambda M: objective(Xm, Ym, Hm, op, M, A), grad_S, S, lip_S,
                            lambda M: np.maximum(M, 0.0), f, inner_s)
        state.history.append(f)

    state.S, state.A = S, A
    return state


def compare_to_network(oracle_z, network_z, truth, ratio):
    """Three report rows: oracle vs truth, network vs truth, network vs oracle."""
    rows = [
        evaluate(truth, oracle_z, ratio, label="oracle"),
        evaluate(truth, network_z, ratio, label="network"),
        evaluate(oracle_z, network_z, ratio, label="network_vs_oracle"),
    ]
    return rows


def mutual_psnr(a, b) -> float:
    return min(psnr(a, b), PSNR_CAP)


def endmembers_csv(S) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    for row in np.asarray(S):
        w.writerow([repr(float(v)) for v in row])
    return buf.getvalue()


def abundance_cube(A, height, width) -> HsiCube:
    return HsiCube.from_matrix(A, height, width)
