"""Coupled unmixing autoencoder with learnable spectral and spatial degradations.

Two encoders map X_bar (LR) and Y_bar (HR) to abundance maps; two bias-free
1x1 decoders hold the HS and MS endmembers.  The fused estimate is the HR
abundances decoded through the HS endmembers, and it is pushed back through
learned SRF/PSF surrogates to close the cycle against the observations.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .imaging import HsiCube
from .layers import Conv, ConvStack
from .tensor import Param, Tensor

N_ENDMEMBERS = 32
CYCLE_TARGETS = ("obs", "recon")
THETA_INIT = 1.0


def _encoder(rng, c_in, n, hidden, head, name):
    layers = [
        Conv(rng, c_in, hidden, 3, name=f"{name}.0"),
        Conv(rng, hidden, hidden, 3, name=f"{name}.1"),
        Conv(rng, hidden, n, 1, name=f"{name}.2"),
    ]
    return ConvStack(layers, head=head)


@dataclass
class CnetParams:
    enc_lr: ConvStack
    enc_hr: ConvStack
    dec_hs: Conv
    dec_ms: Conv
    srf_kernel: Param
    psf_kernel: Param
    tie_endmembers: bool = False

    @classmethod
    def create(cls, rng, L, l, ratio, n=N_ENDMEMBERS, hidden=64, anc=True, tie_endmembers=False):
        """Kaiming-initialized network; ``anc=False`` swaps the clamp heads for relu."""
        head = "clamp01" if anc else "relu"
        return cls(
            enc_lr=_encoder(rng, L, n, hidden, head, "cnet.enc_lr"),
            enc_hr=_encoder(rng, l, n, hidden, head, "cnet.enc_hr"),
            dec_hs=Conv(rng, n, L, 1, bias=False, name="cnet.dec_hs", constraint="nonnegative"),
            dec_ms=Conv(rng, n, l, 1, bias=False, name="cnet.dec_ms", constraint="nonnegative"),
            # flat at 1.0: Adam moves entries by about lr per step, so a
            # unit scale keeps the learned operators from jumping early on
            srf_kernel=Param(np.full((l, L), THETA_INIT), "cnet.srf"),
            psf_kernel=Param(np.full((ratio, ratio), THETA_INIT), "cnet.psf"),
            tie_endmembers=tie_endmembers,
        )

    @property
    def n(self):
        return self.dec_hs.c_in

    @property
    def ratio(self):
        return self.psf_kernel.shape[0]

    def params(self):
        out = self.enc_lr.params() + self.enc_hr.params() + [self.dec_hs.weight]
        if not self.tie_endmembers:
            out.append(self.dec_ms.weight)
        return out + [self.srf_kernel, self.psf_kernel]

    def learned_srf(self) -> np.ndarray:
        a = np.abs(self.srf_kernel.data)
        return a / (a.sum(axis=1, keepdims=True) + 1e-8)

    def learned_psf(self) -> np.ndarray:
        a = np.abs(self.psf_kernel.data)
        return a / (a.sum() + 1e-8)


def unmix(img, stream, params: CnetParams, tape=None):
    enc = {"lr": params.enc_lr, "hr": params.enc_hr}.get(stream)
    if enc is None:
        raise T.ContractError(f"unknown stream {stream!r}")
    return enc(img, tape)


def _srf_weights(params, tape):
    return T.abs_normalize(params.srf_kernel.on(tape), axis=1)


def _pixel_linear(w, img):
    """``w @ img`` over pixels for a ``k x c`` weight and a ``c x H x W`` image."""
    c, h, wd = img.shape
    flat = T.matmul(w, T.reshape(img, (c, h * wd)))
    return T.reshape(flat, (w.shape[0], h, wd))


def decode(abund, stream, params: CnetParams, tape=None):
    """Bias-free linear 1x1 decode through the HS (``hs``) or MS (``ms``) endmembers."""
    if abund.shape[0] != params.n:
        raise T.DimensionError(f"decode expects {params.n} abundance channels, got {abund.shape[0]}")
    if stream == "hs":
        return params.dec_hs(abund, tape)
    if stream == "ms":
        if params.tie_endmembers:
            return _pixel_linear(ms_endmembers(params, tape), abund)
        return params.dec_ms(abund, tape)
    raise T.ContractError(f"unknown decoder {stream!r}")


def hs_endmembers(params: CnetParams, tape=None):
    n = params.n
    return T.reshape(params.dec_hs.weight.on(tape), (-1, n))


def ms_endmembers(params: CnetParams, tape=None):
    """``S_tilde``; equals the learned SRF applied to ``S`` when endmembers are tied."""
    if params.tie_endmembers:
        return T.matmul(_srf_weights(params, tape), hs_endmembers(params, tape))
    return T.reshape(params.dec_ms.weight.on(tape), (-1, params.n))


def fuse(y_bar, params: CnetParams, tape=None):
    return decode(unmix(y_bar, "hr", params, tape), "hs", params, tape)


def apply_learned_srf(z, params: CnetParams, tape=None):
    """Per-pixel convex band combination with rows ``|theta| / sum |theta|``."""
    if z.shape[0] != params.srf_kernel.shape[1]:
        raise T.DimensionError(f"learned SRF expects {params.srf_kernel.shape[1]} bands, got {z.shape[0]}")
    return _pixel_linear(_srf_weights(params, tape), z)


def apply_learned_psf(z, params: CnetParams, tape=None):
    """Stride-r filter with kernel ``|theta| / sum |theta|``, applied to each band."""
    r = params.ratio
    L, H, W = z.shape
    if H % r or W % r:
        raise T.DimensionError(f"learned PSF: {H}x{W} not divisible by ratio {r}")
    h, w = H // r, W // r
    k = T.abs_normalize(T.reshape(params.psf_kernel.on(tape), (1, r * r)), axis=1)
    blocks = T.transpose(T.reshape(z, (L * h, r, w, r)), (0, 2, 1, 3))
    out = T.matmul(T.reshape(blocks, (L * h * w, r * r)), T.transpose(k))
    return T.reshape(out, (L, h, w))


TERMS = ("x_rec", "y_rec", "x_cyc", "y_cyc", "x_bar", "y_bar")


def reconstruction_terms(x_hat, x, y_hat, y, x_cyc, y_cyc, x_bar, y_bar, cycle_target="obs"):
    """The six mean-l1 terms by name.

    With ``cycle_target="recon"`` the cycle terms compare against the
    reconstructions instead of the observations.
    """
    if cycle_target not in CYCLE_TARGETS:
        raise T.ContractError(f"cycle_target must be one of {CYCLE_TARGETS}")
    cx, cy = (x, y) if cycle_target == "obs" else (x_hat, y_hat)
    pairs = zip(TERMS, ((x_hat, x), (y_hat, y), (x_cyc, cx), (y_cyc, cy), (x_bar, x), (y_bar, y)))
    out = {}
    for name, (a, b) in pairs:
        if a.shape != b.shape:
            raise T.DimensionError(f"reconstruction term {name}: {a.shape} vs {b.shape}")
        out[name] = T.l1_loss(a, b)
    return out


def reconstruction_loss(x_hat, x, y_hat, y, x_cyc, y_cyc, x_bar, y_bar, cycle_target="obs"):
    terms = list(reconstruction_terms(x_hat, x, y_hat, y, x_cyc, y_cyc, x_bar, y_bar, cycle_target).values())
    total = terms[0]
    for t in terms[1:]:
        total = T.add(total, t)
    return total


def asc_loss(A, A_lr):
    """Mean |1 - column sum| over HR pixels plus the same over LR pixels."""

    def part(a):
        s = T.sum_axis(a, 0)
        return T.l1_loss(s, Tensor(np.ones(s.shape)))

    return T.add(part(A), part(A_lr))


@dataclass
class CnetOutput:
    A: Tensor
    A_lr: Tensor
    x_hat: Tensor
    y_hat: Tensor
    z_hat: Tensor
    x_cyc: Tensor
    y_cyc: Tensor


def forward(x_bar, y_bar, params: CnetParams, tape=None):
    A_lr = unmix(x_bar, "lr", params, tape)
    A = unmix(y_bar, "hr", params, tape)
    z_hat = decode(A, "hs", params, tape)
    return CnetOutput(
        A=A,
        A_lr=A_lr,
        x_hat=decode(A_lr, "hs", params, tape),
        y_hat=decode(A, "ms", params, tape),
        z_hat=z_hat,
        x_cyc=apply_learned_psf(z_hat, params, tape),
        y_cyc=apply_learned_srf(z_hat, params, tape),
    )


@dataclass(frozen=True)
class UnmixingFactors:
    S: np.ndarray
    S_ms: np.ndarray
    A: np.ndarray
    A_lr: np.ndarray

    def __post_init__(self):
        for name in ("S", "S_ms", "A", "A_lr"):
            getattr(self, name).flags.writeable = False

    def endmembers_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        for row in self.S:
            w.writerow([repr(float(v)) for v in row])
        return buf.getvalue()

    def abundance_cube(self, height, width) -> HsiCube:
        return HsiCube.from_matrix(self.A.reshape(self.A.shape[0], -1), height, width)


def extract_factors(params: CnetParams, A, A_lr) -> UnmixingFactors:
    """Snapshot of the decoder weights as endmember matrices plus the given abundances."""

    def arr(t):
        return np.array(t.data if isinstance(t, Tensor) else t, dtype=np.float64)

    a, a_lr = arr(A), arr(A_lr)
    return UnmixingFactors(
        S=hs_endmembers(params).numpy(),
        S_ms=ms_endmembers(params).numpy(),
        A=a.reshape(a.shape[0], -1),
        A_lr=a_lr.reshape(a_lr.shape[0], -1),
    )
