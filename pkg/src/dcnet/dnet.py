"""Decoupling network: common/specific codes per sensor and their recombination.

Each observation is split into a code shared across sensors and a code
specific to it.  Cross-sensor recombination produces X_bar (LrHS-shaped)
and Y_bar (HrMS-shaped), and a small discriminator tries to tell the two
common codes apart.

Wiring of the specific encoders: ``specific_x`` runs on the LrHS cube
bilinearly upsampled to the HrMS grid and feeds ``gen_y``; ``specific_y``
runs on the HrMS cube area-downsampled to the LrHS grid and feeds ``gen_x``.

With ``residual=True`` (the default) each generator predicts a correction
added to its own observation, so X_bar = X + G_X(...) and likewise for Y.
A freshly initialized generator then perturbs the observation instead of
replacing it with noise.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .imaging import HsiCube, resample
from .layers import Conv, ConvStack, Linear, conv_stack
from .tensor import Tensor

C_CODE = 16
PROB_CLAMP = 1e-7
ENCODERS = ("common_x", "common_y", "specific_x", "specific_y")


class Discriminator:
    """conv3x3 stride 2, relu, global average pool, fc, sigmoid."""

    def __init__(self, rng, c_code=C_CODE, name="disc"):
        self.conv = Conv(rng, c_code, c_code, 3, stride=2, padding=1, name=f"{name}.conv")
        self.fc = Linear(rng, c_code, 1, name=f"{name}.fc")

    @property
    def c_in(self):
        return self.conv.c_in

    def params(self):
        return self.conv.params() + self.fc.params()

    def __call__(self, code, tape=None):
        if code.shape[0] != self.c_in:
            raise T.DimensionError(f"discriminator expects {self.c_in} channels, got {code.shape[0]}")
        h = T.relu(self.conv(code, tape))
        c, hh, ww = h.shape
        pooled = T.scale(T.sum_axis(h, (1, 2)), 1.0 / (hh * ww))
        logit = self.fc(pooled, tape)
        return T.sigmoid(logit)


@dataclass
class DnetParams:
    enc_common_x: ConvStack
    enc_common_y: ConvStack
    enc_specific_x: ConvStack
    enc_specific_y: ConvStack
    gen_x: ConvStack
    gen_y: ConvStack
    disc: Discriminator
    residual: bool = True

    @classmethod
    def create(cls, rng, L, l, c_code=C_CODE, hidden=32, residual=True):
        def enc(c_in, name):
            return conv_stack(rng, [c_in, hidden, c_code], [3, 3], name)

        def gen(c_out, name):
            return conv_stack(rng, [2 * c_code, hidden, c_out], [3, 1], name)

        return cls(
            enc_common_x=enc(L, "dnet.common_x"),
            enc_common_y=enc(l, "dnet.common_y"),
            enc_specific_x=enc(L, "dnet.specific_x"),
            enc_specific_y=enc(l, "dnet.specific_y"),
            gen_x=gen(L, "dnet.gen_x"),
            gen_y=gen(l, "dnet.gen_y"),
            disc=Discriminator(rng, c_code),
            residual=residual,
        )

    def identity_start(self):
        """Zero the generators' output convs so residual X_bar, Y_bar start equal to X, Y."""
        if not self.residual:
            raise T.ContractError("identity start needs residual generators")
        for gen in (self.gen_x, self.gen_y):
            last = gen.layers[-1]
            last.weight.data[...] = 0.0
            if last.bias is not None:
                last.bias.data[...] = 0.0
        return self

    def encoder(self, which):
        if which not in ENCODERS:
            raise T.ContractError(f"unknown encoder {which!r}")
        return getattr(self, f"enc_{which}")

    def generator_params(self):
        """Everything except the discriminator."""
        stacks = (self.enc_common_x, self.enc_common_y, self.enc_specific_x, self.enc_specific_y,
                  self.gen_x, self.gen_y)
        return [p for s in stacks for p in s.params()]

    def params(self):
        return self.generator_params() + self.disc.params()


@dataclass
class CodePair:
    """Codes concatenated by one generator.

    ``origin`` names the sensor grid they live on: ``hs`` pairs the LrHS
    common code with the downsampled MS specific code, ``ms`` pairs the HrMS
    common code with the upsampled HS specific code.
    """

    common: Tensor
    specific: Tensor
    origin: str

    def __post_init__(self):
        if self.common.shape[1:] != self.specific.shape[1:]:
            raise T.DimensionError(
                f"{self.origin} codes differ spatially: {self.common.shape} vs {self.specific.shape}"
            )


def encode(img, which, params: DnetParams, tape=None):
    return params.encoder(which)(img, tape)


def recombine(common, specific_other, which, params: DnetParams, tape=None):
    """Concatenate a common code with the other sensor's specific code and decode."""
    if common.shape[1:] != specific_other.shape[1:]:
        raise T.DimensionError(f"recombine: common {common.shape} vs specific {specific_other.shape}")
    gen = {"gen_x": params.gen_x, "gen_y": params.gen_y}.get(which)
    if gen is None:
        raise T.ContractError(f"unknown generator {which!r}")
    return gen(T.concat([common, specific_other], axis=0), tape)


def discriminate(code, params: DnetParams, tape=None):
    return params.disc(code, tape)


def _clamped_log(p: Tensor, flip: bool) -> Tensor:
    # log of clamped p (or 1 - p); constant gradient 0 once clamped
    q = T.add_const(T.scale(p, -1.0), 1.0) if flip else p
    return T.log(T.clip(q, PROB_CLAMP, 1.0 - PROB_CLAMP))


def adversarial_loss(code_x, code_y_down, params: DnetParams, role, tape=None, literal=False):
    """Domain-confusion loss on the common codes.

    ``role="discriminator"``: BCE with label 1 for ``code_x`` and 0 for
    ``code_y_down``; the codes are detached and only the discriminator is
    recorded on ``tape``.  ``role="encoder"``: labels flipped, discriminator
    frozen.  ``literal=True`` evaluates ``-(log D(x) + log(1 - D(x))) / 2``
    on ``code_x`` alone for comparison with the printed objective.
    """
    if code_x.shape != code_y_down.shape:
        raise T.DimensionError(f"adversarial_loss: {code_x.shape} vs {code_y_down.shape}")
    if role == "discriminator":
        cx, cy = code_x.detach(), code_y_down.detach()
        dtape = tape
    elif role == "encoder":
        cx, cy = code_x, code_y_down
        dtape = None
    else:
        raise T.ContractError(f"unknown role {role!r}")
    dx = params.disc(cx, dtape)
    if literal:
        terms = T.add(_clamped_log(dx, False), _clamped_log(dx, True))
        return T.scale(T.total(terms), -0.5)
    dy = params.disc(cy, dtape)
    flip = role == "encoder"
    terms = T.add(_clamped_log(dx, flip), _clamped_log(dy, not flip))
    return T.scale(T.total(terms), -0.5)


@dataclass
class DnetOutput:
    x_bar: Tensor
    y_bar: Tensor
    hs: CodePair
    ms: CodePair
    code_y_down: Tensor


def forward(x_cube, y_cube, params: DnetParams, tape=None, ratio=None, x_up=None, y_down=None):
    """Full decoupling pass from the raw observations.

    ``x_cube`` / ``y_cube`` are channel-first arrays or tensors (bands x H x W).
    The resampled inputs are constants, so they may be precomputed once and
    passed as ``x_up`` / ``y_down``.
    """
    x = x_cube if isinstance(x_cube, Tensor) else Tensor(x_cube)
    y = y_cube if isinstance(y_cube, Tensor) else Tensor(y_cube)
    if ratio is None:
        ratio = y.shape[1] // x.shape[1]
    if x_up is None or y_down is None:
        x_up, y_down = resampled_inputs(x.data, y.data, ratio)
    x_up = x_up if isinstance(x_up, Tensor) else Tensor(x_up)
    y_down = y_down if isinstance(y_down, Tensor) else Tensor(y_down)

    hs = CodePair(encode(x, "common_x", params, tape), encode(y_down, "specific_y", params, tape), "hs")
    ms = CodePair(encode(y, "common_y", params, tape), encode(x_up, "specific_x", params, tape), "ms")
    x_bar = recombine(hs.common, hs.specific, "gen_x", params, tape)
    y_bar = recombine(ms.common, ms.specific, "gen_y", params, tape)
    if params.residual:
        x_bar = T.add(x, x_bar)
        y_bar = T.add(y, y_bar)
    code_y_down = T.pool_avg(ms.common, ratio)
    return DnetOutput(x_bar, y_bar, hs, ms, code_y_down)


def resampled_inputs(x_chw: np.ndarray, y_chw: np.ndarray, ratio: int):
    """Channel-first bilinear ``X_up`` and area-downsampled ``Y_down``."""
    x_up = resample(HsiCube.from_chw(x_chw), "up_bilinear", ratio).chw()
    y_down = resample(HsiCube.from_chw(y_chw), "down_area", ratio).chw()
    return x_up, y_down
