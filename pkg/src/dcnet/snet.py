"""Contrastive alignment of HR and LR abundance groups.

Abundance channels are split into ``m`` contiguous groups.  Each group is
embedded by a stream matching its resolution (two conv-relu-pool blocks and
a fully connected layer), and an InfoNCE loss asks HR group ``p`` to pick
out LR group ``p`` among all LR groups.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .imaging import HsiCube, Psf, spatial_degrade
from .layers import Conv, Linear
from .tensor import Tensor

N_GROUPS = 8
EMBED_DIM = 64


@dataclass(frozen=True)
class GroupingScheme:
    """Contiguous channel blocks shared by both abundance streams."""

    n: int
    m: int = N_GROUPS

    def __post_init__(self):
        if self.m < 1 or self.n % self.m:
            raise T.ContractError(f"group count {self.m} does not divide {self.n} channels")

    @property
    def size(self):
        return self.n // self.m

    @property
    def assignment(self):
        return tuple(c // self.size for c in range(self.n))

    def channels(self, p):
        return range(p * self.size, (p + 1) * self.size)


def group_abundances(abund, scheme: GroupingScheme):
    if abund.shape[0] != scheme.n:
        raise T.DimensionError(f"scheme covers {scheme.n} channels, abundances have {abund.shape[0]}")
    k = scheme.size
    return [T.slice_axis0(abund, p * k, (p + 1) * k) for p in range(scheme.m)]


def pooling_plan(extent: int, target: int):
    """Two pool sizes whose product takes ``extent`` down to ``target``.

    The first (applied at full resolution) is the larger one.
    """
    if target < 1 or extent % target:
        raise T.DimensionError(f"cannot pool {extent} down to {target}")
    f = extent // target
    first = next(d for d in range(1, f + 1) if f % d == 0 and d * d >= f)
    return first, f // first


def common_extent(h: int) -> int:
    """Spatial size both streams reach before the fc layer (half the LR size)."""
    return h // 2 if h % 2 == 0 and h >= 2 else h


class Stream:
    """Two conv3x3-relu-avgpool blocks followed by a fully connected layer."""

    def __init__(self, rng, c_in, extent, target, hidden=8, d=EMBED_DIM, name="snet"):
        self.extent = extent
        self.pools = pooling_plan(extent, target)
        self.conv1 = Conv(rng, c_in, hidden, 3, name=f"{name}.conv1")
        self.conv2 = Conv(rng, hidden, hidden, 3, name=f"{name}.conv2")
        self.fc = Linear(rng, hidden * target * target, d, name=f"{name}.fc")

    @property
    def c_in(self):
        return self.conv1.c_in

    def params(self):
        return self.conv1.params() + self.conv2.params() + self.fc.params()

    def __call__(self, group, tape=None):
        c, h, w = group.shape
        if c != self.c_in or h != self.extent or w != self.extent:
            raise T.DimensionError(
                f"stream built for {self.c_in}x{self.extent}x{self.extent}, got {group.shape}"
            )
        x = T.pool_avg(T.relu(self.conv1(group, tape)), self.pools[0])
        x = T.pool_avg(T.relu(self.conv2(x, tape)), self.pools[1])
        return T.l2_normalize(self.fc(T.reshape(x, (x.size,)), tape))


@dataclass
class SnetParams:
    stream_hr: Stream
    stream_lr: Stream
    scheme: GroupingScheme

    @classmethod
    def create(cls, rng, n, H, h, m=N_GROUPS, hidden=8, d=EMBED_DIM):
        scheme = GroupingScheme(n, m)
        target = common_extent(h)
        return cls(
            stream_hr=Stream(rng, scheme.size, H, target, hidden, d, "snet.hr"),
            stream_lr=Stream(rng, scheme.size, h, target, hidden, d, "snet.lr"),
            scheme=scheme,
        )

    def params(self):
        return self.stream_hr.params() + self.stream_lr.params()


def embed_group(group, stream, params: SnetParams, tape=None):
    s = {"hr": params.stream_hr, "lr": params.stream_lr}.get(stream)
    if s is None:
        raise T.ContractError(f"unknown stream {stream!r}")
    return s(group, tape)


def infonce_loss(z_hr, z_lr, temperature=1.0, symmetric=False):
    """Mean over HR anchors of ``-log softmax_q(z_hr[p] . z_lr[q] / tau)[p]``.

    ``symmetric=True`` averages with the LR-anchored direction.
    """
    z_hr, z_lr = list(z_hr), list(z_lr)
    if len(z_hr) != len(z_lr) or not z_hr:
        raise T.ContractError(f"infonce needs equal nonempty lists, got {len(z_hr)} and {len(z_lr)}")
    m = len(z_hr)
    logits = T.scale(T.matmul(T.stack(z_hr), T.transpose(T.stack(z_lr))), 1.0 / temperature)

    def one_way(lg):
        return T.scale(T.sub(T.total(T.logsumexp(lg, axis=1)), T.total(T.diagonal(lg))), 1.0 / m)

    loss = one_way(logits)
    if symmetric:
        loss = T.scale(T.add(loss, one_way(T.transpose(logits))), 0.5)
    return loss


def self_loss(A, A_lr, params: SnetParams, tape=None, temperature=1.0, symmetric=False):
    z_hr = [embed_group(g, "hr", params, tape) for g in group_abundances(A, params.scheme)]
    z_lr = [embed_group(g, "lr", params, tape) for g in group_abundances(A_lr, params.scheme)]
    return infonce_loss(z_hr, z_lr, temperature, symmetric)


@dataclass
class AlignmentReport:
    similarity: np.ndarray
    score: float

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        m = self.similarity.shape[0]
        w.writerow(["group"] + [f"lr{q}" for q in range(m)])
        for p, row in enumerate(self.similarity):
            w.writerow([f"hr{p}"] + [repr(float(v)) for v in row])
        w.writerow(["score", repr(float(self.score))])
        return buf.getvalue()


def _corr(a, b):
    a = a - a.mean()
    b = b - b.mean()
    den = math.sqrt(float(np.sum(a * a) * np.sum(b * b)))
    return float(np.sum(a * b) / den) if den > 0 else 0.0


def alignment_report(A, A_lr, scheme: GroupingScheme, psf: Psf) -> AlignmentReport:
    """Correlation between group-mean maps of degraded HR and LR abundances.

    ``A`` and ``A_lr`` are channel-first (``n x H x W`` / ``n x h x w``).  The
    score is the fraction of HR groups whose best match is the same LR group.
    """
    A = np.asarray(getattr(A, "data", A), dtype=np.float64)
    A_lr = np.asarray(getattr(A_lr, "data", A_lr), dtype=np.float64)
    low = spatial_degrade(HsiCube.from_chw(A), psf).chw()
    if low.shape != A_lr.shape:
        raise T.DimensionError(f"degraded HR abundances {low.shape} vs LR {A_lr.shape}")
    k = scheme.size
    hr = [low[p * k : (p + 1) * k].mean(axis=0) for p in range(scheme.m)]
    lr = [A_lr[p * k : (p + 1) * k].mean(axis=0) for p in range(scheme.m)]
    sim = np.array([[_corr(a, b) for b in lr] for a in hr])
    score = float(np.mean(np.argmax(sim, axis=1) == np.arange(scheme.m)))
    return AlignmentReport(sim, score)
