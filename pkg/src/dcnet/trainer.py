"""End-to-end training: weighted loss, Adam with linear decay, early stopping.

One epoch is one full-image step: decoupling pass (or passthrough), coupled
unmixing pass, optional contrastive loss, backward, a discriminator update,
then the main update with constraint projections.
"""

from __future__ import annotations

import csv
import io
import itertools
import math
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import cnet, dnet, snet
from . import tensor as T
from .imaging import HsiCube, ScenePair, resample, substream
from .metrics import psnr, sam
from .tensor import ContractError, Tensor

DESK_EPOCHS = 2000
# smaller first step for the short schedule: at 0.005 the clamp heads of
# most abundance channels saturate for good within a few hundred epochs
DESK_LR0 = 0.002
PART_NAMES = ("rec", "adv", "asc", "self")


class NumericalAbort(RuntimeError):
    """Training hit a non-finite loss or gradient."""

    def __init__(self, message, epoch=None, parts=None):
        super().__init__(message)
        self.epoch = epoch
        self.parts = parts or {}


@dataclass(frozen=True)
class LossWeights:
    alpha: float = 0.001
    beta: float = 0.01
    gamma: float = 0.001

    def __post_init__(self):
        for name in ("alpha", "beta", "gamma"):
            v = getattr(self, name)
            if not (v >= 0 and math.isfinite(v)):
                raise ContractError(f"loss weight {name} must be a nonnegative real, got {v}")

    def astuple(self):
        return (self.alpha, self.beta, self.gamma)


@dataclass(frozen=True)
class TrainConfig:
    lr0: float = 0.005
    epochs: int = 10000
    batch: int = 1
    patience: int = 200
    seed: int = 0
    eval_every: int = 100
    use_dnet: bool = True
    use_snet: bool = True
    use_anc: bool = True
    use_asc: bool = True
    n_endmembers: int = cnet.N_ENDMEMBERS
    groups: int = snet.N_GROUPS
    temperature: float = 1.0
    symmetric_nce: bool = False
    adv_literal: bool = False
    cycle_target: str = "obs"
    tie_endmembers: bool = False

    def __post_init__(self):
        if self.batch != 1:
            raise ContractError("only batch = 1 (one scene per step) is supported")
        if self.epochs < 0 or self.patience < 1 or self.eval_every < 1:
            raise ContractError("epochs must be >= 0, patience and eval_every >= 1")
        if self.lr0 <= 0:
            raise ContractError("lr0 must be positive")
        if self.cycle_target not in cnet.CYCLE_TARGETS:
            raise ContractError(f"cycle_target must be one of {cnet.CYCLE_TARGETS}")

    @classmethod
    def desk(cls, **kw):
        kw.setdefault("epochs", DESK_EPOCHS)
        kw.setdefault("lr0", DESK_LR0)
        return cls(**kw)


def total_loss(parts, weights: LossWeights):
    """``rec + alpha * adv + beta * asc + gamma * self``; absent parts count as 0."""
    if "rec" not in parts or parts["rec"] is None:
        raise ContractError("the reconstruction part is required")
    out = parts["rec"]
    for name, w in zip(PART_NAMES[1:], weights.astuple()):
        p = parts.get(name)
        if p is not None and w != 0:
            out = T.add(out, T.scale(p, w))
    return out


class Adam:
    """Adam over a fixed list of :class:`~dcnet.tensor.Param` with projection after each step."""

    def __init__(self, params, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0

    def step(self, lr):
        for p in self.params:
            if not np.all(np.isfinite(p.grad)):
                raise NumericalAbort(f"non-finite gradient in parameter {p.name}")
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1**self.t
        c2 = 1.0 - b2**self.t
        for p in self.params:
            g = p.grad
            p.m = b1 * p.m + (1.0 - b1) * g
            p.v = b2 * p.v + (1.0 - b2) * g * g
            p.data = p.data - lr * (p.m / c1) / (np.sqrt(p.v / c2) + self.eps)
            p.project()


def adam_step(params, state: Adam, lr):
    """Functional alias: one :class:`Adam` step over ``params`` (must match ``state``)."""
    if [id(p) for p in params] != [id(p) for p in state.params]:
        raise ContractError("parameter list does not match the optimizer state")
    state.step(lr)


def lr_schedule(epoch, config: TrainConfig):
    if config.epochs == 0:
        return config.lr0
    if not 0 <= epoch <= config.epochs:
        raise ContractError(f"epoch {epoch} outside [0, {config.epochs}]")
    return max(config.lr0 * (1.0 - epoch / config.epochs), config.lr0 / 100.0)


@dataclass
class Model:
    dnet: dnet.DnetParams
    cnet: cnet.CnetParams
    snet: snet.SnetParams

    def params(self):
        return self.dnet.params() + self.cnet.params() + self.snet.params()


def init_params(L, l, H, h, ratio, config: TrainConfig, seed=None) -> Model:
    """Kaiming-initialized modules, each drawing from its own seeded substream.

    The residual generators start at the identity so the coupled network
    first trains on the raw observations.
    """
    seed = config.seed if seed is None else seed
    return Model(
        dnet=dnet.DnetParams.create(substream(seed, "init/dnet"), L, l).identity_start(),
        cnet=cnet.CnetParams.create(
            substream(seed, "init/cnet"), L, l, ratio, n=config.n_endmembers,
            anc=config.use_anc, tie_endmembers=config.tie_endmembers,
        ),
        snet=snet.SnetParams.create(substream(seed, "init/snet"), config.n_endmembers, H, h, m=config.groups),
    )


@dataclass
class TrainState:
    epoch: int = 0
    history: list = field(default_factory=list)
    best_loss: float = math.inf
    best_epoch: int = -1
    stopped_early: bool = False
    metrics: list = field(default_factory=list)
    main_opt: Adam | None = None
    disc_opt: Adam | None = None

    def loss_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        cols = ["total", *PART_NAMES, "disc"]
        w.writerow(["epoch", *cols])
        for i, row in enumerate(self.history):
            w.writerow([i] + [repr(float(row[c])) if row.get(c) is not None else "" for c in cols])
        return buf.getvalue()


@dataclass
class TrainResult:
    model: Model
    z_hat: HsiCube
    state: TrainState


class _Data:
    """Channel-first constants derived once from a scene pair."""

    def __init__(self, pair: ScenePair):
        r = pair.ratio
        self.ratio = r
        self.x = Tensor(pair.lrhs.chw())
        self.y = Tensor(pair.hrms.chw())
        self.x_up = Tensor(resample(pair.lrhs, "up_bilinear", r).chw())
        self.y_down = Tensor(resample(pair.hrms, "down_area", r).chw())


def _forward(model: Model, data: _Data, config: TrainConfig, weights: LossWeights, tape):
    parts = {}
    d_out = None
    if config.use_dnet:
        d_out = dnet.forward(data.x, data.y, model.dnet, tape, data.ratio, data.x_up, data.y_down)
        x_bar, y_bar = d_out.x_bar, d_out.y_bar
    else:
        x_bar, y_bar = data.x, data.y
    c_out = cnet.forward(x_bar, y_bar, model.cnet, tape)
    parts["rec"] = cnet.reconstruction_loss(
        c_out.x_hat, data.x, c_out.y_hat, data.y, c_out.x_cyc, c_out.y_cyc, x_bar, y_bar,
        cycle_target=config.cycle_target,
    )
    if d_out is not None and weights.alpha > 0:
        parts["adv"] = dnet.adversarial_loss(
            d_out.hs.common, d_out.code_y_down, model.dnet, "encoder", tape, literal=config.adv_literal
        )
    if config.use_asc and weights.beta > 0:
        parts["asc"] = cnet.asc_loss(c_out.A, c_out.A_lr)
    if config.use_snet and weights.gamma > 0:
        parts["self"] = snet.self_loss(
            c_out.A, c_out.A_lr, model.snet, tape, config.temperature, config.symmetric_nce
        )
    return parts, d_out, c_out


def fuse(model: Model, data: _Data, config: TrainConfig) -> np.ndarray:
    """Channel-first fused estimate from the current parameters."""
    if config.use_dnet:
        y_bar = dnet.forward(data.x, data.y, model.dnet, None, data.ratio, data.x_up, data.y_down).y_bar
    else:
        y_bar = data.y
    return cnet.fuse(y_bar, model.cnet).numpy()


def factors(model: Model, pair: ScenePair, config: TrainConfig) -> cnet.UnmixingFactors:
    """Endmembers and abundances of the trained coupled network on ``pair``."""
    _, _, c_out = _forward(model, _Data(pair), config, LossWeights(0, 0, 0), None)
    return cnet.extract_factors(model.cnet, c_out.A, c_out.A_lr)


def trainable(model: Model, config: TrainConfig, weights: LossWeights):
    """Parameters driven by the main optimizer under the given toggles."""
    out = list(model.cnet.params())
    if config.use_dnet:
        out += model.dnet.generator_params()
    if config.use_snet and weights.gamma > 0:
        out += model.snet.params()
    return out


def train(pair: ScenePair, config: TrainConfig, weights: LossWeights = LossWeights(), model=None,
          callback=None) -> TrainResult:
    """Train on one scene pair.

    Early stopping watches the total loss itself; ``callback(epoch, row)``
    is called after every epoch if given.
    """
    data = _Data(pair)
    if model is None:
        model = init_params(pair.lrhs.bands, pair.hrms.bands, pair.hrms.height, pair.lrhs.height,
                            pair.ratio, config)
    state = TrainState()
    state.main_opt = Adam(trainable(model, config, weights))
    use_disc = config.use_dnet and weights.alpha > 0
    state.disc_opt = Adam(model.dnet.disc.params()) if use_disc else None

    for epoch in range(config.epochs):
        lr = lr_schedule(epoch, config)
        tape = T.Tape()
        parts = {}
        try:
            parts, d_out, _ = _forward(model, data, config, weights, tape)
            loss = total_loss(parts, weights)
        except FloatingPointError as exc:
            raise NumericalAbort(f"epoch {epoch}: {exc}; parts {_values(parts)}", epoch, _values(parts)) from exc
        row = {"total": loss.item(), **_values(parts)}
        T.backward(loss, tape)

        if use_disc:
            dtape = T.Tape()
            d_loss = dnet.adversarial_loss(d_out.hs.common, d_out.code_y_down, model.dnet, "discriminator", dtape)
            T.backward(d_loss, dtape)
            row["disc"] = d_loss.item()
            _guarded(state.disc_opt, lr, epoch, row)
        _guarded(state.main_opt, lr, epoch, row)

        state.history.append(row)
        state.epoch = epoch + 1
        if callback is not None:
            callback(epoch, row)
        if pair.truth is not None and (epoch + 1) % config.eval_every == 0:
            z = HsiCube.from_chw(fuse(model, data, config))
            state.metrics.append((epoch + 1, psnr(pair.truth, z), sam(pair.truth, z)))
        if row["total"] < state.best_loss:
            state.best_loss, state.best_epoch = row["total"], epoch
        elif epoch - state.best_epoch >= config.patience:
            state.stopped_early = True
            break

    z_hat = HsiCube.from_chw(fuse(model, data, config))
    return TrainResult(model, z_hat, state)


def _values(parts):
    return {k: v.item() for k, v in parts.items()}


def _guarded(opt: Adam, lr, epoch, row):
    try:
        opt.step(lr)
    except NumericalAbort as exc:
        raise NumericalAbort(f"epoch {epoch}: {exc}; parts {row}", epoch, row) from exc


def evaluate_run(pair: ScenePair, result: TrainResult):
    return psnr(pair.truth, result.z_hat), sam(pair.truth, result.z_hat)


def grid_search(pairs, grid, config: TrainConfig):
    """Exhaustive search over ``grid = {"alpha": [...], "beta": [...], "gamma": [...]}``.

    Each point trains for a quarter of ``config.epochs`` on every pair.  The
    best point has the highest mean PSNR, then the lowest mean SAM, then the
    lexicographically smallest weights.  Returns ``(best, table)``.
    """
    pairs = list(pairs)
    if not pairs or any(p.truth is None for p in pairs):
        raise ContractError("grid search needs at least one pair, each with ground truth")
    axes = [sorted(set(grid.get(k, [getattr(LossWeights(), k)]))) for k in ("alpha", "beta", "gamma")]
    if any(not a for a in axes):
        raise ContractError("every grid axis needs at least one value")
    short = replace(config, epochs=max(1, config.epochs // 4))
    table = []
    for a, b, g in itertools.product(*axes):
        w = LossWeights(a, b, g)
        scores = [evaluate_run(p, train(p, short, w)) for p in pairs]
        table.append((w, float(np.mean([s[0] for s in scores])), float(np.mean([s[1] for s in scores]))))
    best = min(table, key=lambda r: (-r[1], r[2], r[0].astuple()))
    return best[0], table


ABLATION_ROWS = ("C-Net", "C-Net + ANC", "C-Net + ANC + ASC", "DC-Net", "DC-Net-S")


def ablation_settings(config: TrainConfig, weights: LossWeights):
    """The five ablation configurations in table order."""
    a, b, g = weights.astuple()
    off = dict(use_dnet=False, use_snet=False)
    return [
        (ABLATION_ROWS[0], replace(config, use_anc=False, use_asc=False, **off), LossWeights(0, 0, 0)),
        (ABLATION_ROWS[1], replace(config, use_anc=True, use_asc=False, **off), LossWeights(0, 0, 0)),
        (ABLATION_ROWS[2], replace(config, use_anc=True, use_asc=True, **off), LossWeights(0, b, 0)),
        (ABLATION_ROWS[3], replace(config, use_anc=True, use_asc=True, use_dnet=True, use_snet=False),
         LossWeights(a, b, 0)),
        (ABLATION_ROWS[4], replace(config, use_anc=True, use_asc=True, use_dnet=True, use_snet=True),
         LossWeights(a, b, g)),
    ]


@dataclass
class AblationRow:
    name: str
    psnr: float
    sam: float


def ablate(pair: ScenePair, config: TrainConfig, weights: LossWeights = LossWeights()):
    if pair.truth is None:
        raise ContractError("ablation needs ground truth")
    rows = []
    for name, cfg, w in ablation_settings(config, weights):
        p, s = evaluate_run(pair, train(pair, cfg, w))
        rows.append(AblationRow(name, p, s))
    return rows


def ablation_csv(rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["configuration", "PSNR", "SAM"])
    for r in rows:
        w.writerow([r.name, repr(float(r.psnr)), repr(float(r.sam))])
    return buf.getvalue()


def config_dict(config: TrainConfig):
    return asdict(config)
