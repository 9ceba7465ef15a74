"""Seeded full-batch training, the ablation runner and significance testing."""

from __future__ import annotations

import hashlib
import logging
import time
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace

import numpy as np
from scipy import stats

from . import autodiff as ad
from .data import SplitSpec, make_split
from .graph import Graph
from .layers import BackboneModel, GraphOperators, P2Model
from .losses import LossWeights, cross_entropy, final_loss
from .metrics import accuracy

log = logging.getLogger(__name__)

PROTOTYPE_GRID = (2, 4, 8, 16, 32, 64)
LAMBDA_GRID = (1e-4, 1e-3, 1e-2, 1e-1, 1.0)
VARIANTS = ("backbone", "P_N", "P_N+P_A")


class DivergenceError(RuntimeError):
    pass


class ConfigError(ValueError):
    pass


# --------------------------------------------------------------------------
# Optimizer
# --------------------------------------------------------------------------

@dataclass
class OptimizerState:
    lr: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(state: OptimizerState, params, grads, decay=None) -> None:
    """Bias-corrected Adam update with decoupled weight decay, in place.

    ``params`` is a list of (name, Tensor); ``decay(name)`` says whether
    the parameter receives weight decay (default: all).
    """
    state.step += 1
    t = state.step
    bc1 = 1.0 - state.beta1 ** t
    bc2 = 1.0 - state.beta2 ** t
    for (name, p), g in zip(params, grads):
        if g.shape != p.shape:
            raise ad.ShapeError(f"gradient for {name} has shape {g.shape}, expected {p.shape}")
        if name not in state.m:
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        m, v = state.m[name], state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        if state.weight_decay and (decay is None or decay(name)):
            p.data -= state.lr * state.weight_decay * p.data
        p.data -= state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)


# --------------------------------------------------------------------------
# Configuration and results
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class ExperimentConfig:
    backbone: str = "gcn"
    num_layers: int = 2
    hidden: int = 64
    sgc_hops: int = 2
    num_pn: int = 0
    num_pa: int = 0
    lambda_al: float = 0.0
    lambda_d: float = 0.0
    lambda_s: float = 0.0
    temperature: float = 2.0
    diversity_axis: str = "samples"
    regularizer_grad: str = "all"
    lr: float = 0.01
    weight_decay: float = 5e-4
    max_epochs: int = 1000
    patience: int = 100
    dropout: float = 0.5
    seed: int = 0
    split_mode: str = "random_fraction"
    split_train: float = 0.6
    split_val: float = 0.2
    split_test: float = 0.2
    split_file: str = ""
    dataset: str = ""

    def validate(self) -> "ExperimentConfig":
        if self.backbone not in ("gcn", "sgc"):
            raise ConfigError(f"backbone must be gcn or sgc, got {self.backbone!r}")
        for k in ("num_pn", "num_pa"):
            val = getattr(self, k)
            if val != 0 and val not in PROTOTYPE_GRID:
                raise ConfigError(f"{k}={val} is not 0 or one of {PROTOTYPE_GRID}")
        for k in ("lambda_al", "lambda_d", "lambda_s"):
            if not 0.0 <= getattr(self, k) <= 1.0:
                raise ConfigError(f"{k} must lie in [0, 1]")
        if self.num_layers < 1 or self.hidden < 1 or self.sgc_hops < 1:
            raise ConfigError("num_layers, hidden and sgc_hops must be positive")
        if self.temperature <= 0 or self.lr <= 0 or self.weight_decay < 0:
            raise ConfigError("temperature and lr must be positive, weight_decay non-negative")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout must lie in [0, 1)")
        if self.max_epochs < 1 or self.patience < 1:
            raise ConfigError("max_epochs and patience must be positive")
        if self.diversity_axis not in ("samples", "prototypes"):
            raise ConfigError("diversity_axis must be samples or prototypes")
        if self.regularizer_grad not in ("all", "prototypes"):
            raise ConfigError("regularizer_grad must be all or prototypes")
        self.split_spec()
        return self

    @property
    def loss_weights(self) -> LossWeights:
        return LossWeights(self.lambda_al, self.lambda_d, self.lambda_s)

    def split_spec(self) -> SplitSpec:
        try:
            return SplitSpec(self.split_mode, (self.split_train, self.split_val, self.split_test),
                             self.seed, self.split_file or None)
        except ValueError as e:
            raise ConfigError(str(e)) from None

    def variant(self, name: str) -> "ExperimentConfig":
        if name == "backbone":
            return replace(self, num_pn=0, num_pa=0)
        if name == "P_N":
            return replace(self, num_pa=0)
        if name == "P_N+P_A":
            return self
        raise ValueError(f"unknown variant {name!r}")


@dataclass
class RunResult:
    seed: int
    best_val_acc: float
    test_acc: float
    best_epoch: int
    epochs_run: int
    train_loss: list[float]
    val_acc: list[float]
    attention: dict[str, float]
    predictions: np.ndarray
    embeddings: np.ndarray
    param_checksum: str
    checksums: list[str]
    wall_time: float


def param_checksum(params) -> str:
    h = hashlib.sha256()
    for name, p in params:
        h.update(name.encode())
        h.update(np.ascontiguousarray(p.data).tobytes())
    return h.hexdigest()


def build_model(g: Graph, cfg: ExperimentConfig, plain_backbone: bool = False):
    kw = dict(backbone=cfg.backbone, d_in=g.feature_dim, hidden=cfg.hidden, n_classes=g.num_classes,
              num_layers=cfg.num_layers, sgc_hops=cfg.sgc_hops, dropout=cfg.dropout, seed=cfg.seed)
    if plain_backbone:
        if cfg.num_pn or cfg.num_pa:
            raise ConfigError("plain backbone cannot carry prototypes")
        return BackboneModel(**kw)
    return P2Model(num_pn=cfg.num_pn, num_pa=cfg.num_pa, temperature=cfg.temperature,
                   features=g.features, **kw)


def _loss(model, g, logits, trace, cfg, mask):
    task = cross_entropy(logits, g.labels, mask)
    bank = getattr(model, "bank", None)
    if bank is None:
        return task
    return final_loss(task, bank, trace, g.X, cfg.loss_weights, cfg.diversity_axis,
                      cfg.regularizer_grad == "all")


def fit(g: Graph, cfg: ExperimentConfig, plain_backbone: bool = False, track_checksums: int = 0) -> RunResult:
    """Train one model with early stopping on validation accuracy.

    The test accuracy returned is the one measured at the epoch with the
    best validation accuracy. ``track_checksums`` records a parameter
    checksum after each of the first that-many epochs.
    """
    cfg.validate()
    for tag in ("train", "val", "test"):
        if not g.mask(tag).any():
            raise ValueError(f"graph has an empty {tag} split")
    t0 = time.perf_counter()
    model = build_model(g, cfg, plain_backbone)
    ops = GraphOperators.build(g, cfg.num_pn)
    params = model.named_parameters()
    leaves = [p for _, p in params]
    opt = OptimizerState(lr=cfg.lr, weight_decay=cfg.weight_decay)
    train, val, test = g.mask("train"), g.mask("val"), g.mask("test")

    best_val, best_epoch, best_test = -1.0, -1, float("nan")
    best_pred = best_emb = None
    best_att: dict = {}
    losses, vals, sums = [], [], []
    since_best = 0
    epoch = 0
    for epoch in range(1, cfg.max_epochs + 1):
        with ad.Tape():
            logits, trace = model.forward(g, ops, training=True)
            loss = _loss(model, g, logits, trace, cfg, train)
        lv = loss.item()
        if not np.isfinite(lv):
            raise DivergenceError(f"non-finite training loss {lv!r} at epoch {epoch} (seed {cfg.seed})")
        grads = ad.backward(loss, leaves)
        adam_step(opt, params, grads, model.decayed)
        losses.append(lv)
        if epoch <= track_checksums:
            sums.append(param_checksum(params))

        logits, trace = model.forward(g, ops, training=False)
        pred = np.argmax(logits.data, axis=1)
        va = accuracy(pred, g.labels, val)
        vals.append(va)
        if va > best_val:
            best_val, best_epoch = va, epoch
            best_test = accuracy(pred, g.labels, test)
            best_pred, best_emb = pred, trace.penultimate().copy()
            best_att = trace.attention_summary()
            since_best = 0
        else:
            since_best += 1
            if since_best >= cfg.patience:
                break
    return RunResult(cfg.seed, best_val, best_test, best_epoch, epoch, losses, vals, best_att,
                     best_pred, best_emb, param_checksum(params), sums, time.perf_counter() - t0)


def fit_seed(g: Graph, cfg: ExperimentConfig, **kw) -> RunResult:
    """Split ``g`` with the config's split spec (seeded by cfg.seed) and fit."""
    return fit(make_split(g, cfg.split_spec()), cfg, **kw)


# --------------------------------------------------------------------------
# Ablation and significance
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class TTestResult:
    p_value: float
    statistic: float
    degenerate: bool = False


def paired_t_test(a, b) -> TTestResult:
    """Two-sided paired t-test on seed-paired accuracies.

    Zero-variance differences are degenerate: p = 1 when the mean
    difference is zero, p = 0 otherwise (``degenerate`` is set).
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError(f"paired samples must have equal length, got {a.shape} and {b.shape}")
    if a.size < 2:
        raise ValueError("paired t-test needs at least two pairs")
    d = a - b
    if np.all(np.abs(d - d[0]) <= 1e-12 * max(1.0, abs(d[0]))):
        if abs(d.mean()) <= 1e-12:
            return TTestResult(1.0, 0.0, True)
        return TTestResult(0.0, float(np.sign(d.mean()) * np.inf), True)
    res = stats.ttest_rel(a, b)
    return TTestResult(float(res.pvalue), float(res.statistic))


@dataclass
class AblationRow:
    variant: str
    accuracies: list[float]
    mean: float
    std: float
    p_value: float | None = None
    degenerate: bool = False


@dataclass
class AblationTable:
    seeds: list[int]
    rows: list[AblationRow]
    runs: dict = field(default_factory=dict)  # (variant, seed) -> RunResult

    def row(self, variant: str) -> AblationRow:
        return next(r for r in self.rows if r.variant == variant)


def summarize(accs) -> tuple[float, float]:
    accs = np.asarray(accs, dtype=np.float64)
    if accs.size < 2:
        warnings.warn("standard deviation of a single run reported as 0", stacklevel=2)
        return float(accs.mean()), 0.0
    return float(accs.mean()), float(accs.std())


def run_ablation(g: Graph, base_cfg: ExperimentConfig, seeds, workers: int = 1,
                 variants=VARIANTS) -> AblationTable:
    """backbone / +P_N / +P_N+P_A over the given seeds, one split per seed."""
    if not base_cfg.num_pn or not base_cfg.num_pa:
        raise ConfigError("ablation needs num_pn and num_pa > 0 in the base config")
    seeds = list(seeds)
    jobs = [(v, s) for s in seeds for v in variants]

    def run(job):
        v, s = job
        return fit_seed(g, replace(base_cfg.variant(v), seed=s))

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as ex:
            results = list(ex.map(run, jobs))
    else:
        results = [run(j) for j in jobs]
    runs = dict(zip(jobs, results))

    rows = []
    base = [runs[("backbone", s)].test_acc for s in seeds] if "backbone" in variants else None
    for v in variants:
        accs = [runs[(v, s)].test_acc for s in seeds]
        mean, std = summarize(accs)
        row = AblationRow(v, accs, mean, std)
        if v != "backbone" and base is not None and len(seeds) >= 2:
            tt = paired_t_test(accs, base)
            row.p_value, row.degenerate = tt.p_value, tt.degenerate
        rows.append(row)
    return AblationTable(seeds, rows, runs)


def random_search(g: Graph, base_cfg: ExperimentConfig, trials: int, seed: int = 0):
    """Seeded random search over the prototype-count and loss-weight grid.

    Returns (best_config, [(config, best_val_acc), ...]); selection is by
    validation accuracy only.
    """
    rng = np.random.default_rng(seed)
    history = []
    for _ in range(trials):
        cfg = replace(base_cfg,
                      num_pn=int(rng.choice(PROTOTYPE_GRID)), num_pa=int(rng.choice(PROTOTYPE_GRID)),
                      lambda_al=float(rng.choice(LAMBDA_GRID)), lambda_d=float(rng.choice(LAMBDA_GRID)),
                      lambda_s=float(rng.choice(LAMBDA_GRID)))
        history.append((cfg, fit_seed(g, cfg).best_val_acc))
    best = max(history, key=lambda t: t[1])[0]
    return best, history


def config_dict(cfg: ExperimentConfig) -> dict:
    return asdict(cfg)
