"""Training with early stopping and grid search, cross-validation, median
risk stratification and decile score profiles."""

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
import itertools
import json
import logging
import os
import zlib

import numpy as np

from . import network as nw
from . import pooling as pl
from .data import FeatureBag, label_arrays, resample_indices, split_folds
from .errors import DataError, OptimizationError, UndefinedMetricError, ValidationError
from .survival import c_index, cox_nll, cox_nll_grad, fit_l1_cox, km_estimate, logrank_test

log = logging.getLogger(__name__)


class Dataset:
    """Bags with aligned survival labels; subsets share the bag objects."""

    def __init__(self, bags, labels=None, time=None, event=None):
        self.bags = list(bags)
        if labels is not None:
            time, event = label_arrays(labels)
        self.time = np.asarray(time, dtype=np.float64)
        self.event = np.asarray(event, dtype=np.int64)
        if not (len(self.bags) == self.time.shape[0] == self.event.shape[0]):
            raise ValidationError("bags and labels are not aligned")

    @property
    def ids(self):
        return [b.patient_id for b in self.bags]

    def __len__(self):
        return len(self.bags)

    def subset(self, idx):
        idx = np.asarray(idx, dtype=np.int64)
        return Dataset([self.bags[i] for i in idx], time=self.time[idx], event=self.event[idx])

    def by_ids(self, ids):
        pos = {pid: i for i, pid in enumerate(self.ids)}
        return self.subset([pos[p] for p in ids])


def _patient_seed(seed, patient_id):
    return np.random.SeedSequence([seed, zlib.crc32(patient_id.encode("utf-8"))])


def fixed_size(dataset, bag_size, seed):
    """Resample every bag to ``bag_size`` tiles, once per patient per seed."""
    if bag_size is None:
        return dataset
    bags = []
    for b in dataset.bags:
        if b.n == bag_size:
            bags.append(b)
            continue
        rng = np.random.default_rng(_patient_seed(seed, b.patient_id))
        bags.append(FeatureBag(b.patient_id, b.features[resample_indices(b.n, bag_size, rng)]))
    return Dataset(bags, time=dataset.time, event=dataset.event)


@dataclass
class TrainConfig:
    strategy: pl.PoolingStrategy
    bag_size: int = 12000
    learning_rates: tuple = (1e-3, 1e-4)
    weight_decays: tuple = (0.0, 1e-4)
    max_epochs: int = 100
    patience: int = 5
    batch_size: int = 64
    seed: int = 0
    scorer_hidden: int = 128
    head_hidden: tuple = (128,)
    attention_dim: int = 64
    early_stop_fraction: float = 0.2
    l1_lambdas: tuple = (1.0, 0.5, 0.2, 0.1, 0.05, 0.02, 0.01)

    def __post_init__(self):
        if not self.learning_rates or not self.weight_decays:
            raise ValidationError("learning-rate and weight-decay grids must be non-empty")
        if self.patience < 1:
            raise ValidationError("patience must be >= 1")
        if self.batch_size < 2:
            raise ValidationError("batch size must be >= 2")
        if self.max_epochs < 0:
            raise ValidationError("max_epochs must be >= 0")
        if not 0 <= self.early_stop_fraction < 1:
            raise ValidationError("early_stop_fraction must lie in [0, 1)")

    @classmethod
    def from_dict(cls, doc, strategy=None):
        doc = dict(doc)
        if "strategy" in doc:
            strategy = pl.PoolingStrategy.from_dict(doc.pop("strategy"))
        if strategy is None:
            raise ValidationError("train config needs a pooling strategy")
        for key in ("learning_rates", "weight_decays", "head_hidden", "l1_lambdas"):
            if key in doc:
                doc[key] = tuple(doc[key])
        unknown = set(doc) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValidationError(f"unknown train fields: {sorted(unknown)}")
        return cls(strategy=strategy, **doc)

    def to_dict(self):
        return {
            "strategy": self.strategy.to_dict(),
            "bag_size": self.bag_size,
            "learning_rates": list(self.learning_rates),
            "weight_decays": list(self.weight_decays),
            "max_epochs": self.max_epochs,
            "patience": self.patience,
            "batch_size": self.batch_size,
            "seed": self.seed,
            "scorer_hidden": self.scorer_hidden,
            "head_hidden": list(self.head_hidden),
            "attention_dim": self.attention_dim,
            "early_stop_fraction": self.early_stop_fraction,
            "l1_lambdas": list(self.l1_lambdas),
        }


@dataclass
class TrainedModel:
    params: nw.ModelParams
    strategy: pl.PoolingStrategy
    threshold: float
    metadata: dict = field(default_factory=dict)

    def risk(self, bags):
        return nw.predict_risk(self.params, self.strategy, bags)

    def tile_scores(self, bag):
        return nw.score_tiles(self.params, bag)


@dataclass
class LinearCoxModel:
    """L1-penalised Cox regression on standardised mean feature vectors."""

    beta: np.ndarray
    center: np.ndarray
    scale: np.ndarray
    threshold: float
    metadata: dict = field(default_factory=dict)
    strategy: pl.PoolingStrategy = pl.PoolingStrategy("mean_feature")

    def risk(self, bags):
        return self.design(bags) @ self.beta

    def design(self, bags):
        means = np.stack([np.asarray(b.features, dtype=np.float64).mean(axis=0) for b in bags])
        return (means - self.center) / self.scale


def _batches(rng, event, batch_size):
    """Shuffled batches; event-free batches are redrawn once, then dropped."""
    n = event.shape[0]
    perm = rng.permutation(n)
    out = []
    for start in range(0, n, batch_size):
        idx = perm[start:start + batch_size]
        if not event[idx].any():
            idx = rng.choice(n, size=idx.shape[0], replace=False)
            if not event[idx].any():
                continue
        if idx.shape[0] >= 2:
            out.append(idx)
    return out


def _fit_grid_point(config, train_set, val_set, lr, wd, grid_index):
    d = train_set.bags[0].d
    params = nw.init_for_strategy(
        config.strategy, d, config.seed, config.scorer_hidden, config.head_hidden, config.attention_dim
    )
    state = nw.adam_init(params, lr=lr, weight_decay=wd)
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, grid_index, 7]))
    monitor = val_set if val_set.event.any() else train_set

    def monitored(p):
        return nw.batch_loss(p, monitor.bags, config.strategy, monitor.time, monitor.event)

    best_loss = monitored(params)
    best_params, best_epoch, waited, epochs = params, 0, 0, 0
    history = [best_loss]
    for epoch in range(1, config.max_epochs + 1):
        batches = _batches(rng, train_set.event, config.batch_size)
        if not batches:
            raise DataError("every training batch is free of events")
        for idx in batches:
            loss, grads = nw.backward(
                params, [train_set.bags[i] for i in idx], config.strategy,
                train_set.time[idx], train_set.event[idx],
            )
            if not np.isfinite(loss):
                raise OptimizationError(f"non-finite training loss at lr={lr}, weight_decay={wd}, epoch {epoch}")
            params, state = nw.adam_step(params, grads, state)
        epochs = epoch
        current = monitored(params)
        if not np.isfinite(current):
            raise OptimizationError(f"non-finite validation loss at lr={lr}, weight_decay={wd}, epoch {epoch}")
        history.append(current)
        if current < best_loss:
            best_loss, best_params, best_epoch, waited = current, params, epoch, 0
        else:
            waited += 1
            if waited >= config.patience:
                break
    meta = {
        "learning_rate": lr,
        "weight_decay": wd,
        "epochs_run": epochs,
        "best_epoch": best_epoch,
        "validation_nll": best_loss,
        "history": history,
    }
    return best_params, meta


def train(config, train_set, val_set):
    """Grid search over (learning rate, weight decay); keep the lowest best
    validation Cox loss. Each grid point trains with patience-based early
    stopping and restores its best epoch."""
    if len(train_set) == 0 or len(val_set) == 0:
        raise ValidationError("training and validation sets must be non-empty")
    if not train_set.event.any():
        raise DataError("training set has no observed events")
    best = None
    for gi, (lr, wd) in enumerate(itertools.product(config.learning_rates, config.weight_decays)):
        params, meta = _fit_grid_point(config, train_set, val_set, lr, wd, gi)
        log.debug("grid lr=%g wd=%g -> val nll %.6f after %d epochs", lr, wd, meta["validation_nll"], meta["epochs_run"])
        if best is None or meta["validation_nll"] < best[1]["validation_nll"]:
            best = (params, meta)
    params, meta = best
    train_risk = nw.predict_risk(params, config.strategy, train_set.bags)
    return TrainedModel(params, config.strategy, float(np.median(train_risk)), meta)


def train_l1_cox(config, train_set, val_set):
    """Mean-feature L1 Cox: lambda chosen on validation Cox loss along a
    warm-started path from the smallest lambda that zeroes every coefficient."""
    if not train_set.event.any():
        raise DataError("training set has no observed events")
    raw = np.stack([b.features.astype(np.float64).mean(axis=0) for b in train_set.bags])
    center = raw.mean(axis=0)
    scale = raw.std(axis=0)
    scale[scale == 0] = 1.0
    X = (raw - center) / scale
    lam_max = float(np.max(np.abs(X.T @ cox_nll_grad(np.zeros(len(X)), train_set.time, train_set.event))))
    model = LinearCoxModel(np.zeros(X.shape[1]), center, scale, 0.0)
    Xv = model.design(val_set.bags)
    monitor_v = val_set.event.any()
    beta = np.zeros(X.shape[1])
    best = None
    for frac in sorted(config.l1_lambdas, reverse=True):
        lam = frac * lam_max
        beta = fit_l1_cox(X, train_set.time, train_set.event, lam, iterations=500, tolerance=1e-8, beta0=beta)
        loss = cox_nll(Xv @ beta, val_set.time, val_set.event) if monitor_v else cox_nll(X @ beta, train_set.time, train_set.event)
        if best is None or loss < best[1]:
            best = (beta.copy(), loss, lam)
    beta, loss, lam = best
    model.beta = beta
    model.threshold = float(np.median(X @ beta))
    model.metadata = {"lambda": lam, "validation_nll": loss, "nonzero": int(np.count_nonzero(beta))}
    return model


def fit_model(config, train_set, val_set, algorithm="network"):
    if algorithm == "l1_cox":
        return train_l1_cox(config, train_set, val_set)
    return train(config, train_set, val_set)


# -- stratification and profiles ------------------------------------------------

@dataclass
class Stratification:
    assignments: list
    km: dict
    logrank: object
    degenerate: bool

    def to_dict(self):
        return {
            "n_high": sum(a == "high" for a in self.assignments),
            "n_low": sum(a == "low" for a in self.assignments),
            "degenerate": self.degenerate,
            "logrank": None if self.logrank is None else self.logrank.to_dict(),
        }

    def km_rows(self):
        rows = []
        for group in ("high", "low"):
            if group in self.km:
                rows.extend(self.km[group].to_rows(group))
        return rows


def stratify_risks(risk, threshold, time, event):
    """High risk strictly above the threshold; ties go to the low-risk group."""
    high = np.asarray(risk) > threshold
    assignments = ["high" if h else "low" for h in high]
    km = {}
    for name, mask in (("high", high), ("low", ~high)):
        if mask.any():
            km[name] = km_estimate(time[mask], event[mask])
    degenerate = bool(high.all() or not high.any())
    result = None
    if not degenerate:
        try:
            result = logrank_test(time[high], event[high], time[~high], event[~high])
        except UndefinedMetricError:
            degenerate = True
    if degenerate:
        log.warning("risk stratification put every patient in one group; log-rank omitted")
    return Stratification(assignments, km, result, degenerate)


def risk_stratify(model, cohort):
    if len(cohort) == 0:
        raise ValidationError("cohort must be non-empty")
    return stratify_risks(model.risk(cohort.bags), model.threshold, cohort.time, cohort.event)


def profile_scheme(model):
    strat = getattr(model, "strategy", None)
    if strat is not None and strat.scheme is not None:
        return strat.scheme
    return pl.scenario_preset(7)


def decile_rows(risk, window_scores):
    """Mean window score per risk decile; deciles run from lowest to highest risk."""
    if len(risk) < 10:
        raise ValidationError("decile profiles need at least 10 patients")
    order = np.argsort(risk, kind="stable")
    return np.stack([window_scores[g].mean(axis=0) for g in np.array_split(order, 10)])


def decile_score_profile(model, cohort, scheme=None):
    """10 x |percentiles| table of mean (window-averaged) selected tile scores."""
    if not hasattr(model, "tile_scores"):
        raise ValidationError("score profiles need a model with a tile scorer")
    scheme = scheme or profile_scheme(model)
    windows = []
    for bag in cohort.bags:
        s = np.sort(model.tile_scores(bag), kind="stable")
        windows.append(s[pl.percentile_indices(s.shape[0], scheme)].mean(axis=1))
    return decile_rows(model.risk(cohort.bags), np.stack(windows)), scheme


# -- cross-validation -----------------------------------------------------------

@dataclass
class FoldResult:
    fold: int
    c_index: float
    n_train: int
    n_validation: int
    metadata: dict


@dataclass
class EvalReport:
    label: str
    folds: list
    stratification: Stratification = None
    profile: np.ndarray = None
    profile_percentiles: tuple = None
    models: list = field(default_factory=list, repr=False)

    @property
    def c_indices(self):
        return [f.c_index for f in self.folds]

    @property
    def mean(self):
        return float(sum(self.c_indices) / len(self.folds))

    @property
    def sd(self):
        return float(np.std(self.c_indices, ddof=1)) if len(self.folds) > 1 else 0.0

    def to_dict(self):
        out = {
            "label": self.label,
            "c_index": self.mean,
            "c_index_sd": self.sd,
            "folds": [
                {
                    "fold": f.fold,
                    "c_index": f.c_index,
                    "n_train": f.n_train,
                    "n_validation": f.n_validation,
                    "model": {k: v for k, v in f.metadata.items() if k != "history"},
                }
                for f in self.folds
            ],
        }
        if self.stratification is not None:
            out["stratification"] = self.stratification.to_dict()
            out["logrank"] = out["stratification"]["logrank"]
        return out


def _inner_split(dataset, fraction, seed):
    n = len(dataset)
    n_stop = int(round(fraction * n))
    if n_stop < 1 or n - n_stop < 2:
        return dataset, dataset
    perm = np.random.default_rng(np.random.SeedSequence([seed, 11])).permutation(n)
    return dataset.subset(np.sort(perm[n_stop:])), dataset.subset(np.sort(perm[:n_stop]))


def holdout_split(dataset, fraction, seed):
    """(train, held-out) with ``fraction`` of patients held out."""
    n = len(dataset)
    n_out = max(1, int(round(fraction * n)))
    perm = np.random.default_rng(np.random.SeedSequence([seed, 13])).permutation(n)
    return dataset.subset(np.sort(perm[n_out:])), dataset.subset(np.sort(perm[:n_out]))


def fit_with_early_stop_split(config, train_set, algorithm="network", fallback_val=None):
    """Carve an early-stopping set out of the training patients, then fit.

    With ``early_stop_fraction == 0`` the supplied ``fallback_val`` set
    monitors training instead.
    """
    if config.early_stop_fraction > 0 or fallback_val is None:
        fit_set, stop_set = _inner_split(train_set, config.early_stop_fraction or 0.2, config.seed)
    else:
        fit_set, stop_set = train_set, fallback_val
    model = fit_model(config, fit_set, stop_set, algorithm)
    model.threshold = float(np.median(model.risk(train_set.bags)))
    return model


def _workers():
    try:
        return max(1, int(os.environ.get("DISMISL_THREADS", "1")))
    except ValueError:
        return 1


def cross_validate(config, dataset, n_folds=5, algorithm="network", label=None, keep_models=False):
    """One model per fold; C-index on each held-out fold, then median-threshold
    stratification and decile profiles over the pooled out-of-fold risks."""
    dataset = fixed_size(dataset, config.bag_size, config.seed)
    split = split_folds(dataset.ids, n_folds, config.seed)

    def run(k):
        train_ids, val_ids = split.folds[k]
        tr, va = dataset.by_ids(train_ids), dataset.by_ids(val_ids)
        try:
            model = fit_with_early_stop_split(config, tr, algorithm, fallback_val=va)
        except (DataError, OptimizationError) as exc:
            raise type(exc)(f"fold {k}: {exc}") from exc
        risk = model.risk(va.bags)
        try:
            ci = c_index(risk, va.time, va.event)
        except UndefinedMetricError:
            ci = float("nan")
        return model, va, risk, FoldResult(k + 1, ci, len(tr), len(va), dict(model.metadata))

    workers = min(_workers(), n_folds)
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            results = list(pool.map(run, range(n_folds)))
    else:
        results = [run(k) for k in range(n_folds)]

    risk_all, high_all, time_all, event_all, windows = [], [], [], [], []
    for model, va, risk, _ in results:
        risk_all.append(risk)
        high_all.append(risk > model.threshold)
        time_all.append(va.time)
        event_all.append(va.event)
    time_all = np.concatenate(time_all)
    event_all = np.concatenate(event_all)
    # each fold's own training median defines high risk; pool as a 0/1 score
    strat = stratify_risks(np.concatenate(high_all).astype(float), 0.5, time_all, event_all)

    report = EvalReport(label or config.strategy.label(), [r[3] for r in results], strat)
    if algorithm == "network" and config.strategy.uses_scores and len(time_all) >= 10:
        scheme = profile_scheme(results[0][0])
        for model, va, _, _ in results:
            for bag in va.bags:
                s = np.sort(model.tile_scores(bag), kind="stable")
                windows.append(s[pl.percentile_indices(s.shape[0], scheme)].mean(axis=1))
        # ranks within each fold keep decile membership comparable across fold models
        ranks = np.concatenate([np.argsort(np.argsort(r, kind="stable"), kind="stable") / max(len(r) - 1, 1)
                                for r in risk_all])
        report.profile = decile_rows(ranks, np.stack(windows))
        report.profile_percentiles = scheme.percentiles
    if keep_models:
        report.models = [r[0] for r in results]
    return report


# -- baselines --------------------------------------------------------------------

BASELINES = (
    ("dismisl_s7_k3", pl.percentile_strategy(7, 3), "network"),
    ("top_bottom_10", pl.PoolingStrategy("top_bottom_k", k=10), "network"),
    ("mean_score", pl.PoolingStrategy("mean_score"), "network"),
    ("max_top_1", pl.PoolingStrategy("max_top_k", k=1), "network"),
    ("max_top_10", pl.PoolingStrategy("max_top_k", k=10), "network"),
    ("mean_feature_l1_cox", pl.PoolingStrategy("mean_feature"), "l1_cox"),
)


@dataclass
class BaselineRow:
    algorithm: str
    report: EvalReport = None
    error: str = None

    @property
    def ok(self):
        return self.report is not None


def run_baselines(config, dataset, n_folds=5, algorithms=BASELINES):
    """Cross-validate every algorithm on the same folds. A failing algorithm
    yields a row carrying its error instead of stopping the comparison."""
    rows = []
    for name, strategy, algorithm in algorithms:
        cfg = replace(config, strategy=strategy)
        try:
            rows.append(BaselineRow(name, cross_validate(cfg, dataset, n_folds, algorithm, label=name)))
        except (DataError, OptimizationError, ValidationError) as exc:
            log.warning("baseline %s failed: %s", name, exc)
            rows.append(BaselineRow(name, error=f"{type(exc).__name__}: {exc}"))
    return rows


def baseline_table(rows, n_folds):
    header = ["algorithm", "status", "c_index_mean", "c_index_sd"] + [f"fold_{k + 1}" for k in range(n_folds)]
    body = []
    for row in rows:
        if row.ok:
            body.append([row.algorithm, "ok", row.report.mean, row.report.sd, *row.report.c_indices])
        else:
            body.append([row.algorithm, "failed: " + row.error] + [None] * (n_folds + 2))
    return header, body


# -- model files ------------------------------------------------------------------

def save_model(path, model):
    """Network models go to the binary checkpoint format, L1 Cox models to JSON."""
    meta = {k: v for k, v in model.metadata.items() if k != "history"}
    if isinstance(model, LinearCoxModel):
        doc = {"kind": "l1_cox", "beta": model.beta.tolist(), "center": model.center.tolist(),
               "scale": model.scale.tolist(), "threshold": model.threshold, "metadata": meta}
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(doc, fh, indent=2, sort_keys=True)
        return
    nw.save_checkpoint(path, model.params, model.strategy, dict(meta, threshold=model.threshold))


def load_model(path):
    with open(path, "rb") as fh:
        head = fh.read(4)
    if head == b"DMSM":
        params, strategy, meta = nw.load_checkpoint(path)
        return TrainedModel(params, strategy, float(meta.get("threshold", 0.0)), meta)
    with open(path, encoding="utf-8") as fh:
        doc = json.load(fh)
    if doc.get("kind") != "l1_cox":
        raise DataError(f"{path}: not a model file")
    return LinearCoxModel(np.array(doc["beta"]), np.array(doc["center"]), np.array(doc["scale"]),
                          float(doc["threshold"]), doc.get("metadata", {}))
