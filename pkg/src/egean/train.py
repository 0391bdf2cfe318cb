"""Two-stage training, AUC evaluation and report/embedding export.

Stage 1 pretrains the shared embedding table on the exposure task with
in-batch negatives and then freezes it.  Stage 2 cycles three updates per
mini-batch:

1. CTR (propensity) parameters on click cross-entropy plus the squared
   steady-state residual;
2. imputation parameters on the inverse-propensity weighted fit of the
   realised CVR error plus the same residual penalty;
3. CVR parameters (LoRA, gates, tower) on the CVR estimator loss plus the
   MMD alignment term.

Propensities fed to the CVR estimator are detached CTR predictions.
"""
from __future__ import annotations

import csv
import hashlib
import json
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional

import numpy as np
from scipy.stats import rankdata

from . import autodiff as ad
from . import losses
from .data import Dataset, in_batch_negatives, make_batches
from .estimators import KernelSpec, ce_delta, mmd2
from .model import EgeanModel

ESTIMATOR_CHOICES = ("pvdr", "naive", "dr")


class NumericAbort(RuntimeError):
    """A training loss became non-finite; ``diagnostics`` holds the last batch state."""

    def __init__(self, message: str, diagnostics: dict):
        super().__init__(message)
        self.diagnostics = diagnostics


class UndefinedMetricError(ValueError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    pretrain_epochs: int = 5
    epochs: int = 10
    batch_size: int = 1024
    lr: float = 1e-3
    weight_decay: float = 1e-3
    lam: float = 0.5
    alpha_mmd: float = 0.1
    gamma_steady: float = 0.1
    w_ctr: float = 1.0
    w_cvr: float = 1.0
    w_imp: float = 1.0
    cvr_estimator: str = "pvdr"
    mmd_kernel: str = "rbf"
    mmd_bandwidth: object = "median"
    probe_size: int = 2048
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.lam <= 1.0:
            raise ValueError(f"lam must lie in [0, 1], got {self.lam}")
        for name in ("alpha_mmd", "gamma_steady", "w_ctr", "w_cvr", "w_imp", "lr", "weight_decay"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if self.cvr_estimator not in ESTIMATOR_CHOICES:
            raise ValueError(f"cvr_estimator must be one of {ESTIMATOR_CHOICES}")
        if self.batch_size < 2:
            raise ValueError("batch_size must be at least 2")

    @property
    def kernel(self) -> KernelSpec:
        return KernelSpec(self.mmd_kernel, self.mmd_bandwidth)


def config_hash(*configs) -> str:
    blob = json.dumps([asdict(c) if hasattr(c, "__dataclass_fields__") else c for c in configs],
                      sort_keys=True, default=list)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


@dataclass
class MetricsReport:
    cvr_auc: Optional[float] = None
    ctcvr_auc: Optional[float] = None
    cvr_auc_space: str = "full"
    epoch_losses: List[dict] = field(default_factory=list)
    pretrain_losses: List[float] = field(default_factory=list)
    steady_state_trace: List[float] = field(default_factory=list)
    mmd_trace: List[float] = field(default_factory=list)
    clamp_events: int = 0
    skipped_negatives: int = 0
    config_hash: str = ""
    seed: int = 0

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True) + "\n"

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(self.to_json())

    def save_traces(self, path) -> None:
        cols = ["epoch", "ctr_loss", "imputation_loss", "cvr_loss", "mmd", "total",
                "steady_state_residual", "mmd_probe"]
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(cols)
            for k, row in enumerate(self.epoch_losses):
                writer.writerow([row["epoch"], *(repr(row[c]) for c in cols[1:6]),
                                 repr(self.steady_state_trace[k]), repr(self.mmd_trace[k])])


# ---------------------------------------------------------------------------
# metrics


def auc(scores, labels) -> float:
    """Rank-based ROC AUC; tied scores count one half."""
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    labels = np.asarray(labels).reshape(-1).astype(bool)
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("AUC needs at least one positive and one negative label")
    ranks = rankdata(scores, method="average")
    return float((ranks[labels].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def evaluate(model: EgeanModel, dataset: Dataset, true_conversion: Optional[np.ndarray] = None,
             report: Optional[MetricsReport] = None) -> MetricsReport:
    """CVR AUC over the whole exposure space when oracle labels are given,
    otherwise over the click space; CTCVR AUC over all exposures."""
    report = report or MetricsReport()
    pred = model.predict(dataset.codes)
    if true_conversion is not None:
        report.cvr_auc = auc(pred["cvr_prob"], true_conversion)
        report.cvr_auc_space = "full"
    else:
        clicked = dataset.click == 1
        report.cvr_auc = auc(pred["cvr_prob"][clicked], dataset.conversion[clicked])
        report.cvr_auc_space = "click"
    report.ctcvr_auc = auc(pred["ctcvr_prob"], dataset.click * dataset.conversion)
    return report


# ---------------------------------------------------------------------------
# diagnostics on a fixed probe


def steady_state_on(model: EgeanModel, dataset: Dataset, lam: float) -> float:
    pred = model.predict(dataset.codes)
    o = dataset.click.astype(np.float64)
    p_hat = np.maximum(pred["ctr_prob"], 1e-6)
    e_hat = pred["imputed_error"]
    a = (o / p_hat).mean()
    b = (o * e_hat / p_hat).sum() / e_hat.sum()
    return float(lam + (1.0 - lam) * a - b)


def mmd_on(model: EgeanModel, dataset: Dataset, kernel: KernelSpec) -> float:
    pred = model.predict(dataset.codes)
    clicked = dataset.click == 1
    if not clicked.any():
        return 0.0
    return mmd2(pred["cvr_embeddings"][clicked], pred["shared_embeddings"], kernel)


def probe_subset(dataset: Dataset, size: int, seed: int) -> Dataset:
    order = np.random.default_rng([seed, 0x9B0BE]).permutation(len(dataset))
    return dataset.subset(np.sort(order[:size]))


# ---------------------------------------------------------------------------
# stage 1


def pretrain_exposure(model: EgeanModel, dataset: Dataset, config: TrainConfig) -> MetricsReport:
    """Train embeddings and the exposure MLP on exposed-vs-in-batch-negative
    pairs, then freeze the embedding table."""
    report = MetricsReport(seed=config.seed)
    if not model.config.exposure_network_on:
        return report
    model.embedding.set_frozen(False)
    params = model.group("exposure")
    opt = ad.Adam(params, lr=config.lr, weight_decay=config.weight_decay)
    rng = np.random.default_rng([config.seed, 0xE4905])
    for epoch in range(config.pretrain_epochs):
        total, count = 0.0, 0
        for batch in make_batches(dataset, config.batch_size, seed=config.seed * 1000 + epoch):
            exp = in_batch_negatives(batch.codes, dataset.schema, rng)
            report.skipped_negatives += exp.skipped
            with ad.Tape() as tape:
                prob = model.exposure_forward(model.shared_embedding(exp.codes))
                loss = ad.mean(losses.bce(exp.label, prob))
            _check_finite(loss, "exposure", {"epoch": epoch})
            ad.backward(loss, tape, params)
            opt.step()
            total += loss.item() * exp.codes.shape[0]
            count += exp.codes.shape[0]
        report.pretrain_losses.append(total / count)
    model.embedding.set_frozen(True)
    return report


# ---------------------------------------------------------------------------
# stage 2


def _check_finite(loss: ad.Tensor, phase: str, diagnostics: dict) -> None:
    if not np.isfinite(loss.data).all():
        raise NumericAbort(f"non-finite {phase} loss", {"phase": phase, **diagnostics})


def _residual_sq(p_hat: ad.Tensor, o, e_hat, lam: float) -> ad.Tensor:
    res = losses.steady_state_residual(p_hat, o, e_hat, lam)
    return res * res


def finetune_multitask(model: EgeanModel, dataset: Dataset, config: TrainConfig,
                       true_conversion: Optional[np.ndarray] = None,
                       report: Optional[MetricsReport] = None) -> MetricsReport:
    report = report or MetricsReport(seed=config.seed)
    report.seed = config.seed
    use_mmd = model.config.metric_learning_on and config.alpha_mmd > 0
    # without exposure pretraining there is nothing to protect: embeddings train with the CVR/CTR steps
    model.embedding.set_frozen(model.config.exposure_network_on)
    ctr_params, cvr_params = model.group("ctr"), model.group("cvr")
    imp_params = model.group("imputation")
    opt_kw = dict(lr=config.lr, weight_decay=config.weight_decay)
    opt_ctr, opt_cvr, opt_imp = ad.Adam(ctr_params, **opt_kw), ad.Adam(cvr_params, **opt_kw), ad.Adam(imp_params, **opt_kw)
    emb_params = [] if model.embedding.frozen else [model.embedding.W]
    opt_emb = ad.Adam(emb_params, **opt_kw) if emb_params else None
    probe = probe_subset(dataset, config.probe_size, config.seed)
    kernel = config.kernel
    counter: Dict[str, int] = {}

    def diagnostics():
        report.steady_state_trace.append(steady_state_on(model, dataset, config.lam))
        report.mmd_trace.append(mmd_on(model, probe, kernel))

    diagnostics()
    report.epoch_losses.append(_epoch_row(0, *_full_losses(model, dataset, config, kernel, use_mmd)))
    for epoch in range(1, config.epochs + 1):
        sums = np.zeros(5)
        n_seen = 0
        for batch in make_batches(dataset, config.batch_size, seed=config.seed * 1000 + 500 + epoch):
            o = batch.click.astype(np.float64)
            r_obs = batch.conversion.astype(np.float64)
            diag = {"epoch": epoch, "batch_clicks": int(o.sum()), "clamp_events": counter.get("clamp_events", 0)}
            with ad.no_tape():
                e_hat_now = model.imputation_forward(model.shared_embedding(batch.codes)).data.reshape(-1)

            # (1) propensity / CTR
            with ad.Tape() as tape:
                ctr, _ = model.task_forward("ctr", batch.codes)
                ctr_loss = ad.mean(losses.bce(o, ctr))
                loss1 = config.w_ctr * ctr_loss
                if config.gamma_steady > 0:
                    loss1 = loss1 + config.gamma_steady * _residual_sq(
                        ad.reshape(ctr, (-1,)), o, e_hat_now, config.lam)
            _check_finite(loss1, "ctr", diag)
            ad.backward(loss1, tape, ctr_params + emb_params)
            opt_ctr.step()
            if opt_emb:
                opt_emb.step()

            with ad.no_tape():
                shared = model.shared_embedding(batch.codes)
                p_hat = losses.floor_propensity(model.task_forward("ctr", batch.codes, shared)[0].data.reshape(-1), counter)
                r_hat = model.task_forward("cvr", batch.codes, shared)[0].data.reshape(-1)
            errors = np.where(o == 1, ce_delta(r_obs, r_hat), 0.0)

            # (2) imputation
            with ad.Tape() as tape:
                e_hat = ad.reshape(model.imputation_forward(model.shared_embedding(batch.codes)), (-1,))
                imp_loss = losses.imputation_fit(e_hat, errors, o, p_hat)
                loss2 = config.w_imp * imp_loss
                if config.gamma_steady > 0:
                    loss2 = loss2 + config.gamma_steady * _residual_sq(ad.Tensor(p_hat), o, e_hat, config.lam)
            _check_finite(loss2, "imputation", diag)
            ad.backward(loss2, tape, imp_params)
            opt_imp.step()
            e_hat_now = e_hat.data

            # (3) CVR
            with ad.Tape() as tape:
                cvr, cvr_emb = model.task_forward("cvr", batch.codes)
                cvr_loss = _cvr_objective(config, losses.bce(r_obs, cvr), o, p_hat, e_hat_now)
                loss3 = config.w_cvr * cvr_loss if cvr_loss is not None else None
                mmd_val = None
                if use_mmd and o.sum() > 0:
                    clicked = np.flatnonzero(o)
                    shared = ad.stop_gradient(model.shared_embedding(batch.codes))
                    mmd_val = losses.mmd2(ad.take_rows(cvr_emb, clicked), shared, kernel)
                    term = config.alpha_mmd * mmd_val
                    loss3 = term if loss3 is None else loss3 + term
            if loss3 is not None:
                _check_finite(loss3, "cvr", diag)
                ad.backward(loss3, tape, cvr_params + emb_params)
                opt_cvr.step()
                if opt_emb:
                    opt_emb.step()

            m = batch.size
            vals = [ctr_loss.item(), imp_loss.item(),
                    0.0 if cvr_loss is None else cvr_loss.item(),
                    0.0 if mmd_val is None else mmd_val.item()]
            sums[:4] += np.array(vals) * m
            n_seen += m
        means = sums[:4] / n_seen
        report.epoch_losses.append(_epoch_row(epoch, *means, config=config, use_mmd=use_mmd))
        diagnostics()
    report.clamp_events = counter.get("clamp_events", 0)
    report.config_hash = config_hash(model.config, config)
    if true_conversion is not None or dataset.click.any():
        evaluate(model, dataset, true_conversion, report)
    return report


def _cvr_objective(config: TrainConfig, errors: ad.Tensor, o, p_hat, e_hat):
    errors = ad.reshape(errors, (-1,))
    if config.cvr_estimator == "pvdr":
        return losses.pvdr(errors, o, p_hat, config.lam)
    if config.cvr_estimator == "naive":
        return losses.naive(errors, o)
    return losses.dr(errors, e_hat, o, p_hat)


def _full_losses(model: EgeanModel, dataset: Dataset, config: TrainConfig, kernel, use_mmd):
    """Epoch-0 loss values evaluated with the untrained stage-2 parameters."""
    with ad.no_tape():
        pred = model.predict(dataset.codes)
        o = dataset.click.astype(np.float64)
        p_hat = np.maximum(pred["ctr_prob"], 1e-6)
        ctr_loss = float(np.mean(ce_delta(o, pred["ctr_prob"])))
        errors = np.where(o == 1, ce_delta(dataset.conversion, pred["cvr_prob"]), 0.0)
        imp = float((o * (pred["imputed_error"] - errors) ** 2 / p_hat).mean())
        cvr = _cvr_objective(config, ad.Tensor(ce_delta(dataset.conversion, pred["cvr_prob"])), o, p_hat,
                             pred["imputed_error"])
    probe = probe_subset(dataset, config.probe_size, config.seed)
    mmd_val = mmd_on(model, probe, kernel) if use_mmd else 0.0
    return ctr_loss, imp, 0.0 if cvr is None else cvr.item(), mmd_val, config, use_mmd


def _epoch_row(epoch, ctr_loss, imp_loss, cvr_loss, mmd_val, config: TrainConfig, use_mmd: bool) -> dict:
    total = (config.w_ctr * ctr_loss + config.w_imp * imp_loss + config.w_cvr * cvr_loss
             + (config.alpha_mmd * mmd_val if use_mmd else 0.0))
    return {"epoch": epoch, "ctr_loss": float(ctr_loss), "imputation_loss": float(imp_loss),
            "cvr_loss": float(cvr_loss), "mmd": float(mmd_val), "total": float(total)}


def train(model: EgeanModel, dataset: Dataset, config: TrainConfig,
          true_conversion: Optional[np.ndarray] = None) -> MetricsReport:
    """Run both stages (stage 1 only when the exposure network is enabled)."""
    report = pretrain_exposure(model, dataset, config)
    return finetune_multitask(model, dataset, config, true_conversion, report)


# ---------------------------------------------------------------------------
# export


def export_embeddings(model: EgeanModel, dataset: Dataset, prefix) -> List[str]:
    """Write ``<prefix>_shared.csv`` and ``<prefix>_cvr.csv``: sample id, click, embedding."""
    pred = model.predict(dataset.codes)
    paths = []
    for variant, key in (("shared", "shared_embeddings"), ("cvr", "cvr_embeddings")):
        path = f"{prefix}_{variant}.csv"
        emb = pred[key]
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["sample_id", "click", *(f"e{k}" for k in range(emb.shape[1]))])
            for i in range(emb.shape[0]):
                writer.writerow([i, int(dataset.click[i]), *(repr(float(v)) for v in emb[i])])
        paths.append(path)
    return paths


def read_embeddings(path):
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))[1:]
    ids = np.array([int(r[0]) for r in rows])
    clicks = np.array([int(r[1]) for r in rows])
    values = np.array([[float(x) for x in r[2:]] for r in rows])
    return ids, clicks, values


__all__ = [
    "TrainConfig", "MetricsReport", "NumericAbort", "UndefinedMetricError", "auc", "evaluate",
    "pretrain_exposure", "finetune_multitask", "train", "export_embeddings", "read_embeddings",
    "config_hash", "steady_state_on", "mmd_on",
]
