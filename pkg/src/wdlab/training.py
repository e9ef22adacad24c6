"""Training loops, grid search, and run persistence.

A run is fully determined by its config: every RNG (init, shuffles, sampled
targets) is derived from the config seed, so repeating a run reproduces the
metric CSV byte for byte.  Each run directory receives the resolved config,
a metrics.csv, and a final checkpoint.
"""

from __future__ import annotations

import dataclasses
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

import numpy as np

from . import config as config_mod
from . import data, diagnostics, loss, nn, optim
from .errors import DomainError, TrainingDiverged


@dataclass
class NormTransferPlan:
    """End-of-epoch norm targets for the transfer arm: rescale masked layers
    to the reference run's recorded norms for that epoch."""

    mask: tuple[bool, ...]
    norms_by_epoch: np.ndarray  # (epochs+1, n_layers); row e applied after epoch e

    def __post_init__(self):
        self.norms_by_epoch = np.asarray(self.norms_by_epoch, dtype=np.float64)


@dataclass
class RunResult:
    config: config_mod.ExperimentConfig
    spec: nn.NetworkSpec
    params: nn.NetworkParams
    bn_state: nn.BnState | None
    records: list[diagnostics.MetricRecord]
    out_dir: str
    metrics_path: str
    checkpoint_path: str

    @property
    def final(self) -> diagnostics.MetricRecord:
        return self.records[-1]


def build_dataset(cfg: config_mod.ExperimentConfig) -> data.Dataset:
    """Materialize the configured dataset with its train/val/test split."""
    total = cfg.n_train + cfg.n_val + cfg.n_test
    if cfg.dataset == "mnist":
        ds = data.load_mnist(cfg.mnist_images, cfg.mnist_labels)
        if cfg.whiten_inputs:
            ds = data.Dataset(x=data.whiten(ds.x), y=ds.y, n_classes=ds.n_classes)
    else:
        ds = data.gen_synthetic(
            total,
            cfg.layer_dims[0],
            cfg.layer_dims[-1],
            seed=cfg.seed,
            whiten_inputs=cfg.whiten_inputs,
        )
    return data.make_splits(ds, cfg.n_train, cfg.n_val, cfg.n_test, seed=cfg.seed)


def make_optimizer(cfg: config_mod.ExperimentConfig):
    if cfg.optimizer == "sgd":
        return optim.SgdState(eta=cfg.eta, schedule=cfg.schedule, momentum=cfg.momentum)
    if cfg.optimizer == "adam":
        return optim.AdamState(eta=cfg.eta, schedule=cfg.schedule)
    metric = "fisher" if cfg.optimizer == "kfac_fisher" else "gn"
    rng = np.random.default_rng([cfg.seed, 0xF1]) if metric == "fisher" else None
    return optim.KfacState(
        metric=metric,
        eta=cfg.eta,
        lam=cfg.lam,
        schedule=cfg.schedule,
        t_stats=cfg.stats_every,
        t_inv=cfg.invert_every,
        factor_decay=cfg.factor_decay,
        damping_mode=cfg.damping,
        rng=rng,
    )


def _minibatch_pass(spec, params, bn_state, opt_state, coupling, x, y):
    """One optimizer update on one minibatch; returns (params, batch loss)."""
    if isinstance(opt_state, optim.KfacState):
        # monitoring forward without bn_state: the step below owns the one
        # running-stats update for this batch
        logits, _ = nn.forward(spec, params, x, mode="train")
        value, _ = loss.loss_and_grad(loss.CROSS_ENTROPY, logits, y)
        new_params = optim.kfac_step(opt_state, spec, params, (x, y), coupling, bn_state=bn_state)
        return new_params, value
    logits, trace = nn.forward(spec, params, x, mode="train", bn_state=bn_state)
    value, dl = loss.loss_and_grad(loss.CROSS_ENTROPY, logits, y)
    grads = nn.backward(spec, params, trace, dl)
    if isinstance(opt_state, optim.SgdState):
        return optim.sgd_step(opt_state, params, grads, coupling), value
    return optim.adam_step(opt_state, params, grads, coupling), value


def train(
    cfg: config_mod.ExperimentConfig,
    dataset: data.Dataset | None = None,
    norm_plan: NormTransferPlan | None = None,
    merge_val: bool = False,
) -> RunResult:
    """Run the configured experiment end to end.

    `dataset` overrides the config's data source (used when several arms must
    share one sample).  `norm_plan` rescales masked layers to reference norms
    at every epoch boundary.  `merge_val` folds the validation split into
    training (grid-search retraining); the test split is never touched.
    """
    spec = cfg.network_spec()
    coupling = cfg.coupling_obj()
    if dataset is None:
        dataset = build_dataset(cfg)
    x_train, y_train = dataset.split("train")
    if merge_val:
        xv, yv = dataset.split("val")
        x_train = np.concatenate([x_train, xv])
        y_train = np.concatenate([y_train, yv])
    x_test, y_test = dataset.split("test")
    if x_test.shape[0] == 0:
        x_test, y_test = x_train, y_train
    probe_x = x_test[: cfg.probe_size] if cfg.probe_size > 0 else None
    trace_x = x_train[: cfg.trace_size] if cfg.trace_layers else None
    if norm_plan is not None and norm_plan.norms_by_epoch.shape != (
        cfg.epochs + 1,
        spec.n_layers,
    ):
        raise DomainError(
            f"norm plan needs shape {(cfg.epochs + 1, spec.n_layers)}, "
            f"got {norm_plan.norms_by_epoch.shape}"
        )

    rng = np.random.default_rng([cfg.seed, 0x1417])
    params = nn.init_params(spec, rng)
    bn_state = nn.BnState.fresh(spec) if spec.has_bn else None
    opt_state = make_optimizer(cfg)

    os.makedirs(cfg.out_dir, exist_ok=True)
    metrics_path = os.path.join(cfg.out_dir, "metrics.csv")
    if os.path.exists(metrics_path):
        os.remove(metrics_path)
    log = diagnostics.MetricLog(metrics_path)
    with open(os.path.join(cfg.out_dir, "config.ini"), "w") as fh:
        fh.write(config_mod.to_ini(cfg))

    def record(epoch):
        return diagnostics.record_metrics(
            epoch,
            spec,
            params,
            opt_state.eta,
            (x_train, y_train),
            (x_test, y_test),
            bn_state=bn_state,
            probe_x=probe_x,
            trace_x=trace_x,
            trace_layers=cfg.trace_layers,
            log=log,
        )

    records = [record(0)]
    n_train = x_train.shape[0]
    for epoch in range(1, cfg.epochs + 1):
        optim.apply_lr_schedule(opt_state, epoch - 1)
        perm = np.random.default_rng([cfg.seed, 0x5F, epoch]).permutation(n_train)
        for start in range(0, n_train, cfg.batch_size):
            batch = perm[start : start + cfg.batch_size]
            if spec.has_bn and batch.size < 2:
                continue  # train-mode BN needs at least two rows
            params, value = _minibatch_pass(
                spec, params, bn_state, opt_state, coupling,
                x_train[batch], y_train[batch],
            )
            if not np.isfinite(value):
                raise TrainingDiverged(
                    f"non-finite loss {value} at epoch {epoch}, batch offset {start}",
                    record={"epoch": epoch, "offset": start, "loss": value,
                            "eta": opt_state.eta, "beta": coupling.beta},
                )
        if norm_plan is not None:
            params = diagnostics.norm_transfer(
                spec, params, norm_plan.norms_by_epoch[epoch], norm_plan.mask
            )
        records.append(record(epoch))

    checkpoint_path = os.path.join(cfg.out_dir, "checkpoint.bin")
    nn.save_checkpoint(checkpoint_path, spec, params, cfg.seed, cfg.epochs, fmt="binary")
    return RunResult(
        config=cfg,
        spec=spec,
        params=params,
        bn_state=bn_state,
        records=records,
        out_dir=cfg.out_dir,
        metrics_path=metrics_path,
        checkpoint_path=checkpoint_path,
    )


# --- grid search ------------------------------------------------------------


@dataclass
class CellResult:
    eta: float
    beta: float
    status: str  # trained | rejected | diverged
    val_accuracy: float
    out_dir: str
    detail: str = ""


@dataclass
class GridResult:
    cells: list[CellResult]
    best: CellResult
    final: RunResult


def _cell_dir(base_out: str, eta: float, beta: float) -> str:
    return os.path.join(base_out, "cells", f"eta{eta:g}_beta{beta:g}")


def _run_cell(args) -> CellResult:
    cfg, eta, beta = args
    cell_cfg = dataclasses.replace(
        cfg, eta=eta, beta=beta, out_dir=_cell_dir(cfg.out_dir, eta, beta)
    )
    if eta * beta >= 1.0:
        return CellResult(eta, beta, "rejected", float("nan"), cell_cfg.out_dir,
                          detail="eta*beta >= 1 would flip the decayed weights")
    try:
        result = train(cell_cfg)
    except TrainingDiverged as exc:
        return CellResult(eta, beta, "diverged", float("nan"), cell_cfg.out_dir,
                          detail=str(exc))
    dataset = build_dataset(cell_cfg)
    x_val, y_val = dataset.split("val")
    if x_val.shape[0] == 0:
        raise DomainError("grid search needs a nonempty validation split")
    _, acc = diagnostics.evaluate(
        result.spec, result.params, x_val, y_val, bn_state=result.bn_state
    )
    return CellResult(eta, beta, "trained", acc, cell_cfg.out_dir)


def grid(
    base: config_mod.ExperimentConfig,
    etas,
    betas,
    jobs: int = 1,
) -> GridResult:
    """Train every (eta, beta) cell, pick the best validation accuracy
    (ties: smaller beta, then smaller eta), and retrain the winner on
    train+validation."""
    etas = [float(v) for v in etas]
    betas = [float(v) for v in betas]
    if not etas or not betas:
        raise DomainError("grid needs at least one eta and one beta")
    tasks = [(base, eta, beta) for eta in etas for beta in betas]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            cells = list(pool.map(_run_cell, tasks))
    else:
        cells = [_run_cell(t) for t in tasks]
    trained = [c for c in cells if c.status == "trained"]
    if not trained:
        raise DomainError("every grid cell was rejected or diverged")
    best = min(trained, key=lambda c: (-c.val_accuracy, c.beta, c.eta))
    winner_cfg = dataclasses.replace(
        base, eta=best.eta, beta=best.beta, out_dir=os.path.join(base.out_dir, "best")
    )
    final = train(winner_cfg, merge_val=True)
    return GridResult(cells=cells, best=best, final=final)
