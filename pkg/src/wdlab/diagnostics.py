"""Instruments that turn a training run into mechanism measurements.

Per-epoch quantities: losses and accuracies, per-layer weight norms and the
effective learning rate eta / ||theta_l||^2 of each layer, the mean squared
input-output Jacobian norm, metric norms of the weights, and normalized
per-layer curvature traces.  A norm-transfer transform rescales layers of one
run to match another run's recorded norms — legitimate only on BN-covered
layers, where it leaves the function untouched.

Records serialize to one CSV per run, every float written with 17
significant digits so the file round-trips bit-exactly.
"""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass, field

import numpy as np

from . import curvature, loss, nn
from .errors import ContractError, DegenerateError, DomainError, ShapeError


def effective_lr(eta: float, layer_norm: float) -> float:
    """Step size experienced by a scale-invariant layer's direction."""
    if layer_norm <= 0:
        raise DegenerateError(f"layer norm must be positive, got {layer_norm}")
    return eta / layer_norm**2


def jacobian_frob_norm(
    spec: nn.NetworkSpec,
    params: nn.NetworkParams,
    x,
    bn_state: nn.BnState | None = None,
) -> float:
    """Mean over examples of the squared Frobenius norm of d logits / d input
    (eval-mode BN)."""
    xm = np.asarray(x, dtype=np.float64)
    if xm.ndim == 1:
        xm = xm[None, :]
    if xm.shape[0] == 0:
        raise DegenerateError("need at least one evaluation example")
    total = 0.0
    for row in xm:
        jac = nn.input_jacobian(spec, params, row, bn_state=bn_state)
        total += float(np.sum(jac * jac))
    return total / xm.shape[0]


def norm_transfer(
    spec: nn.NetworkSpec,
    params: nn.NetworkParams,
    reference_norms,
    mask,
    strict: bool = True,
) -> nn.NetworkParams:
    """Rescale masked layers so their weight norms match `reference_norms`.

    Masked layers must be BN-covered — rescaling any other layer changes the
    function.  `strict=False` downgrades that violation to a proceed-anyway
    mode for replication experiments.
    """
    refs = np.asarray(reference_norms, dtype=np.float64)
    mask = tuple(bool(b) for b in mask)
    n_layers = len(params.weights)
    if refs.shape != (n_layers,) or len(mask) != n_layers:
        raise ShapeError(
            f"need one reference norm and one mask flag per layer ({n_layers}), "
            f"got {refs.shape} and {len(mask)}"
        )
    out = params.copy()
    for l in range(n_layers):
        if not mask[l]:
            continue
        if strict and not spec.bn_at(l):
            raise ContractError(
                f"layer {l} is not BN-covered; rescaling it changes the function "
                "(pass strict=False to do it anyway)"
            )
        if refs[l] <= 0:
            raise DomainError(f"reference norm for layer {l} must be positive, got {refs[l]}")
        current = float(np.linalg.norm(out.weights[l]))
        if current == 0.0:
            raise DegenerateError(f"layer {l} has zero norm; its direction is undefined")
        out.weights[l] = out.weights[l] * (refs[l] / current)
    return out


def generalization_gap(train_loss: float, test_loss: float) -> float:
    return float(test_loss) - float(train_loss)


def evaluate(
    spec: nn.NetworkSpec,
    params: nn.NetworkParams,
    x,
    targets,
    loss_kind: str = loss.CROSS_ENTROPY,
    bn_state: nn.BnState | None = None,
) -> tuple[float, float]:
    """(mean loss, accuracy) on a dataset, eval-mode BN.

    Accuracy compares argmax logits with the labels (or, for vector targets,
    with the targets' argmax).
    """
    logits, _ = nn.forward(spec, params, x, mode="eval", bn_state=bn_state)
    value, _ = loss.loss_and_grad(loss_kind, logits, targets)
    pred = np.argmax(logits, axis=1)
    t = np.asarray(targets)
    truth = t if t.ndim == 1 else np.argmax(t, axis=1)
    acc = float(np.mean(pred == truth))
    return value, acc


# --- metric records ---------------------------------------------------------


@dataclass
class MetricRecord:
    """Everything measured at one epoch boundary."""

    epoch: int
    train_loss: float
    train_acc: float
    test_loss: float
    test_acc: float
    gen_gap: float
    jacobian_norm: float
    gn_norm: float
    kfac_gn_norm: float
    layer_norms: tuple[float, ...]
    effective_lrs: tuple[float, ...]
    fisher_traces: dict[int, float] = field(default_factory=dict)
    gn_traces: dict[int, float] = field(default_factory=dict)

    def __post_init__(self):
        for name in ("train_acc", "test_acc"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise DomainError(f"{name} must lie in [0, 1], got {v}")
        for n in self.layer_norms:
            if n < 0:
                raise DomainError(f"layer norms must be nonnegative, got {n}")


def record_metrics(
    epoch: int,
    spec: nn.NetworkSpec,
    params: nn.NetworkParams,
    eta: float,
    train_eval: tuple,
    test_eval: tuple,
    loss_kind: str = loss.CROSS_ENTROPY,
    bn_state: nn.BnState | None = None,
    probe_x=None,
    trace_x=None,
    trace_layers: tuple[int, ...] = (),
    log: "MetricLog | None" = None,
) -> MetricRecord:
    """Measure one epoch.  `probe_x` feeds the Jacobian and metric norms
    (skipped as NaN when absent); `trace_x`/`trace_layers` select the
    normalized-trace probes.  When `log` is given the record is appended."""
    train_loss, train_acc = evaluate(spec, params, *train_eval, loss_kind=loss_kind, bn_state=bn_state)
    test_loss, test_acc = evaluate(spec, params, *test_eval, loss_kind=loss_kind, bn_state=bn_state)
    norms = tuple(float(v) for v in nn.layer_norms(params))
    eff = tuple(effective_lr(eta, v) for v in norms)

    jac = float("nan")
    gnn = float("nan")
    kfac_gnn = float("nan")
    if probe_x is not None:
        jac = jacobian_frob_norm(spec, params, probe_x, bn_state=bn_state)
        kfac_gnn = curvature.kfac_gn_norm(spec, params, probe_x)
        if not spec.use_bias:
            gnn = curvature.gn_norm(spec, params, probe_x)

    fisher_traces: dict[int, float] = {}
    gn_traces: dict[int, float] = {}
    if trace_x is not None:
        for l in trace_layers:
            gn_traces[l] = curvature.normalized_trace("gn", spec, params, trace_x, l)
            if loss_kind == loss.CROSS_ENTROPY:
                fisher_traces[l] = curvature.normalized_trace("fisher", spec, params, trace_x, l)

    record = MetricRecord(
        epoch=int(epoch),
        train_loss=train_loss,
        train_acc=train_acc,
        test_loss=test_loss,
        test_acc=test_acc,
        gen_gap=generalization_gap(train_loss, test_loss),
        jacobian_norm=jac,
        gn_norm=gnn,
        kfac_gn_norm=kfac_gnn,
        layer_norms=norms,
        effective_lrs=eff,
        fisher_traces=fisher_traces,
        gn_traces=gn_traces,
    )
    if log is not None:
        log.append(record)
    return record


_SCALAR_FIELDS = (
    "train_loss",
    "train_acc",
    "test_loss",
    "test_acc",
    "gen_gap",
    "jacobian_norm",
    "gn_norm",
    "kfac_gn_norm",
)


def _fmt(v: float) -> str:
    return format(float(v), ".17g")


class MetricLog:
    """Append-only CSV metric log, one row per epoch record.

    The header is derived from the first record; every later record must
    carry the same layer count and trace layers.
    """

    def __init__(self, path):
        self.path = os.fspath(path)
        self._header: list[str] | None = None
        if os.path.exists(self.path) and os.path.getsize(self.path) > 0:
            with open(self.path, newline="") as fh:
                self._header = next(csv.reader(fh))

    def _build_header(self, record: MetricRecord) -> list[str]:
        cols = ["epoch", *_SCALAR_FIELDS]
        cols += [f"layer_norm_{l}" for l in range(len(record.layer_norms))]
        cols += [f"eff_lr_{l}" for l in range(len(record.effective_lrs))]
        cols += [f"fisher_trace_{l}" for l in sorted(record.fisher_traces)]
        cols += [f"gn_trace_{l}" for l in sorted(record.gn_traces)]
        return cols

    def _row(self, record: MetricRecord) -> list[str]:
        row = [str(record.epoch)]
        row += [_fmt(getattr(record, name)) for name in _SCALAR_FIELDS]
        row += [_fmt(v) for v in record.layer_norms]
        row += [_fmt(v) for v in record.effective_lrs]
        row += [_fmt(record.fisher_traces[l]) for l in sorted(record.fisher_traces)]
        row += [_fmt(record.gn_traces[l]) for l in sorted(record.gn_traces)]
        return row

    def append(self, record: MetricRecord) -> None:
        header = self._build_header(record)
        new_file = self._header is None
        if not new_file and header != self._header:
            raise ShapeError("record layout does not match the log's existing header")
        with open(self.path, "a", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            if new_file:
                writer.writerow(header)
                self._header = header
            writer.writerow(self._row(record))


def load_metrics(path) -> list[MetricRecord]:
    """Parse a metric CSV back into records (exact float round-trip)."""
    with open(path, newline="") as fh:
        header = next(csv.reader(fh))
    idx = {name: i for i, name in enumerate(header)}
    layer_cols = sorted(
        (int(c.rsplit("_", 1)[1]) for c in header if c.startswith("layer_norm_"))
    )
    fisher_cols = sorted(
        (int(c.rsplit("_", 1)[1]) for c in header if c.startswith("fisher_trace_"))
    )
    gn_cols = sorted((int(c.rsplit("_", 1)[1]) for c in header if c.startswith("gn_trace_")))
    records = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        next(reader)
        for row in reader:
            records.append(
                MetricRecord(
                    epoch=int(row[idx["epoch"]]),
                    **{name: float(row[idx[name]]) for name in _SCALAR_FIELDS},
                    layer_norms=tuple(float(row[idx[f"layer_norm_{l}"]]) for l in layer_cols),
                    effective_lrs=tuple(float(row[idx[f"eff_lr_{l}"]]) for l in layer_cols),
                    fisher_traces={l: float(row[idx[f"fisher_trace_{l}"]]) for l in fisher_cols},
                    gn_traces={l: float(row[idx[f"gn_trace_{l}"]]) for l in gn_cols},
                )
            )
    return records
