"""Curvature matrices of small networks, dense and Kronecker-factored.

Dense constructions (Fisher, Gauss-Newton, generalized Gauss-Newton) assemble
P x P matrices over the canonical parameter flattening from exact per-example
Jacobians; they are the oracles everything cheaper is tested against.  The
Kronecker side estimates per-layer factors A_l = E[a a^T] and
S_l = E[g g^T] whose product S_l (x) A_l approximates the layer-diagonal
curvature block, exactly so for linear networks.

Metric norms ||theta||^2_G and their block-diagonal counterparts are computed
through per-layer quadratic forms rather than dense matrices, which keeps
them cheap enough to log every epoch.

All expectations are over the supplied batch.  Networks with batch norm are
differentiated in train mode, through the batch statistics, with one seeded
backward pass per example and output — that is what makes the per-layer
curvature exactly compensate a rescaling of any normalized layer.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import linalg, loss, nn
from .errors import CapacityError, ContractError, DegenerateError, DomainError, ShapeError

FISHER_SAMPLED = "fisher_sampled"
FISHER_EXACT = "fisher_exact"
GAUSS_NEWTON = "gauss_newton"
GENERALIZED_GN = "generalized_gn"
CURVATURE_KINDS = (FISHER_SAMPLED, FISHER_EXACT, GAUSS_NEWTON, GENERALIZED_GN)

PARAM_CAP = 20000
CLASS_CAP = 16


def _curvature_mode(spec: nn.NetworkSpec) -> str:
    return "train" if spec.has_bn else "eval"


def _per_example_flat_grads(spec: nn.NetworkSpec, trace, result) -> np.ndarray:
    """Per-example flattened parameter gradients from one batched backward.

    Valid only when examples do not couple (no train-mode BN): the gradient of
    example i's contribution with respect to W_l is the outer product of its
    s-gradient row and its input row.
    """
    n = trace.layer_inputs[0].shape[0]
    parts = []
    for l in range(spec.n_layers):
        g = result.s_grads[l]
        a = trace.layer_inputs[l]
        parts.append(np.einsum("no,ni->noi", g, a).reshape(n, -1))
        if spec.use_bias:
            parts.append(g)
    return np.concatenate(parts, axis=1)


def per_example_param_jacobians(
    spec: nn.NetworkSpec,
    params: nn.NetworkParams,
    x,
    cap: int = PARAM_CAP,
) -> tuple[np.ndarray, np.ndarray]:
    """Exact per-example output/parameter Jacobians: (logits, n x k x P).

    Without BN the k output seeds are batched (k backward passes); with BN the
    forward runs in train mode and every (example, output) pair is seeded
    separately so the Jacobian includes each example's influence on the batch
    statistics.
    """
    if spec.n_params > cap:
        raise CapacityError(f"{spec.n_params} parameters exceed the cap of {cap}")
    xm = np.asarray(x, dtype=np.float64)
    mode = _curvature_mode(spec)
    logits, trace = nn.forward(spec, params, xm, mode=mode)
    n, k = logits.shape
    jac = np.zeros((n, k, spec.n_params))
    if spec.has_bn:
        for i in range(n):
            for c in range(k):
                seed = np.zeros((n, k))
                seed[i, c] = 1.0
                jac[i, c] = nn.flatten_grads(spec, nn.backward(spec, params, trace, seed))
    else:
        seed = np.zeros((n, k))
        for c in range(k):
            seed[:] = 0.0
            seed[:, c] = 1.0
            result = nn.backward(spec, params, trace, seed)
            jac[:, c, :] = _per_example_flat_grads(spec, trace, result)
    return logits, jac


def dense_curvature(
    kind: str,
    spec: nn.NetworkSpec,
    params: nn.NetworkParams,
    x,
    loss_kind: str = loss.CROSS_ENTROPY,
    rng: np.random.Generator | None = None,
    cap: int = PARAM_CAP,
    class_cap: int = CLASS_CAP,
) -> np.ndarray:
    """Dense P x P curvature over the canonical flattening, batch-averaged.

    gauss_newton:    E[J^T J]
    generalized_gn:  E[J^T H J] with H the output-layer loss Hessian
    fisher_exact:    E_x sum_y p(y|x) grad log p(y|x) grad log p(y|x)^T,
                     summing classes for cross-entropy and integrating the
                     unit-variance Gaussian analytically for squared error
    fisher_sampled:  the Monte Carlo version with one model-sampled target
                     per example (requires rng)
    """
    if kind not in CURVATURE_KINDS:
        raise DomainError(f"unknown curvature kind {kind!r}")
    if loss_kind not in loss.LOSS_KINDS:
        raise DomainError(f"unknown loss kind {loss_kind!r}")
    if kind == FISHER_SAMPLED and rng is None:
        raise DomainError("fisher_sampled needs an rng for target sampling")
    logits, jac = per_example_param_jacobians(spec, params, x, cap=cap)
    n, k, p_count = jac.shape

    if kind == GAUSS_NEWTON:
        c = np.einsum("nkp,nkq->pq", jac, jac, optimize=True) / n
    elif kind == GENERALIZED_GN:
        hess = np.stack([loss.output_hessian(loss_kind, z) for z in logits])
        c = np.einsum("nkp,nkl,nlq->pq", jac, hess, jac, optimize=True) / n
    elif kind == FISHER_EXACT:
        if loss_kind == loss.CROSS_ENTROPY:
            if k > class_cap:
                raise CapacityError(f"fisher_exact sums over {k} classes, cap is {class_cap}")
            probs = loss.softmax(logits)
            eye = np.eye(k)
            c = np.zeros((p_count, p_count))
            for y in range(k):
                g = np.einsum("nkp,nk->np", jac, eye[y] - probs, optimize=True)
                c += (g * probs[:, y, None]).T @ g
            c /= n
        else:
            # unit-variance Gaussian model: the target integral leaves one
            # outer product per output coordinate
            c = np.zeros((p_count, p_count))
            for j in range(k):
                c += jac[:, j, :].T @ jac[:, j, :]
            c /= n
    else:  # FISHER_SAMPLED
        if loss_kind == loss.CROSS_ENTROPY:
            probs = loss.softmax(logits)
            y = loss.sample_targets(probs, rng)
            resid = np.eye(k)[y] - probs
        else:
            resid = rng.normal(size=(n, k))
        g = np.einsum("nkp,nk->np", jac, resid, optimize=True)
        c = g.T @ g / n
    return (c + c.T) / 2.0


# --- Kronecker factors ------------------------------------------------------


@dataclass
class KfacFactors:
    """Per-layer Kronecker factors with their (possibly stale) inverses.

    a_factors[l] is the input second moment of layer l (with a trailing
    homogeneous coordinate when the network has biases); s_factors[l] the
    pre-activation-gradient second moment.  Eigendecompositions are captured
    at inversion time and reused until the next inversion, so the applied
    preconditioner is deliberately stale between refreshes.
    """

    a_factors: list[np.ndarray]
    s_factors: list[np.ndarray]
    a_eigs: list[linalg.SymmetricEigen] | None = None
    s_eigs: list[linalg.SymmetricEigen] | None = None
    lam: float | None = None
    damping_mode: str | None = None
    steps_since_inversion: int = 0

    @staticmethod
    def zeros(spec: nn.NetworkSpec) -> "KfacFactors":
        a_factors, s_factors = [], []
        for l in range(spec.n_layers):
            out, inp = spec.weight_shape(l)
            side = inp + (1 if spec.use_bias else 0)
            a_factors.append(np.zeros((side, side)))
            s_factors.append(np.zeros((out, out)))
        return KfacFactors(a_factors=a_factors, s_factors=s_factors)


def _augment_inputs(spec: nn.NetworkSpec, a: np.ndarray) -> np.ndarray:
    if spec.use_bias:
        return np.hstack([a, np.ones((a.shape[0], 1))])
    return a


def estimate_kfac_factors(
    metric: str,
    spec: nn.NetworkSpec,
    params: nn.NetworkParams,
    x,
    loss_kind: str = loss.CROSS_ENTROPY,
    rng: np.random.Generator | None = None,
) -> list[tuple[np.ndarray, np.ndarray]]:
    """Batch estimates of (A_l, S_l) for every layer.

    A_l is the second moment of the layer inputs.  S_l under the "fisher"
    metric is the second moment of back-propagated loss gradients at
    model-sampled targets (per example, no 1/n); under "gn" it sums k
    output-seeded backward passes.  BN networks use the ordinary batched
    backward here — these are running-statistic estimates, not oracles.
    """
    if metric not in ("fisher", "gn"):
        raise DomainError(f"metric must be 'fisher' or 'gn', got {metric!r}")
    if metric == "fisher" and rng is None:
        raise DomainError("fisher factors need an rng for target sampling")
    xm = np.asarray(x, dtype=np.float64)
    logits, trace = nn.forward(spec, params, xm, mode="train")
    n, k = logits.shape
    a_list = [_augment_inputs(spec, a) for a in trace.layer_inputs]
    s_sums = [np.zeros((spec.layer_dims[l + 1], spec.layer_dims[l + 1])) for l in range(spec.n_layers)]

    if metric == "gn":
        seed = np.zeros((n, k))
        for c in range(k):
            seed[:] = 0.0
            seed[:, c] = 1.0
            result = nn.backward(spec, params, trace, seed)
            for l in range(spec.n_layers):
                g = result.s_grads[l]
                s_sums[l] += g.T @ g
    else:
        if loss_kind == loss.CROSS_ENTROPY:
            probs = loss.softmax(logits)
            y = loss.sample_targets(probs, rng)
            seed = probs - np.eye(k)[y]
        elif loss_kind == loss.SQUARED_ERROR:
            seed = rng.normal(size=(n, k))
        else:
            raise DomainError(f"unknown loss kind {loss_kind!r}")
        result = nn.backward(spec, params, trace, seed)
        for l in range(spec.n_layers):
            g = result.s_grads[l]
            s_sums[l] += g.T @ g

    return [(a.T @ a / n, s / n) for a, s in zip(a_list, s_sums)]


def update_factors_ema(
    state: KfacFactors,
    fresh: list[tuple[np.ndarray, np.ndarray]],
    decay: float,
) -> KfacFactors:
    """factor <- decay * factor + (1 - decay) * fresh, in place.

    Stored inverses are left untouched: staleness between refreshes is part
    of the update scheme, not an accident.
    """
    if not 0.0 <= decay < 1.0:
        raise DomainError(f"decay must be in [0, 1), got {decay}")
    if len(fresh) != len(state.a_factors):
        raise ShapeError(f"{len(fresh)} fresh factor pairs for {len(state.a_factors)} layers")
    for l, (a_new, s_new) in enumerate(fresh):
        if a_new.shape != state.a_factors[l].shape or s_new.shape != state.s_factors[l].shape:
            raise ShapeError(
                f"layer {l}: fresh factor shapes {a_new.shape}/{s_new.shape} do not match "
                f"state {state.a_factors[l].shape}/{state.s_factors[l].shape}"
            )
        state.a_factors[l] = decay * state.a_factors[l] + (1.0 - decay) * a_new
        state.s_factors[l] = decay * state.s_factors[l] + (1.0 - decay) * s_new
    return state


def invert_factors(state: KfacFactors, lam: float, damping: str = "factored") -> KfacFactors:
    """Capture eigendecompositions of the current factors for preconditioning."""
    if lam <= 0.0:
        raise DomainError(f"damping must be positive, got {lam}")
    if damping not in ("factored", "dense"):
        raise DomainError(f"unknown damping mode {damping!r}")
    state.a_eigs = [linalg.sym_eig(a) for a in state.a_factors]
    state.s_eigs = [linalg.sym_eig(s) for s in state.s_factors]
    state.lam = lam
    state.damping_mode = damping
    state.steps_since_inversion = 0
    return state


def apply_preconditioner(state: KfacFactors, layer: int, grad_matrix) -> np.ndarray:
    """Apply the stored damped inverse of S_l (x) A_l to a layer gradient.

    `grad_matrix` is out x in(+1), laid out like the weight matrix (with the
    bias gradient as a trailing column when present).  Factored damping
    computes (S + sqrt(lam) I)^-1 V (A + sqrt(lam) I)^-1; dense damping
    inverts S (x) A + lam I through the factors' eigenbases.
    """
    if state.a_eigs is None or state.s_eigs is None:
        raise ContractError("factors have not been inverted yet")
    v = np.asarray(grad_matrix, dtype=np.float64)
    ea = state.a_eigs[layer]
    es = state.s_eigs[layer]
    if v.shape != (es.eigenvalues.size, ea.eigenvalues.size):
        raise ShapeError(
            f"layer {layer}: gradient shape {v.shape} does not match factors "
            f"({es.eigenvalues.size} x {ea.eigenvalues.size})"
        )
    if state.damping_mode == "factored":
        root = np.sqrt(state.lam)
        left = (es.eigenvectors / (es.eigenvalues + root)) @ es.eigenvectors.T
        right = (ea.eigenvectors / (ea.eigenvalues + root)) @ ea.eigenvectors.T
        return left @ v @ right
    core = es.eigenvectors.T @ v @ ea.eigenvectors
    denom = np.outer(es.eigenvalues, ea.eigenvalues) + state.lam
    return es.eigenvectors @ (core / denom) @ ea.eigenvectors.T


# --- metric norms -----------------------------------------------------------


def gn_norm(spec: nn.NetworkSpec, params: nn.NetworkParams, x) -> float:
    """theta^T G theta for bias-free piecewise-linear nets, evaluated as
    (L+1)^2 * mean ||f(x)||^2 — the positive-homogeneity shortcut."""
    if spec.use_bias:
        raise ContractError("the output-norm identity requires a bias-free network")
    logits, _ = nn.forward(spec, params, x, mode="eval")
    depth_plus_1 = spec.n_layers
    return float(depth_plus_1**2 * np.mean(np.sum(logits * logits, axis=1)))


def kfac_gn_norm(spec: nn.NetworkSpec, params: nn.NetworkParams, x) -> float:
    """sum_l theta_l^T G_ll theta_l via exact per-layer quadratic forms.

    Each layer's quadratic form reduces to <dL/ds_l, s_l>^2 because s_l is
    linear in that layer's own parameters; k seeded backward passes cover the
    outputs (eval-mode BN, so examples stay uncoupled).
    """
    xm = np.asarray(x, dtype=np.float64)
    logits, trace = nn.forward(spec, params, xm, mode="eval")
    n, k = logits.shape
    total = 0.0
    seed = np.zeros((n, k))
    for c in range(k):
        seed[:] = 0.0
        seed[:, c] = 1.0
        result = nn.backward(spec, params, trace, seed)
        for l in range(spec.n_layers):
            dots = np.sum(result.s_grads[l] * trace.pre_activations[l], axis=1)
            total += float(np.sum(dots * dots))
    return total / n


def gn_norm_gradient(
    spec: nn.NetworkSpec,
    params: nn.NetworkParams,
    x,
    cap: int = PARAM_CAP,
) -> np.ndarray:
    """Gradient of theta^T G theta with G frozen: 2 (L+1) G theta, flattened."""
    if spec.use_bias:
        raise ContractError("the metric-norm gradient identity requires a bias-free network")
    g = dense_curvature(GAUSS_NEWTON, spec, params, x, cap=cap)
    theta = nn.flatten_params(spec, params)
    return 2.0 * spec.n_layers * (g @ theta)


def normalized_trace(
    kind: str,
    spec: nn.NetworkSpec,
    params: nn.NetworkParams,
    x,
    layer: int,
    rng: np.random.Generator | None = None,
    loss_kind: str = loss.CROSS_ENTROPY,
    class_cap: int = CLASS_CAP,
) -> float:
    """Trace of the layer's curvature block at normalized weights.

    Computed as ||theta_l||^2 * tr(C_ll) at the current weights, which equals
    the trace at theta_l / ||theta_l|| by the inverse-square scaling of
    curvature under layer rescaling — no re-evaluation at rescaled weights.
    "fisher" sums classes exactly (cross-entropy); "gn" seeds each output.
    BN networks are differentiated in train mode per example, so the result
    is invariant to rescaling a normalized layer.
    """
    if kind not in ("fisher", "gn"):
        raise DomainError(f"kind must be 'fisher' or 'gn', got {kind!r}")
    if not 0 <= layer < spec.n_layers:
        raise ShapeError(f"no layer {layer} in a {spec.n_layers}-layer network")
    norm_sq = float(np.sum(params.weights[layer] ** 2))
    if spec.use_bias:
        norm_sq += float(np.sum(params.biases[layer] ** 2))
    if norm_sq == 0.0:
        raise DegenerateError(f"layer {layer} has zero norm; its direction is undefined")

    xm = np.asarray(x, dtype=np.float64)
    mode = _curvature_mode(spec)
    logits, trace = nn.forward(spec, params, xm, mode=mode)
    n, k = logits.shape
    if kind == "fisher":
        if loss_kind != loss.CROSS_ENTROPY:
            raise DomainError("the fisher trace is defined here for cross-entropy only")
        if k > class_cap:
            raise CapacityError(f"fisher trace sums over {k} classes, cap is {class_cap}")
        probs = loss.softmax(logits)
    eye = np.eye(k)

    trace_raw = 0.0
    if spec.has_bn:
        for i in range(n):
            for c in range(k):
                seed = np.zeros((n, k))
                if kind == "gn":
                    seed[i, c] = 1.0
                    weight = 1.0
                else:
                    seed[i] = eye[c] - probs[i]
                    weight = float(probs[i, c])
                result = nn.backward(spec, params, trace, seed)
                ssq = float(np.sum(result.weight_grads[layer] ** 2))
                if spec.use_bias:
                    ssq += float(np.sum(result.bias_grads[layer] ** 2))
                trace_raw += weight * ssq
        trace_raw /= n
    else:
        a = trace.layer_inputs[layer]
        a_sq = np.sum(a * a, axis=1) + (1.0 if spec.use_bias else 0.0)
        for c in range(k):
            if kind == "gn":
                seed = np.zeros((n, k))
                seed[:, c] = 1.0
                weights = np.ones(n)
            else:
                seed = eye[c][None, :] - probs
                weights = probs[:, c]
            result = nn.backward(spec, params, trace, seed)
            g_sq = np.sum(result.s_grads[layer] ** 2, axis=1)
            trace_raw += float(np.sum(weights * g_sq * a_sq))
        trace_raw /= n
    return norm_sq * trace_raw
