"""Feed-forward network engine.

Fully-connected layers with ReLU or identity activation, optional batch
normalization on hidden pre-activations (never on the output layer), and an
optional bias term.  The forward pass captures every intermediate needed by
backprop and Kronecker-factor estimation; backward differentiates exactly,
including the batch statistics' dependence on the weights.

Conventions fixed here and relied on everywhere else:
  * weight matrices are out x in; s_l = a_l @ W_l.T (+ b_l),
  * "depth" counts weight layers minus one: a depth-L network has L+1 weight
    matrices, the output being layer L,
  * the canonical flattening of the parameter vector is, layer by layer,
    W_l.ravel(row-major) followed by b_l when biases are enabled.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import CapacityError, DataFormatError, DegenerateError, DomainError, ShapeError

RELU = "relu"
IDENTITY = "identity"


@dataclass(frozen=True)
class NetworkSpec:
    """Architecture: layer widths, activation, per-hidden-layer BN flags, bias."""

    layer_dims: tuple[int, ...]
    activation: str = RELU
    use_bn: tuple[bool, ...] = ()
    use_bias: bool = False

    def __post_init__(self):
        dims = tuple(int(d) for d in self.layer_dims)
        object.__setattr__(self, "layer_dims", dims)
        object.__setattr__(self, "use_bn", tuple(bool(b) for b in self.use_bn))
        if len(dims) < 2:
            raise ShapeError("need at least one weight layer (two entries in layer_dims)")
        if any(d < 1 for d in dims):
            raise ShapeError(f"layer dims must be positive, got {dims}")
        if self.activation not in (RELU, IDENTITY):
            raise DomainError(f"unknown activation {self.activation!r}")
        if len(self.use_bn) != self.n_hidden:
            raise ShapeError(
                f"use_bn must have one flag per hidden layer ({self.n_hidden}), "
                f"got {len(self.use_bn)}"
            )

    @property
    def n_layers(self) -> int:
        """Number of weight layers (L + 1)."""
        return len(self.layer_dims) - 1

    @property
    def n_hidden(self) -> int:
        return self.n_layers - 1

    @property
    def depth(self) -> int:
        """L: weight layers minus one."""
        return self.n_layers - 1

    @property
    def input_dim(self) -> int:
        return self.layer_dims[0]

    @property
    def output_dim(self) -> int:
        return self.layer_dims[-1]

    @property
    def has_bn(self) -> bool:
        return any(self.use_bn)

    def bn_at(self, layer: int) -> bool:
        """True when layer `layer`'s pre-activation is batch-normalized."""
        return layer < self.n_hidden and self.use_bn[layer]

    def weight_shape(self, layer: int) -> tuple[int, int]:
        return (self.layer_dims[layer + 1], self.layer_dims[layer])

    @property
    def n_params(self) -> int:
        total = 0
        for l in range(self.n_layers):
            out, inp = self.weight_shape(l)
            total += out * inp + (out if self.use_bias else 0)
        return total

    def to_dict(self) -> dict:
        return {
            "layer_dims": list(self.layer_dims),
            "activation": self.activation,
            "use_bn": list(self.use_bn),
            "use_bias": self.use_bias,
        }

    @staticmethod
    def from_dict(d: dict) -> "NetworkSpec":
        return NetworkSpec(
            layer_dims=tuple(d["layer_dims"]),
            activation=d["activation"],
            use_bn=tuple(d["use_bn"]),
            use_bias=bool(d["use_bias"]),
        )


def mlp(dims, activation: str = RELU, bn: bool = False, bias: bool = False) -> NetworkSpec:
    """Convenience builder; `bn` turns BN on for every hidden layer."""
    dims = tuple(dims)
    return NetworkSpec(
        layer_dims=dims,
        activation=activation,
        use_bn=tuple(bn for _ in range(len(dims) - 2)),
        use_bias=bias,
    )


@dataclass(frozen=True)
class BatchNormConfig:
    """BN hyperparameters; the affine pair is frozen at (1, 0) and untrainable."""

    epsilon: float = 1e-8
    gamma: float = 1.0
    beta: float = 0.0

    def __post_init__(self):
        if self.epsilon <= 0:
            raise DomainError(f"epsilon must be positive, got {self.epsilon}")
        if self.gamma != 1.0 or self.beta != 0.0:
            raise DomainError("gamma and beta are fixed at 1 and 0")


@dataclass
class NetworkParams:
    """Per-layer weight matrices (out x in) and optional bias vectors."""

    weights: list[np.ndarray]
    biases: list[np.ndarray] | None = None

    def copy(self) -> "NetworkParams":
        return NetworkParams(
            weights=[w.copy() for w in self.weights],
            biases=None if self.biases is None else [b.copy() for b in self.biases],
        )


@dataclass
class BnState:
    """Running statistics for eval-mode BN; updated by train-mode forwards."""

    means: list[np.ndarray | None]
    variances: list[np.ndarray | None]
    decay: float = 0.9

    @staticmethod
    def fresh(spec: NetworkSpec, decay: float = 0.9) -> "BnState":
        means: list[np.ndarray | None] = []
        variances: list[np.ndarray | None] = []
        for l in range(spec.n_hidden):
            if spec.use_bn[l]:
                width = spec.layer_dims[l + 1]
                means.append(np.zeros(width))
                variances.append(np.ones(width))
            else:
                means.append(None)
                variances.append(None)
        return BnState(means=means, variances=variances, decay=decay)

    def update(self, layer: int, batch_mean: np.ndarray, batch_var: np.ndarray) -> None:
        self.means[layer] = self.decay * self.means[layer] + (1 - self.decay) * batch_mean
        self.variances[layer] = self.decay * self.variances[layer] + (1 - self.decay) * batch_var


@dataclass
class ForwardTrace:
    """Every intermediate of one forward pass.

    layer_inputs[l] is a_l (the input to weight layer l, a_0 = X); the
    post-activation of hidden layer l is layer_inputs[l + 1].
    pre_activations[l] is s_l before BN; for the output layer it equals the
    logits.  bn_* entries are None for layers without BN.
    """

    mode: str
    layer_inputs: list[np.ndarray]
    pre_activations: list[np.ndarray]
    bn_means: list[np.ndarray | None]
    bn_stds: list[np.ndarray | None]
    bn_normalized: list[np.ndarray | None]
    logits: np.ndarray = field(default_factory=lambda: np.zeros(0))


@dataclass
class BackwardResult:
    """Gradients of the scalar seeded at the logits: per-layer weight (and
    bias) gradients, per-example pre-activation gradients, and the input
    gradient."""

    weight_grads: list[np.ndarray]
    bias_grads: list[np.ndarray] | None
    s_grads: list[np.ndarray]
    x_grads: np.ndarray


def init_params(spec: NetworkSpec, rng: np.random.Generator) -> NetworkParams:
    """Zero-mean Gaussian init, std sqrt(2/in) for ReLU and sqrt(1/in) otherwise."""
    gain = 2.0 if spec.activation == RELU else 1.0
    weights = []
    for l in range(spec.n_layers):
        out, inp = spec.weight_shape(l)
        weights.append(rng.normal(0.0, np.sqrt(gain / inp), size=(out, inp)))
    biases = None
    if spec.use_bias:
        biases = [np.zeros(spec.layer_dims[l + 1]) for l in range(spec.n_layers)]
    return NetworkParams(weights=weights, biases=biases)


def check_params(spec: NetworkSpec, params: NetworkParams) -> None:
    if len(params.weights) != spec.n_layers:
        raise ShapeError(f"expected {spec.n_layers} weight matrices, got {len(params.weights)}")
    for l, w in enumerate(params.weights):
        if w.shape != spec.weight_shape(l):
            raise ShapeError(f"layer {l}: weight shape {w.shape} != {spec.weight_shape(l)}")
        if not np.all(np.isfinite(w)):
            raise ShapeError(f"layer {l}: non-finite weights")
    if spec.use_bias and params.biases is None:
        raise ShapeError("spec requires biases but params has none")


def _activate(spec: NetworkSpec, z: np.ndarray) -> np.ndarray:
    if spec.activation == RELU:
        return np.maximum(z, 0.0)
    return z


def forward(
    spec: NetworkSpec,
    params: NetworkParams,
    x,
    mode: str = "train",
    bn_config: BatchNormConfig | None = None,
    bn_state: BnState | None = None,
) -> tuple[np.ndarray, ForwardTrace]:
    """Run the network on a batch (n x d) and capture the full trace.

    mode="train" normalizes with batch statistics (and updates `bn_state`'s
    running averages when given); mode="eval" uses the running statistics,
    defaulting to mean 0 / variance 1 if no state is supplied.
    """
    if mode not in ("train", "eval"):
        raise DomainError(f"mode must be 'train' or 'eval', got {mode!r}")
    check_params(spec, params)
    cfg = bn_config or BatchNormConfig()
    a = np.asarray(x, dtype=np.float64)
    if a.ndim == 1:
        a = a[None, :]
    if a.shape[1] != spec.input_dim:
        raise ShapeError(f"input has {a.shape[1]} columns, spec wants {spec.input_dim}")
    n = a.shape[0]
    if mode == "train" and spec.has_bn and n < 2:
        raise DegenerateError("train-mode BN needs a batch of at least 2 examples")

    trace = ForwardTrace(
        mode=mode,
        layer_inputs=[],
        pre_activations=[],
        bn_means=[],
        bn_stds=[],
        bn_normalized=[],
    )
    for l in range(spec.n_layers):
        trace.layer_inputs.append(a)
        s = a @ params.weights[l].T
        if spec.use_bias:
            s = s + params.biases[l]
        trace.pre_activations.append(s)
        if l == spec.n_layers - 1:
            trace.logits = s
            return s, trace
        if spec.bn_at(l):
            if mode == "train":
                mean = s.mean(axis=0)
                var = s.var(axis=0)  # biased
                if bn_state is not None:
                    bn_state.update(l, mean, var)
            else:
                state = bn_state or BnState.fresh(spec)
                mean = state.means[l]
                var = state.variances[l]
            std = np.sqrt(var + cfg.epsilon)
            z = (s - mean) / std
            trace.bn_means.append(mean)
            trace.bn_stds.append(std)
            trace.bn_normalized.append(z)
        else:
            z = s
            trace.bn_means.append(None)
            trace.bn_stds.append(None)
            trace.bn_normalized.append(None)
        a = _activate(spec, z)
    raise AssertionError("unreachable")


def backward(
    spec: NetworkSpec,
    params: NetworkParams,
    trace: ForwardTrace,
    dl_dlogits,
) -> BackwardResult:
    """Backpropagate a logit-space gradient through a traced forward pass.

    In train mode the BN backward includes the batch statistics' dependence
    on the pre-activations; in eval mode the statistics are constants.
    """
    g = np.asarray(dl_dlogits, dtype=np.float64)
    if g.shape != trace.logits.shape:
        raise ShapeError(f"seed shape {g.shape} != logits shape {trace.logits.shape}")
    n_layers = spec.n_layers
    weight_grads: list[np.ndarray | None] = [None] * n_layers
    bias_grads: list[np.ndarray | None] | None = [None] * n_layers if spec.use_bias else None
    s_grads: list[np.ndarray | None] = [None] * n_layers

    ds = g  # dL/ds for the current layer, starting at the output
    for l in range(n_layers - 1, -1, -1):
        s_grads[l] = ds
        weight_grads[l] = ds.T @ trace.layer_inputs[l]
        if bias_grads is not None:
            bias_grads[l] = ds.sum(axis=0)
        da = ds @ params.weights[l]
        if l == 0:
            return BackwardResult(
                weight_grads=weight_grads,  # type: ignore[arg-type]
                bias_grads=bias_grads,  # type: ignore[arg-type]
                s_grads=s_grads,  # type: ignore[arg-type]
                x_grads=da,
            )
        # da is dL/da_l = dL/(post-activation of hidden layer l-1)
        h = l - 1
        if spec.activation == RELU:
            z_in = trace.bn_normalized[h] if spec.bn_at(h) else trace.pre_activations[h]
            dz = da * (z_in > 0)
        else:
            dz = da
        if spec.bn_at(h):
            std = trace.bn_stds[h]
            if trace.mode == "train":
                z = trace.bn_normalized[h]
                ds = (dz - dz.mean(axis=0) - z * (dz * z).mean(axis=0)) / std
            else:
                ds = dz / std
        else:
            ds = dz
    raise AssertionError("unreachable")


def input_jacobian(
    spec: NetworkSpec,
    params: NetworkParams,
    x,
    bn_config: BatchNormConfig | None = None,
    bn_state: BnState | None = None,
) -> np.ndarray:
    """Exact k x d Jacobian of the logits with respect to a single input,
    via one seeded backward pass per output (eval-mode BN)."""
    xv = np.asarray(x, dtype=np.float64).reshape(1, -1)
    _, trace = forward(spec, params, xv, mode="eval", bn_config=bn_config, bn_state=bn_state)
    k = spec.output_dim
    jac = np.zeros((k, spec.input_dim))
    for c in range(k):
        seed = np.zeros((1, k))
        seed[0, c] = 1.0
        jac[c] = backward(spec, params, trace, seed).x_grads[0]
    return jac


def flatten_params(spec: NetworkSpec, params: NetworkParams) -> np.ndarray:
    """Canonical parameter vector: per layer, row-major weights then bias."""
    parts = []
    for l in range(spec.n_layers):
        parts.append(params.weights[l].ravel())
        if spec.use_bias:
            parts.append(params.biases[l])
    return np.concatenate(parts)


def unflatten_params(spec: NetworkSpec, theta: np.ndarray) -> NetworkParams:
    theta = np.asarray(theta, dtype=np.float64)
    if theta.shape != (spec.n_params,):
        raise ShapeError(f"theta has {theta.shape}, spec wants ({spec.n_params},)")
    weights, biases = [], [] if spec.use_bias else None
    off = 0
    for l in range(spec.n_layers):
        out, inp = spec.weight_shape(l)
        weights.append(theta[off : off + out * inp].reshape(out, inp).copy())
        off += out * inp
        if spec.use_bias:
            biases.append(theta[off : off + out].copy())
            off += out
    return NetworkParams(weights=weights, biases=biases)


def flatten_grads(spec: NetworkSpec, result: BackwardResult) -> np.ndarray:
    parts = []
    for l in range(spec.n_layers):
        parts.append(result.weight_grads[l].ravel())
        if spec.use_bias:
            parts.append(result.bias_grads[l])
    return np.concatenate(parts)


def layer_slices(spec: NetworkSpec) -> list[slice]:
    """Slice of the canonical flattening owned by each layer."""
    slices = []
    off = 0
    for l in range(spec.n_layers):
        out, inp = spec.weight_shape(l)
        size = out * inp + (out if spec.use_bias else 0)
        slices.append(slice(off, off + size))
        off += size
    return slices


def param_jacobian(
    spec: NetworkSpec,
    params: NetworkParams,
    x,
    cap: int = 20000,
    bn_config: BatchNormConfig | None = None,
    bn_state: BnState | None = None,
) -> np.ndarray:
    """Exact k x P Jacobian of the logits with respect to the canonical
    parameter flattening, for a single input (eval-mode BN)."""
    if spec.n_params > cap:
        raise CapacityError(f"{spec.n_params} parameters exceed the cap of {cap}")
    xv = np.asarray(x, dtype=np.float64).reshape(1, -1)
    _, trace = forward(spec, params, xv, mode="eval", bn_config=bn_config, bn_state=bn_state)
    k = spec.output_dim
    jac = np.zeros((k, spec.n_params))
    for c in range(k):
        seed = np.zeros((1, k))
        seed[0, c] = 1.0
        jac[c] = flatten_grads(spec, backward(spec, params, trace, seed))
    return jac


def scale_layer(params: NetworkParams, layer: int, alpha: float) -> NetworkParams:
    """Return params with layer `layer`'s weights multiplied by alpha > 0."""
    if alpha <= 0:
        raise DomainError(f"alpha must be positive, got {alpha}")
    if not 0 <= layer < len(params.weights):
        raise ShapeError(f"no layer {layer} in a {len(params.weights)}-layer network")
    out = params.copy()
    out.weights[layer] = out.weights[layer] * alpha
    return out


def layer_norms(params: NetworkParams) -> np.ndarray:
    """Euclidean norm of each flattened weight matrix."""
    return np.array([float(np.linalg.norm(w)) for w in params.weights])


# --- checkpoints ------------------------------------------------------------
#
# One JSON header line, then the canonical parameter flattening: one decimal
# per line ("text") or raw little-endian float64 ("binary").  The binary
# variant round-trips bit-exactly; so does text, since repr() of a float is
# shortest-round-trip.


def save_checkpoint(
    path,
    spec: NetworkSpec,
    params: NetworkParams,
    seed: int,
    epoch: int,
    fmt: str = "binary",
) -> None:
    if fmt not in ("text", "binary"):
        raise DomainError(f"format must be 'text' or 'binary', got {fmt!r}")
    theta = flatten_params(spec, params)
    header = {
        "format": fmt,
        "spec": spec.to_dict(),
        "seed": int(seed),
        "epoch": int(epoch),
        "shapes": [list(spec.weight_shape(l)) for l in range(spec.n_layers)],
        "count": int(theta.size),
    }
    with open(path, "wb") as fh:
        fh.write(json.dumps(header).encode("utf-8"))
        fh.write(b"\n")
        if fmt == "binary":
            fh.write(theta.astype("<f8").tobytes())
        else:
            fh.write("\n".join(repr(float(v)) for v in theta).encode("ascii"))
            fh.write(b"\n")


def load_checkpoint(path) -> tuple[NetworkSpec, NetworkParams, int, int]:
    with open(path, "rb") as fh:
        raw = fh.read()
    nl = raw.find(b"\n")
    if nl < 0:
        raise DataFormatError("checkpoint: no header line (missing newline at offset 0..EOF)")
    try:
        header = json.loads(raw[:nl].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise DataFormatError(f"checkpoint: bad JSON header before offset {nl}: {exc}") from exc
    spec = NetworkSpec.from_dict(header["spec"])
    count = int(header["count"])
    payload = raw[nl + 1 :]
    if header["format"] == "binary":
        expected = count * 8
        if len(payload) != expected:
            raise DataFormatError(
                f"checkpoint: binary payload is {len(payload)} bytes at offset {nl + 1}, "
                f"expected {expected}"
            )
        theta = np.frombuffer(payload, dtype="<f8").astype(np.float64)
    else:
        lines = payload.decode("ascii").split()
        if len(lines) != count:
            raise DataFormatError(
                f"checkpoint: {len(lines)} text values after offset {nl + 1}, expected {count}"
            )
        theta = np.array([float(v) for v in lines])
    params = unflatten_params(spec, theta)
    return spec, params, int(header["seed"]), int(header["epoch"])
