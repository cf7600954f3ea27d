"""Small dense MLPs in double precision with hand-written reverse-mode
gradients and a central finite-difference checker.

Hidden layers use the rectifier; the output layer is identity or sigmoid.
Parameters are immutable after init; training loops own mutable copies.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

OUT_ACTIVATIONS = ("identity", "sigmoid")


class ShapeError(ValueError):
    """Raised when parameter / input widths are inconsistent."""


@dataclass
class MlpParams:
    """Weights and biases of a dense MLP.

    weights[i] has shape (layer_dims[i+1], layer_dims[i]); biases[i] has
    shape (layer_dims[i+1],).
    """

    layer_dims: tuple[int, ...]
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    out_activation: str = "identity"

    def __post_init__(self):
        dims = tuple(int(d) for d in self.layer_dims)
        object.__setattr__(self, "layer_dims", dims)
        if len(dims) < 2:
            raise ShapeError("need at least one layer")
        if self.out_activation not in OUT_ACTIVATIONS:
            raise ShapeError(f"unknown output activation {self.out_activation!r}")
        if len(self.weights) != len(dims) - 1 or len(self.biases) != len(dims) - 1:
            raise ShapeError("weights/biases count does not match layer_dims")
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.shape != (dims[i + 1], dims[i]) or b.shape != (dims[i + 1],):
                raise ShapeError(
                    f"layer {i}: expected W{(dims[i + 1], dims[i])} b{(dims[i + 1],)}, "
                    f"got W{w.shape} b{b.shape}"
                )
            if not (np.isfinite(w).all() and np.isfinite(b).all()):
                raise ValueError(f"layer {i}: non-finite parameters")

    @property
    def in_width(self) -> int:
        return self.layer_dims[0]

    @property
    def out_width(self) -> int:
        return self.layer_dims[-1]

    @property
    def num_params(self) -> int:
        return sum(w.size + b.size for w, b in zip(self.weights, self.biases))

    def copy(self) -> "MlpParams":
        return MlpParams(
            self.layer_dims,
            [w.copy() for w in self.weights],
            [b.copy() for b in self.biases],
            self.out_activation,
        )


def init_params(layer_dims, seed, out_activation: str = "identity") -> MlpParams:
    """Deterministic uniform init in [-s, s] with s = sqrt(6/(fan_in+fan_out))."""
    rng = np.random.default_rng(seed)
    dims = tuple(int(d) for d in layer_dims)
    weights, biases = [], []
    for din, dout in zip(dims[:-1], dims[1:]):
        s = np.sqrt(6.0 / (din + dout))
        weights.append(rng.uniform(-s, s, size=(dout, din)))
        biases.append(rng.uniform(-s, s, size=dout))
    return MlpParams(dims, weights, biases, out_activation)


def zero_params(layer_dims, out_activation: str = "identity") -> MlpParams:
    dims = tuple(int(d) for d in layer_dims)
    weights = [np.zeros((dout, din)) for din, dout in zip(dims[:-1], dims[1:])]
    biases = [np.zeros(dout) for dout in dims[1:]]
    return MlpParams(dims, weights, biases, out_activation)


def sigmoid(z: np.ndarray) -> np.ndarray:
    """Numerically stable logistic function."""
    z = np.asarray(z, dtype=float)
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def _as_batch(x: np.ndarray, width: int):
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        if x.shape[0] != width:
            raise ShapeError(f"input width {x.shape[0]} != expected {width}")
        return x[None, :], True
    if x.ndim == 2:
        if x.shape[1] != width:
            raise ShapeError(f"input width {x.shape[1]} != expected {width}")
        return x, False
    raise ShapeError(f"input must be 1-D or 2-D, got shape {x.shape}")


def _forward_cached(p: MlpParams, xb: np.ndarray):
    """Forward over a (B, d0) batch, returning output and per-layer activations."""
    acts = [xb]
    a = xb
    last = len(p.weights) - 1
    for i, (w, b) in enumerate(zip(p.weights, p.biases)):
        z = a @ w.T + b
        if i < last:
            a = np.maximum(z, 0.0)
        elif p.out_activation == "sigmoid":
            a = sigmoid(z)
        else:
            a = z
        acts.append(a)
    return a, acts


def mlp_forward(p: MlpParams, x: np.ndarray) -> np.ndarray:
    """Evaluate the MLP on one vector (d0,) or a batch (B, d0)."""
    xb, single = _as_batch(x, p.in_width)
    y, _ = _forward_cached(p, xb)
    return y[0] if single else y


def mlp_backward(p: MlpParams, x: np.ndarray, upstream_grad: np.ndarray):
    """Reverse-mode gradients for all parameters and the input.

    Args:
        p: parameters.
        x: input vector (d0,) or batch (B, d0).
        upstream_grad: dLoss/dOutput, matching the forward output shape.

    Returns:
        (weight_grads, bias_grads, input_grad) with shapes mirroring
        p.weights, p.biases and x.
    """
    xb, single = _as_batch(x, p.in_width)
    up = np.asarray(upstream_grad, dtype=float)
    if single:
        up = up[None, :]
    if up.shape != (xb.shape[0], p.out_width):
        raise ShapeError(
            f"upstream grad shape {up.shape} != {(xb.shape[0], p.out_width)}"
        )
    _, acts = _forward_cached(p, xb)
    n_layers = len(p.weights)
    w_grads = [np.empty(0)] * n_layers
    b_grads = [np.empty(0)] * n_layers
    delta = up
    for i in range(n_layers - 1, -1, -1):
        a_out = acts[i + 1]
        if i == n_layers - 1:
            if p.out_activation == "sigmoid":
                delta = delta * a_out * (1.0 - a_out)
            # identity: delta unchanged
        else:
            delta = delta * (a_out > 0.0)
        w_grads[i] = delta.T @ acts[i]
        b_grads[i] = delta.sum(axis=0)
        delta = delta @ p.weights[i]
    input_grad = delta[0] if single else delta
    return w_grads, b_grads, input_grad


def grad_check(f, point: np.ndarray, eps: float = 1e-3, floor: float = 1e-8) -> float:
    """Compare an analytic gradient against central finite differences.

    Args:
        f: callable mapping a flat vector to (scalar value, gradient vector).
        point: flat evaluation point.
        eps: finite-difference step.
        floor: absolute floor for the relative-error denominator.

    Returns:
        The max over coordinates of |analytic - fd| / max(|analytic|, |fd|, floor).
    """
    x = np.asarray(point, dtype=float).copy()
    val, grad = f(x)
    grad = np.asarray(grad, dtype=float)
    if not np.isfinite(val) or not np.isfinite(grad).all():
        raise FloatingPointError("non-finite evaluation in grad_check")
    worst = 0.0
    for i in range(x.size):
        orig = x[i]
        x[i] = orig + eps
        fp, _ = f(x)
        x[i] = orig - eps
        fm, _ = f(x)
        x[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise FloatingPointError(f"non-finite evaluation near coordinate {i}")
        fd = (fp - fm) / (2.0 * eps)
        denom = max(abs(grad[i]), abs(fd), floor)
        worst = max(worst, abs(grad[i] - fd) / denom)
    return worst


def params_to_vector(p: MlpParams) -> np.ndarray:
    """Flatten all weights and biases into one vector (layer order, W then b)."""
    parts = []
    for w, b in zip(p.weights, p.biases):
        parts.append(w.ravel())
        parts.append(b.ravel())
    return np.concatenate(parts) if parts else np.empty(0)


def params_from_vector(template: MlpParams, vec: np.ndarray) -> MlpParams:
    """Inverse of params_to_vector, using template for shapes."""
    vec = np.asarray(vec, dtype=float)
    if vec.size != template.num_params:
        raise ShapeError(f"vector size {vec.size} != {template.num_params}")
    weights, biases, off = [], [], 0
    for w, b in zip(template.weights, template.biases):
        weights.append(vec[off : off + w.size].reshape(w.shape).copy())
        off += w.size
        biases.append(vec[off : off + b.size].copy())
        off += b.size
    return MlpParams(template.layer_dims, weights, biases, template.out_activation)


# ---------------------------------------------------------------------------
# Parameter files: ascii header line, then little-endian float64 blobs
# (per layer: weights row-major, then biases). Sections concatenate.
# ---------------------------------------------------------------------------

MAGIC = "PVMLP1"


class ParamFileError(ValueError):
    """Raised on malformed parameter files."""


def save_params(p: MlpParams, fh, name: str = "mlp") -> None:
    if any(ch.isspace() for ch in name) or not name:
        raise ValueError(f"bad section name {name!r}")
    dims = ",".join(str(d) for d in p.layer_dims)
    fh.write(f"{MAGIC} name={name} out={p.out_activation} dims={dims}\n".encode("ascii"))
    for w, b in zip(p.weights, p.biases):
        fh.write(np.ascontiguousarray(w, dtype="<f8").tobytes())
        fh.write(np.ascontiguousarray(b, dtype="<f8").tobytes())


def load_params(fh):
    """Read one section; returns (name, MlpParams) or None at EOF."""
    line = fh.readline()
    if not line:
        return None
    try:
        text = line.decode("ascii").strip()
    except UnicodeDecodeError as exc:
        raise ParamFileError("header is not ascii") from exc
    fields = text.split()
    if not fields or fields[0] != MAGIC:
        raise ParamFileError(f"bad magic in header: {text[:40]!r}")
    kv = {}
    for tok in fields[1:]:
        if "=" not in tok:
            raise ParamFileError(f"malformed header field {tok!r}")
        k, v = tok.split("=", 1)
        kv[k] = v
    try:
        name = kv["name"]
        out_act = kv["out"]
        dims = tuple(int(d) for d in kv["dims"].split(","))
    except (KeyError, ValueError) as exc:
        raise ParamFileError(f"malformed header: {text!r}") from exc
    weights, biases = [], []
    for din, dout in zip(dims[:-1], dims[1:]):
        nbytes = (dout * din + dout) * 8
        blob = fh.read(nbytes)
        if len(blob) != nbytes:
            raise ParamFileError("truncated parameter blob")
        flat = np.frombuffer(blob, dtype="<f8")
        weights.append(flat[: dout * din].reshape(dout, din).astype(float))
        biases.append(flat[dout * din :].astype(float))
    return name, MlpParams(dims, weights, biases, out_act)


def load_param_sections(fh) -> dict[str, MlpParams]:
    """Read all concatenated sections into a name -> params dict."""
    out: dict[str, MlpParams] = {}
    while True:
        item = load_params(fh)
        if item is None:
            return out
        name, params = item
        if name in out:
            raise ParamFileError(f"duplicate section {name!r}")
        out[name] = params
