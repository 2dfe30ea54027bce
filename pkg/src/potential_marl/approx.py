"""Small differentiable function approximators with hand-written gradients.

Everything here works in float64 and supports a leading batch dimension.
Models expose the same informal protocol:

    forward(x)                -> outputs, (B, out) for batched input
    gradients(x, upstream)    -> (flat parameter gradient summed over batch,
                                  input gradient with the shape of x)
    get_params() / set_params(flat)
    mixed_param_grad(x, w)    -> d/dparams of sum_b w_b . grad_x f(x_b)

The last one is what the potential estimator needs: its residuals contain
input gradients of the model, so the loss gradient needs the mixed
second derivative.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

ACTIVATIONS = ("tanh", "relu", "identity")


class NumericError(FloatingPointError):
    """Raised when a non-finite value shows up in a forward/backward pass."""


def _as_batch(x: np.ndarray) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        return x[None, :], True
    return x, False


def _act(name: str, z: np.ndarray) -> np.ndarray:
    if name == "tanh":
        return np.tanh(z)
    if name == "relu":
        return np.maximum(z, 0.0)
    return z


def _act_grad(name: str, z: np.ndarray, y: np.ndarray) -> np.ndarray:
    if name == "tanh":
        return 1.0 - y * y
    if name == "relu":
        return (z > 0.0).astype(np.float64)
    return np.ones_like(z)


@dataclass
class DenseNet:
    """Fully connected network. ``weights[k]`` has shape (out, in)."""

    layer_dims: list[int]
    activations: list[str]
    weights: list[np.ndarray]
    biases: list[np.ndarray]

    def __post_init__(self):
        if len(self.activations) != len(self.layer_dims) - 1:
            raise ValueError("need one activation per layer")
        for a in self.activations:
            if a not in ACTIVATIONS:
                raise ValueError(f"unknown activation {a!r}")
        for k, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.shape != (self.layer_dims[k + 1], self.layer_dims[k]) or b.shape != (self.layer_dims[k + 1],):
                raise ValueError(f"layer {k} parameter shape mismatch")

    @classmethod
    def create(
        cls,
        layer_dims,
        rng: np.random.Generator | None = None,
        hidden: str = "tanh",
        output: str = "identity",
        out_scale: float = 1.0,
    ) -> "DenseNet":
        """Glorot-uniform weights, zero biases; last layer scaled by ``out_scale``."""
        rng = rng if rng is not None else np.random.default_rng(0)
        layer_dims = [int(d) for d in layer_dims]
        weights, biases = [], []
        n_layers = len(layer_dims) - 1
        for k in range(n_layers):
            fan_in, fan_out = layer_dims[k], layer_dims[k + 1]
            lim = np.sqrt(6.0 / max(fan_in + fan_out, 1))
            w = rng.uniform(-lim, lim, size=(fan_out, fan_in))
            if k == n_layers - 1:
                w = w * out_scale
            weights.append(w)
            biases.append(np.zeros(fan_out))
        acts = [hidden] * (n_layers - 1) + [output]
        return cls(layer_dims, acts, weights, biases)

    @property
    def input_dim(self) -> int:
        return self.layer_dims[0]

    @property
    def output_dim(self) -> int:
        return self.layer_dims[-1]

    @property
    def n_params(self) -> int:
        return sum(w.size + b.size for w, b in zip(self.weights, self.biases))

    def get_params(self) -> np.ndarray:
        parts = []
        for w, b in zip(self.weights, self.biases):
            parts.append(w.ravel())
            parts.append(b)
        return np.concatenate(parts) if parts else np.zeros(0)

    def set_params(self, flat: np.ndarray) -> None:
        flat = np.asarray(flat, dtype=np.float64)
        if flat.shape != (self.n_params,):
            raise ValueError(f"expected {self.n_params} parameters, got {flat.shape}")
        pos = 0
        for k, (w, b) in enumerate(zip(self.weights, self.biases)):
            self.weights[k] = flat[pos : pos + w.size].reshape(w.shape).copy()
            pos += w.size
            self.biases[k] = flat[pos : pos + b.size].copy()
            pos += b.size

    def copy(self) -> "DenseNet":
        return DenseNet(
            list(self.layer_dims),
            list(self.activations),
            [w.copy() for w in self.weights],
            [b.copy() for b in self.biases],
        )

    def _forward_cache(self, x: np.ndarray):
        h = x
        cache = [(None, x)]
        for w, b, act in zip(self.weights, self.biases, self.activations):
            z = h @ w.T + b
            h = _act(act, z)
            cache.append((z, h))
        if not np.isfinite(h).all():
            k = next(k for k, (_, y) in enumerate(cache[1:]) if not np.isfinite(y).all())
            raise NumericError(f"non-finite activation in layer {k}")
        return h, cache

    def forward(self, x: np.ndarray) -> np.ndarray:
        xb, single = _as_batch(x)
        if xb.shape[1] != self.input_dim:
            raise ValueError(f"input has dim {xb.shape[1]}, network expects {self.input_dim}")
        y, _ = self._forward_cache(xb)
        return y[0] if single else y

    def gradients(self, x: np.ndarray, upstream: np.ndarray, params: bool = True) -> tuple[np.ndarray | None, np.ndarray]:
        """Backward pass. Parameter gradients are summed over the batch; with
        ``params=False`` only the input gradient is formed."""
        xb, single = _as_batch(x)
        if xb.shape[1] != self.input_dim:
            raise ValueError(f"input has dim {xb.shape[1]}, network expects {self.input_dim}")
        up = np.asarray(upstream, dtype=np.float64)
        up = up[None, :] if single else up
        if up.shape != (xb.shape[0], self.output_dim):
            raise ValueError("upstream shape does not match network output")
        _, cache = self._forward_cache(xb)
        flat, delta = self.backward(cache, up, params)
        return flat, (delta[0] if single else delta)

    def forward_cached(self, x: np.ndarray):
        """Batch forward that also returns the activation cache for ``backward``."""
        xb = np.asarray(x, dtype=np.float64)
        if xb.ndim != 2 or xb.shape[1] != self.input_dim:
            raise ValueError(f"expected a (B, {self.input_dim}) batch")
        return self._forward_cache(xb)

    def backward(self, cache, up: np.ndarray, params: bool = True):
        grads_w = [None] * len(self.weights)
        grads_b = [None] * len(self.weights)
        deltas = [None] * len(self.weights)
        delta = up
        for k in range(len(self.weights) - 1, -1, -1):
            z, y = cache[k + 1]
            if self.activations[k] != "identity":
                delta = delta * _act_grad(self.activations[k], z, y)
            if params:
                grads_w[k] = delta.T @ cache[k][1]
                grads_b[k] = delta.sum(axis=0)
            delta = delta @ self.weights[k]
            deltas[k] = delta
        if not np.isfinite(delta).all():
            k = max(k for k, d in enumerate(deltas) if not np.isfinite(d).all())
            raise NumericError(f"non-finite gradient in layer {k}")
        flat = np.concatenate([np.concatenate([gw.ravel(), gb]) for gw, gb in zip(grads_w, grads_b)]) if params else None
        return flat, delta

    def mixed_param_grad(self, x: np.ndarray, w: np.ndarray, step: float = 1e-4) -> np.ndarray:
        """Central difference of parameter gradients along the input directions ``w``.

        Scalar-output networks only. The error is O(step^2) per sample.
        """
        if self.output_dim != 1:
            raise ValueError("mixed_param_grad needs a scalar-output network")
        xb, _ = _as_batch(x)
        wb, _ = _as_batch(w)
        norms = np.linalg.norm(wb, axis=1)
        keep = norms > 0
        if not np.any(keep):
            return np.zeros(self.n_params)
        xb, wb, norms = xb[keep], wb[keep], norms[keep]
        h = step / norms
        pts = np.concatenate([xb + h[:, None] * wb, xb - h[:, None] * wb])
        up = np.concatenate([1.0 / (2.0 * h), -1.0 / (2.0 * h)])[:, None]
        g, _ = self.gradients(pts, up)
        return g

    def to_dict(self) -> dict:
        return {
            "kind": "dense",
            "layer_dims": list(self.layer_dims),
            "activations": list(self.activations),
            "params": self.get_params().tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DenseNet":
        net = cls.create(d["layer_dims"])
        net.activations = list(d["activations"])
        net.__post_init__()
        net.set_params(np.asarray(d["params"], dtype=np.float64))
        return net


@dataclass
class PolyBasis:
    """Linear model over monomials of degree <= 2: {1, x_i, x_i x_j (i <= j)}."""

    input_dim: int
    degree: int = 2
    coef: np.ndarray | None = None

    def __post_init__(self):
        if self.degree not in (1, 2):
            raise ValueError("PolyBasis supports degree 1 or 2")
        self._pairs = [(i, j) for i in range(self.input_dim) for j in range(i, self.input_dim)] if self.degree == 2 else []
        if self.coef is None:
            self.coef = np.zeros(self.n_features)
        self.coef = np.asarray(self.coef, dtype=np.float64)
        if self.coef.shape != (self.n_features,):
            raise ValueError("coefficient vector has wrong length")
        self._pi = np.array([p[0] for p in self._pairs], dtype=int)
        self._pj = np.array([p[1] for p in self._pairs], dtype=int)

    @property
    def n_features(self) -> int:
        d = self.input_dim
        return 1 + d + (d * (d + 1) // 2 if self.degree == 2 else 0)

    n_params = n_features
    output_dim = 1

    def feature_names(self, names: list[str] | None = None) -> list[str]:
        names = names or [f"x{i}" for i in range(self.input_dim)]
        out = ["1"] + list(names)
        for i, j in self._pairs:
            out.append(f"{names[i]}^2" if i == j else f"{names[i]}*{names[j]}")
        return out

    def features(self, x: np.ndarray) -> np.ndarray:
        xb, single = _as_batch(x)
        if xb.shape[1] != self.input_dim:
            raise ValueError(f"input has dim {xb.shape[1]}, basis expects {self.input_dim}")
        parts = [np.ones((xb.shape[0], 1)), xb]
        if self.degree == 2:
            parts.append(xb[:, self._pi] * xb[:, self._pj])
        f = np.concatenate(parts, axis=1)
        return f[0] if single else f

    def feature_jacobian(self, x: np.ndarray) -> np.ndarray:
        """d features / d x, shape (B, n_features, input_dim)."""
        xb, _ = _as_batch(x)
        B, d = xb.shape
        J = np.zeros((B, self.n_features, d))
        J[:, 1 : 1 + d, :] = np.eye(d)
        if self.degree == 2:
            rows = 1 + d + np.arange(len(self._pairs))
            J[:, rows, self._pi] += xb[:, self._pj]
            J[:, rows, self._pj] += xb[:, self._pi]
        return J

    def get_params(self) -> np.ndarray:
        return self.coef.copy()

    def set_params(self, flat: np.ndarray) -> None:
        flat = np.asarray(flat, dtype=np.float64)
        if flat.shape != (self.n_features,):
            raise ValueError("coefficient vector has wrong length")
        self.coef = flat.copy()

    def copy(self) -> "PolyBasis":
        return PolyBasis(self.input_dim, self.degree, self.coef.copy())

    def forward(self, x: np.ndarray) -> np.ndarray:
        xb, single = _as_batch(x)
        y = (self.features(xb) @ self.coef)[:, None]
        return y[0] if single else y

    def gradients(self, x: np.ndarray, upstream: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        xb, single = _as_batch(x)
        up = np.asarray(upstream, dtype=np.float64).reshape(xb.shape[0])
        pg = up @ self.features(xb)
        ig = up[:, None] * np.einsum("bfd,f->bd", self.feature_jacobian(xb), self.coef)
        return pg, (ig[0] if single else ig)

    def mixed_param_grad(self, x: np.ndarray, w: np.ndarray, step: float | None = None) -> np.ndarray:
        xb, _ = _as_batch(x)
        wb, _ = _as_batch(w)
        return np.einsum("bfd,bd->f", self.feature_jacobian(xb), wb)

    def fit_least_squares(self, x: np.ndarray, y: np.ndarray) -> float:
        """Exact least-squares fit of the coefficients; returns the training MSE."""
        F = self.features(x)
        coef, *_ = np.linalg.lstsq(F, np.asarray(y, dtype=np.float64).ravel(), rcond=None)
        self.coef = coef
        return float(np.mean((F @ coef - np.ravel(y)) ** 2))

    def to_dict(self) -> dict:
        return {"kind": "poly", "input_dim": self.input_dim, "degree": self.degree, "params": self.coef.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "PolyBasis":
        return cls(int(d["input_dim"]), int(d["degree"]), np.asarray(d["params"], dtype=np.float64))


@dataclass
class ConstantModel:
    """Input-independent output; its only parameters are the output values."""

    input_dim: int
    bias: np.ndarray

    def __post_init__(self):
        self.bias = np.atleast_1d(np.asarray(self.bias, dtype=np.float64)).copy()

    @property
    def output_dim(self) -> int:
        return self.bias.size

    @property
    def n_params(self) -> int:
        return self.bias.size

    def get_params(self) -> np.ndarray:
        return self.bias.copy()

    def set_params(self, flat: np.ndarray) -> None:
        self.bias = np.asarray(flat, dtype=np.float64).reshape(self.bias.shape).copy()

    def copy(self) -> "ConstantModel":
        return ConstantModel(self.input_dim, self.bias.copy())

    def forward(self, x: np.ndarray) -> np.ndarray:
        xb, single = _as_batch(x)
        y = np.broadcast_to(self.bias, (xb.shape[0], self.bias.size)).copy()
        return y[0] if single else y

    def gradients(self, x: np.ndarray, upstream: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        xb, single = _as_batch(x)
        up = np.asarray(upstream, dtype=np.float64).reshape(xb.shape[0], -1)
        ig = np.zeros_like(xb)
        return up.sum(axis=0), (ig[0] if single else ig)

    def to_dict(self) -> dict:
        return {"kind": "constant", "input_dim": self.input_dim, "params": self.bias.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "ConstantModel":
        return cls(int(d["input_dim"]), np.asarray(d["params"], dtype=np.float64))


def model_from_dict(d: dict):
    kind = d.get("kind", "dense")
    if kind == "dense":
        return DenseNet.from_dict(d)
    if kind == "poly":
        return PolyBasis.from_dict(d)
    if kind == "constant":
        return ConstantModel.from_dict(d)
    raise ValueError(f"unknown model kind {kind!r}")


def net_forward(net, x: np.ndarray) -> np.ndarray:
    return net.forward(x)


def net_gradients(net, x: np.ndarray, upstream: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    return net.gradients(x, upstream)


class DegeneratePolicyError(ValueError):
    pass


@dataclass
class GaussianPolicy:
    """Gaussian over pre-squash actions, mapped into the action box.

    With ``squash="tanh"`` an action is ``low + (high-low) * (tanh(u)+1)/2`` where
    ``u ~ N(mean_model(s), sigma^2 I)``. With ``squash="none"`` the Gaussian lives
    in action space directly and samples are clipped to the box.
    """

    mean_model: object
    sigma: float
    action_low: np.ndarray
    action_high: np.ndarray
    squash: str = "tanh"

    def __post_init__(self):
        self.action_low = np.atleast_1d(np.asarray(self.action_low, dtype=np.float64))
        self.action_high = np.atleast_1d(np.asarray(self.action_high, dtype=np.float64))
        if self.squash not in ("tanh", "none"):
            raise ValueError("squash must be 'tanh' or 'none'")
        if self.sigma < 0:
            raise ValueError("sigma must be non-negative")

    @property
    def action_dim(self) -> int:
        return self.action_low.size

    @property
    def n_params(self) -> int:
        return self.mean_model.n_params

    def get_params(self) -> np.ndarray:
        return self.mean_model.get_params()

    def set_params(self, flat: np.ndarray) -> None:
        self.mean_model.set_params(flat)

    def copy(self) -> "GaussianPolicy":
        return GaussianPolicy(self.mean_model.copy(), self.sigma, self.action_low.copy(), self.action_high.copy(), self.squash)

    def to_action(self, u: np.ndarray) -> np.ndarray:
        if self.squash == "none":
            return np.clip(u, self.action_low, self.action_high)
        return self.action_low + (self.action_high - self.action_low) * 0.5 * (np.tanh(u) + 1.0)

    def to_action_grad(self, u: np.ndarray) -> np.ndarray:
        """Elementwise d action / d u."""
        if self.squash == "none":
            return np.ones_like(u)
        t = np.tanh(u)
        return 0.5 * (self.action_high - self.action_low) * (1.0 - t * t)

    def from_action(self, a: np.ndarray) -> np.ndarray:
        if self.squash == "none":
            return np.asarray(a, dtype=np.float64)
        y = 2.0 * (np.asarray(a) - self.action_low) / (self.action_high - self.action_low) - 1.0
        return np.arctanh(np.clip(y, -1.0 + 1e-15, 1.0 - 1e-15))

    def mean_pre(self, s: np.ndarray) -> np.ndarray:
        return self.mean_model.forward(s)

    def mean_action(self, s: np.ndarray) -> np.ndarray:
        return self.to_action(self.mean_pre(s))

    def sample(self, s: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        u = self.mean_pre(s)
        if self.sigma == 0.0:
            return self.to_action(u)
        return self.to_action(u + self.sigma * rng.standard_normal(u.shape))

    def log_density_pre(self, s: np.ndarray, u: np.ndarray) -> np.ndarray:
        mu = self.mean_pre(s)
        k = mu.shape[-1]
        r = (np.asarray(u) - mu) / self.sigma
        return -0.5 * np.sum(r * r, axis=-1) - k * np.log(self.sigma) - 0.5 * k * np.log(2 * np.pi)

    def score(self, s: np.ndarray, a: np.ndarray) -> np.ndarray:
        """Gradient of log pi(a|s) w.r.t. the mean-model parameters.

        Batched input gives one row per sample, shape (B, n_params).
        """
        if self.sigma <= 0.0:
            raise DegeneratePolicyError("score is undefined for sigma = 0")
        sb, single = _as_batch(s)
        ab, _ = _as_batch(a)
        u = self.from_action(ab)
        mu = self.mean_model.forward(sb)
        r = (u - mu) / self.sigma**2
        if single:
            g, _ = self.mean_model.gradients(sb, r)
            return g
        if isinstance(self.mean_model, ConstantModel):
            return r
        # per-sample parameter gradients; one backward pass per row
        return np.stack([self.mean_model.gradients(sb[b], r[b])[0] for b in range(sb.shape[0])])

    def to_dict(self) -> dict:
        return {
            "mean_model": self.mean_model.to_dict(),
            "sigma": self.sigma,
            "action_low": self.action_low.tolist(),
            "action_high": self.action_high.tolist(),
            "squash": self.squash,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "GaussianPolicy":
        return cls(model_from_dict(d["mean_model"]), float(d["sigma"]), np.asarray(d["action_low"]), np.asarray(d["action_high"]), d.get("squash", "tanh"))


def policy_sample(policy: GaussianPolicy, s: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    return policy.sample(s, rng)


def policy_score(policy: GaussianPolicy, s: np.ndarray, a: np.ndarray) -> np.ndarray:
    return policy.score(s, a)


@dataclass
class OptimizerState:
    kind: str = "adam"
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    clip_norm: float | None = 1.0
    step: int = 0
    m: np.ndarray | None = field(default=None, repr=False)
    v: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        if self.kind not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer {self.kind!r}")
        if self.lr <= 0:
            raise ValueError("learning rate must be positive")


def clip_by_global_norm(grads: np.ndarray, max_norm: float | None) -> np.ndarray:
    if max_norm is None:
        return grads
    n = float(np.linalg.norm(grads))
    if n > max_norm:
        return grads * (max_norm / n)
    return grads


def optimizer_step(state: OptimizerState, params: np.ndarray, grads: np.ndarray) -> np.ndarray:
    """Descent step ``params - lr * direction``; mutates the moment buffers in ``state``."""
    grads = np.asarray(grads, dtype=np.float64)
    if grads.shape != np.shape(params):
        raise ValueError("gradient and parameter shapes differ")
    if not np.all(np.isfinite(grads)):
        raise NumericError("non-finite gradient passed to optimizer")
    g = clip_by_global_norm(grads, state.clip_norm)
    if state.kind == "sgd":
        state.step += 1
        return params - state.lr * g
    if state.m is None or state.m.shape != g.shape:
        state.m = np.zeros_like(g)
        state.v = np.zeros_like(g)
    state.step += 1
    state.m = state.beta1 * state.m + (1 - state.beta1) * g
    state.v = state.beta2 * state.v + (1 - state.beta2) * g * g
    mhat = state.m / (1 - state.beta1**state.step)
    vhat = state.v / (1 - state.beta2**state.step)
    return params - state.lr * mhat / (np.sqrt(vhat) + state.eps)


# checkpoint files

_MAGIC = b"PMCK"
_VERSION = 1


def save_model(model, path: str | Path) -> None:
    """JSON for ``*.json`` paths, otherwise a little-endian binary container."""
    path = Path(path)
    d = model.to_dict()
    if path.suffix == ".json":
        path.write_text(json.dumps({"version": _VERSION, **d}))
        return
    params = np.asarray(d.pop("params"), dtype="<f8")
    header = json.dumps(d).encode()
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<II", _VERSION, len(header)))
        fh.write(header)
        fh.write(struct.pack("<Q", params.size))
        fh.write(params.tobytes())


def load_model(path: str | Path):
    path = Path(path)
    raw = path.read_bytes()
    if raw[:4] != _MAGIC:
        d = json.loads(raw)
        d.pop("version", None)
        return model_from_dict(d)
    version, hlen = struct.unpack_from("<II", raw, 4)
    if version != _VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    header = json.loads(raw[12 : 12 + hlen])
    (n,) = struct.unpack_from("<Q", raw, 12 + hlen)
    params = np.frombuffer(raw, dtype="<f8", count=n, offset=20 + hlen).astype(np.float64)
    header["params"] = params
    return model_from_dict(header)
