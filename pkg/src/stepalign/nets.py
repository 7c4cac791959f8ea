"""Dense parameter storage, a small tanh network with hand-written backprop,
Adam, and a central-difference gradient checker.

Everything is float64. Gradients accumulate additively into per-block buffers
so several losses can share one optimizer step.
"""
from __future__ import annotations

import numpy as np

from .errors import ConfigurationError, UsageError
from .validation import require

ADAM_BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8

_TIME_BASE = 10000.0


def time_features(t, n_freq: int = 8) -> np.ndarray:
    """Sinusoidal embedding of a timestep, shape (..., 2*n_freq).

    Frequencies are geometrically spaced from 1 down to 1/_TIME_BASE.
    """
    t = np.asarray(t, dtype=np.float64)
    i = np.arange(n_freq, dtype=np.float64)
    freqs = _TIME_BASE ** (-i / max(n_freq - 1, 1))
    ang = t[..., None] * freqs
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=-1)


class ParamStore:
    """Named float64 parameter blocks with parallel gradient and Adam buffers."""

    def __init__(self):
        self._params: dict[str, np.ndarray] = {}
        self._grads: dict[str, np.ndarray] = {}
        self._m: dict[str, np.ndarray] = {}
        self._v: dict[str, np.ndarray] = {}
        self._step = 0
        self._frozen = False

    @property
    def frozen(self) -> bool:
        return self._frozen

    def names(self) -> list[str]:
        return sorted(self._params)

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def add(self, name: str, value) -> np.ndarray:
        if self._frozen:
            raise UsageError("cannot add blocks to a frozen store")
        if name in self._params:
            raise ConfigurationError(f"duplicate parameter block {name!r}")
        arr = np.array(value, dtype=np.float64)
        self._params[name] = arr
        self._grads[name] = np.zeros_like(arr)
        self._m[name] = np.zeros_like(arr)
        self._v[name] = np.zeros_like(arr)
        return arr

    def param(self, name: str) -> np.ndarray:
        return self._params[name]

    def grad(self, name: str) -> np.ndarray:
        return self._grads[name]

    def zero_grads(self) -> None:
        # Allowed on frozen stores: gradient buffers never alter parameters.
        for g in self._grads.values():
            g[...] = 0.0

    def grad_norm(self) -> float:
        total = 0.0
        for g in self._grads.values():
            total += float(np.sum(g * g))
        return float(np.sqrt(total))

    def freeze(self) -> None:
        self._frozen = True
        for p in self._params.values():
            p.flags.writeable = False

    def copy(self) -> "ParamStore":
        """Deep copy of the parameter values; fresh gradient/moment buffers."""
        out = ParamStore()
        for name in self.names():
            out.add(name, self._params[name].copy())
        return out

    def assign_from(self, other: "ParamStore") -> None:
        if self._frozen:
            raise UsageError("cannot assign into a frozen store")
        if self.names() != other.names():
            raise ConfigurationError("parameter block names do not match")
        for name in self.names():
            if self._params[name].shape != other._params[name].shape:
                raise ConfigurationError(f"shape mismatch for block {name!r}")
            self._params[name][...] = other._params[name]

    def equals(self, other: "ParamStore") -> bool:
        if self.names() != other.names():
            return False
        return all(
            np.array_equal(self._params[n], other._params[n]) for n in self.names()
        )

    def _lr_for(self, name: str, lr) -> float:
        if isinstance(lr, dict):
            prefix = name.split(".", 1)[0]
            if prefix in lr:
                rate = lr[prefix]
            elif "default" in lr:
                rate = lr["default"]
            else:
                raise ConfigurationError(f"no learning rate for block {name!r}")
        else:
            rate = lr
        rate = float(rate)
        if rate <= 0.0:
            raise ConfigurationError(f"learning rate must be positive, got {rate}")
        return rate

    def adam_step(self, lr, betas=ADAM_BETAS, eps: float = ADAM_EPS) -> None:
        """Bias-corrected Adam update from the accumulated gradients.

        `lr` is a float or a {block-prefix: rate} mapping. Gradients are left
        untouched; the caller decides when to zero them.
        """
        if self._frozen:
            raise UsageError("adam_step on a frozen store")
        b1, b2 = float(betas[0]), float(betas[1])
        if not (0.0 <= b1 < 1.0 and 0.0 <= b2 < 1.0):
            raise ConfigurationError(f"betas must lie in [0, 1), got {betas}")
        rates = {name: self._lr_for(name, lr) for name in self._params}
        self._step += 1
        c1 = 1.0 - b1 ** self._step
        c2 = 1.0 - b2 ** self._step
        for name, p in self._params.items():
            g = self._grads[name]
            m = self._m[name]
            v = self._v[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            p -= rates[name] * (m / c1) / (np.sqrt(v / c2) + eps)


class Mlp:
    """Fully connected net: tanh hidden layers, identity (or tanh) output.

    Parameters are registered in a ParamStore under ``prefix.W{i}`` /
    ``prefix.b{i}``. Forward returns a cache that backward consumes; backward
    accumulates into the store's gradient buffers and returns the input
    cotangent.
    """

    def __init__(self, store: ParamStore, prefix: str, widths, rng=None,
                 tanh_output: bool = False, zero_last: bool = False):
        widths = [int(w) for w in widths]
        if len(widths) < 2 or any(w <= 0 for w in widths):
            raise ConfigurationError(f"bad layer widths {widths}")
        self.store = store
        self.prefix = prefix
        self.widths = widths
        self.tanh_output = bool(tanh_output)
        self.n_layers = len(widths) - 1
        if f"{prefix}.W0" not in store:
            if rng is None:
                rng = np.random.default_rng(0)
            for i, (fan_in, fan_out) in enumerate(zip(widths[:-1], widths[1:])):
                last = i == self.n_layers - 1
                if last and zero_last:
                    w = np.zeros((fan_out, fan_in))
                else:
                    w = rng.standard_normal((fan_out, fan_in)) / np.sqrt(fan_in)
                store.add(f"{prefix}.W{i}", w)
                store.add(f"{prefix}.b{i}", np.zeros(fan_out))

    @property
    def in_dim(self) -> int:
        return self.widths[0]

    @property
    def out_dim(self) -> int:
        return self.widths[-1]

    def _weights(self, i: int) -> tuple[np.ndarray, np.ndarray]:
        return self.store.param(f"{self.prefix}.W{i}"), self.store.param(f"{self.prefix}.b{i}")

    def forward(self, x: np.ndarray):
        """Returns (output, cache). Accepts (in,) or (batch, in)."""
        x = np.asarray(x, dtype=np.float64)
        squeeze = x.ndim == 1
        if squeeze:
            x = x[None, :]
        if x.ndim != 2 or x.shape[1] != self.in_dim:
            raise ConfigurationError(
                f"{self.prefix}: expected input width {self.in_dim}, got shape {x.shape}"
            )
        acts = [x]
        h = x
        for i in range(self.n_layers):
            w, b = self._weights(i)
            h = h @ w.T + b
            if i < self.n_layers - 1 or self.tanh_output:
                h = np.tanh(h)
            acts.append(h)
        out = acts[-1][0] if squeeze else acts[-1]
        return out, acts

    def backward(self, cache, d_out: np.ndarray) -> np.ndarray:
        """Accumulate parameter gradients; return the cotangent w.r.t. the input."""
        if cache is None:
            raise UsageError("backward called without a forward cache")
        d = np.asarray(d_out, dtype=np.float64)
        squeeze = d.ndim == 1
        if squeeze:
            d = d[None, :]
        if d.shape != cache[-1].shape:
            raise ConfigurationError(
                f"{self.prefix}: cotangent shape {d.shape} does not match output {cache[-1].shape}"
            )
        for i in range(self.n_layers - 1, -1, -1):
            if i < self.n_layers - 1 or self.tanh_output:
                d = d * (1.0 - cache[i + 1] ** 2)
            w, _ = self._weights(i)
            self.store.grad(f"{self.prefix}.W{i}")[...] += d.T @ cache[i]
            self.store.grad(f"{self.prefix}.b{i}")[...] += d.sum(axis=0)
            d = d @ w
        return d[0] if squeeze else d


def finite_diff_check(loss_fn, store: ParamStore, step: float = 1e-6,
                      max_entries: int = 40, rng=None) -> float:
    """Error between analytic and central-difference gradients, relative to
    the gradient's overall magnitude.

    Returns max_j |analytic_j - numeric_j| / max(||analytic||_inf,
    ||numeric||_inf). Normalizing per entry instead would divide the
    finite-difference roundoff noise by near-zero denominators wherever a
    single entry's true gradient happens to vanish, so a correct gradient
    could not stay under a tight tolerance.

    ``loss_fn()`` must be deterministic given the parameters and must leave
    the store's gradient buffers equal to the gradient of that evaluation
    (zero-then-backward inside). Up to ``max_entries`` entries per block are
    probed; the store's gradients are zeroed on exit.
    """
    if store.frozen:
        raise UsageError("finite_diff_check needs writable parameters")
    if rng is None:
        rng = np.random.default_rng(0)
    loss_fn()
    analytic = {name: store.grad(name).copy() for name in store.names()}
    scale = max((float(np.max(np.abs(g))) for g in analytic.values() if g.size),
                default=0.0)
    worst_abs = 0.0
    for name in store.names():
        p = store.param(name)
        n = p.size
        if n <= max_entries:
            idx = np.arange(n)
        else:
            idx = rng.choice(n, size=max_entries, replace=False)
        flat = p.reshape(-1)
        for j in idx:
            orig = flat[j]
            flat[j] = orig + step
            f_plus = float(loss_fn())
            flat[j] = orig - step
            f_minus = float(loss_fn())
            flat[j] = orig
            numeric = (f_plus - f_minus) / (2.0 * step)
            a = analytic[name].reshape(-1)[j]
            worst_abs = max(worst_abs, abs(a - numeric))
            scale = max(scale, abs(numeric))
    store.zero_grads()
    return worst_abs / max(scale, 1e-12)


def require_compatible(a: ParamStore, b: ParamStore) -> None:
    require(a.names() == b.names(), "parameter stores are not compatible",
            ConfigurationError)
