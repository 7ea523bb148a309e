"""Dense-network kernels with hand-written derivative passes.

All learned components (excitation maps, latent dynamics, encoders, decoders)
are built from one primitive: a fully connected net with tanh hidden layers and
a linear output. Training needs its gradient; velocity targets additionally
need the gradient OF a Jacobian-vector product (the target itself is
J(x) @ v, and the loss is differentiated through it), so the kernel exposes
four passes:

    forward(params, x)                        y
    vjp(params, cache, gy)                    gx, gparams
    jvp(params, cache, dx)                    dy  (tangent of forward at x)
    jvp_vjp(params, cache, jcache, gdy, gy)   gx, gdx, gparams

For a tanh layer a = tanh(s) the tangent is da = (1 - a^2) ds, so reversing
the tangent pass needs the second derivative d/ds (1 - a^2) = -2 a (1 - a^2).
Everything is plain numpy on float64; inputs broadcast over leading batch axes
collapsed to one.
"""

from __future__ import annotations

import numpy as np

from .validation import ContractError


def sigmoid(x):
    # tanh form is stable for large |x| in both directions
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(x, dtype=float)))

def softplus(x):
    return np.logaddexp(0.0, np.asarray(x, dtype=float))

def softplus_inv(y):
    y = np.asarray(y, dtype=float)
    # inverse of log(1+e^x): x = y + log(1 - e^-y), safe for y > 0
    return y + np.log(-np.expm1(-y))


class Mlp:
    """Fully connected net, tanh hidden layers, linear output."""

    def __init__(self, sizes):
        sizes = [int(s) for s in sizes]
        if len(sizes) < 2 or any(s <= 0 for s in sizes):
            raise ContractError(f"bad layer sizes {sizes}")
        self.sizes = sizes
        self.n_layers = len(sizes) - 1

    def init_params(self, rng: np.random.Generator) -> dict:
        params = {}
        for i in range(self.n_layers):
            fan_in, fan_out = self.sizes[i], self.sizes[i + 1]
            a = np.sqrt(6.0 / (fan_in + fan_out))
            params[f"W{i}"] = rng.uniform(-a, a, size=(fan_in, fan_out))
            params[f"b{i}"] = np.zeros(fan_out)
        return params

    def _check_x(self, x):
        x = np.asarray(x, dtype=float)
        if x.shape[-1] != self.sizes[0]:
            raise ContractError(
                f"input dim {x.shape[-1]} != expected {self.sizes[0]}")
        return x

    def forward(self, params: dict, x):
        y, _ = self.forward_cache(params, x)
        return y

    def forward_cache(self, params: dict, x):
        """Returns (y, cache); cache holds per-layer activations a_0..a_L."""
        x = self._check_x(x)
        a = [x]
        h = x
        for i in range(self.n_layers):
            s = h @ params[f"W{i}"] + params[f"b{i}"]
            h = np.tanh(s) if i < self.n_layers - 1 else s
            a.append(h)
        return h, a

    def vjp(self, params: dict, cache, gy):
        """Cotangent pass: gy has the output's shape, returns (gx, gparams)."""
        a = cache
        gparams = {}
        g = np.asarray(gy, dtype=float)
        for i in range(self.n_layers - 1, -1, -1):
            if i < self.n_layers - 1:
                g = g * (1.0 - a[i + 1] ** 2)
            gparams[f"W{i}"] = _outer_sum(a[i], g)
            gparams[f"b{i}"] = _bias_sum(g)
            g = g @ params[f"W{i}"].T
        return g, gparams

    def jvp(self, params: dict, cache, dx):
        dy, _ = self.jvp_cache(params, cache, dx)
        return dy

    def jvp_cache(self, params: dict, cache, dx):
        """Tangent pass. Returns (dy, jcache); jcache holds da_0..da_L."""
        a = cache
        d = np.asarray(dx, dtype=float)
        if d.shape != a[0].shape:
            raise ContractError(f"tangent shape {d.shape} != input {a[0].shape}")
        da = [d]
        for i in range(self.n_layers):
            ds = d @ params[f"W{i}"]
            d = ds * (1.0 - a[i + 1] ** 2) if i < self.n_layers - 1 else ds
            da.append(d)
        return d, da

    def jvp_vjp(self, params: dict, cache, jcache, gdy, gy=None):
        """Reverse through forward and tangent passes jointly.

        gdy is the cotangent on dy = jvp(...), gy an optional extra cotangent
        on y itself. Returns (gx, gdx, gparams). The tangent of a hidden layer
        is da = (1 - a^2) ds with ds = da_prev @ W, so its reverse needs
        gs += gda * ds * (-2 a (1 - a^2)) on top of the usual tanh backprop.
        """
        a, da = cache, jcache
        gparams = {}
        ga = np.zeros_like(a[-1]) if gy is None else np.asarray(gy, dtype=float)
        gda = np.asarray(gdy, dtype=float)
        for i in range(self.n_layers - 1, -1, -1):
            if i < self.n_layers - 1:
                t = 1.0 - a[i + 1] ** 2
                ds_i = da[i] @ params[f"W{i}"]
                gs = ga * t + gda * ds_i * (-2.0 * a[i + 1] * t)
                gds = gda * t
            else:
                gs, gds = ga, gda
            gparams[f"W{i}"] = _outer_sum(a[i], gs) + _outer_sum(da[i], gds)
            gparams[f"b{i}"] = _bias_sum(gs)
            ga = gs @ params[f"W{i}"].T
            gda = gds @ params[f"W{i}"].T
        return ga, gda, gparams


def _outer_sum(x, g):
    # sum over all leading axes of x[..., i] g[..., j]
    xf = x.reshape(-1, x.shape[-1])
    gf = g.reshape(-1, g.shape[-1])
    return xf.T @ gf

def _bias_sum(g):
    return g.reshape(-1, g.shape[-1]).sum(axis=0)


def tree_add(into: dict, other: dict, scale: float = 1.0) -> dict:
    for k, v in other.items():
        if k in into:
            into[k] = into[k] + scale * v
        else:
            into[k] = scale * v
    return into

def tree_scale(tree: dict, scale: float) -> dict:
    return {k: scale * v for k, v in tree.items()}

def flatten_params(params: dict):
    """Deterministic (sorted-key) flattening; returns (vector, spec)."""
    keys = sorted(params)
    spec = [(k, np.shape(params[k])) for k in keys]
    vec = np.concatenate([np.ravel(np.asarray(params[k], dtype=float)) for k in keys]) \
        if keys else np.zeros(0)
    return vec, spec

def unflatten_params(vec, spec) -> dict:
    out, i = {}, 0
    for k, shape in spec:
        n = int(np.prod(shape)) if shape else 1
        chunk = vec[i:i + n]
        out[k] = chunk.reshape(shape) if shape else float(chunk[0])
        i += n
    if i != len(vec):
        raise ContractError(f"flat vector length {len(vec)} != spec total {i}")
    return out


class Adam:
    """Adam on a flat dict of arrays. eps is kept tiny (1e-12, added to the
    root second moment) so update magnitudes are invariant to a uniform
    rescaling of the objective up to ~eps/|g| relative error."""

    def __init__(self, params: dict, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-12):
        self.lr = float(lr)
        self.beta1 = float(beta1)
        self.beta2 = float(beta2)
        self.eps = float(eps)
        self.t = 0
        self.m = {k: np.zeros_like(np.asarray(v, dtype=float)) for k, v in params.items()}
        self.v = {k: np.zeros_like(np.asarray(v, dtype=float)) for k, v in params.items()}

    def step(self, params: dict, grads: dict, lr: float | None = None) -> dict:
        self.t += 1
        lr = self.lr if lr is None else float(lr)
        b1t = 1.0 - self.beta1 ** self.t
        b2t = 1.0 - self.beta2 ** self.t
        for k in params:
            g = np.asarray(grads.get(k, 0.0), dtype=float)
            self.m[k] = self.beta1 * self.m[k] + (1.0 - self.beta1) * g
            self.v[k] = self.beta2 * self.v[k] + (1.0 - self.beta2) * g * g
            mhat = self.m[k] / b1t
            vhat = self.v[k] / b2t
            params[k] = params[k] - lr * mhat / (np.sqrt(vhat) + self.eps)
        return params
