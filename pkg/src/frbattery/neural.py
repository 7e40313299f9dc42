"""Small multilayer perceptrons with hand-written reverse-mode gradients.

A network standardizes its input with stored statistics, applies affine
layers with relu/tanh/identity/square activations, and then either projects a
tanh output box [-1, 1]^m affinely onto [lo, hi]^m (policies) or rescales
an identity output by a stored shift/scale (critics). Parameters are the
layer weights and biases only; normalization statistics are fixed data.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

ACTIVATIONS = ("relu", "tanh", "identity", "square")
FORMAT_VERSION = 1


def _act(name, z):
    if name == "relu":
        return np.maximum(z, 0.0)
    if name == "tanh":
        return np.tanh(z)
    if name == "square":
        return z * z
    return z


def _act_grad(name, z, h):
    if name == "relu":
        return (z > 0.0).astype(z.dtype)
    if name == "tanh":
        return 1.0 - h * h
    if name == "square":
        return 2.0 * z
    return np.ones_like(z)


class Mlp:
    """Feed-forward network.

    Parameters
    ----------
    weights, biases : lists of arrays, W has shape (out, in)
    activations : list of activation names, one per layer
    out_lo, out_hi : optional projection box (requires a final tanh)
    in_mean, in_std : input standardization
    out_shift, out_scale : output rescaling for non-projected nets
    """

    def __init__(self, weights, biases, activations, out_lo=None, out_hi=None,
                 in_mean=None, in_std=None, out_shift=0.0, out_scale=1.0):
        self.W = [np.array(w, dtype=float) for w in weights]
        self.b = [np.array(b, dtype=float).ravel() for b in biases]
        self.activations = list(activations)
        if not (len(self.W) == len(self.b) == len(self.activations)) or not self.W:
            raise ValueError("need one weight, bias and activation per layer")
        for i, (w, b, a) in enumerate(zip(self.W, self.b, self.activations)):
            if a not in ACTIVATIONS:
                raise ValueError(f"unknown activation {a!r}")
            if w.ndim != 2 or b.shape != (w.shape[0],):
                raise ValueError(f"layer {i}: bias does not match weight rows")
            if i and self.W[i - 1].shape[0] != w.shape[1]:
                raise ValueError(f"layer {i}: input dim {w.shape[1]} != previous output {self.W[i - 1].shape[0]}")
        if (out_lo is None) != (out_hi is None):
            raise ValueError("out_lo and out_hi go together")
        if out_lo is not None:
            if self.activations[-1] != "tanh":
                raise ValueError("output projection requires a final tanh layer")
            self.out_lo = np.broadcast_to(np.asarray(out_lo, dtype=float), (self.n_out,)).copy()
            self.out_hi = np.broadcast_to(np.asarray(out_hi, dtype=float), (self.n_out,)).copy()
            if np.any(self.out_lo > self.out_hi):
                raise ValueError("projection box needs lo <= hi")
        else:
            self.out_lo = self.out_hi = None
        self.in_mean = np.zeros(self.n_in) if in_mean is None else np.asarray(in_mean, dtype=float).copy()
        self.in_std = np.ones(self.n_in) if in_std is None else np.asarray(in_std, dtype=float).copy()
        if self.in_mean.shape != (self.n_in,) or self.in_std.shape != (self.n_in,) or np.any(self.in_std <= 0):
            raise ValueError("input standardization must match the input size with std > 0")
        self.out_shift = np.broadcast_to(np.asarray(out_shift, dtype=float), (self.n_out,)).copy()
        self.out_scale = np.broadcast_to(np.asarray(out_scale, dtype=float), (self.n_out,)).copy()
        if np.any(self.out_scale <= 0):
            raise ValueError("out_scale must be > 0")

    # -- shape helpers -------------------------------------------------
    @property
    def n_in(self) -> int:
        return self.W[0].shape[1]

    @property
    def n_out(self) -> int:
        return self.W[-1].shape[0]

    @property
    def sizes(self) -> list[int]:
        return [self.n_in] + [w.shape[0] for w in self.W]

    @property
    def projected(self) -> bool:
        return self.out_lo is not None

    def params(self) -> list[np.ndarray]:
        out = []
        for w, b in zip(self.W, self.b):
            out += [w, b]
        return out

    def set_params(self, params) -> None:
        for i in range(len(self.W)):
            self.W[i][...] = params[2 * i]
            self.b[i][...] = params[2 * i + 1]

    def flat_params(self) -> np.ndarray:
        return np.concatenate([p.ravel() for p in self.params()])

    def set_flat_params(self, theta) -> None:
        theta = np.asarray(theta, dtype=float)
        k = 0
        for p in self.params():
            p[...] = theta[k:k + p.size].reshape(p.shape)
            k += p.size
        if k != theta.size:
            raise ValueError("flat parameter vector has the wrong length")

    def copy(self) -> "Mlp":
        return Mlp(self.W, self.b, self.activations, self.out_lo, self.out_hi, self.in_mean, self.in_std,
                   self.out_shift, self.out_scale)

    def set_input_scaler(self, X) -> None:
        X = np.atleast_2d(np.asarray(X, dtype=float))
        self.in_mean = X.mean(axis=0)
        std = X.std(axis=0)
        self.in_std = np.where(std > 1e-12, std, 1.0)

    def set_output_scaler(self, y) -> None:
        if self.projected:
            raise ValueError("projected networks have a fixed output box")
        y = np.asarray(y, dtype=float).reshape(-1, self.n_out)
        self.out_shift = y.mean(axis=0)
        std = y.std(axis=0)
        self.out_scale = np.where(std > 1e-12, std, 1.0)

    # -- evaluation ----------------------------------------------------
    def _check_x(self, x):
        x = np.asarray(x, dtype=float)
        single = x.ndim == 1
        X = np.atleast_2d(x)
        if X.shape[1] != self.n_in:
            raise ValueError(f"input dimension {X.shape[1]} != {self.n_in}")
        return X, single

    def forward_cache(self, X, noise=None):
        """Batch forward pass keeping intermediates; `noise` is added before the last activation."""
        h = (X - self.in_mean) / self.in_std
        hs = [h]
        zs = []
        L = len(self.W)
        for i in range(L):
            z = h @ self.W[i].T + self.b[i]
            if i == L - 1 and noise is not None:
                z = z + noise
            h = _act(self.activations[i], z)
            zs.append(z)
            hs.append(h)
        if self.projected:
            y = self.out_lo + (h + 1.0) * 0.5 * (self.out_hi - self.out_lo)
            y = np.clip(y, self.out_lo, self.out_hi)
        else:
            y = self.out_shift + self.out_scale * h
        return y, (zs, hs)

    def forward(self, x, noise=None):
        X, single = self._check_x(x)
        y, _ = self.forward_cache(X, noise)
        return y[0] if single else y

    __call__ = forward

    def raw_output(self, X):
        """Last-layer activation before projection or rescaling."""
        X, _ = self._check_x(X)
        _, (zs, hs) = self.forward_cache(X)
        return hs[-1]

    def backward(self, cache, dY, output_space="final"):
        """Gradients of sum(dY * y) w.r.t. parameters and raw (unstandardized) inputs.

        With ``output_space="raw"``, ``dY`` is taken w.r.t. the last-layer
        activation instead of the projected/rescaled output.
        """
        zs, hs = cache
        if output_space == "final":
            if self.projected:
                dH = dY * 0.5 * (self.out_hi - self.out_lo)
            else:
                dH = dY * self.out_scale
        else:
            dH = dY
        grads = [None] * (2 * len(self.W))
        for i in range(len(self.W) - 1, -1, -1):
            dZ = dH * _act_grad(self.activations[i], zs[i], hs[i + 1])
            grads[2 * i] = dZ.T @ hs[i]
            grads[2 * i + 1] = dZ.sum(axis=0)
            dH = dZ @ self.W[i]
        dX = dH / self.in_std
        return grads, dX

    # -- serialization -------------------------------------------------
    def to_dict(self) -> dict:
        return {
            "format": "frbattery-mlp",
            "version": FORMAT_VERSION,
            "sizes": self.sizes,
            "activations": self.activations,
            "weights": [w.tolist() for w in self.W],
            "biases": [b.tolist() for b in self.b],
            "out_lo": None if self.out_lo is None else self.out_lo.tolist(),
            "out_hi": None if self.out_hi is None else self.out_hi.tolist(),
            "in_mean": self.in_mean.tolist(),
            "in_std": self.in_std.tolist(),
            "out_shift": self.out_shift.tolist(),
            "out_scale": self.out_scale.tolist(),
        }

    @classmethod
    def from_dict(cls, d) -> "Mlp":
        if d.get("format") != "frbattery-mlp" or d.get("version") != FORMAT_VERSION:
            raise ValueError("not a frbattery-mlp v1 container")
        net = cls(d["weights"], d["biases"], d["activations"], d["out_lo"], d["out_hi"], d["in_mean"],
                  d["in_std"], d["out_shift"], d["out_scale"])
        if net.sizes != list(d["sizes"]):
            raise ValueError("layer shapes disagree with the recorded sizes")
        return net

    def save(self, path) -> None:
        # json writes floats with repr(), which round-trips float64 exactly
        Path(path).write_text(json.dumps(self.to_dict()))

    @classmethod
    def load(cls, path) -> "Mlp":
        return cls.from_dict(json.loads(Path(path).read_text()))


def init_mlp(sizes, activations, rng, out_lo=None, out_hi=None) -> Mlp:
    """He-uniform weights for relu layers, Xavier-uniform otherwise; zero biases."""
    rng = np.random.default_rng(rng)
    Ws, bs = [], []
    for fan_in, fan_out, act in zip(sizes[:-1], sizes[1:], activations):
        if act == "relu":
            lim = np.sqrt(6.0 / fan_in)
        else:
            lim = np.sqrt(6.0 / (fan_in + fan_out))
        Ws.append(rng.uniform(-lim, lim, size=(fan_out, fan_in)))
        bs.append(np.zeros(fan_out))
    return Mlp(Ws, bs, activations, out_lo, out_hi)


POLICY_SIZES = (6, 30, 15, 2)
CRITIC_SIZES = (8, 30, 15, 1)


def policy_net(P_max: float, rng) -> Mlp:
    """6-30-15-2 policy with tanh output projected to F in [0, P_max], O-L in [-P_max, P_max]."""
    return init_mlp(POLICY_SIZES, ("relu", "relu", "tanh"), rng,
                    out_lo=[0.0, -P_max], out_hi=[P_max, P_max])


def critic_net(rng) -> Mlp:
    """8-30-15-1 critic on concat(x, a) with relu hidden layers and a linear output."""
    return init_mlp(CRITIC_SIZES, ("relu", "relu", "identity"), rng)


# -- losses ---------------------------------------------------------------

def mae_policy_loss(net: Mlp, X, A):
    """Mean absolute action error, each action divided by its box width."""
    X, _ = net._check_x(X)
    A = np.atleast_2d(np.asarray(A, dtype=float))
    Y, cache = net.forward_cache(X)
    w = net.out_hi - net.out_lo if net.projected else net.out_scale
    E = (Y - A) / w
    return float(np.mean(np.abs(E))), (E, cache, w)


def mae_policy_grad(net: Mlp, X, A):
    """Loss value and its gradient; the subgradient of |e| at e = 0 is 0."""
    loss, (E, cache, w) = mae_policy_loss(net, X, A)
    dY = np.sign(E) / (E.size * w)
    grads, _ = net.backward(cache, dY)
    return loss, grads


def td_mae_loss(net: Mlp, XA, y):
    """Mean |Q(x, a) - y| measured in the critic's normalized output units."""
    XA, _ = net._check_x(XA)
    y = np.asarray(y, dtype=float).reshape(-1, 1)
    Q, cache = net.forward_cache(XA)
    E = (Q - y) / net.out_scale
    return float(np.mean(np.abs(E))), (E, cache)


def td_mae_grad(net: Mlp, XA, y):
    """Gradient of :func:`td_mae_loss`; `y` is a detached target."""
    loss, (E, cache) = td_mae_loss(net, XA, y)
    dY = np.sign(E) / (E.size * net.out_scale)
    grads, _ = net.backward(cache, dY)
    return loss, grads


def grad(net: Mlp, loss: str, batch):
    """Dispatch: loss in {"mae_policy", "td_mae"}; batch = (inputs, targets)."""
    if loss == "mae_policy":
        return mae_policy_grad(net, *batch)
    if loss == "td_mae":
        return td_mae_grad(net, *batch)
    raise ValueError(f"unknown loss {loss!r}")


def actor_grad_chain(policy: Mlp, critic: Mlp, X, noise=None):
    """Gradient of mean_i Q(x_i, mu(x_i)) w.r.t. the policy parameters.

    Returns (mean Q, gradient list). The critic input is concat(x, mu(x)).
    """
    X, _ = policy._check_x(X)
    A, pcache = policy.forward_cache(X, noise)
    XA = np.hstack([X, A])
    Q, ccache = critic.forward_cache(XA)
    n = X.shape[0]
    _, dXA = critic.backward(ccache, np.full_like(Q, 1.0 / n))
    dA = dXA[:, X.shape[1]:]
    # the clip in the projection is inactive for a tanh output, so pass-through
    grads, _ = policy.backward(pcache, dA)
    return float(Q.mean()), grads


# -- optimizer --------------------------------------------------------------

@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)
    t: int = 0

    @classmethod
    def for_net(cls, net: Mlp, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8) -> "AdamState":
        return cls(lr, beta1, beta2, eps, [np.zeros_like(p) for p in net.params()],
                   [np.zeros_like(p) for p in net.params()], 0)


def adam_step(net: Mlp, state: AdamState, grads, ascend: bool = False):
    """One bias-corrected Adam update, in place. Returns (net, state)."""
    params = net.params()
    if len(grads) != len(params) or len(state.m) != len(params):
        raise ValueError("gradient/moment structure does not match the network")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    sgn = 1.0 if ascend else -1.0
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if g.shape != p.shape:
            raise ValueError("gradient shape does not match parameter")
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p += sgn * state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return net, state


def soft_update(target: Mlp, online: Mlp, tau: float) -> None:
    """theta' <- tau * theta + (1 - tau) * theta', in place."""
    if not (0.0 <= tau <= 1.0):
        raise ValueError("tau must lie in [0, 1]")
    for pt, po in zip(target.params(), online.params()):
        if tau == 1.0:
            pt[...] = po
        elif tau != 0.0:
            pt *= 1.0 - tau
            pt += tau * po
