"""Small dense/convolutional policy networks with exact analytic gradients.

No autodiff framework: each layer implements its own forward/backward pair
and the training losses supply gradients w.r.t. the network outputs.  All
math is float64 numpy; parameters live in plain arrays so runs are bitwise
reproducible from their seeds.

A network maps a flat observation vector to `action_count` logits, plus one
value output when it has a critic head (the extra slot of the final layer).
Convolutional layers support a fixed number of leading passthrough features
(the heading one-hot of gridworld observations) that bypass the convolution
and are re-appended in front of its flattened output.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

ACTIVATIONS = ("linear", "relu", "tanh")


class ShapeError(Exception):
    """Input, gradient, or parameter shapes do not chain correctly."""


def _activate(z: np.ndarray, kind: str) -> np.ndarray:
    if kind == "relu":
        return np.maximum(z, 0.0)
    if kind == "tanh":
        return np.tanh(z)
    return z


def _activate_grad(z: np.ndarray, kind: str) -> np.ndarray:
    if kind == "relu":
        return np.where(z > 0, 1.0, 0.0)
    if kind == "tanh":
        return 1.0 - np.tanh(z) ** 2
    return np.ones_like(z)


class Dense:
    """Fully connected layer: y = act(x @ W.T + b)."""

    kind = "dense"

    def __init__(self, weight: np.ndarray, bias: np.ndarray, activation: str = "linear"):
        if activation not in ACTIVATIONS:
            raise ShapeError(f"unknown activation {activation!r}")
        if weight.shape[0] != bias.shape[0]:
            raise ShapeError("bias length must match output rows")
        self.weight = weight
        self.bias = bias
        self.activation = activation

    @property
    def in_size(self) -> int:
        return self.weight.shape[1]

    @property
    def out_size(self) -> int:
        return self.weight.shape[0]

    def forward(self, x: np.ndarray):
        z = x @ self.weight.T + self.bias
        return _activate(z, self.activation), (x, z)

    def backward(self, dy: np.ndarray, cache):
        x, z = cache
        dz = dy * _activate_grad(z, self.activation)
        dw = dz.T @ x
        db = dz.sum(axis=0)
        dx = dz @ self.weight
        return dx, dw, db


def _im2col(img: np.ndarray, k: int) -> np.ndarray:
    """(N, C, H, W) -> (N, C*k*k, OH*OW) patch matrix for valid convolution."""
    n, c, h, w = img.shape
    oh, ow = h - k + 1, w - k + 1
    cols = np.empty((n, c, k, k, oh, ow), dtype=img.dtype)
    for i in range(k):
        for j in range(k):
            cols[:, :, i, j] = img[:, :, i : i + oh, j : j + ow]
    return cols.reshape(n, c * k * k, oh * ow)


def _col2im(dcols: np.ndarray, c: int, h: int, w: int, k: int) -> np.ndarray:
    """Adjoint of _im2col: scatter patch gradients back onto the image."""
    n = dcols.shape[0]
    oh, ow = h - k + 1, w - k + 1
    dcols = dcols.reshape(n, c, k, k, oh, ow)
    dimg = np.zeros((n, c, h, w), dtype=dcols.dtype)
    for i in range(k):
        for j in range(k):
            dimg[:, :, i : i + oh, j : j + ow] += dcols[:, :, i, j]
    return dimg


class Conv2d:
    """Valid (no padding, stride 1) convolution over a flattened image input.

    The input vector is [passthrough features | image (C, H, W) row-major];
    passthrough features skip the convolution and are prepended unchanged to
    the flattened activation map, so the layer still maps vector to vector.
    """

    kind = "conv"

    def __init__(self, weight: np.ndarray, bias: np.ndarray, in_shape: tuple[int, int, int],
                 activation: str = "linear", passthrough: int = 0):
        if activation not in ACTIVATIONS:
            raise ShapeError(f"unknown activation {activation!r}")
        out_c, in_c, kh, kw = weight.shape
        if kh != kw:
            raise ShapeError("only square kernels supported")
        if in_shape[0] != in_c:
            raise ShapeError("kernel input channels must match in_shape")
        if bias.shape[0] != out_c:
            raise ShapeError("bias length must match output channels")
        if in_shape[1] < kh or in_shape[2] < kw:
            raise ShapeError("kernel larger than input image")
        self.weight = weight
        self.bias = bias
        self.in_shape = in_shape
        self.activation = activation
        self.passthrough = passthrough

    @property
    def kernel(self) -> int:
        return self.weight.shape[2]

    @property
    def out_shape(self) -> tuple[int, int, int]:
        c, h, w = self.in_shape
        k = self.kernel
        return (self.weight.shape[0], h - k + 1, w - k + 1)

    @property
    def in_size(self) -> int:
        c, h, w = self.in_shape
        return self.passthrough + c * h * w

    @property
    def out_size(self) -> int:
        oc, oh, ow = self.out_shape
        return self.passthrough + oc * oh * ow

    def forward(self, x: np.ndarray):
        n = x.shape[0]
        c, h, w = self.in_shape
        pt = self.passthrough
        img = x[:, pt:].reshape(n, c, h, w)
        cols = _im2col(img, self.kernel)
        wmat = self.weight.reshape(self.weight.shape[0], -1)
        z = np.einsum("oi,nip->nop", wmat, cols) + self.bias[None, :, None]
        a = _activate(z, self.activation)
        y = np.concatenate([x[:, :pt], a.reshape(n, -1)], axis=1)
        return y, (x, z, cols)

    def backward(self, dy: np.ndarray, cache):
        x, z, cols = cache
        n = x.shape[0]
        c, h, w = self.in_shape
        pt = self.passthrough
        oc, oh, ow = self.out_shape
        da = dy[:, pt:].reshape(n, oc, oh * ow)
        dz = da * _activate_grad(z, self.activation)
        dw = np.einsum("nop,nip->oi", dz, cols).reshape(self.weight.shape)
        db = dz.sum(axis=(0, 2))
        wmat = self.weight.reshape(oc, -1)
        dcols = np.einsum("oi,nop->nip", wmat, dz)
        dimg = _col2im(dcols, c, h, w, self.kernel)
        dx = np.concatenate([dy[:, :pt], dimg.reshape(n, -1)], axis=1)
        return dx, dw, db


class PolicyNet:
    """Layer stack producing action logits and, with a critic head, a value.

    The final layer has action_count (+1 with critic) outputs; the value is
    the trailing slot.  entropy_coef is the exploration bonus weight this
    agent trains with.
    """

    def __init__(self, layers, action_count: int, has_critic: bool, entropy_coef: float):
        out = layers[-1].out_size
        expected = action_count + (1 if has_critic else 0)
        if out != expected:
            raise ShapeError(f"final layer emits {out} outputs, need {expected}")
        for prev, nxt in zip(layers, layers[1:]):
            if prev.out_size != nxt.in_size:
                raise ShapeError(
                    f"layer sizes do not chain: {prev.out_size} -> {nxt.in_size}"
                )
        self.layers = list(layers)
        self.action_count = action_count
        self.has_critic = has_critic
        self.entropy_coef = entropy_coef

    @property
    def obs_length(self) -> int:
        return self.layers[0].in_size

    def forward_batch(self, x: np.ndarray):
        """Returns (logits (N, A), values (N,) or None, caches for backprop)."""
        if x.ndim != 2 or x.shape[1] != self.obs_length:
            raise ShapeError(f"expected (N, {self.obs_length}) input, got {x.shape}")
        caches = []
        h = x
        for layer in self.layers:
            h, cache = layer.forward(h)
            caches.append(cache)
        if self.has_critic:
            return h[:, : self.action_count], h[:, self.action_count], caches
        return h, None, caches

    def forward(self, obs: np.ndarray):
        """Single-observation forward pass -> (logits, value or None)."""
        logits, values, _ = self.forward_batch(obs[None, :])
        value = float(values[0]) if values is not None else None
        return logits[0], value

    def backprop(self, caches, dlogits: np.ndarray, dvalues: np.ndarray | None = None):
        """Exact gradients of a scalar loss given its gradient at the outputs.

        dlogits is (N, A); dvalues is (N,) for critic nets (None treated as
        zeros).  Returns [(dW, db), ...] congruent with self.layers.
        """
        if self.has_critic:
            dv = dvalues if dvalues is not None else np.zeros(dlogits.shape[0])
            dh = np.concatenate([dlogits, dv[:, None]], axis=1)
        else:
            if dvalues is not None:
                raise ShapeError("value gradient supplied for a critic-free net")
            dh = dlogits
        grads: list[tuple[np.ndarray, np.ndarray]] = [None] * len(self.layers)
        for i in range(len(self.layers) - 1, -1, -1):
            dh, dw, db = self.layers[i].backward(dh, caches[i])
            grads[i] = (dw, db)
        for dw, db in grads:
            if not (np.isfinite(dw).all() and np.isfinite(db).all()):
                raise FloatingPointError("non-finite gradient")
        return grads

    # -- parameter plumbing -------------------------------------------------

    def param_arrays(self):
        for layer in self.layers:
            yield layer.weight
            yield layer.bias

    def n_params(self) -> int:
        return sum(a.size for a in self.param_arrays())

    def get_flat_params(self) -> np.ndarray:
        return np.concatenate([a.ravel() for a in self.param_arrays()])

    def set_flat_params(self, flat: np.ndarray) -> None:
        if flat.size != self.n_params():
            raise ShapeError(f"expected {self.n_params()} params, got {flat.size}")
        pos = 0
        for a in self.param_arrays():
            a[...] = flat[pos : pos + a.size].reshape(a.shape)
            pos += a.size


def action_distribution(logits: np.ndarray) -> np.ndarray:
    """Stable softmax (max-subtracted); sums to 1 within 1e-12."""
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def sample_action(dist: np.ndarray, rng: np.random.Generator) -> tuple[int, float]:
    """Inverse-CDF draw over the fixed action order; returns (action, prob)."""
    u = rng.random()
    cum = np.cumsum(dist)
    action = int(np.searchsorted(cum, u, side="right"))
    action = min(action, len(dist) - 1)
    return action, float(dist[action])


def entropy(dist: np.ndarray) -> float:
    p = np.asarray(dist, dtype=np.float64)
    terms = np.where(p > 0, p * np.log(np.where(p > 0, p, 1.0)), 0.0)
    return float(-terms.sum())


def entropy_batch(probs: np.ndarray) -> np.ndarray:
    terms = np.where(probs > 0, probs * np.log(np.where(probs > 0, probs, 1.0)), 0.0)
    return -terms.sum(axis=-1)


@dataclass
class AdamState:
    """Adaptive-moment optimizer state for one network."""

    m: list
    v: list
    step_count: int
    lr: float
    beta1: float
    beta2: float
    eps: float


def make_adam(net: PolicyNet, lr: float = 3e-4, beta1: float = 0.9,
              beta2: float = 0.999, eps: float = 1e-8) -> AdamState:
    zeros = lambda: [np.zeros_like(a) for a in net.param_arrays()]
    return AdamState(m=zeros(), v=zeros(), step_count=0, lr=lr, beta1=beta1,
                     beta2=beta2, eps=eps)


def adam_step(net: PolicyNet, grads, state: AdamState) -> PolicyNet:
    """One adaptive-moment update, in place; returns the net for chaining."""
    flat_grads = [g for pair in grads for g in pair]
    params = list(net.param_arrays())
    if len(flat_grads) != len(params):
        raise ShapeError("gradient list does not match parameter list")
    state.step_count += 1
    t = state.step_count
    bc1 = 1.0 - state.beta1**t
    bc2 = 1.0 - state.beta2**t
    for p, g, m, v in zip(params, flat_grads, state.m, state.v):
        if p.shape != g.shape:
            raise ShapeError(f"gradient shape {g.shape} != param shape {p.shape}")
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        p -= state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
    return net


def clone_params(src: PolicyNet, actor_only: bool = False,
                 entropy_coef: float | None = None) -> PolicyNet:
    """Deep copy of a network; actor_only drops the critic output slot."""
    layers = []
    for layer in src.layers:
        w, b = layer.weight.copy(), layer.bias.copy()
        if layer.kind == "dense":
            layers.append(Dense(w, b, layer.activation))
        else:
            layers.append(Conv2d(w, b, layer.in_shape, layer.activation, layer.passthrough))
    has_critic = src.has_critic
    if actor_only and src.has_critic:
        last = layers[-1]
        if last.kind != "dense":
            raise ShapeError("actor_only clone requires a dense output layer")
        layers[-1] = Dense(last.weight[: src.action_count].copy(),
                           last.bias[: src.action_count].copy(), last.activation)
        has_critic = False
    e = src.entropy_coef if entropy_coef is None else entropy_coef
    return PolicyNet(layers, src.action_count, has_critic, e)


def copy_actor_weights(src: PolicyNet, dst: PolicyNet) -> None:
    """Overwrite dst's parameters with src's actor parameters.

    src may carry a critic slot that dst lacks; hidden layers must match.
    """
    if len(src.layers) != len(dst.layers) or src.action_count != dst.action_count:
        raise ShapeError("networks are not role-compatible")
    for i, (ls, ld) in enumerate(zip(src.layers, dst.layers)):
        ws, bs = ls.weight, ls.bias
        if i == len(src.layers) - 1 and src.has_critic and not dst.has_critic:
            ws, bs = ws[: src.action_count], bs[: src.action_count]
        if ws.shape != ld.weight.shape:
            raise ShapeError(f"layer {i} shape mismatch: {ws.shape} vs {ld.weight.shape}")
        ld.weight[...] = ws
        ld.bias[...] = bs


# -- builders ---------------------------------------------------------------


@dataclass
class NetConfig:
    conv_channels: tuple[int, int] = (8, 16)
    conv_kernel: int = 3
    grid_hidden: int = 64
    mlp_hidden: tuple[int, int] = (64, 64)
    policy_head_scale: float = 0.01


def _init_dense(rng, out_size, in_size, activation, scale=1.0):
    gain = np.sqrt(2.0 / in_size) if activation == "relu" else np.sqrt(1.0 / in_size)
    w = rng.normal(0.0, gain * scale, size=(out_size, in_size))
    return Dense(w, np.zeros(out_size), activation)


def _init_conv(rng, out_c, in_shape, kernel, activation, passthrough):
    in_c = in_shape[0]
    fan_in = in_c * kernel * kernel
    gain = np.sqrt(2.0 / fan_in) if activation == "relu" else np.sqrt(1.0 / fan_in)
    w = rng.normal(0.0, gain, size=(out_c, in_c, kernel, kernel))
    return Conv2d(w, np.zeros(out_c), in_shape, activation, passthrough)


def make_grid_net(size: int, action_count: int, has_critic: bool, entropy_coef: float,
                  rng: np.random.Generator, cfg: NetConfig | None = None) -> PolicyNet:
    """Two conv layers over the grid image (heading bypasses), two dense layers."""
    cfg = cfg or NetConfig()
    c1, c2 = cfg.conv_channels
    k = cfg.conv_kernel
    conv1 = _init_conv(rng, c1, (3, size, size), k, "relu", passthrough=4)
    s1 = size - k + 1
    conv2 = _init_conv(rng, c2, (c1, s1, s1), k, "relu", passthrough=4)
    s2 = s1 - k + 1
    hidden = _init_dense(rng, cfg.grid_hidden, 4 + c2 * s2 * s2, "relu")
    out = action_count + (1 if has_critic else 0)
    head = _init_dense(rng, out, cfg.grid_hidden, "linear", scale=cfg.policy_head_scale)
    return PolicyNet([conv1, conv2, hidden, head], action_count, has_critic, entropy_coef)


def make_mlp_net(obs_length: int, action_count: int, has_critic: bool, entropy_coef: float,
                 rng: np.random.Generator, cfg: NetConfig | None = None) -> PolicyNet:
    """Two tanh hidden layers; the default cart-pole architecture."""
    cfg = cfg or NetConfig()
    h1, h2 = cfg.mlp_hidden
    out = action_count + (1 if has_critic else 0)
    layers = [
        _init_dense(rng, h1, obs_length, "tanh"),
        _init_dense(rng, h2, h1, "tanh"),
        _init_dense(rng, out, h2, "linear", scale=cfg.policy_head_scale),
    ]
    return PolicyNet(layers, action_count, has_critic, entropy_coef)


# -- checkpoint format --------------------------------------------------------


def save_params(net: PolicyNet, path) -> None:
    """JSON shape header line, then all parameters as little-endian float32."""
    header = {
        "action_count": net.action_count,
        "has_critic": net.has_critic,
        "entropy_coef": net.entropy_coef,
        "layers": [],
    }
    for layer in net.layers:
        if layer.kind == "dense":
            header["layers"].append({
                "kind": "dense",
                "shape": list(layer.weight.shape),
                "activation": layer.activation,
            })
        else:
            header["layers"].append({
                "kind": "conv",
                "shape": list(layer.weight.shape),
                "in_shape": list(layer.in_shape),
                "activation": layer.activation,
                "passthrough": layer.passthrough,
            })
    flat = net.get_flat_params().astype("<f4")
    with open(path, "wb") as fh:
        fh.write(json.dumps(header).encode("utf-8"))
        fh.write(b"\n")
        fh.write(flat.tobytes())


def load_params(path) -> PolicyNet:
    with open(path, "rb") as fh:
        header = json.loads(fh.readline().decode("utf-8"))
        flat = np.frombuffer(fh.read(), dtype="<f4").astype(np.float64)
    layers = []
    for spec in header["layers"]:
        shape = tuple(spec["shape"])
        if spec["kind"] == "dense":
            layers.append(Dense(np.zeros(shape), np.zeros(shape[0]), spec["activation"]))
        else:
            layers.append(Conv2d(np.zeros(shape), np.zeros(shape[0]),
                                 tuple(spec["in_shape"]), spec["activation"],
                                 spec["passthrough"]))
    net = PolicyNet(layers, header["action_count"], header["has_critic"],
                    header["entropy_coef"])
    net.set_flat_params(flat)
    return net
