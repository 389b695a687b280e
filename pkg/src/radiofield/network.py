"""Shared coarse/fine MLP with hand-written reverse mode.

The trunk maps the spatial encoding to a 64-wide feature (with the input
re-injected before the fifth layer); a softplus scalar head reads density
from that feature, and a two-layer head combines the feature with the
directional encoding to emit the real and imaginary signal amplitude.

All parameters live in one flat vector so the optimiser, checkpoints and
finite-difference checks can treat them uniformly; per-layer matrices are
views into it, stored ``(fan_in, fan_out)`` row-major.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np


@dataclass(frozen=True)
class MLPArchitecture:
    input_dim: int
    dir_dim: int = 20
    trunk_layers: int = 8
    trunk_width: int = 128
    feature_width: int = 64
    head_layers: int = 2
    head_width: int = 128
    skip_at: int = 4

    def __post_init__(self):
        if self.trunk_layers < 2 or not 0 < self.skip_at < self.trunk_layers:
            raise ValueError("skip layer must sit strictly inside the trunk")
        if self.head_layers < 1:
            raise ValueError("radiance head needs at least one layer")

    def layer_shapes(self) -> list[tuple[str, int, int]]:
        shapes = []
        fan_in = self.input_dim
        for i in range(self.trunk_layers):
            if i == self.skip_at:
                fan_in += self.input_dim
            fan_out = self.feature_width if i == self.trunk_layers - 1 else self.trunk_width
            shapes.append((f"trunk{i}", fan_in, fan_out))
            fan_in = fan_out
        shapes.append(("sigma", self.feature_width, 1))
        fan_in = self.feature_width + self.dir_dim
        for i in range(self.head_layers):
            fan_out = 2 if i == self.head_layers - 1 else self.head_width
            shapes.append((f"head{i}", fan_in, fan_out))
            fan_in = fan_out
        return shapes

    @property
    def n_params(self) -> int:
        return sum(i * o + o for _, i, o in self.layer_shapes())

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class MLPParams:
    arch: MLPArchitecture
    flat: np.ndarray
    layers: dict = field(init=False, repr=False)

    def __post_init__(self):
        if self.flat.shape != (self.arch.n_params,):
            raise ValueError(f"expected {self.arch.n_params} parameters, got {self.flat.shape}")
        self.layers = _views(self.arch, self.flat)

    @property
    def dtype(self):
        return self.flat.dtype

    def astype(self, dtype) -> "MLPParams":
        return MLPParams(self.arch, self.flat.astype(dtype))

    def copy(self) -> "MLPParams":
        return MLPParams(self.arch, self.flat.copy())


def _views(arch: MLPArchitecture, flat: np.ndarray) -> dict:
    views = {}
    pos = 0
    for name, fan_in, fan_out in arch.layer_shapes():
        w = flat[pos:pos + fan_in * fan_out].reshape(fan_in, fan_out)
        pos += fan_in * fan_out
        b = flat[pos:pos + fan_out]
        pos += fan_out
        views[name] = (w, b)
    return views


def init_params(arch: MLPArchitecture, seed: int, dtype=np.float64, sigma_bias: float = 0.0) -> MLPParams:
    """He-uniform weights (bound sqrt(6 / fan_in)); zero biases except the optional density bias.

    A negative ``sigma_bias`` starts the field nearly transparent so that
    distant samples receive gradient from the first iteration.
    """
    rng = np.random.default_rng(seed)
    flat = np.zeros(arch.n_params, dtype=np.float64)
    params = MLPParams(arch, flat)
    for name, fan_in, _ in arch.layer_shapes():
        w, _ = params.layers[name]
        bound = np.sqrt(6.0 / fan_in)
        w[...] = rng.uniform(-bound, bound, size=w.shape)
    params.layers["sigma"][1][...] = sigma_bias
    return params.astype(dtype)


@dataclass
class NetworkOutput:
    sigma: np.ndarray
    x_re: np.ndarray
    x_im: np.ndarray

    @property
    def x(self) -> np.ndarray:
        return self.x_re + 1j * self.x_im


def softplus(z):
    return np.logaddexp(0.0, z)


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def forward(params: MLPParams, spatial, directional, keep_cache: bool = True):
    """Evaluate the network on a batch of encoded samples.

    Returns ``(NetworkOutput, cache)``; the cache is ``None`` when
    ``keep_cache`` is false.
    """
    arch = params.arch
    dtype = params.dtype
    x = np.asarray(spatial, dtype=dtype)
    d = np.asarray(directional, dtype=dtype)
    if x.ndim != 2 or x.shape[1] != arch.input_dim:
        raise ValueError(f"spatial input must be (N, {arch.input_dim}), got {x.shape}")
    if d.ndim != 2 or d.shape != (x.shape[0], arch.dir_dim):
        raise ValueError(f"directional input must be (N, {arch.dir_dim}), got {d.shape}")
    L = params.layers
    acts = []
    h = x
    for i in range(arch.trunk_layers):
        w, b = L[f"trunk{i}"]
        if i == arch.skip_at:
            k = h.shape[1]
            z = h @ w[:k] + x @ w[k:]
        else:
            z = h @ w
        z += b
        np.maximum(z, 0, out=z)
        acts.append(z)
        h = z
    feat = h
    ws, bs = L["sigma"]
    s = (feat @ ws)[:, 0] + bs[0]
    sigma = softplus(s)
    head_acts = []
    g = None
    for i in range(arch.head_layers):
        w, b = L[f"head{i}"]
        if i == 0:
            k = feat.shape[1]
            z = feat @ w[:k] + d @ w[k:]
        else:
            z = g @ w
        z += b
        if i < arch.head_layers - 1:
            np.maximum(z, 0, out=z)
            head_acts.append(z)
        g = z
    out = NetworkOutput(sigma, g[:, 0].copy(), g[:, 1].copy())
    cache = (x, d, acts, s, head_acts) if keep_cache else None
    return out, cache


def backward(params: MLPParams, cache, d_sigma, d_xre, d_xim, input_grads: bool = False):
    """Exact gradients of ``sum(d_sigma*sigma + d_xre*x_re + d_xim*x_im)``.

    Returns the flat parameter gradient, plus ``(d_spatial, d_directional)``
    when ``input_grads`` is set.
    """
    arch = params.arch
    dtype = params.dtype
    x, d, acts, s, head_acts = cache
    L = params.layers
    grad = np.zeros(arch.n_params, dtype=dtype)
    G = _views(arch, grad)
    feat = acts[-1]

    d_out = np.stack([np.asarray(d_xre, dtype=dtype), np.asarray(d_xim, dtype=dtype)], axis=1)
    d_feat = None
    d_dir = None
    dz = d_out
    for i in reversed(range(arch.head_layers)):
        w, _ = L[f"head{i}"]
        gw, gb = G[f"head{i}"]
        gb[...] = dz.sum(axis=0)
        if i == 0:
            k = feat.shape[1]
            gw[:k] = feat.T @ dz
            gw[k:] = d.T @ dz
            d_feat = dz @ w[:k].T
            if input_grads:
                d_dir = dz @ w[k:].T
        else:
            prev = head_acts[i - 1]
            gw[...] = prev.T @ dz
            dz = (dz @ w.T) * (prev > 0)

    ds = (np.asarray(d_sigma, dtype=dtype) * _sigmoid(s).astype(dtype))[:, None]
    ws, _ = L["sigma"]
    gws, gbs = G["sigma"]
    gws[...] = feat.T @ ds
    gbs[...] = ds.sum(axis=0)
    d_feat = d_feat + ds @ ws.T

    dh = d_feat
    d_x = np.zeros_like(x) if input_grads else None
    for i in reversed(range(arch.trunk_layers)):
        w, _ = L[f"trunk{i}"]
        gw, gb = G[f"trunk{i}"]
        dz = dh * (acts[i] > 0)
        gb[...] = dz.sum(axis=0)
        h_in = acts[i - 1] if i > 0 else x
        if i == arch.skip_at:
            k = h_in.shape[1]
            gw[:k] = h_in.T @ dz
            gw[k:] = x.T @ dz
            if input_grads:
                d_x += dz @ w[k:].T
            dh = dz @ w[:k].T
        else:
            gw[...] = h_in.T @ dz
            if i > 0 or input_grads:
                dh = dz @ w.T
    if input_grads:
        d_x += dh
        return grad, d_x, d_dir
    return grad
