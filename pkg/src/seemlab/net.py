"""ReLU MLP Q-network with exact hand-derived gradients.

The network is the scalar-output MLP

    f(x) = W_{L-1} h_{L-1} + b_{L-1},   h_{l+1} = relu(W_l h_l + b_l)

with three optional normalization modes:

* ``layernorm`` / ``layernorm_no_affine``: between every hidden linear map
  and its ReLU, each pre-activation row z is replaced by

      psi(z) = sqrt(d) * (z - mean(z)) / (||z - mean(z)|| + 1e-8)

  (the affine variant then applies a learnable per-unit gain and shift).
  psi is scale invariant, psi(c*z) = psi(z) for c > 0, which is what bounds
  the tangent kernel along rays. The output layer is never normalized.
* ``weightnorm``: the output weight row is reparameterized as
  w = scale * v / ||v|| with a learnable scalar scale.

Parameters live in one flat float64 vector; the layout is fixed per spec
(W0, b0[, gain0, shift0], W1, ...; weightnorm appends its scale last), so a
parameter vector plus its spec is a complete checkpoint.

Gradients are reverse-mode by hand, per sample: ``gradient_features``
returns the P x M matrix whose column i is the gradient of f at input i
(the tangent-kernel feature map). ``grad_factors``/``gram`` compute Gram
matrices of those features without materializing the P x M matrix, using
the block identity <d z (x) h(x), d z(y) h(y)> = (dz.dz')(h.h') per layer.
"""

from __future__ import annotations

import base64
import json
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

NORM_NONE = "none"
NORM_LAYERNORM = "layernorm"
NORM_LAYERNORM_NO_AFFINE = "layernorm_no_affine"
NORM_WEIGHTNORM = "weightnorm"
NORMS = (NORM_NONE, NORM_LAYERNORM, NORM_LAYERNORM_NO_AFFINE, NORM_WEIGHTNORM)

# psi denominator guard: ||c|| * (1 + PSI_EPS) + PSI_FLOOR. A multiplicative
# guard keeps psi(c*z) = psi(z) exact to float rounding (an additive one would
# not); the tiny absolute floor only prevents 0/0 on constant rows.
PSI_EPS = 1e-8
PSI_FLOOR = 1e-300

CHECKPOINT_FORMAT = "seemlab-checkpoint"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class MLPSpec:
    """Architecture: layer widths [d0, ..., dL] (dL = 1) plus norm mode."""

    layer_dims: tuple[int, ...]
    norm: str = NORM_NONE

    def __post_init__(self):
        dims = tuple(int(d) for d in self.layer_dims)
        object.__setattr__(self, "layer_dims", dims)
        if len(dims) < 2:
            raise ValueError("need at least one weight layer: [d0, ..., dL]")
        if any(d < 1 for d in dims):
            raise ValueError(f"all layer dims must be >= 1, got {dims}")
        if dims[-1] != 1:
            raise ValueError(f"output dim must be 1, got {dims[-1]}")
        if self.norm not in NORMS:
            raise ValueError(f"norm must be one of {NORMS}, got {self.norm!r}")

    @property
    def n_layers(self) -> int:
        return len(self.layer_dims) - 1

    @property
    def input_dim(self) -> int:
        return self.layer_dims[0]

    @property
    def has_layernorm(self) -> bool:
        return self.norm in (NORM_LAYERNORM, NORM_LAYERNORM_NO_AFFINE)

    @property
    def has_affine(self) -> bool:
        return self.norm == NORM_LAYERNORM


@dataclass(frozen=True)
class Params:
    """Flat parameter vector. Immutable by convention: ops return copies."""

    theta: np.ndarray

    def __post_init__(self):
        object.__setattr__(
            self, "theta", np.ascontiguousarray(self.theta, dtype=np.float64).ravel()
        )

    @property
    def size(self) -> int:
        return self.theta.size

    def norm(self) -> float:
        return float(np.linalg.norm(self.theta))

    def is_finite(self) -> bool:
        return bool(np.all(np.isfinite(self.theta)))


@dataclass(frozen=True)
class Block:
    kind: str  # "W" | "b" | "gain" | "shift" | "wn_scale"
    layer: int
    shape: tuple[int, ...]
    offset: int

    @property
    def size(self) -> int:
        return int(np.prod(self.shape))


@lru_cache(maxsize=None)
def layout(spec: MLPSpec) -> tuple[Block, ...]:
    """Deterministic block layout of the flat parameter vector."""
    blocks: list[Block] = []
    off = 0

    def add(kind: str, layer: int, shape: tuple[int, ...]):
        nonlocal off
        blocks.append(Block(kind, layer, shape, off))
        off += int(np.prod(shape))

    dims = spec.layer_dims
    last = spec.n_layers - 1
    for l in range(spec.n_layers):
        add("W", l, (dims[l + 1], dims[l]))
        add("b", l, (dims[l + 1],))
        if spec.has_affine and l < last:
            add("gain", l, (dims[l + 1],))
            add("shift", l, (dims[l + 1],))
    if spec.norm == NORM_WEIGHTNORM:
        add("wn_scale", last, (1,))
    return tuple(blocks)


def num_params(spec: MLPSpec) -> int:
    blocks = layout(spec)
    return blocks[-1].offset + blocks[-1].size


def unflatten(spec: MLPSpec, params: Params) -> dict[tuple[str, int], np.ndarray]:
    """Views into the flat vector, keyed by (kind, layer). No copies."""
    theta = params.theta
    if theta.size != num_params(spec):
        raise ValueError(
            f"parameter vector has {theta.size} entries, spec needs {num_params(spec)}"
        )
    return {
        (b.kind, b.layer): theta[b.offset : b.offset + b.size].reshape(b.shape)
        for b in layout(spec)
    }


def flatten(spec: MLPSpec, arrays: dict[tuple[str, int], np.ndarray]) -> Params:
    theta = np.empty(num_params(spec), dtype=np.float64)
    for b in layout(spec):
        theta[b.offset : b.offset + b.size] = np.asarray(
            arrays[(b.kind, b.layer)], dtype=np.float64
        ).ravel()
    return Params(theta)


def init(spec: MLPSpec, seed: int) -> Params:
    """Deterministic init: fan-in-scaled uniform weights, zero biases.

    LayerNorm gains start at 1 and shifts at 0; the weightnorm scale starts
    at the initial output-row norm so the reparameterized network equals the
    plain one at step 0.
    """
    rng = np.random.default_rng(seed)
    arrays: dict[tuple[str, int], np.ndarray] = {}
    for b in layout(spec):
        if b.kind == "W":
            bound = 1.0 / np.sqrt(b.shape[1])
            arrays[(b.kind, b.layer)] = rng.uniform(-bound, bound, size=b.shape)
        elif b.kind == "gain":
            arrays[(b.kind, b.layer)] = np.ones(b.shape)
        elif b.kind == "wn_scale":
            arrays[(b.kind, b.layer)] = np.array(
                [np.linalg.norm(arrays[("W", b.layer)])]
            )
        else:  # biases and shifts start at zero
            arrays[(b.kind, b.layer)] = np.zeros(b.shape)
    return flatten(spec, arrays)


def scale_params(params: Params, lam: float) -> Params:
    """Multiply every entry of the parameter vector by lam (lam != 0)."""
    if lam == 0.0:
        raise ValueError("scale factor must be nonzero")
    return Params(params.theta * float(lam))


def psi(z: np.ndarray) -> np.ndarray:
    """Row-wise centering + rescale to norm sqrt(d), guarded denominator."""
    z = np.atleast_2d(np.asarray(z, dtype=np.float64))
    d = z.shape[1]
    c = z - z.mean(axis=1, keepdims=True)
    rho = np.linalg.norm(c, axis=1, keepdims=True) * (1.0 + PSI_EPS) + PSI_FLOOR
    return np.sqrt(d) * c / rho


class Workspace:
    """Preallocated per-layer buffers for repeated fixed-size forward passes.

    Training loops call the forward pass hundreds of thousands of times on
    batches of constant shape; allocating multi-megabyte temporaries each
    call dominates the runtime on small networks. A workspace owns the
    intermediates instead. Outputs returned from a workspace-backed forward
    are views into the workspace and are only valid until its next use.
    """

    def __init__(self, spec: MLPSpec, rows: int):
        self.spec = spec
        self.rows = rows
        dims = spec.layer_dims
        self.z = [np.empty((rows, dims[l + 1])) for l in range(spec.n_layers)]
        self.h = [np.empty((rows, dims[l])) for l in range(1, spec.n_layers)]
        self.psi = (
            [np.empty((rows, dims[l + 1])) for l in range(spec.n_layers - 1)]
            if spec.has_layernorm
            else []
        )
        self._pool: dict = {}

    def fits(self, spec: MLPSpec, rows: int) -> bool:
        return spec == self.spec and rows == self.rows

    def scratch(self, key, shape, dtype=np.float64) -> np.ndarray:
        """Reusable named buffer; contents are garbage until written."""
        buf = self._pool.get(key)
        if buf is None or buf.shape != shape or buf.dtype != dtype:
            buf = np.empty(shape, dtype=dtype)
            self._pool[key] = buf
        return buf


class _ForwardCache:
    """Per-layer intermediates kept for the backward pass."""

    __slots__ = ("inputs", "centered", "rho_raw", "rho", "psi_out", "mask", "out")

    def __init__(self, n_layers: int):
        self.inputs: list[np.ndarray] = [None] * n_layers  # type: ignore[list-item]
        self.centered: list = [None] * n_layers
        self.rho_raw: list = [None] * n_layers
        self.rho: list = [None] * n_layers
        self.psi_out: list = [None] * n_layers
        self.mask: list = [None] * n_layers
        self.out: np.ndarray = None  # type: ignore[assignment]


def _forward(
    spec: MLPSpec,
    params: Params,
    x: np.ndarray,
    keep: bool,
    work: Workspace | None = None,
    views: dict | None = None,
) -> _ForwardCache:
    if views is None:
        views = unflatten(spec, params)
    n_layers = spec.n_layers
    last = n_layers - 1
    cache = _ForwardCache(n_layers)
    h = np.ascontiguousarray(np.atleast_2d(x), dtype=np.float64)
    if h.shape[1] != spec.input_dim:
        raise ValueError(f"input dim {h.shape[1]} != spec input dim {spec.input_dim}")
    if work is not None and not work.fits(spec, h.shape[0]):
        raise ValueError("workspace shape does not match this spec/batch")
    for l in range(n_layers):
        w = views[("W", l)]
        b = views[("b", l)]
        if keep:
            cache.inputs[l] = h
        if l == last and spec.norm == NORM_WEIGHTNORM:
            v = w[0]
            scale = views[("wn_scale", l)][0]
            w_eff = (scale / np.linalg.norm(v)) * v
            w = w_eff[None, :]
        if work is None:
            z = h @ w.T + b
        else:
            z = work.z[l]
            np.dot(h, w.T, out=z)
            z += b
        if l == last:
            cache.out = z[:, 0]
            break
        if spec.has_layernorm:
            d = z.shape[1]
            z -= z.mean(axis=1, keepdims=True)  # z becomes the centered vector
            c = z
            rho_raw = np.linalg.norm(c, axis=1, keepdims=True)
            rho = rho_raw * (1.0 + PSI_EPS) + PSI_FLOOR
            p = work.psi[l] if work is not None else np.empty_like(c)
            np.multiply(c, np.sqrt(d) / rho, out=p)
            if keep:
                cache.centered[l] = c
                cache.rho_raw[l] = rho_raw
                cache.rho[l] = rho
                if spec.has_affine:
                    praw = (
                        work.scratch(("psi_raw", l), p.shape)
                        if work is not None
                        else np.empty_like(p)
                    )
                    np.copyto(praw, p)
                    cache.psi_out[l] = praw
                else:
                    cache.psi_out[l] = p
            if spec.has_affine:
                p *= views[("gain", l)]
                p += views[("shift", l)]
            y = p
        else:
            y = z
        h_next = work.h[l] if work is not None else np.empty_like(y)
        np.maximum(y, 0.0, out=h_next)
        if keep:
            mask = (
                work.scratch(("mask", l), y.shape, dtype=bool)
                if work is not None
                else np.empty(y.shape, dtype=bool)
            )
            np.greater(y, 0.0, out=mask)
            cache.mask[l] = mask
        h = h_next
    return cache


def forward_batch(
    spec: MLPSpec,
    params: Params,
    x: np.ndarray,
    work: Workspace | None = None,
    views: dict | None = None,
) -> np.ndarray:
    """Network values for a batch of inputs, shape (n,).

    With a `work` workspace the result is a view into reused buffers, valid
    until the workspace's next forward pass.
    """
    return _forward(spec, params, x, keep=False, work=work, views=views).out


def forward(spec: MLPSpec, params: Params, x) -> float:
    """Network value for a single input vector."""
    return float(forward_batch(spec, params, np.asarray(x, dtype=np.float64)[None, :]))


def _backward_blocks(
    spec: MLPSpec,
    params: Params,
    cache: _ForwardCache,
    views=None,
    work: Workspace | None = None,
):
    """Per-sample gradient blocks, yielded as (block, kind, arrays).

    Yields tuples (Block, "plain", F) where F is (n, size) with per-sample
    flattened gradients, or (Block, "prod", (D, H)) for weight matrices,
    where the per-sample gradient is the outer product D[i] x H[i] (so inner
    products factor into (D.D') * (H.H')).

    With `work`, yielded arrays live in reused scratch buffers: each one is
    only valid until the next iteration step, so consumers must reduce
    immediately and never retain references.
    """
    if views is None:
        views = unflatten(spec, params)
    n_layers = spec.n_layers
    last = n_layers - 1
    n = cache.out.shape[0]
    by_key = {(b.kind, b.layer): b for b in layout(spec)}

    def buf(key, shape):
        return work.scratch(key, shape) if work is not None else np.empty(shape)

    h_last = cache.inputs[last]
    if spec.norm == NORM_WEIGHTNORM:
        v = views[("W", last)][0]
        scale = views[("wn_scale", last)][0]
        vnorm = np.linalg.norm(v)
        unit = v / vnorm
        hv = h_last @ unit  # (n,)
        yield by_key[("wn_scale", last)], "plain", hv[:, None]
        # d f / d v = scale/||v|| * (h - (h . v/||v||) v/||v||)
        dv = (scale / vnorm) * (h_last - hv[:, None] * unit[None, :])
        yield by_key[("W", last)], "plain", dv
        yield by_key[("b", last)], "plain", np.ones((n, 1))
        dh = buf(("dh", last), (n, v.size))
        dh[...] = scale * unit
    else:
        yield by_key[("W", last)], "plain", h_last
        yield by_key[("b", last)], "plain", np.ones((n, 1))
        w_last = views[("W", last)]
        dh = buf(("dh", last), (n, w_last.shape[1]))
        dh[...] = w_last[0]

    for l in range(last - 1, -1, -1):
        d = dh.shape[1]
        dy = buf(("dy", l), (n, d))
        np.multiply(dh, cache.mask[l], out=dy)
        if spec.has_layernorm:
            if spec.has_affine:
                dgain = buf(("dgain", l), (n, d))
                np.multiply(dy, cache.psi_out[l], out=dgain)
                yield by_key[("gain", l)], "plain", dgain
                yield by_key[("shift", l)], "plain", dy
                dpsi = buf(("dpsi", l), (n, d))
                np.multiply(dy, views[("gain", l)], out=dpsi)
            else:
                dpsi = dy
            c = cache.centered[l]
            rho = cache.rho[l]
            rho_raw = cache.rho_raw[l]
            # with rho(c) = a ||c|| + floor: J v = sqrt(d)(v/rho - a c (c.v)/(||c|| rho^2)).
            # At the kink (constant pre-activation row, ||c|| ~ 0) the true
            # Jacobian blows up; like ReLU at 0, define it as 0 there.
            safe = rho_raw > 1e-150
            inner = np.sum(dpsi * c, axis=1, keepdims=True)
            denom = np.where(safe, rho_raw, 1.0) * rho * rho
            with np.errstate(divide="ignore", invalid="ignore", under="ignore"):
                dc = np.sqrt(d) * (dpsi / rho - (1.0 + PSI_EPS) * c * (inner / denom))
            dc = np.where(safe, dc, 0.0)
            dz = dc
            dz -= dc.mean(axis=1, keepdims=True)
        else:
            dz = dy
        yield by_key[("W", l)], "prod", (dz, cache.inputs[l])
        yield by_key[("b", l)], "plain", dz
        if l > 0:
            dh_next = buf(("dh", l), (n, views[("W", l)].shape[1]))
            np.dot(dz, views[("W", l)], out=dh_next)
            dh = dh_next


def gradient_features(spec: MLPSpec, params: Params, x: np.ndarray) -> np.ndarray:
    """Per-sample parameter gradients, shape (P, M); column i is grad f(x_i)."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    if x.shape[0] == 0:
        raise ValueError("gradient_features needs a nonempty batch")
    cache = _forward(spec, params, x, keep=True)
    n = x.shape[0]
    phi = np.empty((num_params(spec), n), dtype=np.float64)
    for block, kind, data in _backward_blocks(spec, params, cache):
        sl = slice(block.offset, block.offset + block.size)
        if kind == "plain":
            phi[sl, :] = data.T
        else:
            dz, h = data
            outer = np.einsum("ni,nj->nij", dz, h).reshape(n, -1)
            phi[sl, :] = outer.T
    return phi


def grad_factors(spec: MLPSpec, params: Params, x: np.ndarray) -> list:
    """Factored gradient features for Gram products (see `gram`)."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    if x.shape[0] == 0:
        raise ValueError("grad_factors needs a nonempty batch")
    cache = _forward(spec, params, x, keep=True)
    out = []
    for _block, kind, data in _backward_blocks(spec, params, cache):
        if kind == "plain":
            out.append(("plain", np.ascontiguousarray(data)))
        else:
            dz, h = data
            out.append(("prod", np.ascontiguousarray(dz), np.ascontiguousarray(h)))
    return out


def gram(factors_a: list, factors_b: list) -> np.ndarray:
    """Gram matrix G[i, j] = <grad f(a_i), grad f(b_j)> from factored features."""
    g = None
    for fa, fb in zip(factors_a, factors_b, strict=True):
        if fa[0] == "plain":
            term = fa[1] @ fb[1].T
        else:
            term = (fa[1] @ fb[1].T) * (fa[2] @ fb[2].T)
        g = term if g is None else g + term
    return g


def gram_matrix(spec: MLPSpec, params: Params, x: np.ndarray, x2=None) -> np.ndarray:
    """G(X, X2) of pairwise tangent-kernel values (X2 defaults to X)."""
    fa = grad_factors(spec, params, x)
    fb = fa if x2 is None else grad_factors(spec, params, x2)
    return gram(fa, fb)


def ntk(spec: MLPSpec, params: Params, x, x2) -> float:
    """Tangent kernel value <grad f(x), grad f(x2)>."""
    a = np.asarray(x, dtype=np.float64)[None, :]
    b = np.asarray(x2, dtype=np.float64)[None, :]
    return float(gram_matrix(spec, params, a, b)[0, 0])


def loss_gradient(
    spec: MLPSpec,
    params: Params,
    x: np.ndarray,
    weights: np.ndarray,
    out: np.ndarray | None = None,
    views: dict | None = None,
    work: Workspace | None = None,
) -> np.ndarray:
    """Gradient of sum_i weights[i] * f(x_i) w.r.t. all parameters, shape (P,).

    This is the single backward pass the trainer uses: for the half
    mean-squared TD loss the output weights are u / M.
    """
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    w = np.asarray(weights, dtype=np.float64).ravel()
    cache = _forward(spec, params, x, keep=True, work=work, views=views)
    grad = out if out is not None else np.empty(num_params(spec), dtype=np.float64)
    for block, kind, data in _backward_blocks(spec, params, cache, views=views, work=work):
        sl = slice(block.offset, block.offset + block.size)
        if kind == "plain":
            np.dot(w, data, out=grad[sl])
        else:
            dz, h = data
            if work is not None:
                dzw = work.scratch(("dzw", block.layer), dz.shape)
                np.multiply(dz, w[:, None], out=dzw)
                np.dot(dzw.T, h, out=grad[sl].reshape(block.shape))
            else:
                grad[sl] = ((dz * w[:, None]).T @ h).ravel()
    return grad


def save_checkpoint(path, spec: MLPSpec, params: Params, step: int = 0, rng_state=None):
    """Write a versioned, exactly round-tripping JSON checkpoint."""
    payload = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "spec": {"layer_dims": list(spec.layer_dims), "norm": spec.norm},
        "step": int(step),
        "rng_state": rng_state,
        "theta_b64": base64.b64encode(
            np.ascontiguousarray(params.theta, dtype="<f8").tobytes()
        ).decode("ascii"),
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh)
        fh.write("\n")


def load_checkpoint(path):
    """Read a checkpoint; returns (spec, params, step, rng_state)."""
    with open(path, "r", encoding="utf-8") as fh:
        payload = json.load(fh)
    if payload.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"not a {CHECKPOINT_FORMAT} file: {path}")
    if payload.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {payload.get('version')}")
    spec = MLPSpec(tuple(payload["spec"]["layer_dims"]), payload["spec"]["norm"])
    theta = np.frombuffer(
        base64.b64decode(payload["theta_b64"]), dtype="<f8"
    ).astype(np.float64)
    if theta.size != num_params(spec):
        raise ValueError("checkpoint parameter count does not match its spec")
    return spec, Params(theta), int(payload["step"]), payload.get("rng_state")
