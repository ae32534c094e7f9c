"""Chebyshev KAN and sigmoid-MLP surrogates.

Provides forward evaluation, analytic spatial derivatives (gradient and the
diagonal of the second derivative, which is all the benchmark PDE operators
need), and reverse-accumulation parameter Jacobians. Every routine has a
batched form operating on a (J, n_params) matrix of flattened parameter
vectors at once; the single-network API wraps the batched kernels so both
paths produce bitwise-identical values.

cKAN layers squash their inputs into the Chebyshev domain (-1, 1) before the
polynomial expansion; the squash is configurable per net ("tanh" or
"sigmoid") and determines the matching coefficient prior scale (see
ckan_prior_std).

Flat parameter ordering (public, used by checkpoints): layer-major; within a
cKAN layer coefficients ravel as (input index, output index, degree index);
within an MLP layer the weight matrix ravels as (input index, output index)
followed by the biases.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numerics import Array

# Keep squash outputs strictly inside (-1, 1) so the Chebyshev recurrence
# cannot drift at the endpoints.
_SQUASH_CLAMP = 1.0 - 1e-12


# ---------------------------------------------------------------------------
# Chebyshev basis
# ---------------------------------------------------------------------------

def chebyshev_eval(t, degree: int) -> Array:
    """Values [T_0(t) ... T_degree(t)] by the three-term recurrence.

    Accepts a scalar or an array; the basis axis is appended last. Inputs with
    |t| slightly above 1 from rounding are clamped to the endpoints.
    """
    if degree < 0:
        raise ValueError("degree must be >= 0")
    t = np.clip(np.asarray(t, dtype=np.float64), -1.0, 1.0)
    return _basis_stack(t, degree, n_derivs=0)[0]


def chebyshev_derivs(t, degree: int) -> tuple[Array, Array, Array]:
    """(T, T', T'') with derivatives taken with respect to t.

    First derivatives follow T_n' = n U_{n-1}; here both are generated by
    differentiating the recurrence, which is algebraically identical.
    """
    if degree < 0:
        raise ValueError("degree must be >= 0")
    t = np.clip(np.asarray(t, dtype=np.float64), -1.0, 1.0)
    b = _basis_stack(t, degree, n_derivs=2)
    return b[0], b[1], b[2]


def _basis_stack(t: Array, degree: int, n_derivs: int) -> list[Array]:
    """Chebyshev values and t-derivatives up to order n_derivs (max 3).

    Returns arrays of shape t.shape + (degree+1,). The recurrence runs in a
    basis-major layout so each step works on contiguous blocks, then the
    result is transposed once.
    """
    k = degree + 1
    out = [np.empty((k,) + t.shape, dtype=t.dtype) for _ in range(n_derivs + 1)]
    tv = out[0]
    tv[0] = 1.0
    if degree >= 1:
        tv[1] = t
    if n_derivs >= 1:
        d1 = out[1]
        d1[0] = 0.0
        if degree >= 1:
            d1[1] = 1.0
    if n_derivs >= 2:
        d2 = out[2]
        d2[0:min(2, k)] = 0.0
    if n_derivs >= 3:
        d3 = out[3]
        d3[0:min(2, k)] = 0.0
    two_t = 2.0 * t
    for n in range(2, k):
        tv[n] = two_t * tv[n - 1] - tv[n - 2]
        if n_derivs >= 1:
            d1[n] = 2.0 * tv[n - 1] + two_t * d1[n - 1] - d1[n - 2]
        if n_derivs >= 2:
            d2[n] = 4.0 * d1[n - 1] + two_t * d2[n - 1] - d2[n - 2]
        if n_derivs >= 3:
            d3[n] = 6.0 * d2[n - 1] + two_t * d3[n - 1] - d3[n - 2]
    return [np.ascontiguousarray(np.moveaxis(a, 0, -1)) for a in out]


SQUASH_KINDS = ("tanh", "sigmoid")


def _squash_derivs(t: Array, kind: str, order: int):
    """Squash derivatives (d1, d2, d3) expressed through the squashed value t.

    Both supported projections admit closed forms in t alone:
    tanh: d1 = 1-t^2, d2 = -2 t d1, d3 = -2 d1^2 + d/dt(-2t) chain
    sigmoid: d1 = t(1-t), d2 = d1 (1-2t), d3 = d2 (1-2t) - 2 d1^2.
    Entries beyond `order` are None.
    """
    if kind == "tanh":
        d1 = 1.0 - t * t
        d2 = -2.0 * t * d1 if order >= 2 else None
        d3 = (-2.0 * d1 * d1 + 4.0 * t * t * d1) if order >= 3 else None
    elif kind == "sigmoid":
        d1 = t * (1.0 - t)
        one_m2t = 1.0 - 2.0 * t
        d2 = d1 * one_m2t if order >= 2 else None
        d3 = (d2 * one_m2t - 2.0 * d1 * d1) if order >= 3 else None
    else:
        raise ValueError(f"unknown squash '{kind}'; expected one of {SQUASH_KINDS}")
    return d1, d2, d3


def _squash(a: Array, kind: str, order: int = 1):
    """Projection of raw inputs into the Chebyshev domain plus derivatives.

    Returns (t, d1, d2, d3): the squashed value clamped strictly inside
    (-1, 1) and the squash derivatives up to `order` (missing ones None).
    """
    t = np.tanh(a) if kind == "tanh" else _sigmoid(np.asarray(a, dtype=np.float64))
    np.clip(t, -_SQUASH_CLAMP, _SQUASH_CLAMP, out=t)
    return (t, *_squash_derivs(t, kind, order))


def _chain_basis(t: Array, d1: Array, d2: Array | None, d3: Array | None,
                 degree: int, n_derivs: int, with_third: bool):
    """Chebyshev basis of squashed inputs, differentiated w.r.t. the raw input.

    With B(a) = T(t), t the squashed value and d1..d3 the squash derivatives:
      B'   = T' d1
      B''  = T'' d1^2 + T' d2
      B''' = T''' d1^3 + 3 T'' d1 d2 + T' d3
    Returns (B, Ba, Baa, Baaa) with unneeded entries as None.
    """
    order = 0 if n_derivs == 0 else (3 if with_third else min(n_derivs, 2))
    stack = _basis_stack(t, degree, order)
    b = stack[0]
    if n_derivs == 0:
        return b, None, None, None
    se = d1[..., None]
    t1 = stack[1]
    ba = t1 * se
    baa = None
    if order >= 2:
        baa = stack[2] * se * se + t1 * d2[..., None]
    baaa = None
    if with_third:
        baaa = (stack[3] * se ** 3
                + 3.0 * stack[2] * se * d2[..., None]
                + t1 * d3[..., None])
    return b, ba, baa, baaa


# ---------------------------------------------------------------------------
# Network containers
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ChebKanLayer:
    """One KAN layer: y_q = sum_j sum_k coeffs[j, q, k] T_k(squash(x_j))."""

    coeffs: Array  # (n_in, n_out, degree+1)

    @property
    def n_in(self) -> int:
        return self.coeffs.shape[0]

    @property
    def n_out(self) -> int:
        return self.coeffs.shape[1]

    @property
    def degree(self) -> int:
        return self.coeffs.shape[2] - 1

    @property
    def n_params(self) -> int:
        return self.coeffs.size


@dataclass(frozen=True)
class ChebKanNet:
    """Chebyshev KAN: every layer squashes its inputs into (-1, 1) before the
    polynomial expansion.  `squash` selects the projection ("tanh" or
    "sigmoid") and applies to all layers of the net."""

    layers: tuple[ChebKanLayer, ...]
    squash: str = "tanh"

    def __post_init__(self):
        if self.squash not in SQUASH_KINDS:
            raise ValueError(
                f"unknown squash '{self.squash}'; expected one of {SQUASH_KINDS}")

    @property
    def widths(self) -> tuple[int, ...]:
        return (self.layers[0].n_in,) + tuple(l.n_out for l in self.layers)

    @property
    def degree(self) -> int:
        return self.layers[0].degree

    @property
    def n_params(self) -> int:
        return sum(l.n_params for l in self.layers)

    @property
    def n_in(self) -> int:
        return self.layers[0].n_in

    @property
    def n_out(self) -> int:
        return self.layers[-1].n_out


@dataclass(frozen=True)
class MlpLayer:
    weights: Array  # (n_in, n_out)
    bias: Array     # (n_out,)

    @property
    def n_in(self) -> int:
        return self.weights.shape[0]

    @property
    def n_out(self) -> int:
        return self.weights.shape[1]

    @property
    def n_params(self) -> int:
        return self.weights.size + self.bias.size


@dataclass(frozen=True)
class MlpNet:
    """Fully connected net, sigmoid on hidden layers, linear output layer."""

    layers: tuple[MlpLayer, ...]

    @property
    def widths(self) -> tuple[int, ...]:
        return (self.layers[0].n_in,) + tuple(l.n_out for l in self.layers)

    @property
    def n_params(self) -> int:
        return sum(l.n_params for l in self.layers)

    @property
    def n_in(self) -> int:
        return self.layers[0].n_in

    @property
    def n_out(self) -> int:
        return self.layers[-1].n_out


@dataclass(frozen=True)
class EvalResult:
    """Value, spatial gradient and diagonal second derivatives at one point."""

    value: Array     # (n_out,)
    gradient: Array  # (n_out, n_in)
    second: Array    # (n_out, n_in), entries d2u_q/dx_i^2


def ckan_template(widths, degree: int, squash: str = "tanh") -> ChebKanNet:
    """Zero-coefficient net fixing the architecture (shape template)."""
    if len(widths) < 2:
        raise ValueError("need at least input and output widths")
    layers = tuple(
        ChebKanLayer(np.zeros((widths[i], widths[i + 1], degree + 1)))
        for i in range(len(widths) - 1)
    )
    return ChebKanNet(layers, squash)


def mlp_template(widths) -> MlpNet:
    if len(widths) < 2:
        raise ValueError("need at least input and output widths")
    layers = tuple(
        MlpLayer(np.zeros((widths[i], widths[i + 1])), np.zeros(widths[i + 1]))
        for i in range(len(widths) - 1)
    )
    return MlpNet(layers)


def flatten(net) -> Array:
    """Concatenate all layer parameters in the documented order."""
    parts = []
    for layer in net.layers:
        if isinstance(layer, ChebKanLayer):
            parts.append(layer.coeffs.ravel())
        else:
            parts.append(layer.weights.ravel())
            parts.append(layer.bias.ravel())
    return np.concatenate(parts)


def unflatten(template, vec: Array):
    """Rebuild a net with template's shapes from a flat vector."""
    vec = np.asarray(vec, dtype=np.float64)
    if vec.shape != (template.n_params,):
        raise ValueError(f"expected {template.n_params} parameters, got {vec.shape}")
    pos = 0
    layers = []
    for layer in template.layers:
        if isinstance(layer, ChebKanLayer):
            n = layer.coeffs.size
            layers.append(ChebKanLayer(vec[pos:pos + n].reshape(layer.coeffs.shape).copy()))
            pos += n
        else:
            nw = layer.weights.size
            w = vec[pos:pos + nw].reshape(layer.weights.shape).copy()
            pos += nw
            nb = layer.bias.size
            b = vec[pos:pos + nb].copy()
            pos += nb
            layers.append(MlpLayer(w, b))
    if _is_ckan(template):
        return ChebKanNet(tuple(layers), template.squash)
    return MlpNet(tuple(layers))


def ckan_prior_std(template: ChebKanNet) -> Array:
    """Per-coefficient prior standard deviations in flat parameter order.

    Sigmoid-squashed nets use the standard normal prior (std 1 everywhere):
    the sigmoid's bounded derivative (max 1/4) keeps unit-scale coefficient
    draws at unit function amplitude through the layer composition, so the
    flat prior is both stable and expressive.

    Tanh-squashed nets instead get the Xavier-normal scale
    sqrt(2 / ((n_in + n_out) * (degree + 1))) per layer: with tanh's
    unit-slope squash, a flat unit-variance prior makes prior function draws
    and their spatial derivatives explode through the composition (each layer
    sums n_in*(degree+1) unit-scale terms), which destabilizes ensemble
    updates.
    """
    if template.squash == "sigmoid":
        return np.ones(template.n_params)
    parts = [
        np.full(
            layer.coeffs.size,
            np.sqrt(2.0 / ((layer.n_in + layer.n_out) * (layer.degree + 1))),
        )
        for layer in template.layers
    ]
    return np.concatenate(parts)


def mlp_prior_std(template: MlpNet) -> Array:
    """Per-parameter prior stds for the perceptron baseline: weights get
    std 1/sqrt(n_in) (unit-variance pre-activations), biases std 1."""
    parts = []
    for layer in template.layers:
        parts.append(np.full(layer.weights.size, 1.0 / np.sqrt(layer.n_in)))
        parts.append(np.ones(layer.bias.size))
    return np.concatenate(parts)


def prior_std(template) -> Array:
    """Per-parameter prior std vector for either network family."""
    if _is_ckan(template):
        return ckan_prior_std(template)
    return mlp_prior_std(template)


def _layer_param_views_ckan(template: ChebKanNet, params: Array) -> list[Array]:
    """Per-layer coefficient views of shape (J, n_in, n_out, K)."""
    views = []
    pos = 0
    for layer in template.layers:
        n = layer.coeffs.size
        views.append(params[:, pos:pos + n].reshape(params.shape[0], *layer.coeffs.shape))
        pos += n
    return views


def _theta_feature_matrix(theta_view: Array) -> Array:
    """Reorder (J, n_in, n_out, K) coefficients to (J, n_in*K, n_out).

    Basis feature vectors ravel as (input index, degree index), so the
    contraction matrix needs that pair contiguous with outputs last.
    """
    jj, n_in, n_out, k = theta_view.shape
    return np.ascontiguousarray(theta_view.transpose(0, 1, 3, 2)).reshape(jj, n_in * k, n_out)


def _layer_param_views_mlp(template: MlpNet, params: Array) -> list[tuple[Array, Array]]:
    views = []
    pos = 0
    for layer in template.layers:
        nw = layer.weights.size
        w = params[:, pos:pos + nw].reshape(params.shape[0], *layer.weights.shape)
        pos += nw
        nb = layer.bias.size
        b = params[:, pos:pos + nb]
        pos += nb
        views.append((w, b))
    return views


# ---------------------------------------------------------------------------
# Batched cKAN kernels
#
# Internal derivative layout is "input-dim major": G[j, p, m, i] holds
# d a_i / d x_m for member j at point p, so the gradient update is a single
# batched matmul without transposing large temporaries. The shared engine
# below walks the layers in member chunks sized so per-chunk basis arrays stay
# cache resident; it can carry either per-dimension second derivatives or just
# their sum over dimensions, which is all the PDE residuals consume.
# ---------------------------------------------------------------------------

_CLAMP_BY_DTYPE = {
    np.dtype(np.float64): 1.0 - 1e-12,
    np.dtype(np.float32): 1.0 - 1e-6,
}


def _squash_native(a: Array, kind: str, order: int):
    """Squash keeping the input dtype, clamped to the dtype's resolution.

    Returns (t, d1, d2) with entries beyond `order` as None."""
    t = np.tanh(a) if kind == "tanh" else _sigmoid(a)
    clamp = _CLAMP_BY_DTYPE[t.dtype]
    np.clip(t, -clamp, clamp, out=t)
    d1, d2, _ = _squash_derivs(t, kind, order)
    return t, d1, d2


def _member_chunk(p: int, w_in: int, k: int, dtype) -> int:
    # keep one per-chunk basis stack near 1 MB so temporaries stay in cache
    row_bytes = p * w_in * k * np.dtype(dtype).itemsize
    return max(1, 1_048_576 // max(1, row_bytes))


def _ckan_engine(template: ChebKanNet, params: Array, x: Array,
                 need_grad: bool, second_mode: str, dtype):
    """Chunked forward propagation of values and spatial derivatives.

    second_mode selects what second-derivative state is carried: "none",
    "diag" (per input dimension), or "trace" (summed over input dimensions).
    Returns (value (J,P,Q), grad (J,P,D,Q) | None, lap (J,P,Q) | None,
    second (J,P,D,Q) | None) in the requested dtype.
    """
    j, p = params.shape[0], x.shape[0]
    d = template.n_in
    k = template.degree + 1
    theta = _layer_param_views_ckan(template, params)
    prop_grad = need_grad or second_mode != "none"
    order = 2 if second_mode != "none" else (1 if prop_grad else 0)

    t, d1, d2 = _squash_native(np.ascontiguousarray(x, dtype=dtype), template.squash, order)
    b, ba, baa, _ = _chain_basis(t, d1, d2, None, template.degree, order, False)
    th0 = np.ascontiguousarray(theta[0], dtype=dtype)
    thf0 = _theta_feature_matrix(th0)
    w1 = template.layers[0].n_out
    val = b.reshape(p, -1) @ thf0                                  # (J,P,w1)
    g = lap = h = None
    if prop_grad:
        tht0 = np.ascontiguousarray(th0.transpose(0, 1, 3, 2))     # (J,D,K,w1)
        g = np.empty((j, p, d, w1), dtype=dtype)
        for m in range(d):
            g[:, :, m, :] = ba[:, m, :] @ tht0[:, m]
    if second_mode == "trace":
        lap = baa.reshape(p, -1) @ thf0                            # (J,P,w1)
    elif second_mode == "diag":
        h = np.empty((j, p, d, w1), dtype=dtype)
        for m in range(d):
            h[:, :, m, :] = baa[:, m, :] @ tht0[:, m]

    for li in range(1, len(template.layers)):
        w_in = template.layers[li].n_in
        w_out = template.layers[li].n_out
        th = np.ascontiguousarray(theta[li], dtype=dtype)
        thf = _theta_feature_matrix(th)                            # (J,w_in*K,w_out)
        tht = np.ascontiguousarray(th.transpose(0, 1, 3, 2))       # (J,w_in,K,w_out)
        new_val = np.empty((j, p, w_out), dtype=dtype)
        new_g = np.empty((j, p, d, w_out), dtype=dtype) if prop_grad else None
        new_lap = np.empty((j, p, w_out), dtype=dtype) if second_mode == "trace" else None
        new_h = np.empty((j, p, d, w_out), dtype=dtype) if second_mode == "diag" else None
        chunk = _member_chunk(p, w_in, k, dtype)
        for j0 in range(0, j, chunk):
            sl = slice(j0, min(j0 + chunk, j))
            c = sl.stop - sl.start
            t, d1, d2 = _squash_native(val[sl], template.squash, order)
            b, ba, baa, _ = _chain_basis(t, d1, d2, None, template.degree, order, False)
            new_val[sl] = b.reshape(c, p, -1) @ thf[sl]
            if not prop_grad:
                continue
            # phi1[.., i, q] = sum_k Ba[.., i, k] theta[i, q, k]: the layer's
            # local Jacobian d a_q / d a_i, one small matrix per (member, point)
            phi1 = np.matmul(ba.transpose(0, 2, 1, 3), tht[sl])
            phi1 = np.ascontiguousarray(phi1.transpose(0, 2, 1, 3)).reshape(c * p, w_in, w_out)
            gm = g[sl].reshape(c * p, d, w_in)
            new_g[sl] = np.matmul(gm, phi1).reshape(c, p, d, w_out)
            if second_mode == "none":
                continue
            phi2 = np.matmul(baa.transpose(0, 2, 1, 3), tht[sl])
            phi2 = np.ascontiguousarray(phi2.transpose(0, 2, 1, 3)).reshape(c * p, w_in, w_out)
            if second_mode == "trace":
                gsq = (gm * gm).sum(axis=1, keepdims=True)
                lm = lap[sl].reshape(c * p, 1, w_in)
                new_lap[sl] = (np.matmul(gsq, phi2) + np.matmul(lm, phi1)).reshape(c, p, w_out)
            else:
                hm = h[sl].reshape(c * p, d, w_in)
                new_h[sl] = (np.matmul(gm * gm, phi2)
                             + np.matmul(hm, phi1)).reshape(c, p, d, w_out)
        val, g, lap, h = new_val, new_g, new_lap, new_h
    return val, g, lap, h


def ckan_batch_values(template: ChebKanNet, params: Array, x: Array) -> Array:
    """Values u(x; theta_j) for all members: (J, P, n_out)."""
    params, x = _check_batch_args(template, params, x)
    val, _, _, _ = _ckan_engine(template, params, x, False, "none", np.float64)
    return val


def ckan_batch_eval_fast(template: ChebKanNet, params: Array, x: Array,
                         need_grad: bool = True, need_second: bool = True):
    """Single-precision-scratch evaluation for large ensembles.

    Returns float64 (value (J,P,Q), grad (J,P,Q,D) | None, lap (J,P,Q) | None)
    where lap is the sum over input dimensions of the diagonal second
    derivatives (the Laplacian of each output). Intermediates are float32, so
    results agree with the float64 reference kernels to ~1e-6 relative error;
    use ckan_batch_values / ckan_batch_derivs when exact doubles matter.
    """
    params, x = _check_batch_args(template, params, x)
    mode = "trace" if need_second else "none"
    val, g, lap, _ = _ckan_engine(template, params, x, need_grad, mode, np.float32)
    value = val.astype(np.float64)
    grad = None
    if need_grad and g is not None:
        grad = np.swapaxes(g, 2, 3).astype(np.float64)
    lap64 = None if lap is None else lap.astype(np.float64)
    return value, grad, lap64


def ckan_batch_derivs(template: ChebKanNet, params: Array, x: Array,
                      tape: list | None = None):
    """Values, gradients and diagonal second derivatives for all members.

    Returns (value (J,P,Q), grad (J,P,Q,D), second (J,P,Q,D)). If `tape` is a
    list, per-layer intermediates needed by the reverse sweep are appended.
    """
    params, x = _check_batch_args(template, params, x)
    if tape is None:
        val, g, _, h = _ckan_engine(template, params, x, True, "diag", np.float64)
        grad = np.ascontiguousarray(np.swapaxes(g, 2, 3))
        second = np.ascontiguousarray(np.swapaxes(h, 2, 3))
        return val, grad, second

    j, p = params.shape[0], x.shape[0]
    d = template.n_in
    k = template.degree + 1
    theta = _layer_param_views_ckan(template, params)
    taping = True

    # first layer: inputs shared by all members
    t, d1, d2, d3 = _squash(x, template.squash, 3 if taping else 2)
    b, ba, baa, baaa = _chain_basis(t, d1, d2, d3, template.degree, 2, taping)
    w1 = template.layers[0].n_out
    val = b.reshape(p, -1) @ _theta_feature_matrix(theta[0])              # (J,P,w1)
    g = np.einsum("pmk,jmqk->jpmq", ba, theta[0])                         # (J,P,D,w1)
    h = np.einsum("pmk,jmqk->jpmq", baa, theta[0])
    if taping:
        tape.append({"first": True, "b": b, "ba": ba, "baa": baa, "baaa": baaa})

    for li in range(1, len(template.layers)):
        w_in = template.layers[li].n_in
        w_out = template.layers[li].n_out
        t, d1, d2, d3 = _squash(val, template.squash, 3 if taping else 2)
        b, ba, baa, baaa = _chain_basis(t, d1, d2, d3, template.degree, 2, taping)  # (J,P,w,K)
        th2 = _theta_feature_matrix(theta[li])
        if taping:
            tape.append({"first": False, "b": b, "ba": ba, "baa": baa, "baaa": baaa,
                         "g_in": g, "h_in": h})
        new_val = b.reshape(j, p, -1) @ th2
        # gradient: W1[j,p,m,i,k] = Ba[j,p,i,k] * G[j,p,m,i]
        w1t = ba[:, :, None, :, :] * g[..., None]
        new_g = (w1t.reshape(j, p * d, w_in * k) @ th2).reshape(j, p, d, w_out)
        # second: W2 = Baa * G^2 + Ba * H
        w2t = baa[:, :, None, :, :] * (g * g)[..., None]
        w2t += ba[:, :, None, :, :] * h[..., None]
        new_h = (w2t.reshape(j, p * d, w_in * k) @ th2).reshape(j, p, d, w_out)
        val, g, h = new_val, new_g, new_h
    grad = np.ascontiguousarray(np.swapaxes(g, 2, 3))    # (J,P,Q,D)
    second = np.ascontiguousarray(np.swapaxes(h, 2, 3))
    return val, grad, second


def ckan_batch_value_vjp(template: ChebKanNet, params: Array, x: Array,
                         cot_value: Array) -> Array:
    """Parameter gradients of per-point scalars built from values only.

    cot_value has shape (J, P, n_out); the result (J, P, n_params) holds
    d(sum_q cot[j,p,q] * u_q(x_p; theta_j)) / d theta.
    """
    return ckan_batch_vjp(template, params, x, cot_value, None, None)


def ckan_batch_vjp(template: ChebKanNet, params: Array, x: Array,
                   cot_value: Array, cot_grad: Array | None,
                   cot_second: Array | None) -> Array:
    """Reverse-accumulation parameter gradients per (member, point).

    The scalar being differentiated for member j at point p is
      sum_q cv[j,p,q] u_q + sum_{q,m} cg[j,p,q,m] du_q/dx_m
                          + sum_{q,m} ch[j,p,q,m] d2u_q/dx_m^2,
    and the result has shape (J, P, n_params). cot_grad / cot_second may be
    None when the functional does not touch derivatives.
    """
    params, x = _check_batch_args(template, params, x)
    j, p = params.shape[0], x.shape[0]
    d = template.n_in
    k = template.degree + 1
    theta = _layer_param_views_ckan(template, params)
    need_derivs = cot_grad is not None or cot_second is not None

    tape: list = []
    if need_derivs:
        ckan_batch_derivs(template, params, x, tape=tape)
        # internal layout (J,P,D,Q)
        cg = None if cot_grad is None else np.ascontiguousarray(np.swapaxes(cot_grad, 2, 3))
        ch = None if cot_second is None else np.ascontiguousarray(np.swapaxes(cot_second, 2, 3))
    else:
        _ckan_values_with_tape(template, theta, x, tape)
        cg = ch = None
    cy = np.asarray(cot_value, dtype=np.float64)

    grads = [None] * len(template.layers)
    for li in range(len(template.layers) - 1, 0, -1):
        rec = tape[li]
        b, ba, baa, baaa = rec["b"], rec["ba"], rec["baa"], rec["baaa"]
        th = theta[li]
        # parameter gradient for this layer
        tb = b[:, :, :, None, :] * cy[:, :, None, :, None]
        if need_derivs:
            g_in, h_in = rec["g_in"], rec["h_in"]  # (J,P,D,w_in)
            r1 = np.zeros((j, p, th.shape[1], th.shape[2]))
            if cg is not None:
                r1 += np.einsum("jpmq,jpmi->jpiq", cg, g_in)
            if ch is not None:
                r1 += np.einsum("jpmq,jpmi->jpiq", ch, h_in)
                r2 = np.einsum("jpmq,jpmi->jpiq", ch, g_in * g_in)
                tb += baa[:, :, :, None, :] * r2[..., None]
            tb += ba[:, :, :, None, :] * r1[..., None]
        grads[li] = tb.reshape(j, p, -1)
        # cotangents for the layer below
        phi1 = np.einsum("jiqk,jpik->jpiq", th, ba)
        new_cy = np.einsum("jpq,jpiq->jpi", cy, phi1)
        if need_derivs:
            phi2 = np.einsum("jiqk,jpik->jpiq", th, baa)
            new_cg = None
            new_ch = None
            if cg is not None:
                new_cy += np.einsum("jpmq,jpiq,jpmi->jpi", cg, phi2, g_in, optimize=True)
                new_cg = np.einsum("jpmq,jpiq->jpmi", cg, phi1)
            if ch is not None:
                phi3 = np.einsum("jiqk,jpik->jpiq", th, baaa)
                new_cy += np.einsum("jpmq,jpiq,jpmi->jpi", ch, phi3, g_in * g_in, optimize=True)
                new_cy += np.einsum("jpmq,jpiq,jpmi->jpi", ch, phi2, h_in, optimize=True)
                extra = 2.0 * np.einsum("jpmq,jpiq->jpmi", ch, phi2) * g_in
                new_cg = extra if new_cg is None else new_cg + extra
                new_ch = np.einsum("jpmq,jpiq->jpmi", ch, phi1)
            cg, ch = new_cg, new_ch
        cy = new_cy

    rec = tape[0]
    b, ba, baa = rec["b"], rec["ba"], rec["baa"]  # (P, D, K), member independent
    tb = b[None, :, :, None, :] * cy[:, :, None, :, None]
    if cg is not None:
        tb += ba[None, :, :, None, :] * cg[..., None]
    if ch is not None:
        tb += baa[None, :, :, None, :] * ch[..., None]
    grads[0] = tb.reshape(j, p, -1)
    return np.concatenate(grads, axis=2)


def _ckan_values_with_tape(template: ChebKanNet, theta: list[Array], x: Array,
                           tape: list) -> Array:
    """Value-only forward that records the basis arrays the VJP needs."""
    j = theta[0].shape[0]
    p = x.shape[0]
    t, d1, _, _ = _squash(x, template.squash)
    b, ba, _, _ = _chain_basis(t, d1, None, None, template.degree, 1, False)
    tape.append({"first": True, "b": b, "ba": ba, "baa": None, "baaa": None})
    a = b.reshape(p, -1) @ _theta_feature_matrix(theta[0])
    for li in range(1, len(template.layers)):
        t, d1, _, _ = _squash(a, template.squash)
        b, ba, _, _ = _chain_basis(t, d1, None, None, template.degree, 1, False)
        tape.append({"first": False, "b": b, "ba": ba, "baa": None, "baaa": None})
        a = b.reshape(j, p, -1) @ _theta_feature_matrix(theta[li])
    return a


def _check_batch_args(template, params: Array, x: Array):
    params = np.asarray(params, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    if params.ndim != 2 or params.shape[1] != template.n_params:
        raise ValueError(
            f"params must be (J, {template.n_params}), got {params.shape}")
    if x.ndim != 2 or x.shape[1] != template.n_in:
        raise ValueError(f"points must be (P, {template.n_in}), got {x.shape}")
    return params, x


# ---------------------------------------------------------------------------
# Batched MLP kernels
# ---------------------------------------------------------------------------

def _sigmoid(z: Array) -> Array:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def mlp_batch_values(template: MlpNet, params: Array, x: Array) -> Array:
    params, x = _check_batch_args(template, params, x)
    wb = _layer_param_views_mlp(template, params)
    a = np.broadcast_to(x, (params.shape[0],) + x.shape)
    last = len(template.layers) - 1
    for li, (w, b) in enumerate(wb):
        a = a @ w + b[:, None, :]
        if li != last:
            a = _sigmoid(a)
    return a


def mlp_batch_derivs(template: MlpNet, params: Array, x: Array,
                     tape: list | None = None):
    params, x = _check_batch_args(template, params, x)
    j, p = params.shape[0], x.shape[0]
    d = template.n_in
    wb = _layer_param_views_mlp(template, params)
    taping = tape is not None

    a = np.broadcast_to(x, (j,) + x.shape)
    g = np.broadcast_to(np.eye(d), (j, p, d, d))  # (J,P,D,w) input-dim major
    h = np.zeros((j, p, d, d))
    last = len(template.layers) - 1
    for li, (w, b) in enumerate(wb):
        pre = a @ w + b[:, None, :]
        gs = (g.reshape(j, p * d, -1) @ w).reshape(j, p, d, -1)
        hs = (h.reshape(j, p * d, -1) @ w).reshape(j, p, d, -1)
        if li == last:
            rec_sig = None
            new_a, new_g, new_h = pre, gs, hs
        else:
            sig = _sigmoid(pre)
            s1 = sig * (1.0 - sig)
            s2 = s1 * (1.0 - 2.0 * sig)
            new_a = sig
            new_g = s1[:, :, None, :] * gs
            new_h = s2[:, :, None, :] * gs * gs + s1[:, :, None, :] * hs
            rec_sig = (sig, s1, s2)
        if taping:
            tape.append({"a_in": a, "g_in": g, "h_in": h, "gs": gs, "hs": hs,
                         "sig": rec_sig, "w": w})
        a, g, h = new_a, new_g, new_h
    grad = np.ascontiguousarray(np.swapaxes(g, 2, 3))
    second = np.ascontiguousarray(np.swapaxes(h, 2, 3))
    return a, grad, second


def mlp_batch_eval_fast(template: MlpNet, params: Array, x: Array,
                        need_grad: bool = True, need_second: bool = True):
    """Value / gradient / Laplacian evaluation, same contract as the cKAN
    fast path. MLP layers are plain matmuls that BLAS already handles well,
    so this simply reduces the exact double-precision kernels."""
    if not need_grad and not need_second:
        return mlp_batch_values(template, params, x), None, None
    v, grad, second = mlp_batch_derivs(template, params, x)
    return (v,
            grad if need_grad else None,
            second.sum(axis=3) if need_second else None)


def mlp_batch_vjp(template: MlpNet, params: Array, x: Array,
                  cot_value: Array, cot_grad: Array | None,
                  cot_second: Array | None) -> Array:
    """Reverse-accumulation parameter gradients, same contract as the cKAN VJP."""
    params, x = _check_batch_args(template, params, x)
    j, p = params.shape[0], x.shape[0]
    tape: list = []
    mlp_batch_derivs(template, params, x, tape=tape)
    cy = np.asarray(cot_value, dtype=np.float64)
    cg = None if cot_grad is None else np.ascontiguousarray(np.swapaxes(cot_grad, 2, 3))
    ch = None if cot_second is None else np.ascontiguousarray(np.swapaxes(cot_second, 2, 3))

    grads = [None] * len(template.layers)
    for li in range(len(template.layers) - 1, -1, -1):
        rec = tape[li]
        if rec["sig"] is not None:
            sig, s1, s2 = rec["sig"]
            s3 = s1 * (1.0 - 6.0 * sig + 6.0 * sig * sig)
            gs, hs = rec["gs"], rec["hs"]
            cpre = cy * s1
            if cg is not None:
                cpre += np.einsum("jpmq,jpmq,jpq->jpq", cg, gs, s2)
                new_cg = cg * s1[:, :, None, :]
            else:
                new_cg = None
            if ch is not None:
                cpre += np.einsum("jpmq,jpq->jpq", ch * gs * gs, s3)
                cpre += np.einsum("jpmq,jpmq,jpq->jpq", ch, hs, s2)
                extra = 2.0 * ch * s2[:, :, None, :] * gs
                new_cg = extra if new_cg is None else new_cg + extra
                new_ch = ch * s1[:, :, None, :]
            else:
                new_ch = None
            cgs, chs = new_cg, new_ch
        else:
            cpre, cgs, chs = cy, cg, ch
        a_in, g_in, h_in, w = rec["a_in"], rec["g_in"], rec["h_in"], rec["w"]
        wbar = np.einsum("jpi,jpq->jpiq", a_in, cpre)
        if cgs is not None:
            wbar += np.einsum("jpmi,jpmq->jpiq", g_in, cgs)
        if chs is not None:
            wbar += np.einsum("jpmi,jpmq->jpiq", h_in, chs)
        bbar = cpre
        grads[li] = np.concatenate([wbar.reshape(j, p, -1), bbar], axis=2)
        if li > 0:
            wt = np.swapaxes(w, 1, 2)  # (J, n_out, n_in)
            cy = cpre @ wt
            cg = None if cgs is None else (cgs.reshape(j, -1, w.shape[2]) @ wt).reshape(g_in.shape)
            ch = None if chs is None else (chs.reshape(j, -1, w.shape[2]) @ wt).reshape(g_in.shape)
    return np.concatenate(grads, axis=2)


# ---------------------------------------------------------------------------
# Single-network API
# ---------------------------------------------------------------------------

def _is_ckan(net) -> bool:
    return isinstance(net, ChebKanNet)


def batch_values(template, params: Array, x: Array) -> Array:
    """Dispatch batched value evaluation on the surrogate kind."""
    if _is_ckan(template):
        return ckan_batch_values(template, params, x)
    return mlp_batch_values(template, params, x)


def batch_derivs(template, params: Array, x: Array):
    if _is_ckan(template):
        return ckan_batch_derivs(template, params, x)
    return mlp_batch_derivs(template, params, x)


def batch_eval_fast(template, params: Array, x: Array,
                    need_grad: bool = True, need_second: bool = True):
    """Fast ensemble evaluation: (value, grad | None, laplacian | None).

    The Laplacian is the sum of diagonal second derivatives over input
    dimensions, which is the only second-derivative combination the PDE
    residuals use. cKAN nets run in float32 scratch (~1e-6 relative error);
    exact doubles come from batch_values / batch_derivs.
    """
    if _is_ckan(template):
        return ckan_batch_eval_fast(template, params, x, need_grad, need_second)
    return mlp_batch_eval_fast(template, params, x, need_grad, need_second)


def batch_vjp(template, params, x, cot_value, cot_grad, cot_second) -> Array:
    if _is_ckan(template):
        return ckan_batch_vjp(template, params, x, cot_value, cot_grad, cot_second)
    return mlp_batch_vjp(template, params, x, cot_value, cot_grad, cot_second)


def ckan_forward(net: ChebKanNet, x: Array) -> Array:
    """Network output at a single point x (length n_in); returns (n_out,)."""
    x = np.atleast_1d(np.asarray(x, dtype=np.float64))
    return ckan_batch_values(net, flatten(net)[None, :], x[None, :])[0, 0]


def ckan_eval_with_derivs(net: ChebKanNet, x: Array) -> EvalResult:
    x = np.atleast_1d(np.asarray(x, dtype=np.float64))
    v, g, h = ckan_batch_derivs(net, flatten(net)[None, :], x[None, :])
    return EvalResult(value=v[0, 0], gradient=g[0, 0], second=h[0, 0])


def ckan_param_jacobian(net: ChebKanNet, x: Array) -> Array:
    """d(output q)/d(theta p) as an (n_params, n_out) matrix."""
    return _param_jacobian(net, x, ckan_batch_vjp)


def mlp_forward(net: MlpNet, x: Array) -> Array:
    x = np.atleast_1d(np.asarray(x, dtype=np.float64))
    return mlp_batch_values(net, flatten(net)[None, :], x[None, :])[0, 0]


def mlp_eval_with_derivs(net: MlpNet, x: Array) -> EvalResult:
    x = np.atleast_1d(np.asarray(x, dtype=np.float64))
    v, g, h = mlp_batch_derivs(net, flatten(net)[None, :], x[None, :])
    return EvalResult(value=v[0, 0], gradient=g[0, 0], second=h[0, 0])


def mlp_param_jacobian(net: MlpNet, x: Array) -> Array:
    return _param_jacobian(net, x, mlp_batch_vjp)


def _param_jacobian(net, x, vjp) -> Array:
    # one VJP pass with n_out replicated points and unit value cotangents
    x = np.atleast_1d(np.asarray(x, dtype=np.float64))
    q = net.n_out
    pts = np.repeat(x[None, :], q, axis=0)
    cv = np.eye(q)[None, :, :]
    out = vjp(net, flatten(net)[None, :], pts, cv, None, None)
    return out[0].T  # (n_params, n_out)
