"""Active-subspace reduction of surrogate coefficients for ensemble inversion.

The network-coefficient prior is N(0, S^2) with a per-coordinate scale S, so
all subspace algebra runs in the whitened coordinates theta_w = theta / S
where the prior is standard normal. Gradient samples of the observation rows
are taken with respect to theta_w, one subspace is built per network from the
dominant left singular directions, and the reduced inversion runs the usual
ensemble update on member vectors zeta = (lambda, omega) with omega living in
the subspace. Because the whitened prior is isotropic, omega inherits an exact
standard-normal prior and the reduced Tikhonov block stays diagonal.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np

from . import surrogate as sg
from .inversion import EkiConfig, EkiResult, run_inversion
from .numerics import SeededRng, thin_svd
from .problems import ObservationSet, PdeForwardModel, ProblemSpec

Array = np.ndarray

DEFAULT_GRADIENT_SAMPLES = 1000
DEFAULT_GRADIENT_POINTS = 100
DEFAULT_FRACTION = 1.0 / 3.0


# ---------------------------------------------------------------------------
# reduced-coordinate map
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SubspaceBlock:
    """Reduced basis for one network's whitened coefficients.

    basis has orthonormal columns (n_theta x m); singular_values keeps the
    full computed spectrum for diagnostics; energy is the cumulative squared
    singular-value fraction captured by the m retained directions.
    """

    basis: Array
    singular_values: Array
    energy: float

    @property
    def n_theta(self) -> int:
        return self.basis.shape[0]

    @property
    def m(self) -> int:
        return self.basis.shape[1]


@dataclass(frozen=True)
class SubspaceMap:
    """Block-diagonal reduction map over all networks of a problem.

    lift/restrict operate on whitened coefficients: lift(omega) = W1 @ omega
    per block, restrict(theta_w) = W1^T @ theta_w per block. Conversion to the
    raw coefficient scale is owned by the forward-model wrapper.
    """

    blocks: tuple[SubspaceBlock, ...]

    def __post_init__(self):
        if not self.blocks:
            raise ValueError("a subspace map needs at least one block")

    @property
    def m(self) -> int:
        return int(sum(b.m for b in self.blocks))

    @property
    def n_theta(self) -> int:
        return int(sum(b.n_theta for b in self.blocks))

    def _split(self, vec: Array, sizes) -> list[Array]:
        bounds = np.cumsum([0] + list(sizes))
        return [vec[..., a:b] for a, b in zip(bounds[:-1], bounds[1:])]

    def lift(self, omega: Array) -> Array:
        """Whitened coefficients (..., n_theta) from reduced (..., m)."""
        omega = np.asarray(omega, dtype=np.float64)
        if omega.shape[-1] != self.m:
            raise ValueError(
                f"reduced vector length {omega.shape[-1]} != m={self.m}")
        parts = self._split(omega, [b.m for b in self.blocks])
        return np.concatenate(
            [p @ b.basis.T for p, b in zip(parts, self.blocks)], axis=-1)

    def restrict(self, theta_w: Array) -> Array:
        """Reduced coordinates (..., m) from whitened (..., n_theta)."""
        theta_w = np.asarray(theta_w, dtype=np.float64)
        if theta_w.shape[-1] != self.n_theta:
            raise ValueError(
                f"coefficient vector length {theta_w.shape[-1]} != "
                f"n_theta={self.n_theta}")
        parts = self._split(theta_w, [b.n_theta for b in self.blocks])
        return np.concatenate(
            [p @ b.basis for p, b in zip(parts, self.blocks)], axis=-1)

    # -- persistence ---------------------------------------------------------

    def save(self, path) -> None:
        arrays = {"n_blocks": np.array(len(self.blocks))}
        for i, b in enumerate(self.blocks):
            arrays[f"basis_{i}"] = b.basis
            arrays[f"singular_values_{i}"] = b.singular_values
            arrays[f"energy_{i}"] = np.array(b.energy)
        np.savez(path, **arrays)

    @classmethod
    def load(cls, path) -> "SubspaceMap":
        with np.load(path) as data:
            n = int(data["n_blocks"])
            blocks = tuple(
                SubspaceBlock(
                    basis=np.ascontiguousarray(data[f"basis_{i}"]),
                    singular_values=np.ascontiguousarray(
                        data[f"singular_values_{i}"]),
                    energy=float(data[f"energy_{i}"]),
                )
                for i in range(n)
            )
        return cls(blocks)


def lift(subspace_map: SubspaceMap, omega: Array) -> Array:
    return subspace_map.lift(omega)


def restrict(subspace_map: SubspaceMap, theta_w: Array) -> Array:
    return subspace_map.restrict(theta_w)


# ---------------------------------------------------------------------------
# gradient sampling
# ---------------------------------------------------------------------------


def _residual_cotangents(problem: ProblemSpec, lam, u_value, u_grad, u_lap,
                         kappa_value=None, kappa_grad=None):
    """VJP cotangents of the residual rows for each network.

    Inputs are exact per-member evaluations at the residual points: u_value
    (J, P), u_grad (J, P, D), u_lap (J, P) summed over input dimensions,
    kappa_* for the log-permeability network. lam maps parameter names to
    scalars or (J, 1) columns. Returns a list with one (cot_value, cot_grad,
    cot_second) triple per network; cotangent shapes follow the batched VJP
    convention (J, P, 1) and (J, P, 1, D).
    """
    j, p = u_value.shape
    d = u_grad.shape[-1]
    zeros_v = lambda: np.zeros((j, p, 1))
    zeros_d = lambda: np.zeros((j, p, 1, d))
    if problem.name == "transport":
        cg = zeros_d()
        cg[:, :, 0, 0] = np.broadcast_to(lam["a"], (j, p))
        cg[:, :, 0, 1] = 1.0
        return [(zeros_v(), cg, None)]
    if problem.name == "diffusion":
        cg = zeros_d()
        cg[:, :, 0, 0] = np.broadcast_to(lam["D"], (j, p))
        ch = zeros_d()
        ch[:, :, 0, 0] = problem.constants["kappa"]
        return [(zeros_v(), cg, ch)]
    if problem.name == "nonlinear":
        cv = zeros_v()
        sech2 = 1.0 - np.tanh(u_value) ** 2
        cv[:, :, 0] = np.broadcast_to(lam["k"], (j, p)) * sech2
        ch = zeros_d()
        ch[:, :, 0, 0] = problem.constants["lambda_coef"]
        return [(cv, None, ch)]
    if problem.name == "darcy":
        weight = -np.exp(kappa_value)  # (J, P)
        cg_u = zeros_d()
        cg_u[:, :, 0, :] = weight[:, :, None] * kappa_grad
        ch_u = zeros_d()
        ch_u[:, :, 0, :] = weight[:, :, None]
        advect = np.einsum("jpm,jpm->jp", kappa_grad, u_grad)
        cv_k = zeros_v()
        cv_k[:, :, 0] = weight * (advect + u_lap)
        cg_k = zeros_d()
        cg_k[:, :, 0, :] = weight[:, :, None] * u_grad
        return [(zeros_v(), cg_u, ch_u), (cv_k, cg_k, None)]
    raise KeyError(f"unknown problem '{problem.name}'")


def _partition_rows(model: PdeForwardModel, rows: Array):
    """Split selected stacked-row indices into residual / per-net value rows.

    Returns (residual_point_idx, value_points_per_net, positions) where
    positions maps each group back into the selected-row ordering.
    """
    obs = model.observations
    nf = model.n_residual_rows
    nb = obs.boundary.count
    nu = obs.interior.count
    n_value_u = nb + nu
    f_sel = rows < nf
    f_idx = rows[f_sel]
    u_sel = (rows >= nf) & (rows < nf + n_value_u)
    u_local = rows[u_sel] - nf
    bu_points = np.concatenate([obs.boundary.points, obs.interior.points])
    groups = {
        "f_idx": f_idx,
        "f_pos": np.nonzero(f_sel)[0],
        "u_points": bu_points[u_local] if u_local.size else bu_points[:0],
        "u_pos": np.nonzero(u_sel)[0],
    }
    if obs.kappa_boundary is not None:
        k_sel = rows >= nf + n_value_u
        k_local = rows[k_sel] - nf - n_value_u
        groups["k_points"] = obs.kappa_boundary.points[k_local]
        groups["k_pos"] = np.nonzero(k_sel)[0]
    return groups


def gradient_matrix(model: PdeForwardModel, n_samples: int = DEFAULT_GRADIENT_SAMPLES,
                    point_subset: Array | None = None,
                    rng: SeededRng | int = 0, *,
                    n_points: int = DEFAULT_GRADIENT_POINTS,
                    sample_lambda: bool = False,
                    chunk_size: int = 100) -> list[Array]:
    """Monte Carlo whitened-gradient samples of the observation rows.

    Draws n_samples coefficient vectors from the prior, selects a fixed
    random subset of observation rows (point_subset overrides the draw), and
    returns one matrix per network whose columns are the gradients of each
    selected row with respect to that network's whitened coefficients,
    scaled by 1/sqrt(n_samples). Columns are ordered sample-major. Physical
    parameters are held at their prior mean unless sample_lambda is set.
    """
    if n_samples < 1:
        raise ValueError(f"need at least one sample, got {n_samples}")
    rng = rng if isinstance(rng, SeededRng) else SeededRng(int(rng))
    n_rows_total = model.row_count()
    if point_subset is None:
        n_sel = min(int(n_points), n_rows_total)
        rows = np.sort(rng.choice(n_rows_total, size=n_sel))
    else:
        rows = np.sort(np.asarray(point_subset, dtype=np.intp))
        if rows.size == 0:
            raise ValueError("point subset is empty")
        if rows[0] < 0 or rows[-1] >= n_rows_total:
            raise ValueError(
                f"row indices must lie in [0, {n_rows_total}), got "
                f"[{rows[0]}, {rows[-1]}]")
    n_rows = rows.size
    groups = _partition_rows(model, rows)
    theta_scales = [np.asarray(model.prior_std[sl]) for sl in model.theta_slices]
    scale = 1.0 / math.sqrt(n_samples)

    mats = [np.zeros((t.n_params, n_samples * n_rows)) for t in model.templates]
    theta_w = rng.standard_normal((n_samples, model.n_theta))
    lam_draws = (rng.standard_normal((n_samples, model.lambda_dim))
                 if sample_lambda else None)
    for start in range(0, n_samples, chunk_size):
        stop = min(start + chunk_size, n_samples)
        chunk_w = theta_w[start:stop]
        lam = _gradient_lambdas(model, sample_lambda,
                                lam_draws[start:stop] if sample_lambda else None)
        per_net = _gradient_chunk(model, chunk_w, lam, groups, theta_scales,
                                  n_rows, start)
        for net, grad in enumerate(per_net):
            # (Jc, n_rows, n_params) -> columns i*n_rows + r, sample-major
            jc = grad.shape[0]
            cols = grad.reshape(jc * n_rows, -1).T * scale
            mats[net][:, start * n_rows:stop * n_rows] = cols
    return mats


def _gradient_lambdas(model: PdeForwardModel, sample_lambda: bool,
                      draws: Array | None) -> dict:
    """Physical-parameter columns used during gradient sampling."""
    lam: dict = {}
    for i, name in enumerate(model.unknown_lambdas):
        lam[name] = draws[:, i][:, None] if sample_lambda else 0.0
    for name in model.problem.lambda_names:
        if name not in lam:
            lam[name] = model.problem.true_lambda(name)
    return lam


def _gradient_chunk(model: PdeForwardModel, chunk_w: Array, lam: dict,
                    groups: dict, theta_scales: list[Array], n_rows: int,
                    sample_offset: int) -> list[Array]:
    """Per-network gradients (Jc, n_rows, n_params_net) for one sample chunk."""
    problem = model.problem
    jc = chunk_w.shape[0]
    sizes = [t.n_params for t in model.templates]
    bounds = np.concatenate([[0], np.cumsum(sizes)])
    raw = [chunk_w[:, a:b] * s
           for a, b, s in zip(bounds[:-1], bounds[1:], theta_scales)]
    out = [np.zeros((jc, n_rows, t.n_params)) for t in model.templates]

    f_idx, f_pos = groups["f_idx"], groups["f_pos"]
    with np.errstate(over="ignore", invalid="ignore"):
        return _gradient_chunk_body(model, problem, raw, lam, groups,
                                    theta_scales, out, f_idx, f_pos,
                                    sample_offset)


def _gradient_chunk_body(model, problem, raw, lam, groups, theta_scales, out,
                         f_idx, f_pos, sample_offset):
    if f_idx.size:
        f_pts = model.observations.residual.points[f_idx]
        uv, ug, us = sg.batch_derivs(model.templates[0], raw[0], f_pts)
        u_value, u_grad = uv[:, :, 0], ug[:, :, 0, :]
        u_lap = us[:, :, 0, :].sum(axis=-1)
        if problem.name == "darcy":
            kv, kg, _ = sg.batch_derivs(model.templates[1], raw[1], f_pts)
            cots = _residual_cotangents(problem, lam, u_value, u_grad, u_lap,
                                        kv[:, :, 0], kg[:, :, 0, :])
        else:
            cots = _residual_cotangents(problem, lam, u_value, u_grad, u_lap)
        for net, (cv, cg, ch) in enumerate(cots):
            grad = sg.batch_vjp(model.templates[net], raw[net], f_pts,
                                cv, cg, ch)
            out[net][:, f_pos, :] = grad
    _value_row_gradients(model, raw, groups, out, net_for="u")
    if "k_points" in groups:
        _value_row_gradients(model, raw, groups, out, net_for="k")
    for net, grad in enumerate(out):
        if not np.all(np.isfinite(grad)):
            bad = np.nonzero(~np.isfinite(grad).all(axis=(1, 2)))[0][0]
            raise FloatingPointError(
                f"non-finite gradient entries for sample "
                f"{sample_offset + int(bad)}")
        grad *= theta_scales[net]  # chain rule back to whitened coordinates
    return out


def _value_row_gradients(model: PdeForwardModel, raw: list[Array],
                         groups: dict, out: list[Array], net_for: str) -> None:
    points = groups[f"{net_for}_points"]
    pos = groups[f"{net_for}_pos"]
    if len(points) == 0:
        return
    net = 0 if net_for == "u" else 1
    jc = raw[net].shape[0]
    cv = np.ones((jc, len(points), 1))
    grad = sg.batch_vjp(model.templates[net], raw[net], points, cv, None, None)
    out[net][:, pos, :] = grad


# ---------------------------------------------------------------------------
# subspace construction
# ---------------------------------------------------------------------------


def left_singular_factors(g: Array, route: str = "auto") -> tuple[Array, Array]:
    """Left singular vectors and singular values of a gradient sample matrix.

    route "svd" computes the thin SVD of G directly; "eigen" diagonalizes the
    Gram matrix G G^T, whose eigenpairs are the same left factors with squared
    singular values. "auto" picks "eigen" for very wide matrices, where it is
    far cheaper and the factorization is identical up to column sign.
    """
    g = np.asarray(g, dtype=np.float64)
    if g.ndim != 2:
        raise ValueError(f"expected a 2-d gradient matrix, got shape {g.shape}")
    if route == "auto":
        route = "eigen" if g.shape[1] > 4 * g.shape[0] else "svd"
    if route == "svd":
        w, s, _ = thin_svd(g)
        return w, s
    if route == "eigen":
        gram = g @ g.T
        eigvals, eigvecs = np.linalg.eigh(gram)
        order = np.argsort(eigvals)[::-1]
        s = np.sqrt(np.clip(eigvals[order], 0.0, None))
        return eigvecs[:, order], s
    raise ValueError(f"unknown factorization route '{route}'")


def build_subspace(gradients, fraction: float = DEFAULT_FRACTION,
                   route: str = "auto") -> SubspaceMap:
    """Reduced map keeping the top ceil(fraction * n_theta) directions per block.

    gradients is a single matrix or one matrix per network. If a block's
    numerical rank falls short of the target dimension, the block is truncated
    to the rank (with a warning) rather than padded with arbitrary directions.
    """
    if not 0.0 < fraction <= 1.0:
        raise ValueError(f"fraction must lie in (0, 1], got {fraction}")
    if isinstance(gradients, np.ndarray):
        gradients = [gradients]
    blocks = []
    for g in gradients:
        g = np.asarray(g, dtype=np.float64)
        n_theta = g.shape[0]
        m = min(n_theta, math.ceil(fraction * n_theta))
        w, s = left_singular_factors(g, route)
        tol = (s[0] * max(g.shape) * np.finfo(np.float64).eps) if s.size else 0.0
        rank = int(np.sum(s > tol))
        if rank < m:
            warnings.warn(
                f"gradient matrix rank {rank} is below the target dimension "
                f"{m}; keeping only {rank} directions", RuntimeWarning)
            m = rank
        total = float(np.sum(s ** 2))
        energy = float(np.sum(s[:m] ** 2) / total) if total > 0 else 0.0
        blocks.append(SubspaceBlock(
            basis=np.ascontiguousarray(w[:, :m]),
            singular_values=s,
            energy=energy,
        ))
    return SubspaceMap(tuple(blocks))


def build_subspace_for_model(model: PdeForwardModel,
                             n_samples: int = DEFAULT_GRADIENT_SAMPLES,
                             n_points: int = DEFAULT_GRADIENT_POINTS,
                             rng: SeededRng | int = 0,
                             fraction: float = DEFAULT_FRACTION,
                             sample_lambda: bool = False,
                             route: str = "auto") -> SubspaceMap:
    """Gradient sampling plus factorization in one deterministic step."""
    mats = gradient_matrix(model, n_samples, rng=rng, n_points=n_points,
                           sample_lambda=sample_lambda)
    return build_subspace(mats, fraction=fraction, route=route)


# ---------------------------------------------------------------------------
# reduced forward model and driver
# ---------------------------------------------------------------------------


class SubspaceForwardModel:
    """Forward model over reduced members zeta = (lambda, omega).

    Every evaluation lifts omega through the subspace basis and rescales by
    the per-coordinate coefficient prior std, then delegates to the full
    model. Both member blocks carry unit prior std by construction, so the
    reduced Tikhonov block is the identity prior.
    """

    def __init__(self, model: PdeForwardModel, subspace_map: SubspaceMap):
        expected = tuple(t.n_params for t in model.templates)
        got = tuple(b.n_theta for b in subspace_map.blocks)
        if expected != got:
            raise ValueError(
                f"subspace block sizes {got} do not match the model's "
                f"network sizes {expected}")
        self.model = model
        self.map = subspace_map
        self.problem = model.problem
        self.protocol = model.protocol
        self.unknown_lambdas = model.unknown_lambdas
        self.lambda_dim = model.lambda_dim
        self.n_params = model.lambda_dim + subspace_map.m
        self.y = model.y
        self.gamma_diag = model.gamma_diag
        self.n_residual_rows = model.n_residual_rows
        self.prior_std = np.ones(self.n_params)
        self._theta_scale = model.prior_std[model.lambda_dim:]

    # -- row bookkeeping (delegated) -----------------------------------------

    def row_count(self, residual_idx=None) -> int:
        return self.model.row_count(residual_idx)

    def select_rows(self, residual_idx=None):
        return self.model.select_rows(residual_idx)

    # -- coordinate changes ---------------------------------------------------

    def to_full(self, members: Array) -> Array:
        """Full member vectors (lambda, theta_raw) from reduced ones."""
        members = np.atleast_2d(np.asarray(members, dtype=np.float64))
        if members.shape[1] != self.n_params:
            raise ValueError(
                f"member length {members.shape[1]} != expected {self.n_params}")
        lam = members[:, :self.lambda_dim]
        theta_raw = self.map.lift(members[:, self.lambda_dim:]) * self._theta_scale
        return np.hstack([lam, theta_raw])

    def from_full(self, members: Array) -> Array:
        """Reduced member vectors; theta enters through the whitened projection."""
        members = np.atleast_2d(np.asarray(members, dtype=np.float64))
        lam = members[:, :self.lambda_dim]
        theta_w = members[:, self.lambda_dim:] / self._theta_scale
        return np.hstack([lam, self.map.restrict(theta_w)])

    # -- evaluation ------------------------------------------------------------

    def predict(self, members: Array, residual_idx=None) -> Array:
        return self.model.predict(self.to_full(members), residual_idx)

    def predict_solution(self, members: Array, points: Array) -> Array:
        return self.model.predict_solution(self.to_full(members), points)

    def predict_log_perm(self, members: Array, points: Array) -> Array:
        return self.model.predict_log_perm(self.to_full(members), points)


def run_sdteki(problem: ProblemSpec, data: ObservationSet,
               config: EkiConfig = EkiConfig(), surrogate: str = "ckan",
               subspace: SubspaceMap | str | None = None,
               subspace_rng: SeededRng | int = 0,
               n_gradient_samples: int = DEFAULT_GRADIENT_SAMPLES,
               n_gradient_points: int = DEFAULT_GRADIENT_POINTS) -> EkiResult:
    """Subspace-reduced inversion; returns the reduced-coordinate ensemble.

    subspace may be a prebuilt map, a path to a saved one, or None to build
    one from scratch (deterministic in subspace_rng). Reduced members order
    the physical parameters first, then the subspace coordinates; use
    SubspaceForwardModel.to_full to map them back to full coefficients.
    """
    model = PdeForwardModel(problem, data, surrogate)
    if subspace is None:
        subspace = build_subspace_for_model(
            model, n_gradient_samples, n_gradient_points, subspace_rng)
    elif not isinstance(subspace, SubspaceMap):
        subspace = SubspaceMap.load(subspace)
    reduced = SubspaceForwardModel(model, subspace)
    return run_inversion(reduced, config)
