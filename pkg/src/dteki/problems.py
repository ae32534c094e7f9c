"""Benchmark PDE problems: operators, data generation, and reference oracles.

Each problem bundles a governing operator, a known true solution used to
manufacture data, one or more observation protocols, and surrogate
architectures. Observations stack into blocks in the fixed row order

    residual (f) -> boundary (b) -> interior solution (u) -> log-permeability
    boundary (kb, 2D Darcy only),

and every consumer of stacked vectors in this package follows that order.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Callable, Mapping

import numpy as np
from scipy import sparse
from scipy.interpolate import RegularGridInterpolator
from scipy.sparse.linalg import spsolve

from . import surrogate as sg
from .numerics import Array, SeededRng

# child-stream labels for data generation (kept stable for reproducibility)
_TRUTH_STREAM = 0
_POINT_STREAM = 1
_NOISE_STREAM = 2

_BLOCK_IDS = {"residual": 0, "boundary": 1, "interior": 2, "kappa_boundary": 3}


class NonFinitePredictionError(RuntimeError):
    """A surrogate evaluation produced NaN/Inf for some member at some point."""

    def __init__(self, member: int, block: str, point: Array):
        self.member = int(member)
        self.block = block
        self.point = np.asarray(point)
        super().__init__(
            f"non-finite prediction for member {member} in block '{block}' "
            f"at point {np.asarray(point).tolist()}"
        )


# ---------------------------------------------------------------------------
# observation containers
# ---------------------------------------------------------------------------


def _frozen_array(values, shape_tail: int | None = None) -> Array:
    arr = np.ascontiguousarray(np.asarray(values, dtype=np.float64))
    if shape_tail is not None and arr.ndim == 1:
        arr = arr.reshape(-1, shape_tail)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class Block:
    """One observation block: coordinates, noisy values, and noise scale.

    sigma must be positive for any block that enters an inversion; zero is
    tolerated only for noise-free data checks and is rejected when a forward
    model is built over a non-empty block.
    """

    points: Array  # (N, dim)
    values: Array  # (N,)
    sigma: float

    def __post_init__(self):
        pts = _frozen_array(self.points)
        if pts.ndim == 1:
            pts = _frozen_array(pts.reshape(-1, 1))
        vals = _frozen_array(self.values)
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "values", vals)
        object.__setattr__(self, "sigma", float(self.sigma))
        if pts.shape[0] != vals.shape[0]:
            raise ValueError("block point and value counts differ")
        if self.sigma < 0:
            raise ValueError("noise scale must be non-negative")

    @property
    def count(self) -> int:
        return self.points.shape[0]


@dataclass(frozen=True)
class ObservationSet:
    """All observation blocks for one data realization, with its seed."""

    problem: str
    protocol: str
    residual: Block
    boundary: Block
    interior: Block
    kappa_boundary: Block | None
    seed: int
    spawn_key: tuple[int, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "seed", int(self.seed))
        object.__setattr__(self, "spawn_key", tuple(int(k) for k in self.spawn_key))

    def blocks(self) -> list[tuple[str, Block]]:
        out = [("residual", self.residual), ("boundary", self.boundary),
               ("interior", self.interior)]
        if self.kappa_boundary is not None:
            out.append(("kappa_boundary", self.kappa_boundary))
        return out

    @property
    def n_rows(self) -> int:
        return sum(b.count for _, b in self.blocks())

    def stacked_values(self) -> Array:
        return np.concatenate([b.values for _, b in self.blocks()])

    def stacked_variances(self) -> Array:
        return np.concatenate(
            [np.full(b.count, b.sigma**2) for _, b in self.blocks()]
        )

    def residual_subset(self, idx: Array) -> tuple[Array, Array]:
        """Mini-batch view of the residual block (points, values)."""
        return self.residual.points[idx], self.residual.values[idx]


def observation_set_to_json(obs: ObservationSet) -> str:
    doc: dict = {
        "problem": obs.problem,
        "protocol": obs.protocol,
        "seed": obs.seed,
        "spawn_key": list(obs.spawn_key),
        "dim": int(obs.residual.points.shape[1]),
    }
    for name, block in obs.blocks():
        doc[name] = {
            "points": block.points.tolist(),
            "values": block.values.tolist(),
            "sigma": block.sigma,
        }
    return json.dumps(doc, indent=1)


def observation_set_from_json(text: str) -> ObservationSet:
    doc = json.loads(text)
    dim = int(doc["dim"])

    def load(name) -> Block | None:
        if name not in doc:
            return None
        entry = doc[name]
        pts = np.asarray(entry["points"], dtype=np.float64).reshape(-1, dim)
        return Block(pts, np.asarray(entry["values"], dtype=np.float64), entry["sigma"])

    return ObservationSet(
        problem=doc["problem"],
        protocol=doc["protocol"],
        residual=load("residual"),
        boundary=load("boundary"),
        interior=load("interior"),
        kappa_boundary=load("kappa_boundary"),
        seed=int(doc["seed"]),
        spawn_key=tuple(doc.get("spawn_key", ())),
    )


# ---------------------------------------------------------------------------
# problem and protocol descriptions
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Protocol:
    """Observation counts, noise scales, and inversion weights for one setup."""

    name: str
    n_residual: int
    sigma_residual: float
    n_boundary: int
    sigma_boundary: float
    n_interior: int
    sigma_interior: float
    batch_size: int
    tikhonov_weight: float
    unknown_lambdas: tuple[str, ...] = ()
    n_kappa_boundary: int = 0
    sigma_kappa_boundary: float = 0.01

    def __post_init__(self):
        if self.batch_size < 1 or self.batch_size > self.n_residual:
            raise ValueError("batch size must be in [1, n_residual]")


@dataclass(frozen=True)
class ProblemSpec:
    """Immutable description of one benchmark problem."""

    name: str
    domain: tuple[tuple[float, float], ...]
    lambda_names: tuple[str, ...]
    lambda_true: tuple[float, ...]
    constants: Mapping[str, float]
    net_names: tuple[str, ...]
    ckan_widths: tuple[tuple[int, ...], ...]
    mlp_widths: tuple[tuple[int, ...], ...]
    degree: int
    protocols: Mapping[str, Protocol]
    # Per-layer squash for the cKAN surrogates. The benchmarks use sigmoid:
    # with standard normal coefficient priors it keeps prior function draws at
    # unit amplitude (stable ensemble updates) while retaining enough
    # derivative reach for the multiscale solutions, whereas tanh at the same
    # prior makes prior draws and their PDE residuals explode.
    ckan_squash: str = "sigmoid"

    @property
    def n_inputs(self) -> int:
        return len(self.domain)

    def protocol(self, name: str) -> Protocol:
        if name not in self.protocols:
            raise KeyError(
                f"problem '{self.name}' has no protocol '{name}'; "
                f"available: {sorted(self.protocols)}"
            )
        return self.protocols[name]

    def true_lambda(self, name: str) -> float:
        return self.lambda_true[self.lambda_names.index(name)]


def make_templates(problem: ProblemSpec, surrogate: str = "ckan"):
    """Surrogate templates for the problem, one per network."""
    if surrogate == "ckan":
        return [sg.ckan_template(list(w), degree=problem.degree, squash=problem.ckan_squash)
                for w in problem.ckan_widths]
    if surrogate == "mlp":
        return [sg.mlp_template(list(w)) for w in problem.mlp_widths]
    raise ValueError(f"unknown surrogate kind '{surrogate}'")


def make_transport() -> ProblemSpec:
    return ProblemSpec(
        name="transport",
        domain=((0.0, 1.0), (0.0, 1.0)),  # (x, t)
        lambda_names=("a",),
        lambda_true=(1.0,),
        constants={},
        net_names=("u",),
        ckan_widths=((2, 10, 10, 1),),
        mlp_widths=((2, 30, 30, 1),),
        degree=7,
        protocols={
            "inverse": Protocol(
                name="inverse",
                n_residual=500, sigma_residual=0.1,
                n_boundary=30, sigma_boundary=0.1,
                n_interior=60, sigma_interior=0.1,
                batch_size=20, tikhonov_weight=0.1,
                unknown_lambdas=("a",),
            )
        },
    )


def make_diffusion() -> ProblemSpec:
    return ProblemSpec(
        name="diffusion",
        domain=((0.0, 1.0),),
        lambda_names=("D",),
        lambda_true=(0.1,),
        constants={"kappa": 0.001},
        net_names=("u",),
        ckan_widths=((1, 10, 10, 1),),
        mlp_widths=((1, 29, 29, 1),),
        degree=7,
        protocols={
            "inverse": Protocol(
                name="inverse",
                n_residual=50, sigma_residual=0.1,
                n_boundary=2, sigma_boundary=0.1,
                n_interior=6, sigma_interior=0.1,
                batch_size=50, tikhonov_weight=0.1,
                unknown_lambdas=("D",),
            ),
            "big_data": Protocol(
                name="big_data",
                n_residual=5000, sigma_residual=2.0,
                n_boundary=2, sigma_boundary=0.05,
                n_interior=0, sigma_interior=0.05,
                batch_size=100, tikhonov_weight=0.01,
                unknown_lambdas=(),
            ),
        },
    )


def make_nonlinear() -> ProblemSpec:
    return ProblemSpec(
        name="nonlinear",
        domain=((-0.7, 0.7),),
        lambda_names=("k",),
        lambda_true=(0.7,),
        constants={"lambda_coef": 0.01},
        net_names=("u",),
        ckan_widths=((1, 10, 10, 1),),
        mlp_widths=((1, 29, 29, 1),),
        degree=7,
        protocols={
            "inverse": Protocol(
                name="inverse",
                n_residual=50, sigma_residual=0.1,
                n_boundary=2, sigma_boundary=0.1,
                n_interior=6, sigma_interior=0.1,
                batch_size=50, tikhonov_weight=0.1,
                unknown_lambdas=("k",),
            ),
            "big_data": Protocol(
                name="big_data",
                n_residual=5000, sigma_residual=0.8,
                n_boundary=2, sigma_boundary=0.05,
                n_interior=3, sigma_interior=0.05,
                batch_size=100, tikhonov_weight=0.01,
                unknown_lambdas=(),
            ),
        },
    )


def make_darcy() -> ProblemSpec:
    return ProblemSpec(
        name="darcy",
        domain=((0.0, 1.0), (0.0, 1.0)),
        lambda_names=(),
        lambda_true=(),
        constants={"forcing": 10.0},
        net_names=("u", "kappa"),
        ckan_widths=((2, 10, 10, 1), (2, 10, 10, 1)),
        mlp_widths=((2, 30, 30, 1), (2, 30, 30, 1)),
        degree=7,
        protocols={
            "inverse": Protocol(
                name="inverse",
                n_residual=5000, sigma_residual=0.1,
                n_boundary=40, sigma_boundary=0.01,
                n_interior=40, sigma_interior=0.01,
                batch_size=100, tikhonov_weight=5.0,
                unknown_lambdas=(),
                n_kappa_boundary=16, sigma_kappa_boundary=0.01,
            )
        },
    )


_FACTORIES: dict[str, Callable[[], ProblemSpec]] = {
    "transport": make_transport,
    "diffusion": make_diffusion,
    "nonlinear": make_nonlinear,
    "darcy": make_darcy,
}


def make_problem(name: str) -> ProblemSpec:
    if name not in _FACTORIES:
        raise KeyError(f"unknown problem '{name}'; available: {sorted(_FACTORIES)}")
    return _FACTORIES[name]()


# ---------------------------------------------------------------------------
# true solutions (closed forms for the 1D/transport problems)
# ---------------------------------------------------------------------------


def transport_solution(points: Array, a: float = 1.0) -> Array:
    """u(x, t) = x - a t."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    return pts[:, 0] - a * pts[:, 1]


def diffusion_solution_derivs(x):
    """(u, u', u'') for u(x) = sin(6 pi x) cos(4 pi x)^2 (accepts complex x)."""
    x = np.asarray(x)
    p = np.pi
    s6, c6 = np.sin(6 * p * x), np.cos(6 * p * x)
    s4, c4 = np.sin(4 * p * x), np.cos(4 * p * x)
    u = s6 * c4**2
    du = 6 * p * c6 * c4**2 - 8 * p * s6 * c4 * s4
    ddu = (
        -68 * p**2 * s6 * c4**2
        - 96 * p**2 * c6 * c4 * s4
        + 32 * p**2 * s6 * s4**2
    )
    return u, du, ddu


def nonlinear_solution_derivs(x):
    """(u, u', u'') for u(x) = sin(6x)^3 (accepts complex x)."""
    x = np.asarray(x)
    s, c = np.sin(6 * x), np.cos(6 * x)
    u = s**3
    du = 18 * s**2 * c
    ddu = 216 * s * c**2 - 108 * s**3
    return u, du, ddu


@dataclass(frozen=True)
class Truth:
    """Callables evaluating the data-generating ground truth."""

    solution: Callable[[Array], Array]
    forcing: Callable[[Array], Array]
    boundary: Callable[[Array], Array]
    log_perm: Callable[[Array], Array] | None = None
    solution_grid: Array | None = None
    log_perm_grid: Array | None = None
    kl_coefficients: Array | None = None


def make_truth(problem: ProblemSpec, seed: int | SeededRng,
               grid_size: int = 64) -> Truth:
    """Ground-truth closures; the seed matters only for the sampled 2D field."""
    rng = seed if isinstance(seed, SeededRng) else SeededRng(int(seed))
    if problem.name == "transport":
        a = problem.true_lambda("a")
        sol = lambda pts: transport_solution(pts, a)
        return Truth(solution=sol, forcing=lambda pts: np.zeros(len(np.atleast_2d(pts))),
                     boundary=sol)
    if problem.name == "diffusion":
        kappa = problem.constants["kappa"]
        d_true = problem.true_lambda("D")

        def sol(pts):
            return diffusion_solution_derivs(np.asarray(pts).reshape(-1))[0]

        def force(pts):
            _, du, ddu = diffusion_solution_derivs(np.asarray(pts).reshape(-1))
            return kappa * ddu + d_true * du

        return Truth(solution=sol, forcing=force, boundary=sol)
    if problem.name == "nonlinear":
        lam_c = problem.constants["lambda_coef"]
        k_true = problem.true_lambda("k")

        def sol(pts):
            return nonlinear_solution_derivs(np.asarray(pts).reshape(-1))[0]

        def force(pts):
            u, _, ddu = nonlinear_solution_derivs(np.asarray(pts).reshape(-1))
            return lam_c * ddu + k_true * np.tanh(u)

        return Truth(solution=sol, forcing=force, boundary=sol)
    if problem.name == "darcy":
        return _darcy_truth(problem, rng, grid_size)
    raise KeyError(f"unknown problem '{problem.name}'")


# ---------------------------------------------------------------------------
# KL random field (2D Darcy log-permeability prior)
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class KLField:
    """Truncated cosine expansion of a Gaussian field on the unit square.

    Modes are Neumann-Laplacian eigenfunctions psi(x) = c * cos(l1 pi x1) *
    cos(l2 pi x2) with L2 normalization (c = 2 if both indices positive,
    sqrt(2) if exactly one is zero), weighted by eigenvalues
    mu = (pi^2 (l1^2 + l2^2) + tau^2)^(-regularity), sorted descending.
    """

    tau: float
    regularity: float
    n_terms: int
    indices: Array  # (n_terms, 2) ints
    mu: Array  # (n_terms,)
    norm_consts: Array  # (n_terms,)

    def __post_init__(self):
        for name in ("indices", "mu", "norm_consts"):
            arr = np.ascontiguousarray(getattr(self, name))
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)


def make_kl_field(tau: float = 5.0, regularity: float = 4.0,
                  n_terms: int = 256, max_index: int = 60) -> KLField:
    l1, l2 = np.meshgrid(np.arange(max_index + 1), np.arange(max_index + 1),
                         indexing="ij")
    l1, l2 = l1.ravel(), l2.ravel()
    keep = (l1 + l2) > 0
    l1, l2 = l1[keep], l2[keep]
    mu = (np.pi**2 * (l1**2 + l2**2) + tau**2) ** (-regularity)
    order = np.lexsort((l2, l1, -mu))  # descending mu; index order breaks ties
    take = order[:n_terms]
    consts = np.where((l1[take] > 0) & (l2[take] > 0), 2.0, np.sqrt(2.0))
    return KLField(
        tau=float(tau),
        regularity=float(regularity),
        n_terms=int(n_terms),
        indices=np.column_stack([l1[take], l2[take]]).astype(np.int64),
        mu=mu[take],
        norm_consts=consts,
    )


def kl_sample(field: KLField, lam: Array, points: Array) -> Array:
    """Field value sum_l lam_l sqrt(mu_l) psi_l(x) at one or many points."""
    lam = np.asarray(lam, dtype=np.float64)
    if lam.shape != (field.n_terms,):
        raise ValueError(
            f"coefficient vector has length {lam.shape}, expected ({field.n_terms},)"
        )
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    c1 = np.cos(pts[:, 0][:, None] * (np.pi * field.indices[:, 0])[None, :])
    c2 = np.cos(pts[:, 1][:, None] * (np.pi * field.indices[:, 1])[None, :])
    basis = field.norm_consts[None, :] * c1 * c2  # (N, n_terms)
    out = basis @ (lam * np.sqrt(field.mu))
    return out if np.asarray(points).ndim > 1 else out[0]


# ---------------------------------------------------------------------------
# Darcy reference solver (cell-centered finite volumes)
# ---------------------------------------------------------------------------


class SolverConvergenceError(RuntimeError):
    def __init__(self, residual: float):
        self.residual = residual
        super().__init__(f"reference solve residual {residual:.3e} exceeds 1e-10")


def cell_centers(n: int) -> Array:
    return (np.arange(n) + 0.5) / n


def darcy_reference_solve(log_perm_grid: Array, forcing: float = 10.0) -> Array:
    """Solve -div(exp(kappa) grad u) = f on the unit square, u = 0 on the edge.

    log_perm_grid holds the exponent field at the n x n cell centers
    (first index = x, second = y). Five-point finite volumes with harmonic-mean
    face coefficients; the direct sparse solve is verified to residual 1e-10.
    """
    kappa = np.asarray(log_perm_grid, dtype=np.float64)
    n = kappa.shape[0]
    if kappa.shape != (n, n) or n < 16:
        raise ValueError("expected a square grid with n >= 16")
    perm = np.exp(kappa)
    h2 = (1.0 / n) ** 2

    def harmonic(a, b):
        return 2.0 * a * b / (a + b)

    face_x = harmonic(perm[:-1, :], perm[1:, :]) / h2  # between (i,j) and (i+1,j)
    face_y = harmonic(perm[:, :-1], perm[:, 1:]) / h2

    diag = np.zeros((n, n))
    diag[:-1, :] += face_x
    diag[1:, :] += face_x
    diag[:, :-1] += face_y
    diag[:, 1:] += face_y
    # Dirichlet boundary faces: half-cell distance to the wall value 0
    diag[0, :] += 2.0 * perm[0, :] / h2
    diag[-1, :] += 2.0 * perm[-1, :] / h2
    diag[:, 0] += 2.0 * perm[:, 0] / h2
    diag[:, -1] += 2.0 * perm[:, -1] / h2

    idx = np.arange(n * n).reshape(n, n)
    rows = [idx.ravel()]
    cols = [idx.ravel()]
    vals = [diag.ravel()]
    rows += [idx[:-1, :].ravel(), idx[1:, :].ravel()]
    cols += [idx[1:, :].ravel(), idx[:-1, :].ravel()]
    vals += [-face_x.ravel(), -face_x.ravel()]
    rows += [idx[:, :-1].ravel(), idx[:, 1:].ravel()]
    cols += [idx[:, 1:].ravel(), idx[:, :-1].ravel()]
    vals += [-face_y.ravel(), -face_y.ravel()]
    mat = sparse.csr_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
        shape=(n * n, n * n),
    )
    rhs = np.full(n * n, float(forcing))
    u = spsolve(mat, rhs)
    rel_res = np.linalg.norm(mat @ u - rhs) / np.linalg.norm(rhs)
    if not np.isfinite(rel_res) or rel_res > 1e-10:
        raise SolverConvergenceError(rel_res)
    return u.reshape(n, n)


def grid_interpolator(grid: Array) -> Callable[[Array], Array]:
    """Bilinear interpolant of cell-center values, zero on the square's edge."""
    n = grid.shape[0]
    coords = np.concatenate([[0.0], cell_centers(n), [1.0]])
    padded = np.zeros((n + 2, n + 2))
    padded[1:-1, 1:-1] = grid
    interp = RegularGridInterpolator((coords, coords), padded, method="linear")

    def evaluate(points: Array) -> Array:
        return interp(np.asarray(points, dtype=np.float64).reshape(-1, 2))

    return evaluate


def _darcy_truth(problem: ProblemSpec, rng: SeededRng, grid_size: int) -> Truth:
    field = make_kl_field()
    lam = rng.child(_TRUTH_STREAM).standard_normal(field.n_terms)
    centers = cell_centers(grid_size)
    gx, gy = np.meshgrid(centers, centers, indexing="ij")
    grid_pts = np.column_stack([gx.ravel(), gy.ravel()])
    log_perm = kl_sample(field, lam, grid_pts).reshape(grid_size, grid_size)
    forcing = problem.constants["forcing"]
    u_grid = darcy_reference_solve(log_perm, forcing)
    u_interp = grid_interpolator(u_grid)
    return Truth(
        solution=u_interp,
        forcing=lambda pts: np.full(len(np.atleast_2d(pts)), forcing),
        boundary=lambda pts: np.zeros(len(np.atleast_2d(pts))),
        log_perm=lambda pts: kl_sample(field, lam, np.asarray(pts).reshape(-1, 2)),
        solution_grid=u_grid,
        log_perm_grid=log_perm,
        kl_coefficients=lam,
    )


# ---------------------------------------------------------------------------
# observation generation
# ---------------------------------------------------------------------------


def _edge_points(per_edge: int) -> Array:
    """Mid-cell equispaced points along the four edges of the unit square."""
    s = (np.arange(per_edge) + 0.5) / per_edge
    zero, one = np.zeros(per_edge), np.ones(per_edge)
    return np.concatenate([
        np.column_stack([s, zero]),   # bottom
        np.column_stack([one, s]),    # right
        np.column_stack([s, one]),    # top
        np.column_stack([zero, s]),   # left
    ])


def _interior_grid_1d(lo: float, hi: float, n: int) -> Array:
    i = np.arange(1, n + 1)
    return (lo + (hi - lo) * i / (n + 1)).reshape(-1, 1)


def _uniform_box(rng: SeededRng, domain, n: int) -> Array:
    cols = [rng.uniform(lo, hi, n) for lo, hi in domain]
    return np.column_stack(cols) if cols else np.zeros((n, 0))


def _draw_points(problem: ProblemSpec, prot: Protocol, rng: SeededRng) -> dict:
    pts: dict[str, Array] = {}
    pts["residual"] = _uniform_box(
        rng.child(_POINT_STREAM, _BLOCK_IDS["residual"]), problem.domain, prot.n_residual
    )
    if problem.name == "transport":
        if prot.n_boundary % 2:
            raise ValueError("transport boundary count must split evenly in two")
        half = prot.n_boundary // 2
        xs = np.linspace(0.0, 1.0, half)
        init = np.column_stack([xs, np.zeros(half)])  # t = 0 slice
        inflow = np.column_stack([np.zeros(half), xs])  # x = 0 slice
        pts["boundary"] = np.concatenate([init, inflow])
        pts["interior"] = _uniform_box(
            rng.child(_POINT_STREAM, _BLOCK_IDS["interior"]), problem.domain,
            prot.n_interior,
        )
    elif problem.name == "darcy":
        pts["boundary"] = _edge_points(prot.n_boundary // 4)
        pts["interior"] = _uniform_box(
            rng.child(_POINT_STREAM, _BLOCK_IDS["interior"]), problem.domain,
            prot.n_interior,
        )
        pts["kappa_boundary"] = _edge_points(prot.n_kappa_boundary // 4)
    else:  # 1D problems
        lo, hi = problem.domain[0]
        pts["boundary"] = np.linspace(lo, hi, prot.n_boundary).reshape(-1, 1)
        pts["interior"] = _interior_grid_1d(lo, hi, prot.n_interior)
    return pts


def generate_data(problem: ProblemSpec, protocol: Protocol | str,
                  rng: SeededRng) -> ObservationSet:
    """Draw observation points and noisy values; fully determined by the seed."""
    prot = problem.protocol(protocol) if isinstance(protocol, str) else protocol
    truth = make_truth(problem, rng)
    pts = _draw_points(problem, prot, rng)

    def noisy(name: str, clean: Array, sigma: float) -> Block:
        noise_rng = rng.child(_NOISE_STREAM, _BLOCK_IDS[name])
        values = clean + sigma * noise_rng.standard_normal(clean.shape[0])
        return Block(pts[name], values, sigma)

    residual = noisy("residual", truth.forcing(pts["residual"]), prot.sigma_residual)
    boundary = noisy("boundary", truth.boundary(pts["boundary"]), prot.sigma_boundary)
    interior = noisy("interior", truth.solution(pts["interior"]), prot.sigma_interior)
    kb = None
    if problem.name == "darcy":
        kb = noisy("kappa_boundary", truth.log_perm(pts["kappa_boundary"]),
                   prot.sigma_kappa_boundary)
    return ObservationSet(
        problem=problem.name,
        protocol=prot.name,
        residual=residual,
        boundary=boundary,
        interior=interior,
        kappa_boundary=kb,
        seed=rng.seed,
        spawn_key=rng.key,
    )


# ---------------------------------------------------------------------------
# forward model: stacked surrogate predictions
# ---------------------------------------------------------------------------


def residual_rows(problem: ProblemSpec, lam: Mapping[str, Array | float],
                  u_value: Array, u_grad: Array, u_lap: Array | None,
                  kappa_value: Array | None = None,
                  kappa_grad: Array | None = None) -> Array:
    """PDE residual predictions (J, P) from surrogate evaluations at points.

    u_value and u_lap are (J, P); u_grad and kappa_grad are (J, P, D). u_lap
    holds the sum of diagonal second derivatives over input dimensions (equal
    to u'' in one dimension) and may be None for first-order operators. lam
    maps each physical-parameter name to a scalar or a (J, 1) column.
    """
    if problem.name == "transport":
        return u_grad[:, :, 1] + lam["a"] * u_grad[:, :, 0]
    if problem.name == "diffusion":
        kappa = problem.constants["kappa"]
        return kappa * u_lap + lam["D"] * u_grad[:, :, 0]
    if problem.name == "nonlinear":
        lam_c = problem.constants["lambda_coef"]
        return lam_c * u_lap + lam["k"] * np.tanh(u_value)
    if problem.name == "darcy":
        advect = np.einsum("jpm,jpm->jp", kappa_grad, u_grad)
        return -np.exp(kappa_value) * (advect + u_lap)
    raise KeyError(f"unknown problem '{problem.name}'")


class PdeForwardModel:
    """Batched map from flat parameter vectors to stacked observation rows.

    Rows follow the fixed block order residual -> boundary -> interior ->
    log-permeability boundary. The residual block supports row subsetting for
    mini-batches; the other blocks are always evaluated in full.
    """

    def __init__(self, problem: ProblemSpec, observations: ObservationSet,
                 surrogate: str = "ckan"):
        if observations.problem != problem.name:
            raise ValueError("observation set belongs to a different problem")
        self.problem = problem
        self.observations = observations
        self.surrogate = surrogate
        for name, block in observations.blocks():
            if block.count > 0 and block.sigma <= 0:
                raise ValueError(f"block '{name}' needs a positive noise scale")
        # ad-hoc observation sets may use a protocol the problem does not
        # register; inversion drivers then need explicit batch settings
        self.protocol = problem.protocols.get(observations.protocol)
        self.templates = make_templates(problem, surrogate)
        if self.protocol is not None:
            self.unknown_lambdas = self.protocol.unknown_lambdas
        else:
            self.unknown_lambdas = ()
        self.lambda_dim = len(self.unknown_lambdas)
        sizes = [t.n_params for t in self.templates]
        self.n_theta = int(sum(sizes))
        self.n_params = self.lambda_dim + self.n_theta
        bounds = np.concatenate([[0], np.cumsum(sizes)]) + self.lambda_dim
        self.theta_slices = tuple(
            slice(int(a), int(b)) for a, b in zip(bounds[:-1], bounds[1:])
        )
        self.y = observations.stacked_values()
        self.gamma_diag = observations.stacked_variances()
        self.n_residual_rows = observations.residual.count
        self._blocks = observations.blocks()
        # physical parameters keep unit prior std; network coefficients use
        # the architecture's per-parameter scales (all ones for the
        # sigmoid-squashed benchmark nets)
        self.prior_std = np.concatenate(
            [np.ones(self.lambda_dim)]
            + [sg.prior_std(t) for t in self.templates])

    # -- row bookkeeping ----------------------------------------------------

    def row_count(self, residual_idx: Array | None = None) -> int:
        nf = self.n_residual_rows if residual_idx is None else len(residual_idx)
        return nf + self.y.size - self.n_residual_rows

    def select_rows(self, residual_idx: Array | None = None) -> tuple[Array, Array]:
        """(targets, noise variances) with the residual block subsampled."""
        if residual_idx is None:
            return self.y, self.gamma_diag
        nf = self.n_residual_rows
        keep = np.concatenate([np.asarray(residual_idx, dtype=np.intp),
                               np.arange(nf, self.y.size)])
        return self.y[keep], self.gamma_diag[keep]

    # -- evaluation ----------------------------------------------------------

    def _lambda_columns(self, members: Array) -> dict[str, Array | float]:
        lam: dict[str, Array | float] = {}
        for i, name in enumerate(self.unknown_lambdas):
            lam[name] = members[:, i][:, None]
        for name in self.problem.lambda_names:
            if name not in lam:
                lam[name] = self.problem.true_lambda(name)
        return lam

    def _theta(self, members: Array, net: int) -> Array:
        return members[:, self.theta_slices[net]]

    def predict(self, members: Array, residual_idx: Array | None = None) -> Array:
        """Stacked predictions (J, rows) for each member (row) of `members`."""
        members = np.atleast_2d(np.asarray(members, dtype=np.float64))
        if members.shape[1] != self.n_params:
            raise ValueError(
                f"member length {members.shape[1]} != expected {self.n_params}"
            )
        obs = self.observations
        lam = self._lambda_columns(members)
        theta_u = self._theta(members, 0)
        f_pts = obs.residual.points
        if residual_idx is not None:
            f_pts = f_pts[np.asarray(residual_idx, dtype=np.intp)]

        need_lap = self.problem.name != "transport"
        # overflow from diverged members is caught by the finiteness check below
        with np.errstate(over="ignore", invalid="ignore"):
            uv, ug, ul = sg.batch_eval_fast(self.templates[0], theta_u, f_pts,
                                            need_grad=True, need_second=need_lap)
            uv, ug = uv[:, :, 0], ug[:, :, 0, :]
            ul = None if ul is None else ul[:, :, 0]
            if self.problem.name == "darcy":
                theta_k = self._theta(members, 1)
                kv, kg, _ = sg.batch_eval_fast(self.templates[1], theta_k, f_pts,
                                               need_grad=True, need_second=False)
                res = residual_rows(self.problem, lam, uv, ug, ul,
                                    kv[:, :, 0], kg[:, :, 0, :])
            else:
                res = residual_rows(self.problem, lam, uv, ug, ul)

        # value-only blocks share one surrogate call per network
        bu_pts = np.concatenate([obs.boundary.points, obs.interior.points])
        bu = sg.batch_eval_fast(self.templates[0], theta_u, bu_pts,
                                need_grad=False, need_second=False)[0][:, :, 0]
        parts = [res, bu]
        if obs.kappa_boundary is not None:
            kb = sg.batch_eval_fast(self.templates[1], self._theta(members, 1),
                                    obs.kappa_boundary.points,
                                    need_grad=False, need_second=False)[0][:, :, 0]
            parts.append(kb)
        out = np.concatenate(parts, axis=1)
        if not np.all(np.isfinite(out)):
            self._raise_non_finite(out, f_pts)
        return out

    def _raise_non_finite(self, out: Array, f_pts: Array) -> None:
        member, row = np.argwhere(~np.isfinite(out))[0]
        obs = self.observations
        nf = f_pts.shape[0]
        nb = obs.boundary.count
        nu = obs.interior.count
        if row < nf:
            block, point = "residual", f_pts[row]
        elif row < nf + nb:
            block, point = "boundary", obs.boundary.points[row - nf]
        elif row < nf + nb + nu:
            block, point = "interior", obs.interior.points[row - nf - nb]
        else:
            block = "kappa_boundary"
            point = obs.kappa_boundary.points[row - nf - nb - nu]
        raise NonFinitePredictionError(member, block, point)

    # -- mean-field evaluation over grids (used for reporting) ---------------

    def predict_solution(self, members: Array, points: Array) -> Array:
        """u-network values (J, P) at arbitrary points."""
        members = np.atleast_2d(members)
        return sg.batch_values(self.templates[0], self._theta(members, 0),
                               np.asarray(points, dtype=np.float64))[:, :, 0]

    def predict_log_perm(self, members: Array, points: Array) -> Array:
        """log-permeability network values (J, P); 2D Darcy only."""
        if len(self.templates) < 2:
            raise ValueError("problem has no log-permeability network")
        members = np.atleast_2d(members)
        return sg.batch_values(self.templates[1], self._theta(members, 1),
                               np.asarray(points, dtype=np.float64))[:, :, 0]


def build_forward_model(problem: ProblemSpec, observations: ObservationSet,
                        surrogate: str = "ckan") -> PdeForwardModel:
    return PdeForwardModel(problem, observations, surrogate)


def forward_operator(problem: ProblemSpec, xi: Array,
                     observations: ObservationSet,
                     surrogate: str = "ckan") -> Array:
    """Stacked prediction vector for a single flat parameter vector."""
    model = PdeForwardModel(problem, observations, surrogate)
    return model.predict(np.asarray(xi, dtype=np.float64)[None, :])[0]


# ---------------------------------------------------------------------------
# analytic posterior for the transport problem
# ---------------------------------------------------------------------------


def transport_true_posterior(data: ObservationSet) -> tuple[float, float]:
    """Exact Gaussian posterior (mean, std) of the transport speed.

    Solution observations obey u = x - a t + noise, so each row contributes
    t^2 / sigma^2 to the posterior precision on top of the unit prior
    precision, and t (x - u) / sigma^2 to the weighted-mean numerator.
    No data returns the prior (0, 1).
    """
    precision = 1.0
    numerator = 0.0
    for block in (data.boundary, data.interior):
        if block.count == 0:
            continue
        x, t = block.points[:, 0], block.points[:, 1]
        precision += float(np.sum(t * t)) / block.sigma**2
        numerator += float(np.sum(t * (x - block.values))) / block.sigma**2
    return numerator / precision, precision**-0.5


# ---------------------------------------------------------------------------
# evaluation meshes
# ---------------------------------------------------------------------------


def evaluation_points(problem: ProblemSpec, n_1d: int = 1000,
                      grid_2d: int = 64) -> Array:
    """Fixed mesh for error metrics: equispaced in 1D, cell centers in 2D."""
    if problem.n_inputs == 1:
        lo, hi = problem.domain[0]
        return np.linspace(lo, hi, n_1d).reshape(-1, 1)
    centers = cell_centers(grid_2d)
    gx, gy = np.meshgrid(centers, centers, indexing="ij")
    return np.column_stack([gx.ravel(), gy.ravel()])
