"""Dropout-Tikhonov ensemble Kalman inversion.

The update iterates

    xi_next = xi_hat + C_xz (C_zz + Gamma_H)^-1 (z - H(xi_hat) - eta)

over an augmented system z = [y; 0], H(xi) = [G(xi); xi] whose zero-target
block imposes an alpha-weighted prior penalty. Per iteration the ensemble is
perturbed (xi_hat = xi + eps, eps ~ N(0, Q)) and a Bernoulli keep-mask
(dropout) is applied to the parameter-side deviations tau entering the gain:
the cross term C_xz couples masked parameter deviations with prediction
deviations of the unmasked perturbed members, while C_zz and the innovations
use the unmasked perturbed members throughout; a fresh eta ~ N(0, Gamma_H) is
drawn per member. Masking only the parameter side regularizes the
rank-deficient (J << n_params) ensemble parameter covariance without
distorting the prediction-space covariance whose magnitude damps the gain.
Residual-block rows may be mini-batched (epoch cycling); the Tikhonov block
and the boundary/interior blocks participate every iteration. Vanilla mode
(ablation) disables dropout, perturbation, and the Tikhonov block, which
reduces the step to the standard stochastic ensemble Kalman update.

Per-iteration draw order from the run's random stream is fixed: epoch
reshuffle (when a mini-batch epoch is exhausted), then perturbation noise,
then the dropout mask, then the member noises eta.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace

import numpy as np

from .numerics import Array, SeededRng, spd_solve
from .problems import (
    NonFinitePredictionError,
    ObservationSet,
    ProblemSpec,
    build_forward_model,
)

_MODES = ("dteki", "vanilla")
_ROUTES = ("direct", "lowrank")


class InversionAbort(RuntimeError):
    """An inversion run stopped before completing its iterations."""

    def __init__(self, iteration: int, message: str, diagnostics=None):
        self.iteration = int(iteration)
        self.diagnostics = diagnostics
        super().__init__(f"iteration {iteration}: {message}")


class DivergenceError(InversionAbort):
    """Data misfit grew past the configured guard threshold."""


class NonFiniteEnsembleError(InversionAbort):
    """A member left the space of finite parameter vectors."""


@dataclass(frozen=True)
class EkiConfig:
    """Hyperparameters of one inversion run.

    dropout_keep is the Bernoulli keep-probability for deviation coordinates;
    lambda_jitter / theta_jitter are the per-coordinate perturbation standard
    deviations for physical parameters and network weights respectively.
    tikhonov_weight / batch_size of None defer to the observation protocol.
    force_route pins the linear-solve route ("direct" factors the full
    augmented covariance, "lowrank" solves in ensemble space); by default the
    cheaper route is chosen from the system size.
    """

    n_members: int = 500
    n_iterations: int = 1000
    dropout_keep: float = 0.8
    tikhonov_weight: float | None = None
    lambda_jitter: float = 0.01
    theta_jitter: float = 0.002
    batch_size: int | None = None
    mode: str = "dteki"
    shared_mask: bool = True
    divergence_window: int = 50
    divergence_factor: float = 10.0
    force_route: str | None = None
    seed: int = 0

    def __post_init__(self):
        if self.n_members < 2:
            raise ValueError("need at least two ensemble members")
        if self.n_iterations < 0:
            raise ValueError("iteration count must be non-negative")
        if not 0.0 < self.dropout_keep <= 1.0:
            raise ValueError("dropout keep-probability must lie in (0, 1]")
        if self.lambda_jitter < 0 or self.theta_jitter < 0:
            raise ValueError("perturbation scales must be non-negative")
        if self.tikhonov_weight is not None and self.tikhonov_weight <= 0:
            raise ValueError("tikhonov weight must be positive")
        if self.batch_size is not None and self.batch_size < 1:
            raise ValueError("batch size must be positive")
        if self.mode not in _MODES:
            raise ValueError(f"mode must be one of {_MODES}")
        if self.force_route is not None and self.force_route not in _ROUTES:
            raise ValueError(f"force_route must be one of {_ROUTES}")
        if self.divergence_window < 1 or self.divergence_factor <= 1:
            raise ValueError("divergence guard needs window >= 1 and factor > 1")


@dataclass(frozen=True)
class UpdateDraws:
    """Externally supplied randomness for one update step (tests use this to
    probe permutation invariance and noise-free identities).

    eps and eta are standard-normal shaped (J, n_params) and (J, n_rows); the
    step scales them by the perturbation and noise standard deviations. mask
    holds 0/1 keep indicators, either shared (n_params,) or per member
    (J, n_params).
    """

    eps: Array
    mask: Array
    eta: Array


@dataclass(frozen=True)
class Diagnostics:
    """Per-iteration traces; row 0 describes the initial ensemble."""

    iterations: Array
    misfit: Array
    spread: Array
    lambda_names: tuple[str, ...]
    lambda_mean: Array  # (n_rows, n_lambda)
    lambda_std: Array

    def to_csv(self, path) -> None:
        cols = [self.iterations, self.misfit, self.spread]
        names = ["iteration", "misfit", "spread"]
        for i, name in enumerate(self.lambda_names):
            cols += [self.lambda_mean[:, i], self.lambda_std[:, i]]
            names += [f"lambda_{name}_mean", f"lambda_{name}_std"]
        np.savetxt(path, np.column_stack(cols), delimiter=",",
                   header=",".join(names), comments="", fmt="%.17g")


@dataclass(frozen=True)
class EkiResult:
    members: Array  # final ensemble (J, n_params)
    diagnostics: Diagnostics
    config: EkiConfig
    iterations_run: int
    wall_time_s: float
    route: str  # linear-solve route used ("direct" / "lowrank")


# ---------------------------------------------------------------------------
# building blocks
# ---------------------------------------------------------------------------


def init_ensemble(n_coords: int, n_members: int, rng: SeededRng,
                  mean: float = 0.0, std=1.0) -> Array:
    """Independent prior draws, one member per row; std may be a scalar or a
    per-coordinate vector."""
    if n_members < 2:
        raise ValueError("need at least two ensemble members")
    return mean + np.asarray(std) * rng.standard_normal((n_members, n_coords))


def perturbation_std(config: EkiConfig, lambda_dim: int, n_params: int) -> Array:
    """Diagonal perturbation stds: physical-parameter block then network block."""
    if config.mode == "vanilla":
        return np.zeros(n_params)
    out = np.full(n_params, config.theta_jitter)
    out[:lambda_dim] = config.lambda_jitter
    return out


def perturb(members: Array, q_std: Array, rng: SeededRng | None = None,
            eps: Array | None = None) -> Array:
    """members + eps * q_std with eps ~ N(0, I) (drawn here unless supplied)."""
    if eps is None:
        eps = rng.standard_normal(members.shape)
    return members + eps * q_std[None, :]


def dropout_deviations(members: Array, keep_prob: float,
                       rng: SeededRng | None = None, *, shared: bool = True,
                       mask: Array | None = None):
    """Split members into (mean, masked deviations, masked members, mask).

    One Bernoulli keep-mask per iteration is shared across members by default,
    which preserves the ensemble mean exactly; per-member masks are the
    alternative reading behind the shared_mask config switch.
    """
    xi_bar = members.mean(axis=0)
    tau = members - xi_bar[None, :]
    if mask is None:
        if keep_prob >= 1.0:
            mask = np.ones(members.shape[1])
        elif shared:
            mask = rng.bernoulli(keep_prob, members.shape[1])
        else:
            mask = rng.bernoulli(keep_prob, members.shape)
    tau_tilde = tau * mask
    return xi_bar, tau_tilde, xi_bar[None, :] + tau_tilde, mask


def empirical_covariances(masked_members: Array, predictions: Array):
    """Unbiased auto/cross covariances (C_zz, C_xz) of the stacked system.

    Literal two-matrix form: deviations are taken about the respective sample
    means and normalized by 1/(J-1). In the update the parameter side comes
    from the dropout-masked members and the prediction side from the unmasked
    perturbed members. The run loop computes the same quantities in factored
    form without materializing C_xz.
    """
    j = masked_members.shape[0]
    if j < 2:
        raise ValueError("need at least two members for covariances")
    d_z = predictions - predictions.mean(axis=0, keepdims=True)
    d_xi = masked_members - masked_members.mean(axis=0, keepdims=True)
    return (d_z.T @ d_z) / (j - 1), (d_xi.T @ d_z) / (j - 1)


def choose_route(n_rows: int, n_members: int) -> str:
    """Factor the augmented covariance directly, or work in ensemble space
    (Woodbury identity on the deviation factor) when the system is taller
    than ~1.5 ensembles."""
    return "lowrank" if n_rows > 1.5 * n_members else "direct"


def kalman_apply(d_z: Array, d_xi: Array, gamma_diag: Array,
                 innovations: Array, route: str = "auto") -> tuple[Array, str]:
    """Member updates C_xz (C_zz + Gamma)^-1 r^(j), factored once per call.

    d_z: (J, n_rows) prediction deviations; d_xi: (J, n_params) parameter
    deviations; innovations: (J, n_rows), one row per member. Returns the
    (J, n_params) update matrix and the route actually used. Both routes are
    algebraically identical: the lowrank route pushes the solve into ensemble
    space via (Gamma + U U^T)^-1 with U = d_z^T / sqrt(J-1), where
    U^T (Gamma + U U^T)^-1 = (I + U^T Gamma^-1 U)^-1 U^T Gamma^-1.
    """
    j = d_z.shape[0]
    if route == "auto":
        route = choose_route(d_z.shape[1], j)
    if route == "direct":
        c_zz = (d_z.T @ d_z) / (j - 1)
        c_zz[np.diag_indices_from(c_zz)] += gamma_diag
        s = spd_solve(c_zz, innovations.T)          # (n_rows, J)
        return ((d_z @ s).T @ d_xi) / (j - 1), route
    if route != "lowrank":
        raise ValueError(f"unknown solve route '{route}'")
    w = d_z / gamma_diag[None, :]
    m = (w @ d_z.T) / (j - 1)
    m[np.diag_indices_from(m)] += 1.0
    b = (w @ innovations.T) / np.sqrt(j - 1)        # (J, J)
    x = spd_solve(m, b)
    return (x.T @ d_xi) / np.sqrt(j - 1), route


# ---------------------------------------------------------------------------
# augmented system and mini-batching
# ---------------------------------------------------------------------------


class AugmentedSystem:
    """Stacked targets/noise for the observation rows plus, in Tikhonov mode,
    a zero-target identity block over all parameter coordinates with noise
    covariance (prior covariance)/alpha, the prior covariance being diagonal
    with the per-parameter prior variances."""

    def __init__(self, model, tikhonov_weight: float | None, prior_std=None):
        self.model = model
        self.tikhonov_weight = tikhonov_weight
        if tikhonov_weight is not None:
            if prior_std is None:
                prior_std = 1.0
            prior_std = np.broadcast_to(
                np.asarray(prior_std, dtype=np.float64), (model.n_params,))
            self._tik_zero = np.zeros(model.n_params)
            self._tik_var = prior_std ** 2 / tikhonov_weight

    @property
    def augmented(self) -> bool:
        return self.tikhonov_weight is not None

    def rows(self, residual_idx) -> tuple[Array, Array]:
        """(z, Gamma_H diagonal) for the selected residual rows."""
        y, var = self.model.select_rows(residual_idx)
        if not self.augmented:
            return y, var
        return (np.concatenate([y, self._tik_zero]),
                np.concatenate([var, self._tik_var]))

    def predictions(self, members: Array, residual_idx) -> Array:
        """H(xi) per member: forward predictions, plus xi itself when augmented."""
        g = self.model.predict(members, residual_idx)
        if not self.augmented:
            return g
        return np.concatenate([g, members], axis=1)


class ResidualBatcher:
    """Cycles residual-row indices in epochs, reshuffling at each epoch start.

    batch_size of None (or >= the block size) disables batching: next() then
    returns None, meaning "all rows".
    """

    def __init__(self, n_rows: int, batch_size: int | None, rng: SeededRng):
        self.n_rows = int(n_rows)
        self.full = batch_size is None or batch_size >= n_rows or n_rows == 0
        self.batch_size = None if self.full else int(batch_size)
        self.rng = rng
        self._order = None
        self._pos = 0

    def next(self):
        if self.full:
            return None
        take = []
        need = self.batch_size
        while need > 0:
            if self._order is None or self._pos >= self.n_rows:
                self._order = self.rng.permutation(self.n_rows)
                self._pos = 0
            grab = min(need, self.n_rows - self._pos)
            take.append(self._order[self._pos:self._pos + grab])
            self._pos += grab
            need -= grab
        return np.concatenate(take)


# ---------------------------------------------------------------------------
# the update step and the run loop
# ---------------------------------------------------------------------------


def update_step(members: Array, system: AugmentedSystem, residual_idx,
                config: EkiConfig, lambda_dim: int,
                rng: SeededRng | None = None,
                draws: UpdateDraws | None = None) -> tuple[Array, str]:
    """One inversion iteration on the given residual rows.

    The gain couples dropout-masked parameter deviations (about the
    perturbed-ensemble mean) with the prediction deviations of the unmasked
    perturbed members; the prediction-space covariance and the innovations
    come from the same unmasked predictions, so the forward map is evaluated
    once per member. Returns (next members, solve route used). Draw order
    when sampling here: perturbation eps, dropout mask, member noises eta.
    """
    j, n_params = members.shape
    q_std = perturbation_std(config, lambda_dim, n_params)
    if draws is not None:
        xi_hat = perturb(members, q_std, eps=draws.eps)
        _, tau_tilde, _, _ = dropout_deviations(
            xi_hat, config.dropout_keep, mask=draws.mask)
    else:
        xi_hat = perturb(members, q_std, rng)
        _, tau_tilde, _, _ = dropout_deviations(
            xi_hat, config.dropout_keep, rng, shared=config.shared_mask)

    h_hat = system.predictions(xi_hat, residual_idx)
    bad = _first_non_finite_row(h_hat)
    if bad is not None:
        raise NonFinitePredictionError(bad, "predictions", np.array([]))

    z, gamma_diag = system.rows(residual_idx)
    eta = draws.eta if draws is not None else rng.standard_normal(h_hat.shape)
    innovations = z[None, :] - h_hat - eta * np.sqrt(gamma_diag)[None, :]

    d_z = h_hat - h_hat.mean(axis=0, keepdims=True)
    route = config.force_route or "auto"
    delta, route = kalman_apply(d_z, tau_tilde, gamma_diag, innovations, route)
    return xi_hat + delta, route


def _first_non_finite_row(a: Array):
    if np.all(np.isfinite(a)):
        return None
    return int(np.argwhere(~np.isfinite(a))[0][0])


def data_misfit(model, members_mean: Array) -> float:
    """0.5 ||y - G(mean)||^2 weighted by the noise precisions, on all rows."""
    pred = model.predict(members_mean[None, :])[0]
    r = model.y - pred
    return 0.5 * float(np.sum(r * r / model.gamma_diag))


def ensemble_spread(members: Array) -> float:
    """Mean over coordinates of the per-coordinate ensemble std (unbiased)."""
    return float(np.mean(np.std(members, axis=0, ddof=1)))


def run_inversion(model, config: EkiConfig) -> EkiResult:
    """Run the configured inversion against any forward model exposing
    n_params / lambda_dim / unknown_lambdas / y / gamma_diag /
    n_residual_rows / select_rows / predict."""
    t0 = time.perf_counter()
    rng = SeededRng(config.seed)
    alpha = _resolve_alpha(model, config)
    batch = _resolve_batch(model, config)
    prior_std = np.asarray(getattr(model, "prior_std", 1.0))
    system = AugmentedSystem(model, alpha, prior_std)
    lambda_names = tuple(getattr(model, "unknown_lambdas", ()))

    members = init_ensemble(model.n_params, config.n_members, rng,
                            std=prior_std)
    batcher = ResidualBatcher(model.n_residual_rows, batch, rng)
    rec = _Recorder(lambda_names, model.lambda_dim)
    rec.add(0, data_misfit(model, members.mean(axis=0)), members)

    route = "none"
    for n in range(config.n_iterations):
        idx = batcher.next()
        try:
            members, route = update_step(members, system, idx, config,
                                         model.lambda_dim, rng)
            if not np.all(np.isfinite(members)):
                raise NonFiniteEnsembleError(n, "non-finite parameter vector",
                                             rec.build())
            misfit = data_misfit(model, members.mean(axis=0))
        except NonFinitePredictionError as err:
            raise NonFiniteEnsembleError(
                n, f"non-finite prediction for member {err.member}",
                rec.build()) from err
        rec.add(n + 1, misfit, members)
        if not np.isfinite(misfit):
            raise DivergenceError(n, "data misfit is not finite", rec.build())
        w = config.divergence_window
        if len(rec.misfit) > w and rec.misfit[-1] > config.divergence_factor * rec.misfit[-1 - w]:
            raise DivergenceError(
                n, f"misfit {rec.misfit[-1]:.3e} exceeds "
                   f"{config.divergence_factor:g} x misfit {w} iterations ago",
                rec.build())

    return EkiResult(
        members=members,
        diagnostics=rec.build(),
        config=config,
        iterations_run=config.n_iterations,
        wall_time_s=time.perf_counter() - t0,
        route=route,
    )


class _Recorder:
    def __init__(self, lambda_names: tuple[str, ...], lambda_dim: int):
        self.lambda_names = lambda_names
        self.lambda_dim = lambda_dim
        self.iterations: list[int] = []
        self.misfit: list[float] = []
        self.spread: list[float] = []
        self.lam_mean: list[Array] = []
        self.lam_std: list[Array] = []

    def add(self, iteration: int, misfit: float, members: Array) -> None:
        self.iterations.append(iteration)
        self.misfit.append(misfit)
        self.spread.append(ensemble_spread(members))
        lam = members[:, :self.lambda_dim]
        self.lam_mean.append(lam.mean(axis=0))
        self.lam_std.append(lam.std(axis=0, ddof=1))

    def build(self) -> Diagnostics:
        n = len(self.iterations)
        return Diagnostics(
            iterations=np.asarray(self.iterations, dtype=np.float64),
            misfit=np.asarray(self.misfit),
            spread=np.asarray(self.spread),
            lambda_names=self.lambda_names,
            lambda_mean=(np.vstack(self.lam_mean) if self.lambda_dim
                         else np.zeros((n, 0))),
            lambda_std=(np.vstack(self.lam_std) if self.lambda_dim
                        else np.zeros((n, 0))),
        )


def _resolve_alpha(model, config: EkiConfig) -> float | None:
    if config.mode == "vanilla":
        return None
    if config.tikhonov_weight is not None:
        return config.tikhonov_weight
    protocol = getattr(model, "protocol", None)
    if protocol is None:
        raise ValueError(
            "tikhonov_weight must be set explicitly for ad-hoc observation sets")
    return protocol.tikhonov_weight


def _resolve_batch(model, config: EkiConfig) -> int | None:
    if config.batch_size is not None:
        return config.batch_size
    protocol = getattr(model, "protocol", None)
    return protocol.batch_size if protocol is not None else None


# ---------------------------------------------------------------------------
# problem-level entry points
# ---------------------------------------------------------------------------


def run_dteki(problem: ProblemSpec, data: ObservationSet,
              config: EkiConfig = EkiConfig(),
              surrogate: str = "ckan") -> EkiResult:
    """Dropout-Tikhonov inversion of a benchmark problem's observation set."""
    if config.mode != "dteki":
        config = replace(config, mode="dteki")
    model = build_forward_model(problem, data, surrogate)
    return run_inversion(model, config)


def run_vanilla_eki(problem: ProblemSpec, data: ObservationSet,
                    config: EkiConfig = EkiConfig(),
                    surrogate: str = "ckan") -> EkiResult:
    """Ablation mode: no dropout, no parameter perturbation, no Tikhonov block."""
    config = replace(config, mode="vanilla", dropout_keep=1.0,
                     lambda_jitter=0.0, theta_jitter=0.0,
                     tikhonov_weight=None)
    model = build_forward_model(problem, data, surrogate)
    return run_inversion(model, config)
