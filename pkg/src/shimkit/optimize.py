"""Classical shim solvers: multi-start Adam and MLS variable exchange.

Both minimise the same regularised magnitude least-squares objective

    f(w) = sum_v (|A w|_v - m_v)^2 + lam * ||w||^2

over complex coil weights ``w``. The Adam solver treats ``w`` as ``2C`` reals
and is run from the quadrature drive plus many random starts; the best
result becomes the training reference. Variable exchange alternates between
fixing the phase of ``A w`` and solving the resulting linear least-squares
problem, starting from quadrature.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np
import scipy.linalg

from .errors import DimensionError, DomainError, NumericalError, SpecError
from .field import (
    ShimWeights,
    SliceSample,
    _values,
    canonicalize_phase,
    masked_system,
    objective_terms,
    quadrature_weights,
)


@dataclass(frozen=True)
class AdamConfig:
    step_size: float = 1e-2
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    max_iters: int = 500
    rel_tol: float = 1e-8
    eps_mag: float = 1e-12

    def __post_init__(self):
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise SpecError("Adam betas must lie in [0, 1)")
        if not (self.step_size > 0 and self.eps > 0):
            raise SpecError("Adam step size and eps must be positive")
        if self.max_iters < 0:
            raise SpecError("max_iters must be >= 0")


@dataclass(frozen=True)
class RestartPolicy:
    n_random: int = 300
    include_quadrature: bool = True
    magnitude_range: tuple = (0.5, 1.5)
    seed: int = 0

    def __post_init__(self):
        if self.n_random < 0:
            raise SpecError("n_random must be >= 0")
        if self.n_random == 0 and not self.include_quadrature:
            raise SpecError("restart policy has no initialisation at all")


@dataclass(frozen=True)
class MlsConfig:
    max_outer_iters: int = 200
    rel_tol: float = 1e-10
    monotone_tol: float = 1e-12

    def __post_init__(self):
        if self.max_outer_iters < 1:
            raise SpecError("max_outer_iters must be >= 1")


@dataclass
class SolveResult:
    weights: ShimWeights
    objective: float
    rmse: float
    iterations: int
    wall_time: float
    init_label: str
    history: list | None = None


def _interleave(w: np.ndarray) -> np.ndarray:
    return np.column_stack([w.real, w.imag]).reshape(-1)


def _gradient_from_field(a, m, lam, w, y, eps_mag):
    mag = np.abs(y)
    scale = 2 * (mag - m) / np.maximum(mag, eps_mag)
    return (scale * y) @ a.conj() + 2 * lam * w


def system_gradient(a, m, lam, w, eps_mag=1e-12) -> np.ndarray:
    """Complex gradient ``g`` with ``df/dRe(w) = Re(g)`` and ``df/dIm(w) = Im(g)``.

    ``w`` may be ``(C,)`` or a batch ``(R, C)``.
    """
    y = w @ a.T if w.ndim == 2 else a @ w
    return _gradient_from_field(a, m, lam, w, y, eps_mag)


def objective_gradient(b1, mask, target, w, eps_mag: float = 1e-12) -> np.ndarray:
    """Gradient of the shim objective w.r.t. the interleaved ``[re0, im0, re1, ...]`` weights."""
    values = _values(w)
    a, m, lam = masked_system(b1, mask, target)
    if values.shape[0] != a.shape[1]:
        raise DimensionError(f"{values.shape[0]} weights for {a.shape[1]} coils")
    return _interleave(system_gradient(a, m, lam, values, eps_mag))


def _batch_objective(m, lam, w, y):
    resid = np.abs(y) - m
    power = np.einsum("ij,ij->i", w.real, w.real) + np.einsum("ij,ij->i", w.imag, w.imag)
    return np.einsum("ij,ij->i", resid, resid) + lam * power


def adam_batch(a, m, lam, w0, cfg: AdamConfig, labels=None):
    """Run independent Adam trajectories from every row of ``w0 (R, C)`` at once.

    Each trajectory stops on its own once the relative objective change drops
    below ``cfg.rel_tol``. Returns ``(best_w, best_f, iterations)`` where the
    best iterate of each trajectory includes its starting point.
    """
    w = np.array(w0, dtype=np.complex128, copy=True)
    r = w.shape[0]
    labels = labels or [f"start_{k}" for k in range(r)]
    y = w @ a.T
    f = _batch_objective(m, lam, w, y)
    _check_finite(f, labels, 0)
    best_w = w.copy()
    best_f = f.copy()
    iters = np.zeros(r, dtype=int)
    idx = np.arange(r)
    # first moments kept as complex (real/imag parts are the per-coordinate moments)
    m1 = np.zeros_like(w)
    v_re = np.zeros(w.shape)
    v_im = np.zeros(w.shape)
    b1, b2 = cfg.beta1, cfg.beta2
    for t in range(1, cfg.max_iters + 1):
        if idx.size == 0:
            break
        g = _gradient_from_field(a, m, lam, w, y, cfg.eps_mag)
        m1 = b1 * m1 + (1 - b1) * g
        v_re = b2 * v_re + (1 - b2) * g.real**2
        v_im = b2 * v_im + (1 - b2) * g.imag**2
        mh = m1 / (1 - b1**t)
        c2 = 1 - b2**t
        w = w - cfg.step_size * (mh.real / (np.sqrt(v_re / c2) + cfg.eps)
                                 + 1j * (mh.imag / (np.sqrt(v_im / c2) + cfg.eps)))
        y = w @ a.T
        f_new = _batch_objective(m, lam, w, y)
        _check_finite(f_new, [labels[i] for i in idx], t)
        iters[idx] = t
        better = f_new < best_f[idx]
        best_f[idx[better]] = f_new[better]
        best_w[idx[better]] = w[better]
        change = np.abs(f - f_new) / np.maximum(np.abs(f), np.finfo(float).tiny)
        keep = change >= cfg.rel_tol
        if not keep.all():
            idx, w, y, m1, v_re, v_im = idx[keep], w[keep], y[keep], m1[keep], v_re[keep], v_im[keep]
            f_new = f_new[keep]
        f = f_new
    return best_w, best_f, iters


def _check_finite(f, labels, iteration):
    bad = ~np.isfinite(f)
    if bad.any():
        k = int(np.flatnonzero(bad)[0])
        raise NumericalError(
            f"non-finite objective at iteration {iteration} from start {labels[k]!r}",
            {"init_label": labels[k], "iteration": iteration, "failed_starts": [labels[i] for i in np.flatnonzero(bad)]},
        )


def _result(a, m, lam, w, iterations, wall, label, history=None) -> SolveResult:
    w = canonicalize_phase(w).values
    misfit, power = objective_terms(a, m, lam, w)
    return SolveResult(
        weights=ShimWeights(w),
        objective=misfit + power,
        rmse=float(np.sqrt(misfit / a.shape[0])),
        iterations=int(iterations),
        wall_time=wall,
        init_label=label,
        history=history,
    )


def adam_minimize(b1, mask, target, w0, cfg: AdamConfig = AdamConfig(), label: str = "start") -> SolveResult:
    """Single-start Adam on the shim objective; returns the best iterate, canonicalised."""
    t0 = time.perf_counter()
    a, m, lam = masked_system(b1, mask, target)
    w0 = _values(w0)
    if w0.shape[0] != a.shape[1]:
        raise DimensionError(f"{w0.shape[0]} initial weights for {a.shape[1]} coils")
    best_w, _, iters = adam_batch(a, m, lam, w0[None, :], cfg, [label])
    return _result(a, m, lam, best_w[0], iters[0], time.perf_counter() - t0, label)


def initial_weights(n_coils: int, policy: RestartPolicy, stream=()):
    """Stacked start vectors ``(R, C)`` and their labels.

    ``stream`` is mixed into the seed so that different slices get different
    but reproducible random starts.
    """
    starts, labels = [], []
    if policy.include_quadrature:
        starts.append(quadrature_weights(n_coils).values)
        labels.append("quadrature")
    if policy.n_random:
        rng = np.random.default_rng([int(policy.seed), *[int(s) for s in stream]])
        lo, hi = policy.magnitude_range
        mag = rng.uniform(lo, hi, size=(policy.n_random, n_coils))
        phase = rng.uniform(0.0, 2 * np.pi, size=(policy.n_random, n_coils))
        starts.extend(mag * np.exp(1j * phase))
        labels.extend(f"random_{k}" for k in range(policy.n_random))
    return np.array(starts, dtype=np.complex128), labels


def best_of_starts(a, m, lam, starts, labels, cfg: AdamConfig, chunk: int = 512):
    """Index, weights and objective of the best start; ties go to the earliest start."""
    best_k, best_w, best_f, best_it = -1, None, np.inf, 0
    for s in range(0, starts.shape[0], chunk):
        w, f, it = adam_batch(a, m, lam, starts[s : s + chunk], cfg, labels[s : s + chunk])
        k = int(np.argmin(f))  # argmin returns the first minimum
        if f[k] < best_f:
            best_k, best_w, best_f, best_it = s + k, w[k], f[k], it[k]
    return best_k, best_w, best_f, best_it


def reference_weights(sample: SliceSample, cfg: AdamConfig = AdamConfig(),
                      policy: RestartPolicy = RestartPolicy()) -> SolveResult:
    """Best of the quadrature and random Adam starts by objective; stored on ``sample``."""
    t0 = time.perf_counter()
    a, m, lam = sample.system()
    p = sample.provenance
    starts, labels = initial_weights(a.shape[1], policy, (p.get("phantom", 0), p.get("slice", 0), p.get("aug", 0)))
    k, w, _, it = best_of_starts(a, m, lam, starts, labels, cfg)
    res = _result(a, m, lam, w, it, time.perf_counter() - t0, labels[k])
    sample.ref_weights = res.weights
    sample.ref_rmse = res.rmse
    return res


def weighted_regularized_ls(b1, mask, rhs, lam: float) -> ShimWeights:
    """Solve ``(A^H W A + lam I) w = A^H W rhs`` for a binary mask ``W``.

    ``rhs`` holds one complex value per masked voxel.
    """
    a = b1.data[mask.bits]
    if a.shape[0] == 0:
        raise DomainError("mask is empty")
    rhs = np.asarray(rhs, dtype=np.complex128).reshape(-1)
    if rhs.shape[0] != a.shape[0]:
        raise DimensionError(f"rhs has {rhs.shape[0]} values for {a.shape[0]} masked voxels")
    return ShimWeights(_normal_solve(a, rhs, lam))


def _normal_solve(a, rhs, lam):
    gram = a.conj().T @ a + lam * np.eye(a.shape[1])
    b = a.conj().T @ rhs
    if lam == 0 and np.linalg.cond(gram) > 1e13:
        raise DomainError("normal equations are singular with lambda = 0; use lambda > 0")
    try:
        w = scipy.linalg.solve(gram, b, assume_a="her")
    except np.linalg.LinAlgError as exc:
        raise DomainError("normal equations are singular; use lambda > 0") from exc
    return w


class _NormalEquations:
    """Cholesky factor of ``A^H A + lam I``, reused across variable-exchange steps."""

    def __init__(self, a, lam):
        gram = a.conj().T @ a + lam * np.eye(a.shape[1])
        if lam == 0 and np.linalg.cond(gram) > 1e13:
            raise DomainError("normal equations are singular with lambda = 0; use lambda > 0")
        self.a_h = a.conj().T
        self.factor = scipy.linalg.cho_factor(gram)

    def solve(self, rhs):
        return scipy.linalg.cho_solve(self.factor, self.a_h @ rhs)


def mls_system(a, m, lam, cfg: MlsConfig = MlsConfig(), w0=None, record: bool = False):
    """Variable exchange on an already-masked system. Returns ``(w, f, iterations, history)``."""
    w = quadrature_weights(a.shape[1]).values if w0 is None else np.asarray(w0, dtype=np.complex128)
    solver = _NormalEquations(a, lam)
    misfit, power = objective_terms(a, m, lam, w)
    f = misfit + power
    history = [f] if record else None
    it = 0
    for it in range(1, cfg.max_outer_iters + 1):
        y = a @ w
        w_new = solver.solve(m * np.exp(1j * np.angle(y)))
        misfit, power = objective_terms(a, m, lam, w_new)
        f_new = misfit + power
        if not np.isfinite(f_new):
            raise NumericalError(f"non-finite MLS objective at iteration {it}", {"iteration": it})
        if f_new > f + cfg.monotone_tol * max(1.0, f):
            raise NumericalError(
                f"MLS objective increased from {f!r} to {f_new!r} at iteration {it}",
                {"iteration": it, "before": f, "after": f_new},
            )
        if record:
            history.append(f_new)
        decrease = (f - f_new) / max(f, np.finfo(float).tiny)
        w, f = w_new, f_new
        if decrease < cfg.rel_tol:
            break
    return w, f, it, history


def mls_variable_exchange(sample: SliceSample, cfg: MlsConfig = MlsConfig(), record: bool = False) -> SolveResult:
    """Magnitude least squares by variable exchange from the quadrature drive."""
    t0 = time.perf_counter()
    a, m, lam = sample.system()
    w, _, it, history = mls_system(a, m, lam, cfg, record=record)
    return _result(a, m, lam, w, it, time.perf_counter() - t0, "quadrature", history)
