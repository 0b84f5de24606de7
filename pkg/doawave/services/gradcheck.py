"""
doawave — Gradient Check Service
Forward-mode derivatives of the angle -> steering vector -> mask -> SCM ->
beamformer -> output chain, checked against central finite differences, and a
descent loop that refines angles through that chain.
"""

import itertools
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from errors import BeamformerError
from models import BeamformerKind, DoaMethod, UcaGeometry
from services import dual
from services.beamform import (
    DIAGONAL_LOADING,
    GRAM_CONDITION_LIMIT,
    REF_CHANNEL,
    TRACE_FLOOR,
    _collisions,
    input_scm,
    load_diagonal,
)
from services.doa import DoaEstimate
from services.dual import DualArray, DualComplex, DualReal
from services.geometry import mic_angles
from services.signals import MultichannelSpectrogram

logger = logging.getLogger(__name__)

DEFAULT_STEP = 1e-5
KINK_TOL = 1e-6


@dataclass(frozen=True)
class ChainProblem:
    """Everything the chain loss holds fixed while the angles move."""

    spec: MultichannelSpectrogram
    references: np.ndarray  # (N, T, F) reference-channel spectrograms
    geometry: UcaGeometry
    kind: BeamformerKind = BeamformerKind.LCMP
    kappa: float = 0.5
    ref_channel: int = REF_CHANNEL
    delta: float = DIAGONAL_LOADING

    @property
    def n_sources(self) -> int:
        return self.references.shape[0]


@dataclass(frozen=True)
class ChainLoss:
    value: float
    assignment: tuple[int, ...]  # assignment[n] = output matched to reference n
    kink_margin: float = math.inf  # min |nu - kappa| over the mask, inf without masks

    def near_kink(self, tol: float = KINK_TOL) -> bool:
        return self.kink_margin < tol


@dataclass(frozen=True)
class DescentTrace:
    estimate: DoaEstimate
    losses: list[float] = field(default_factory=list)

    @property
    def steps(self) -> int:
        return len(self.losses) - 1


# ── Chain ───────────────────────────────────────────────────────────


def _steering(problem: ChainProblem, theta: DualArray) -> DualArray:
    geom = problem.geometry
    tau = (theta[None, :] - mic_angles(geom)[:, None]).cos() * (geom.radius_m / geom.speed_of_sound)
    return (tau[None] * (2j * np.pi * problem.spec.freqs[:, None, None])).exp()  # (F, M, N)


def _loaded(phi: DualArray, delta: float) -> DualArray:
    m = phi.shape[-1]
    level = dual.einsum("fmm->f", phi).real() / m
    level = dual.where(level.value > TRACE_FLOOR, level, TRACE_FLOOR)
    return phi + (level * delta)[:, None, None] * np.eye(m)


def _lcmp_chain(problem: ChainProblem, d: DualArray) -> DualArray:
    phi = load_diagonal(input_scm(problem.spec).matrices, problem.delta)
    a = dual.solve(phi, d)
    gram = dual.einsum("fmi,fmj->fij", d.conj(), a)
    with np.errstate(divide="ignore", invalid="ignore"):
        degenerate = ~(np.linalg.cond(gram.value) <= GRAM_CONDITION_LIMIT)
    if degenerate.all():
        raise BeamformerError("lcmp", "constraint matrix singular at every frequency")

    flag = degenerate[:, None, None]
    gram = dual.where(flag, np.broadcast_to(np.eye(gram.shape[-1]), gram.shape), gram)
    bt = dual.solve(gram.swapaxes(-1, -2), a.swapaxes(-1, -2))  # (F, N, M)
    return dual.where(flag, 0.0, bt).transpose((1, 0, 2))


def _mask_chain(problem: ChainProblem, d: DualArray):
    y = problem.spec.data
    kappa = problem.kappa
    power = dual.einsum("fmn,tmf->ntf", d.conj(), y).abs2()
    nu = power.softmax(axis=0)
    # silent bins and DC sit at nu = 1/N whatever the angles
    moving = power.value.sum(axis=0) > 1e-12 * power.value.max()
    moving[:, problem.spec.freqs == 0] = False
    margin = float(np.abs(nu.value - kappa)[:, moving].min()) if moving.any() else math.inf
    mask = (nu - kappa).relu() / (1.0 - kappa)

    outer = np.einsum("tmf,tkf->tfmk", y, np.conj(y))
    unweighted = input_scm(problem.spec).matrices
    totals = mask.sum(axis=1)  # (N, F)
    scms = []
    for n in range(mask.shape[0]):
        empty = totals.value[n] <= 0.0
        num = dual.einsum("tf,tfmk->fmk", mask[n], outer)
        safe = dual.where(empty, 1.0, totals[n])
        scms.append(dual.where(empty[:, None, None], unweighted, num / safe[:, None, None]))

    weights = []
    for n in range(len(scms)):
        others = [s for i, s in enumerate(scms) if i != n]
        intf = others[0]
        for s in others[1:]:
            intf = intf + s
        intf = _loaded(intf, problem.delta)
        if problem.kind == BeamformerKind.MVDR:
            d_n = d[:, :, n]
            num = dual.solve(intf, d_n[:, :, None])[:, :, 0]
            den = dual.einsum("fm,fm->f", d_n.conj(), num)
            weights.append(num / den[:, None])
        else:
            ratio = dual.solve(intf, scms[n])
            trace = dual.einsum("fmm->f", ratio)
            if np.any(np.abs(trace.value) < TRACE_FLOOR):
                raise BeamformerError("mvdr-ref", "near-zero trace: degenerate SCMs")
            weights.append(ratio[:, :, problem.ref_channel] / trace[:, None])
    return dual.stack(weights), margin


def _outputs(problem: ChainProblem, theta: DualArray):
    """Per-source outputs (N, T, F) at the reference microphone and the kink margin."""
    d = _steering(problem, theta)
    if problem.kind == BeamformerKind.LCMP:
        w, margin = _lcmp_chain(problem, d), math.inf
    else:
        w, margin = _mask_chain(problem, d)

    x = dual.einsum("nfm,tmf->ntf", w.conj(), problem.spec.data)
    if problem.kind != BeamformerKind.MVDR_REF:
        # LCMP/MVDR answer at the array center; move to the reference microphone
        x = x * d[:, problem.ref_channel, :].transpose((1, 0))[:, None, :]
    return x, margin


def surrogate_loss(outputs, references, assignment) -> DualArray:
    """sum_n sum_{t,f} |x_{assignment[n]} - ref_n|^2."""
    outputs = DualArray.lift(outputs)
    total = DualArray.constant(0.0)
    for n, src in enumerate(assignment):
        total = total + (outputs[src] - references[n]).abs2().sum()
    return total


def resolve_assignment(outputs: np.ndarray, references: np.ndarray) -> tuple[int, ...]:
    best, best_loss = None, math.inf
    for perm in itertools.permutations(range(references.shape[0])):
        loss = float(surrogate_loss(outputs, references, perm).value)
        if loss < best_loss:
            best, best_loss = perm, loss
    return tuple(best)


def _check_theta(problem: ChainProblem, theta) -> np.ndarray:
    theta = np.asarray(theta, dtype=np.float64)
    if theta.shape != (problem.n_sources,):
        raise ValueError(f"expected {problem.n_sources} angles, got shape {theta.shape}")
    if problem.kind == BeamformerKind.LCMP and _collisions(theta):
        raise BeamformerError("lcmp", f"coincident steering directions (deg): {_collisions(theta)}")
    return theta


def chain_loss(theta, problem: ChainProblem, assignment=None) -> ChainLoss:
    """Surrogate loss at theta; the assignment is resolved here when not given."""
    theta = _check_theta(problem, theta)
    x, margin = _outputs(problem, DualArray.constant(theta))
    if assignment is None:
        assignment = resolve_assignment(x.value, problem.references)
    value = float(surrogate_loss(x, problem.references, assignment).value)
    return ChainLoss(value, tuple(assignment), margin)


def grad_analytic(theta, problem: ChainProblem, assignment=None) -> np.ndarray:
    """One forward-mode pass per angle."""
    theta = _check_theta(problem, theta)
    if assignment is None:
        assignment = chain_loss(theta, problem).assignment
    grad = np.zeros(theta.shape[0])
    for k in range(theta.shape[0]):
        x, _ = _outputs(problem, DualArray(theta, np.eye(theta.shape[0])[k]))
        grad[k] = float(surrogate_loss(x, problem.references, assignment).tangent)
    return grad


def central_difference(fn, theta, h: float = DEFAULT_STEP) -> np.ndarray:
    if h <= 0:
        raise ValueError(f"step must be positive, got {h}")
    theta = np.asarray(theta, dtype=np.float64)
    grad = np.zeros(theta.shape[0])
    for k in range(theta.shape[0]):
        e = np.zeros_like(theta)
        e[k] = h
        grad[k] = (fn(theta + e) - fn(theta - e)) / (2.0 * h)
    return grad


def grad_fd(theta, problem: ChainProblem, assignment=None, h: float = DEFAULT_STEP) -> np.ndarray:
    if assignment is None:
        assignment = chain_loss(theta, problem).assignment
    return central_difference(lambda t: chain_loss(t, problem, assignment).value, theta, h)


def relative_error(analytic, numeric) -> np.ndarray:
    analytic, numeric = np.asarray(analytic), np.asarray(numeric)
    scale = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-300)
    return np.abs(analytic - numeric) / scale


def step_sweep(theta, problem: ChainProblem, steps=(1e-3, 1e-4, 1e-5), assignment=None) -> dict:
    """Max relative error of finite differences against the analytic gradient per step size."""
    if assignment is None:
        assignment = chain_loss(theta, problem).assignment
    exact = grad_analytic(theta, problem, assignment)
    return {h: float(relative_error(exact, grad_fd(theta, problem, assignment, h)).max()) for h in steps}


def descend_doa(theta_init, problem: ChainProblem, steps: int = 200, lr: float = 1e-2,
                min_step: float = 1e-8, method: DoaMethod = DoaMethod.ORACLE) -> DescentTrace:
    """Normalized-gradient descent with a backtracking line search.

    `method` tags where the starting angles came from and is carried onto the
    returned estimate.

    Each iteration tries a step of `lr` radians along the negative gradient and
    halves it until the loss does not increase; it stops when no step down to
    `min_step` helps.
    """
    theta = _check_theta(problem, theta_init)
    current = chain_loss(theta, problem)
    assignment = current.assignment
    losses = [current.value]

    for _ in range(steps):
        grad = grad_analytic(theta, problem, assignment)
        norm = float(np.linalg.norm(grad))
        if norm == 0.0 or not np.isfinite(norm):
            break
        direction = grad / norm
        size = lr
        moved = False
        while size >= min_step:
            candidate = np.mod(theta - size * direction, 2 * math.pi)
            try:
                trial = chain_loss(candidate, problem, assignment).value
            except BeamformerError:
                trial = math.inf
            if trial <= losses[-1]:
                theta, moved = candidate, True
                losses.append(trial)
                break
            size *= 0.5
        if not moved:
            break

    logger.debug("descent finished after %d steps, loss %.6g -> %.6g", len(losses) - 1, losses[0], losses[-1])
    return DescentTrace(DoaEstimate(theta, method), losses)


# ── Scalar oracle for the directional power ─────────────────────────


def directional_power_dual(geom: UcaGeometry, theta: DualReal, freq: float, y) -> DualReal:
    """|d(theta, f)^H y|^2 with scalar duals, one microphone at a time."""
    scale = geom.radius_m / geom.speed_of_sound
    acc = DualComplex.lift(0.0)
    for psi, y_m in zip(mic_angles(geom), np.asarray(y)):
        tau = (theta - float(psi)).cos() * scale
        d_m = DualComplex.expj(tau * (2.0 * math.pi * freq))
        acc = acc + d_m.conj() * complex(y_m)
    return acc.abs2()
