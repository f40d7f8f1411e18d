"""Energy-based kinematic pose optimization.

Refines predicted joint positions so that tracked anchor joints (head
and hands) match their device-reported positions while the rest of the
skeleton keeps its predicted shape:

* alignment energy: squared distance of anchor joints to their tracked
  positions, plus a self-regularization term holding unobserved joints
  near the prediction
* structure energy: squared change of bone length and of the joint-to-
  joint displacement vector over every skeletal link, summed over both
  directions of each link (which doubles the sum and simply rescales the
  structure weights)

Positions only: joint rotations are never touched here. The solver is
plain gradient descent with a backtracking line search, which keeps
per-frame cost bounded and deterministic. Everything except the
bone-length term is quadratic in the positions, so the solver folds
those terms into one precomputed matrix; the per-iteration cost is a
handful of small array operations.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import core
from .errors import ZeroLengthBone

_MIN_BONE = 1e-9
_STEP_FLOOR = 1e-12


@dataclass(frozen=True)
class KpoConfig:
    lambda_a: float = 1.0
    lambda_s: float = 0.1
    lambda_l: float = 1.0
    lambda_d: float = 0.5
    max_iterations: int = 30
    step_size: float = 0.1
    energy_tolerance: float = 1e-6
    observed: tuple = core.OBSERVED_JOINTS

    def __post_init__(self):
        for name in ("lambda_a", "lambda_s", "lambda_l", "lambda_d"):
            if getattr(self, name) < 0.0:
                raise ValueError(f"{name} must be nonnegative")
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be >= 1")
        if self.step_size <= 0.0:
            raise ValueError("step_size must be positive")
        if self.energy_tolerance <= 0.0:
            raise ValueError("energy_tolerance must be positive")
        object.__setattr__(self, "observed", tuple(self.observed))


@dataclass(frozen=True)
class KpoProblem:
    """Initial predicted positions, tracked anchor targets, skeleton."""

    initial: np.ndarray
    anchors: dict
    tree: core.KinematicTree

    def __post_init__(self):
        initial = np.asarray(self.initial, dtype=np.float64)
        if initial.shape != (self.tree.joint_count, 3):
            raise ValueError(
                f"initial positions must be ({self.tree.joint_count}, 3), got {initial.shape}"
            )
        if not np.all(np.isfinite(initial)):
            raise ValueError("initial positions must be finite")
        anchors = {int(k): np.asarray(v, dtype=np.float64).reshape(3) for k, v in self.anchors.items()}
        for k, q in anchors.items():
            if not 0 <= k < self.tree.joint_count:
                raise ValueError(f"anchor joint {k} outside the tree")
            if not np.all(np.isfinite(q)):
                raise ValueError(f"anchor {k} must be finite")
        initial.flags.writeable = False
        object.__setattr__(self, "initial", initial)
        object.__setattr__(self, "anchors", anchors)


@dataclass
class KpoReport:
    iterations: int
    final_energy: float
    energy_trace: np.ndarray
    diverged: bool = False


def _split_observed(problem: KpoProblem, cfg: KpoConfig):
    observed = [k for k in cfg.observed if 0 <= k < problem.tree.joint_count]
    missing = set(observed) - set(problem.anchors)
    if missing:
        raise ValueError(f"anchors missing for observed joints {sorted(missing)}")
    targets = (
        np.stack([problem.anchors[k] for k in observed]) if observed else np.zeros((0, 3))
    )
    unobs = np.array(
        [j for j in range(problem.tree.joint_count) if j not in set(observed)], dtype=np.int64
    )
    return np.array(observed, dtype=np.int64), targets, unobs


def _bone_state(p, tree):
    disp = p[1:] - p[tree.parent[1:]]
    length = np.sqrt(np.einsum("ij,ij->i", disp, disp))
    if not np.all(length >= _MIN_BONE):
        raise ZeroLengthBone("positions contain a (near) zero-length bone")
    return disp, length


def energy_alignment(p, problem: KpoProblem, cfg: KpoConfig) -> float:
    """Anchor-consistency energy plus self-regularization of the rest."""
    p = np.asarray(p, dtype=np.float64)
    obs, targets, unobs = _split_observed(problem, cfg)
    e = 0.0
    if len(obs):
        d = p[obs] - targets
        e += cfg.lambda_a * float(np.einsum("ij,ij->", d, d))
    if len(unobs):
        d = p[unobs] - problem.initial[unobs]
        e += cfg.lambda_s * float(np.einsum("ij,ij->", d, d))
    return e


def energy_structure(p, problem: KpoProblem, cfg: KpoConfig) -> float:
    """Bone length/direction preservation over all skeletal links.

    The neighbor double-sum visits every link in both directions, so the
    single-direction sums are doubled.
    """
    p = np.asarray(p, dtype=np.float64)
    disp, length = _bone_state(p, problem.tree)
    init_disp, init_len = _bone_state(problem.initial, problem.tree)
    dlen = length - init_len
    ddisp = disp - init_disp
    return 2.0 * float(
        cfg.lambda_l * np.dot(dlen, dlen)
        + cfg.lambda_d * np.einsum("ij,ij->", ddisp, ddisp)
    )


def energy_total(p, problem: KpoProblem, cfg: KpoConfig) -> float:
    return energy_alignment(p, problem, cfg) + energy_structure(p, problem, cfg)


def energy_gradient(p, problem: KpoProblem, cfg: KpoConfig):
    """Analytic gradient of the total energy with respect to positions."""
    solver = KpoSolver(cfg, problem.tree)
    solver.set_problem(problem)
    return solver.value_and_gradient(np.asarray(p, dtype=np.float64))[1]


class KpoSolver:
    """Reusable solver: structure-dependent precomputes happen once, so
    per-frame calls only refresh the prediction- and anchor-dependent
    parts."""

    def __init__(self, cfg: KpoConfig, tree: core.KinematicTree):
        self.cfg = cfg
        self.tree = tree
        n = tree.joint_count
        self.parent = tree.parent[1:]
        m = n - 1
        # signed incidence (rows joints, columns links): +1 child, -1 parent
        inc = np.zeros((n, m))
        inc[np.arange(1, n), np.arange(m)] = 1.0
        inc[self.parent, np.arange(m)] = -1.0
        self.incidence = inc
        obs = [k for k in cfg.observed if 0 <= k < n]
        self.obs = np.array(obs, dtype=np.int64)
        self.unobs = np.array([j for j in range(n) if j not in set(obs)], dtype=np.int64)
        # quadratic part: alignment + self-regularization + direction terms
        quad = np.zeros((n, n))
        quad[self.obs, self.obs] += cfg.lambda_a
        quad[self.unobs, self.unobs] += cfg.lambda_s
        quad += 2.0 * cfg.lambda_d * (inc @ inc.T)
        self.quad = quad
        self.initial = None
        self.targets = None
        self.linear = None
        self.constant = 0.0
        self.init_len = None

    def set_problem(self, problem: KpoProblem):
        if set(self.cfg.observed) - set(problem.anchors):
            missing = sorted(set(self.cfg.observed) - set(problem.anchors))
            raise ValueError(f"anchors missing for observed joints {missing}")
        targets = (
            np.stack([problem.anchors[k] for k in self.obs])
            if len(self.obs)
            else np.zeros((0, 3))
        )
        self.set_arrays(problem.initial, targets)

    def set_arrays(self, initial, targets):
        cfg = self.cfg
        self.initial = initial
        self.targets = targets
        init_disp, self.init_len = _bone_state(initial, self.tree)
        linear = np.zeros_like(initial)
        if len(self.obs):
            linear[self.obs] = cfg.lambda_a * targets
        if len(self.unobs):
            linear[self.unobs] = cfg.lambda_s * initial[self.unobs]
        linear += 2.0 * cfg.lambda_d * (self.incidence @ init_disp)
        self.linear = linear
        self.constant = (
            cfg.lambda_a * float(np.einsum("ij,ij->", targets, targets))
            + cfg.lambda_s
            * float(np.einsum("ij,ij->", initial[self.unobs], initial[self.unobs]))
            + 2.0 * cfg.lambda_d * float(np.einsum("ij,ij->", init_disp, init_disp))
        )

    def _eval(self, p):
        """Energy plus the intermediates the gradient reuses."""
        disp = p[1:] - p[self.parent]
        length = np.sqrt(np.einsum("ij,ij->i", disp, disp))
        if not np.all(length >= _MIN_BONE):
            raise ZeroLengthBone("positions contain a (near) zero-length bone")
        ap = self.quad @ p
        dlen = length - self.init_len
        energy = (
            float(np.einsum("ij,ij->", p, ap))
            - 2.0 * float(np.einsum("ij,ij->", self.linear, p))
            + self.constant
            + 2.0 * self.cfg.lambda_l * float(np.dot(dlen, dlen))
        )
        return energy, (ap, disp, length, dlen)

    def _gradient(self, state):
        ap, disp, length, dlen = state
        grad = 2.0 * (ap - self.linear)
        grad += self.incidence @ ((4.0 * self.cfg.lambda_l * dlen / length)[:, None] * disp)
        return grad

    def energy(self, p):
        return self._eval(p)[0]

    def value_and_gradient(self, p):
        energy, state = self._eval(p)
        return energy, self._gradient(state)

    def run(self):
        cfg = self.cfg
        p = self.initial.copy()
        energy, state = self._eval(p)
        trace = [energy]
        trial = cfg.step_size
        iterations = 0
        diverged = False
        for _ in range(cfg.max_iterations):
            if energy == 0.0:
                break
            grad = self._gradient(state)
            if float(np.max(np.abs(grad))) < 1e-15:
                break
            step = trial
            accepted = False
            while step >= _STEP_FLOOR:
                candidate = p - step * grad
                try:
                    cand_energy, cand_state = self._eval(candidate)
                except ZeroLengthBone:
                    step *= 0.5
                    continue
                if cand_energy < energy:
                    accepted = True
                    break
                step *= 0.5
            if not accepted:
                diverged = True
                break
            prev_energy = energy
            p, energy, state = candidate, cand_energy, cand_state
            trace.append(energy)
            iterations += 1
            trial = min(step * 2.0, cfg.step_size)
            if (prev_energy - energy) < cfg.energy_tolerance * max(prev_energy, 1e-30):
                break
        return p, KpoReport(iterations, energy, np.array(trace), diverged)


def optimize(problem: KpoProblem, cfg: KpoConfig):
    """Minimize the total energy by backtracking gradient descent.

    Returns (positions, KpoReport). Every accepted step strictly
    decreases the energy; if no decreasing step exists above the 1e-12
    step floor the best-so-far positions are returned with the diverged
    flag set.
    """
    solver = KpoSolver(cfg, problem.tree)
    solver.set_problem(problem)
    return solver.run()
