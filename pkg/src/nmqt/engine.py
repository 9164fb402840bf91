"""Non-Markovian quantum trajectories on a binary-labelled ket register.

The conditioned state at the trailing edge ``t - T_m`` of the memory window is
a set of unnormalized atom kets, one per binary label. Bit ``j`` of a label
records whether the photon belonging to measurement event ``j`` (the ``j``-th
oldest event still inside the window) has already been emitted. Bit 0 is the
oldest event, so retiring an event always removes the lowest bit.

Per time step ``t``:

1. Two hypothesis passes (click / no click at ``t``) propagate the committed
   register from ``t - T_m`` to ``t``, retiring each recorded event as the
   propagation time reaches it. They give ``p_click`` and ``p_noclick``.
2. One uniform draw decides the outcome.
3. The committed register is advanced by a single increment using the
   sampled outcome, and renormalized.

Each increment is ``psi_l <- (1 - i H0 dt) psi_l + sigma sum_j w_j psi_{l ^ 2^j}``
over the bits ``j`` set in ``l``. Detection events are weighted by the step
average of the response function; no-detection events by ``-dt`` times the
step average of the memory function, and are closed at retirement by
``sigma^dagger`` (reabsorption).
"""

from __future__ import annotations

import enum
import logging
import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import expm

from . import fastpath, hilbert
from .kernels import FlatKernel, LorentzianKernel, weight_tables
from .streams import substream

logger = logging.getLogger(__name__)

SIGMA, SIGMA_DAG, SIGMA_Z = hilbert.atom_operators()


class EngineError(RuntimeError):
    """Numerical failure inside a trajectory."""


class StepSizeError(EngineError):
    """A click probability exceeded one; the time step is too large."""


class CorruptedTrajectoryError(EngineError):
    """A recorded detection has no emission amplitude left to select."""


class Outcome(enum.IntEnum):
    NOT_DETECTED = 0
    DETECTED = 1
    PENDING = 2


@dataclass(frozen=True)
class EventSlot:
    time_index: int
    outcome: Outcome


@dataclass
class KetRegister:
    kets: np.ndarray  # (2**n_slots, dim)
    events: list[EventSlot]  # oldest first; events[j] <-> label bit j
    base_index: int
    log_norm: float = 0.0

    def __post_init__(self):
        if self.kets.shape[0] != 1 << len(self.events):
            raise ValueError(f"{self.kets.shape[0]} kets for {len(self.events)} event slots")

    @property
    def n_slots(self) -> int:
        return len(self.events)

    @property
    def n_kets(self) -> int:
        return self.kets.shape[0]

    def norm_sq(self) -> float:
        return float(np.vdot(self.kets, self.kets).real)


@dataclass(frozen=True)
class SimParams:
    gamma: float = 1.0
    kappa: float = 10.0
    nu: float = 0.0
    Omega: float = 0.0
    delta_omega: float = 0.0
    dt: float = 0.01
    N: int = 1
    t_total: float = 10.0
    n_traj: int = 1
    seed: int = 0
    n_fock: int = 8
    epsilon_mem: float = 0.02

    def __post_init__(self):
        if not self.dt > 0:
            raise ValueError(f"dt must be positive, got {self.dt}")
        if int(self.N) != self.N or self.N < 1:
            raise ValueError(f"N must be a positive integer, got {self.N}")
        if self.t_total < 0:
            raise ValueError(f"t_total must be non-negative, got {self.t_total}")
        if self.n_traj < 1:
            raise ValueError(f"n_traj must be positive, got {self.n_traj}")

    @classmethod
    def with_memory_cutoff(cls, N: int, epsilon_mem: float = 0.02, **kwargs) -> "SimParams":
        """Choose ``dt`` so that ``N`` steps span the memory time for ``epsilon_mem``."""
        kappa = kwargs.get("kappa", cls.kappa)
        dt = 2.0 * math.log(1.0 / epsilon_mem) / (kappa * N)
        return cls(N=N, dt=dt, epsilon_mem=epsilon_mem, **kwargs)

    @property
    def n_steps(self) -> int:
        return int(round(self.t_total / self.dt))

    @property
    def memory_time(self) -> float:
        return self.N * self.dt

    def kernel(self) -> LorentzianKernel:
        return LorentzianKernel(self.gamma, self.kappa, self.nu)


def atom_hamiltonian(params: SimParams) -> np.ndarray:
    return params.delta_omega * SIGMA_Z + 0.5 * params.Omega * (SIGMA + SIGMA_DAG)


@dataclass
class TrajectoryRecord:
    detection_time_indices: np.ndarray
    p_click_series: np.ndarray
    outcomes: np.ndarray
    sigma_z_times: np.ndarray
    sigma_z_series: np.ndarray
    seed: int
    traj_index: int
    params: SimParams
    p_noclick_series: np.ndarray | None = None
    extra: dict = field(default_factory=dict)

    @property
    def dt(self) -> float:
        return self.params.dt

    @property
    def detection_times(self) -> np.ndarray:
        return self.detection_time_indices * self.params.dt

    @property
    def step_times(self) -> np.ndarray:
        return np.arange(1, len(self.p_click_series) + 1) * self.params.dt


# --- register primitives on raw arrays ------------------------------------
# All of these accept leading batch axes: kets has shape (..., 2**n, dim).


def _extend(kets: np.ndarray) -> np.ndarray:
    return np.concatenate([kets, np.zeros_like(kets)], axis=-2)


def _propagate(kets: np.ndarray, step_op: np.ndarray, weights: np.ndarray, sigma: np.ndarray = SIGMA) -> np.ndarray:
    batch = kets.shape[:-2]
    n_kets, dim = kets.shape[-2:]
    new = kets @ step_op.T
    emitted = kets @ sigma.T
    for j in range(weights.shape[-1]):
        shape = batch + (n_kets >> (j + 1), 2, 1 << j, dim)
        w = weights[..., j].reshape(batch + (1, 1, 1))
        new.reshape(shape)[..., 1, :, :] += w * emitted.reshape(shape)[..., 0, :, :]
    return new


def _retire_click(kets: np.ndarray) -> np.ndarray:
    shape = kets.shape[:-2] + (kets.shape[-2] // 2, 2, kets.shape[-1])
    return kets.reshape(shape)[..., 1, :].copy()


def _retire_noclick(kets: np.ndarray, sigma_dag: np.ndarray = SIGMA_DAG) -> np.ndarray:
    shape = kets.shape[:-2] + (kets.shape[-2] // 2, 2, kets.shape[-1])
    v = kets.reshape(shape)
    return v[..., 0, :] + v[..., 1, :] @ sigma_dag.T


# --- register operations ----------------------------------------------------


def extend_register(reg: KetRegister, time_index: int, outcome: Outcome = Outcome.PENDING) -> KetRegister:
    """Append a slot for a new measurement event; its photon is not yet emitted."""
    if any(ev.outcome is Outcome.PENDING for ev in reg.events):
        raise ValueError("register already has a pending slot")
    return KetRegister(
        _extend(reg.kets),
        reg.events + [EventSlot(time_index, Outcome(outcome))],
        reg.base_index,
        reg.log_norm,
    )


def propagate_increment(reg: KetRegister, H0: np.ndarray, weights, dt: float) -> KetRegister:
    """Advance every ket by one step of ``1 - i H0 dt`` plus single emissions.

    ``weights[j]`` is the emission weight for event slot ``j``.
    """
    weights = np.asarray(weights, dtype=complex)
    if weights.shape != (reg.n_slots,):
        raise ValueError(f"{weights.shape[0] if weights.ndim else 0} weights for {reg.n_slots} slots")
    step_op = np.eye(H0.shape[0]) - 1j * dt * H0
    return KetRegister(_propagate(reg.kets, step_op, weights), list(reg.events), reg.base_index, reg.log_norm)


def retire_detection(reg: KetRegister) -> KetRegister:
    """Keep the labels whose oldest photon has been emitted; drop that bit."""
    if not reg.events:
        raise ValueError("no event slot to retire")
    kets = _retire_click(reg.kets)
    if not np.any(kets):
        raise CorruptedTrajectoryError(
            f"detection at step {reg.events[0].time_index} has zero emission amplitude"
        )
    return KetRegister(kets, reg.events[1:], reg.base_index, reg.log_norm)


def retire_no_detection(reg: KetRegister) -> KetRegister:
    """Merge the emitted branch back through ``sigma^dagger`` (reabsorption)."""
    if not reg.events:
        raise ValueError("no event slot to retire")
    return KetRegister(_retire_noclick(reg.kets), reg.events[1:], reg.base_index, reg.log_norm)


def conditioned_density_matrix(reg: KetRegister) -> np.ndarray:
    """Incoherent sum over labels, normalized to unit trace."""
    total = reg.norm_sq()
    if not total > 0:
        raise EngineError("conditioned state has zero norm")
    rho = np.einsum("la,lb->ab", reg.kets, reg.kets.conj()) / total
    return 0.5 * (rho + rho.conj().T)


def sample_event(p_click: float, rng: np.random.Generator) -> bool:
    """One uniform draw; detection iff ``u < p_click``."""
    return bool(rng.random() < p_click)


@dataclass
class Hypotheses:
    p_click: float
    p_noclick: float
    click_ket: np.ndarray
    noclick_ket: np.ndarray
    norm_before: float


class Engine:
    """Propagator for one parameter set and reservoir kernel.

    Args:
        params: simulation parameters; ``params.N`` is the number of steps per
            memory time (forced to 1 for a flat kernel).
        kernel: :class:`LorentzianKernel` or :class:`FlatKernel`.
        exact_free: use ``expm(-i H0 dt)`` instead of the first-order
            ``1 - i H0 dt`` for the free part of each increment.
        backend: ``"numba"`` (compiled kernels) or ``"numpy"`` (reference).
    """

    def __init__(self, params: SimParams, kernel=None, exact_free: bool = False, backend: str = "numba"):
        if backend not in ("numba", "numpy"):
            raise ValueError(f"unknown backend {backend!r}")
        self.backend = backend
        kernel = params.kernel() if kernel is None else kernel
        if isinstance(kernel, FlatKernel) and params.N != 1:
            raise ValueError("a flat (Markovian) kernel requires N = 1")
        if isinstance(kernel, LorentzianKernel) and kernel.gamma > 0:
            tail = math.exp(-0.5 * kernel.kappa * params.N * params.dt)
            if tail > params.epsilon_mem * (1 + 1e-9):
                warnings.warn(
                    f"memory window truncates the kernel at {tail:.3g} of its peak "
                    f"(epsilon_mem = {params.epsilon_mem})",
                    stacklevel=2,
                )
        self.params = params
        self.kernel = kernel
        self.N = params.N
        self.dt = params.dt
        self.H0 = atom_hamiltonian(params)
        if exact_free:
            self.step_op = expm(-1j * params.dt * self.H0)
        else:
            self.step_op = np.eye(2) - 1j * params.dt * self.H0
        click, loop = weight_tables(kernel, params.dt, params.N)
        self.click_weights = click
        self.loop_weights = loop
        self._table = {Outcome.DETECTED: click, Outcome.NOT_DETECTED: loop}

    def init_register(self, initial_ket) -> KetRegister:
        ket = np.asarray(initial_ket, dtype=complex)
        if ket.shape != (2,):
            raise ValueError(f"initial atom ket must have 2 amplitudes, got shape {ket.shape}")
        if abs(hilbert.norm_sq(ket) - 1.0) > 1e-10:
            raise ValueError("initial ket must be normalized")
        return KetRegister(ket.reshape(1, 2).copy(), [], 0)

    def _recorded_weights(self, events) -> np.ndarray:
        # slot at position i sits i steps after the end of the current increment
        return np.array([self._table[ev.outcome][i] for i, ev in enumerate(events)], dtype=complex)

    @staticmethod
    def _types(events) -> np.ndarray:
        return np.array([ev.outcome is Outcome.DETECTED for ev in events], dtype=np.int64)

    def measurement_probabilities(self, reg: KetRegister) -> Hypotheses:
        """Click / no-click probabilities for the next measurement time."""
        n = reg.n_slots
        if n > self.N - 1:
            raise ValueError(f"committed register has {n} slots, at most {self.N - 1} allowed")
        if self.backend == "numba":
            norm_before, click_ket, noclick_ket = fastpath.hypothesis_pass(
                reg.kets, self._types(reg.events), self.step_op, self.click_weights, self.loop_weights
            )
        else:
            norm_before, click_ket, noclick_ket = self._hypothesis_pass_numpy(reg)
        if not norm_before > 0:
            raise EngineError("conditioned state has zero norm")
        p_click = self.dt * hilbert.norm_sq(click_ket) / norm_before
        p_noclick = hilbert.norm_sq(noclick_ket) / norm_before
        return Hypotheses(p_click, p_noclick, click_ket, noclick_ket, norm_before)

    def _hypothesis_pass_numpy(self, reg: KetRegister):
        # both hypotheses ride on a leading batch axis and differ only in the
        # weights of the pending slot
        n = reg.n_slots
        kets = _extend(np.broadcast_to(reg.kets, (2,) + reg.kets.shape))
        events = reg.events
        norm_before = None
        for step in range(n + 1):
            live = events[step:]
            pending_lag = n - step
            w = np.empty((2, len(live) + 1), dtype=complex)
            if live:
                w[:, :-1] = self._recorded_weights(live)
            w[0, -1] = self.click_weights[pending_lag]
            w[1, -1] = self.loop_weights[pending_lag]
            if step == n:
                norm_before = hilbert.norm_sq(kets[0, 0])
            kets = _propagate(kets, self.step_op, w)
            if step < n:
                if events[step].outcome is Outcome.DETECTED:
                    kets = _retire_click(kets)
                else:
                    kets = _retire_noclick(kets)
        return norm_before, _retire_click(kets[0])[0], _retire_noclick(kets[1])[0]

    def commit_step(self, reg: KetRegister, detected: bool) -> KetRegister:
        """Record the sampled outcome and advance the committed register.

        During warm-up (fewer than ``N - 1`` recorded events) the register
        only grows; afterwards it is propagated one increment from its base
        time and the oldest event is retired.
        """
        outcome = Outcome.DETECTED if detected else Outcome.NOT_DETECTED
        new_index = reg.base_index + reg.n_slots + 1
        reg = extend_register(reg, new_index, outcome)
        if reg.n_slots == self.N:
            if self.backend == "numba":
                kets = fastpath.commit_increment(
                    reg.kets, self._types(reg.events), self.step_op, self.click_weights, self.loop_weights
                )
                if reg.events[0].outcome is Outcome.DETECTED and not np.any(kets):
                    raise CorruptedTrajectoryError(
                        f"detection at step {reg.events[0].time_index} has zero emission amplitude"
                    )
                reg = KetRegister(kets, reg.events[1:], reg.base_index, reg.log_norm)
            else:
                kets = _propagate(reg.kets, self.step_op, self._recorded_weights(reg.events))
                reg = KetRegister(kets, reg.events, reg.base_index, reg.log_norm)
                if reg.events[0].outcome is Outcome.DETECTED:
                    reg = retire_detection(reg)
                else:
                    reg = retire_no_detection(reg)
            reg.base_index += 1
        total = reg.norm_sq()
        if not (total > 0 and math.isfinite(total)):
            raise CorruptedTrajectoryError(f"committed register norm is {total} at step {new_index}")
        reg.kets /= math.sqrt(total)
        reg.log_norm += math.log(total)
        return reg

    @staticmethod
    def sigma_z(reg: KetRegister) -> float:
        """``Tr[rho_c sigma_z]`` of the committed register."""
        pops = np.sum(np.abs(reg.kets) ** 2, axis=0)
        return float((pops[1] - pops[0]) / (pops[0] + pops[1]))

    def run_trajectory(
        self,
        initial_ket=None,
        rng: np.random.Generator | None = None,
        traj_index: int = 0,
        n_steps: int | None = None,
        max_detections: int | None = None,
    ) -> TrajectoryRecord:
        """Simulate one trajectory.

        ``rng`` defaults to the substream ``(params.seed, traj_index)``.
        ``sigma_z_series`` holds the conditioned ``<sigma_z>`` at the base
        times of the committed register, i.e. lagging the measurement time by
        up to ``(N - 1) dt``.
        """
        params = self.params
        if initial_ket is None:
            initial_ket = hilbert.basis(2, hilbert.GROUND)
        if rng is None:
            rng = substream(params.seed, traj_index)
        n_steps = params.n_steps if n_steps is None else n_steps
        if self.backend == "numba":
            return self._run_compiled(initial_ket, rng, traj_index, n_steps, max_detections)
        reg = self.init_register(initial_ket)
        p_click = np.empty(n_steps)
        p_noclick = np.empty(n_steps)
        outcomes = np.zeros(n_steps, dtype=bool)
        sz_times = [0.0]
        sz = [self.sigma_z(reg)]
        n_det = 0
        done = n_steps
        for k in range(n_steps):
            hyp = self.measurement_probabilities(reg)
            if hyp.p_click > 1.0:
                raise StepSizeError(f"p_click = {hyp.p_click:.4f} > 1 at step {k + 1}; reduce dt")
            p_click[k] = hyp.p_click
            p_noclick[k] = hyp.p_noclick
            detected = sample_event(hyp.p_click, rng)
            outcomes[k] = detected
            base = reg.base_index
            reg = self.commit_step(reg, detected)
            if reg.base_index != base:
                sz_times.append(reg.base_index * self.dt)
                sz.append(self.sigma_z(reg))
            if detected:
                n_det += 1
                if max_detections is not None and n_det >= max_detections:
                    done = k + 1
                    break
        return TrajectoryRecord(
            detection_time_indices=np.flatnonzero(outcomes[:done]) + 1,
            p_click_series=p_click[:done],
            outcomes=outcomes[:done],
            sigma_z_times=np.array(sz_times),
            sigma_z_series=np.array(sz),
            seed=params.seed,
            traj_index=traj_index,
            params=params,
            p_noclick_series=p_noclick[:done],
        )


    def _run_compiled(self, initial_ket, rng, traj_index, n_steps, max_detections) -> TrajectoryRecord:
        # Same schedule as commit_step, with the outcome history in a flat
        # buffer: the committed window is types[base : base + n_slots].
        reg = self.init_register(initial_ket)
        kets = reg.kets
        types = np.zeros(n_steps, dtype=np.int64)
        p_click = np.empty(n_steps)
        p_noclick = np.empty(n_steps)
        sz_times = [0.0]
        sz = [self.sigma_z(reg)]
        base = 0
        n_det = 0
        done = n_steps
        N, dt = self.N, self.dt
        args = (self.step_op, self.click_weights, self.loop_weights)
        for k in range(n_steps):
            norm_before, pc, pn = fastpath.probabilities(kets, types[base:k], *args, dt)
            if not norm_before > 0:
                raise EngineError("conditioned state has zero norm")
            if pc > 1.0:
                raise StepSizeError(f"p_click = {pc:.4f} > 1 at step {k + 1}; reduce dt")
            p_click[k] = pc
            p_noclick[k] = pn
            detected = rng.random() < pc
            types[k] = detected
            if k + 1 - base == N:
                kets, total, s_z = fastpath.commit_full(kets, types[base : k + 1], *args)
                base += 1
                if not (total > 0 and math.isfinite(total)):
                    if types[base - 1] == 1 and total == 0:
                        raise CorruptedTrajectoryError(f"detection at step {base} has zero emission amplitude")
                    raise CorruptedTrajectoryError(f"committed register norm is {total} at step {k + 1}")
                sz_times.append(base * dt)
                sz.append(s_z)
            else:
                kets, _, _ = fastpath.grow(kets)
            if detected:
                n_det += 1
                if max_detections is not None and n_det >= max_detections:
                    done = k + 1
                    break
        outcomes = types[:done].astype(bool)
        return TrajectoryRecord(
            detection_time_indices=np.flatnonzero(outcomes) + 1,
            p_click_series=p_click[:done],
            outcomes=outcomes,
            sigma_z_times=np.array(sz_times),
            sigma_z_series=np.array(sz),
            seed=self.params.seed,
            traj_index=traj_index,
            params=self.params,
            p_noclick_series=p_noclick[:done],
        )


def run_trajectory(params: SimParams, kernel=None, initial_ket=None, traj_index: int = 0, **kwargs) -> TrajectoryRecord:
    return Engine(params, kernel).run_trajectory(initial_ket, traj_index=traj_index, **kwargs)


def record_probability(engine: Engine, initial_ket, record) -> float:
    """Joint probability the engine assigns to a complete click record.

    Product of the per-step conditional probabilities of the recorded
    outcomes (``p_click`` for a detection, ``p_noclick`` otherwise).
    """
    reg = engine.init_register(initial_ket)
    prob = 1.0
    for detected in record:
        hyp = engine.measurement_probabilities(reg)
        prob *= hyp.p_click if detected else hyp.p_noclick
        if prob == 0.0:
            return 0.0
        reg = engine.commit_step(reg, bool(detected))
    return prob
