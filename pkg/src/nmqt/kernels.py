"""Reservoir kernels: memory function, response function and their step averages.

Normalization: the reservoir coupling density is

    g(w) = sqrt(gamma * kappa / 2pi) / (kappa/2 - i (w - nu)),

so that

    f_m(tau) = int dw |g(w)|^2 exp(-i w tau)         = gamma exp(-i nu tau - kappa |tau| / 2)
    h(tau)   = (2pi)^-1/2 int dw g(w) exp(-i w tau) = sqrt(gamma kappa) exp(-(i nu + kappa/2) tau),  tau >= 0

and ``f_m(tau) = int_0^inf h(tau + s) conj(h(s)) ds``. With this choice the
kernels are exactly those seen by an atom coupled with strength sqrt(gamma)
to a cavity mode of frequency ``nu`` and linewidth ``kappa``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import integrate

MEMORY = "memory"
RESPONSE = "response"


class QuadratureError(RuntimeError):
    """Raised when a quadrature error estimate exceeds the requested tolerance."""


@dataclass(frozen=True)
class LorentzianKernel:
    gamma: float
    kappa: float
    nu: float = 0.0

    def __post_init__(self):
        if not self.gamma >= 0:
            raise ValueError(f"gamma must be >= 0, got {self.gamma}")
        if not self.kappa > 0:
            raise ValueError(f"kappa must be > 0, got {self.kappa}")

    @property
    def _z(self) -> complex:
        return 0.5 * self.kappa + 1j * self.nu

    def memory(self, tau):
        tau = np.asarray(tau, dtype=float)
        return self.gamma * np.exp(-1j * self.nu * tau - 0.5 * self.kappa * np.abs(tau))

    def response(self, tau):
        tau = np.asarray(tau, dtype=float)
        amp = math.sqrt(self.gamma * self.kappa)
        out = amp * np.exp(-self._z * np.where(tau >= 0, tau, 0.0))
        return np.where(tau >= 0, out, 0.0)

    def integral(self, kind: str, lo: float, hi: float) -> complex:
        """Exact integral of the kernel function over ``[lo, hi]`` with ``lo >= 0``."""
        if lo < 0:
            raise ValueError("step averages are only defined for non-negative lags")
        prefactor = self.gamma if kind == MEMORY else math.sqrt(self.gamma * self.kappa)
        z = self._z
        # exp(-z lo) (1 - exp(-z (hi - lo))) / z, written to stay accurate as z -> 0
        return complex(prefactor * np.exp(-z * lo) * -np.expm1(-z * (hi - lo)) / z)

    def spectral_density(self, omega):
        """|g(omega)|^2."""
        omega = np.asarray(omega, dtype=float)
        return (self.gamma * self.kappa / (2 * np.pi)) / ((0.5 * self.kappa) ** 2 + (omega - self.nu) ** 2)

    def memory_time(self, epsilon_mem: float) -> float:
        """Smallest T_m with exp(-kappa T_m / 2) <= epsilon_mem."""
        return 2.0 * math.log(1.0 / epsilon_mem) / self.kappa


@dataclass(frozen=True)
class FlatKernel:
    """Markovian reservoir with decay rate ``Gamma``.

    Both kernel functions are delta functions at zero lag, so only the lag-0
    step average is non-zero: the response delta lies wholly inside the first
    step, while the two-sided memory delta contributes half its weight.
    """

    Gamma: float

    def __post_init__(self):
        if not self.Gamma >= 0:
            raise ValueError(f"Gamma must be >= 0, got {self.Gamma}")

    def memory(self, tau):
        raise ValueError("a flat kernel is a delta function and has no pointwise values")

    response = memory

    def integral(self, kind: str, lo: float, hi: float) -> complex:
        if lo < 0:
            raise ValueError("step averages are only defined for non-negative lags")
        if lo > 0:
            return 0j
        return complex(0.5 * self.Gamma if kind == MEMORY else math.sqrt(self.Gamma))


@dataclass(frozen=True)
class AveragedWeight:
    value: complex
    lag_steps: int
    event_type: str  # "detection" | "no_detection"


def memory_fn(kernel, tau):
    return kernel.memory(tau)


def response_fn(kernel, tau):
    return kernel.response(tau)


def averaged_weight(kernel, detected: bool, lag: float, dt: float) -> AveragedWeight:
    """Integral of the kernel function over one step, ``int_lag^{lag+dt} f``.

    ``lag`` is the time from the end of the emission step to the measurement
    event. Detection events are weighted by the response ``h``, no-detection
    events by the memory function ``f_m``.
    """
    if dt <= 0:
        raise ValueError(f"dt must be positive, got {dt}")
    if lag < -1e-12 * dt:
        raise ValueError(f"emission after the measurement event (lag={lag})")
    lag = max(lag, 0.0)
    kind = RESPONSE if detected else MEMORY
    return AveragedWeight(
        value=kernel.integral(kind, lag, lag + dt),
        lag_steps=int(round(lag / dt)),
        event_type="detection" if detected else "no_detection",
    )


def weight_tables(kernel, dt: float, n_lags: int) -> tuple[np.ndarray, np.ndarray]:
    """Per-lag step weights ``(click, loop)`` for lags ``0 .. n_lags-1`` steps.

    ``click[l]`` is the response average. ``loop[l] = -dt * fbar_m(l dt)`` is
    the emission weight for a photon that is reabsorbed at a no-detection
    event; the reabsorption itself is a bare sigma^dagger.
    """
    click = np.array([kernel.integral(RESPONSE, k * dt, (k + 1) * dt) for k in range(n_lags)])
    loop = np.array([-dt * kernel.integral(MEMORY, k * dt, (k + 1) * dt) for k in range(n_lags)])
    return click, loop


def quadrature_oracle(
    kernel: LorentzianKernel,
    fn_kind: str,
    tau: float,
    tol: float = 1e-9,
    limlst: int = 200,
) -> tuple[complex, float]:
    """Evaluate ``f_m(tau)`` or ``h(tau)`` from its frequency integral.

    Returns ``(value, error_estimate)``. Raises :class:`QuadratureError` if
    the estimate exceeds ``tol`` (absolute, in units of ``gamma``).

    At ``tau == 0`` the response integral converges to the midpoint of the
    jump, ``sqrt(gamma kappa) / 2``, not to the right limit used by the closed
    form.
    """
    if not isinstance(kernel, LorentzianKernel):
        raise TypeError("the quadrature oracle needs a Lorentzian kernel")
    if fn_kind not in (MEMORY, RESPONSE):
        raise ValueError(f"fn_kind must be 'memory' or 'response', got {fn_kind!r}")
    half = 0.5 * kernel.kappa
    a = abs(tau)
    sign = 1.0 if tau >= 0 else -1.0
    phase = np.exp(-1j * kernel.nu * tau)

    def lorentz(x):
        return 1.0 / (half**2 + x**2)

    def x_lorentz(x):
        return x / (half**2 + x**2)

    def fourier(f, weight):
        # int_0^inf f(x) weight(a x) dx; a == 0 only ever meets the cosine weight
        if a == 0:
            if weight == "sin":
                return 0.0, 0.0
            val, err = integrate.quad(f, 0, np.inf, epsabs=tol * 1e-3, epsrel=1e-12, limit=500)
            return val, err
        val, err = integrate.quad(f, 0, np.inf, weight=weight, wvar=a, epsabs=tol * 1e-3, limlst=limlst)
        return val, err

    if fn_kind == MEMORY:
        # (gamma kappa / 2pi) int dx exp(-i x tau) / (half^2 + x^2); the odd part vanishes
        c, err = fourier(lorentz, "cos")
        scale = kernel.gamma * kernel.kappa / np.pi
        value = scale * c * phase
        err *= scale
    else:
        # sqrt(gamma kappa) / 2pi * int dx exp(-i x tau) (half + i x) / (half^2 + x^2)
        c, err_c = fourier(lorentz, "cos")
        s, err_s = fourier(x_lorentz, "sin")
        scale = math.sqrt(kernel.gamma * kernel.kappa) / np.pi
        value = scale * (half * c + sign * s) * phase
        err = scale * (half * err_c + err_s)
    if err > tol * max(kernel.gamma, 1e-300):
        raise QuadratureError(f"{fn_kind} quadrature at tau={tau}: error estimate {err:.2e} exceeds {tol:.2e}")
    return complex(value), float(err)


def factorization_integral(kernel: LorentzianKernel, tau: float, tol: float = 1e-12) -> complex:
    """``int_0^inf h(tau + s) conj(h(s)) ds`` by adaptive quadrature."""

    def integrand(s):
        return complex(kernel.response(tau + s) * np.conj(kernel.response(s)))

    re, _ = integrate.quad(lambda s: integrand(s).real, 0, np.inf, epsabs=tol, epsrel=1e-12, limit=500)
    im, _ = integrate.quad(lambda s: integrand(s).imag, 0, np.inf, epsabs=tol, epsrel=1e-12, limit=500)
    return complex(re, im)
