"""Device parameters and constitutive models.

All quantities are SI.  ``DeviceParams`` is an immutable record; derive
variants with :func:`dataclasses.replace` or :meth:`DeviceParams.with_`.
"""
from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field
from typing import Any, Mapping

import numpy as np
import scipy.constants as sc

Q_E = sc.elementary_charge
K_B = sc.Boltzmann
EPS_0 = sc.epsilon_0

MOBILITY_MODES = ("constant", "poole_frenkel")
GAMMA_MODES = ("constant", "langevin")
KDISS_MODELS = ("constant", "A", "B", "C")


class ParameterError(ValueError):
    pass


class QuadratureError(ArithmeticError):
    pass


# key -> (unit, description); doubles as the config schema
PARAMETER_DOCS: dict[str, tuple[str, str]] = {
    "eps_r_a": ("1", "acceptor relative permittivity"),
    "eps_r_d": ("1", "donor relative permittivity"),
    "V_bi": ("V", "built-in voltage (anode potential offset)"),
    "V_appl": ("V", "applied voltage"),
    "T": ("K", "temperature"),
    "mu_n0": ("m^2/(V s)", "zero-field electron mobility"),
    "mu_p0": ("m^2/(V s)", "zero-field hole mobility"),
    "gamma_a": ("(m/V)^(1/2)", "Poole-Frenkel slope, electrons in acceptor"),
    "gamma_d": ("(m/V)^(1/2)", "Poole-Frenkel slope, holes in donor"),
    "D_e": ("m^2/s", "exciton diffusion coefficient"),
    "tau_e": ("s", "exciton lifetime"),
    "tau_diss": ("s", "exciton to polaron-pair conversion time"),
    "k_rec": ("1/s", "polaron-pair recombination rate"),
    "eta": ("1", "singlet fraction of polaron-pair recombination"),
    "k_diss0": ("1/s", "zero-field polaron-pair dissociation rate"),
    "H": ("m", "interface half width"),
    "gamma_bi": ("m^3/s", "bimolecular recombination rate (constant mode)"),
    "Q": ("1/(m^3 s)", "exciton generation rate"),
    "kappa_n": ("m", "cathode Robin coefficient on electron flux"),
    "alpha_n": ("m/s", "cathode Robin coefficient on electron density"),
    "beta_n": ("1/(m^2 s)", "cathode Robin data for electrons"),
    "kappa_p": ("m", "anode Robin coefficient on hole flux"),
    "alpha_p": ("m/s", "anode Robin coefficient on hole density"),
    "beta_p": ("1/(m^2 s)", "anode Robin data for holes"),
    "theta_max": ("rad", "maximum escape angle of the cone model"),
    "mobility_mode": ("-", "constant | poole_frenkel"),
    "gamma_mode": ("-", "constant | langevin"),
    "kdiss_model": ("-", "constant | A | B | C"),
}


@dataclass(frozen=True)
class DeviceParams:
    eps_r_a: float = 4.0
    eps_r_d: float = 4.0
    V_bi: float = -0.6
    V_appl: float = 0.0
    T: float = 298.0
    mu_n0: float = 3e-10
    mu_p0: float = 1e-10
    gamma_a: float = 1.55e-3
    gamma_d: float = 3e-4
    D_e: float = 1e-7
    tau_e: float = 1e-9
    tau_diss: float = 1e-12
    k_rec: float = 1e6
    eta: float = 0.25
    k_diss0: float = 1e5
    H: float = 1e-9
    gamma_bi: float = 1e-19
    Q: float = 1.53e23
    kappa_n: float = 0.0
    alpha_n: float = 1.0
    beta_n: float = 3.4995e18
    kappa_p: float = 0.0
    alpha_p: float = 1.0
    beta_p: float = 3.4995e18
    theta_max: float = math.pi / 2
    mobility_mode: str = "poole_frenkel"
    gamma_mode: str = "langevin"
    kdiss_model: str = "B"

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        positive = ("eps_r_a", "eps_r_d", "T", "mu_n0", "mu_p0", "D_e",
                    "tau_e", "tau_diss", "k_rec", "k_diss0", "H", "gamma_bi")
        for name in positive:
            if not getattr(self, name) > 0:
                raise ParameterError(f"{name} must be strictly positive")
        for name in ("gamma_a", "gamma_d", "Q", "kappa_n", "alpha_n",
                     "beta_n", "kappa_p", "alpha_p", "beta_p"):
            if getattr(self, name) < 0:
                raise ParameterError(f"{name} must be nonnegative")
        if not 0.0 <= self.eta <= 1.0:
            raise ParameterError("eta must lie in [0, 1]")
        if not 0.0 < self.theta_max <= math.pi / 2 + 1e-15:
            raise ParameterError("theta_max must lie in (0, pi/2]")
        if self.kappa_n == 0 and self.alpha_n <= 0:
            raise ParameterError("kappa_n = 0 requires alpha_n > 0")
        if self.kappa_p == 0 and self.alpha_p <= 0:
            raise ParameterError("kappa_p = 0 requires alpha_p > 0")
        if self.mobility_mode not in MOBILITY_MODES:
            raise ParameterError(f"unknown mobility_mode {self.mobility_mode!r}")
        if self.gamma_mode not in GAMMA_MODES:
            raise ParameterError(f"unknown gamma_mode {self.gamma_mode!r}")
        if self.kdiss_model not in KDISS_MODELS:
            raise ParameterError(f"unknown kdiss_model {self.kdiss_model!r}")

    def with_(self, **changes) -> "DeviceParams":
        return dataclasses.replace(self, **changes)

    @property
    def thermal_voltage(self) -> float:
        return K_B * self.T / Q_E

    @property
    def eps_a(self) -> float:
        return self.eps_r_a * EPS_0

    @property
    def eps_d(self) -> float:
        return self.eps_r_d * EPS_0

    @property
    def anode_potential(self) -> float:
        return self.V_appl + self.V_bi

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)

    @classmethod
    def from_mapping(cls, data: Mapping[str, Any], base: "DeviceParams | None" = None,
                     path: str = "params") -> "DeviceParams":
        unknown = sorted(set(data) - set(PARAMETER_DOCS))
        if unknown:
            raise ParameterError(f"{path}.{unknown[0]}: unknown parameter key")
        kwargs = {}
        for key, value in data.items():
            if key in ("mobility_mode", "gamma_mode", "kdiss_model"):
                kwargs[key] = str(value)
            else:
                try:
                    kwargs[key] = float(value)
                except (TypeError, ValueError):
                    raise ParameterError(f"{path}.{key}: expected a number, got {value!r}")
        base = base if base is not None else cls()
        try:
            return dataclasses.replace(base, **kwargs)
        except ParameterError as exc:
            raise ParameterError(f"{path}: {exc}") from None


def table1(V_appl: float = 0.0, H: float = 0.25e-9, Q: float = 1e25) -> DeviceParams:
    """Parameter set of the 1D micro/macro comparison.

    The dissociation rate is a per-bias constant: 1e7 1/s at short circuit
    and 2e5 1/s at the flat-band bias 0.6 V.
    """
    if abs(V_appl) < 1e-12:
        kd = 1e7
    elif abs(V_appl - 0.6) < 1e-12:
        kd = 2e5
    else:
        raise ParameterError("the table1 preset lists k_diss only for V_appl in {0, 0.6} V")
    return DeviceParams(
        eps_r_a=2.5, eps_r_d=2.5, V_bi=-0.6, V_appl=V_appl, T=298.0,
        mu_n0=4e-8, mu_p0=2e-8, gamma_a=0.0, gamma_d=0.0,
        D_e=1e-7, tau_e=1e-9, tau_diss=1e-12, k_rec=1e6, eta=0.25,
        k_diss0=kd, H=H, gamma_bi=1e-19, Q=Q,
        kappa_n=0.0, alpha_n=1.0, beta_n=0.0,
        kappa_p=0.0, alpha_p=1.0, beta_p=0.0,
        mobility_mode="constant", gamma_mode="constant", kdiss_model="constant",
    )


def table2(kdiss_model: str = "B", Q: float = 1.53e23, V_appl: float = 0.0) -> DeviceParams:
    """Parameter set of the 2D morphology studies (F8BT/PFB)."""
    return DeviceParams(kdiss_model=kdiss_model, Q=Q, V_appl=V_appl)


# --- constitutive laws -------------------------------------------------------

def mobility(params: DeviceParams, carrier: str, field_magnitude):
    """Field-dependent mobility; Poole-Frenkel law ``mu0 exp(g sqrt|E|)``."""
    if carrier == "n":
        mu0, g = params.mu_n0, params.gamma_a
    elif carrier == "p":
        mu0, g = params.mu_p0, params.gamma_d
    else:
        raise ValueError(f"carrier must be 'n' or 'p', got {carrier!r}")
    field_magnitude = np.asarray(field_magnitude, dtype=float)
    if params.mobility_mode == "constant":
        return np.full_like(field_magnitude, mu0) if field_magnitude.ndim else mu0
    out = mu0 * np.exp(g * np.sqrt(np.abs(field_magnitude)))
    return out if out.ndim else float(out)


def diffusivity(params: DeviceParams, carrier: str, field_magnitude):
    """Einstein relation ``D = (k_B T / q) mu``."""
    return params.thermal_voltage * mobility(params, carrier, field_magnitude)


def bimolecular_gamma(params: DeviceParams, mu_n_local, mu_p_local, eps=None):
    """Bimolecular recombination rate constant.

    Langevin mode uses ``q (mu_n + mu_p) / eps``; ``eps`` defaults to the
    mean of the two phase permittivities.
    """
    if params.gamma_mode == "constant":
        shape = np.broadcast(np.asarray(mu_n_local), np.asarray(mu_p_local)).shape
        return np.full(shape, params.gamma_bi) if shape else params.gamma_bi
    if eps is None:
        eps = 0.5 * (params.eps_a + params.eps_d)
    out = Q_E * (np.asarray(mu_n_local) + np.asarray(mu_p_local)) / eps
    return out if np.ndim(out) else float(out)


def field_coefficient_A(T: float, eps_r: float) -> float:
    """``q^3 / (4 pi eps (k_B T)^2)`` in m/V."""
    return Q_E ** 3 / (4.0 * math.pi * eps_r * EPS_0 * (K_B * T) ** 2)


def params_A(params: DeviceParams) -> float:
    return field_coefficient_A(params.T, 0.5 * (params.eps_r_a + params.eps_r_d))


def beta_factor(z, A: float):
    """Enhancement/suppression factor of the dissociation rate.

    ``exp(-A z)`` for ``z >= 0`` and ``exp(2 sqrt(-A z))`` for ``z < 0``.
    """
    z = np.asarray(z, dtype=float)
    az = A * z
    out = np.exp(np.where(az >= 0.0, -az, 2.0 * np.sqrt(np.abs(az))))
    return out if out.ndim else float(out)


def kdiss_normal(params: DeviceParams, E_n, E_t=0.0, A: float | None = None):
    """Dissociation rate for pairs aligned with the interface normal."""
    A = params_A(params) if A is None else A
    E_n, _ = np.broadcast_arrays(np.asarray(E_n, dtype=float), np.asarray(E_t, dtype=float))
    out = params.k_diss0 * beta_factor(E_n, A)
    return out if np.ndim(out) else float(out)


@dataclass
class ConeQuadrature:
    """Tensor Gauss-Legendre rule for the escape-cone average.

    Each direction is split at the kink of the integrand (where the
    projected field changes sign) and the nodes are clustered quadratically
    toward the split, which removes the square-root singularity of the
    negative branch.  ``n`` is the total node count per direction; the
    result is accepted when it agrees with the rule of half the size to
    ``rtol``, otherwise ``n`` is doubled up to ``n_max``.
    """
    n: int = 64
    rtol: float = 1e-6
    n_max: int = 512
    chunk: int = 256
    _cache: dict = field(default_factory=dict, repr=False)

    def _unit_rule(self, m: int):
        if m not in self._cache:
            x, w = np.polynomial.legendre.leggauss(m)
            self._cache[m] = (0.5 * (x + 1.0), 0.5 * w)
        return self._cache[m]

    @staticmethod
    def _clustered(center, other, s, ws):
        # x = center + (other - center) s^2 on the unit rule (s, ws)
        span = other - center
        x = center[..., None] + span[..., None] * s ** 2
        w = np.abs(span)[..., None] * 2.0 * s * ws
        return x, w

    def _average(self, E_n, E_t, theta_max, A, m):
        """Normalized cone average with ``m`` nodes per half-interval."""
        s, ws = self._unit_rule(m)
        F = E_n.shape[0]
        tm = np.full(F, theta_max)
        with np.errstate(divide="ignore", invalid="ignore"):
            t_star = np.arctan2(np.abs(E_n), E_t)
        t_split = np.where((t_star > 0) & (t_star < tm), t_star, 0.5 * tm)
        th1, wt1 = self._clustered(t_split, np.zeros(F), s, ws)
        th2, wt2 = self._clustered(t_split, tm, s, ws)
        theta = np.concatenate([th1, th2], axis=1)          # F x 2m
        wtheta = np.concatenate([wt1, wt2], axis=1)

        a = E_n[:, None] * np.cos(theta)
        b = E_t[:, None] * np.sin(theta)
        crosses = b > np.abs(a)
        with np.errstate(divide="ignore", invalid="ignore"):
            psi_star = np.where(crosses, np.arccos(np.clip(-a / np.where(b > 0, b, 1.0), -1, 1)),
                                0.5 * np.pi)
        ps1, wp1 = self._clustered(psi_star, np.zeros_like(psi_star), s, ws)
        ps2, wp2 = self._clustered(psi_star, np.full_like(psi_star, np.pi), s, ws)
        psi = np.concatenate([ps1, ps2], axis=2)            # F x 2m x 2m
        wpsi = np.concatenate([wp1, wp2], axis=2)

        z = a[..., None] + b[..., None] * np.cos(psi)
        inner = np.sum(wpsi * beta_factor(z, A), axis=2) / np.pi
        # sin(theta) / (1 - cos(theta_max)) with a cancellation-free denominator
        norm = 2.0 * math.sin(0.5 * theta_max) ** 2
        return np.sum(wtheta * np.sin(theta) * inner, axis=1) / norm

    def average(self, E_n, E_t, theta_max: float, A: float) -> np.ndarray:
        E_n = np.atleast_1d(np.asarray(E_n, dtype=float))
        E_t = np.abs(np.atleast_1d(np.asarray(E_t, dtype=float)))
        E_n, E_t = np.broadcast_arrays(E_n, E_t)
        shape = E_n.shape
        E_n, E_t = E_n.ravel(), E_t.ravel()
        out = np.empty_like(E_n)
        for start in range(0, E_n.size, self.chunk):
            sl = slice(start, start + self.chunk)
            out[sl] = self._converged(E_n[sl], E_t[sl], theta_max, A)
        return out.reshape(shape)

    def _converged(self, E_n, E_t, theta_max, A):
        m = self.n // 2
        coarse = self._average(E_n, E_t, theta_max, A, m // 2)
        fine = self._average(E_n, E_t, theta_max, A, m)
        while True:
            bad = np.abs(fine - coarse) > self.rtol * np.abs(fine)
            if not bad.any():
                return fine
            if 2 * m > self.n_max // 2:
                raise QuadratureError(
                    f"cone quadrature not converged at {2 * m} nodes per direction")
            m *= 2
            coarse_bad = fine[bad]
            fine_bad = self._average(E_n[bad], E_t[bad], theta_max, A, m)
            coarse = coarse.copy()
            fine = fine.copy()
            coarse[bad], fine[bad] = coarse_bad, fine_bad


DEFAULT_QUADRATURE = ConeQuadrature()


def cone_weight_integral(theta_max: float, n: int = 64) -> float:
    """Numerical value of the double integral of the cone weight (should be 1)."""
    x, w = np.polynomial.legendre.leggauss(n)
    theta = 0.5 * theta_max * (x + 1.0)
    wt = 0.5 * theta_max * w
    weight = np.sin(theta) / (2.0 * math.pi * 2.0 * math.sin(0.5 * theta_max) ** 2)
    # the weight is independent of psi, so the psi integral is exactly 2 pi
    return float(2.0 * math.pi * np.sum(wt * weight))


def kdiss_cone(params: DeviceParams, E_n, E_t, theta_max: float | None = None,
               A: float | None = None, quadrature: ConeQuadrature | None = None):
    """Dissociation rate averaged over a cone of escape directions."""
    theta_max = params.theta_max if theta_max is None else theta_max
    A = params_A(params) if A is None else A
    quad = quadrature or DEFAULT_QUADRATURE
    avg = quad.average(E_n, E_t, theta_max, A)
    # the normalized weight integrates to 1 only up to rounding; zero field is exact
    zero = (np.asarray(E_n) == 0) & (np.asarray(E_t) == 0)
    out = params.k_diss0 * np.where(zero, 1.0, avg)
    return out if np.ndim(E_n) or np.ndim(E_t) else float(out[0] if out.ndim else out)


def kdiss_hemisphere(params: DeviceParams, E_n, E_t, A: float | None = None,
                     quadrature: ConeQuadrature | None = None):
    """All escape directions in the half space equally likely."""
    return kdiss_cone(params, E_n, E_t, theta_max=math.pi / 2, A=A, quadrature=quadrature)


def kdiss_averaged_A(params: DeviceParams, mean_Ey: float, A: float | None = None) -> float:
    """Single global rate driven by the interface-averaged vertical field."""
    return float(kdiss_hemisphere(params, np.array([mean_Ey]), np.array([0.0]), A=A)[0])


def kdiss_per_facet(params: DeviceParams, E_n, E_t, mean_Ey: float | None = None,
                    A: float | None = None) -> np.ndarray:
    """Facet-wise dissociation rates for the configured model."""
    E_n = np.asarray(E_n, dtype=float)
    model = params.kdiss_model
    if model == "constant":
        return np.full(E_n.shape, params.k_diss0)
    if model == "A":
        if mean_Ey is None:
            raise ValueError("model A needs the interface-averaged vertical field")
        return np.full(E_n.shape, kdiss_averaged_A(params, mean_Ey, A=A))
    if model == "B":
        return np.asarray(kdiss_hemisphere(params, E_n, E_t, A=A))
    if model == "C":
        return np.asarray(kdiss_normal(params, E_n, E_t, A=A))
    raise ParameterError(f"unknown kdiss_model {model!r}")
