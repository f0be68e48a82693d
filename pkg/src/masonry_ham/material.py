"""Constitutive closures for coupled heat and moisture transport in porous
building materials (brick, mortar) plus the imperfect-contact interface laws.

State variables are temperature theta [C] and relative humidity phi [-].
All functions are numpy-vectorized: scalars in, scalar out; arrays in,
arrays out. Derivatives are returned alongside values where the solver
needs them.
"""

from dataclasses import dataclass, field, replace

import numpy as np

from .errors import DomainError, ParameterError

# Magnus-type saturation pressure branches (above / below 0 C)
_A_ABOVE, _TH0_ABOVE = 17.08, 234.18
_A_BELOW, _TH0_BELOW = 22.44, 272.44
P_SAT_0C = 611.0  # Pa

# validity range of the closure set
THETA_MIN = -40.0  # C
THETA_MAX = 80.0   # C

PHI_FLOOR = 1e-6   # clamp floor for relative humidity
T0_K = 273.15      # K


@dataclass(frozen=True)
class PhysicalConstants:
    """Constants shared by all phases.

    h_v is treated as a constant latent heat (no theta dependence); c_w is
    the specific heat of liquid water used in the moisture-dependent heat
    capacity.
    """

    R: float = 8.314          # J mol^-1 K^-1
    M_w: float = 0.018        # kg mol^-1
    rho_w: float = 1000.0     # kg m^-3
    h_v: float = 2.5e6        # J kg^-1
    c_w: float = 4187.0       # J kg^-1 K^-1
    p_amb: float = 101325.0   # Pa

    def __post_init__(self):
        for name in ("R", "M_w", "rho_w", "h_v", "c_w", "p_amb"):
            v = getattr(self, name)
            if name == "h_v":
                if v < 0:
                    raise ParameterError(f"constant {name} must be >= 0, got {v}")
            elif not v > 0:
                raise ParameterError(f"constant {name} must be > 0, got {v}")


DEFAULT_CONSTANTS = PhysicalConstants()


@dataclass(frozen=True)
class MaterialParams:
    """Per-phase transport and storage parameters.

    Parameters
    ----------
    lambda0 : dry thermal conductivity [W m^-1 K^-1]
    b_tcs : thermal conductivity supplement [-], lambda = lambda0 (1 + b_tcs w / rho_s)
    mu : water vapor diffusion resistance factor [-]
    w_f : free water saturation [kg m^-3]
    w80 : equilibrium water content at phi = 0.8 [kg m^-3]
    A : water absorption coefficient [kg m^-2 s^-0.5]
    rho_s : dry bulk density [kg m^-3]
    c_s : dry specific heat [J kg^-1 K^-1]
    name : phase label used in reports
    """

    lambda0: float
    b_tcs: float
    mu: float
    w_f: float
    w80: float
    A: float
    rho_s: float
    c_s: float
    name: str = ""

    def __post_init__(self):
        if not self.lambda0 > 0:
            raise ParameterError(f"lambda0 must be > 0, got {self.lambda0}")
        if self.b_tcs < 0:
            raise ParameterError(f"b_tcs must be >= 0, got {self.b_tcs}")
        if not self.mu >= 1:
            raise ParameterError(f"mu must be >= 1, got {self.mu}")
        if not self.w_f > 0:
            raise ParameterError(f"w_f must be > 0, got {self.w_f}")
        if not 0 < self.w80 < self.w_f:
            raise ParameterError(
                f"w80 must satisfy 0 < w80 < w_f, got w80={self.w80}, w_f={self.w_f}")
        if not self.A > 0:
            raise ParameterError(f"A must be > 0, got {self.A}")
        if not self.rho_s > 0:
            raise ParameterError(f"rho_s must be > 0, got {self.rho_s}")
        if not self.c_s > 0:
            raise ParameterError(f"c_s must be > 0, got {self.c_s}")
        # retention shape factor; b > 1 is required for a monotone isotherm,
        # which holds iff w80 < 0.8 w_f
        if not self.b > 1.0:
            raise ParameterError(
                f"retention shape factor b = {self.b:.6g} <= 1 "
                f"(requires w80 < 0.8 w_f); got w80={self.w80}, w_f={self.w_f}")

    @property
    def b(self) -> float:
        """Retention curve shape factor fitted through (0.8, w80)."""
        return 0.8 * (self.w80 - self.w_f) / (self.w80 - 0.8 * self.w_f)


@dataclass(frozen=True)
class InterfaceParams:
    """Imperfect hydraulic/thermal contact coefficients.

    alpha_int [W m^-2 K^-1] drives heat flux from the temperature jump,
    beta_int [kg m^-2 s^-1 Pa^-1] drives liquid flux from the capillary
    pressure jump. perfect=True replaces both laws by continuity constraints.
    """

    alpha_int: float = 1.0e5
    beta_int: float = 5.25e-9
    perfect: bool = False

    def __post_init__(self):
        if not self.perfect:
            if not self.alpha_int > 0:
                raise ParameterError(f"alpha_int must be > 0, got {self.alpha_int}")
            if not self.beta_int > 0:
                raise ParameterError(f"beta_int must be > 0, got {self.beta_int}")


@dataclass(frozen=True)
class ProblemParams:
    """Bundle of per-phase materials, interface law and shared constants.

    phases are ordered to match the mesh phase ids.
    """

    phases: tuple
    interface: InterfaceParams = field(default_factory=InterfaceParams)
    constants: PhysicalConstants = field(default_factory=PhysicalConstants)

    def phase(self, pid: int) -> MaterialParams:
        return self.phases[pid]

    def with_interface(self, **kw) -> "ProblemParams":
        return replace(self, interface=replace(self.interface, **kw))


def _check_theta_range(theta):
    th = np.asarray(theta, dtype=float)
    if np.any(th < THETA_MIN) or np.any(th > THETA_MAX):
        bad = th[(th < THETA_MIN) | (th > THETA_MAX)]
        raise DomainError(
            f"temperature {float(np.atleast_1d(bad)[0]):g} C outside "
            f"[{THETA_MIN:g}, {THETA_MAX:g}] C validity range")
    return th


def saturation_pressure(theta):
    """Saturation water vapor pressure and its temperature derivative.

    Magnus-type fit, separate branches above and below 0 C; the value is
    continuous at 0 C (both branches give 611 Pa).

    Parameters
    ----------
    theta : temperature [C], scalar or array, within [-40, 80]

    Returns
    -------
    (p_sat [Pa], dp_sat/dtheta [Pa/K])
    """
    th = _check_theta_range(theta)
    a = np.where(th >= 0.0, _A_ABOVE, _A_BELOW)
    th0 = np.where(th >= 0.0, _TH0_ABOVE, _TH0_BELOW)
    p = P_SAT_0C * np.exp(a * th / (th0 + th))
    dp = p * a * th0 / (th0 + th) ** 2
    if np.isscalar(theta):
        return float(p), float(dp)
    return p, dp


def retention(phi, p: MaterialParams):
    """Sorption/retention isotherm w(phi) and its slope.

    w(phi) = w_f (b - 1) phi / (b - phi) with b fitted through w(0.8) = w80.
    """
    ph = np.asarray(phi, dtype=float)
    b = p.b
    if np.any(ph < 0) or np.any(ph >= b):
        raise DomainError(f"phi outside [0, b={b:g}) for retention evaluation")
    w = p.w_f * (b - 1.0) * ph / (b - ph)
    dw = p.w_f * (b - 1.0) * b / (b - ph) ** 2
    if np.isscalar(phi):
        return float(w), float(dw)
    return w, dw


def liquid_diffusivity(w, p: MaterialParams):
    """Capillary liquid transport diffusivity D_w(w) [m^2/s].

    Exponential interpolation from the absorption coefficient:
    D_w = 3.8 (A / w_f)^2 1000^(w/w_f - 1).
    """
    w = np.asarray(w, dtype=float)
    out = 3.8 * (p.A / p.w_f) ** 2 * 1000.0 ** (w / p.w_f - 1.0)
    return float(out) if out.ndim == 0 else out


def liquid_conductivity(phi, p: MaterialParams):
    """Liquid conduction coefficient D_phi = D_w dw/dphi [kg m^-1 s^-1]."""
    w, dw = retention(phi, p)
    out = liquid_diffusivity(w, p) * dw
    return float(out) if np.isscalar(phi) else out


def vapor_permeability(theta, p: MaterialParams, constants: PhysicalConstants = DEFAULT_CONSTANTS):
    """Water vapor permeability delta_p [kg m^-1 s^-1 Pa^-1].

    Still-air permeability 2.0e-7 T^0.81 / p_amb (T in K) divided by the
    diffusion resistance factor mu.
    """
    th = _check_theta_range(theta)
    T = th + T0_K
    out = 2.0e-7 * T ** 0.81 / (constants.p_amb * p.mu)
    if np.isscalar(theta):
        return float(out)
    return out


def thermal_conductivity(phi, p: MaterialParams):
    """Moisture-dependent thermal conductivity lambda(w) [W m^-1 K^-1]."""
    w, _ = retention(phi, p)
    out = p.lambda0 * (1.0 + p.b_tcs * w / p.rho_s)
    return float(out) if np.isscalar(phi) else out


def heat_capacity(theta, phi, p: MaterialParams, constants: PhysicalConstants = DEFAULT_CONSTANTS):
    """Volumetric heat storage dH/dtheta [J m^-3 K^-1].

    Dry skeleton plus stored liquid water; theta is accepted for signature
    symmetry with the other coefficients but the closure is
    temperature-independent.
    """
    del theta
    w, _ = retention(phi, p)
    out = p.rho_s * p.c_s + w * constants.c_w
    return float(out) if np.isscalar(phi) else out


def moisture_capacity(phi, p: MaterialParams):
    """Moisture storage slope dw/dphi [kg m^-3]."""
    _, dw = retention(phi, p)
    return dw


def capillary_pressure(theta_K, phi, constants: PhysicalConstants = DEFAULT_CONSTANTS):
    """Kelvin capillary pressure p_c = -(rho_w R T / M_w) ln(phi) [Pa].

    Parameters
    ----------
    theta_K : absolute temperature [K]
    phi : relative humidity in (0, 1]
    """
    T = np.asarray(theta_K, dtype=float)
    ph = np.asarray(phi, dtype=float)
    if np.any(ph <= 0.0):
        raise DomainError("phi <= 0 in capillary pressure (Kelvin law singular)")
    if np.any(ph > 1.0 + 1e-12):
        raise DomainError("phi > 1 in capillary pressure")
    out = -(constants.rho_w * constants.R * T / constants.M_w) * np.log(ph)
    if np.isscalar(theta_K) and np.isscalar(phi):
        return float(out)
    return out


def capillary_pressure_slopes(theta_C, phi, constants: PhysicalConstants = DEFAULT_CONSTANTS):
    """Partial derivatives of p_c with respect to (theta [C], phi).

    Returns (dpc_dtheta, dpc_dphi); dtheta in C equals dtheta in K.
    """
    T = np.asarray(theta_C, dtype=float) + T0_K
    ph = np.asarray(phi, dtype=float)
    if np.any(ph <= 0.0):
        raise DomainError("phi <= 0 in capillary pressure slope")
    c = constants.rho_w * constants.R / constants.M_w
    dpc_dth = -c * np.log(ph)
    dpc_dphi = -c * T / ph
    return dpc_dth, dpc_dphi


def interface_fluxes(state1, state2, ip: InterfaceParams,
                     constants: PhysicalConstants = DEFAULT_CONSTANTS):
    """Heat and liquid water flux densities across an imperfect contact.

    state1, state2 are (theta [C], phi) on the two sides. Returns
    (q_int [W m^-2], g_w_int [kg m^-2 s^-1]) with

        q_int  = -alpha_int (theta2 - theta1)
        g_w_int = -beta_int (p_c2 - p_c1)

    Positive q_int is heat flow from side 1 to side 2. Positive g_w_int is
    liquid flow toward side 1 (from the wetter side 2), because p_c grows
    as phi drops; the assembled mass outflow of side 1 is -g_w_int.
    """
    if ip.perfect:
        raise ParameterError("interface_fluxes is undefined for perfect contact")
    th1, ph1 = state1
    th2, ph2 = state2
    if np.any(np.asarray(ph1) <= 0.0) or np.any(np.asarray(ph2) <= 0.0):
        raise DomainError("phi <= 0 on an interface side (Kelvin law singular)")
    pc1 = capillary_pressure(np.asarray(th1, dtype=float) + T0_K, ph1, constants)
    pc2 = capillary_pressure(np.asarray(th2, dtype=float) + T0_K, ph2, constants)
    q = -ip.alpha_int * (np.asarray(th2, dtype=float) - np.asarray(th1, dtype=float))
    g = -ip.beta_int * (pc2 - pc1)
    if np.isscalar(th1) and np.isscalar(th2):
        return float(q), float(g)
    return q, g


def transport_coefficients(theta, phi, p: MaterialParams,
                           constants: PhysicalConstants = DEFAULT_CONSTANTS):
    """The four scalar conduction coefficients of the coupled system.

    Flux rows (heat with latent vapor term, moisture liquid+vapor):

        q_tot = -k_tt grad(theta) - k_tp grad(phi)
        g_tot = -k_pt grad(theta) - k_pp grad(phi)

    k_tt = lambda + h_v delta_p dp_sat/dtheta phi
    k_tp = h_v delta_p p_sat
    k_pt = delta_p dp_sat/dtheta phi
    k_pp = D_phi + delta_p p_sat

    Evaluated at the supplied linearization state; vectorized.
    """
    psat, dpsat = saturation_pressure(theta)
    dp = vapor_permeability(theta, p, constants)
    lam = thermal_conductivity(phi, p)
    dphi_liq = liquid_conductivity(phi, p)
    ph = np.asarray(phi, dtype=float) if not np.isscalar(phi) else phi
    k_pt = dp * dpsat * ph
    k_tt = lam + constants.h_v * k_pt
    k_tp = constants.h_v * dp * psat
    k_pp = dphi_liq + dp * psat
    return k_tt, k_tp, k_pt, k_pp


def transport_coefficient_derivatives(theta, phi, p: MaterialParams,
                                      constants: PhysicalConstants = DEFAULT_CONSTANTS):
    """State derivatives of the four conduction coefficients.

    Returns ((dktt_dth, dktt_dph), (dktp_dth, dktp_dph),
             (dkpt_dth, dkpt_dph), (dkpp_dth, dkpp_dph)), all vectorized.
    Used by the exact-Jacobian assembly option; every term is the analytic
    derivative of the closures in transport_coefficients.
    """
    th = np.asarray(theta, dtype=float)
    ph = np.asarray(phi, dtype=float)
    psat, dpsat = saturation_pressure(th)
    a = np.where(th >= 0.0, _A_ABOVE, _A_BELOW)
    th0 = np.where(th >= 0.0, _TH0_ABOVE, _TH0_BELOW)
    g = a * th0 / (th0 + th) ** 2
    d2psat = psat * (g * g - 2.0 * a * th0 / (th0 + th) ** 3)

    dp = vapor_permeability(th, p, constants)
    ddp = dp * 0.81 / (th + T0_K)

    w, dw = retention(ph, p)
    d2w = 2.0 * p.w_f * (p.b - 1.0) * p.b / (p.b - ph) ** 3
    Dw = liquid_diffusivity(w, p)
    dDw_dw = Dw * np.log(1000.0) / p.w_f
    dDphi = dDw_dw * dw * dw + Dw * d2w
    dlam = p.lambda0 * p.b_tcs / p.rho_s * dw

    vap_th = ddp * dpsat + dp * d2psat       # d(delta_p dpsat)/dtheta
    dktt_dth = constants.h_v * ph * vap_th
    dktt_dph = dlam + constants.h_v * dp * dpsat
    dktp_dth = constants.h_v * (ddp * psat + dp * dpsat)
    dktp_dph = np.zeros_like(ph)
    dkpt_dth = ph * vap_th
    dkpt_dph = dp * dpsat * np.ones_like(ph)
    dkpp_dth = ddp * psat + dp * dpsat
    dkpp_dph = dDphi
    return ((dktt_dth, dktt_dph), (dktp_dth, dktp_dph),
            (dkpt_dth, dkpt_dph), (dkpp_dth, dkpp_dph))


def clamp_phi(phi, warn_sink=None):
    """Clamp relative humidity into [PHI_FLOOR, 1]; report clamp count.

    warn_sink, if given, is a callable receiving the number of clamped
    entries (used by solvers to log clamping events).
    """
    ph = np.asarray(phi, dtype=float)
    n_bad = int(np.count_nonzero((ph < PHI_FLOOR) | (ph > 1.0)))
    if n_bad and warn_sink is not None:
        warn_sink(n_bad)
    return np.clip(ph, PHI_FLOOR, 1.0)


# Identified parameter sets for the two masonry phases; storage values
# (rho_s, c_s) are handbook defaults, everything else comes from inverse
# identification of the wall experiments.
BRICK = MaterialParams(lambda0=0.25, b_tcs=10.0, mu=16.80, w_f=229.30,
                       w80=141.68, A=0.51, rho_s=1690.0, c_s=840.0, name="brick")
MORTAR = MaterialParams(lambda0=0.45, b_tcs=9.0, mu=9.63, w_f=160.0,
                        w80=22.72, A=0.82, rho_s=1730.0, c_s=840.0, name="mortar")
DEFAULT_INTERFACE = InterfaceParams(alpha_int=1.0e5, beta_int=5.25e-9)


def default_params() -> ProblemParams:
    """Brick+mortar parameter bundle with the identified optima."""
    return ProblemParams(phases=(BRICK, MORTAR), interface=DEFAULT_INTERFACE,
                         constants=DEFAULT_CONSTANTS)
