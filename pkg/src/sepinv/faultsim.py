"""
Synthetic fault problem: two-quadrilateral geometry from m in R^6, a Kelvin
point-source kernel, the finite-difference regularizer, a cosine slip bump and
noisy surface data.

Lengths are in km, slip and displacements in m. The square S = [-100, 200]^2
is sampled on a regular grid_m x grid_m lattice with x1 varying fastest, so
node k sits at (x[k % grid_m], x[k // grid_m]).
"""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import scipy.sparse as sp
from scipy.stats import qmc

from .errors import DegenerateGeometry
from .linalg import ForwardOperator, KroneckerSumGram, RegularizerGram
from .posterior import PriorSpec, ProblemDefinition

S_MIN, S_MAX = -100.0, 200.0
TRUE_M = np.array([24.0, 145.0, -40.0, 8.0, -40.0, -50.0])
FAVORABLE_M = np.array([0.0, 100.0, -20.0, 0.0, -20.0, -30.0])
FAVORABLE_ALPHA = 1e-4
PRIOR_HALF_WIDTH = 200.0
MIN_COS_DIHEDRAL = 0.8
FALLBACK_DIRECTION = np.array([0.0, 1.0, 0.0])


def _plane(p1, p2, p3):
    """Coefficients (a, b, c) of the graph z = a + b x1 + c x2 through three points."""
    e1, e2 = p2 - p1, p3 - p1
    nrm = np.cross(e1, e2)
    scale = max(np.linalg.norm(e1) * np.linalg.norm(e2), 1.0)
    if abs(nrm[2]) <= 1e-12 * scale:
        raise DegenerateGeometry(f"points {p1}, {p2}, {p3} do not span a non-vertical plane")
    b = -nrm[0] / nrm[2]
    c = -nrm[1] / nrm[2]
    a = p1[2] - b * p1[0] - c * p1[1]
    return np.array([a, b, c])


def _unit_up_normal(coef):
    v = np.array([-coef[1], -coef[2], 1.0])
    return v / np.sqrt(1.0 + coef[1] ** 2 + coef[2] ** 2)


def _check_m(m):
    m = np.asarray(m, dtype=float)
    if m.shape != (6,):
        raise ValueError(f"m must have 6 components, got shape {m.shape}")
    if not (S_MIN < m[1] < S_MAX and S_MIN < m[3] < S_MAX):
        raise ValueError(f"need -100 < m2, m4 < 200, got m2={m[1]}, m4={m[3]}")
    return m


@dataclass(frozen=True)
class FaultGeometry:
    """Piecewise-planar fault over S.

    Piece 0 is the quadrilateral P1 P2 P3 P5 (below the line P2 P3 in the
    horizontal plane), piece 1 is P2 P3 P4 P6.
    """

    m: np.ndarray
    planes: np.ndarray = field(repr=False)

    @property
    def control_points(self) -> np.ndarray:
        m = self.m
        p5 = (S_MAX, S_MIN, self._eval(0, S_MAX, S_MIN))
        p6 = (S_MIN, S_MAX, self._eval(1, S_MIN, S_MAX))
        return np.array([
            [S_MIN, S_MIN, m[0]],
            [S_MIN, m[1], m[2]],
            [S_MAX, m[3], m[4]],
            [S_MAX, S_MAX, m[5]],
            p5,
            p6,
        ])

    def _eval(self, piece, x1, x2):
        a, b, c = self.planes[piece]
        return a + b * x1 + c * x2

    def piece(self, x1, x2):
        """0 on the P1 P2 P3 P5 side of the edge P2 P3 (edge included), else 1."""
        m2, m4 = self.m[1], self.m[3]
        line = m2 + (m4 - m2) * (np.asarray(x1, dtype=float) - S_MIN) / (S_MAX - S_MIN)
        return np.where(np.asarray(x2, dtype=float) <= line, 0, 1)

    def depth_fn(self, x1, x2):
        x1 = np.asarray(x1, dtype=float)
        x2 = np.asarray(x2, dtype=float)
        coef = self.planes[self.piece(x1, x2)]
        return coef[..., 0] + coef[..., 1] * x1 + coef[..., 2] * x2

    def normal_fn(self, x1, x2):
        coef = self.planes[self.piece(x1, x2)]
        v = np.stack([-coef[..., 1], -coef[..., 2], np.ones_like(coef[..., 0])], axis=-1)
        return v / np.linalg.norm(v, axis=-1, keepdims=True)

    @property
    def cos_dihedral(self) -> float:
        return float(np.clip(_unit_up_normal(self.planes[0]) @ _unit_up_normal(self.planes[1]), -1, 1))

    def slopes(self, x1, x2):
        """Depth gradient (b, c) of the containing piece."""
        coef = self.planes[self.piece(x1, x2)]
        return coef[..., 1], coef[..., 2]


def geometry_from_m(m) -> FaultGeometry:
    m = _check_m(m)
    p1 = np.array([S_MIN, S_MIN, m[0]])
    p2 = np.array([S_MIN, m[1], m[2]])
    p3 = np.array([S_MAX, m[3], m[4]])
    p4 = np.array([S_MAX, S_MAX, m[5]])
    planes = np.array([_plane(p1, p2, p3), _plane(p2, p3, p4)])
    return FaultGeometry(m.copy(), planes)


def dihedral_cosine(m) -> float:
    return geometry_from_m(m).cos_dihedral


def lattice(grid_m: int):
    """Node coordinates (x1, x2) of the grid_m x grid_m lattice over S, x1 fastest."""
    if grid_m < 2:
        raise ValueError("grid_m must be >= 2")
    x = np.linspace(S_MIN, S_MAX, grid_m)
    x1, x2 = np.meshgrid(x, x)
    return x1.ravel(), x2.ravel()


def trapezoid_weights(grid_m: int) -> np.ndarray:
    h = (S_MAX - S_MIN) / (grid_m - 1)
    w1 = np.full(grid_m, h)
    w1[[0, -1]] = h / 2
    return np.outer(w1, w1).ravel()


def thrust_directions(geom: FaultGeometry, x1, x2, warn=True):
    """Unit steepest-descent tangents; flat pieces fall back to (0, 1, 0)."""
    b, c = geom.slopes(x1, x2)
    b = np.broadcast_to(b, np.shape(x1)).astype(float)
    c = np.broadcast_to(c, np.shape(x1)).astype(float)
    grad2 = b**2 + c**2
    d = np.stack([-b, -c, -grad2], axis=-1)
    norm = np.linalg.norm(d, axis=-1, keepdims=True)
    flat = norm[..., 0] == 0.0
    if np.any(flat):
        if warn:
            warnings.warn("flat fault piece: steepest descent undefined, using direction (0, 1, 0)",
                          RuntimeWarning, stacklevel=2)
        d[flat] = FALLBACK_DIRECTION
        norm[flat] = 1.0
    return d / norm


def kelvin_tensor(r, lam=1.0, mu=1.0):
    """Full-space elastostatic Green's tensor for displacement at offset ``r``.

    U_ij = [(3 - 4 nu) delta_ij + r_i r_j / |r|^2] / (16 pi mu (1 - nu) |r|)
    with nu = lam / (2 (lam + mu)). Shape (..., 3, 3).
    """
    r = np.asarray(r, dtype=float)
    nu = lam / (2.0 * (lam + mu))
    dist = np.linalg.norm(r, axis=-1)
    rhat = r / dist[..., None]
    coeff = 1.0 / (16.0 * np.pi * mu * (1.0 - nu) * dist)
    outer = rhat[..., :, None] * rhat[..., None, :]
    return coeff[..., None, None] * ((3.0 - 4.0 * nu) * np.eye(3) + outer)


class FaultOperatorFactory:
    """m -> A_m for a fixed lattice and station set.

    Each source node contributes a Kelvin point source pointing along the
    local thrust direction, weighted by its trapezoid area on the fault.
    Nodes where the fault reaches x3 >= -min_depth are dropped (zero column).
    """

    def __init__(self, grid_m: int, stations, lam=1.0, mu=1.0, min_depth=0.0):
        self.grid_m = int(grid_m)
        self.stations = np.asarray(stations, dtype=float)
        if self.stations.ndim != 2 or self.stations.shape[1] != 3:
            raise ValueError("stations must be an (k, 3) array")
        if np.any(self.stations[:, 2] < 0):
            raise ValueError("stations must lie on or above the surface x3 = 0")
        self.x1, self.x2 = lattice(self.grid_m)
        self.base_weights = trapezoid_weights(self.grid_m)
        self.lam, self.mu = lam, mu
        self.min_depth = float(min_depth)
        nu = lam / (2.0 * (lam + mu))
        self._c_iso = 3.0 - 4.0 * nu
        self._c0 = 1.0 / (16.0 * np.pi * mu * (1.0 - nu))

    @property
    def n(self) -> int:
        return 3 * self.stations.shape[0]

    @property
    def p(self) -> int:
        return self.grid_m**2

    def source_nodes(self, geom: FaultGeometry):
        """Node positions on the fault, quadrature weights and thrust directions."""
        depth = geom.depth_fn(self.x1, self.x2)
        b, c = geom.slopes(self.x1, self.x2)
        jac = np.sqrt(1.0 + b**2 + c**2)
        keep = depth < -self.min_depth
        weights = np.where(keep, self.base_weights * jac, 0.0)
        nodes = np.stack([self.x1, self.x2, np.where(keep, depth, -1.0)], axis=-1)
        directions = thrust_directions(geom, self.x1, self.x2, warn=False)
        return nodes, weights, directions

    def matrix(self, geom: FaultGeometry) -> np.ndarray:
        nodes, weights, t = self.source_nodes(geom)
        r = self.stations[:, None, :] - nodes[None, :, :]
        dist = np.sqrt(np.einsum("spk,spk->sp", r, r))
        rt = np.einsum("spk,pk->sp", r, t) / dist
        scal = self._c0 * weights[None, :] / dist
        disp = scal[..., None] * (self._c_iso * t[None, :, :] + (rt / dist)[..., None] * r)
        return disp.transpose(0, 2, 1).reshape(self.n, self.p)

    def __call__(self, m) -> ForwardOperator:
        return ForwardOperator(self.matrix(geometry_from_m(m)))


def build_forward_matrix(geom: FaultGeometry, grid_m: int, stations, **kw) -> ForwardOperator:
    return ForwardOperator(FaultOperatorFactory(grid_m, stations, **kw).matrix(geom))


def difference_operators(grid_m: int):
    """Sparse (D, E): one-sided differences along x1 and along x2 with a closing last row."""
    if grid_m < 2:
        raise ValueError("grid_m must be >= 2")
    block = sp.diags([np.ones(grid_m), -np.ones(grid_m - 1)], [0, 1], format="csr")
    eye = sp.identity(grid_m, format="csr")
    return sp.kron(eye, block, format="csr"), sp.kron(block, eye, format="csr")


def difference_block(grid_m: int) -> np.ndarray:
    """The grid_m x grid_m upper-bidiagonal block with 1 on the diagonal, -1 above."""
    return np.eye(grid_m) - np.eye(grid_m, k=1)


def build_regularizer_gram(grid_m: int, structured: bool = True) -> RegularizerGram:
    """R'R = D'D + E'E.

    The default exploits the Kronecker-sum form I (x) M'M + M'M (x) I;
    ``structured=False`` gives the plain sparse-LU version.
    """
    if grid_m < 2:
        raise ValueError("grid_m must be >= 2")
    if structured:
        block = difference_block(grid_m)
        return KroneckerSumGram(block.T @ block)
    d, e = difference_operators(grid_m)
    return RegularizerGram(grid_m**2, (d.T @ d + e.T @ e).tocsc())


@dataclass
class SlipField:
    values: np.ndarray
    direction: np.ndarray
    grid_m: int


def cosine_bump(x1, x2, center=(50.0, 50.0), radius=80.0, amplitude=1.0):
    r = np.hypot(np.asarray(x1) - center[0], np.asarray(x2) - center[1])
    return np.where(r < radius, amplitude * 0.5 * (1.0 + np.cos(np.pi * r / radius)), 0.0)


def synthesize_slip(geom: FaultGeometry, grid_m: int, center=(50.0, 50.0), radius=80.0,
                    amplitude=1.0) -> SlipField:
    """Radial cosine bump of slip magnitude, oriented along steepest descent."""
    if not (S_MIN < center[0] - radius and center[0] + radius < S_MAX
            and S_MIN < center[1] - radius and center[1] + radius < S_MAX):
        raise ValueError("bump support must lie strictly inside S")
    x1, x2 = lattice(grid_m)
    values = cosine_bump(x1, x2, center, radius, amplitude)
    return SlipField(values, thrust_directions(geom, x1, x2), grid_m)


@dataclass(frozen=True)
class NoiseScenario:
    label: str
    fraction: float
    seed: int = 0

    def __post_init__(self):
        if not self.fraction >= 0:
            raise ValueError("noise fraction must be nonnegative")

    @classmethod
    def low(cls, seed=0):
        return cls("low", 0.05, seed)

    @classmethod
    def high(cls, seed=0):
        return cls("high", 0.25, seed)


def generate_data(geom_true: FaultGeometry, slip: SlipField, stations, scenario: NoiseScenario,
                  **kw):
    """u = u_free + N(0, sigma^2 I) with sigma = fraction * max |u_free|.

    Returns (u_free, u, realized relative error ||noise|| / ||u_free||).
    """
    op = build_forward_matrix(geom_true, slip.grid_m, stations, **kw)
    u_free = op.apply(slip.values)
    sigma = scenario.fraction * np.max(np.abs(u_free))
    noise = sigma * np.random.default_rng(scenario.seed).standard_normal(u_free.shape[0])
    u = u_free + noise
    return u_free, u, float(np.linalg.norm(noise) / np.linalg.norm(u_free))


STATION_MARGIN = 50.0
# Lame parameters of the default experiment: a Poisson solid with a crustal
# rigidity, which keeps the alpha posteriors inside the prior range.
MODULUS = 30.0
# slip patch of the default experiment; covers most of S
TRUE_SLIP = {"center": (50.0, 50.0), "radius": 140.0, "amplitude": 1.0}


def default_stations(n_stations: int = 65, margin: float = STATION_MARGIN) -> np.ndarray:
    """Quasi-uniform stations on [-100 + margin, 200 - margin]^2.

    Unscrambled Halton points with the origin skipped. The default margin keeps
    the stations over the central two thirds of S.
    """
    pts = qmc.Halton(d=2, scramble=False).random(n_stations + 1)[1:]
    lo, hi = S_MIN + margin, S_MAX - margin
    xy = lo + (hi - lo) * pts
    return np.column_stack([xy, np.zeros(n_stations)])


def _support(m) -> bool:
    if not (S_MIN < m[1] < S_MAX and S_MIN < m[3] < S_MAX):
        return False
    try:
        return dihedral_cosine(m) >= MIN_COS_DIHEDRAL
    except DegenerateGeometry:
        return False


def fault_prior(log10_alpha_range=(-5.0, 0.0)) -> PriorSpec:
    """Uniform on [-200, 200]^6 with the m2/m4 window and cos(dihedral) >= 0.8."""
    return PriorSpec(-PRIOR_HALF_WIDTH * np.ones(6), PRIOR_HALF_WIDTH * np.ones(6),
                     log10_alpha_range, support_predicate=_support)


@dataclass
class FaultSetup:
    problem: ProblemDefinition
    prior: PriorSpec
    factory: FaultOperatorFactory
    stations: np.ndarray
    scenario: NoiseScenario
    m_true: np.ndarray
    slip_true: SlipField
    u_free: np.ndarray
    relative_error: float


def fault_problem(scenario: Optional[NoiseScenario] = None, grid_m: int = 41, n_stations: int = 65,
                  m_true=TRUE_M, slip_kw: Optional[dict] = None, min_depth: float = 0.0,
                  modulus: float = MODULUS) -> FaultSetup:
    """Data and posterior ingredients for one noise scenario.

    The true slip lives on a lattice with twice the resolution of the
    inversion lattice (2 grid_m - 1 nodes per side, so the coarse nodes nest).
    """
    scenario = scenario or NoiseScenario.low()
    stations = default_stations(n_stations)
    geom = geometry_from_m(m_true)
    fine = 2 * grid_m - 1
    slip = synthesize_slip(geom, fine, **(TRUE_SLIP if slip_kw is None else slip_kw))
    kw = dict(lam=modulus, mu=modulus, min_depth=min_depth)
    u_free, u, rel = generate_data(geom, slip, stations, scenario, **kw)
    factory = FaultOperatorFactory(grid_m, stations, **kw)
    problem = ProblemDefinition(u, factory, build_regularizer_gram(grid_m), q=6)
    return FaultSetup(problem, fault_prior(), factory, stations, scenario,
                      np.asarray(m_true, dtype=float), slip, u_free, rel)


def export_lattice_csv(path, grid_m: int, columns: dict):
    """Write x1, x2 and the given per-node columns as CSV."""
    x1, x2 = lattice(grid_m)
    names = list(columns)
    data = [np.asarray(columns[k], dtype=float).ravel() for k in names]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["x1", "x2", *names])
        for i in range(x1.size):
            w.writerow([repr(float(x1[i])), repr(float(x2[i]))] + [repr(float(d[i])) for d in data])


def geometry_csv(path, geom: FaultGeometry, slip: Optional[np.ndarray] = None, grid_m: int = 41):
    """Export depth, and slip when given, on the lattice (slip fixes the lattice size)."""
    if slip is not None:
        grid_m = int(round(np.sqrt(np.asarray(slip).size)))
    x1, x2 = lattice(grid_m)
    cols = {"depth": geom.depth_fn(x1, x2)}
    if slip is not None:
        cols["slip"] = slip
    export_lattice_csv(path, grid_m, cols)
