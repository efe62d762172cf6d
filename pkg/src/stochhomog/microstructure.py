"""Random two-phase microstructures and the coefficient laws of the benchmark tests.

Geometry lives in unit-cell coordinates. A realization assigns to every
integer cell index ``k`` an i.i.d. draw ``Z_k`` and (for random-geometry
tests) its own inclusion geometry; the coefficient at a point ``y`` of the
stretched variable ``y = x / eps`` is evaluated in cell ``floor(y)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import minimize_scalar

TEST_CASES = ("A_I", "A_II", "B", "C", "custom")

MATRIX_BASE, INCLUSION_BASE = 3.0, 300.0
MATRIX_AMP, INCLUSION_AMP = 1.0, 50.0


class PlacementError(RuntimeError):
    pass


@dataclass(frozen=True)
class Ellipse:
    cx: float
    cy: float
    a: float  # semi-major
    b: float  # semi-minor
    angle: float

    def contains(self, pts) -> np.ndarray:
        pts = np.atleast_2d(pts)
        c, s = math.cos(self.angle), math.sin(self.angle)
        dx = pts[:, 0] - self.cx
        dy = pts[:, 1] - self.cy
        u = c * dx + s * dy
        v = -s * dx + c * dy
        return (u / self.a) ** 2 + (v / self.b) ** 2 <= 1.0

    def boundary_points(self, n: int = 64) -> np.ndarray:
        t = 2 * np.pi * np.arange(n) / n
        c, s = math.cos(self.angle), math.sin(self.angle)
        u, v = self.a * np.cos(t), self.b * np.sin(t)
        return np.column_stack([self.cx + c * u - s * v, self.cy + s * u + c * v])

    def half_extents(self):
        c, s = math.cos(self.angle), math.sin(self.angle)
        return (math.sqrt((self.a * c) ** 2 + (self.b * s) ** 2),
                math.sqrt((self.a * s) ** 2 + (self.b * c) ** 2))

    def area(self) -> float:
        return math.pi * self.a * self.b


@dataclass(frozen=True)
class SquareInclusion:
    lo: float = 0.25
    hi: float = 0.75

    def __post_init__(self):
        if not 0.0 < self.lo < self.hi < 1.0:
            raise ValueError("square inclusion needs 0 < lo < hi < 1")

    def inclusion_mask(self, y) -> np.ndarray:
        y = np.atleast_2d(y)
        return ((y[:, 0] >= self.lo) & (y[:, 0] <= self.hi)
                & (y[:, 1] >= self.lo) & (y[:, 1] <= self.hi))

    def volume_fraction(self) -> float:
        return (self.hi - self.lo) ** 2


@dataclass(frozen=True)
class EllipseSet:
    ellipses: tuple = ()

    def inclusion_mask(self, y) -> np.ndarray:
        y = np.atleast_2d(y)
        mask = np.zeros(len(y), dtype=bool)
        for e in self.ellipses:
            # cheap bounding-box filter before the quadratic form
            hx, hy = e.half_extents()
            near = (np.abs(y[:, 0] - e.cx) <= hx) & (np.abs(y[:, 1] - e.cy) <= hy) & ~mask
            if near.any():
                mask[near] = e.contains(y[near])
        return mask

    def volume_fraction(self) -> float:
        return sum(e.area() for e in self.ellipses)


class Phase:
    MATRIX = 0
    INCLUSION = 1


def phase_at(geometry, y) -> int:
    """Phase of a single unit-cell point; inclusions are closed sets."""
    return Phase.INCLUSION if bool(geometry.inclusion_mask(np.asarray(y, float))[0]) else Phase.MATRIX


def _min_form_on_boundary(e_on: Ellipse, e_in: Ellipse, n: int) -> float:
    """Smallest value of e_in's quadratic form along e_on's boundary (1 = touching)."""
    c1, s1 = math.cos(e_on.angle), math.sin(e_on.angle)
    c2, s2 = math.cos(e_in.angle), math.sin(e_in.angle)

    def form(t):
        u, v = e_on.a * np.cos(t), e_on.b * np.sin(t)
        dx = e_on.cx + c1 * u - s1 * v - e_in.cx
        dy = e_on.cy + s1 * u + c1 * v - e_in.cy
        return ((c2 * dx + s2 * dy) / e_in.a) ** 2 + ((-s2 * dx + c2 * dy) / e_in.b) ** 2

    step = 2 * np.pi / n
    t = step * np.arange(n)
    vals = form(t)
    i = int(np.argmin(vals))
    res = minimize_scalar(form, bounds=(t[i] - step, t[i] + step), method="bounded",
                          options={"xatol": 1e-10})
    return min(float(vals[i]), float(res.fun))


def _ellipses_overlap(e1: Ellipse, e2: Ellipse, n_boundary: int) -> bool:
    if math.hypot(e1.cx - e2.cx, e1.cy - e2.cy) > e1.a + e2.a:
        return False
    if e2.contains(np.array([[e1.cx, e1.cy]])).any() or e1.contains(np.array([[e2.cx, e2.cy]])).any():
        return True
    # boundaries cross iff either boundary enters the other ellipse
    return (_min_form_on_boundary(e1, e2, n_boundary) <= 1.0
            or _min_form_on_boundary(e2, e1, n_boundary) <= 1.0)


def take_and_place(n_ellipses: int, axis_range, rng, angle_range=(0.0, math.pi),
                   max_rejections: int = 10_000, n_boundary: int = 128) -> EllipseSet:
    """Sequential random placement with rejection of overlapping candidates."""
    if n_ellipses < 0:
        raise ValueError("n_ellipses must be nonnegative")
    amin, amax = axis_range
    if not 0 < amin <= amax:
        raise ValueError("axis_range must satisfy 0 < min <= max")
    placed = []
    while len(placed) < n_ellipses:
        for _ in range(max_rejections):
            cx, cy = rng.uniform(0.0, 1.0, size=2)
            ax = rng.uniform(amin, amax, size=2)
            ang = rng.uniform(*angle_range)
            cand = Ellipse(float(cx), float(cy), float(ax.max()), float(ax.min()), float(ang))
            hx, hy = cand.half_extents()
            if cx - hx <= 0 or cx + hx >= 1 or cy - hy <= 0 or cy + hy >= 1:
                continue
            if any(_ellipses_overlap(cand, e, n_boundary) for e in placed):
                continue
            placed.append(cand)
            break
        else:
            raise PlacementError(
                f"take-and-place: {max_rejections} consecutive rejections after placing "
                f"{len(placed)}/{n_ellipses} ellipses (volume fraction "
                f"{sum(e.area() for e in placed):.3f}); packing too dense")
    return EllipseSet(tuple(placed))


def sample_uniform(rng) -> float:
    return float(rng.uniform(-1.0, 1.0))


def sample_truncated_normal(rng, b: float = 1.5) -> float:
    """Standard normal conditioned on [-b, b], by rejection."""
    if b <= 0:
        raise ValueError("truncation bound must be positive")
    while True:
        z = float(rng.standard_normal())
        if abs(z) <= b:
            return z


def truncated_normal_variance(b: float) -> float:
    phi = math.exp(-0.5 * b * b) / math.sqrt(2 * math.pi)
    mass = math.erf(b / math.sqrt(2))
    return 1.0 - 2 * b * phi / mass


def _zigzag(k: int) -> int:
    return 2 * k if k >= 0 else -2 * k - 1


STREAM_Z, STREAM_GEOMETRY, STREAM_SHARED = 0, 1, 2


def derive_sample_stream(master_seed: int, sample_index: int, block_index=(0, 0),
                         purpose: int = STREAM_Z) -> np.random.Generator:
    """Independent generator keyed by (seed, sample, cell index, purpose).

    Seeds are hashed through ``SeedSequence``, so streams depend only on the key
    and never on the order in which they are requested.
    """
    k1, k2 = block_index
    ss = np.random.SeedSequence(entropy=int(master_seed) & ((1 << 128) - 1),
                                spawn_key=(int(sample_index), _zigzag(int(k1)),
                                           _zigzag(int(k2)), int(purpose)))
    return np.random.Generator(np.random.PCG64(ss))


@dataclass(frozen=True)
class MicrostructureSpec:
    """Static description of a test case (everything except the random draws)."""

    test_case: str = "A_I"
    distribution: str = "truncated_normal"
    truncation: float = 1.5
    diagonal_only: bool = False
    n_ellipses: int | None = None
    axis_range: tuple | None = None
    custom_value: float = 3.0

    def __post_init__(self):
        if self.test_case not in TEST_CASES:
            raise ValueError(f"unknown test case {self.test_case!r}")
        if self.distribution not in ("uniform", "truncated_normal"):
            raise ValueError(f"unknown distribution {self.distribution!r}")

    @property
    def ellipse_count(self) -> int:
        if self.n_ellipses is not None:
            return self.n_ellipses
        return 70 if self.test_case == "A_II" else 10

    @property
    def ellipse_axes(self) -> tuple:
        if self.axis_range is not None:
            return tuple(self.axis_range)
        return (0.025, 0.045) if self.test_case == "A_II" else (0.06, 0.12)

    @property
    def has_random_z(self) -> bool:
        return self.test_case in ("A_I", "A_II", "C")

    @property
    def random_geometry(self) -> bool:
        return self.test_case in ("B", "C")

    def z_bound(self) -> float:
        if not self.has_random_z:
            return 0.0
        return 1.0 if self.distribution == "uniform" else self.truncation

    def draw_z(self, rng) -> float:
        if self.distribution == "uniform":
            return sample_uniform(rng)
        return sample_truncated_normal(rng, self.truncation)

    def shared_geometry(self, master_seed: int, force: bool = False):
        """Geometry common to all cells; ``force`` also draws one for the
        random-geometry tests (B and C with a frozen geometry)."""
        if self.test_case == "A_I":
            return SquareInclusion(0.25, 0.75)
        if self.test_case == "A_II" or (force and self.random_geometry):
            rng = derive_sample_stream(master_seed, 0, (0, 0), STREAM_SHARED)
            return take_and_place(self.ellipse_count, self.ellipse_axes, rng)
        return None

    def ellipticity_bounds(self):
        """(alpha, beta) over both phases, |Z| <= bound and sin-product in [-1, 1]."""
        if self.test_case == "custom":
            return self.custom_value, self.custom_value
        zb = self.z_bound()
        lo, hi = math.inf, -math.inf
        for base, amp in ((MATRIX_BASE, MATRIX_AMP), (INCLUSION_BASE, INCLUSION_AMP)):
            for s in (-1.0, 1.0):
                for z in (-zb, 0.0, zb):
                    d = base + (amp + s) * z
                    o = 0.0 if self.diagonal_only else amp * z
                    lo, hi = min(lo, d - abs(o)), max(hi, d + abs(o))
        return lo, hi


@dataclass(frozen=True, eq=False)
class SampleRealization:
    """Draws for one sample over a set of unit cells."""

    sample_index: int
    master_seed: int
    z: dict
    geometry: dict  # cell -> geometry (same object for every cell in Test A)

    @classmethod
    def generate(cls, spec: MicrostructureSpec, master_seed: int, sample_index: int, cells,
                 shared_geometry=None) -> "SampleRealization":
        if shared_geometry is None and not spec.random_geometry:
            shared_geometry = spec.shared_geometry(master_seed)
        z, geom = {}, {}
        for k in cells:
            k = (int(k[0]), int(k[1]))
            if spec.has_random_z:
                z[k] = spec.draw_z(derive_sample_stream(master_seed, sample_index, k, STREAM_Z))
            else:
                z[k] = 0.0
            if spec.random_geometry and shared_geometry is None:
                rng = derive_sample_stream(master_seed, sample_index, k, STREAM_GEOMETRY)
                geom[k] = take_and_place(spec.ellipse_count, spec.ellipse_axes, rng)
            else:
                geom[k] = shared_geometry
        return cls(sample_index, master_seed, z, geom)

    @property
    def cells(self):
        return sorted(self.z)


def cell_block(origin, size):
    """Integer cells covering the square [origin, origin + size)^2."""
    o1, o2 = origin
    return [(o1 + i, o2 + j) for j in range(size) for i in range(size)]


@dataclass(frozen=True, eq=False)
class CoefficientField:
    """A(y) in stretched coordinates for one realization.

    ``offset`` shifts local coordinates: ``tensor(y)`` evaluates A(y + offset),
    which is how block cell problems on (0, M)^2 see block k.
    """

    spec: MicrostructureSpec
    realization: SampleRealization | None
    epsilon: float = 0.125
    offset: tuple = (0, 0)
    alpha: float = field(init=False)
    beta: float = field(init=False)

    def __post_init__(self):
        a, b = self.spec.ellipticity_bounds()
        object.__setattr__(self, "alpha", a)
        object.__setattr__(self, "beta", b)

    def shifted(self, offset) -> "CoefficientField":
        return CoefficientField(self.spec, self.realization, self.epsilon, tuple(offset))

    def tensor(self, y) -> np.ndarray:
        """A at stretched-coordinate points y (n, 2) -> (n, 2, 2)."""
        y = np.atleast_2d(np.asarray(y, dtype=np.float64))
        n = len(y)
        out = np.zeros((n, 2, 2))
        if self.spec.test_case == "custom":
            out[:, 0, 0] = out[:, 1, 1] = self.spec.custom_value
            return out
        yg = y + np.asarray(self.offset, dtype=np.float64)
        cell = np.floor(yg).astype(np.int64)
        # points on a cell's upper/right edge belong to the cell they came from
        local = yg - cell
        edge = (local == 0.0) & (y > 0)
        cell[edge] -= 1
        local[edge] = 1.0
        keys = cell[:, 0] * 1_000_003 + cell[:, 1]
        order = np.argsort(keys, kind="stable")
        bounds = np.flatnonzero(np.diff(keys[order])) + 1
        incl = np.zeros(n, dtype=bool)
        zvals = np.zeros(n)
        for sel in np.split(order, bounds):
            k = (int(cell[sel[0], 0]), int(cell[sel[0], 1]))
            if k not in self.realization.z:
                raise KeyError(f"cell {k} is not covered by the realization")
            zvals[sel] = self.realization.z[k]
            incl[sel] = self.realization.geometry[k].inclusion_mask(local[sel])
        base = np.where(incl, INCLUSION_BASE, MATRIX_BASE)
        if self.spec.test_case == "B":
            out[:, 0, 0] = out[:, 1, 1] = base
            return out
        amp = np.where(incl, INCLUSION_AMP, MATRIX_AMP)
        s = np.sin(2 * np.pi * yg[:, 0]) * np.sin(2 * np.pi * yg[:, 1])
        diag = base + (amp + s) * zvals
        out[:, 0, 0] = out[:, 1, 1] = diag
        if not self.spec.diagonal_only:
            out[:, 0, 1] = out[:, 1, 0] = amp * zvals
        return out

    __call__ = tensor


def coefficient_at(field_: CoefficientField, x) -> np.ndarray:
    """A(x / eps) at a single physical point x."""
    x = np.asarray(x, dtype=np.float64)
    return field_.tensor(x[None, :] / field_.epsilon)[0]


def write_geometry(path, geometry, seed=None):
    with open(path, "w") as fh:
        if isinstance(geometry, SquareInclusion):
            fh.write(f"# kind=square seed={seed}\n{float(geometry.lo)!r} {float(geometry.hi)!r}\n")
            return
        fh.write(f"# kind=ellipses seed={seed} count={len(geometry.ellipses)}\n")
        for e in geometry.ellipses:
            fh.write(" ".join(repr(float(v)) for v in (e.cx, e.cy, e.a, e.b, e.angle)) + "\n")


def read_geometry(path):
    with open(path) as fh:
        header = fh.readline()
        rows = [list(map(float, ln.split())) for ln in fh if ln.strip()]
    if "kind=square" in header:
        return SquareInclusion(*rows[0])
    if "kind=ellipses" in header:
        return EllipseSet(tuple(Ellipse(*r) for r in rows))
    raise ValueError(f"unrecognised geometry header: {header.strip()!r}")
