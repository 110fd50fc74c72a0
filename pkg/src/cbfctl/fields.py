"""Divergence-free velocity fields on the periodic torus, in truncated Fourier form.

The computational domain is the d-torus [0, 2*pi)^d (d = 2 or 3).  A velocity
field is stored as a complex coefficient array ``c[j, k1, ..., kd]`` over the
n^d FFT wavenumber lattice, with three invariants enforced everywhere:

* Hermitian symmetry  c(-k) = conj(c(k))   (the field is real valued),
* c(0) = 0                                  (zero spatial mean),
* c(k) = 0 whenever any |k_i| > n//3        (2/3-rule dealiasing),

plus discrete incompressibility  k . c(k) = 0  for every retained mode.  With
the mean removed the smallest Laplacian eigenvalue on the torus is 1, so the
gradient seminorm dominates the L2 norm (Poincare with constant 1) and is used
as the H1-type norm throughout.

Nonlinear products are never formed on the n-grid: physical-space work happens
on a zero-padded 2n-point grid, which leaves quadratic *and* cubic products of
retained modes alias-free and makes the quadrature of their integrals exact.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from functools import cached_property
from typing import Callable, Iterable, NamedTuple, Sequence

import numpy as np

TAU = 2.0 * math.pi

_CBFT_MAGIC = b"CBFT"
_CBFT_VERSION = 1


class GridMismatchError(ValueError):
    """Two fields or trajectories do not share the same Grid / time axis."""


def _frozen(arr: np.ndarray) -> np.ndarray:
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class Grid:
    """Spectral grid: ``d`` spatial dimensions, ``n`` wavenumbers per axis.

    The box length is fixed at 2*pi per axis.  Retained (dealiased) modes
    satisfy |k_i| <= n//3; everything else is identically zero.
    """

    d: int
    n: int

    def __post_init__(self) -> None:
        if self.d not in (2, 3):
            raise ValueError(f"d must be 2 or 3, got {self.d}")
        if self.n < 4 or self.n % 2 != 0:
            raise ValueError(f"n must be even and >= 4, got {self.n}")

    @property
    def kmax(self) -> int:
        return self.n // 3

    @property
    def shape(self) -> tuple[int, ...]:
        return (self.n,) * self.d

    @property
    def pad_n(self) -> int:
        """Transform grid size per axis; 2n keeps cubic products alias-free."""
        return 2 * self.n

    @property
    def volume(self) -> float:
        return TAU**self.d

    @property
    def quad_weight(self) -> float:
        """Quadrature weight of one padded-grid node, (2*pi / 2n)^d."""
        return (TAU / self.pad_n) ** self.d

    @cached_property
    def wavenumbers_1d(self) -> np.ndarray:
        """Integer wavenumbers along one axis in FFT storage order."""
        return _frozen(np.fft.fftfreq(self.n, 1.0 / self.n).astype(np.int64))

    @cached_property
    def k(self) -> np.ndarray:
        """Wavenumber vectors, shape (d, n, ..., n), float64."""
        axes = np.meshgrid(*([self.wavenumbers_1d] * self.d), indexing="ij")
        return _frozen(np.stack(axes).astype(np.float64))

    @cached_property
    def k_sq(self) -> np.ndarray:
        return _frozen(np.sum(self.k**2, axis=0))

    @cached_property
    def k_sq_safe(self) -> np.ndarray:
        ksq = self.k_sq.copy()
        ksq[ksq == 0.0] = 1.0
        return _frozen(ksq)

    @cached_property
    def dealias_mask(self) -> np.ndarray:
        """Boolean mask of retained modes (k = 0 excluded: mean is pinned to 0)."""
        keep = np.all(np.abs(self.k) <= self.kmax, axis=0)
        keep[(0,) * self.d] = False
        return _frozen(keep)

    @cached_property
    def _pad_ix(self) -> tuple[np.ndarray, ...]:
        """Open-mesh index placing the n-lattice into the padded 2n-lattice."""
        pos = self.wavenumbers_1d % self.pad_n
        return np.ix_(*([pos] * self.d))

    @cached_property
    def _reflect_ix(self) -> tuple[np.ndarray, ...]:
        """Open-mesh index mapping slot of k to slot of -k on the n-lattice."""
        pos = (-self.wavenumbers_1d) % self.n
        return np.ix_(*([pos] * self.d))

    @cached_property
    def mode_positions(self) -> dict[tuple[int, ...], tuple[int, ...]]:
        """Retained wavenumber tuple -> array index (excludes k = 0)."""
        out: dict[tuple[int, ...], tuple[int, ...]] = {}
        it = np.ndindex(*self.shape)
        kk = self.k.astype(np.int64)
        for idx in it:
            if not self.dealias_mask[idx]:
                continue
            out[tuple(int(kk[j][idx]) for j in range(self.d))] = idx
        return out

    def retained_modes(self) -> list[tuple[int, ...]]:
        """All retained wavenumber tuples, lexicographically sorted."""
        return sorted(self.mode_positions)

    # ------------------------------------------------------------------
    # raw coefficient-array helpers (module-internal workhorses)
    # ------------------------------------------------------------------

    def reduce_coeffs(self, coeffs: np.ndarray) -> np.ndarray:
        """Dealias + hermitianize a raw coefficient array (returns a copy)."""
        c = np.where(self.dealias_mask, coeffs, 0.0)
        refl = np.conj(c[(slice(None),) + self._reflect_ix])
        return 0.5 * (c + refl)

    def project_coeffs(self, coeffs: np.ndarray) -> np.ndarray:
        """Per-mode Helmholtz projection c <- (I - k k^T / |k|^2) c, k=0 zeroed."""
        dot = np.sum(self.k * coeffs, axis=0)
        c = coeffs - self.k * (dot / self.k_sq_safe)
        return np.where(self.dealias_mask, c, 0.0)

    def to_physical(self, coeffs: np.ndarray) -> np.ndarray:
        """Evaluate on the padded 2n grid; returns real (d, 2n, ..., 2n)."""
        m = self.pad_n
        big = np.zeros((self.d,) + (m,) * self.d, dtype=np.complex128)
        big[(slice(None),) + self._pad_ix] = coeffs
        vals = np.fft.ifftn(big, axes=tuple(range(1, self.d + 1)))
        return np.real(vals) * float(m**self.d)

    def from_physical(self, values: np.ndarray) -> np.ndarray:
        """Retained-mode coefficients of padded-grid samples (exact, no aliasing
        for products of total degree <= 3 of retained modes)."""
        m = self.pad_n
        big = np.fft.fftn(values, axes=tuple(range(1, values.ndim))) / float(m**self.d)
        coeffs = big[(slice(None),) + self._pad_ix]
        return self.reduce_coeffs(coeffs)

    def grad_physical(self, coeffs: np.ndarray) -> np.ndarray:
        """All partials on the padded grid: out[i, j] = d u_j / d x_i."""
        m = self.pad_n
        big = np.zeros((self.d, self.d) + (m,) * self.d, dtype=np.complex128)
        grads = 1j * self.k[:, None, ...] * coeffs[None, :, ...]
        big[(slice(None), slice(None)) + self._pad_ix] = grads
        vals = np.fft.ifftn(big, axes=tuple(range(2, self.d + 2)))
        return np.real(vals) * float(m**self.d)


class FieldNorms(NamedTuple):
    l2: float
    v: float
    l4: float


@dataclass(frozen=True)
class SpectralField:
    """Immutable divergence-free, zero-mean velocity field on a Grid."""

    grid: Grid
    coeffs: np.ndarray

    def __post_init__(self) -> None:
        expected = (self.grid.d,) + self.grid.shape
        if self.coeffs.shape != expected:
            raise ValueError(f"coefficient array must have shape {expected}")
        if self.coeffs.dtype != np.complex128:
            object.__setattr__(self, "coeffs", self.coeffs.astype(np.complex128))
        self.coeffs.setflags(write=False)

    # value-type arithmetic (new immutable fields)
    def __add__(self, other: "SpectralField") -> "SpectralField":
        _check_same_grid(self, other)
        return SpectralField(self.grid, self.coeffs + other.coeffs)

    def __sub__(self, other: "SpectralField") -> "SpectralField":
        _check_same_grid(self, other)
        return SpectralField(self.grid, self.coeffs - other.coeffs)

    def __mul__(self, c: float) -> "SpectralField":
        return SpectralField(self.grid, self.coeffs * float(c))

    __rmul__ = __mul__

    def __neg__(self) -> "SpectralField":
        return SpectralField(self.grid, -self.coeffs)

    def mode(self, k: Sequence[int]) -> np.ndarray:
        """Coefficient vector of retained wavenumber k."""
        idx = self.grid.mode_positions[tuple(int(ki) for ki in k)]
        return self.coeffs[(slice(None),) + idx].copy()

    def divergence_defect(self) -> float:
        """max_k |k . c(k)| / (|k| |c(k)|), 0 for the zero field."""
        g = self.grid
        dot = np.abs(np.sum(g.k * self.coeffs, axis=0))
        mag = np.sqrt(g.k_sq) * np.sqrt(np.sum(np.abs(self.coeffs) ** 2, axis=0))
        rel = np.where(mag > 0, dot / np.where(mag > 0, mag, 1.0), 0.0)
        return float(np.max(rel))

    def hermitian_defect(self) -> float:
        g = self.grid
        refl = np.conj(self.coeffs[(slice(None),) + g._reflect_ix])
        scale = float(np.max(np.abs(self.coeffs)))
        if scale == 0.0:
            return 0.0
        return float(np.max(np.abs(self.coeffs - refl)) / scale)

    def validate(self, tol: float = 1e-12) -> None:
        """Assert the class invariants (used by tests and file ingest)."""
        g = self.grid
        if np.any(self.coeffs[:, ~g.dealias_mask] != 0):
            raise ValueError("nonzero coefficient outside the dealiased range")
        if self.hermitian_defect() > tol:
            raise ValueError("Hermitian symmetry violated")
        if self.divergence_defect() > tol:
            raise ValueError("divergence-free constraint violated")


def zero_field(grid: Grid) -> SpectralField:
    return SpectralField(grid, np.zeros((grid.d,) + grid.shape, dtype=np.complex128))


def _check_same_grid(u: SpectralField, w: SpectralField) -> None:
    if u.grid != w.grid:
        raise GridMismatchError(f"grid mismatch: {u.grid} vs {w.grid}")


def make_field(grid: Grid, mode_list: Iterable[tuple[Sequence[int], Sequence[complex]]]) -> SpectralField:
    """Build a field from (wavenumber, amplitude) pairs.

    Each entry (k, a) contributes a*exp(i k.x) + conj(a)*exp(-i k.x); the
    mirror mode is filled automatically and the result is Leray-projected, so
    every invariant holds on return.  k = 0 and out-of-range wavenumbers are
    rejected.
    """
    coeffs = np.zeros((grid.d,) + grid.shape, dtype=np.complex128)
    for k, amp in mode_list:
        kt = tuple(int(ki) for ki in k)
        if len(kt) != grid.d:
            raise ValueError(f"wavenumber {kt} has wrong dimension for d={grid.d}")
        if all(ki == 0 for ki in kt):
            raise ValueError("k = 0 is not allowed: fields have zero spatial mean")
        if any(abs(ki) > grid.kmax for ki in kt):
            raise ValueError(f"wavenumber {kt} outside dealiased range |k_i| <= {grid.kmax}")
        a = np.asarray(amp, dtype=np.complex128)
        if a.shape != (grid.d,):
            raise ValueError(f"amplitude must be a {grid.d}-vector")
        pos = grid.mode_positions[kt]
        neg = grid.mode_positions[tuple(-ki for ki in kt)]
        coeffs[(slice(None),) + pos] += a
        coeffs[(slice(None),) + neg] += np.conj(a)
    return SpectralField(grid, grid.project_coeffs(grid.reduce_coeffs(coeffs)))


def leray_project(grid: Grid, coeffs: np.ndarray) -> SpectralField:
    """Leray projection of a raw (Hermitian) coefficient array.

    Idempotent; gradients are annihilated, divergence-free input is unchanged.
    """
    return SpectralField(grid, grid.project_coeffs(grid.reduce_coeffs(coeffs)))


def inner_product(u: SpectralField, w: SpectralField) -> float:
    """L2(torus) inner product via Parseval."""
    _check_same_grid(u, w)
    return float(np.real(np.sum(u.coeffs * np.conj(w.coeffs))) * u.grid.volume)


def norms(u: SpectralField) -> FieldNorms:
    """(||u||_2, ||grad u||_2, ||u||_4); l4 by exact padded-grid quadrature."""
    g = u.grid
    sq = np.sum(np.abs(u.coeffs) ** 2, axis=0)
    l2 = math.sqrt(float(np.sum(sq)) * g.volume)
    v = math.sqrt(float(np.sum(g.k_sq * sq)) * g.volume)
    vals = g.to_physical(u.coeffs)
    mag2 = np.sum(vals**2, axis=0)
    l4 = (float(np.sum(mag2**2)) * g.quad_weight) ** 0.25
    return FieldNorms(l2=l2, v=v, l4=l4)


def random_field(
    grid: Grid,
    rng: np.random.Generator,
    *,
    l2: float = 1.0,
    decay: float = 0.35,
) -> SpectralField:
    """Seeded random divergence-free field with e^{-decay |k|} spectral envelope,
    rescaled to the requested L2 norm (zero field if l2 == 0)."""
    shape = (grid.d,) + grid.shape
    raw = rng.standard_normal(shape) + 1j * rng.standard_normal(shape)
    envelope = np.exp(-decay * np.sqrt(grid.k_sq))
    u = leray_project(grid, raw * envelope)
    amp = norms(u).l2
    if amp == 0.0 or l2 == 0.0:
        return zero_field(grid)
    return u * (l2 / amp)


@dataclass(frozen=True)
class Trajectory:
    """Uniformly time-sampled sequence of fields on [0, t_end] (nt+1 samples)."""

    grid: Grid
    t_end: float
    samples: tuple[SpectralField, ...]

    def __post_init__(self) -> None:
        if len(self.samples) < 2:
            raise ValueError("a trajectory needs nt >= 1, i.e. at least 2 samples")
        if self.t_end <= 0:
            raise ValueError("t_end must be positive")
        for s in self.samples:
            if s.grid != self.grid:
                raise GridMismatchError("all samples must share the trajectory grid")
        object.__setattr__(self, "samples", tuple(self.samples))

    @property
    def nt(self) -> int:
        return len(self.samples) - 1

    @property
    def dt(self) -> float:
        return self.t_end / self.nt

    @property
    def times(self) -> np.ndarray:
        return np.linspace(0.0, self.t_end, self.nt + 1)

    def __getitem__(self, i: int) -> SpectralField:
        return self.samples[i]

    def __add__(self, other: "Trajectory") -> "Trajectory":
        check_aligned(self, other)
        return Trajectory(self.grid, self.t_end, tuple(a + b for a, b in zip(self.samples, other.samples)))

    def __sub__(self, other: "Trajectory") -> "Trajectory":
        check_aligned(self, other)
        return Trajectory(self.grid, self.t_end, tuple(a - b for a, b in zip(self.samples, other.samples)))

    def __mul__(self, c: float) -> "Trajectory":
        return Trajectory(self.grid, self.t_end, tuple(s * c for s in self.samples))

    __rmul__ = __mul__

    @staticmethod
    def from_callable(grid: Grid, t_end: float, nt: int, fn: Callable[[float], SpectralField]) -> "Trajectory":
        ts = np.linspace(0.0, t_end, nt + 1)
        return Trajectory(grid, t_end, tuple(fn(float(t)) for t in ts))

    @staticmethod
    def constant(field: SpectralField, t_end: float, nt: int) -> "Trajectory":
        return Trajectory(field.grid, t_end, (field,) * (nt + 1))

    @staticmethod
    def zero(grid: Grid, t_end: float, nt: int) -> "Trajectory":
        return Trajectory.constant(zero_field(grid), t_end, nt)


def check_aligned(a: Trajectory, b: Trajectory) -> None:
    if a.grid != b.grid:
        raise GridMismatchError("trajectory grids differ")
    if a.nt != b.nt or abs(a.t_end - b.t_end) > 1e-14 * max(1.0, a.t_end):
        raise GridMismatchError("trajectory time axes differ")


def time_l2_inner(a: Trajectory, b: Trajectory) -> float:
    """Discrete L2(0,T;H) pairing, left-endpoint rectangle rule."""
    check_aligned(a, b)
    return a.dt * sum(inner_product(a[n], b[n]) for n in range(a.nt))


def time_l2_norm(a: Trajectory) -> float:
    return math.sqrt(max(time_l2_inner(a, a), 0.0))


def random_forcing(
    grid: Grid,
    rng: np.random.Generator,
    *,
    l2: float = 1.0,
    decay: float = 0.35,
    n_time_modes: int = 3,
    t_scale: float = 1.0,
) -> Callable[[float], SpectralField]:
    """Smooth-in-time random forcing t -> field, resolution-independent.

    Combines ``n_time_modes`` random fields with low-frequency cosine profiles;
    sample with Trajectory.from_callable at any nt to study dt refinement.
    """
    fields = [random_field(grid, rng, l2=l2, decay=decay) for _ in range(n_time_modes)]
    freqs = rng.uniform(0.5, 2.5, size=n_time_modes) * math.pi / t_scale
    phases = rng.uniform(0.0, TAU, size=n_time_modes)

    def fn(t: float) -> SpectralField:
        acc = fields[0] * math.cos(freqs[0] * t + phases[0])
        for i in range(1, n_time_modes):
            acc = acc + fields[i] * math.cos(freqs[i] * t + phases[i])
        return acc

    return fn


def random_trajectory(
    grid: Grid,
    t_end: float,
    nt: int,
    rng: np.random.Generator,
    *,
    l2: float = 1.0,
    decay: float = 0.35,
    n_time_modes: int = 3,
) -> Trajectory:
    fn = random_forcing(grid, rng, l2=l2, decay=decay, n_time_modes=n_time_modes, t_scale=t_end)
    return Trajectory.from_callable(grid, t_end, nt, fn)


# ----------------------------------------------------------------------
# persistence
# ----------------------------------------------------------------------

def _lex_order_axes(grid: Grid) -> tuple[np.ndarray, ...]:
    """Index permutation taking FFT storage order to ascending-k order."""
    order = np.argsort(grid.wavenumbers_1d, kind="stable")
    return np.ix_(*([order] * grid.d))


def write_trajectory(path, traj: Trajectory) -> None:
    """Binary trajectory file.

    Layout: magic "CBFT", u32 version=1, u32 d, u32 n, u32 nt, f64 t_end, then
    (nt+1) * d * n^d little-endian f64 (re, im) pairs in lexicographic k-order
    (k_1 ascending fastest-last, i.e. C order over the sorted wavenumber axes).
    """
    g = traj.grid
    lex = _lex_order_axes(g)
    with open(path, "wb") as fh:
        fh.write(_CBFT_MAGIC)
        fh.write(struct.pack("<IIII", _CBFT_VERSION, g.d, g.n, traj.nt))
        fh.write(struct.pack("<d", traj.t_end))
        for s in traj.samples:
            arr = s.coeffs[(slice(None),) + lex]
            flat = np.empty(arr.size * 2, dtype="<f8")
            flat[0::2] = np.real(arr).ravel()
            flat[1::2] = np.imag(arr).ravel()
            fh.write(flat.tobytes())


def read_trajectory(path) -> Trajectory:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != _CBFT_MAGIC:
            raise ValueError(f"not a CBFT file (magic {magic!r})")
        version, d, n, nt = struct.unpack("<IIII", fh.read(16))
        if version != _CBFT_VERSION:
            raise ValueError(f"unsupported CBFT version {version}")
        (t_end,) = struct.unpack("<d", fh.read(8))
        grid = Grid(d=d, n=n)
        lex = _lex_order_axes(grid)
        count = d * n**d
        samples = []
        for _ in range(nt + 1):
            flat = np.frombuffer(fh.read(count * 16), dtype="<f8")
            if flat.size != count * 2:
                raise ValueError("truncated CBFT file")
            arr = (flat[0::2] + 1j * flat[1::2]).reshape((d,) + grid.shape)
            coeffs = np.empty_like(arr)
            coeffs[(slice(None),) + lex] = arr
            field = SpectralField(grid, grid.reduce_coeffs(coeffs))
            samples.append(field)
    traj = Trajectory(grid, t_end, tuple(samples))
    return traj


def write_norm_series(path, traj: Trajectory) -> None:
    """CSV norm series: columns t, l2, v_norm, l4."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("t,l2,v_norm,l4\n")
        for t, s in zip(traj.times, traj.samples):
            nm = norms(s)
            fh.write(f"{t!r},{nm.l2!r},{nm.v!r},{nm.l4!r}\n")
