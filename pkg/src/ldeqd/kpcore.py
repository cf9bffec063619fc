"""Finite-difference k.p Hamiltonians on a :class:`CompositionGrid`.

Both the single-band (BenDaniel-Duke) and the 8-band Kane operators are
written as a bulk quadratic form in k,

    H(k) = sum_f f H0_f + sum_a k_a B_a + sum_ab k_a M_ab k_b,

whose coefficient matrices are products of a material field (Ec, P, the
Luttinger combinations, ...) and a constant matrix in band space. Each
term is discretized into a real scalar stencil operator S on the grid and
the Hamiltonian is ``sum kron(S, C)``. The same term list yields the exact
lattice symbol of the discrete operator for a uniform material, which the
eigensolver uses for Fourier preconditioning and the tests use for the
bulk-consistency checks.

Stencils:
  * ``k_a f k_a``   compact 3-point flux form, f averaged on links
  * ``k_a f k_b``   central differences on both axes (a != b)
  * ``k_a`` terms   Hermitian forward/backward pair with f on links; the
                    one-sided pair keeps the Kane coupling finite at the
                    zone boundary and so avoids fermion doubling.

Energies are in eV, lengths in nm. The 8-band basis is
``(S, X, Y, Z) x (up, down)`` with index ``4 * spin + orbital``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import scipy.constants as const
import scipy.sparse as sp

from .geometry import CompositionGrid
from .materials import MaterialDB, MaterialError, MaterialParams

# hbar^2 / (2 m0) in eV nm^2
HB = const.hbar**2 / (2 * const.m_e) / const.e * 1e18

ORDERINGS = ("symmetrized", "burt-foreman")
BOUNDARIES = ("dirichlet", "periodic")
SPURIOUS = ("none", "ep-rescale")
BANDS = ("electron", "heavy-hole")
ORIENTATIONS = ("001", "111")


class AssemblyError(RuntimeError):
    pass


@dataclass(frozen=True)
class AssemblyOptions:
    ordering: str = "symmetrized"
    boundary: str = "dirichlet"
    spurious: str = "ep-rescale"
    band: str = "electron"
    orientation: str = "001"
    # remote-band CB coefficient imposed by the Ep rescaling (units of hbar^2/2m0)
    ac_target: float = 1.0

    def __post_init__(self):
        for name, allowed in (
            ("ordering", ORDERINGS),
            ("boundary", BOUNDARIES),
            ("spurious", SPURIOUS),
            ("band", BANDS),
            ("orientation", ORIENTATIONS),
        ):
            if getattr(self, name) not in allowed:
                raise ValueError(f"{name} must be one of {allowed}, got {getattr(self, name)!r}")
        if self.ac_target < 0:
            raise ValueError("ac_target must be non-negative")


def rotation(orientation: str) -> np.ndarray:
    """Columns are the grid axes in cubic crystal coordinates."""
    if orientation == "001":
        return np.eye(3)
    if orientation == "111":
        ex = np.array([1.0, -1.0, 0.0]) / math.sqrt(2)
        ey = np.array([1.0, 1.0, -2.0]) / math.sqrt(6)
        ez = np.array([1.0, 1.0, 1.0]) / math.sqrt(3)
        return np.column_stack([ex, ey, ez])
    raise ValueError(f"unknown orientation {orientation!r}")


# --------------------------------------------------------------------------
# material fields


def kane_fields(p: MaterialParams, opts: AssemblyOptions = AssemblyOptions()) -> dict[str, float]:
    """Field values entering the 8-band operator for one material."""
    eg, d, me = p.eg_gamma, p.delta_so, p.me
    kane = (eg + 2 * d / 3) / (eg * (eg + d))
    ep = p.ep
    ac = 1 / me - ep * kane
    if opts.spurious == "ep-rescale" and ac < opts.ac_target:
        ep = (1 / me - opts.ac_target) / kane
        ac = opts.ac_target
        if ep < 0:
            raise AssemblyError(f"{p.name}: Ep rescaling gives negative Ep; lower ac_target")
    g1 = p.gamma1 - ep / (3 * eg)
    g2 = p.gamma2 - ep / (6 * eg)
    g3 = p.gamma3 - ep / (6 * eg)
    L = -(g1 + 4 * g2) * HB
    M = -(g1 - 2 * g2) * HB
    N = -6 * g3 * HB
    # Burt-Foreman split of N: N- collects the Gamma_25 remote bands only
    n_minus = M - HB
    return {
        "ec": p.vbo + eg,
        "evd": p.vbo - d / 3,
        "so3": d / 3,
        "p": math.sqrt(max(ep, 0.0) * HB),
        "ac": ac * HB,
        "L": L,
        "M": M,
        "N": N,
        "Np": N - n_minus,
        "Nm": n_minus,
        "ep_used": ep,
    }


def single_band_fields(p: MaterialParams, opts: AssemblyOptions = AssemblyOptions()) -> dict[str, float]:
    if opts.band == "electron":
        k = HB / p.me
        return {"edge": p.vbo + p.eg_gamma, "iz": k, "ixy": k}
    # axial heavy-hole approximation about the growth axis
    if opts.orientation == "001":
        g_par, g_perp = p.gamma2, 0.5 * (p.gamma2 + p.gamma3)
    else:
        g_par, g_perp = p.gamma3, (p.gamma2 + 2 * p.gamma3) / 3
    return {"edge": p.vbo, "iz": -HB * (p.gamma1 - 2 * g_par), "ixy": -HB * (p.gamma1 + g_perp)}


# --------------------------------------------------------------------------
# band-space coefficient matrices


def _E(i, j, n=4):
    m = np.zeros((n, n), dtype=complex)
    m[i, j] = 1.0
    return m


def _spin(m4):
    return np.kron(np.eye(2), m4)


_SIG = (
    np.array([[0, 1], [1, 0]], dtype=complex),
    np.array([[0, -1j], [1j, 0]]),
    np.array([[1, 0], [0, -1]], dtype=complex),
)


def _l_dot_sigma():
    out = np.zeros((8, 8), dtype=complex)
    for k in range(3):
        lk = np.zeros((4, 4), dtype=complex)
        for i in range(3):
            for j in range(3):
                eps = np.linalg.det(np.eye(3)[[k, i, j]]) if len({k, i, j}) == 3 else 0.0
                lk[1 + i, 1 + j] = -1j * eps
        out += np.kron(_SIG[k], lk)
    return out


@dataclass(frozen=True)
class Term:
    """One stencil term: kind in {onsite, d2, mixed, fwd, fwdT}."""

    kind: str
    a: int
    b: int
    field: str
    C: np.ndarray = field(compare=False)


def _kane_terms(opts: AssemblyOptions) -> list[Term]:
    R = rotation(opts.orientation)
    terms = [
        Term("onsite", -1, -1, "ec", _spin(_E(0, 0))),
        Term("onsite", -1, -1, "evd", _spin(sum(_E(i, i) for i in (1, 2, 3)))),
        Term("onsite", -1, -1, "so3", _l_dot_sigma()),
    ]
    # first order: H_{S,X_i} = i P k_i, carried as fwd (x) W + fwd^T (x) W^dagger
    W = [_spin(_E(0, 1 + i)) for i in range(3)]
    for a in range(3):
        Wa = sum(R[i, a] * W[i] for i in range(3))
        terms.append(Term("fwd", a, a, "p", Wa))
        terms.append(Term("fwdT", a, a, "p", Wa.conj().T))

    # second order, cubic frame: M[field][i][j] multiplies k_i f k_j
    def zero():
        return [[np.zeros((8, 8), dtype=complex) for _ in range(3)] for _ in range(3)]

    cub = {"ac": zero(), "L": zero(), "M": zero()}
    for i in range(3):
        cub["ac"][i][i] = _spin(_E(0, 0))
        cub["L"][i][i] = _spin(_E(1 + i, 1 + i))
        cub["M"][i][i] = _spin(sum(_E(1 + a, 1 + a) for a in range(3) if a != i))
    if opts.ordering == "symmetrized":
        cub["N"] = zero()
        for i in range(3):
            for j in range(3):
                if i != j:
                    cub["N"][i][j] = _spin(_E(1 + i, 1 + j))
    else:
        cub["Np"], cub["Nm"] = zero(), zero()
        for i in range(3):
            for j in range(3):
                if i != j:
                    cub["Np"][i][j] = _spin(_E(1 + i, 1 + j))
                    cub["Nm"][i][j] = _spin(_E(1 + j, 1 + i))

    for fname, Mc in cub.items():
        rot = zero()
        for a in range(3):
            for b in range(3):
                rot[a][b] = sum(R[i, a] * R[j, b] * Mc[i][j] for i in range(3) for j in range(3))
        if opts.ordering == "symmetrized":
            for a in range(3):
                for b in range(a + 1, 3):
                    s = 0.5 * (rot[a][b] + rot[b][a])
                    rot[a][b] = rot[b][a] = s
        for a in range(3):
            for b in range(3):
                C = rot[a][b]
                C = np.where(np.abs(C) < 1e-14, 0, C)
                if np.any(C):
                    terms.append(Term("d2" if a == b else "mixed", a, b, fname, C))
    return terms


def _single_band_terms(opts: AssemblyOptions) -> list[Term]:
    one = np.ones((1, 1), dtype=complex)
    return [
        Term("onsite", -1, -1, "edge", one),
        Term("d2", 0, 0, "ixy", one),
        Term("d2", 1, 1, "ixy", one),
        Term("d2", 2, 2, "iz", one),
    ]


# --------------------------------------------------------------------------
# bulk matrices


def bulk_hamiltonian(fields: dict[str, float], terms: list[Term], k) -> np.ndarray:
    """Continuum bulk matrix H(k) for a uniform material, k in nm^-1 (grid frame)."""
    k = np.asarray(k, dtype=float)
    n = terms[0].C.shape[0]
    H = np.zeros((n, n), dtype=complex)
    for t in terms:
        f = fields[t.field]
        if t.kind == "onsite":
            H += f * t.C
        elif t.kind == "fwd":
            H += 1j * k[t.a] * f * t.C
        elif t.kind == "fwdT":
            H += -1j * k[t.a] * f * t.C
        else:
            H += k[t.a] * k[t.b] * f * t.C
    return H


def bulk_dispersion(p: MaterialParams, k, opts: AssemblyOptions = AssemblyOptions()) -> np.ndarray:
    """Eigenvalues (ascending, eV) of the 8x8 bulk Kane matrix at wavevector k.

    ``k`` (nm^-1) is given in the grid frame selected by ``opts.orientation``.
    """
    H = bulk_hamiltonian(kane_fields(p, opts), _kane_terms(opts), k)
    return np.linalg.eigvalsh(H)


def lattice_symbol(fields: dict[str, float], terms, spacing, k, active=(True, True, True)) -> np.ndarray:
    """Exact symbol of the discrete operator for a uniform, periodic material.

    ``k`` has shape (..., 3); returns (..., n, n).
    """
    k = np.asarray(k, dtype=float)
    h = np.asarray(spacing, dtype=float)
    n = terms[0].C.shape[0]
    out = np.zeros(k.shape[:-1] + (n, n), dtype=complex)
    kh = k * h
    for t in terms:
        if t.kind != "onsite" and not (active[t.a] and active[t.b]):
            continue
        f = fields[t.field]
        if t.kind == "onsite":
            s = np.ones(k.shape[:-1])
        elif t.kind == "d2":
            s = (2 - 2 * np.cos(kh[..., t.a])) / h[t.a] ** 2
        elif t.kind == "mixed":
            s = np.sin(kh[..., t.a]) * np.sin(kh[..., t.b]) / (h[t.a] * h[t.b])
        elif t.kind == "fwd":
            s = (np.exp(1j * kh[..., t.a]) - 1) / h[t.a]
        else:
            s = (np.exp(-1j * kh[..., t.a]) - 1) / h[t.a]
        out += (f * s)[..., None, None] * t.C
    return out


# --------------------------------------------------------------------------
# grid stencils


def _diff1d(n, h, periodic):
    """Link differences (links x nodes): link l joins nodes l-1 and l."""
    if periodic:
        rows = np.concatenate([np.arange(n), np.arange(n)])
        cols = np.concatenate([np.arange(n), (np.arange(n) - 1) % n])
        vals = np.concatenate([np.ones(n), -np.ones(n)]) / h
        return sp.csr_matrix((vals, (rows, cols)), shape=(n, n))
    D = sp.diags([np.ones(n), -np.ones(n)], [0, -1], shape=(n + 1, n)) / h
    return D.tocsr()


def _central1d(n, h, periodic):
    if periodic:
        rows = np.concatenate([np.arange(n), np.arange(n)])
        cols = np.concatenate([(np.arange(n) + 1) % n, (np.arange(n) - 1) % n])
        vals = np.concatenate([np.ones(n), -np.ones(n)]) / (2 * h)
        # n == 2 folds both neighbours onto one node
        return sp.csr_matrix((vals, (rows, cols)), shape=(n, n))
    return sp.diags([np.ones(n - 1), -np.ones(n - 1)], [1, -1], shape=(n, n)).tocsr() / (2 * h)


def _forward1d(n, h, periodic):
    if periodic:
        rows = np.concatenate([np.arange(n), np.arange(n)])
        cols = np.concatenate([(np.arange(n) + 1) % n, np.arange(n)])
        vals = np.concatenate([np.ones(n), -np.ones(n)]) / h
        return sp.csr_matrix((vals, (rows, cols)), shape=(n, n))
    return sp.diags([np.ones(n - 1), -np.ones(n)], [1, 0], shape=(n, n)).tocsr() / h


def _embed(op1d, axis, dims):
    mats = [sp.identity(d, format="csr") for d in dims]
    mats[axis] = op1d
    out = mats[0]
    for m in mats[1:]:
        out = sp.kron(out, m, format="csr")
    return out


def _link_field(f, axis, periodic):
    """Field averaged onto links along ``axis`` (same layout as _diff1d)."""
    if periodic:
        return 0.5 * (f + np.roll(f, 1, axis=axis))
    first = np.take(f, [0], axis=axis)
    last = np.take(f, [-1], axis=axis)
    fp = np.concatenate([first, f, last], axis=axis)
    n = fp.shape[axis]
    return 0.5 * (np.take(fp, range(n - 1), axis=axis) + np.take(fp, range(1, n), axis=axis))


def _fwd_link_field(f, axis, periodic):
    """Field on the link between node n and n+1 (last node: its own value)."""
    nxt = np.roll(f, -1, axis=axis)
    if not periodic:
        idx = [slice(None)] * f.ndim
        idx[axis] = -1
        nxt[tuple(idx)] = f[tuple(idx)]
    return 0.5 * (f + nxt)


def scalar_operator(kind, a, b, f, dims, spacing, periodic=False) -> sp.csr_matrix:
    """Real grid operator for one term with field array ``f`` (shape dims)."""
    if kind == "onsite":
        return sp.diags(f.ravel()).tocsr()
    if kind == "d2":
        D = _embed(_diff1d(dims[a], spacing[a], periodic), a, dims)
        fl = _link_field(f, a, periodic).ravel()
        return (D.T @ sp.diags(fl) @ D).tocsr()
    if kind == "mixed":
        Da = _embed(_central1d(dims[a], spacing[a], periodic), a, dims)
        Db = _embed(_central1d(dims[b], spacing[b], periodic), b, dims)
        return (Da.T @ sp.diags(f.ravel()) @ Db).tocsr()
    if kind in ("fwd", "fwdT"):
        F = _embed(_forward1d(dims[a], spacing[a], periodic), a, dims)
        G = sp.diags(_fwd_link_field(f, a, periodic).ravel()) @ F
        return (G if kind == "fwd" else G.T).tocsr()
    raise ValueError(kind)


# --------------------------------------------------------------------------
# assembled operator


@dataclass
class SparseOperator:
    """Discretized Hamiltonian plus the metadata needed to interpret it.

    Row index = node * n_components + component, nodes in C order of
    ``dims``. ``materials`` lists the field values of each distinct
    material and ``material_index`` maps voxels to it.
    """

    matrix: sp.csr_matrix
    n_components: int
    dims: tuple[int, int, int]
    spacing: tuple[float, float, float]
    terms: list[Term]
    materials: list[dict]
    material_index: np.ndarray
    options: AssemblyOptions
    material_names: list[str] = field(default_factory=list)

    @property
    def shape(self):
        return self.matrix.shape

    @property
    def dimension(self) -> int:
        return self.matrix.shape[0]

    @property
    def n_nodes(self) -> int:
        return int(np.prod(self.dims))

    @property
    def active_axes(self):
        return tuple(d > 1 for d in self.dims)

    @property
    def voxel_volume(self) -> float:
        return float(np.prod([h for h, act in zip(self.spacing, self.active_axes) if act] or [1.0]))

    def field(self, name: str) -> np.ndarray:
        vals = np.array([m[name] for m in self.materials])
        return vals[self.material_index]

    def band_edges(self) -> tuple[np.ndarray, np.ndarray]:
        """Per-voxel (Ec, Ev) for 8-band operators, or the single-band edge twice."""
        if self.n_components == 8:
            return self.field("ec"), self.field("evd") + self.field("so3")
        e = self.field("edge")
        return e, e

    def symbol(self, material: int, k) -> np.ndarray:
        return lattice_symbol(self.materials[material], self.terms, self.spacing, k, self.active_axes)

    def hermitian_defect(self, n_chunks: int = 8) -> float:
        """max |H - H^dagger| over all entries, computed in row blocks."""
        H = self.matrix
        n = H.shape[0]
        worst = 0.0
        edges = np.linspace(0, n, n_chunks + 1).astype(int)
        for r0, r1 in zip(edges[:-1], edges[1:]):
            if r1 == r0:
                continue
            D = H[r0:r1, :] - H[:, r0:r1].conj().T
            if D.nnz:
                worst = max(worst, float(np.abs(D.data).max()))
        return worst

    def export_coo(self, path) -> None:
        """Coordinate-list text: header then ``row col re im`` lines."""
        coo = self.matrix.tocoo()
        with open(path, "w") as fh:
            fh.write("# ldeqd operator v1\n")
            fh.write(f"# dims: {' '.join(map(str, self.dims))}\n")
            fh.write(f"# spacing_nm: {' '.join(repr(s) for s in self.spacing)}\n")
            fh.write(f"# components: {self.n_components}\n")
            fh.write(f"# shape: {coo.shape[0]} {coo.shape[1]}\n")
            fh.write(f"# nnz: {coo.nnz}\n")
            order = np.lexsort((coo.col, coo.row))
            np.savetxt(
                fh,
                np.column_stack([coo.row[order], coo.col[order], coo.data.real[order], coo.data.imag[order]]),
                fmt=["%d", "%d", "%.17g", "%.17g"],
            )


def read_coo(path) -> sp.csr_matrix:
    shape = None
    with open(path) as fh:
        for line in fh:
            if not line.startswith("#"):
                break
            if line.startswith("# shape:"):
                shape = tuple(int(t) for t in line.split(":")[1].split())
    data = np.loadtxt(path, comments="#", ndmin=2)
    return sp.csr_matrix(
        (data[:, 2] + 1j * data[:, 3], (data[:, 0].astype(int), data[:, 1].astype(int))), shape=shape
    )


def _material_fields(grid: CompositionGrid, db: MaterialDB, fn, opts):
    keys, index = grid.materials()
    mats, names = [], []
    for tern, x in keys:
        try:
            p = db.material(tern, x)
        except MaterialError as exc:
            raise AssemblyError(f"voxel material {tern} (x={x}) unavailable: {exc}") from None
        mats.append(fn(p, opts))
        names.append(p.name)
    return mats, index, names


def _block_diag(fields_and_mats, nc) -> sp.csr_matrix:
    """Block diagonal matrix with blocks sum_i f_i[p] C_i at points p."""
    pattern = np.zeros((nc, nc), dtype=bool)
    for _, C in fields_and_mats:
        pattern |= C != 0
    r, c = np.nonzero(pattern)
    P = fields_and_mats[0][0].size
    data = np.zeros((P, r.size), dtype=complex)
    for f, C in fields_and_mats:
        data += f.ravel()[:, None] * C[r, c][None, :]
    base = (np.arange(P, dtype=np.int64) * nc)[:, None]
    rows = (base + r[None, :]).ravel()
    cols = (base + c[None, :]).ravel()
    return sp.csr_matrix((data.ravel(), (rows, cols)), shape=(P * nc, P * nc))


def _group_operator(kind, a, b, fields, dims, spacing, periodic, nc):
    """sum over one stencil pattern: (L^T x I) . blockdiag(f C) . (R x I)."""
    I = sp.identity(nc, format="csr")

    def lift(op1d, axis):
        return sp.kron(_embed(op1d, axis, dims), I, format="csr")

    if kind == "onsite":
        return _block_diag(fields, nc)
    if kind == "d2":
        D = lift(_diff1d(dims[a], spacing[a], periodic), a)
        B = _block_diag([(_link_field(f, a, periodic), C) for f, C in fields], nc)
        return (D.T @ B @ D).tocsr()
    if kind == "mixed":
        Da = lift(_central1d(dims[a], spacing[a], periodic), a)
        Db = lift(_central1d(dims[b], spacing[b], periodic), b)
        return (Da.T @ _block_diag(fields, nc) @ Db).tocsr()
    F = lift(_forward1d(dims[a], spacing[a], periodic), a)
    B = _block_diag([(_fwd_link_field(f, a, periodic), C) for f, C in fields], nc)
    return (B @ F).tocsr() if kind == "fwd" else (F.T @ B).tocsr()


def _assemble(grid, db, opts, terms, fn, nc) -> SparseOperator:
    mats, index, names = _material_fields(grid, db, fn, opts)
    dims = grid.dims
    periodic = opts.boundary == "periodic"
    active = tuple(d > 1 for d in dims)
    groups: dict = {}
    for t in terms:
        if t.kind != "onsite" and not (active[t.a] and active[t.b]):
            continue
        fvals = np.array([m[t.field] for m in mats])
        if not np.any(fvals):
            continue
        groups.setdefault((t.kind, t.a, t.b), []).append((fvals[index], t.C))
    N = grid.n_nodes
    H = sp.csr_matrix((N * nc, N * nc), dtype=complex)
    for (kind, a, b), fields in groups.items():
        H = H + _group_operator(kind, a, b, fields, dims, grid.spacing, periodic, nc)
    H.sum_duplicates()
    H.eliminate_zeros()
    H.sort_indices()
    return SparseOperator(H, nc, dims, grid.spacing, terms, mats, index, opts, names)


def assemble_single_band(
    grid: CompositionGrid, db: MaterialDB, band: str | None = None, opts: AssemblyOptions | None = None
) -> SparseOperator:
    """BenDaniel-Duke operator -(hbar^2/2) div (1/m) grad + E_edge.

    For ``band='heavy-hole'`` the kinetic term is negative (electron energy
    scale) with axial heavy-hole masses along and across the growth axis.
    """
    opts = opts or AssemblyOptions()
    if band is not None and band != opts.band:
        opts = AssemblyOptions(**{**opts.__dict__, "band": band})
    return _assemble(grid, db, opts, _single_band_terms(opts), single_band_fields, 1)


def assemble_kp8(grid: CompositionGrid, db: MaterialDB, opts: AssemblyOptions | None = None) -> SparseOperator:
    """8-band zinc-blende Kane Hamiltonian with position-dependent parameters."""
    opts = opts or AssemblyOptions()
    op = _assemble(grid, db, opts, _kane_terms(opts), kane_fields, 8)
    defect = op.hermitian_defect()
    if defect > 1e-12:
        raise AssemblyError(f"assembled operator is not Hermitian (max defect {defect:.3g} eV)")
    return op


def zone_center_block(op: SparseOperator) -> np.ndarray:
    """Restriction of a periodic operator to spatially constant envelopes."""
    N, nc = op.n_nodes, op.n_components
    V = sp.kron(np.ones((N, 1)) / math.sqrt(N), sp.identity(nc), format="csr")
    return (V.conj().T @ op.matrix @ V).toarray()
