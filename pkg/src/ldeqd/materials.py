"""Band-structure parameters of III-V binaries and their ternary alloys.

The database is a plain INI document (see ``data/materials.ini`` for the
schema and units). Binaries are stored as complete records; ternaries are
stored as a pair of binaries plus per-parameter bowing coefficients.
"""

from __future__ import annotations

import configparser
import dataclasses
import hashlib
import io
import math
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from types import MappingProxyType
from typing import Mapping

PARAM_FIELDS = (
    "eg_gamma",
    "vbo",
    "delta_so",
    "me",
    "gamma1",
    "gamma2",
    "gamma3",
    "ep",
    "lattice_const",
    "temperature",
)

# Parameters that are interpolated linearly regardless of registered bowing.
_NO_BOWING = ("lattice_const", "temperature")


class MaterialError(ValueError):
    """Invalid material data or an unknown material name."""


@dataclass(frozen=True)
class MaterialParams:
    eg_gamma: float
    vbo: float
    delta_so: float
    me: float
    gamma1: float
    gamma2: float
    gamma3: float
    ep: float
    lattice_const: float
    temperature: float
    name: str = ""

    def __post_init__(self):
        for f in PARAM_FIELDS:
            v = getattr(self, f)
            if not math.isfinite(v):
                raise MaterialError(f"{self.name or 'material'}: {f} is not finite")
        checks = (
            ("eg_gamma", self.eg_gamma > 0, "must be > 0"),
            ("delta_so", self.delta_so >= 0, "must be >= 0"),
            ("me", self.me > 0, "must be > 0"),
            ("ep", self.ep >= 0, "must be >= 0"),
            ("gamma1", self.gamma1 > 2 * self.gamma2, "must exceed 2*gamma2"),
            ("lattice_const", self.lattice_const > 0, "must be > 0"),
        )
        for name, ok, msg in checks:
            if not ok:
                raise MaterialError(
                    f"{self.name or 'material'}: parameter {name!r} {msg} "
                    f"(got {getattr(self, name)!r})"
                )

    def values(self) -> dict[str, float]:
        return {f: getattr(self, f) for f in PARAM_FIELDS}


@dataclass(frozen=True)
class Ternary:
    a: str
    b: str
    bowing: Mapping[str, float] = field(default_factory=dict)


@dataclass(frozen=True)
class MaterialDB:
    """Immutable collection of binaries and ternary bowing sets."""

    binaries: Mapping[str, MaterialParams]
    ternaries: Mapping[str, Ternary]

    def __post_init__(self):
        object.__setattr__(self, "binaries", MappingProxyType(dict(self.binaries)))
        object.__setattr__(self, "ternaries", MappingProxyType(dict(self.ternaries)))
        for name, t in self.ternaries.items():
            for end in (t.a, t.b):
                if end not in self.binaries:
                    raise MaterialError(f"ternary {name!r} refers to unknown binary {end!r}")
            for key in t.bowing:
                if key not in PARAM_FIELDS or key in _NO_BOWING:
                    raise MaterialError(f"ternary {name!r}: unknown bowing parameter {key!r}")

    @property
    def bowings(self) -> dict[str, dict[str, float]]:
        return {k: dict(t.bowing) for k, t in self.ternaries.items()}

    def __eq__(self, other):
        if not isinstance(other, MaterialDB):
            return NotImplemented
        return dict(self.binaries) == dict(other.binaries) and dict(self.ternaries) == dict(
            other.ternaries
        )

    def __hash__(self):
        return hash(self.digest())

    def material(self, name: str, x: float | None = None) -> MaterialParams:
        """Look up a binary, or a ternary at composition ``x``."""
        if name in self.binaries:
            return self.binaries[name]
        if x is None:
            raise MaterialError(f"ternary {name!r} needs a composition x")
        return interpolate_ternary(self, name, x)

    def digest(self) -> str:
        return hashlib.sha256(dumps_material_db(self).encode()).hexdigest()


def interpolate_ternary(db: MaterialDB, ternary: str, x: float) -> MaterialParams:
    """Vegard's law with bowing: P(x) = x P_A + (1-x) P_B - x(1-x) C."""
    if ternary not in db.ternaries:
        raise MaterialError(f"unknown ternary {ternary!r}")
    x = float(x)
    if not 0.0 <= x <= 1.0:
        raise MaterialError(f"composition x={x} outside [0, 1]")
    t = db.ternaries[ternary]
    pa, pb = db.binaries[t.a], db.binaries[t.b]
    # exact endpoints, no floating-point residue from the bowing term
    if x == 1.0:
        return dataclasses.replace(pa, name=f"{ternary}(x=1)")
    if x == 0.0:
        return dataclasses.replace(pb, name=f"{ternary}(x=0)")
    vals = {}
    for f in PARAM_FIELDS:
        c = 0.0 if f in _NO_BOWING else t.bowing.get(f, 0.0)
        vals[f] = x * getattr(pa, f) + (1 - x) * getattr(pb, f) - x * (1 - x) * c
    return MaterialParams(**vals, name=f"{ternary}(x={x:g})")


def band_edges(p: MaterialParams) -> tuple[float, float]:
    """Return (conduction edge, valence edge) in eV on the common scale."""
    return p.vbo + p.eg_gamma, p.vbo


def _parse_float(section: str, key: str, raw: str) -> float:
    try:
        return float(raw)
    except ValueError:
        raise MaterialError(f"[{section}] field {key!r}: cannot parse {raw!r} as a number") from None


def parse_material_db(text: str, source: str = "<string>") -> MaterialDB:
    cp = configparser.ConfigParser(interpolation=None, comment_prefixes=("#", ";"))
    cp.optionxform = str
    try:
        cp.read_string(text, source=source)
    except configparser.Error as exc:
        raise MaterialError(f"{source}: {exc}") from None

    binaries: dict[str, MaterialParams] = {}
    ternaries: dict[str, Ternary] = {}
    for section in cp.sections():
        kind, _, name = section.partition(":")
        items = dict(cp.items(section))
        if kind == "binary" and name:
            missing = [f for f in PARAM_FIELDS if f not in items]
            extra = [k for k in items if k not in PARAM_FIELDS]
            if missing:
                raise MaterialError(f"{source} [{section}]: missing field(s) {', '.join(missing)}")
            if extra:
                raise MaterialError(f"{source} [{section}]: unknown field(s) {', '.join(extra)}")
            vals = {k: _parse_float(section, k, items[k]) for k in PARAM_FIELDS}
            try:
                binaries[name] = MaterialParams(**vals, name=name)
            except MaterialError as exc:
                raise MaterialError(f"{source} [{section}]: {exc}") from None
        elif kind == "ternary" and name:
            try:
                a, b = items.pop("a"), items.pop("b")
            except KeyError:
                raise MaterialError(f"{source} [{section}]: keys 'a' and 'b' are required") from None
            bow = {k: _parse_float(section, k, v) for k, v in items.items()}
            ternaries[name] = Ternary(a, b, MappingProxyType(bow))
        else:
            raise MaterialError(f"{source}: unrecognized section [{section}]")

    db = MaterialDB(binaries, ternaries)
    # invariants must hold across the full composition range
    for name in ternaries:
        for i in range(101):
            try:
                interpolate_ternary(db, name, i / 100)
            except MaterialError as exc:
                raise MaterialError(f"{source} [ternary:{name}] at x={i / 100}: {exc}") from None
    return db


def load_material_db(path: str | Path | None = None) -> MaterialDB:
    """Load and validate a database file; ``None`` loads the bundled default."""
    if path is None:
        text = resources.files("ldeqd.data").joinpath("materials.ini").read_text()
        return parse_material_db(text, source="materials.ini")
    path = Path(path)
    return parse_material_db(path.read_text(), source=str(path))


def dumps_material_db(db: MaterialDB) -> str:
    cp = configparser.ConfigParser(interpolation=None)
    cp.optionxform = str
    for name, p in db.binaries.items():
        cp[f"binary:{name}"] = {f: repr(getattr(p, f)) for f in PARAM_FIELDS}
    for name, t in db.ternaries.items():
        sec = {"a": t.a, "b": t.b}
        sec.update({k: repr(v) for k, v in t.bowing.items()})
        cp[f"ternary:{name}"] = sec
    buf = io.StringIO()
    cp.write(buf)
    return buf.getvalue()


def save_material_db(db: MaterialDB, path: str | Path) -> None:
    Path(path).write_text(dumps_material_db(db))
