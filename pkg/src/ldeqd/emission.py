"""Transition energies, emission wavelengths and envelope overlaps."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .eigensolver import KRAMERS_THRESHOLD, EigenSolution, kramers_groups

# hc in eV nm
HC_EV_NM = 1239.842
OVERLAP_MODES = ("amplitude", "density")
REPORT_FORMAT = "ldeqd-transition/1"


class EmissionError(ValueError):
    pass


def energy_to_wavelength(energy):
    """Photon energy (eV) to vacuum wavelength (nm)."""
    e = np.asarray(energy, dtype=float)
    if np.any(~(e > 0)):
        raise EmissionError(f"photon energy must be positive, got {energy}")
    out = HC_EV_NM / e
    return float(out) if out.ndim == 0 else out


def wavelength_to_energy(wavelength):
    lam = np.asarray(wavelength, dtype=float)
    if np.any(~(lam > 0)):
        raise EmissionError(f"wavelength must be positive, got {wavelength}")
    out = HC_EV_NM / lam
    return float(out) if out.ndim == 0 else out


def overlap(e_env, h_env, voxel_volume: float = 1.0, mode: str = "amplitude") -> float:
    """Envelope overlap of two normalized states on the same grid.

    ``amplitude``: |sum psi_e^* psi_h dV|^2, spinor components summed.
    ``density``:   (sum sqrt(rho_e rho_h) dV)^2 with rho the component-summed
                   probability density. Electron and hole states of one
                   multiband Hamiltonian are orthogonal, so only this form is
                   informative for them.
    Arrays have shape grid (+ components); 1D vectors are taken as is.
    """
    e = np.asarray(e_env)
    h = np.asarray(h_env)
    if e.shape != h.shape:
        raise EmissionError(f"envelopes live on different grids: {e.shape} vs {h.shape}")
    if mode == "amplitude":
        return float(abs(np.vdot(e, h) * voxel_volume) ** 2)
    if mode == "density":
        if e.ndim > 1:
            re = np.sum(np.abs(e) ** 2, axis=-1)
            rh = np.sum(np.abs(h) ** 2, axis=-1)
        else:
            re, rh = np.abs(e) ** 2, np.abs(h) ** 2
        return float((np.sum(np.sqrt(re * rh)) * voxel_volume) ** 2)
    raise EmissionError(f"overlap mode must be one of {OVERLAP_MODES}")


def ground_state(sol: EigenSolution, band: str, threshold: float = KRAMERS_THRESHOLD) -> tuple[int, int]:
    """Index of the ground state and its degeneracy after Kramers collapsing.

    Electrons: the level closest to the solver shift. Holes: the highest level.
    """
    groups = kramers_groups(sol.energies, threshold)
    if band == "electron":
        best = min(groups, key=lambda g: abs(sol.energies[g[0]] - sol.shift))
    elif band == "hole":
        best = groups[-1]
    else:
        raise EmissionError(f"band must be 'electron' or 'hole', got {band!r}")
    return best[0], len(best)


def digest(obj) -> str:
    """sha256 of a JSON-serializable object (sorted keys)."""
    return hashlib.sha256(json.dumps(obj, sort_keys=True, default=str).encode()).hexdigest()


@dataclass
class TransitionReport:
    e_energy: float
    h_energy: float
    transition_energy: float
    wavelength: float
    overlap: float
    overlap_mode: str
    e_label: str = "electron"
    h_label: str = "hole"
    e_degeneracy: int = 1
    h_degeneracy: int = 1
    excitonic_offset: float = 0.0
    reference_energy: float | None = None
    deviation: float | None = None
    provenance: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["format"] = REPORT_FORMAT
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "TransitionReport":
        d = json.loads(text)
        if d.pop("format", None) != REPORT_FORMAT:
            raise EmissionError("not a transition report")
        return cls(**d)

    def summary(self) -> str:
        s = (
            f"E_e={self.e_energy:.4f} eV  E_h={self.h_energy:.4f} eV  "
            f"E_X={self.transition_energy:.4f} eV  lambda={self.wavelength:.1f} nm  "
            f"overlap={self.overlap:.3f} ({self.overlap_mode})"
        )
        if self.deviation is not None:
            s += f"  dE_ref={self.deviation * 1e3:+.1f} meV"
        return s


def transition_energy(
    e_sol: EigenSolution,
    h_sol: EigenSolution,
    excitonic_offset: float = 0.0,
    reference_energy: float | None = None,
    overlap_mode: str | None = None,
    provenance: dict | None = None,
) -> TransitionReport:
    """Ground-state electron to ground-state hole transition.

    ``excitonic_offset`` (eV) is subtracted from the single-particle gap;
    it defaults to 0 so the bare value is reported unless stated otherwise.
    """
    for name, sol in (("electron", e_sol), ("hole", h_sol)):
        if not sol.converged:
            raise EmissionError(f"{name} solution is not converged")
    if tuple(e_sol.dims) != tuple(h_sol.dims) or e_sol.n_components != h_sol.n_components:
        raise EmissionError("electron and hole solutions are on different grids")
    ie, ge = ground_state(e_sol, "electron")
    ih, gh = ground_state(h_sol, "hole")
    ee, eh = float(e_sol.energies[ie]), float(h_sol.energies[ih])
    if ee <= eh:
        raise EmissionError(
            f"electron ground state ({ee:.4f} eV) is not above the hole ground state ({eh:.4f} eV); "
            "check the solver shifts"
        )
    et = ee - eh - excitonic_offset
    if et <= 0:
        raise EmissionError("excitonic offset exceeds the single-particle gap")
    if overlap_mode is None:
        overlap_mode = "density" if e_sol.n_components > 1 else "amplitude"
    ov = overlap(e_sol.envelope(ie), h_sol.envelope(ih), e_sol.voxel_volume, overlap_mode)
    return TransitionReport(
        e_energy=ee,
        h_energy=eh,
        transition_energy=et,
        wavelength=energy_to_wavelength(et),
        overlap=ov,
        overlap_mode=overlap_mode,
        e_degeneracy=ge,
        h_degeneracy=gh,
        excitonic_offset=excitonic_offset,
        reference_energy=reference_energy,
        deviation=None if reference_energy is None else et - reference_energy,
        provenance=dict(provenance or {}),
    )
