"""Synthetic DSC perfusion cases from a gamma-variate AIF and mono-exponential residues."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .data import CaseRecord, DataError, MapKind, PerfusionMap, PerfusionSequence
from .osvd import DEFAULT_OSCILLATION_LIMIT, concentration, oracle_target_maps

DESK_SHAPE = (40, 4, 64, 64)
FULL_SHAPE = (80, 24, 256, 256)


@dataclass(frozen=True)
class AIFParams:
    t0: float = 6.0
    alpha: float = 3.0
    beta: float = 1.5
    amplitude: float = 0.2635

    @classmethod
    def with_peak(cls, peak, t0=6.0, alpha=3.0, beta=1.5):
        """Choose the amplitude so the curve maximum equals ``peak``."""
        return cls(t0, alpha, beta, peak / ((alpha * beta) ** alpha * math.exp(-alpha)))


@dataclass(frozen=True)
class Tissue:
    delay: float = 0.0
    mtt: float = 4.0
    cbf_scale: float = 0.05


@dataclass(frozen=True)
class Lesion:
    center: tuple
    radius: float
    tissue: Tissue


@dataclass(frozen=True)
class PhantomSpec:
    shape: tuple = DESK_SHAPE
    tr: float = 1.5
    aif_params: AIFParams = field(default_factory=lambda: AIFParams.with_peak(1.2))
    lesion_regions: tuple = ()
    background: Tissue = Tissue()
    noise_sigma: float = 2.0
    te_k: float = 1.0
    s0: float = 100.0
    vessel_patch_center: tuple | None = None
    seed: int = 0
    # geometry knobs; the slice axis is coarser than in-plane
    slice_spacing: float = 4.0
    brain_axes: tuple = (0.44, 0.40)
    vessel_radius: float | None = None
    # unperfused fluid spaces, semi-axes as fractions of (rows, cols); None for none
    csf_axes: tuple | None = (0.10, 0.06)

    def __post_init__(self):
        if len(self.shape) != 4 or min(self.shape) < 1:
            raise DataError(f"shape must be (frames, slices, rows, cols), got {self.shape}")
        a = self.aif_params
        if self.tr <= 0 or a.alpha <= 0 or a.beta <= 0:
            raise DataError("tr, alpha and beta must be positive")
        if self.noise_sigma < 0:
            raise DataError("noise_sigma must be >= 0")
        for tissue in [self.background] + [les.tissue for les in self.lesion_regions]:
            if tissue.mtt <= 0:
                raise DataError("mtt must be positive")
        spatial = self.shape[1:]
        for les in self.lesion_regions:
            if any(not (0 <= c < n) for c, n in zip(les.center, spatial)) or les.radius <= 0:
                raise DataError(f"lesion {les} lies outside the volume")
        vc = self.vessel_center
        if any(not (0 <= c < n) for c, n in zip(vc, spatial)):
            raise DataError(f"vessel center {vc} outside volume {spatial}")

    @property
    def vessel_center(self) -> tuple:
        if self.vessel_patch_center is not None:
            return tuple(int(c) for c in self.vessel_patch_center)
        return default_vessel_center(self.shape[1:])

    @property
    def vessel_r(self) -> float:
        return self.vessel_radius if self.vessel_radius is not None else max(1.0, 3.0 * self.shape[2] / 64)


def default_vessel_center(spatial_shape) -> tuple:
    s, r, c = spatial_shape
    return (s // 2, int(round(0.7 * r)), c // 2)


@dataclass(frozen=True, eq=False)
class GroundTruth:
    tmax: PerfusionMap
    ttp: PerfusionMap
    rbf: PerfusionMap
    delay_field: np.ndarray
    brain_mask: np.ndarray
    vessel_mask: np.ndarray
    csf_mask: np.ndarray | None = None

    @property
    def tissue_mask(self) -> np.ndarray:
        """Perfused tissue: brain without vessel and fluid voxels."""
        m = self.brain_mask & ~self.vessel_mask
        return m & ~self.csf_mask if self.csf_mask is not None else m

    def maps(self) -> dict:
        return {MapKind.TMAX: self.tmax, MapKind.TTP: self.ttp, MapKind.RBF: self.rbf}


def gamma_variate_aif(t, params: AIFParams):
    """A (t - t0)^alpha exp(-(t - t0)/beta) for t > t0, else 0."""
    t = np.asarray(t, dtype=np.float64)
    dt = t - params.t0
    pos = dt > 0
    safe = np.where(pos, dt, 1.0)
    val = params.amplitude * safe**params.alpha * np.exp(-safe / params.beta)
    out = np.where(pos, val, 0.0)
    return out if out.ndim else float(out)


def tissue_curve(times, aif: AIFParams, tissue: Tissue, oversample: int = 20):
    """cbf * (AIF conv exp(-t/mtt)) evaluated at ``times - delay`` (zero before 0)."""
    times = np.asarray(times, dtype=np.float64)
    tr = float(np.min(np.diff(times))) if len(times) > 1 else 1.0
    dt = tr / oversample
    t_end = max(float(times[-1]), 0.0) + tr
    grid = np.arange(0.0, t_end + dt, dt)
    a = gamma_variate_aif(grid, aif)
    r = np.exp(-grid / tissue.mtt)
    conv = np.convolve(a, r)[: len(grid)] * dt
    shifted = times - tissue.delay
    return tissue.cbf_scale * np.interp(shifted, grid, conv, left=0.0, right=conv[-1])


def _region_masks(spec: PhantomSpec):
    _, S, R, C = spec.shape
    s, r, c = np.meshgrid(np.arange(S), np.arange(R), np.arange(C), indexing="ij")
    ar, ac = spec.brain_axes
    brain = ((r - (R - 1) / 2) / (ar * R)) ** 2 + ((c - (C - 1) / 2) / (ac * C)) ** 2 <= 1.0
    lesions = []
    for les in spec.lesion_regions:
        cs, cr, cc = les.center
        d2 = ((s - cs) * spec.slice_spacing) ** 2 + (r - cr) ** 2 + (c - cc) ** 2
        lesions.append((d2 <= les.radius**2) & brain)
    vs, vr, vc = spec.vessel_center
    vessel = (s == vs) & ((r - vr) ** 2 + (c - vc) ** 2 <= spec.vessel_r**2)
    csf = np.zeros_like(brain)
    if spec.csf_axes is not None:
        er, ec = spec.csf_axes
        # two ventricles either side of the midline
        for sign in (-1, 1):
            cc = (C - 1) / 2 + sign * 1.6 * ec * C
            csf |= ((r - (R - 1) / 2) / (er * R)) ** 2 + ((c - cc) / (ec * C)) ** 2 <= 1.0
        csf &= brain & ~vessel
    return brain | vessel, lesions, vessel, csf


def synthesize_case(spec: PhantomSpec, case_id: str | None = None, targets: str = "oracle",
                    oscillation_limit: float = DEFAULT_OSCILLATION_LIMIT):
    """Return ``(CaseRecord, GroundTruth)`` for ``spec``.

    ``targets="oracle"`` stores oSVD-derived maps computed from the noisy
    sequence as the case targets (the clinical situation); ``"truth"``
    stores the ground-truth maps instead.
    """
    T, S, R, C = spec.shape
    times = spec.tr * np.arange(T, dtype=np.float64)
    brain, lesion_masks, vessel, csf = _region_masks(spec)

    conc = np.zeros((T, S, R, C))
    delay = np.zeros((S, R, C))
    cbf = np.zeros((S, R, C))
    tissues = [(brain & ~vessel & ~csf, spec.background)]
    tissues += [(m & ~vessel & ~csf, les.tissue) for m, les in zip(lesion_masks, spec.lesion_regions)]
    for mask, tissue in tissues:
        if not mask.any():
            continue
        conc[:, mask] = tissue_curve(times, spec.aif_params, tissue)[:, None]
        delay[mask] = tissue.delay
        cbf[mask] = tissue.cbf_scale
    conc[:, vessel] = gamma_variate_aif(times, spec.aif_params)[:, None]
    cbf[vessel] = 1.0 / spec.tr

    signal = np.where(brain[None], spec.s0 * np.exp(-spec.te_k * conc), 0.0)
    rng = np.random.default_rng(spec.seed)
    if spec.noise_sigma > 0:
        signal = signal + rng.normal(0.0, spec.noise_sigma, size=signal.shape)

    perfused = brain & ~csf
    ttp = np.where(perfused, times[np.argmax(conc, axis=0)], 0.0)
    truth = GroundTruth(
        tmax=PerfusionMap(np.where(perfused, delay, 0.0), MapKind.TMAX),
        ttp=PerfusionMap(ttp, MapKind.TTP),
        rbf=PerfusionMap(cbf, MapKind.RBF),
        delay_field=delay.astype(np.float32),
        brain_mask=brain,
        vessel_mask=vessel,
        csf_mask=csf,
    )
    seq = PerfusionSequence(signal, times)
    case_id = case_id or f"phantom{spec.seed:05d}"
    case = CaseRecord(case_id=case_id, sequence=seq)
    if targets == "truth":
        maps = truth.maps()
    elif targets == "oracle":
        aif = measured_aif(case, vessel, spec.s0, spec.te_k)
        maps = oracle_target_maps(case, aif, spec.tr, oscillation_limit, s0=spec.s0, te_k=spec.te_k)
    else:
        raise ValueError(f"unknown targets mode {targets!r}")
    return case.replace(targets=maps), truth


def measured_aif(case: CaseRecord, vessel_mask, s0: float, te_k: float) -> np.ndarray:
    """Mean concentration over the vessel voxels."""
    curves = case.sequence.data[:, vessel_mask].astype(np.float64)
    return concentration(curves, s0, te_k).mean(axis=1)


def random_spec(seed: int, shape=DESK_SHAPE, tr: float = 1.5, noise_sigma: float = 2.0,
                arrival_range=(3.0, 12.0), lesion_delay_range=(3.0, 12.0), max_lesions: int = 2) -> PhantomSpec:
    """Draw a phantom with a random bolus arrival time and 1..max_lesions lesions."""
    rng = np.random.default_rng([seed, 7919])
    _, S, R, C = shape
    aif = AIFParams.with_peak(1.2, t0=float(rng.uniform(*arrival_range)))
    background = Tissue(delay=float(rng.uniform(0.0, 1.5)), mtt=float(rng.uniform(3.5, 5.0)),
                        cbf_scale=float(rng.uniform(0.10, 0.15)))
    lesions = []
    for _ in range(int(rng.integers(1, max_lesions + 1))):
        ang = rng.uniform(0, 2 * np.pi)
        rad = np.sqrt(rng.uniform(0, 1)) * 0.6
        center = (
            int(rng.integers(0, S)),
            int(np.clip((R - 1) / 2 + rad * 0.44 * R * np.sin(ang), 0, R - 1)),
            int(np.clip((C - 1) / 2 + rad * 0.40 * C * np.cos(ang), 0, C - 1)),
        )
        tissue = Tissue(delay=float(rng.uniform(*lesion_delay_range)), mtt=float(rng.uniform(6.0, 12.0)),
                        cbf_scale=float(rng.uniform(0.025, 0.075)))
        lesions.append(Lesion(center, float(rng.uniform(0.1, 0.22) * R), tissue))
    return PhantomSpec(shape=tuple(shape), tr=tr, aif_params=aif, lesion_regions=tuple(lesions),
                       background=background, noise_sigma=noise_sigma, seed=int(seed))


def generate_dataset(count: int, seed: int = 0, shape=DESK_SHAPE, tr: float = 1.5, noise_sigma: float = 2.0,
                     targets: str = "oracle", **spec_kw):
    """Yield ``(CaseRecord, GroundTruth)`` for ``count`` random phantoms."""
    for i in range(count):
        spec = random_spec(seed * 100_003 + i, shape=shape, tr=tr, noise_sigma=noise_sigma, **spec_kw)
        yield synthesize_case(spec, case_id=f"case{i:04d}", targets=targets)


@dataclass(frozen=True)
class DatasetConfig:
    """Settings for a seeded phantom dataset; the defaults give the reference desk-scale set."""

    count: int = 20
    shape: tuple = DESK_SHAPE
    tr: float = 1.5
    noise_sigma: float = 1.0
    targets: str = "oracle"
    arrival_range: tuple = (3.0, 12.0)
    lesion_delay_range: tuple = (3.0, 12.0)
    max_lesions: int = 2

    def __post_init__(self):
        if self.count < 1:
            raise DataError("count must be >= 1")
        if self.targets not in ("oracle", "truth"):
            raise DataError(f"targets must be 'oracle' or 'truth', got {self.targets!r}")

    def generate(self, seed: int = 0):
        return generate_dataset(self.count, seed=seed, shape=tuple(self.shape), tr=self.tr,
                                noise_sigma=self.noise_sigma, targets=self.targets,
                                arrival_range=tuple(self.arrival_range),
                                lesion_delay_range=tuple(self.lesion_delay_range), max_lesions=self.max_lesions)


def write_ground_truth(truth: GroundTruth, directory) -> None:
    """Ground-truth maps and masks as float32 containers next to a case."""
    from .data import write_array

    directory.mkdir(parents=True, exist_ok=True)
    arrays = {"tmax": truth.tmax.data, "ttp": truth.ttp.data, "rbf": truth.rbf.data, "delay": truth.delay_field,
              "brain_mask": truth.brain_mask, "vessel_mask": truth.vessel_mask}
    if truth.csf_mask is not None:
        arrays["csf_mask"] = truth.csf_mask
    for name, a in arrays.items():
        write_array(directory / f"{name}.pfsn", np.asarray(a, dtype=np.float32))
