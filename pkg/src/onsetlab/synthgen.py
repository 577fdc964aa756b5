"""Synthetic multi-sequence stroke cohort.

Each case is an analytic ellipsoidal head phantom (skull shell, grey/white
matter, paired ventricles) rendered separately for DWI, T2 and FLAIR under a
slightly different rigid pose, with a smooth multiplicative bias field and
additive Gaussian noise.  A lesion is bright on DWI from the start, while its
FLAIR contrast grows with time since onset as ``C * (1 - exp(-tss / tau))``.
"""

from __future__ import annotations

import json
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .volume_io import Volume, affine_from, read_mask, read_volume, write_mask, write_volume

SEQUENCES = ("DWI", "T2", "FLAIR")
SIDES = ("left", "right", "none")

# tissue intensities before bias and noise
TISSUE = {
    "T2": {"wm": 0.55, "gm": 0.70, "csf": 1.00, "skull": 0.22},
    "DWI": {"wm": 0.50, "gm": 0.60, "csf": 0.15, "skull": 0.10},
    "FLAIR": {"wm": 0.50, "gm": 0.65, "csf": 0.10, "skull": 0.20},
}
GM_RADIUS = 0.8  # normalised radius where white matter gives way to cortex
SKULL_SHELL = (1.14, 1.26)
VENTRICLE_CENTRE = np.array([0.18, 0.05, 0.10])
VENTRICLE_RADII = np.array([0.10, 0.30, 0.25])


@dataclass
class CohortSpec:
    n_cases: int = 20
    shape: tuple[int, int, int] = (48, 56, 12)
    spacing: tuple[float, float, float] = (4.0, 4.0, 10.0)
    seed: int = 0
    control_fraction: float = 0.15
    tss_kind: str = "loguniform"  # or "fixed"
    tss_range: tuple[float, float] = (10.0, 1440.0)
    tss_value: float = 120.0
    lesion_voxels: tuple[int, int] = (60, 240)
    brain_radii_mm: tuple[float, float, float] = (68.0, 84.0, 44.0)
    noise_sd: float = 0.02
    dwi_contrast: float = 0.5
    flair_contrast: float = 0.6  # saturating FLAIR lesion contrast, in noise SDs
    flair_tau: float = 180.0
    bias_amplitude: float = 0.2
    scale_jitter: float = 0.03
    max_rotation_deg: float = 6.0
    max_shift_mm: tuple[float, float, float] = (4.0, 4.0, 5.0)
    coreg_rotation_deg: float = 2.0
    coreg_shift_mm: float = 2.0
    slab_oversample: int = 1  # >1 renders each thick slice as a sub-slice average

    def __post_init__(self):
        self.shape = tuple(int(s) for s in self.shape)
        self.spacing = tuple(float(s) for s in self.spacing)
        self.tss_range = tuple(float(t) for t in self.tss_range)
        self.lesion_voxels = tuple(int(v) for v in self.lesion_voxels)
        self.brain_radii_mm = tuple(float(r) for r in self.brain_radii_mm)
        self.max_shift_mm = tuple(float(s) for s in self.max_shift_mm)
        if self.n_cases < 1:
            raise ValueError("n_cases must be >= 1")
        lo, hi = self.lesion_voxels
        if lo < 1 or hi < lo:
            raise ValueError(f"empty lesion size range {self.lesion_voxels}")
        if self.slab_oversample < 1:
            raise ValueError("slab_oversample must be >= 1")
        if self.tss_kind not in ("loguniform", "fixed"):
            raise ValueError(f"unknown tss distribution {self.tss_kind!r}")

    @classmethod
    def from_dict(cls, d: dict) -> "CohortSpec":
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)

    @property
    def voxel_volume(self) -> float:
        return float(np.prod(self.spacing))

    def flair_lesion_contrast(self, tss_minutes: float) -> float:
        """FLAIR lesion-minus-tissue intensity at a given time since onset."""
        c = self.flair_contrast * self.noise_sd
        return c * (1.0 - np.exp(-tss_minutes / self.flair_tau))


@dataclass
class Case:
    case_id: str
    sequences: dict[str, Volume]
    lesion_mask: np.ndarray
    lesion_side: str = "none"
    tss_minutes: float | None = None
    truth: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        if self.lesion_side not in SIDES:
            raise ValueError(f"lesion_side must be one of {SIDES}")
        if self.lesion_side == "none":
            if self.tss_minutes is not None or np.any(self.lesion_mask):
                raise ValueError("control cases carry neither a lesion nor a TSS")
        if self.tss_minutes is not None and self.tss_minutes < 0:
            raise ValueError("tss_minutes must be nonnegative")


# ---------------------------------------------------------------- geometry


def rotation_matrix(angles_deg) -> np.ndarray:
    """Rotation about x, then y, then z (angles in degrees)."""
    ax, ay, az = np.deg2rad(angles_deg)
    rx = np.array([[1, 0, 0], [0, np.cos(ax), -np.sin(ax)], [0, np.sin(ax), np.cos(ax)]])
    ry = np.array([[np.cos(ay), 0, np.sin(ay)], [0, 1, 0], [-np.sin(ay), 0, np.cos(ay)]])
    rz = np.array([[np.cos(az), -np.sin(az), 0], [np.sin(az), np.cos(az), 0], [0, 0, 1]])
    return rz @ ry @ rx


def grid_points(shape, spacing, orientation="RAS", z_oversample: int = 1) -> np.ndarray:
    """World coordinates (mm) of voxel centres, shape (*shape, 3).

    With ``z_oversample > 1`` each slice is represented by that many evenly
    spaced sub-slices along the last axis (the returned grid is finer in z).
    """
    nz = shape[2] * z_oversample
    idx = np.stack(
        np.meshgrid(
            np.arange(shape[0], dtype=float),
            np.arange(shape[1], dtype=float),
            (np.arange(nz, dtype=float) + 0.5) / z_oversample - 0.5,
            indexing="ij",
        ),
        axis=-1,
    )
    aff = affine_from(shape, spacing, orientation)
    return idx @ aff[:3, :3].T + aff[:3, 3]


def _ellipsoid_radius(points, centre, radii):
    return np.sqrt((((points - centre) / radii) ** 2).sum(axis=-1))


@dataclass
class Anatomy:
    """Per-case phantom geometry in subject coordinates (mm)."""

    radii: np.ndarray
    lesion_centre: np.ndarray | None = None
    lesion_radii: np.ndarray | None = None

    def labels(self, pts: np.ndarray) -> dict[str, np.ndarray]:
        q = pts / self.radii
        r = np.sqrt((q**2).sum(axis=-1))
        brain = r <= 1.0
        vent = np.zeros_like(brain)
        for sign in (-1.0, 1.0):
            c = VENTRICLE_CENTRE * np.array([sign, 1.0, 1.0])
            vent |= _ellipsoid_radius(q, c, VENTRICLE_RADII) <= 1.0
        out = {
            "brain": brain,
            "csf": brain & vent,
            "wm": brain & ~vent & (r <= GM_RADIUS),
            "gm": brain & ~vent & (r > GM_RADIUS),
            "skull": (r >= SKULL_SHELL[0]) & (r <= SKULL_SHELL[1]),
        }
        if self.lesion_centre is not None:
            out["lesion"] = _ellipsoid_radius(pts, self.lesion_centre, self.lesion_radii) <= 1.0
        else:
            out["lesion"] = np.zeros_like(brain)
        return out


def render(anat: Anatomy, pts: np.ndarray, sequence: str, lesion_contrast: float = 0.0) -> np.ndarray:
    """Noise- and bias-free intensities of the phantom at subject points."""
    lab = anat.labels(pts)
    tissue = TISSUE[sequence]
    img = np.zeros(pts.shape[:-1])
    for name in ("skull", "gm", "wm", "csf"):
        img[lab[name]] = tissue[name]
    img[lab["lesion"]] = tissue["wm"] + lesion_contrast
    return img


def _bias_field(rng, pts, radii, amplitude) -> np.ndarray:
    """Random quadratic polynomial field, 1 +/- amplitude across the head."""
    u = pts / (SKULL_SHELL[1] * np.asarray(radii))
    terms = [u[..., 0], u[..., 1], u[..., 2]]
    terms += [u[..., i] * u[..., j] for i in range(3) for j in range(i, 3)]
    coef = rng.normal(size=len(terms))
    p = sum(c * t for c, t in zip(coef, terms))
    head = (u**2).sum(axis=-1) <= 1.0
    p = p - p[head].mean()
    peak = np.abs(p[head]).max()
    if peak == 0 or amplitude == 0:
        return np.ones(pts.shape[:-1])
    return np.clip(1.0 + amplitude * p / peak, 0.2, None)


def _to_subject(pts, rot, shift):
    # pose maps subject -> world as w = R s + t
    return (pts - shift) @ rot


# ---------------------------------------------------------------- sampling


def _place_lesion(rng, spec: CohortSpec, radii, side):
    vox_mm3 = spec.voxel_volume
    lo, hi = spec.lesion_voxels
    margin = spec.spacing[0]
    sign = -1.0 if side == "left" else 1.0  # RAS: +x is the subject's right
    for attempt in range(2000):
        if attempt % 250 == 0:
            # a fresh size and shape when the current one keeps missing
            target = rng.uniform(lo, hi) * vox_mm3
            # narrow in x so the lesion fits a hemisphere, flat along thick z slices
            aspect = rng.uniform(0.8, 1.25, size=3) * np.array([0.8, 1.2, 0.6])
            base = (target / (4.0 / 3.0 * np.pi * np.prod(aspect))) ** (1.0 / 3.0)
            lradii = base * aspect
        u = rng.uniform(-0.75, 0.75, size=3)
        u[0] = sign * abs(u[0])
        centre = u * radii
        if sign * centre[0] - lradii[0] < margin:
            continue
        # the ellipsoid must sit inside the parenchyma and clear the ventricles
        probe = centre + lradii * np.array(
            [[1, 0, 0], [-1, 0, 0], [0, 1, 0], [0, -1, 0], [0, 0, 1], [0, 0, -1]]
        )
        if np.any(_ellipsoid_radius(probe, 0.0, radii) > 0.92):
            continue
        vc = VENTRICLE_CENTRE * np.array([sign, 1.0, 1.0]) * radii
        vr = VENTRICLE_RADII * radii
        if _ellipsoid_radius(centre, vc, vr + lradii) <= 1.0:
            continue
        return centre, lradii
    raise ValueError("degenerate spec: lesion does not fit inside the brain hemisphere")


def _check_spec(spec: CohortSpec):
    brain_mm3 = 4.0 / 3.0 * np.pi * np.prod(spec.brain_radii_mm)
    if spec.lesion_voxels[1] * spec.voxel_volume > 0.25 * brain_mm3:
        raise ValueError("degenerate spec: lesion larger than the brain can hold")
    fov = np.asarray(spec.shape) * np.asarray(spec.spacing) / 2.0
    if np.any(np.asarray(spec.brain_radii_mm) >= fov):
        raise ValueError("degenerate spec: brain does not fit in the field of view")


def _sample_tss(rng, spec: CohortSpec) -> float:
    if spec.tss_kind == "fixed":
        return float(spec.tss_value)
    lo, hi = spec.tss_range
    return float(np.exp(rng.uniform(np.log(lo), np.log(hi))))


def generate_case(spec: CohortSpec, index: int) -> Case:
    """Render case ``index`` of the cohort; deterministic in (spec.seed, index)."""
    if not 0 <= index < spec.n_cases:
        raise IndexError(f"index {index} outside cohort of {spec.n_cases}")
    _check_spec(spec)
    rng = np.random.default_rng([spec.seed, index])

    radii = np.asarray(spec.brain_radii_mm) * (1.0 + rng.uniform(-spec.scale_jitter, spec.scale_jitter, 3))
    control = rng.random() < spec.control_fraction
    side = "none" if control else ("left" if rng.random() < 0.5 else "right")
    tss = None if control else _sample_tss(rng, spec)
    anat = Anatomy(radii)
    if not control:
        anat.lesion_centre, anat.lesion_radii = _place_lesion(rng, spec, radii, side)

    rot_scale = np.array([1 / 3, 1 / 3, 1.0]) * spec.max_rotation_deg
    t2_rot = rotation_matrix(rng.uniform(-1, 1, 3) * rot_scale)
    t2_shift = rng.uniform(-1, 1, 3) * np.asarray(spec.max_shift_mm)

    pts = grid_points(spec.shape, spec.spacing)
    k = spec.slab_oversample
    fine = grid_points(spec.shape, spec.spacing, z_oversample=k)
    contrast = {
        "DWI": spec.dwi_contrast,
        "T2": 0.0,
        "FLAIR": spec.flair_lesion_contrast(tss) if tss is not None else 0.0,
    }
    sequences, truth = {}, {"bias": {}, "clean": {}, "pose": {}}
    for seq in SEQUENCES:
        if seq == "T2":
            rot, shift = t2_rot, t2_shift
        else:
            extra = rotation_matrix(rng.uniform(-1, 1, 3) * spec.coreg_rotation_deg)
            rot = extra @ t2_rot
            shift = t2_shift + rng.uniform(-1, 1, 3) * spec.coreg_shift_mm
        subj = _to_subject(pts, rot, shift)
        # partial volume across the slab; labels stay at slice centres
        clean = render(anat, _to_subject(fine, rot, shift), seq, contrast[seq]).reshape(*spec.shape, k).mean(axis=-1)
        bias = _bias_field(rng, pts, radii, spec.bias_amplitude)
        noisy = clean * bias + rng.normal(0.0, spec.noise_sd, spec.shape)
        sequences[seq] = Volume(noisy.astype(np.float32), spec.spacing, "RAS", {"sequence": seq})
        truth["bias"][seq] = bias
        truth["clean"][seq] = clean
        truth["pose"][seq] = (rot, shift)
        if seq == "T2":
            labels = anat.labels(subj)
            truth["brain_mask"] = labels["brain"].astype(np.uint8)
            lesion_mask = labels["lesion"].astype(np.uint8)
    truth["anatomy"] = anat
    return Case(f"case{index:04d}", sequences, lesion_mask, side, tss, truth)


def make_atlas(spec: CohortSpec, z_oversample: int | None = None) -> Volume:
    """Noise-free, skull-free T2 template in canonical pose.

    Rendered on a grid ``z_oversample`` times finer in z and then averaged
    down to the cohort's slice count.
    """
    z_oversample = z_oversample or spec.slab_oversample
    anat = Anatomy(np.asarray(spec.brain_radii_mm))
    pts = grid_points(spec.shape, spec.spacing, z_oversample=z_oversample)
    lab = anat.labels(pts)
    img = render(anat, pts, "T2") * lab["brain"]
    img = img.reshape(*spec.shape, z_oversample).mean(axis=-1)
    return Volume(img.astype(np.float32), spec.spacing, "RAS", {"atlas": "synthetic-t2", "z_downsample": z_oversample})


# ---------------------------------------------------------------- cohort files


def _tss_labels(tss):
    if tss is None:
        return None, None
    return int(tss < 180.0), int(tss < 270.0)


def write_case(case: Case, root: Path) -> dict:
    d = Path(root) / case.case_id
    d.mkdir(parents=True, exist_ok=True)
    files = {}
    for seq in SEQUENCES:
        name = f"{case.case_id}/{seq.lower()}.nii.gz"
        write_volume(case.sequences[seq], Path(root) / name)
        files[seq.lower()] = name
    t2 = case.sequences["T2"]
    files["lesion"] = f"{case.case_id}/lesion.nii.gz"
    write_mask(case.lesion_mask, t2.spacing, t2.orientation, Path(root) / files["lesion"])
    return {
        "case_id": case.case_id,
        "tss_minutes": case.tss_minutes,
        "lesion_side": case.lesion_side,
        "files": files,
    }


def _generate_and_write(args):
    spec, index, root = args
    return write_case(generate_case(spec, index), root)


def generate_cohort(spec: CohortSpec, out_dir, workers: int = 1) -> dict:
    """Write every case plus ``cohort.json``; returns the manifest."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    jobs = [(spec, i, out) for i in range(spec.n_cases)]
    if workers > 1:
        with ProcessPoolExecutor(workers) as pool:
            entries = list(pool.map(_generate_and_write, jobs))
    else:
        entries = [_generate_and_write(j) for j in jobs]
    manifest = {"spec": spec.to_dict(), "cases": entries, "marginals": label_marginals(entries)}
    with open(out / "cohort.json", "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
    return manifest


def label_marginals(entries) -> dict:
    sides = [e["lesion_side"] for e in entries]
    tss = [e["tss_minutes"] for e in entries if e["tss_minutes"] is not None]
    return {
        "n_cases": len(entries),
        "n_control": sides.count("none"),
        "n_left": sides.count("left"),
        "n_right": sides.count("right"),
        "n_tss_lt_180": sum(t < 180.0 for t in tss),
        "n_tss_lt_270": sum(t < 270.0 for t in tss),
    }


def load_manifest(path) -> dict:
    """Read ``cohort.json`` (or the directory holding it) and resolve file paths against its directory."""
    path = Path(path)
    if path.is_dir():
        path = path / "cohort.json"
    with open(path) as fh:
        manifest = json.load(fh)
    root = path.parent
    for entry in manifest["cases"]:
        entry["files"] = {k: str(root / v) for k, v in entry["files"].items()}
    manifest["root"] = str(root)
    return manifest


def load_case(entry: dict) -> Case:
    """Read a manifest entry (with resolved paths) back into a Case."""
    files = entry["files"]
    sequences = {seq: read_volume(files[seq.lower()]) for seq in SEQUENCES}
    lesion = read_mask(files["lesion"])
    return Case(entry["case_id"], sequences, lesion, entry["lesion_side"], entry["tss_minutes"])
