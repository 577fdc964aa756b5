"""Per-case preprocessing pipeline and cohort driver."""

from __future__ import annotations

import hashlib
import json
import logging
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from nibabel import orientations as ornt

from ..synthgen import SEQUENCES, Case, load_case, load_manifest
from ..volume_io import Volume, read_mask, read_volume, write_mask, write_volume
from .bias import correct_bias
from .brain import extract_brain
from .intensity import match_histogram, normalize_intensity
from .registration import register_affine
from .transforms import Grid, resample, resample_mask

log = logging.getLogger(__name__)

PIPELINE_VERSION = "2"
STAGES = ("load", "bias", "reorient", "extract", "atlas", "extract2", "coreg", "normalize", "histmatch")


class PipelineError(RuntimeError):
    def __init__(self, stage: str, message: str):
        super().__init__(f"[{stage}] {message}")
        self.stage = stage
        self.code = f"E_{stage.upper()}"
        self.message = message


@dataclass
class PreprocessedCase:
    case_id: str
    sequences: dict[str, Volume]
    brain_mask: np.ndarray
    lesion_mask: np.ndarray
    lesion_side: str = "none"
    tss_minutes: float | None = None
    provenance: dict = field(default_factory=dict, repr=False)

    @property
    def grid(self) -> Grid:
        return Grid.of(self.sequences["T2"])

    def stack(self) -> np.ndarray:
        """(3, x, y, z) float32 in DWI, T2, FLAIR order."""
        return np.stack([self.sequences[s].data for s in SEQUENCES]).astype(np.float32)


def reorient(v: Volume, target: str) -> Volume:
    """Permute/flip axes so the data is in ``target`` axis codes."""
    if v.orientation == target:
        return v
    t = ornt.ornt_transform(ornt.axcodes2ornt(tuple(v.orientation)), ornt.axcodes2ornt(tuple(target)))
    data = ornt.apply_orientation(v.data, t)
    spacing = [0.0] * 3
    for src_axis, (dst_axis, _) in enumerate(t):
        spacing[int(dst_axis)] = v.spacing[src_axis]
    return Volume(np.ascontiguousarray(data, dtype=np.float32), tuple(spacing), target, dict(v.meta))


def reorient_mask(mask, orientation: str, target: str) -> np.ndarray:
    if orientation == target:
        return mask
    t = ornt.ornt_transform(ornt.axcodes2ornt(tuple(orientation)), ornt.axcodes2ornt(tuple(target)))
    return np.ascontiguousarray(ornt.apply_orientation(mask, t)).astype(np.uint8)


def _stage(name, fn, *args, **kw):
    try:
        return fn(*args, **kw)
    except PipelineError:
        raise
    except Exception as exc:  # any stage failure aborts just this case
        raise PipelineError(name, f"{type(exc).__name__}: {exc}") from exc


def run_pipeline(case: Case, atlas: Volume, reference: dict[str, Volume] | None = None, reference_mask=None):
    """Take a raw case onto the atlas grid.

    ``reference`` maps sequence name to the normalised reference volume used
    for histogram matching; without it that stage is skipped (the reference
    case itself).
    """
    t0 = time.perf_counter()
    prov = {"case_id": case.case_id, "pipeline_version": PIPELINE_VERSION, "stages": []}

    def done(stage, **info):
        prov["stages"].append({"stage": stage, **info})

    seqs = {}
    fields = {}
    for s in SEQUENCES:
        seqs[s], f = _stage("bias", correct_bias, case.sequences[s])
        fields[s] = {"field_min": float(f.data.min()), "field_max": float(f.data.max())}
        if "bias_shift" in seqs[s].meta:
            fields[s]["shift"] = seqs[s].meta["bias_shift"]
    done("bias", fields=fields)

    lesion_orient = case.sequences["T2"].orientation
    seqs = {s: _stage("reorient", reorient, v, atlas.orientation) for s, v in seqs.items()}
    lesion = _stage("reorient", reorient_mask, case.lesion_mask, lesion_orient, atlas.orientation)
    done("reorient", target=atlas.orientation)

    masks = {s: _stage("extract", extract_brain, v) for s, v in seqs.items()}
    seqs = {s: v.with_data(v.data * masks[s]) for s, v in seqs.items()}
    done("extract", voxels={s: int(m.sum()) for s, m in masks.items()})

    t2_to_atlas, t2_on_atlas = _stage("atlas", register_affine, seqs["T2"], atlas, mode="affine", shear=False)
    done("atlas", **t2_to_atlas.to_dict())

    brain = _stage("extract2", extract_brain, t2_on_atlas)
    done("extract2", voxels=int(brain.sum()))

    grid = Grid.of(atlas)
    out = {"T2": t2_on_atlas}
    for s in ("DWI", "FLAIR"):
        to_t2, _ = _stage("coreg", register_affine, seqs[s], seqs["T2"], mode="rigid")
        # atlas -> T2 -> sequence, resampled once
        total = to_t2.compose(t2_to_atlas)
        out[s] = _stage("coreg", resample, seqs[s], total, grid)
        prov["stages"].append({"stage": "coreg", "sequence": s, **to_t2.to_dict()})
    lesion = resample_mask(lesion, Grid.of(seqs["T2"]), t2_to_atlas, grid) & brain

    records = {}
    for s in SEQUENCES:
        out[s], records[s] = _stage("normalize", normalize_intensity, out[s], brain)
    done("normalize", **records)

    if reference is not None:
        for s in SEQUENCES:
            out[s] = _stage("histmatch", match_histogram, out[s], reference[s], brain, reference_mask)
        done("histmatch", reference=reference["T2"].meta.get("case_id"))
    else:
        done("histmatch", reference=case.case_id, skipped="reference case")

    prov["seconds"] = round(time.perf_counter() - t0, 3)
    seq_out = {s: v.with_data(v.data, case_id=case.case_id, sequence=s) for s, v in out.items()}
    return PreprocessedCase(case.case_id, seq_out, brain.astype(np.uint8), lesion.astype(np.uint8),
                            case.lesion_side, case.tss_minutes, prov)


# ---------------------------------------------------------------- storage


def save_preprocessed(pc: PreprocessedCase, root) -> dict:
    d = Path(root) / pc.case_id
    d.mkdir(parents=True, exist_ok=True)
    files = {}
    for s in SEQUENCES:
        files[s.lower()] = f"{pc.case_id}/{s.lower()}.nii.gz"
        write_volume(pc.sequences[s], Path(root) / files[s.lower()])
    t2 = pc.sequences["T2"]
    for name, m in (("brain", pc.brain_mask), ("lesion", pc.lesion_mask)):
        files[name] = f"{pc.case_id}/{name}.nii.gz"
        write_mask(m, t2.spacing, t2.orientation, Path(root) / files[name])
    with open(d / "provenance.json", "w") as fh:
        json.dump(pc.provenance, fh, indent=2, sort_keys=True)
    return {"case_id": pc.case_id, "lesion_side": pc.lesion_side, "tss_minutes": pc.tss_minutes, "files": files}


def load_preprocessed(entry: dict, root) -> PreprocessedCase:
    root = Path(root)
    f = entry["files"]
    seqs = {s: read_volume(root / f[s.lower()]) for s in SEQUENCES}
    prov_path = root / entry["case_id"] / "provenance.json"
    prov = json.loads(prov_path.read_text()) if prov_path.exists() else {}
    return PreprocessedCase(entry["case_id"], seqs, read_mask(root / f["brain"]), read_mask(root / f["lesion"]),
                            entry["lesion_side"], entry["tss_minutes"], prov)


def load_preprocessed_cohort(path) -> tuple[dict, list[PreprocessedCase]]:
    path = Path(path)
    manifest = json.loads(path.read_text())
    return manifest, [load_preprocessed(e, path.parent) for e in manifest["cases"]]


def _cache_key(case: Case, atlas: Volume, reference_id) -> str:
    h = hashlib.sha256()
    h.update(PIPELINE_VERSION.encode())
    for s in SEQUENCES:
        v = case.sequences[s]
        h.update(v.data.tobytes())
        h.update(repr((v.spacing, v.orientation)).encode())
    h.update(np.ascontiguousarray(case.lesion_mask).tobytes())
    h.update(atlas.data.tobytes())
    h.update(repr((atlas.spacing, atlas.orientation, reference_id)).encode())
    return h.hexdigest()[:24]


def _cache_dir():
    d = os.environ.get("ONSETLAB_CACHE")
    return Path(d) if d else None


def _cache_load(key) -> PreprocessedCase | None:
    d = _cache_dir()
    if d is None or not (d / f"{key}.npz").exists():
        return None
    z = np.load(d / f"{key}.npz", allow_pickle=False)
    meta = json.loads(str(z["meta"]))
    seqs = {s: Volume(z[s], tuple(meta["spacing"]), meta["orientation"], {"case_id": meta["case_id"], "sequence": s})
            for s in SEQUENCES}
    return PreprocessedCase(meta["case_id"], seqs, z["brain"], z["lesion"], meta["lesion_side"], meta["tss_minutes"],
                            meta["provenance"])


def _cache_store(key, pc: PreprocessedCase):
    d = _cache_dir()
    if d is None:
        return
    d.mkdir(parents=True, exist_ok=True)
    t2 = pc.sequences["T2"]
    meta = {"case_id": pc.case_id, "spacing": list(t2.spacing), "orientation": t2.orientation,
            "lesion_side": pc.lesion_side, "tss_minutes": pc.tss_minutes, "provenance": pc.provenance}
    tmp = d / f".{key}.{os.getpid()}.npz"
    np.savez_compressed(tmp, meta=json.dumps(meta), brain=pc.brain_mask, lesion=pc.lesion_mask,
                        **{s: pc.sequences[s].data for s in SEQUENCES})
    os.replace(tmp, d / f"{key}.npz")


def process_case(case: Case, atlas: Volume, reference=None, reference_mask=None, reference_id=None):
    key = _cache_key(case, atlas, reference_id)
    hit = _cache_load(key)
    if hit is not None:
        return hit
    pc = run_pipeline(case, atlas, reference, reference_mask)
    _cache_store(key, pc)
    return pc


def _safe(job):
    loader, atlas, reference, reference_mask, reference_id = job
    case_id = getattr(loader, "case_id", None) or loader.get("case_id")
    try:
        case = loader if isinstance(loader, Case) else _stage("load", load_case, loader)
        return process_case(case, atlas, reference, reference_mask, reference_id), None
    except PipelineError as exc:
        log.warning("case %s failed: %s", case_id, exc)
        return None, {"case_id": case_id, "stage": exc.stage, "code": exc.code, "message": exc.message}


def preprocess_cases(cases, atlas: Volume, reference_id: str | None = None, workers: int = 1):
    """Run the pipeline over Cases or manifest entries.

    The histogram reference is the case named ``reference_id`` (default: the
    first one), processed first without matching.  Returns
    (preprocessed list, failure records, reference id).
    """
    cases = list(cases)
    if not cases:
        raise ValueError("no cases to preprocess")
    ids = [c.case_id if isinstance(c, Case) else c["case_id"] for c in cases]
    ref_id = reference_id or ids[0]
    if ref_id not in ids:
        raise ValueError(f"reference case {ref_id!r} not in cohort")
    ref_pc, ref_fail = _safe((cases[ids.index(ref_id)], atlas, None, None, None))
    if ref_pc is None:
        raise PipelineError(ref_fail["stage"], f"reference case {ref_id} failed: {ref_fail['message']}")
    reference = {s: ref_pc.sequences[s] for s in SEQUENCES}

    jobs = [(c, atlas, reference, ref_pc.brain_mask, ref_id) for c, i in zip(cases, ids) if i != ref_id]
    if workers > 1:
        with ProcessPoolExecutor(workers) as pool:
            results = list(pool.map(_safe, jobs))
    else:
        results = [_safe(j) for j in jobs]
    done = {ref_id: ref_pc}
    failures = []
    for pc, fail in results:
        if pc is not None:
            done[pc.case_id] = pc
        else:
            failures.append(fail)
    return [done[i] for i in ids if i in done], failures, ref_id


def preprocess_cohort(cohort_json, atlas, out_dir, splits=None, workers: int = 1) -> dict:
    """Preprocess a written cohort into ``out_dir`` with a provenance manifest."""
    manifest = load_manifest(cohort_json)
    if not isinstance(atlas, Volume):
        atlas = read_volume(atlas)
    ref_id = None
    if splits is not None:
        train = sorted(k for k, v in splits["assignment"].items() if v == "train")
        ref_id = train[0] if train else None
    done, failures, ref_id = preprocess_cases(manifest["cases"], atlas, ref_id, workers)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    entries = [save_preprocessed(pc, out) for pc in done]
    result = {
        "source": str(Path(cohort_json)),
        "reference_case": ref_id,
        "pipeline_version": PIPELINE_VERSION,
        "cases": entries,
        "failures": failures,
        "n_ok": len(entries),
        "n_failed": len(failures),
    }
    with open(out / "preprocessed.json", "w") as fh:
        json.dump(result, fh, indent=2, sort_keys=True)
    return result
