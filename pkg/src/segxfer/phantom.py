"""Synthetic four-chamber-style cardiac slices with six-label ground truth.

Each virtual patient has one heart geometry: four elliptical blood pools in
two columns (right heart on the image left), a myocardial band of fixed
thickness around them that also forms the septum, inside a brighter thorax
disc on a dark background. Slices of one patient differ by a small affine
jitter and a chamber-size sweep. Positives are made from fresh patients by
painting a pericardial-effusion crescent or opening a septal defect.
"""

from __future__ import annotations

import csv
import hashlib
import os
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy import ndimage

from .tensor import load_tensor, save_tensor

LABELS = ("BG", "RA", "LA", "RV", "LV", "Myo")
BG, RA, LA, RV, LV, MYO = range(6)
NUM_LABELS = len(LABELS)

INTENSITY = {"background": 0.05, "thorax": 0.35, "myocardium": 0.55, "blood": 0.75, "fluid": 0.45}

DISEASES = ("effusion", "septal")
_DISEASE_CODE = {"effusion": 1, "septal": 2}


@dataclass(frozen=True)
class CorpusConfig:
    profile: str = "desk"
    size: int = 64
    patients: int = 20
    slices: tuple[int, int] = (8, 10)
    positives: int = 30
    seed: int = 0
    noise: float = 0.03
    scale_jitter: float = 0.10
    rotation_jitter: float = 10.0
    translation_jitter: float = 0.05
    severity: tuple[float, float] = (0.3, 1.0)
    # pixel floors for lesion size; relative sizes go sub-pixel at 64 px
    min_effusion_px: float = 1.5
    min_septal_px: float = 2.0
    # paper profile pins the total negative count instead of drawing it
    total_slices: int | None = None

    @classmethod
    def desk(cls, seed: int = 0, **kw) -> "CorpusConfig":
        base = dict(size=64, patients=20, slices=(8, 10), positives=30)
        return cls(profile="desk", seed=seed, **{**base, **kw})

    @classmethod
    def paper(cls, seed: int = 0, **kw) -> "CorpusConfig":
        base = dict(size=256, patients=40, slices=(10, 11), positives=30, total_slices=425)
        return cls(profile="paper", seed=seed, **{**base, **kw})

    @classmethod
    def for_profile(cls, profile: str, seed: int = 0, **kw) -> "CorpusConfig":
        if profile not in ("desk", "paper"):
            raise ValueError(f"unknown profile {profile!r}")
        return getattr(cls, profile)(seed=seed, **kw)


@dataclass
class LabeledSample:
    image: np.ndarray  # [1,H,W] float32 in [0,1]
    label_map: np.ndarray | None  # [H,W] uint8, normals only
    disease_label: int
    kind: str  # normal | effusion | septal
    patient_id: str
    sample_id: str
    seed: tuple[int, ...] = ()
    geometry: dict = field(default_factory=dict, repr=False)


def _rng(*key: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(k) for k in key]))


# --------------------------------------------------------------------------
# Geometry
# --------------------------------------------------------------------------

# heart-local layout: x to image right, y down, ventricles on top, atria below
_CHAMBERS = {
    RV: ((-0.21, -0.16), (0.17, 0.21)),
    LV: ((0.21, -0.16), (0.16, 0.22)),
    RA: ((-0.21, 0.25), (0.16, 0.13)),
    LA: ((0.21, 0.25), (0.15, 0.13)),
}


def draw_geometry(rng: np.random.Generator) -> dict:
    chambers = {}
    for code, ((cx, cy), (rx, ry)) in _CHAMBERS.items():
        chambers[code] = (
            cx + rng.uniform(-0.015, 0.015),
            cy + rng.uniform(-0.015, 0.015),
            rx * rng.uniform(0.9, 1.1),
            ry * rng.uniform(0.9, 1.1),
        )
    return {
        "thorax": (rng.uniform(-0.03, 0.03), rng.uniform(0.0, 0.04), 0.93 * rng.uniform(0.97, 1.03), 0.8 * rng.uniform(0.97, 1.03)),
        "center": (rng.uniform(-0.06, 0.06), rng.uniform(-0.06, 0.04)),
        "angle": rng.uniform(-15.0, 15.0),
        "scale": 0.92 * rng.uniform(0.92, 1.08),
        "wall": rng.uniform(0.085, 0.1),
        "chambers": chambers,
    }


def _grid(size: int) -> tuple[np.ndarray, np.ndarray]:
    coords = (np.arange(size) + 0.5 - size / 2) / (size / 2)
    return np.meshgrid(coords, coords, indexing="xy")


def _to_local(u, v, center, angle_deg, scale):
    a = np.deg2rad(angle_deg)
    du, dv = u - center[0], v - center[1]
    lx = (np.cos(a) * du + np.sin(a) * dv) / scale
    ly = (-np.sin(a) * du + np.cos(a) * dv) / scale
    return lx, ly


def _pose(geom: dict, jitter: dict) -> tuple[tuple[float, float], float, float]:
    cx, cy = geom["center"]
    return (cx + jitter["tx"], cy + jitter["ty"]), geom["angle"] + jitter["rot"], geom["scale"] * jitter["scale"]


def render(geom: dict, size: int, jitter: dict) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Noise-free intensity image, label map and thorax mask for one slice."""
    u, v = _grid(size)
    tx, ty, trx, try_ = geom["thorax"]
    thorax = ((u - tx) / trx) ** 2 + ((v - ty) / try_) ** 2 <= 1.0
    center, angle, scale = _pose(geom, jitter)
    lx, ly = _to_local(u, v, center, angle, scale)
    labels = np.zeros((size, size), dtype=np.uint8)
    phase = jitter["phase"]
    for code, (cx, cy, rx, ry) in geom["chambers"].items():
        # axial sweep: ventricles grow toward one end, atria toward the other
        f = 1 + 0.12 * phase if code in (RV, LV) else 1 - 0.12 * phase
        inside = ((lx - cx) / (rx * f)) ** 2 + ((ly - cy) / (ry * f)) ** 2 <= 1.0
        labels[inside & (labels == BG)] = code
    pools = labels != BG
    wall_px = geom["wall"] * scale * size / 2
    dist = ndimage.distance_transform_edt(~pools)
    heart = ndimage.binary_fill_holes(pools | (dist <= wall_px))
    labels[heart & ~pools] = MYO
    img = np.full((size, size), INTENSITY["background"], dtype=np.float64)
    img[thorax] = INTENSITY["thorax"]
    img[labels == MYO] = INTENSITY["myocardium"]
    img[pools] = INTENSITY["blood"]
    return img, labels, thorax


def _slice_jitter(rng: np.random.Generator, config: CorpusConfig, phase: float) -> dict:
    # translation is in grid units, i.e. a fraction of the half-width
    return {
        "scale": 1 + rng.uniform(-config.scale_jitter, config.scale_jitter),
        "rot": rng.uniform(-config.rotation_jitter, config.rotation_jitter),
        "tx": rng.uniform(-config.translation_jitter, config.translation_jitter),
        "ty": rng.uniform(-config.translation_jitter, config.translation_jitter),
        "phase": phase,
    }


def _finish(img: np.ndarray, rng: np.random.Generator, sigma: float) -> np.ndarray:
    noisy = img + rng.normal(0.0, sigma, size=img.shape)
    return np.clip(noisy, 0.0, 1.0).astype(np.float32)[None]


def generate_patient(
    patient: int, config: CorpusConfig, n_slices: int | None = None, patient_id: str | None = None, phase: float | None = None
) -> list[LabeledSample]:
    """All normal slices of one virtual patient (deterministic in seed and index).

    ``phase`` pins the sweep position of a single-slice patient; by default it
    sits mid-sweep.
    """
    geom = draw_geometry(_rng(config.seed, 1, patient))
    if n_slices is None:
        lo, hi = config.slices
        n_slices = int(_rng(config.seed, 2, patient).integers(lo, hi + 1))
    pid = patient_id or f"p{patient:03d}"
    out = []
    for k in range(n_slices):
        rng = _rng(config.seed, 3, patient, k)
        if n_slices == 1:
            pos = 0.0 if phase is None else phase
        else:
            pos = 2 * k / (n_slices - 1) - 1
        jitter = _slice_jitter(rng, config, pos)
        img, labels, _ = render(geom, config.size, jitter)
        out.append(
            LabeledSample(
                image=_finish(img, rng, config.noise),
                label_map=labels,
                disease_label=0,
                kind="normal",
                patient_id=pid,
                sample_id=f"{pid}/s{k:02d}",
                seed=(config.seed, patient, k),
                geometry={"geom": geom, "jitter": jitter},
            )
        )
    return out


def slice_counts(config: CorpusConfig) -> list[int]:
    """Per-patient slice counts; a profile with ``total_slices`` sums exactly to it."""
    if config.total_slices is None:
        lo, hi = config.slices
        return [int(_rng(config.seed, 2, p).integers(lo, hi + 1)) for p in range(config.patients)]
    base = config.total_slices // config.patients
    extra = config.total_slices - base * config.patients
    order = _rng(config.seed, 4).permutation(config.patients)
    counts = [base] * config.patients
    for p in order[:extra]:
        counts[p] += 1
    return counts


# --------------------------------------------------------------------------
# Disease edits
# --------------------------------------------------------------------------


def _check_severity(severity: float) -> None:
    if not 0.3 <= severity <= 1.0:
        raise ValueError(f"severity must lie in [0.3, 1], got {severity}")


def _heart_diameter(labels: np.ndarray) -> float:
    area = np.count_nonzero(labels != BG)
    return 2.0 * np.sqrt(area / np.pi)


def _ramp(severity: float, lo: float, hi: float) -> float:
    return lo + (hi - lo) * (severity - 0.3) / 0.7


def effusion_mask(labels: np.ndarray, rng: np.random.Generator, severity: float, min_px: float = 1.5) -> np.ndarray:
    """Crescent of pixels just outside the heart covering part of its outline."""
    heart = ndimage.binary_fill_holes(labels != BG)
    dia = _heart_diameter(labels)
    coverage = _ramp(severity, 0.4, 0.9)
    thickness = max(_ramp(severity, 0.03, 0.08) * dia, min_px)
    dist = ndimage.distance_transform_edt(~heart)
    band = (dist > 0) & (dist <= thickness)
    cy, cx = ndimage.center_of_mass(heart)
    yy, xx = np.indices(labels.shape)
    ang = np.arctan2(yy - cy, xx - cx)
    start = rng.uniform(-np.pi, np.pi)
    rel = np.mod(ang - start, 2 * np.pi)
    return band & (rel <= coverage * 2 * np.pi)


def apply_effusion(sample: LabeledSample, seed: int, severity: float, noise: float = 0.03, min_px: float = 1.5) -> LabeledSample:
    """Paint a fluid-intensity crescent around the heart of a normal slice."""
    _check_severity(severity)
    if sample.label_map is None or sample.kind != "normal":
        raise ValueError("effusion must be applied to a normal sample with a label map")
    rng = _rng(seed, _DISEASE_CODE["effusion"])
    mask = effusion_mask(sample.label_map, rng, severity, min_px)
    img = sample.image[0].copy()
    vals = INTENSITY["fluid"] + rng.normal(0.0, noise, size=int(mask.sum()))
    img[mask] = np.clip(vals, 0.0, 1.0)
    return LabeledSample(
        image=img[None].astype(np.float32),
        label_map=None,
        disease_label=1,
        kind="effusion",
        patient_id=sample.patient_id,
        sample_id=sample.sample_id,
        seed=sample.seed + (seed,),
        geometry={**sample.geometry, "edit_mask": mask, "source_labels": sample.label_map, "severity": severity},
    )


def _pool_pairs() -> dict[str, tuple[int, int]]:
    return {"atrial": (RA, LA), "ventricular": (RV, LV)}


def septal_mask(
    labels: np.ndarray, geometry: dict, rng: np.random.Generator, severity: float, pair: str, min_px: float = 2.0
) -> np.ndarray:
    """Horizontal (heart frame) channel through the septum joining a left/right pool pair."""
    size = labels.shape[0]
    geom, jitter = geometry["geom"], geometry["jitter"]
    center, angle, scale = _pose(geom, jitter)
    u, v = _grid(size)
    lx, ly = _to_local(u, v, center, angle, scale)
    left, right = _pool_pairs()[pair]
    ys = [ly[labels == c] for c in (left, right)]
    lo = max(y.min() for y in ys)
    hi = min(y.max() for y in ys)
    dia = _heart_diameter(labels)
    px = 2.0 / (size * scale)  # one pixel in heart-local units
    width = max(_ramp(severity, 0.02, 0.08) * dia, min_px) * px
    mid = 0.5 * (lo + hi)
    y0 = mid + rng.uniform(-0.25, 0.25) * max(hi - lo - width, 0.0)
    xs_l = lx[labels == left].max()
    xs_r = lx[labels == right].min()
    channel = (np.abs(ly - y0) <= width / 2) & (lx >= xs_l - px) & (lx <= xs_r + px)
    return channel & (labels == MYO)


def apply_septal_defect(sample: LabeledSample, seed: int, severity: float, noise: float = 0.03, min_px: float = 2.0) -> LabeledSample:
    """Replace a short stretch of septum between two pools with blood intensity."""
    _check_severity(severity)
    if sample.label_map is None or sample.kind != "normal":
        raise ValueError("septal defect must be applied to a normal sample with a label map")
    rng = _rng(seed, _DISEASE_CODE["septal"])
    pair = ("atrial", "ventricular")[int(rng.integers(0, 2))]
    mask = septal_mask(sample.label_map, sample.geometry, rng, severity, pair, min_px)
    img = sample.image[0].copy()
    vals = INTENSITY["blood"] + rng.normal(0.0, noise, size=int(mask.sum()))
    img[mask] = np.clip(vals, 0.0, 1.0)
    return LabeledSample(
        image=img[None].astype(np.float32),
        label_map=None,
        disease_label=1,
        kind="septal",
        patient_id=sample.patient_id,
        sample_id=sample.sample_id,
        seed=sample.seed + (seed,),
        geometry={**sample.geometry, "edit_mask": mask, "source_labels": sample.label_map, "severity": severity, "pair": pair},
    )


def generate_positive(kind: str, index: int, config: CorpusConfig) -> LabeledSample:
    """One positive slice from its own virtual patient (never a segmentation patient)."""
    if kind not in DISEASES:
        raise ValueError(f"unknown disease kind {kind!r}")
    # patient indices above 10000 keep positive geometries disjoint from normals
    patient = 10_000 * (1 + DISEASES.index(kind)) + index
    pid = f"{kind[:3]}{index:03d}"
    sev_rng = _rng(config.seed, 5, patient)
    severity = float(sev_rng.uniform(*config.severity))
    edit_seed = int(sev_rng.integers(0, 2**31))
    # a random sweep position, so positives and negatives share the slice distribution
    phase = float(sev_rng.uniform(-1.0, 1.0))
    (normal,) = generate_patient(patient, config, n_slices=1, patient_id=pid, phase=phase)
    if kind == "effusion":
        pos = apply_effusion(normal, edit_seed, severity, noise=config.noise, min_px=config.min_effusion_px)
    else:
        pos = apply_septal_defect(normal, edit_seed, severity, noise=config.noise, min_px=config.min_septal_px)
    pos.sample_id = f"positives/{kind}/{pid}"
    return pos


# --------------------------------------------------------------------------
# Corpus
# --------------------------------------------------------------------------


@dataclass
class Corpus:
    """In-memory view of a dataset."""

    normals: list[LabeledSample]
    positives: dict[str, list[LabeledSample]]
    config: CorpusConfig | None = None

    @property
    def patients(self) -> list[str]:
        return sorted({s.patient_id for s in self.normals})

    def normals_of(self, patients) -> list[LabeledSample]:
        keep = set(patients)
        return [s for s in self.normals if s.patient_id in keep]

    @staticmethod
    def stack(samples: list[LabeledSample]) -> tuple[np.ndarray, np.ndarray | None]:
        imgs = np.stack([s.image for s in samples]).astype(np.float32)
        if all(s.label_map is not None for s in samples):
            return imgs, np.stack([s.label_map for s in samples])
        return imgs, None


def build_corpus(config: CorpusConfig) -> Corpus:
    normals = []
    for p, count in enumerate(slice_counts(config)):
        normals.extend(generate_patient(p, config, n_slices=count))
    positives = {kind: [generate_positive(kind, i, config) for i in range(config.positives)] for kind in DISEASES}
    return Corpus(normals, positives, config)


MANIFEST_COLUMNS = ("path", "patient_id", "kind", "has_labelmap")


def _atomic_write_bytes(path: Path, data: bytes) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data)
    os.replace(tmp, path)


def generate_corpus(config: CorpusConfig, root) -> Corpus:
    """Write the dataset to ``root`` (TNSR files plus ``manifest.tsv``)."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    corpus = build_corpus(config)
    rows = []
    for s in corpus.normals:
        pdir = root / s.patient_id
        pdir.mkdir(exist_ok=True)
        stem = s.sample_id.split("/")[-1]
        save_tensor(pdir / f"{stem}.img.tnsr", s.image)
        save_tensor(pdir / f"{stem}.lbl.tnsr", s.label_map.astype(np.uint8))
        rows.append((f"{s.patient_id}/{stem}.img.tnsr", s.patient_id, "normal", "1"))
    for kind, samples in corpus.positives.items():
        kdir = root / "positives" / kind
        kdir.mkdir(parents=True, exist_ok=True)
        for s in samples:
            name = s.sample_id.split("/")[-1]
            save_tensor(kdir / f"{name}.img.tnsr", s.image)
            rows.append((f"positives/{kind}/{name}.img.tnsr", s.patient_id, kind, "0"))
    lines = ["\t".join(MANIFEST_COLUMNS)] + ["\t".join(r) for r in rows]
    _atomic_write_bytes(root / "manifest.tsv", ("\n".join(lines) + "\n").encode("utf-8"))
    return corpus


def load_corpus(root) -> Corpus:
    """Read a dataset written by :func:`generate_corpus`."""
    root = Path(root)
    normals, positives = [], {k: [] for k in DISEASES}
    with open(root / "manifest.tsv", newline="") as f:
        for row in csv.DictReader(f, delimiter="\t"):
            path = root / row["path"]
            img = load_tensor(path)
            sample_id = row["path"][: -len(".img.tnsr")]
            if row["kind"] == "normal":
                lbl = load_tensor(str(path).replace(".img.tnsr", ".lbl.tnsr")) if row["has_labelmap"] == "1" else None
                normals.append(LabeledSample(img, lbl, 0, "normal", row["patient_id"], sample_id))
            else:
                positives.setdefault(row["kind"], []).append(LabeledSample(img, None, 1, row["kind"], row["patient_id"], sample_id))
    return Corpus(normals, positives)


def manifest_digest(root) -> str:
    return hashlib.sha256((Path(root) / "manifest.tsv").read_bytes()).hexdigest()
