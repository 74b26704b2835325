"""Dataset manifests, synthetic domains, and patient-aware splits.

Synthetic samples are class mean + per-patient shift + gaussian noise,
deterministic per (seed, sample index). The two standard domains put their
class-mean patterns on disjoint pixel supports (general = left half,
medical = right half) so a mixed task genuinely needs both.
"""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field

import numpy as np

MODALITIES = ("color", "xray", "oct", "ct", "mri")


class ManifestError(ValueError):
    """Malformed manifest file; message names the offending row."""


class SplitError(ValueError):
    """Split spec infeasible for the manifest."""


@dataclass(frozen=True)
class ManifestEntry:
    sample_ref: str
    label: int
    patient_id: str
    modality: str


@dataclass
class DatasetManifest:
    name: str
    num_classes: int
    entries: list = field(default_factory=list)

    def patients(self):
        return sorted({e.patient_id for e in self.entries})

    def by_ref(self):
        return {e.sample_ref: e for e in self.entries}

    def labels(self):
        return np.array([e.label for e in self.entries], dtype=np.intp)


def load_manifest(path, num_classes=None, name=None):
    """Parse a manifest CSV with header sample_ref,label,patient_id,modality."""
    required = ["sample_ref", "label", "patient_id", "modality"]
    with open(path, newline="") as f:
        reader = csv.reader(f)
        try:
            header = next(reader)
        except StopIteration:
            raise ManifestError(f"{path}: empty file") from None
        if header != required:
            raise ManifestError(f"{path}: header {header} != {required}")
        entries = []
        seen_refs = set()
        for row_no, row in enumerate(reader, start=2):
            if len(row) != 4:
                raise ManifestError(f"{path}:{row_no}: expected 4 columns, got {len(row)}")
            ref, label_s, patient, modality = row
            try:
                label = int(label_s)
            except ValueError:
                raise ManifestError(f"{path}:{row_no}: label {label_s!r} is not an integer") from None
            if label < 0 or (num_classes is not None and label >= num_classes):
                raise ManifestError(
                    f"{path}:{row_no}: label {label} outside [0, {num_classes})"
                )
            if modality not in MODALITIES:
                raise ManifestError(f"{path}:{row_no}: modality {modality!r} not in {MODALITIES}")
            if ref in seen_refs:
                raise ManifestError(f"{path}:{row_no}: duplicate sample_ref {ref!r}")
            seen_refs.add(ref)
            entries.append(ManifestEntry(ref, label, patient, modality))
    if not entries:
        raise ManifestError(f"{path}: no data rows")
    if num_classes is None:
        num_classes = max(e.label for e in entries) + 1
    return DatasetManifest(name=name or str(path), num_classes=num_classes, entries=entries)


def save_manifest(manifest, path):
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["sample_ref", "label", "patient_id", "modality"])
        for e in manifest.entries:
            writer.writerow([e.sample_ref, e.label, e.patient_id, e.modality])


# -- synthetic domains -----------------------------------------------------------


@dataclass(frozen=True)
class SyntheticDomainSpec:
    domain_tag: str
    num_classes: int
    image_size: int
    class_mean_scale: float
    noise_std: float
    patient_count: int
    per_patient_shift_std: float
    seed: int

    def __post_init__(self):
        if self.noise_std < 0 or self.per_patient_shift_std < 0:
            raise ValueError("noise/shift stds must be >= 0")
        if self.patient_count < 1 or self.num_classes < 1:
            raise ValueError("patient_count and num_classes must be >= 1")

    def to_dict(self):
        return asdict(self)


_DOMAIN_MODALITY = {"general": "color", "medical": "xray"}


def _domain_mask(spec):
    """Boolean pixel mask of the class-mean subspace for this domain."""
    s = spec.image_size
    mask = np.zeros((1, s, s), dtype=bool)
    if spec.domain_tag == "general":
        mask[:, :, : s // 2] = True
    elif spec.domain_tag == "medical":
        mask[:, :, s // 2:] = True
    else:
        mask[:] = True
    return mask


def class_means(spec):
    """(num_classes, 1, S, S) orthonormal class patterns scaled by
    class_mean_scale; orthonormality pins pairwise distance to scale*sqrt(2)."""
    mask = _domain_mask(spec)
    support = int(mask.sum())
    if spec.num_classes > support:
        raise ValueError(f"num_classes {spec.num_classes} exceeds subspace size {support}")
    rng = np.random.default_rng([spec.seed, 0])
    raw = rng.normal(size=(support, spec.num_classes))
    q, _ = np.linalg.qr(raw)
    means = np.zeros((spec.num_classes, 1, spec.image_size, spec.image_size))
    for c in range(spec.num_classes):
        means[c][mask] = spec.class_mean_scale * q[:, c]
    return means


def _patient_shift(spec, patient_index):
    rng = np.random.default_rng([spec.seed, 1, patient_index])
    return rng.normal(0.0, spec.per_patient_shift_std, size=(1, spec.image_size, spec.image_size))


def sample_layout(spec, index):
    """(label, patient_index) for a sample index: patients round-robin,
    labels cycling so every patient sees every class."""
    patient = index % spec.patient_count
    label = (index // spec.patient_count) % spec.num_classes
    return label, patient


def synth_dataset(spec, num_samples=512):
    """Returns (manifest, generator). generator(indices) -> (n, 1, S, S)
    images, a pure function of (spec.seed, index)."""
    means = class_means(spec)
    shifts = np.stack([_patient_shift(spec, p) for p in range(spec.patient_count)])
    modality = _DOMAIN_MODALITY.get(spec.domain_tag, "color")

    entries = []
    for i in range(num_samples):
        label, patient = sample_layout(spec, i)
        entries.append(
            ManifestEntry(f"synth:{i}", label, f"p{patient:04d}", modality)
        )
    manifest = DatasetManifest(
        name=f"synthetic-{spec.domain_tag}", num_classes=spec.num_classes, entries=entries
    )

    def generator(indices):
        indices = np.atleast_1d(np.asarray(indices, dtype=np.intp))
        out = np.empty((len(indices), 1, spec.image_size, spec.image_size))
        for j, i in enumerate(indices):
            label, patient = sample_layout(spec, int(i))
            rng = np.random.default_rng([spec.seed, 2, int(i)])
            noise = rng.normal(0.0, spec.noise_std, size=out.shape[1:]) if spec.noise_std else 0.0
            out[j] = means[label] + shifts[patient] + noise
        return out

    return manifest, generator


def parse_synth_ref(ref):
    if not ref.startswith("synth:"):
        raise ManifestError(f"not a synthetic sample_ref: {ref!r}")
    return int(ref.split(":", 1)[1])


# -- image files -----------------------------------------------------------------


def load_image(path, expected_shape=None):
    """Read a PGM/PPM (P2/P3/P5/P6, scaled to [0,1]) or headerless raw
    float64 tensor (.raw, needs expected_shape) as a (C, H, W) array."""
    path = str(path)
    if path.endswith(".raw"):
        if expected_shape is None:
            raise ManifestError(f"{path}: raw tensors need an expected shape")
        data = np.fromfile(path, dtype="<f8")
        if data.size != int(np.prod(expected_shape)):
            raise ManifestError(f"{path}: {data.size} values, want {expected_shape}")
        return data.reshape(expected_shape)
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:2] not in (b"P2", b"P3", b"P5", b"P6"):
        raise ManifestError(f"{path}: unsupported image format {blob[:2]!r}")
    magic = blob[:2].decode()
    # header tokens: magic, width, height, maxval (comments start with #)
    tokens = []
    pos = 2
    while len(tokens) < 3:
        while pos < len(blob) and blob[pos:pos + 1].isspace():
            pos += 1
        if blob[pos:pos + 1] == b"#":
            while pos < len(blob) and blob[pos:pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(blob) and not blob[pos:pos + 1].isspace():
            pos += 1
        tokens.append(int(blob[start:pos]))
    width, height, maxval = tokens
    pos += 1  # single whitespace after maxval
    channels = 3 if magic in ("P3", "P6") else 1
    count = width * height * channels
    if magic in ("P2", "P3"):
        values = np.array(blob[pos:].split()[:count], dtype=np.float64)
    else:
        dtype = np.uint8 if maxval < 256 else ">u2"
        values = np.frombuffer(blob, dtype=dtype, count=count, offset=pos).astype(np.float64)
    if values.size != count:
        raise ManifestError(f"{path}: expected {count} pixel values, got {values.size}")
    img = values.reshape(height, width, channels).transpose(2, 0, 1) / maxval
    return img


def materialize(manifest, generator=None, expected_shape=None, refs=None, hflip=False):
    """Load (X, y) arrays for the given sample refs (all by default).

    `hflip` mirrors every image left-right — the one (deterministic)
    augmentation supported.
    """
    lookup = manifest.by_ref()
    refs = list(refs) if refs is not None else [e.sample_ref for e in manifest.entries]
    labels = np.array([lookup[r].label for r in refs], dtype=np.intp)
    synth_refs = [r for r in refs if r.startswith("synth:")]
    if synth_refs:
        if len(synth_refs) != len(refs):
            raise ManifestError("manifest mixes synthetic and file sample_refs")
        if generator is None:
            raise ManifestError("manifest holds synthetic refs but no generator was given")
        images = generator([parse_synth_ref(r) for r in refs])
    else:
        images = np.stack([load_image(r, expected_shape) for r in refs])
    if hflip:
        images = np.ascontiguousarray(images[..., ::-1])
    return images, labels


# -- patient splits -----------------------------------------------------------------


@dataclass(frozen=True)
class SplitSpec:
    seen_patients: int
    unseen_patients: int
    seed: int = 0
    train_fraction_within_seen: float = 0.8

    def __post_init__(self):
        if self.seen_patients < 1 or self.unseen_patients < 0:
            raise ValueError("need seen >= 1 and unseen >= 0 patients")
        if not 0.0 < self.train_fraction_within_seen < 1.0:
            raise ValueError("train_fraction_within_seen must lie in (0, 1)")

    def to_dict(self):
        return asdict(self)


@dataclass
class SplitResult:
    train: list
    test_seen: list
    test_unseen: list
    seed: int
    spec: SplitSpec

    def part(self, name):
        if name not in ("train", "test_seen", "test_unseen"):
            raise SplitError(f"unknown split part {name!r}")
        return getattr(self, name)

    def to_json(self):
        return json.dumps(
            {
                "train": self.train,
                "test_seen": self.test_seen,
                "test_unseen": self.test_unseen,
                "seed": self.seed,
                "spec": self.spec.to_dict(),
            },
            sort_keys=True,
        )

    def audit(self, manifest):
        """Leakage and coverage checks; `leakage_free` is the hard invariant."""
        lookup = manifest.by_ref()
        pat = lambda refs: {lookup[r].patient_id for r in refs}
        train_p, seen_p, unseen_p = pat(self.train), pat(self.test_seen), pat(self.test_unseen)
        return {
            "leakage_free": not (train_p & unseen_p),
            "seen_consistent": not (seen_p & unseen_p),
            "covered": (train_p | seen_p | unseen_p) <= set(manifest.patients()),
            "train_patients": len(train_p),
            "unseen_patients": len(unseen_p),
        }


def patient_split(manifest, spec):
    """Partition patients by a seeded shuffle: train/test_seen split the seen
    patients' samples per patient; every sample of an unseen patient goes to
    test_unseen."""
    patients = manifest.patients()
    if any(not e.patient_id for e in manifest.entries):
        raise SplitError("patient-ID splits need a non-empty patient_id on every entry")
    needed = spec.seen_patients + spec.unseen_patients
    if needed > len(patients):
        raise SplitError(
            f"spec needs {needed} patients but manifest has {len(patients)}"
        )
    rng = np.random.default_rng(spec.seed)
    order = [patients[i] for i in rng.permutation(len(patients))]
    seen = set(order[: spec.seen_patients])
    unseen = set(order[spec.seen_patients: spec.seen_patients + spec.unseen_patients])

    by_patient = {}
    for e in manifest.entries:
        by_patient.setdefault(e.patient_id, []).append(e.sample_ref)

    train, test_seen, test_unseen = [], [], []
    for pid in sorted(seen):
        refs = by_patient[pid]
        perm = rng.permutation(len(refs))
        n_train = int(round(spec.train_fraction_within_seen * len(refs)))
        chosen = set(perm[:n_train])
        for idx, ref in enumerate(refs):
            (train if idx in chosen else test_seen).append(ref)
    for pid in sorted(unseen):
        test_unseen.extend(by_patient[pid])
    return SplitResult(train, test_seen, test_unseen, spec.seed, spec)


def ood_sweep_specs(mode, seed=0, train_fraction=0.8):
    """Split settings of the three patient-OOD protocols.

    mode 1: seen/unseen totals fixed at 160 -> (160,0),(100,60),(80,80),(60,100)
    mode 2: seen fixed at 80, unseen in {80,60,40,20}
    mode 3: unseen fixed at 20, seen in {140,120,100,80,60}
    """
    if mode == 1:
        pairs = [(160, 0), (100, 60), (80, 80), (60, 100)]
    elif mode == 2:
        pairs = [(80, u) for u in (80, 60, 40, 20)]
    elif mode == 3:
        pairs = [(s, 20) for s in (140, 120, 100, 80, 60)]
    else:
        raise SplitError(f"ood mode must be 1, 2 or 3, got {mode!r}")
    return [
        SplitSpec(seen, unseen, seed=seed, train_fraction_within_seen=train_fraction)
        for seen, unseen in pairs
    ]
