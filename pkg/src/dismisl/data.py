"""Feature bags, survival labels, the bag codec, manifests, resampling, fold
splitting and the synthetic survival-bag generator."""

from dataclasses import asdict, dataclass, field
import csv
import json
import math
import os
import struct

import numpy as np

from .errors import DataError, FormatError, ValidationError

MAGIC = b"DMSB"
VERSION = 1
_HEADER = struct.Struct("<4sHII")


@dataclass(frozen=True, eq=False)
class FeatureBag:
    """One patient's tile-feature matrix (n tiles x d features), float32."""

    patient_id: str
    features: np.ndarray

    def __post_init__(self):
        feats = np.asarray(self.features, dtype=np.float32)
        if feats.ndim != 2 or feats.shape[0] < 1 or feats.shape[1] < 1:
            raise ValidationError(f"bag {self.patient_id!r}: expected an n x d matrix with n, d >= 1")
        if not np.all(np.isfinite(feats)):
            raise ValidationError(f"bag {self.patient_id!r}: non-finite feature values")
        object.__setattr__(self, "features", feats)

    @property
    def n(self):
        return self.features.shape[0]

    @property
    def d(self):
        return self.features.shape[1]


@dataclass(frozen=True)
class SurvivalLabel:
    time: float
    event: int

    def __post_init__(self):
        if not (self.time > 0 and math.isfinite(self.time)):
            raise ValidationError(f"survival time must be positive, got {self.time}")
        if self.event not in (0, 1):
            raise ValidationError(f"event must be 0 or 1, got {self.event}")


def label_arrays(labels):
    """Split a list of SurvivalLabel into (times, events) arrays."""
    time = np.array([lab.time for lab in labels], dtype=np.float64)
    event = np.array([lab.event for lab in labels], dtype=np.int64)
    return time, event


# -- bag codec ---------------------------------------------------------------

def encode_bag(bag):
    body = np.ascontiguousarray(bag.features, dtype="<f4").tobytes()
    return _HEADER.pack(MAGIC, VERSION, bag.n, bag.d) + body


def decode_bag(raw, patient_id=""):
    if len(raw) < _HEADER.size:
        raise FormatError("header", f"need {_HEADER.size} bytes, got {len(raw)}")
    magic, version, n, d = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise FormatError("magic", f"expected {MAGIC!r}, got {magic!r}")
    if version != VERSION:
        raise FormatError("version", f"unsupported version {version}")
    if n < 1 or d < 1:
        raise FormatError("dimensions", f"n={n}, d={d} must both be >= 1")
    expected = n * d * 4
    payload = raw[_HEADER.size:]
    if len(payload) < expected:
        raise FormatError("payload", f"truncated: expected {expected} bytes for {n}x{d}, got {len(payload)}")
    if len(payload) > expected:
        raise FormatError("payload", f"{len(payload) - expected} trailing bytes after {n}x{d} matrix")
    feats = np.frombuffer(payload, dtype="<f4").reshape(n, d).astype(np.float32)
    return FeatureBag(patient_id, feats)


def write_bag(bag, path):
    with open(path, "wb") as fh:
        fh.write(encode_bag(bag))


def read_bag(path, patient_id=None):
    with open(path, "rb") as fh:
        raw = fh.read()
    if patient_id is None:
        patient_id = os.path.splitext(os.path.basename(path))[0]
    return decode_bag(raw, patient_id)


# -- manifest ----------------------------------------------------------------

MANIFEST_FIELDS = ("patient_id", "bag_path", "time", "event")


@dataclass(frozen=True)
class ManifestEntry:
    patient_id: str
    bag_path: str
    time: float
    event: int


def write_manifest(entries, path):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(MANIFEST_FIELDS)
        for e in entries:
            writer.writerow([e.patient_id, e.bag_path, repr(float(e.time)), int(e.event)])


def read_manifest(path):
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != MANIFEST_FIELDS:
            raise FormatError("header", f"manifest header must be {','.join(MANIFEST_FIELDS)}")
        entries = []
        seen = set()
        for lineno, row in enumerate(reader, start=2):
            pid = row["patient_id"]
            if pid in seen:
                raise FormatError("patient_id", f"duplicate id {pid!r} on line {lineno}")
            seen.add(pid)
            try:
                entries.append(ManifestEntry(pid, row["bag_path"], float(row["time"]), int(row["event"])))
            except (TypeError, ValueError) as exc:
                raise FormatError("row", f"line {lineno}: {exc}") from exc
    return entries


def load_dataset(manifest_path):
    """Read a manifest and every bag it references.

    Relative bag paths resolve against the manifest's directory.
    """
    base = os.path.dirname(os.path.abspath(manifest_path))
    bags, labels = [], []
    for e in read_manifest(manifest_path):
        path = e.bag_path if os.path.isabs(e.bag_path) else os.path.join(base, e.bag_path)
        if not os.path.exists(path):
            raise DataError(f"patient {e.patient_id}: bag file not found: {path}")
        try:
            bags.append(read_bag(path, e.patient_id))
        except FormatError as exc:
            raise DataError(f"patient {e.patient_id}: {exc}") from exc
        labels.append(SurvivalLabel(e.time, e.event))
    return bags, labels


# -- resampling and folds -----------------------------------------------------

def resample_indices(n, target_n, rng):
    if target_n < 1:
        raise ValidationError("target_n must be >= 1")
    if n >= target_n:
        return rng.choice(n, size=target_n, replace=False)
    reps, rem = divmod(target_n, n)
    idx = np.concatenate([np.tile(np.arange(n), reps), rng.choice(n, size=rem, replace=False)])
    return rng.permutation(idx)


def resample_bag(bag, target_n, seed):
    """Fixed-size bag: subsample without replacement, or repeat every tile
    floor(target/n) times and fill the remainder without replacement."""
    rng = np.random.default_rng(seed)
    idx = resample_indices(bag.n, target_n, rng)
    return FeatureBag(bag.patient_id, bag.features[idx])


@dataclass(frozen=True)
class FoldSplit:
    folds: list  # (train_ids, validation_ids) tuples

    def __len__(self):
        return len(self.folds)


def split_folds(ids, n_folds, seed):
    ids = list(ids)
    if n_folds < 2:
        raise ValidationError("n_folds must be >= 2")
    if len(ids) < n_folds:
        raise ValidationError(f"{len(ids)} patients cannot fill {n_folds} folds")
    if len(set(ids)) != len(ids):
        raise ValidationError("patient ids must be unique")
    perm = np.random.default_rng(seed).permutation(len(ids))
    chunks = np.array_split(perm, n_folds)
    folds = []
    for k in range(n_folds):
        val = [ids[i] for i in sorted(chunks[k])]
        held = set(val)
        train = [pid for pid in ids if pid not in held]
        folds.append((train, val))
    return FoldSplit(folds)


# -- synthetic data -----------------------------------------------------------

SIGNAL_MODES = ("extreme", "distributional")


@dataclass(frozen=True)
class SyntheticSpec:
    """Parameters of the planted-signal generator.

    ``nuisance_scale`` is the standard deviation of a per-patient offset added
    to every tile along the signal axis, a stand-in for slide-level stain
    shift. The default of 0 leaves it out.
    """

    n_patients: int = 200
    tiles_per_bag_range: tuple = (100, 400)
    d: int = 32
    signal_mode: str = "distributional"
    signal_strength: float = 3.0
    censoring_fraction: float = 0.2
    seed: int = 0
    nuisance_scale: float = 0.0
    extreme_shift: float = 8.0
    distributional_shift: float = 3.0
    max_fraction: float = 0.6

    def __post_init__(self):
        lo, hi = self.tiles_per_bag_range
        object.__setattr__(self, "tiles_per_bag_range", (int(lo), int(hi)))
        if self.n_patients < 1:
            raise ValidationError("n_patients must be >= 1")
        if not 1 <= lo <= hi:
            raise ValidationError(f"tiles_per_bag_range must satisfy 1 <= min <= max, got {(lo, hi)}")
        if self.d < 1:
            raise ValidationError("d must be >= 1")
        if self.signal_mode not in SIGNAL_MODES:
            raise ValidationError(f"signal_mode must be one of {SIGNAL_MODES}")
        if self.signal_strength < 0:
            raise ValidationError("signal_strength must be non-negative")
        if not 0 <= self.censoring_fraction < 1:
            raise ValidationError("censoring_fraction must lie in [0, 1)")
        if not 0 <= self.seed < 2 ** 64:
            raise ValidationError("seed must be an unsigned 64-bit integer")
        if self.nuisance_scale < 0:
            raise ValidationError("nuisance_scale must be non-negative")
        if not 0 < self.max_fraction <= 1:
            raise ValidationError("max_fraction must lie in (0, 1]")

    @classmethod
    def from_dict(cls, doc):
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(doc) - known
        if unknown:
            raise ValidationError(f"unknown synthetic fields: {sorted(unknown)}")
        doc = dict(doc)
        if "tiles_per_bag_range" in doc:
            doc["tiles_per_bag_range"] = tuple(doc["tiles_per_bag_range"])
        return cls(**doc)

    def to_dict(self):
        out = asdict(self)
        out["tiles_per_bag_range"] = list(self.tiles_per_bag_range)
        return out

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def generate_synthetic(spec, return_risk=False):
    """Seeded planted-signal bags and labels.

    Every tile starts as a standard normal vector. A latent risk r ~ U[0, 1]
    per patient controls the signal: in ``extreme`` mode ceil(1%) of tiles are
    shifted along a fixed axis by ``extreme_shift * r``; in ``distributional``
    mode a fraction ``max_fraction * r`` of tiles is shifted by the fixed
    ``distributional_shift``. Event times are exponential with hazard
    exp(signal_strength * r).
    """
    rng = np.random.default_rng(spec.seed)
    # seed-independent, so cohorts drawn with different seeds share the signal
    axis = np.full(spec.d, 1.0 / math.sqrt(spec.d))
    lo, hi = spec.tiles_per_bag_range

    bags, risks = [], np.empty(spec.n_patients)
    width = len(str(spec.n_patients - 1))
    for i in range(spec.n_patients):
        n = int(rng.integers(lo, hi + 1))
        r = rng.uniform()
        x = rng.standard_normal((n, spec.d))
        offset = spec.nuisance_scale * rng.standard_normal()
        if spec.signal_mode == "extreme":
            n_shift = math.ceil(0.01 * n)
            shift = spec.extreme_shift * r
        else:
            n_shift = int(round(spec.max_fraction * r * n))
            shift = spec.distributional_shift
        chosen = rng.choice(n, size=n_shift, replace=False)
        x[chosen] += shift * axis
        x += offset * axis
        bags.append(FeatureBag(f"p{i:0{width}d}", x))
        risks[i] = r

    hazard = np.exp(spec.signal_strength * risks)
    times = rng.exponential(size=spec.n_patients) / hazard
    events = np.ones(spec.n_patients, dtype=np.int64)
    n_cens = int(round(spec.censoring_fraction * spec.n_patients))
    censored = rng.choice(spec.n_patients, size=n_cens, replace=False)
    events[censored] = 0
    # 1 - U keeps censored times strictly positive
    times[censored] *= 1.0 - rng.uniform(size=n_cens)
    labels = [SurvivalLabel(float(t), int(e)) for t, e in zip(times, events)]
    if return_risk:
        return bags, labels, risks
    return bags, labels
