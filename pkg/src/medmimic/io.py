"""On-disk formats: the MMFT binary tensor file, the dataset manifest and
clinical CSV, and the synthetic dataset generator used for benchmarks.

MMFT layout (little-endian throughout):
    bytes 0-3   magic "MMFT"
    byte  4     version (1)
    byte  5     dtype code (1 = float32)
    byte  6     tensor order (1..3)
    byte  7     reserved (0)
    next order*8 bytes: unsigned 64-bit extents
    payload: row-major float32 values
"""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DataError, FormatError, ParameterError, SchemaError
from .tensors import FeatureMatrix

MMFT_MAGIC = b"MMFT"
MMFT_VERSION = 1
MMFT_DTYPE_F32 = 1

ETIOLOGY_CODES = (
    "immune",
    "bacterial",
    "viral",
    "fungal",
    "parasitic",
    "solid_tumor",
    "hematologic",
)


def write_mmft(arr: np.ndarray, path: str | Path) -> None:
    """Write an order-1..3 array as a little-endian float32 MMFT file."""
    arr = np.asarray(arr)
    if arr.ndim < 1 or arr.ndim > 3:
        raise ParameterError(f"MMFT supports order 1..3, got order {arr.ndim}")
    header = MMFT_MAGIC + struct.pack(
        "<BBBB", MMFT_VERSION, MMFT_DTYPE_F32, arr.ndim, 0
    )
    dims = struct.pack(f"<{arr.ndim}Q", *arr.shape)
    payload = np.ascontiguousarray(arr, dtype="<f4").tobytes()
    with open(path, "wb") as fh:
        fh.write(header + dims + payload)


def read_mmft(path: str | Path) -> np.ndarray:
    """Read an MMFT file back into a float32 array."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 8:
        raise FormatError(f"{path}: truncated header")
    if raw[:4] != MMFT_MAGIC:
        raise FormatError(f"{path}: bad magic {raw[:4]!r}")
    version, dtype_code, order, _reserved = struct.unpack("<BBBB", raw[4:8])
    if version != MMFT_VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    if dtype_code != MMFT_DTYPE_F32:
        raise FormatError(f"{path}: unsupported dtype code {dtype_code}")
    if not 1 <= order <= 3:
        raise FormatError(f"{path}: bad tensor order {order}")
    dim_end = 8 + 8 * order
    if len(raw) < dim_end:
        raise FormatError(f"{path}: truncated dims")
    dims = struct.unpack(f"<{order}Q", raw[8:dim_end])
    expected = int(np.prod(dims)) * 4
    payload = raw[dim_end:]
    if len(payload) != expected:
        raise FormatError(
            f"{path}: payload length {len(payload)} != expected {expected}"
        )
    return np.frombuffer(payload, dtype="<f4").reshape(dims).copy()


@dataclass(frozen=True)
class ManifestRow:
    patient_id: str
    ct_file: str
    pet_file: str
    n_ct: int
    n_pet: int
    etiology: str


@dataclass
class ClinicalTable:
    """Clinical feature matrix (a, I) in manifest patient order.

    missing_mask marks cells that were empty in the CSV; values at those
    cells are 0 until per-fold imputation fills them.
    """

    feature_names: list[str]
    values: np.ndarray
    missing_mask: np.ndarray
    etiologies: list[str]
    patient_ids: list[str]

    @property
    def n_features(self) -> int:
        return self.values.shape[0]

    @property
    def n_patients(self) -> int:
        return self.values.shape[1]

    def imputed(self, train_idx: np.ndarray) -> np.ndarray:
        """Fill missing cells with per-feature means over non-missing
        training entries. Returns a new (a, I) matrix."""
        out = self.values.copy()
        for f in range(self.n_features):
            train_vals = self.values[f, train_idx]
            train_miss = self.missing_mask[f, train_idx]
            present = train_vals[~train_miss]
            fill = present.mean() if present.size else 0.0
            out[f, self.missing_mask[f]] = fill
        return out


def load_clinical_csv(path: str | Path) -> ClinicalTable:
    """Parse clinical.csv: columns patient_id, etiology, then numeric features."""
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise SchemaError(f"{path}: empty file")
        if len(header) < 2 or header[0] != "patient_id" or header[1] != "etiology":
            raise SchemaError(
                f"{path}: header must start with patient_id,etiology"
            )
        feature_names = header[2:]
        ids, etis, rows, masks = [], [], [], []
        for lineno, row in enumerate(reader, start=2):
            if len(row) != len(header):
                raise SchemaError(f"{path}:{lineno}: expected {len(header)} cells")
            pid, eti = row[0], row[1]
            if pid in ids:
                raise SchemaError(f"{path}:{lineno}: duplicate patient_id {pid!r}")
            if eti not in ETIOLOGY_CODES:
                raise SchemaError(f"{path}:{lineno}: unknown etiology {eti!r}")
            vals, miss = [], []
            for col, cell in enumerate(row[2:], start=3):
                if cell.strip() == "":
                    vals.append(0.0)
                    miss.append(True)
                else:
                    try:
                        vals.append(float(cell))
                    except ValueError:
                        raise SchemaError(
                            f"{path}:{lineno}: non-numeric cell in column {col}: {cell!r}"
                        )
                    miss.append(False)
            ids.append(pid)
            etis.append(eti)
            rows.append(vals)
            masks.append(miss)
    if not ids:
        raise SchemaError(f"{path}: no data rows")
    values = np.asarray(rows, dtype=np.float64).T
    mask = np.asarray(masks, dtype=bool).T
    if values.size == 0:
        values = values.reshape(0, len(ids))
        mask = mask.reshape(0, len(ids))
    return ClinicalTable(feature_names, values, mask, etis, ids)


def load_manifest(path: str | Path) -> list[ManifestRow]:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        required = {"patient_id", "ct_file", "pet_file", "n_ct", "n_pet", "etiology"}
        if reader.fieldnames is None or not required.issubset(reader.fieldnames):
            raise SchemaError(f"{path}: manifest needs columns {sorted(required)}")
        rows = []
        seen = set()
        for rec in reader:
            pid = rec["patient_id"]
            if pid in seen:
                raise SchemaError(f"{path}: duplicate patient_id {pid!r}")
            seen.add(pid)
            if rec["etiology"] not in ETIOLOGY_CODES:
                raise SchemaError(f"{path}: unknown etiology {rec['etiology']!r}")
            rows.append(
                ManifestRow(
                    patient_id=pid,
                    ct_file=rec["ct_file"],
                    pet_file=rec["pet_file"],
                    n_ct=int(rec["n_ct"]),
                    n_pet=int(rec["n_pet"]),
                    etiology=rec["etiology"],
                )
            )
    if not rows:
        raise SchemaError(f"{path}: empty manifest")
    return rows


def load_dataset(
    data_dir: str | Path,
) -> tuple[list[FeatureMatrix], list[FeatureMatrix], ClinicalTable]:
    """Load manifest.csv, per-patient MMFT feature files, and clinical.csv.

    Patient order is the manifest order and is identical across outputs.
    """
    data_dir = Path(data_dir)
    manifest_path = data_dir / "manifest.csv"
    clinical_path = data_dir / "clinical.csv"
    for p in (manifest_path, clinical_path):
        if not p.exists():
            raise DataError(f"missing required file: {p}")
    manifest = load_manifest(manifest_path)
    clinical = load_clinical_csv(clinical_path)

    clin_order = {pid: i for i, pid in enumerate(clinical.patient_ids)}
    if set(clin_order) != {r.patient_id for r in manifest}:
        raise SchemaError("manifest and clinical.csv patient sets differ")
    perm = [clin_order[r.patient_id] for r in manifest]
    clinical = ClinicalTable(
        clinical.feature_names,
        clinical.values[:, perm],
        clinical.missing_mask[:, perm],
        [clinical.etiologies[i] for i in perm],
        [clinical.patient_ids[i] for i in perm],
    )
    for row, eti in zip(manifest, clinical.etiologies):
        if row.etiology != eti:
            raise SchemaError(
                f"etiology mismatch for {row.patient_id}: "
                f"manifest={row.etiology} clinical={eti}"
            )

    ct, pet = [], []
    for row in manifest:
        for fname, declared, dest in (
            (row.ct_file, row.n_ct, ct),
            (row.pet_file, row.n_pet, pet),
        ):
            fpath = data_dir / fname
            if not fpath.exists():
                raise DataError(f"missing feature file: {fpath}")
            arr = read_mmft(fpath)
            if arr.ndim != 2:
                raise SchemaError(f"{fpath}: expected order-2 tensor")
            if arr.shape[0] != declared:
                raise SchemaError(
                    f"{fpath}: manifest declares {declared} slices, "
                    f"file has {arr.shape[0]}"
                )
            dest.append(FeatureMatrix(arr.astype(np.float64)))
    return ct, pet, clinical


@dataclass(frozen=True)
class SyntheticSpec:
    """Parameters of the synthetic multimodal dataset generator."""

    n_patients: int
    b_ct: int = 6
    b_pet: int = 6
    a: int = 4
    slice_range_ct: tuple[int, int] = (3, 6)
    slice_range_pet: tuple[int, int] = (4, 8)
    class_weights: dict[str, float] | None = None
    interaction_mode: str = "additive"  # or "cross_modal_xor"
    noise_scale: float = 1.0
    separation: float = 4.0
    seed: int = 0

    def resolved_weights(self) -> dict[str, float]:
        if self.class_weights is not None:
            w = dict(self.class_weights)
        elif self.interaction_mode == "cross_modal_xor":
            w = {"immune": 0.5, "solid_tumor": 0.5}
        else:
            w = {"immune": 0.69, "solid_tumor": 0.31}
        total = sum(w.values())
        if abs(total - 1.0) > 1e-9:
            raise ParameterError(f"class weights sum to {total}, expected 1")
        for code in w:
            if code not in ETIOLOGY_CODES:
                raise ParameterError(f"unknown etiology code {code!r}")
        return w

    def validate(self) -> None:
        if self.n_patients < 2:
            raise ParameterError("n_patients must be >= 2")
        for lo, hi in (self.slice_range_ct, self.slice_range_pet):
            if lo < 1 or hi < lo:
                raise ParameterError(f"bad slice range ({lo}, {hi})")
        if self.interaction_mode not in ("additive", "cross_modal_xor"):
            raise ParameterError(f"unknown interaction mode {self.interaction_mode!r}")
        if self.noise_scale < 0:
            raise ParameterError("noise_scale must be >= 0")
        self.resolved_weights()


def _largest_remainder_counts(weights: dict[str, float], n: int) -> dict[str, int]:
    """Deterministic integer allocation: floor everything, then hand the
    remaining units to the largest fractional parts (ties by code order)."""
    codes = sorted(weights)
    exact = {c: weights[c] * n for c in codes}
    counts = {c: int(np.floor(exact[c])) for c in codes}
    remaining = n - sum(counts.values())
    by_frac = sorted(codes, key=lambda c: (-(exact[c] - counts[c]), c))
    for c in by_frac[:remaining]:
        counts[c] += 1
    return counts


def synth_generate(spec: SyntheticSpec, out_dir: str | Path) -> None:
    """Write a complete synthetic dataset (manifest + MMFT + clinical CSV).

    additive mode: per-class centroids separated by `separation` noise
    units in both imaging and clinical features; any single modality is
    informative.

    cross_modal_xor mode: the label is the parity of a clinical sign bit
    and an imaging sign bit, so neither modality alone carries the label;
    the etiology column encodes the composite label (class 0 -> first
    code, class 1 -> second).
    """
    spec.validate()
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(spec.seed)
    weights = spec.resolved_weights()
    counts = _largest_remainder_counts(weights, spec.n_patients)
    codes = sorted(weights)
    etiologies = [c for c in codes for _ in range(counts[c])]
    order = rng.permutation(spec.n_patients)
    etiologies = [etiologies[i] for i in order]

    sep = spec.separation * spec.noise_scale
    centroids = {c: k * sep for k, c in enumerate(codes)}

    manifest_rows = []
    clinical_rows = []
    for i, eti in enumerate(etiologies):
        pid = f"p{i:04d}"
        n_ct = int(rng.integers(spec.slice_range_ct[0], spec.slice_range_ct[1] + 1))
        n_pet = int(rng.integers(spec.slice_range_pet[0], spec.slice_range_pet[1] + 1))
        ct = rng.normal(0.0, spec.noise_scale, size=(n_ct, spec.b_ct))
        pet = rng.normal(0.0, spec.noise_scale, size=(n_pet, spec.b_pet))
        clin = rng.normal(0.0, spec.noise_scale, size=spec.a)

        if spec.interaction_mode == "additive":
            mu = centroids[eti]
            ct[:, 0] += mu
            pet[:, 0] += mu
            clin[0] += mu
        else:
            u = int(rng.integers(0, 2))  # clinical sign bit
            v = int(rng.integers(0, 2))  # imaging sign bit
            label = u ^ v
            eti = codes[label]
            etiologies[i] = eti
            clin[0] += (2 * u - 1) * sep
            ct[:, 0] += (2 * v - 1) * sep
            pet[:, 0] += (2 * v - 1) * sep

        ct_file = f"{pid}_ct.mmft"
        pet_file = f"{pid}_pet.mmft"
        write_mmft(ct.astype(np.float32), out_dir / ct_file)
        write_mmft(pet.astype(np.float32), out_dir / pet_file)
        manifest_rows.append((pid, ct_file, pet_file, n_ct, n_pet, eti))
        clinical_rows.append((pid, eti, clin))

    with open(out_dir / "manifest.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["patient_id", "ct_file", "pet_file", "n_ct", "n_pet", "etiology"])
        w.writerows(manifest_rows)
    with open(out_dir / "clinical.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["patient_id", "etiology"] + [f"feat{j}" for j in range(spec.a)])
        for pid, eti, clin in clinical_rows:
            w.writerow([pid, eti] + [f"{v:.9g}" for v in clin])
