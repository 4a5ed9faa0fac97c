"""Per-patient feature extraction.

Input layout: input_dir contains one subdirectory per patient; the image
files inside (sorted by name) are that patient's slices in order.
Output: one order-2 MMFT file (n_slices x expected_dim) per patient plus
a manifest fragment CSV listing patient_id, file, n_slices, feat_dim.

Patients are independent, so extraction parallelizes freely; each output
file is written atomically.
"""

import csv
from dataclasses import dataclass, field
from pathlib import Path

from .errors import BridgeError
from .mmft import write_mmft_atomic
from .models import EXPECTED_DIMS, build_encoder, encode_stack, load_slice

IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg", ".bmp")


@dataclass(frozen=True)
class BridgeConfig:
    model: str
    input_dir: Path
    out_dir: Path
    device: str = "cpu"
    token: str = "class"  # or "mean": which ViT token aggregate to pool
    pretrained: bool = True
    expected_dim: int = field(default=0)

    def __post_init__(self):
        if self.model not in EXPECTED_DIMS:
            raise BridgeError(
                f"unknown model {self.model!r}; expected one of "
                f"{sorted(EXPECTED_DIMS)}"
            )
        object.__setattr__(self, "input_dir", Path(self.input_dir))
        object.__setattr__(self, "out_dir", Path(self.out_dir))
        object.__setattr__(self, "expected_dim", EXPECTED_DIMS[self.model])


def patient_dirs(input_dir: Path) -> list[Path]:
    dirs = sorted(p for p in input_dir.iterdir() if p.is_dir())
    if not dirs:
        raise BridgeError(f"no patient subdirectories under {input_dir}")
    return dirs


def slice_files(patient_dir: Path) -> list[Path]:
    files = sorted(
        p for p in patient_dir.iterdir()
        if p.suffix.lower() in IMAGE_SUFFIXES
    )
    if not files:
        raise BridgeError(f"no slice images in {patient_dir}")
    return files


def extract(cfg: BridgeConfig) -> list[dict]:
    """Run the encoder over every patient and return the manifest rows."""
    encoder = build_encoder(cfg.model, cfg.token, cfg.pretrained)
    cfg.out_dir.mkdir(parents=True, exist_ok=True)
    rows = []
    for pdir in patient_dirs(cfg.input_dir):
        slices = [load_slice(f) for f in slice_files(pdir)]
        feats = encode_stack(encoder, cfg.model, slices, cfg.device)
        out_file = f"{pdir.name}.mmft"
        write_mmft_atomic(feats, cfg.out_dir / out_file)
        rows.append(
            {
                "patient_id": pdir.name,
                "file": out_file,
                "n_slices": feats.shape[0],
                "feat_dim": feats.shape[1],
            }
        )
    fragment = cfg.out_dir / "manifest_fragment.csv"
    with open(fragment, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=["patient_id", "file", "n_slices", "feat_dim"])
        w.writeheader()
        w.writerows(rows)
    return rows
