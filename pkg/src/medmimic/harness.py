"""Evaluation harness: one-vs-rest macro-AUROC, the seven diagnostic
task label mappings, k-fold cross-validation, the ablation/sweep driver,
and report emission.
"""

from __future__ import annotations

import csv
import hashlib
import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy.stats import rankdata

from .attention import (
    FusedTensor,
    align_and_fuse,
    fuse_clinical_only,
    fuse_single_modality,
)
from .errors import DegenerateLabelsError, ParameterError, SchemaError
from .io import ClinicalTable, load_dataset
from .pca import pca_fit, pca_transform
from .resfusion import (
    Hyper,
    MfcnModel,
    ResFusionConfig,
    TrainReport,
    train_linear_baseline,
    train_model,
)
from .tensors import (
    FeatureMatrix,
    FeatureTensor,
    NormStats,
    fit_norm_stats,
    global_avg_pool,
    pad_stack,
)

MODALITIES = ("clinical", "ct", "pet")

BENIGN = ("immune", "bacterial", "viral", "fungal", "parasitic")
INFECTIOUS = ("bacterial", "viral", "fungal", "parasitic")
MALIGNANT = ("solid_tumor", "hematologic")


@dataclass(frozen=True)
class TaskSpec:
    task_id: int
    class_names: tuple[str, ...]
    mapping: dict[str, int]


def _task(task_id, class_names, mapping) -> TaskSpec:
    return TaskSpec(task_id, tuple(class_names), dict(mapping))


TASKS: dict[int, TaskSpec] = {
    1: _task(1, ("benign", "malignant"),
             {**{c: 0 for c in BENIGN}, **{c: 1 for c in MALIGNANT}}),
    2: _task(2, ("immune", "non_immune"),
             {"immune": 0, **{c: 1 for c in INFECTIOUS + MALIGNANT}}),
    3: _task(3, ("infectious", "non_infectious"),
             {**{c: 0 for c in INFECTIOUS},
              "immune": 1, "solid_tumor": 1, "hematologic": 1}),
    4: _task(4, ("malignant", "infectious", "immune"),
             {**{c: 0 for c in MALIGNANT}, **{c: 1 for c in INFECTIOUS},
              "immune": 2}),
    5: _task(5, ("solid_tumor", "hematologic", "non_malignant"),
             {"solid_tumor": 0, "hematologic": 1,
              **{c: 2 for c in BENIGN}}),
    6: _task(6, ("bacterial", "non_bacterial_infectious", "non_infectious"),
             {"bacterial": 0, "viral": 1, "fungal": 1, "parasitic": 1,
              "immune": 2, "solid_tumor": 2, "hematologic": 2}),
    7: _task(7, ("viral", "non_viral_infectious", "non_infectious"),
             {"viral": 0, "bacterial": 1, "fungal": 1, "parasitic": 1,
              "immune": 2, "solid_tumor": 2, "hematologic": 2}),
}


def task_labels(etiologies: list[str], task_id: int) -> np.ndarray:
    if task_id not in TASKS:
        raise ParameterError(f"task_id must be 1..7, got {task_id}")
    spec = TASKS[task_id]
    out = np.empty(len(etiologies), dtype=np.int64)
    for i, e in enumerate(etiologies):
        if e not in spec.mapping:
            raise SchemaError(f"unknown etiology code {e!r}")
        out[i] = spec.mapping[e]
    return out


# ---------------------------------------------------------------------------
# Metrics


def auroc_binary(scores: np.ndarray, labels: np.ndarray) -> float:
    """Mann-Whitney rank AUROC with average ranks for ties."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    pos = labels == 1
    n_pos = int(pos.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise DegenerateLabelsError("need at least one positive and one negative")
    ranks = rankdata(scores, method="average")
    u = ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def macro_auroc_detail(
    probs: np.ndarray, labels: np.ndarray, n_classes: int | None = None
) -> tuple[float, dict[int, float], list[int]]:
    """One-vs-rest AUROC per class present in labels, macro-averaged.

    Returns (macro, per_class, skipped_classes). Classes absent from
    labels (or covering the whole set) are skipped and listed.
    """
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size < 2:
        raise DegenerateLabelsError("need at least 2 samples")
    n_classes = probs.shape[0] if n_classes is None else n_classes
    per_class: dict[int, float] = {}
    skipped: list[int] = []
    for c in range(n_classes):
        y = (labels == c).astype(np.int64)
        if y.sum() == 0 or y.sum() == y.size:
            skipped.append(c)
            continue
        per_class[c] = auroc_binary(probs[c], y)
    if not per_class:
        raise DegenerateLabelsError("all labels belong to a single class")
    macro = float(np.mean(list(per_class.values())))
    return macro, per_class, skipped


def macro_auroc(probs: np.ndarray, labels: np.ndarray) -> float:
    return macro_auroc_detail(probs, labels)[0]


# ---------------------------------------------------------------------------
# Folds


@dataclass(frozen=True)
class FoldPlan:
    k: int
    seed: int
    assignments: np.ndarray  # patient index -> fold index

    def fold_indices(self, fold: int) -> tuple[np.ndarray, np.ndarray]:
        """(train_idx, test_idx) for one fold."""
        test = np.where(self.assignments == fold)[0]
        train = np.where(self.assignments != fold)[0]
        return train, test


def make_folds(n: int, k: int, seed: int) -> FoldPlan:
    """Seeded shuffle then contiguous chunking into k near-equal folds."""
    if k < 2 or n < k:
        raise ParameterError(f"need n >= k >= 2, got n={n}, k={k}")
    rng = np.random.default_rng(seed)
    order = rng.permutation(n)
    assignments = np.empty(n, dtype=np.int64)
    base = n // k
    extra = n % k
    start = 0
    for fold in range(k):
        size = base + (1 if fold < extra else 0)
        assignments[order[start : start + size]] = fold
        start += size
    return FoldPlan(k=k, seed=seed, assignments=assignments)


# ---------------------------------------------------------------------------
# Cross-validation


@dataclass
class MetricsReport:
    task_id: int
    config_label: str
    fingerprint: str
    class_names: tuple[str, ...]
    fold_macro: list[float] = field(default_factory=list)
    fold_per_class: list[dict[int, float]] = field(default_factory=list)
    fold_skipped: list[list[int]] = field(default_factory=list)

    @property
    def mean(self) -> float:
        return float(np.mean(self.fold_macro))

    @property
    def sd(self) -> float:
        return float(np.std(self.fold_macro))


def config_fingerprint(cfg: ResFusionConfig, hyper: Hyper, seed: int,
                       task_id: int, modalities: tuple[str, ...]) -> str:
    payload = json.dumps(
        {
            "cfg": vars(cfg) if not hasattr(cfg, "__dataclass_fields__") else {
                k: getattr(cfg, k) for k in cfg.__dataclass_fields__
            },
            "hyper": {k: getattr(hyper, k) for k in hyper.__dataclass_fields__},
            "seed": seed,
            "task": task_id,
            "modalities": list(modalities),
        },
        sort_keys=True,
    )
    return hashlib.sha256(payload.encode()).hexdigest()[:16]


def _normalize_modalities(modalities) -> tuple[str, ...]:
    mods = tuple(m for m in MODALITIES if m in set(modalities))
    if not mods:
        raise ParameterError("at least one modality must be selected")
    unknown = set(modalities) - set(MODALITIES)
    if unknown:
        raise ParameterError(f"unknown modalities {sorted(unknown)}")
    return mods


@dataclass
class _PreparedDataset:
    ct: list[FeatureMatrix]
    pet: list[FeatureMatrix]
    clinical: ClinicalTable


def load_prepared(data_dir: str | Path) -> _PreparedDataset:
    ct, pet, clinical = load_dataset(data_dir)
    return _PreparedDataset(ct, pet, clinical)


def _clinical_stats(clin: np.ndarray, train_idx: np.ndarray,
                    eps: float = 1e-8) -> tuple[np.ndarray, np.ndarray]:
    mean = clin[:, train_idx].mean(axis=1)
    std = clin[:, train_idx].std(axis=1)
    std = np.where(std < eps, 1.0, std)
    return mean, std


def _fit_stats_on_train(t: FeatureTensor, train_idx: np.ndarray) -> NormStats:
    sub = FeatureTensor(t.data[:, :, train_idx], t.slice_counts[train_idx])
    return fit_norm_stats(sub)


def _subset(t: FeatureTensor, idx: np.ndarray) -> FeatureTensor:
    return FeatureTensor(t.data[:, :, idx], t.slice_counts[idx])


def _apply_pca(
    mats: list[FeatureMatrix], train_idx: np.ndarray, b1: int
) -> list[FeatureMatrix]:
    train_slices = np.vstack([mats[i].data for i in train_idx])
    model = pca_fit(train_slices, b1)
    return [pca_transform(model, m.data) for m in mats]


def build_fused(
    data: _PreparedDataset,
    modalities: tuple[str, ...],
    train_idx: np.ndarray,
    extractor: str = "external",
    pca_components: int = 8,
) -> tuple[FusedTensor, FusedTensor | None, np.ndarray]:
    """Prepare the fused tensors for one fold.

    Statistics (imputation means, normalization, PCA basis) are fitted on
    the training patients only. Returns (fused_all, None, pooled_all) --
    callers slice patients out of fused_all by index.
    """
    mods = _normalize_modalities(modalities)
    n = len(data.clinical.patient_ids)
    clin = None
    clin_stats = None
    if "clinical" in mods:
        clin = data.clinical.imputed(train_idx)
        clin_stats = _clinical_stats(clin, train_idx)

    ct_mats, pet_mats = data.ct, data.pet
    if extractor == "pca":
        if "ct" in mods:
            ct_mats = _apply_pca(ct_mats, train_idx, pca_components)
        if "pet" in mods:
            pet_mats = _apply_pca(pet_mats, train_idx, pca_components)
    elif extractor != "external":
        raise ParameterError(f"unknown extractor {extractor!r}")

    ct_t = pet_t = None
    ct_stats = pet_stats = None
    if "ct" in mods:
        s_max = max(m.n_slices for m in ct_mats)
        ct_t = pad_stack(ct_mats, s_max)
        ct_stats = _fit_stats_on_train(ct_t, train_idx)
    if "pet" in mods:
        s_max = max(m.n_slices for m in pet_mats)
        pet_t = pad_stack(pet_mats, s_max)
        pet_stats = _fit_stats_on_train(pet_t, train_idx)

    if ct_t is not None and pet_t is not None:
        fused = align_and_fuse(ct_t, pet_t, clin, ct_stats, pet_stats, clin_stats)
    elif ct_t is not None:
        fused = fuse_single_modality(ct_t, ct_stats, clin, clin_stats)
    elif pet_t is not None:
        fused = fuse_single_modality(pet_t, pet_stats, clin, clin_stats)
    else:
        fused = fuse_clinical_only(clin, clin_stats)
    assert fused.n_patients == n
    pooled = fused.data.mean(axis=0)
    return fused, None, pooled


def _slice_fused(fused: FusedTensor, idx: np.ndarray) -> FusedTensor:
    return FusedTensor(fused.data[:, :, idx])


def run_cv(
    data: _PreparedDataset | str | Path,
    cfg: ResFusionConfig,
    task_id: int,
    k: int = 5,
    seed: int = 0,
    modalities=("clinical", "ct", "pet"),
    hyper: Hyper = Hyper(),
    extractor: str = "external",
    pca_components: int = 8,
    model_kind: str = "mfcn",
    config_label: str = "base",
    permute_labels_seed: int | None = None,
) -> MetricsReport:
    """k-fold cross-validation of the MFCN (or the linear baseline) on a
    diagnostic task. Per fold, all statistics are fitted on the training
    patients only; the held-out fold is scored by macro-AUROC.
    """
    if not isinstance(data, _PreparedDataset):
        data = load_prepared(data)
    mods = _normalize_modalities(modalities)
    etis = list(data.clinical.etiologies)
    labels = task_labels(etis, task_id)
    if permute_labels_seed is not None:
        perm_rng = np.random.default_rng(permute_labels_seed)
        labels = labels[perm_rng.permutation(labels.size)]
    n = labels.size
    plan = make_folds(n, k, seed)
    spec = TASKS[task_id]
    n_classes = len(spec.class_names)
    cfg = replace(cfg, n_classes=n_classes)
    report = MetricsReport(
        task_id=task_id,
        config_label=config_label,
        fingerprint=config_fingerprint(cfg, hyper, seed, task_id, mods),
        class_names=spec.class_names,
    )

    def run_fold(fold: int):
        train_idx, test_idx = plan.fold_indices(fold)
        assert np.intersect1d(train_idx, test_idx).size == 0
        fused_all, _unused, pooled_all = build_fused(
            data, mods, train_idx, extractor, pca_components
        )
        y_train, y_test = labels[train_idx], labels[test_idx]
        if np.unique(y_train).size < 2:
            raise DegenerateLabelsError(f"fold {fold}: single-class training split")
        if model_kind == "linear":
            model, _rep = train_linear_baseline(
                pooled_all[:, train_idx], y_train, n_classes, hyper,
                rng=np.random.default_rng(cfg.seed + fold),
            )
            probs = model.predict_proba(pooled_all[:, test_idx])
        elif model_kind == "mfcn":
            fold_cfg = replace(cfg, seed=cfg.seed + fold)
            model = MfcnModel(fold_cfg, fused_all.c)
            train_model(model, _slice_fused(fused_all, train_idx), y_train, hyper)
            probs = model.predict_proba(_slice_fused(fused_all, test_idx))
        else:
            raise ParameterError(f"unknown model kind {model_kind!r}")
        return macro_auroc_detail(probs, y_test, n_classes)

    max_workers = max(1, int(os.environ.get("MEDMIMIC_THREADS", "1")))
    if max_workers > 1:
        with ThreadPoolExecutor(max_workers=max_workers) as pool:
            results = list(pool.map(run_fold, range(k)))
    else:
        results = [run_fold(f) for f in range(k)]
    for macro, per_class, skipped in results:
        report.fold_macro.append(macro)
        report.fold_per_class.append(per_class)
        report.fold_skipped.append(skipped)
    return report


def train_full(
    data: _PreparedDataset | str | Path,
    cfg: ResFusionConfig,
    task_id: int,
    modalities=("clinical", "ct", "pet"),
    hyper: Hyper = Hyper(),
    extractor: str = "external",
    pca_components: int = 8,
) -> tuple[MfcnModel, TrainReport]:
    """Train one MFCN on the whole dataset (no held-out fold)."""
    if not isinstance(data, _PreparedDataset):
        data = load_prepared(data)
    mods = _normalize_modalities(modalities)
    labels = task_labels(list(data.clinical.etiologies), task_id)
    cfg = replace(cfg, n_classes=len(TASKS[task_id].class_names))
    all_idx = np.arange(labels.size)
    fused, _unused, _pooled = build_fused(data, mods, all_idx, extractor, pca_components)
    model = MfcnModel(cfg, fused.c)
    rep = train_model(model, fused, labels, hyper)
    return model, rep


def run_ablation(
    data: _PreparedDataset | str | Path,
    base_cfg: ResFusionConfig,
    task_id: int,
    hidden_dims=(16, 32, 64, 128, 256),
    variants=None,
    k: int = 5,
    seed: int = 0,
    modalities=("clinical", "ct", "pet"),
    hyper: Hyper = Hyper(),
    extractor: str = "external",
    pca_components: int = 8,
) -> list[MetricsReport]:
    """Run every ablation variant across the hidden-dimension sweep."""
    from .resfusion import ABLATION_VARIANTS, ablate

    if variants is None or variants == "all":
        variants = ABLATION_VARIANTS
    if not isinstance(data, _PreparedDataset):
        data = load_prepared(data)
    reports = []
    for variant in variants:
        for h in hidden_dims:
            cfg = replace(ablate(base_cfg, variant), hidden_dim=h)
            rep = run_cv(
                data, cfg, task_id, k=k, seed=seed, modalities=modalities,
                hyper=hyper, extractor=extractor, pca_components=pca_components,
                config_label=f"{variant}/h{h}",
            )
            reports.append(rep)
    return reports


# ---------------------------------------------------------------------------
# Reports


def emit_report_csv(reports: list[MetricsReport], path: str | Path) -> None:
    """CSV rows: (task, config, fold, class, auroc). Each fold gets one
    'macro' row plus one row per scored class; skipped classes get an
    empty auroc cell."""
    if not reports:
        raise ParameterError("no reports to emit")
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["task", "config", "fold", "class", "auroc"])
        for rep in reports:
            for fold, macro in enumerate(rep.fold_macro):
                w.writerow([rep.task_id, rep.config_label, fold, "macro",
                            f"{macro:.4f}"])
                for c, name in enumerate(rep.class_names):
                    if c in rep.fold_per_class[fold]:
                        w.writerow([rep.task_id, rep.config_label, fold, name,
                                    f"{rep.fold_per_class[fold][c]:.4f}"])
                    else:
                        w.writerow([rep.task_id, rep.config_label, fold, name, ""])


def load_report_csv(path: str | Path) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


def render_markdown(reports: list[MetricsReport]) -> str:
    """Markdown summary. Ablation-style reports (labels 'variant/hN') are
    grouped into one table per task with hidden-dim columns; other
    reports get a per-fold table."""
    lines: list[str] = []
    sweep: dict[int, dict[str, dict[int, MetricsReport]]] = {}
    plain: list[MetricsReport] = []
    for rep in reports:
        label = rep.config_label
        if "/h" in label and label.rsplit("/h", 1)[1].isdigit():
            variant, h = label.rsplit("/h", 1)
            sweep.setdefault(rep.task_id, {}).setdefault(variant, {})[int(h)] = rep
        else:
            plain.append(rep)
    for task_id in sorted(sweep):
        variants = sweep[task_id]
        dims = sorted({h for per in variants.values() for h in per})
        lines.append(f"## Task {task_id} ablation sweep (mean macro-AUROC)")
        lines.append("")
        lines.append("| variant | " + " | ".join(str(d) for d in dims) + " |")
        lines.append("|---" * (len(dims) + 1) + "|")
        for variant in sorted(variants):
            cells = []
            for d in dims:
                rep = variants[variant].get(d)
                cells.append(f"{rep.mean:.4f}" if rep is not None else "-")
            lines.append(f"| {variant} | " + " | ".join(cells) + " |")
        lines.append("")
    for rep in plain:
        lines.append(f"## Task {rep.task_id} ({rep.config_label})")
        lines.append("")
        lines.append(f"mean macro-AUROC {rep.mean:.4f} +/- {rep.sd:.4f} "
                     f"(config {rep.fingerprint})")
        lines.append("")
        header = ["fold", "macro"] + list(rep.class_names)
        lines.append("| " + " | ".join(header) + " |")
        lines.append("|---" * len(header) + "|")
        for fold, macro in enumerate(rep.fold_macro):
            row = [str(fold), f"{macro:.4f}"]
            for c in range(len(rep.class_names)):
                if c in rep.fold_per_class[fold]:
                    row.append(f"{rep.fold_per_class[fold][c]:.4f}")
                else:
                    row.append("skipped")
            lines.append("| " + " | ".join(row) + " |")
        lines.append("")
    return "\n".join(lines)


def render_markdown_from_rows(rows: list[dict]) -> str:
    """Re-render a report CSV (as parsed by load_report_csv) to markdown.

    Macro rows are aggregated per (task, config); ablation-style configs
    ('variant/hN') are additionally grouped into sweep tables.
    """
    macro: dict[tuple[str, str], dict[int, float]] = {}
    for row in rows:
        if row["class"] != "macro" or row["auroc"] == "":
            continue
        key = (row["task"], row["config"])
        macro.setdefault(key, {})[int(row["fold"])] = float(row["auroc"])
    sweep: dict[str, dict[str, dict[int, float]]] = {}
    plain: list[tuple[str, str, float, float]] = []
    for (task, config), folds in sorted(macro.items()):
        vals = [folds[f] for f in sorted(folds)]
        mean = float(np.mean(vals))
        sd = float(np.std(vals))
        if "/h" in config and config.rsplit("/h", 1)[1].isdigit():
            variant, h = config.rsplit("/h", 1)
            sweep.setdefault(task, {}).setdefault(variant, {})[int(h)] = mean
        else:
            plain.append((task, config, mean, sd))
    lines: list[str] = []
    for task in sorted(sweep):
        variants = sweep[task]
        dims = sorted({h for per in variants.values() for h in per})
        lines.append(f"## Task {task} ablation sweep (mean macro-AUROC)")
        lines.append("")
        lines.append("| variant | " + " | ".join(str(d) for d in dims) + " |")
        lines.append("|---" * (len(dims) + 1) + "|")
        for variant in sorted(variants):
            cells = [
                f"{variants[variant][d]:.4f}" if d in variants[variant] else "-"
                for d in dims
            ]
            lines.append(f"| {variant} | " + " | ".join(cells) + " |")
        lines.append("")
    if plain:
        lines.append("## Cross-validation results")
        lines.append("")
        lines.append("| task | config | mean macro-AUROC | sd |")
        lines.append("|---|---|---|---|")
        for task, config, mean, sd in plain:
            lines.append(f"| {task} | {config} | {mean:.4f} | {sd:.4f} |")
        lines.append("")
    return "\n".join(lines)


def pca_extract_dataset(
    data_dir: str | Path,
    out_dir: str | Path,
    b1: int,
    fold_plan: FoldPlan | None = None,
) -> None:
    """Re-encode a dataset's imaging features through a fitted PCA basis.

    The basis is fitted on all patients' slices, or on the training split
    of fold 0 when a fold plan is given. Writes a complete dataset tree
    (manifest + MMFT + clinical CSV) to out_dir.
    """
    import shutil

    from .io import load_manifest, write_mmft

    data_dir, out_dir = Path(data_dir), Path(out_dir)
    data = load_prepared(data_dir)
    n = len(data.clinical.patient_ids)
    if fold_plan is not None:
        train_idx, _test = fold_plan.fold_indices(0)
    else:
        train_idx = np.arange(n)
    ct = _apply_pca(data.ct, train_idx, b1)
    pet = _apply_pca(data.pet, train_idx, b1)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = load_manifest(data_dir / "manifest.csv")
    for row, ct_m, pet_m in zip(manifest, ct, pet):
        write_mmft(ct_m.data.astype(np.float32), out_dir / row.ct_file)
        write_mmft(pet_m.data.astype(np.float32), out_dir / row.pet_file)
    shutil.copy(data_dir / "manifest.csv", out_dir / "manifest.csv")
    shutil.copy(data_dir / "clinical.csv", out_dir / "clinical.csv")


def emit_report(reports: list[MetricsReport], csv_path: str | Path,
                md_path: str | Path | None = None) -> None:
    emit_report_csv(reports, csv_path)
    if md_path is not None:
        Path(md_path).write_text(render_markdown(reports), encoding="utf-8")
