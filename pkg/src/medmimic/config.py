"""TOML configuration loading for the CLI.

Sections: [model] (hidden_dim, n_blocks, dropout_p, flags), [optim]
(lr, lr_min, epochs), [fusion] (extractor, b1, d_cap), [data] (paths).
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .errors import ConfigError
from .resfusion import Hyper, ResFusionConfig


@dataclass(frozen=True)
class RunConfig:
    model: ResFusionConfig
    optim: Hyper
    extractor: str = "external"
    pca_components: int = 8
    data_dir: str | None = None


_MODEL_KEYS = {
    "hidden_dim", "n_blocks", "dropout_p", "n_classes",
    "use_residual", "use_attention", "use_dropout", "use_qkv_conv",
    "d_cap", "seed",
}
_OPTIM_KEYS = {"lr", "lr_min", "epochs"}
_FUSION_KEYS = {"extractor", "b1", "d_cap"}


def load_run_config(path: str | Path) -> RunConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        with open(path, "rb") as fh:
            doc = tomllib.load(fh)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}")

    model_tbl = doc.get("model", {})
    optim_tbl = doc.get("optim", {})
    fusion_tbl = doc.get("fusion", {})
    data_tbl = doc.get("data", {})
    for name, tbl, allowed in (
        ("model", model_tbl, _MODEL_KEYS),
        ("optim", optim_tbl, _OPTIM_KEYS),
        ("fusion", fusion_tbl, _FUSION_KEYS),
    ):
        unknown = set(tbl) - allowed
        if unknown:
            raise ConfigError(f"{path}: unknown [{name}] keys {sorted(unknown)}")

    try:
        model = ResFusionConfig(
            **{k: v for k, v in model_tbl.items()},
            **({"d_cap": fusion_tbl["d_cap"]} if "d_cap" in fusion_tbl
               and "d_cap" not in model_tbl else {}),
        )
        optim = Hyper(
            lr=float(optim_tbl.get("lr", 0.001)),
            lr_min=float(optim_tbl.get("lr_min", 0.0)),
            epochs=int(optim_tbl.get("epochs", 200)),
        )
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{path}: {exc}")
    extractor = fusion_tbl.get("extractor", "external")
    if extractor not in ("pca", "external"):
        raise ConfigError(f"{path}: fusion.extractor must be pca or external")
    return RunConfig(
        model=model,
        optim=optim,
        extractor=extractor,
        pca_components=int(fusion_tbl.get("b1", 8)),
        data_dir=data_tbl.get("dir"),
    )


def load_synth_spec(path: str | Path):
    from .io import SyntheticSpec

    path = Path(path)
    if not path.exists():
        raise ConfigError(f"spec file not found: {path}")
    try:
        with open(path, "rb") as fh:
            doc = tomllib.load(fh)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}")
    try:
        spec = SyntheticSpec(
            n_patients=int(doc["n_patients"]),
            b_ct=int(doc.get("b_ct", 6)),
            b_pet=int(doc.get("b_pet", 6)),
            a=int(doc.get("a", 4)),
            slice_range_ct=tuple(doc.get("slice_range_ct", (3, 6))),
            slice_range_pet=tuple(doc.get("slice_range_pet", (4, 8))),
            class_weights=doc.get("class_weights"),
            interaction_mode=doc.get("interaction_mode", "additive"),
            noise_scale=float(doc.get("noise_scale", 1.0)),
            separation=float(doc.get("separation", 4.0)),
            seed=int(doc.get("seed", 0)),
        )
        spec.validate()
    except KeyError as exc:
        raise ConfigError(f"{path}: missing key {exc}")
    return spec
