"""Command-line surface.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric
error. MEDMIMIC_THREADS caps fold-level parallelism.
"""

from __future__ import annotations

import sys
from pathlib import Path

import click

from . import harness
from .config import load_run_config, load_synth_spec
from .errors import ConfigError, DataError, NumericError, ParameterError
from .io import synth_generate
from .resfusion import ABLATION_VARIANTS, save_checkpoint


def _run(fn):
    try:
        fn()
    except (ConfigError, ParameterError) as exc:
        click.echo(f"config error: {exc}", err=True)
        sys.exit(2)
    except DataError as exc:
        click.echo(f"data error: {exc}", err=True)
        sys.exit(3)
    except NumericError as exc:
        click.echo(f"numeric error: {exc}", err=True)
        sys.exit(4)


@click.group()
def main():
    """Multimodal CT/PET/clinical fusion training and evaluation toolkit."""


@main.command()
@click.option("--spec", "spec_path", required=True, type=click.Path())
@click.option("--out", "out_dir", required=True, type=click.Path())
def synth(spec_path, out_dir):
    """Generate a synthetic multimodal dataset from a TOML spec."""

    def go():
        spec = load_synth_spec(spec_path)
        synth_generate(spec, out_dir)
        click.echo(f"wrote synthetic dataset ({spec.n_patients} patients) to {out_dir}")

    _run(go)


@main.command("pca-extract")
@click.option("--data", "data_dir", required=True, type=click.Path())
@click.option("--components", "b1", required=True, type=int)
@click.option("--out", "out_dir", required=True, type=click.Path())
@click.option("--folds", type=int, default=None,
              help="Fit the basis on the training split of fold 0 of a k-fold plan.")
@click.option("--seed", type=int, default=0)
def pca_extract(data_dir, b1, out_dir, folds, seed):
    """Re-encode imaging features through a fitted PCA basis."""

    def go():
        plan = None
        if folds is not None:
            data = harness.load_prepared(data_dir)
            plan = harness.make_folds(len(data.clinical.patient_ids), folds, seed)
        harness.pca_extract_dataset(data_dir, out_dir, b1, plan)
        click.echo(f"wrote PCA-extracted dataset to {out_dir}")

    _run(go)


def _parse_modalities(text: str) -> tuple[str, ...]:
    return tuple(m.strip() for m in text.split(",") if m.strip())


@main.command()
@click.option("--data", "data_dir", required=True, type=click.Path())
@click.option("--config", "config_path", required=True, type=click.Path())
@click.option("--task", "task_id", required=True, type=click.IntRange(1, 7))
@click.option("--modalities", default="clinical,ct,pet")
@click.option("--seed", type=int, default=0)
@click.option("--out", "ckpt_dir", required=True, type=click.Path())
def train(data_dir, config_path, task_id, modalities, seed, ckpt_dir):
    """Train one MFCN on the full dataset and save a checkpoint."""

    def go():
        run = load_run_config(config_path)
        from dataclasses import replace

        cfg = replace(run.model, seed=seed)
        model, rep = harness.train_full(
            data_dir, cfg, task_id,
            modalities=_parse_modalities(modalities),
            hyper=run.optim, extractor=run.extractor,
            pca_components=run.pca_components,
        )
        save_checkpoint(model, ckpt_dir)
        click.echo(
            f"trained {rep.losses and len(rep.losses)} epochs, "
            f"final loss {rep.losses[-1]:.6f}, checkpoint at {ckpt_dir}"
        )

    _run(go)


@main.command()
@click.option("--data", "data_dir", required=True, type=click.Path())
@click.option("--config", "config_path", required=True, type=click.Path())
@click.option("--task", "task_id", required=True, type=click.IntRange(1, 7))
@click.option("--folds", type=int, default=5)
@click.option("--seed", type=int, default=0)
@click.option("--modalities", default="clinical,ct,pet")
@click.option("--report", "report_path", required=True, type=click.Path())
def cv(data_dir, config_path, task_id, folds, seed, modalities, report_path):
    """k-fold cross-validation; writes the per-fold report CSV."""

    def go():
        run = load_run_config(config_path)
        from dataclasses import replace

        cfg = replace(run.model, seed=seed)
        rep = harness.run_cv(
            data_dir, cfg, task_id, k=folds, seed=seed,
            modalities=_parse_modalities(modalities),
            hyper=run.optim, extractor=run.extractor,
            pca_components=run.pca_components,
        )
        harness.emit_report_csv([rep], report_path)
        click.echo(
            f"task {task_id}: mean macro-AUROC {rep.mean:.4f} +/- {rep.sd:.4f}"
        )

    _run(go)


@main.command()
@click.option("--data", "data_dir", required=True, type=click.Path())
@click.option("--config", "config_path", required=True, type=click.Path())
@click.option("--task", "task_id", required=True, type=click.IntRange(1, 7))
@click.option("--variants", default="all")
@click.option("--hidden-dims", default="16,32,64,128,256")
@click.option("--folds", type=int, default=5)
@click.option("--seed", type=int, default=0)
@click.option("--modalities", default="clinical,ct,pet")
@click.option("--report", "report_path", required=True, type=click.Path())
def ablate(data_dir, config_path, task_id, variants, hidden_dims, folds, seed,
           modalities, report_path):
    """Run the ablation matrix over a hidden-dimension sweep."""

    def go():
        run = load_run_config(config_path)
        from dataclasses import replace

        cfg = replace(run.model, seed=seed)
        variant_list = (
            ABLATION_VARIANTS if variants == "all"
            else tuple(v.strip() for v in variants.split(","))
        )
        dims = tuple(int(d) for d in hidden_dims.split(","))
        reports = harness.run_ablation(
            data_dir, cfg, task_id, hidden_dims=dims, variants=variant_list,
            k=folds, seed=seed, modalities=_parse_modalities(modalities),
            hyper=run.optim, extractor=run.extractor,
            pca_components=run.pca_components,
        )
        md_path = Path(report_path).with_suffix(".md")
        harness.emit_report(reports, report_path, md_path)
        click.echo(f"wrote {len(reports)} ablation reports to {report_path}")

    _run(go)


@main.command()
@click.option("--in", "in_paths", required=True, multiple=True,
              type=click.Path())
@click.option("--out", "out_path", required=True, type=click.Path())
def report(in_paths, out_path):
    """Render one or more report CSVs to a markdown summary."""

    def go():
        rows: list[dict] = []
        for p in in_paths:
            if not Path(p).exists():
                raise DataError(f"report CSV not found: {p}")
            rows.extend(harness.load_report_csv(p))
        Path(out_path).write_text(
            harness.render_markdown_from_rows(rows), encoding="utf-8"
        )
        click.echo(f"wrote {out_path}")

    _run(go)


if __name__ == "__main__":
    main()
