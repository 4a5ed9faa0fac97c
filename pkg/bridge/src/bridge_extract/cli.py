import sys

import click

from .errors import BridgeError, ImageReadError
from .extract import BridgeConfig, extract
from .models import EXPECTED_DIMS


@click.command()
@click.option("--model", required=True,
              type=click.Choice(sorted(EXPECTED_DIMS)))
@click.option("--in", "input_dir", required=True, type=click.Path(exists=True))
@click.option("--out", "out_dir", required=True, type=click.Path())
@click.option("--device", default="cpu")
@click.option("--token", default="class", type=click.Choice(["class", "mean"]),
              help="ViT token aggregate: class token or mean of patch tokens.")
@click.option("--pretrained/--no-pretrained", default=True)
def main(model, input_dir, out_dir, device, token, pretrained):
    """Export frozen-encoder slice features to per-patient MMFT files."""
    try:
        cfg = BridgeConfig(
            model=model, input_dir=input_dir, out_dir=out_dir,
            device=device, token=token, pretrained=pretrained,
        )
        rows = extract(cfg)
    except ImageReadError as exc:
        click.echo(f"image error: {exc}", err=True)
        sys.exit(3)
    except BridgeError as exc:
        click.echo(f"error: {exc}", err=True)
        sys.exit(2)
    total = sum(r["n_slices"] for r in rows)
    click.echo(
        f"encoded {total} slices across {len(rows)} patients "
        f"at width {cfg.expected_dim} into {out_dir}"
    )


if __name__ == "__main__":
    main()
