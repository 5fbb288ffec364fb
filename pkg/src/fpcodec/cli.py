"""Command-line surface for batch users.

Exit codes: 0 success, 1 runtime failure, 2 usage error. Every command is
reproducible from (config file + seed); the effective configuration is
echoed to stderr and embedded in emitted checkpoints.
"""

from __future__ import annotations

import json
import sys
from pathlib import Path

import click
import numpy as np

from . import bitstream, evalkit, pyramid
from .checkpoint import load_checkpoint, save_checkpoint
from .coder import default_backend
from .entropy import build_cdf_tables
from .errors import FpcodecError
from .training import PAPER_LAMBDAS, TrainConfig, train


def _echo_config(name: str, cfg: dict) -> None:
    click.echo(f"[{name}] config: {json.dumps(cfg, sort_keys=True)}", err=True)


def _load_config_file(path: str | None, allowed: set[str]) -> dict:
    if not path:
        return {}
    with open(path) as f:
        data = json.load(f)
    unknown = set(data) - allowed
    if unknown:
        raise click.UsageError(f"unknown config keys: {sorted(unknown)}")
    return data


def _load_corpus(corpus_dir: str) -> list[pyramid.FeaturePyramid]:
    paths = sorted(Path(corpus_dir).glob("*.fpf"))
    if not paths:
        raise click.UsageError(f"no .fpf files in {corpus_dir}")
    return [pyramid.read_fpf(p) for p in paths]


@click.group()
def main():
    """Learned multi-scale feature compression codec."""


@main.command("train")
@click.option("--corpus", "corpus_dir", required=True, type=click.Path(exists=True))
@click.option("--out", "out_path", required=True, type=click.Path())
@click.option("--config", "config_path", type=click.Path(exists=True))
@click.option("--lambda", "lam", type=float, default=None)
@click.option("--steps", type=int, default=None)
@click.option("--finetune-steps", type=int, default=None)
@click.option("--n-latent", type=int, default=None)
@click.option("--channels", type=int, default=None)
@click.option("--crop-image", type=int, default=None)
@click.option("--batch-size", type=int, default=None)
@click.option("--lr", type=float, default=None)
@click.option("--context-model/--no-context-model", "with_cm", default=None)
@click.option("--pathway", type=click.Choice(["bottom_up", "top_down"]), default=None)
@click.option("--seed", type=int, default=None)
@click.option("--log", "log_path", type=click.Path(), default=None)
def cmd_train(corpus_dir, out_path, config_path, log_path, **overrides):
    """Train a codec on a directory of FPF pyramids."""
    allowed = set(TrainConfig.__dataclass_fields__)
    cfg = _load_config_file(config_path, allowed)
    cfg.update({k: v for k, v in overrides.items() if v is not None})
    if "lam" in cfg and cfg["lam"] not in PAPER_LAMBDAS:
        click.echo(
            f"warning: lambda {cfg['lam']} is outside the standard set "
            f"{PAPER_LAMBDAS}", err=True,
        )
    try:
        config = TrainConfig(**cfg)
    except (TypeError, FpcodecError) as exc:
        raise click.UsageError(str(exc))
    _echo_config("train", {**cfg, "corpus": corpus_dir, "out": out_path})
    corpus = _load_corpus(corpus_dir)
    codec, log = train(config, corpus, log_path=log_path)
    codec.eval()
    tables = build_cdf_tables(codec.entropy)
    save_checkpoint(out_path, codec, tables, extra_meta={"train_config": cfg})
    final = log[-1] if log else {}
    click.echo(f"checkpoint written to {out_path}; final loss {final.get('L')}")


@main.command("encode")
@click.argument("checkpoint", type=click.Path(exists=True))
@click.argument("fpf_in", type=click.Path(exists=True))
@click.argument("stream_out", type=click.Path())
def cmd_encode(checkpoint, fpf_in, stream_out):
    """Compress an FPF pyramid into a bitstream."""
    codec, meta, tables = load_checkpoint(checkpoint)
    codec.eval()
    if tables is None:
        tables = build_cdf_tables(codec.entropy)
    pyr = pyramid.read_fpf(fpf_in)
    data, info = codec.compress(pyr, tables, default_backend())
    Path(stream_out).write_bytes(data)
    click.echo(
        f"bpp={info['bpp']:.6f} estimated_bits={info['estimated_bits']:.1f} "
        f"actual_bits={info['actual_bits']}"
    )


@main.command("decode")
@click.argument("checkpoint", type=click.Path(exists=True))
@click.argument("stream_in", type=click.Path(exists=True))
@click.argument("fpf_out", type=click.Path())
def cmd_decode(checkpoint, stream_in, fpf_out):
    """Decompress a bitstream back to an FPF pyramid."""
    codec, meta, tables = load_checkpoint(checkpoint)
    codec.eval()
    if tables is None:
        tables = build_cdf_tables(codec.entropy)
    data = Path(stream_in).read_bytes()
    recon, info = codec.decompress(data, tables, default_backend())
    pyramid.write_fpf(recon, fpf_out)
    header = info["header"]
    click.echo(
        f"bpp={bitstream.bpp_of(data, header.image_width, header.image_height):.6f}"
    )


@main.command("synth")
@click.argument("fpf_out", type=click.Path())
@click.option("--seed", type=int, default=0)
@click.option("--width", type=int, default=256)
@click.option("--height", type=int, default=256)
@click.option("--channels", type=int, default=256)
def cmd_synth(fpf_out, seed, width, height, channels):
    """Generate a deterministic synthetic pyramid."""
    _echo_config("synth", {"seed": seed, "width": width, "height": height, "channels": channels})
    pyr = pyramid.synth_pyramid(seed, (width, height), channels)
    pyramid.write_fpf(pyr, fpf_out)
    click.echo(f"wrote {fpf_out}")


@main.command("pack-anchor")
@click.argument("fpf_in", type=click.Path(exists=True))
@click.argument("fpf_out", type=click.Path())
def cmd_pack_anchor(fpf_in, fpf_out):
    """10-bit tiled quantization baseline: pack, unpack, report error."""
    pyr = pyramid.read_fpf(fpf_in)
    frame = pyramid.pack_and_quantize_10bit(pyr)
    recon = pyramid.unpack_dequantize(frame)
    pyramid.write_fpf(recon, fpf_out)
    err = max(
        float(np.max(np.abs(recon.layers[lv] - pyr.layers[lv])))
        for lv in sorted(pyr.layers)
    )
    raw_bpp = 10.0 * frame.grid.size / (pyr.image_width * pyr.image_height)
    click.echo(f"max_abs_error={err:.8f} packed_bpp={raw_bpp:.4f}")


@main.command("bdrate")
@click.argument("results", type=click.Path(exists=True))
@click.option("--test", "test_label", required=True)
@click.option("--anchor", "anchor_label", required=True)
def cmd_bdrate(results, test_label, anchor_label):
    """BD-rate of one labelled curve against another."""
    records = evalkit.read_results(results)
    test = evalkit.curve_from_records(records, test_label)
    anchor = evalkit.curve_from_records(records, anchor_label)
    click.echo(f"bd_rate={evalkit.bd_rate(test, anchor):+.2f}%")


@main.command("nearlossless")
@click.argument("results", type=click.Path(exists=True))
@click.option("--label", required=True)
def cmd_nearlossless(results, label):
    """Near-lossless bitrate and compression ratio for one curve."""
    records = evalkit.read_results(results)
    curve = evalkit.curve_from_records(records, label)
    res = evalkit.near_lossless(curve)
    if not res.reached:
        click.echo(f"not near-lossless at tested rates (threshold {res.threshold:.4f})")
        return
    click.echo(f"R_NL={res.r_nl:.6f} CR_NL={res.cr_nl:.1f}")


@main.command("eval")
@click.argument("results", type=click.Path(exists=True))
@click.option("--out-dir", required=True, type=click.Path())
def cmd_eval(results, out_dir):
    """Assemble curves from a results file and emit CSV + plots."""
    records = evalkit.read_results(results)
    labels = sorted({r.get("label", "default") for r in records})
    curves = [evalkit.curve_from_records(records, label) for label in labels]
    rows = [r for r in records if "bpp" in r]
    paths = evalkit.emit_report(curves, rows, out_dir)
    for curve in curves:
        if curve.reference_bpp is not None:
            res = evalkit.near_lossless(curve)
            if res.reached:
                click.echo(f"{curve.label}: R_NL={res.r_nl:.6f} CR_NL={res.cr_nl:.1f}")
            else:
                click.echo(f"{curve.label}: not near-lossless at tested rates")
    click.echo(f"report written to {paths['csv']}")


@main.command("layerwise")
@click.option("--checkpoint", "checkpoints", multiple=True, required=True, type=click.Path(exists=True))
@click.option("--corpus", "corpus_dir", required=True, type=click.Path(exists=True))
@click.option("--out-dir", required=True, type=click.Path())
def cmd_layerwise(checkpoints, corpus_dir, out_dir):
    """Layer-wise distortion protocol over one or more checkpoints."""
    corpus = _load_corpus(corpus_dir)
    cks = {}
    for path in checkpoints:
        codec, meta, tables = load_checkpoint(path)
        codec.eval()
        if tables is None:
            tables = build_cdf_tables(codec.entropy)
        cks[meta["lambda"]] = (codec, tables)
    rows = evalkit.layerwise_protocol(cks, corpus, out_dir, default_backend())
    evalkit.write_csv(Path(out_dir) / "layerwise.csv", rows)
    for row in rows:
        click.echo(json.dumps(row, sort_keys=True))


def run():
    try:
        main(standalone_mode=False)
    except click.UsageError as exc:
        click.echo(f"usage error: {exc.format_message()}", err=True)
        sys.exit(2)
    except click.ClickException as exc:
        exc.show()
        sys.exit(1)
    except click.Abort:
        sys.exit(1)
    except FpcodecError as exc:
        click.echo(f"error: {exc}", err=True)
        sys.exit(1)


if __name__ == "__main__":
    run()
