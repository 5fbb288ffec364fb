"""Checkpoint files: a keyed map of parameter name -> float32 array plus
JSON metadata and serialized coding tables, stored as an npz archive.

Key schema: parameters carry their module prefix ("fenet.", "drnet.",
"entropy."). Metadata records N, lambda, quality index, context-model
flag, mixing pathway, channel count, and the rounded entropy-parameter
widths so encode/decode stay consistent. CDF tables are stored as u16
cumulative frequencies (terminal 65536 wraps to 0) with per-table symbol
offsets and lengths.
"""

from __future__ import annotations

import json

import numpy as np
import torch

from .codec import CodecConfig, FeatureCodec
from .entropy import CDF_TOTAL, CdfTable, CdfTables, ep_widths, make_scale_table
from .errors import ConfigError

META_KEY = "__meta__"


def _tables_to_arrays(tables: CdfTables) -> dict[str, np.ndarray]:
    out = {"cdf.scale_table": tables.scale_table.astype(np.float64)}
    for name, tlist in (("gaussian", tables.gaussian), ("factorized", tables.factorized)):
        out[f"cdf.{name}.offsets"] = np.asarray([t.offset for t in tlist], dtype=np.int32)
        out[f"cdf.{name}.lengths"] = np.asarray(
            [len(t.cdf) for t in tlist], dtype=np.uint16
        )
        values = np.concatenate([t.cdf for t in tlist])
        out[f"cdf.{name}.values"] = (values % CDF_TOTAL).astype("<u2")
    return out


def _tables_from_arrays(arrays) -> CdfTables:
    def read(name: str) -> list[CdfTable]:
        offsets = arrays[f"cdf.{name}.offsets"]
        lengths = arrays[f"cdf.{name}.lengths"]
        values = arrays[f"cdf.{name}.values"].astype(np.int64)
        tables = []
        pos = 0
        for off, length in zip(offsets, lengths):
            cdf = values[pos : pos + int(length)].copy()
            cdf[cdf == 0] = CDF_TOTAL
            cdf[0] = 0
            tables.append(CdfTable(offset=int(off), cdf=cdf))
            pos += int(length)
        return tables

    return CdfTables(
        scale_table=arrays["cdf.scale_table"],
        gaussian=read("gaussian"),
        factorized=read("factorized"),
    )


def save_checkpoint(
    path,
    codec: FeatureCodec,
    tables: CdfTables | None = None,
    extra_meta: dict | None = None,
) -> None:
    cfg = codec.config
    meta = {
        "n_latent": cfg.n_latent,
        "channels": cfg.channels,
        "with_cm": cfg.with_cm,
        "pathway": cfg.pathway,
        "lambda": cfg.lam,
        "quality_index": cfg.quality_index,
        "ep_widths": list(ep_widths(cfg.n_latent)),
        "distortion_weights": {str(k): v for k, v in cfg.distortion_weights.items()},
    }
    if extra_meta:
        meta.update(extra_meta)
    arrays = {
        name: tensor.detach().cpu().to(torch.float32).numpy()
        for name, tensor in codec.state_dict().items()
    }
    arrays[META_KEY] = np.frombuffer(
        json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8
    )
    if tables is not None:
        arrays.update(_tables_to_arrays(tables))
    np.savez(path, **arrays)


def load_checkpoint(path) -> tuple[FeatureCodec, dict, CdfTables | None]:
    with np.load(path) as arrays:
        if META_KEY not in arrays:
            raise ConfigError(f"{path}: not a codec checkpoint (missing metadata)")
        meta = json.loads(bytes(arrays[META_KEY].tobytes()).decode())
        config = CodecConfig(
            n_latent=meta["n_latent"],
            channels=meta["channels"],
            with_cm=meta["with_cm"],
            pathway=meta["pathway"],
            lam=meta["lambda"],
            quality_index=meta["quality_index"],
            distortion_weights={
                int(k): v for k, v in meta["distortion_weights"].items()
            },
        )
        codec = FeatureCodec(config)
        state = {
            name: torch.from_numpy(arrays[name])
            for name in codec.state_dict()
            if name in arrays
        }
        missing = set(codec.state_dict()) - set(state)
        if missing:
            raise ConfigError(f"{path}: missing parameters {sorted(missing)[:5]} ...")
        codec.load_state_dict(state)
        tables = None
        if "cdf.scale_table" in arrays:
            tables = _tables_from_arrays(arrays)
            scale_table = make_scale_table()
            if not np.allclose(tables.scale_table, scale_table):
                raise ConfigError(f"{path}: unexpected scale table")
    return codec, meta, tables
