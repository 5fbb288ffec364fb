"""CTC-style evaluation: rate-distortion curve assembly, BD-rate,
near-lossless metrics, the layer-wise distortion protocol, and report
emission. Task metrics (mAP) are ingested from external result files;
this module never runs a detector.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.interpolate import PchipInterpolator

from .bitstream import bpp_of
from .errors import FpcodecError
from .pyramid import FeaturePyramid, layer_dims, subsample_p6, write_fpf

NEAR_LOSSLESS_FRACTION = 0.99  # <1% task-performance degradation


@dataclass
class RDPoint:
    bpp: float
    metric: float
    d_total: float | None = None


@dataclass
class RDCurve:
    label: str
    points: list[RDPoint]
    reference_bpp: float | None = None  # uncompressed rate R_0
    reference_metric: float | None = None

    def __post_init__(self):
        self.points = sorted(self.points, key=lambda p: p.bpp)
        if any(p.bpp <= 0 for p in self.points):
            raise FpcodecError("bpp values must be strictly positive")


def uncompressed_bpp(
    image_width: int,
    image_height: int,
    channels: int = 256,
    bits_per_value: int = 32,
    include_p6: bool = False,
    p6_bits: int = 16,
) -> float:
    """Raw feature rate in bits per image pixel, using actual (ceil)
    layer dims; equals bits*channels*sum(4^-i, i=2..5) for power-of-two
    dims."""
    pixels = image_width * image_height
    total = 0.0
    for lv in (2, 3, 4, 5):
        h, w = layer_dims(image_width, image_height, lv)
        total += bits_per_value * channels * h * w
    if include_p6:
        h, w = layer_dims(image_width, image_height, 6)
        total += p6_bits * channels * h * w
    return total / pixels


def _log_rate_spline(curve: RDCurve) -> tuple[PchipInterpolator, float, float]:
    pts = sorted(curve.points, key=lambda p: p.metric)
    metrics = np.asarray([p.metric for p in pts], dtype=np.float64)
    rates = np.asarray([p.bpp for p in pts], dtype=np.float64)
    if len(pts) < 2:
        raise FpcodecError(f"curve {curve.label!r}: BD-rate needs >= 2 points")
    if np.any(np.diff(metrics) <= 0):
        raise FpcodecError(f"curve {curve.label!r}: metric values must be distinct")
    spline = PchipInterpolator(metrics, np.log10(rates))
    return spline, metrics[0], metrics[-1]


def bd_rate(curve_test: RDCurve, curve_anchor: RDCurve) -> float:
    """Average rate difference (%) of test vs anchor over the common
    metric range, using monotone piecewise-cubic interpolation of
    log10(rate) as a function of the metric."""
    s_test, lo_t, hi_t = _log_rate_spline(curve_test)
    s_anchor, lo_a, hi_a = _log_rate_spline(curve_anchor)
    lo, hi = max(lo_t, lo_a), min(hi_t, hi_a)
    if hi <= lo:
        raise FpcodecError(
            f"no metric overlap: test spans [{lo_t}, {hi_t}], "
            f"anchor spans [{lo_a}, {hi_a}]"
        )
    avg = (s_test.integrate(lo, hi) - s_anchor.integrate(lo, hi)) / (hi - lo)
    return (10.0**avg - 1.0) * 100.0


@dataclass
class NearLosslessResult:
    reached: bool
    threshold: float
    r_nl: float | None = None
    cr_nl: float | None = None


def near_lossless(curve: RDCurve) -> NearLosslessResult:
    """Smallest bitrate at which the (bpp, metric) polyline reaches 99%
    of the uncompressed metric, and the compression ratio R_0 / R_NL."""
    if curve.reference_bpp is None or curve.reference_metric is None:
        raise FpcodecError("near-lossless metrics need the uncompressed reference")
    threshold = NEAR_LOSSLESS_FRACTION * curve.reference_metric
    pts = curve.points
    r_nl = None
    if pts[0].metric >= threshold:
        r_nl = pts[0].bpp
    else:
        for a, b in zip(pts, pts[1:]):
            if a.metric < threshold <= b.metric:
                t = (threshold - a.metric) / (b.metric - a.metric)
                r_nl = a.bpp + t * (b.bpp - a.bpp)
                break
    if r_nl is None:
        return NearLosslessResult(reached=False, threshold=threshold)
    return NearLosslessResult(
        reached=True,
        threshold=threshold,
        r_nl=r_nl,
        cr_nl=curve.reference_bpp / r_nl,
    )


# ---------------------------------------------------------------------------
# layer-wise distortion protocol
# ---------------------------------------------------------------------------


def layerwise_protocol(
    checkpoints: dict[float, tuple],
    corpus: list[FeaturePyramid],
    out_dir,
    backend,
) -> list[dict]:
    """For each lambda and each layer i, compress/reconstruct the whole
    pyramid and emit the hybrid pyramid that replaces only p_i with its
    reconstruction, for external task evaluation. Returns the summary
    rows (lambda, bpp, D_total, per-layer distortion)."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rows = []
    for lam in sorted(checkpoints):
        codec, tables = checkpoints[lam]
        bpps, d_layers, d_totals = [], {lv: [] for lv in (2, 3, 4, 5)}, []
        for k, pyr in enumerate(corpus):
            data, _ = codec.compress(pyr, tables, backend)
            recon, _ = codec.decompress(data, tables, backend)
            bpps.append(bpp_of(data, pyr.image_width, pyr.image_height))
            weights = codec.config.distortion_weights
            d_total = 0.0
            per = {}
            for lv in (2, 3, 4, 5, 6):
                t = pyr.layer(lv)
                r = recon.layer(lv)
                d = float(np.mean((t.astype(np.float64) - r.astype(np.float64)) ** 2))
                per[lv] = d
                d_total += weights.get(lv, 0.0) * d
            d_totals.append(d_total)
            for lv in (2, 3, 4, 5):
                d_layers[lv].append(per[lv])
                hybrid = FeaturePyramid(
                    layers={
                        other: (recon.layers[lv] if other == lv else pyr.layers[other])
                        for other in (2, 3, 4, 5)
                    },
                    channels=pyr.channels,
                    image_width=pyr.image_width,
                    image_height=pyr.image_height,
                )
                write_fpf(hybrid, out_dir / f"lambda{lam}_pyr{k}_layer{lv}.fpf")
        rows.append(
            {
                "lambda": lam,
                "bpp": float(np.mean(bpps)),
                "D_total": float(np.mean(d_totals)),
                **{f"D_{lv}": float(np.mean(d_layers[lv])) for lv in (2, 3, 4, 5)},
            }
        )
    return rows


# ---------------------------------------------------------------------------
# results files and reports
# ---------------------------------------------------------------------------


def write_results(path, records: list[dict]) -> None:
    """Line-delimited JSON records (label, lambda, bpp, metric, ...)."""
    with open(path, "w") as f:
        for rec in records:
            f.write(json.dumps(rec, sort_keys=True) + "\n")


def read_results(path) -> list[dict]:
    with open(path) as f:
        return [json.loads(line) for line in f if line.strip()]


def curve_from_records(records: list[dict], label: str) -> RDCurve:
    points = [
        RDPoint(bpp=r["bpp"], metric=r["metric"], d_total=r.get("D_total"))
        for r in records
        if r.get("label", label) == label
        and "bpp" in r
        and r.get("metric") is not None
        and not r.get("uncompressed")
    ]
    ref = [r for r in records if r.get("label", label) == label and r.get("uncompressed")]
    ref_bpp = ref[0]["bpp"] if ref else None
    ref_metric = ref[0].get("metric") if ref else None
    points = [p for p in points if not math.isinf(p.bpp)]
    return RDCurve(label=label, points=points, reference_bpp=ref_bpp, reference_metric=ref_metric)


def write_csv(path, rows: list[dict]) -> None:
    """Deterministic CSV: union of keys, sorted."""
    keys = sorted({k for row in rows for k in row})
    with open(path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=keys)
        writer.writeheader()
        for row in rows:
            writer.writerow(row)


def read_csv(path) -> list[dict]:
    with open(path, newline="") as f:
        return [dict(row) for row in csv.DictReader(f)]


def emit_report(curves: list[RDCurve], rows: list[dict], out_dir) -> dict[str, Path]:
    """Write the metrics CSV plus rate-metric and distortion-metric plots."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    csv_path = out_dir / "metrics.csv"
    write_csv(csv_path, rows)

    rate_path = out_dir / "rate_metric.png"
    fig, ax = plt.subplots()
    for curve in curves:
        pts = sorted(curve.points, key=lambda p: p.bpp)
        ax.plot([p.bpp for p in pts], [p.metric for p in pts], marker="o", label=curve.label)
    ax.set_xlabel("bpp")
    ax.set_ylabel("task metric")
    if curves:
        ax.legend()
    fig.savefig(rate_path, dpi=120)
    plt.close(fig)

    dist_path = out_dir / "distortion_metric.png"
    fig, ax = plt.subplots()
    for curve in curves:
        pts = [p for p in curve.points if p.d_total is not None]
        pts = sorted(pts, key=lambda p: p.d_total)
        if pts:
            ax.plot(
                [p.d_total for p in pts], [p.metric for p in pts], marker="s", label=curve.label
            )
    ax.set_xlabel("total distortion")
    ax.set_ylabel("task metric")
    if curves:
        ax.legend()
    fig.savefig(dist_path, dpi=120)
    plt.close(fig)
    return {"csv": csv_path, "rate_plot": rate_path, "distortion_plot": dist_path}
