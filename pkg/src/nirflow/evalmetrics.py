"""Endpoint / angular error maps, summary statistics, rasters and reports."""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .imagecore import DimensionMismatchError, FlowField

EE_THRESHOLDS = (0.5, 0.75, 1.0, 2.0)
AE_THRESHOLDS = (2.0, 5.0, 7.5, 10.0)
PERCENTILES = (50, 75, 99, 100)
CSV_COLUMNS = ("method", "sequence", "frame", "kind", "n_valid", "avg", "sd",
               "a50", "a75", "a99", "a100", "r1", "r2", "r3", "r4", "acc")
AE_CONVENTION = "AE = arccos of normalized dot product of (u, v, 1) vectors, degrees"


@dataclass
class ErrorMap:
    values: np.ndarray          # (H, W); meaningful where ``valid``
    valid: np.ndarray           # GT-known pixels
    kind: str                   # "EE" or "AE"
    est_unknown: Optional[np.ndarray] = None   # estimate sentinels scored as zero motion

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    def samples(self) -> np.ndarray:
        return self.values[self.valid]


@dataclass
class ErrorStats:
    avg: float
    sd: float
    ax: dict
    rx: dict
    n_valid: int

    def to_dict(self) -> dict:
        return {"avg": self.avg, "sd": self.sd, "n_valid": self.n_valid,
                "ax": {str(k): v for k, v in self.ax.items()},
                "rx": {repr(float(k)): v for k, v in self.rx.items()}}

    @classmethod
    def from_dict(cls, d: dict) -> "ErrorStats":
        return cls(d["avg"], d["sd"], {int(k): v for k, v in d["ax"].items()},
                   {float(k): v for k, v in d["rx"].items()}, d["n_valid"])


@dataclass
class SequenceStats:
    ee: list
    ae: list
    acc_ee: list = field(default_factory=list)


def _aligned(gt: FlowField, est: FlowField):
    if gt.shape != est.shape:
        raise DimensionMismatchError(f"GT is {gt.width}x{gt.height} but estimate is "
                                     f"{est.width}x{est.height}")
    valid = gt.valid
    known = est.valid
    ue = np.where(known, est.u, 0.0)
    ve = np.where(known, est.v, 0.0)
    ug = np.where(valid, gt.u, 0.0)
    vg = np.where(valid, gt.v, 0.0)
    return ug, vg, ue, ve, valid, ~known & valid


def endpoint_error(gt: FlowField, est: FlowField) -> ErrorMap:
    ug, vg, ue, ve, valid, flagged = _aligned(gt, est)
    ee = np.where(valid, np.hypot(ue - ug, ve - vg), 0.0)
    return ErrorMap(ee, valid, "EE", flagged)


def angle_error(gt: FlowField, est: FlowField) -> ErrorMap:
    """Angle between (u_g, v_g, 1) and (u_e, v_e, 1) in degrees.

    Evaluated as atan2(|a x b|, a . b), which equals the clamped arccos of
    the normalized dot product but stays exact near zero: identical vectors
    give exactly 0 rather than arccos rounding noise.
    """
    ug, vg, ue, ve, valid, flagged = _aligned(gt, est)
    dot = ug * ue + vg * ve + 1.0
    cx = vg - ve
    cy = ue - ug
    cz = ug * ve - vg * ue
    ae = np.degrees(np.arctan2(np.sqrt(cx * cx + cy * cy + cz * cz), dot))
    return ErrorMap(np.where(valid, ae, 0.0), valid, "AE", flagged)


def default_thresholds(kind: str) -> tuple:
    if kind == "EE":
        return EE_THRESHOLDS
    if kind == "AE":
        return AE_THRESHOLDS
    raise ValueError(f"unknown error kind {kind!r}")


def compute_stats(errs, r_thresholds: Optional[Sequence[float]] = None) -> ErrorStats:
    """Mean, population SD, order statistics AX and exceedance fractions RX.

    AX is the element at 0-based rank ceil(X n / 100) - 1 of the ascending
    sort (A100 is the maximum); RX counts errors strictly above X.
    """
    if isinstance(errs, ErrorMap):
        if r_thresholds is None:
            r_thresholds = default_thresholds(errs.kind)
        x = errs.samples()
    else:
        x = np.asarray(errs, dtype=np.float64).ravel()
        if r_thresholds is None:
            r_thresholds = EE_THRESHOLDS
    n = x.size
    if n == 0:
        raise ValueError("no valid pixels to summarize")
    s = np.sort(x)
    ax = {}
    for p in PERCENTILES:
        rank = max(math.ceil(p * n / 100) - 1, 0)
        ax[p] = float(s[rank])
    # errors > t  <=>  index beyond the last element <= t
    rx = {float(t): float(n - np.searchsorted(s, t, side="right")) / n for t in r_thresholds}
    return ErrorStats(float(np.mean(x)), float(np.std(x)), ax, rx, int(n))


def accumulate_sequence(per_frame_ee: Sequence[ErrorStats],
                        per_frame_ae: Optional[Sequence[ErrorStats]] = None) -> SequenceStats:
    """Running sum of per-frame Avg.EE."""
    if not per_frame_ee:
        raise ValueError("sequence has no frames")
    acc = []
    total = 0.0
    for st in per_frame_ee:
        total += st.avg
        acc.append(total)
    return SequenceStats(list(per_frame_ee), list(per_frame_ae or []), acc)


# ---------------------------------------------------------------------------
# rasters
# ---------------------------------------------------------------------------

def render_error_map(errs: ErrorMap, scale: float = 1.0) -> np.ndarray:
    """8-bit graymap: clamp(err / scale) * 255; invalid pixels black."""
    if scale <= 0:
        raise ValueError("scale must be positive")
    v = np.where(errs.valid, np.clip(errs.values / scale, 0.0, 1.0), 0.0)
    return np.rint(v * 255.0).astype(np.uint8)


def _colour_wheel() -> np.ndarray:
    ry, yg, gc, cb, bm, mr = 15, 6, 4, 11, 13, 6
    cols = []
    for n, start, end in ((ry, (255, 0, 0), (255, 255, 0)), (yg, (255, 255, 0), (0, 255, 0)),
                          (gc, (0, 255, 0), (0, 255, 255)), (cb, (0, 255, 255), (0, 0, 255)),
                          (bm, (0, 0, 255), (255, 0, 255)), (mr, (255, 0, 255), (255, 0, 0))):
        t = np.arange(n)[:, None] / n
        cols.append(np.array(start)[None, :] * (1 - t) + np.array(end)[None, :] * t)
    return np.concatenate(cols)


def render_flow(flow: FlowField, max_magnitude: Optional[float] = None) -> np.ndarray:
    """Hue-wheel colour coding (hue = direction, saturation = magnitude / max); unknown pixels black."""
    valid = flow.valid
    u = np.where(valid, flow.u, 0.0)
    v = np.where(valid, flow.v, 0.0)
    mag = np.hypot(u, v)
    if max_magnitude is None:
        max_magnitude = float(mag.max()) if mag.size else 0.0
    if max_magnitude <= 0:
        max_magnitude = 1.0
    wheel = _colour_wheel()
    ncols = len(wheel)
    rad = np.clip(mag / max_magnitude, 0.0, 1.0)
    a = np.arctan2(-v, -u) / np.pi
    fk = (a + 1) / 2 * (ncols - 1)
    k0 = np.floor(fk).astype(int)
    k1 = (k0 + 1) % ncols
    f = (fk - k0)[..., None]
    col = ((1 - f) * wheel[k0] + f * wheel[k1]) / 255.0
    col = 1 - rad[..., None] * (1 - col)
    img = np.rint(np.where(valid[..., None], col, 0.0) * 255.0).astype(np.uint8)
    return img


# ---------------------------------------------------------------------------
# reports
# ---------------------------------------------------------------------------

@dataclass
class Report:
    """Per-method, per-sequence statistics plus the configuration that produced them."""

    # {method: {sequence: SequenceStats}}
    results: dict = field(default_factory=dict)
    config: dict = field(default_factory=dict)

    def add(self, method: str, sequence: str, stats: SequenceStats) -> None:
        self.results.setdefault(method, {})[sequence] = stats

    def rows(self) -> list[dict]:
        out = []
        for method in sorted(self.results):
            seqs = self.results[method]
            for seq in sorted(seqs):
                st = seqs[seq]
                for k, ee in enumerate(st.ee):
                    out.append(_row(method, seq, k, "EE", ee, st.acc_ee[k]))
                    if k < len(st.ae):
                        out.append(_row(method, seq, k, "AE", st.ae[k], None))
        return out

    def to_json_dict(self) -> dict:
        return {
            "ae_convention": AE_CONVENTION,
            "thresholds": {"EE": list(EE_THRESHOLDS), "AE": list(AE_THRESHOLDS)},
            "config": self.config,
            "results": {m: {s: {"ee": [e.to_dict() for e in st.ee],
                                "ae": [a.to_dict() for a in st.ae],
                                "acc_ee": st.acc_ee}
                            for s, st in seqs.items()}
                        for m, seqs in self.results.items()},
        }

    @classmethod
    def from_json_dict(cls, d: dict) -> "Report":
        rep = cls(config=d.get("config", {}))
        for m, seqs in d["results"].items():
            for s, st in seqs.items():
                rep.add(m, s, SequenceStats([ErrorStats.from_dict(e) for e in st["ee"]],
                                            [ErrorStats.from_dict(a) for a in st["ae"]],
                                            list(st["acc_ee"])))
        return rep

    def ranking(self) -> list[tuple[str, float]]:
        """Methods ordered by mean per-frame Avg.EE over all sequences, best first."""
        scores = []
        for m, seqs in self.results.items():
            vals = [e.avg for st in seqs.values() for e in st.ee]
            scores.append((m, float(np.mean(vals))))
        return sorted(scores, key=lambda t: (t[1], t[0]))


def _row(method, seq, frame, kind, st: ErrorStats, acc) -> dict:
    thr = default_thresholds(kind)
    row = {"method": method, "sequence": seq, "frame": frame, "kind": kind,
           "n_valid": st.n_valid, "avg": st.avg, "sd": st.sd}
    for p in PERCENTILES:
        row[f"a{p}"] = st.ax[p]
    for i, t in enumerate(thr, 1):
        row[f"r{i}"] = st.rx[float(t)]
    row["acc"] = "" if acc is None else acc
    return row


def write_report(report: Report, csv_path, json_path) -> None:
    try:
        with open(csv_path, "w", newline="") as fh:
            wr = csv.DictWriter(fh, fieldnames=CSV_COLUMNS)
            wr.writeheader()
            for row in report.rows():
                wr.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})
        with open(json_path, "w") as fh:
            json.dump(report.to_json_dict(), fh, indent=2, sort_keys=True)
    except OSError as exc:
        raise OSError(f"cannot write report: {exc}") from exc


def read_report_json(path) -> Report:
    with open(path) as fh:
        return Report.from_json_dict(json.load(fh))


def evaluate_sequence(gts: Sequence[FlowField], ests: Sequence[FlowField]) -> SequenceStats:
    if len(gts) != len(ests):
        raise ValueError(f"{len(ests)} estimates for {len(gts)} GT fields")
    ee = [compute_stats(endpoint_error(g, e)) for g, e in zip(gts, ests)]
    ae = [compute_stats(angle_error(g, e)) for g, e in zip(gts, ests)]
    return accumulate_sequence(ee, ae)
