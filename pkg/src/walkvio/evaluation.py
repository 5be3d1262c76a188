"""Translation error of an estimated trajectory against ground truth."""

from __future__ import annotations

import io
from dataclasses import dataclass

import numpy as np

ALIGNMENTS = ("se3", "posyaw", "none")
MATCH_TOLERANCE = 1e-6  # s


class EvaluationError(ValueError):
    pass


def umeyama(src: np.ndarray, dst: np.ndarray):
    """Rotation and translation minimizing ``sum |dst - (R src + t)|^2`` (no scale)."""
    mu_s, mu_d = src.mean(axis=0), dst.mean(axis=0)
    S = (dst - mu_d).T @ (src - mu_s) / len(src)
    U, _, Vt = np.linalg.svd(S)
    D = np.eye(3)
    D[2, 2] = np.sign(np.linalg.det(U) * np.linalg.det(Vt)) or 1.0
    R = U @ D @ Vt
    return R, mu_d - R @ mu_s


def align_yaw(src: np.ndarray, dst: np.ndarray):
    """Best rotation about world z plus translation (gravity-aligned frames)."""
    mu_s, mu_d = src.mean(axis=0), dst.mean(axis=0)
    a, b = src[:, :2] - mu_s[:2], dst[:, :2] - mu_d[:2]
    yaw = np.arctan2(np.sum(a[:, 0] * b[:, 1] - a[:, 1] * b[:, 0]), np.sum(a[:, 0] * b[:, 0] + a[:, 1] * b[:, 1]))
    c, s = np.cos(yaw), np.sin(yaw)
    R = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
    return R, mu_d - R @ mu_s


@dataclass(frozen=True)
class DistanceBin:
    start: float  # m travelled
    end: float
    count: int
    q1: float
    median: float
    q3: float
    whisker_low: float
    whisker_high: float
    rmse: float


@dataclass(frozen=True, eq=False)
class TrajectoryErrorReport:
    rmse: float
    max_error: float
    mean_error: float
    timestamps: np.ndarray
    errors: np.ndarray
    rotation: np.ndarray
    translation: np.ndarray
    alignment: str
    matching: str
    bins: tuple

    def __len__(self) -> int:
        return len(self.errors)

    def to_text(self) -> str:
        rows = [
            ("rmse", repr(self.rmse)),
            ("max_error", repr(self.max_error)),
            ("mean_error", repr(self.mean_error)),
            ("samples", str(len(self.errors))),
            ("alignment", self.alignment),
            ("matching", self.matching),
            ("alignment.rotation", " ".join(repr(float(v)) for v in self.rotation.ravel())),
            ("alignment.translation", " ".join(repr(float(v)) for v in self.translation)),
        ]
        return "".join(f"{k} = {v}\n" for k, v in rows)

    def series_csv(self) -> str:
        buf = io.StringIO()
        buf.write("t,error\n")
        for t, e in zip(self.timestamps, self.errors):
            buf.write(f"{t!r},{e!r}\n")
        return buf.getvalue()

    def boxplot_csv(self) -> str:
        buf = io.StringIO()
        buf.write("bin_start,bin_end,count,q1,median,q3,whisker_low,whisker_high,rmse\n")
        for b in self.bins:
            buf.write(
                f"{b.start!r},{b.end!r},{b.count},{b.q1!r},{b.median!r},{b.q3!r},{b.whisker_low!r},{b.whisker_high!r},{b.rmse!r}\n"
            )
        return buf.getvalue()


def _match(est_t, est_p, gt_t, gt_p):
    """Pair samples; exact timestamp matches when available, else interpolate the estimate onto GT times."""
    k = np.clip(np.searchsorted(gt_t, est_t), 0, len(gt_t) - 1)
    k_prev = np.clip(k - 1, 0, len(gt_t) - 1)
    nearest = np.where(np.abs(gt_t[k] - est_t) <= np.abs(gt_t[k_prev] - est_t), k, k_prev)
    if np.all(np.abs(gt_t[nearest] - est_t) <= MATCH_TOLERANCE):
        return est_t, est_p, gt_p[nearest], "exact"
    inside = (gt_t >= est_t[0]) & (gt_t <= est_t[-1])
    if not np.any(inside):
        raise EvaluationError("estimate and ground truth do not overlap in time")
    t = gt_t[inside]
    p = np.column_stack([np.interp(t, est_t, est_p[:, i]) for i in range(3)])
    return t, p, gt_p[inside], "interpolated"


def _bins(t, gt_p, errors, bin_length: float) -> tuple:
    travelled = np.concatenate([[0.0], np.cumsum(np.linalg.norm(np.diff(gt_p, axis=0), axis=1))])
    if bin_length <= 0 or travelled[-1] <= 0:
        edges = np.array([0.0, max(travelled[-1], 0.0)])
    else:
        edges = np.arange(0.0, travelled[-1] + bin_length, bin_length)
    out = []
    for lo, hi in zip(edges[:-1], edges[1:]):
        last = hi >= edges[-1]
        sel = (travelled >= lo) & ((travelled <= hi) if last else (travelled < hi))
        e = errors[sel]
        if e.size == 0:
            continue
        q1, med, q3 = np.percentile(e, [25, 50, 75])
        iqr = q3 - q1
        lo_w = float(e[e >= q1 - 1.5 * iqr].min())
        hi_w = float(e[e <= q3 + 1.5 * iqr].max())
        out.append(DistanceBin(float(lo), float(hi), int(e.size), float(q1), float(med), float(q3), lo_w, hi_w, float(np.sqrt(np.mean(e * e)))))
    return tuple(out)


def trajectory_error(
    est_t,
    est_p,
    gt_t,
    gt_p,
    align: str = "se3",
    bin_length: float = 5.0,
) -> TrajectoryErrorReport:
    """Align the estimate to ground truth on positions, then RMSE / max / distance-binned quartiles."""
    if align not in ALIGNMENTS:
        raise EvaluationError(f"unknown alignment {align!r}; expected one of {ALIGNMENTS}")
    est_t, gt_t = np.asarray(est_t, float), np.asarray(gt_t, float)
    est_p, gt_p = np.asarray(est_p, float).reshape(-1, 3), np.asarray(gt_p, float).reshape(-1, 3)
    if len(est_t) == 0 or len(gt_t) == 0:
        raise EvaluationError("empty trajectory")
    if est_t[-1] < gt_t[0] or est_t[0] > gt_t[-1]:
        raise EvaluationError("estimate and ground truth do not overlap in time")
    t, p, g, matching = _match(est_t, est_p, gt_t, gt_p)
    if align == "se3" and len(t) >= 3:
        R, tr = umeyama(p, g)
    elif align in ("se3", "posyaw"):
        R, tr = align_yaw(p, g)
    else:
        R, tr = np.eye(3), np.zeros(3)
    aligned = p @ R.T + tr
    errors = np.linalg.norm(aligned - g, axis=1)
    return TrajectoryErrorReport(
        rmse=float(np.sqrt(np.mean(errors * errors))),
        max_error=float(errors.max()),
        mean_error=float(errors.mean()),
        timestamps=t,
        errors=errors,
        rotation=R,
        translation=tr,
        alignment=align,
        matching=matching,
        bins=_bins(t, g, errors, bin_length),
    )
