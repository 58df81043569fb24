"""Wrench-prediction and tracking error metrics."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import SchemaError
from .trajlog import HAT_COLUMNS, WRENCH_COLUMNS, read_columns_csv, write_columns_csv

AXIS_NAMES = ["Fx", "Fy", "Fz", "tx", "ty", "tz"]
COMPOSITE_NAMES = ["Fxy", "txy", "F", "t"]


def _rmse(x):
    x = np.asarray(x, dtype=float)
    return float(np.sqrt(np.mean(x * x))) if x.size else float("nan")


@dataclass
class RmseReport:
    """Per-axis and composite RMSEs. Composites are RMSEs of the per-sample
    norm of the error (e.g. F_k = |e_F,k|), not combinations of axis RMSEs."""

    axes: dict = field(default_factory=dict)
    composites: dict = field(default_factory=dict)
    E_xy: float = float("nan")
    E_z: float = float("nan")
    n: int = 0
    label: str = ""

    def as_row(self):
        row = {"label": self.label, "n": self.n}
        row.update({f"rmse_{k}": v for k, v in self.axes.items()})
        row.update({f"rmse_{k}": v for k, v in self.composites.items()})
        row["E_xy"] = self.E_xy
        row["E_z"] = self.E_z
        return row


def wrench_errors_report(err, label=""):
    err = np.atleast_2d(np.asarray(err, dtype=float))
    axes = {name: _rmse(err[:, i]) for i, name in enumerate(AXIS_NAMES)}
    comps = {
        "Fxy": _rmse(np.hypot(err[:, 0], err[:, 1])),
        "txy": _rmse(np.hypot(err[:, 3], err[:, 4])),
        "F": _rmse(np.linalg.norm(err[:, 0:3], axis=1)),
        "t": _rmse(np.linalg.norm(err[:, 3:6], axis=1)),
    }
    return RmseReport(axes=axes, composites=comps, n=len(err), label=label)


def _wrench_block(cols, names, source):
    for c in names:
        if c not in cols:
            raise SchemaError(f"missing column {c} in {source}")
    return np.column_stack([cols[c] for c in names])


def rmse_wrench(pred, truth, dt=None, label=""):
    """RMSE report from prediction and truth arrays or CSV files.

    CSV inputs need a ``t`` column and either ``fex_hat..`` or ``fex..``
    columns; timestamps must agree within half a tick.
    """
    if isinstance(pred, np.ndarray) and isinstance(truth, np.ndarray):
        if pred.shape != truth.shape:
            raise SchemaError(f"row counts differ: {len(pred)} vs {len(truth)}")
        return wrench_errors_report(pred - truth, label)
    _, pc, pn = read_columns_csv(pred)
    _, tc, tn = read_columns_csv(truth)
    if pn != tn:
        raise SchemaError(f"row counts differ: {pn} vs {tn}")
    names_p = HAT_COLUMNS if HAT_COLUMNS[0] in pc else WRENCH_COLUMNS
    P = _wrench_block(pc, names_p, "prediction")
    T = _wrench_block(tc, WRENCH_COLUMNS, "truth")
    if "t" in pc and "t" in tc and pn > 1:
        step = dt if dt is not None else float(np.median(np.diff(tc["t"])))
        if np.max(np.abs(pc["t"] - tc["t"])) > 0.5 * step:
            raise SchemaError("timestamps misaligned by more than half a tick")
    return wrench_errors_report(P - T, label)


def tracking_rmse(p, p_ref):
    """(E_xy, E_z): RMSE of horizontal distance and of |dz|."""
    d = np.asarray(p, dtype=float) - np.asarray(p_ref, dtype=float)
    if d.shape != np.shape(p_ref):
        raise SchemaError("position arrays are not aligned")
    return _rmse(np.hypot(d[:, 0], d[:, 1])), _rmse(np.abs(d[:, 2]))


def write_reports_csv(path_or_buf, reports):
    rows = [r.as_row() for r in reports]
    keys = list(rows[0])
    write_columns_csv(path_or_buf, {k: np.array([r[k] for r in rows], dtype=object)
                                    if k == "label" else [float(r[k]) for r in rows] for k in keys})
