"""Time-stamped flight logs and their CSV representation."""
from __future__ import annotations

import io
from dataclasses import dataclass, field

import numpy as np

from .errors import SchemaError

STATE_COLUMNS = ["t", "px", "py", "pz", "vx", "vy", "vz", "qw", "qx", "qy", "qz",
                 "wx", "wy", "wz", "fu", "tmx", "tmy", "tmz"]
WRENCH_COLUMNS = ["fex", "fey", "fez", "tex", "tey", "tez"]
HAT_COLUMNS = [c + "_hat" for c in WRENCH_COLUMNS]
LABEL_COLUMNS = ["t", *WRENCH_COLUMNS, "vx", "vy", "vz", "wx", "wy", "wz"]
TEXT_COLUMNS = {"status", "label"}


@dataclass
class TrajectoryLog:
    """Sampled states, inputs and (optionally) ground-truth wrenches.

    Row ``k`` holds the state at ``t[k]`` and the input held over
    ``[t[k], t[k+1])``. ``acc`` carries exact accelerations
    ``[v_dot, omega_dot]`` when the log comes from the simulator; it is
    never serialized.
    """

    t: np.ndarray
    p: np.ndarray
    v: np.ndarray
    q: np.ndarray
    omega: np.ndarray
    u: np.ndarray
    wrench: np.ndarray | None = None
    acc: np.ndarray | None = None
    extras: dict = field(default_factory=dict)
    failed: bool = False
    meta: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.t)

    @property
    def zeta(self):
        """Regressor input [v_w; omega_b] per row."""
        return np.hstack([self.v, self.omega])

    @property
    def states(self):
        return np.hstack([self.p, self.v, self.q, self.omega])

    @property
    def dt(self):
        return float(self.t[1] - self.t[0]) if len(self.t) > 1 else float("nan")

    def slice(self, start, stop=None):
        sl = slice(start, stop)
        return TrajectoryLog(
            t=self.t[sl], p=self.p[sl], v=self.v[sl], q=self.q[sl], omega=self.omega[sl],
            u=self.u[sl],
            wrench=None if self.wrench is None else self.wrench[sl],
            acc=None if self.acc is None else self.acc[sl],
            extras={k: v[sl] for k, v in self.extras.items()},
            failed=self.failed, meta=dict(self.meta),
        )

    @classmethod
    def empty(cls, with_wrench=True):
        z = np.zeros((0, 3))
        return cls(t=np.zeros(0), p=z, v=z.copy(), q=np.zeros((0, 4)), omega=z.copy(),
                   u=np.zeros((0, 4)), wrench=np.zeros((0, 6)) if with_wrench else None)

    @classmethod
    def from_rows(cls, states, inputs, times, wrenches=None, acc=None, extras=None, **kw):
        states = np.asarray(states, dtype=float).reshape(-1, 13)
        return cls(
            t=np.asarray(times, dtype=float),
            p=states[:, 0:3], v=states[:, 3:6], q=states[:, 6:10], omega=states[:, 10:13],
            u=np.asarray(inputs, dtype=float).reshape(-1, 4),
            wrench=None if wrenches is None else np.asarray(wrenches, dtype=float).reshape(-1, 6),
            acc=None if acc is None else np.asarray(acc, dtype=float).reshape(-1, 6),
            extras=extras or {}, **kw,
        )

    def columns(self):
        cols = {"t": self.t}
        names = STATE_COLUMNS[1:]
        block = np.hstack([self.p, self.v, self.q, self.omega, self.u])
        for i, name in enumerate(names):
            cols[name] = block[:, i]
        if self.wrench is not None:
            for i, name in enumerate(WRENCH_COLUMNS):
                cols[name] = self.wrench[:, i]
        cols.update(self.extras)
        return cols


def _fmt(value):
    if isinstance(value, str):
        return value
    return repr(float(value))


def write_columns_csv(path_or_buf, columns):
    """Write an ordered mapping of equal-length columns; floats use repr so
    they round-trip exactly."""
    names = list(columns)
    n = len(next(iter(columns.values()))) if columns else 0
    lines = [",".join(names)]
    arrays = [columns[k] for k in names]
    for i in range(n):
        lines.append(",".join(_fmt(a[i]) for a in arrays))
    text = "\n".join(lines) + "\n"
    if hasattr(path_or_buf, "write"):
        path_or_buf.write(text)
    else:
        with open(path_or_buf, "w") as fh:
            fh.write(text)


def read_columns_csv(path_or_buf):
    """Return (header, dict of columns, row count). Text columns stay as str."""
    if hasattr(path_or_buf, "read"):
        text = path_or_buf.read()
    else:
        with open(path_or_buf) as fh:
            text = fh.read()
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines:
        raise SchemaError("empty CSV")
    header = [h.strip() for h in lines[0].split(",")]
    rows = [ln.split(",") for ln in lines[1:]]
    for i, r in enumerate(rows):
        if len(r) != len(header):
            raise SchemaError(f"row {i} has {len(r)} fields, expected {len(header)}")
    cols = {}
    for j, name in enumerate(header):
        raw = [r[j].strip() for r in rows]
        if name in TEXT_COLUMNS:
            cols[name] = np.array(raw, dtype=object)
        else:
            cols[name] = np.array([float(x) for x in raw], dtype=float)
    return header, cols, len(rows)


def write_log_csv(log: TrajectoryLog, path_or_buf):
    write_columns_csv(path_or_buf, log.columns())


def log_to_csv_text(log: TrajectoryLog) -> str:
    buf = io.StringIO()
    write_log_csv(log, buf)
    return buf.getvalue()


def parse_log_columns(header, cols, n):
    """Build a TrajectoryLog from parsed columns, validating the schema."""
    for name in STATE_COLUMNS:
        if name not in cols:
            raise SchemaError(f"missing column {name}")
    present = [c for c in WRENCH_COLUMNS if c in cols]
    if present and len(present) != len(WRENCH_COLUMNS):
        missing = [c for c in WRENCH_COLUMNS if c not in cols][0]
        raise SchemaError(f"missing column {missing}")
    block = np.column_stack([cols[c] for c in STATE_COLUMNS]) if n else np.zeros((0, 18))
    wrench = None
    if present:
        wrench = np.column_stack([cols[c] for c in WRENCH_COLUMNS]) if n else np.zeros((0, 6))
    known = set(STATE_COLUMNS) | set(WRENCH_COLUMNS)
    extras = {k: cols[k] for k in header if k not in known}
    return TrajectoryLog(
        t=block[:, 0], p=block[:, 1:4], v=block[:, 4:7], q=block[:, 7:11],
        omega=block[:, 11:14], u=block[:, 14:18], wrench=wrench, extras=extras,
    )


def bad_rows(log: TrajectoryLog):
    """Indices of rows with any non-finite numeric entry."""
    parts = [log.t[:, None], log.p, log.v, log.q, log.omega, log.u]
    if log.wrench is not None:
        parts.append(log.wrench)
    block = np.hstack(parts)
    return np.flatnonzero(~np.all(np.isfinite(block), axis=1))

