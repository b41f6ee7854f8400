"""Session metrics: micro accuracy, MAcc, NCAcc, dropping rate and F_FSCIL.

All metrics are fractions in [0, 1]; text output multiplies by 100.
"""

from __future__ import annotations

import csv
import io
import json
from collections import defaultdict
from dataclasses import asdict, dataclass, field
from typing import NamedTuple

from .errors import MetricError, ProtocolError

CSV_HEADER = ("session", "sample_id", "true_label", "pred_label", "intro_session")


class PredictionRow(NamedTuple):
    session: int
    sample_id: str
    true_label: str
    pred_label: str
    intro_session: int


class PredictionLog:
    def __init__(self, rows=()):
        self.rows = [PredictionRow(*r) for r in rows]
        for r in self.rows:
            if r.intro_session > r.session:
                raise MetricError(f"{r.sample_id}: class introduced at {r.intro_session} after session {r.session}")

    def __len__(self):
        return len(self.rows)

    def __iter__(self):
        return iter(self.rows)

    def extend(self, rows) -> None:
        self.rows.extend(PredictionLog(rows).rows)

    def sessions(self) -> list:
        return sorted({r.session for r in self.rows})

    def for_session(self, b: int) -> list:
        return [r for r in self.rows if r.session == b]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CSV_HEADER)
        for r in self.rows:
            w.writerow(r)
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "PredictionLog":
        reader = csv.reader(io.StringIO(text))
        header = tuple(next(reader, ()))
        if header != CSV_HEADER:
            raise MetricError(f"unexpected prediction log header {header}")
        return cls((int(s), sid, t, p, int(i)) for s, sid, t, p, i in reader)


def _session_rows(log, b):
    rows = [r for r in log if r.session == b]
    if not rows:
        raise MetricError(f"no prediction rows for session {b}")
    return rows


def _accuracy(rows) -> float:
    return sum(r.true_label == r.pred_label for r in rows) / len(rows)


def per_class_accuracy(rows) -> dict:
    """Per-class accuracy keyed in sorted class order, so sums over it ignore row order."""
    hit, tot = defaultdict(int), defaultdict(int)
    for r in rows:
        tot[r.true_label] += 1
        hit[r.true_label] += r.true_label == r.pred_label
    return {c: hit[c] / tot[c] for c in sorted(tot)}


def session_accuracy(log, b: int) -> float:
    return _accuracy(_session_rows(log, b))


def macro_accuracy(log, b: int, classes=None) -> float:
    """Mean per-class accuracy over the visible classes of session ``b``."""
    per = per_class_accuracy(_session_rows(log, b))
    if classes is None:
        classes = list(per)
    missing = [c for c in classes if c not in per]
    if missing:
        raise MetricError(f"session {b}: class {missing[0]!r} has no test rows")
    return sum(per[c] for c in classes) / len(classes)


def novel_accuracy(log, b: int, macro: bool = False) -> float:
    """Accuracy at session ``b`` on classes introduced at ``b``."""
    rows = [r for r in _session_rows(log, b) if r.intro_session == b]
    if not rows:
        raise MetricError(f"session {b} has no rows for its newly introduced classes")
    if macro:
        per = per_class_accuracy(rows)
        return sum(per.values()) / len(per)
    return _accuracy(rows)


def novel_class_accuracy(log, literal: bool = False, macro: bool = False) -> float:
    """Mean of per-session novel accuracy over b = 2..B (``literal``: b = 1..B)."""
    sessions = sorted({r.session for r in log})
    if not sessions:
        raise MetricError("empty prediction log")
    chosen = sessions if literal else [b for b in sessions if b >= 2]
    if not chosen:
        raise MetricError("no incremental sessions in log")
    return sum(novel_accuracy(log, b, macro) for b in chosen) / len(chosen)


def dropping_rate(acc_first: float, acc_last: float) -> float:
    if acc_first <= 0:
        raise MetricError("dropping rate undefined for zero first-session accuracy")
    return abs(acc_last - acc_first) / acc_first


def f_fscil(acc_B: float, ncacc: float) -> float:
    """Harmonic mean of final accuracy and NCAcc; 0 when both are 0."""
    if acc_B + ncacc == 0:
        return 0.0
    return 2.0 * acc_B * ncacc / (acc_B + ncacc)


@dataclass
class MetricsReport:
    acc: list  # micro accuracy per session, index 0 = session 1
    macc: list
    ncacc: float
    ncacc_macro: float
    delta_micro: float
    delta_macro: float
    f_micro: float
    f_macro: float
    ncacc_by_session: dict = field(default_factory=dict)
    config: dict = field(default_factory=dict)

    def to_json(self) -> str:
        doc = asdict(self)
        doc["ncacc_by_session"] = {str(k): v for k, v in sorted(self.ncacc_by_session.items())}
        return json.dumps(doc, indent=1, sort_keys=True) + "\n"

    def render_table(self, label: str = "") -> str:
        """Micro row over macro row, values x100 with one decimal."""
        n = len(self.acc)
        head = ["", *[str(i) for i in range(n)], "NCAcc", "Delta", "F"]
        micro = [label or "micro", *[f"{100 * a:.1f}" for a in self.acc],
                 f"{100 * self.ncacc:.1f}", f"{100 * self.delta_micro:.1f}", f"{100 * self.f_micro:.1f}"]
        macro = ["" if label else "macro", *[f"{100 * a:.1f}" for a in self.macc],
                 f"{100 * self.ncacc_macro:.1f}", f"{100 * self.delta_macro:.1f}", f"{100 * self.f_macro:.1f}"]
        widths = [max(len(r[i]) for r in (head, micro, macro)) for i in range(len(head))]
        fmt = lambda row: "  ".join(c.rjust(w) for c, w in zip(row, widths))
        return "\n".join([fmt(head), fmt(micro), fmt(macro)]) + "\n"


def check_log(log, schedule) -> None:
    intro = schedule.intro_session()
    for r in log:
        if r.true_label not in intro:
            raise ProtocolError(f"{r.sample_id}: label {r.true_label!r} not in schedule")
        if intro[r.true_label] != r.intro_session:
            raise ProtocolError(f"{r.sample_id}: intro session {r.intro_session} != schedule {intro[r.true_label]}")
        if r.intro_session > r.session:
            raise ProtocolError(f"{r.sample_id}: evaluated before its class was introduced")


def compile_report(log, schedule, config: dict | None = None, ncacc_literal: bool = False) -> MetricsReport:
    check_log(log, schedule)
    sessions = sorted({r.session for r in log})
    if sessions != list(range(1, len(sessions) + 1)):
        raise MetricError(f"log must cover sessions 1..B contiguously, got {sessions}")
    acc = [session_accuracy(log, b) for b in sessions]
    macc = [macro_accuracy(log, b, schedule.visible_classes(b)) for b in sessions]
    nc_sessions = sessions if ncacc_literal else sessions[1:]
    by_session = {b: novel_accuracy(log, b) for b in nc_sessions}
    if by_session:
        nc = sum(by_session.values()) / len(by_session)
        nc_macro = sum(novel_accuracy(log, b, macro=True) for b in nc_sessions) / len(nc_sessions)
    else:
        nc = nc_macro = 0.0
    return MetricsReport(
        acc=acc,
        macc=macc,
        ncacc=nc,
        ncacc_macro=nc_macro,
        delta_micro=dropping_rate(acc[0], acc[-1]),
        delta_macro=dropping_rate(macc[0], macc[-1]),
        f_micro=f_fscil(acc[-1], nc),
        f_macro=f_fscil(macc[-1], nc_macro),
        ncacc_by_session=by_session,
        config=dict(config or {}),
    )
