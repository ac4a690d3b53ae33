"""Session accuracy, average and harmonic accuracy, and base-vs-new error rates.

Accuracies are fractions in [0, 1]. "Base" means classes of session 0,
"new" means every class introduced in a later session.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass

import numpy as np

from .errors import InputError

REPORT_KEYS = ("a_t", "a_avg", "a_final", "a_base", "a_new", "hacc", "fnr", "fpr", "seed", "config", "merge_report")

RUN_REPORT_SCHEMA = {
    "type": "object",
    "required": list(REPORT_KEYS[:-1]),
    "additionalProperties": False,
    "properties": {
        "a_t": {"type": "array", "items": {"type": "number", "minimum": 0, "maximum": 1}, "minItems": 1},
        "a_avg": {"type": "number", "minimum": 0, "maximum": 1},
        "a_final": {"type": "number", "minimum": 0, "maximum": 1},
        "a_base": {"type": "number", "minimum": 0, "maximum": 1},
        "a_new": {"type": "number", "minimum": 0, "maximum": 1},
        "hacc": {"type": "number", "minimum": 0, "maximum": 1},
        "fnr": {"type": "number", "minimum": 0, "maximum": 1},
        "fpr": {"type": "number", "minimum": 0, "maximum": 1},
        "seed": {"type": "integer", "minimum": 0},
        "config": {"type": "object"},
        "merge_report": {"type": ["string", "null"]},
    },
}


@dataclass
class ConfusionRecords:
    """Per-sample true class, predicted class and the session each was introduced in."""

    true: np.ndarray
    pred: np.ndarray
    true_session: np.ndarray
    pred_session: np.ndarray

    def __len__(self):
        return len(self.true)

    def subset(self, mask):
        return ConfusionRecords(self.true[mask], self.pred[mask], self.true_session[mask], self.pred_session[mask])


def make_records(true, pred, session_of):
    """``session_of`` maps class id -> session index."""
    true = np.asarray(true, dtype=np.int64)
    pred = np.asarray(pred, dtype=np.int64)
    ts = np.array([session_of[int(c)] for c in true], dtype=np.int64)
    ps = np.array([session_of[int(c)] for c in pred], dtype=np.int64)
    return ConfusionRecords(true, pred, ts, ps)


def session_accuracy(records):
    if len(records) == 0:
        raise InputError("no records to score")
    return float(np.count_nonzero(records.true == records.pred) / len(records))


def average_accuracy(a_t):
    a_t = list(a_t)
    if not a_t:
        raise InputError("empty accuracy list")
    return float(sum(a_t) / len(a_t))


def harmonic_accuracy(a_o, a_n):
    if a_o + a_n == 0:
        return 0.0
    return 2.0 * a_o * a_n / (a_o + a_n)


def fnr_fpr(records):
    """Binarize with base classes as positives; returns ``(FNR, FPR)``."""
    pos = records.true_session == 0
    pred_pos = records.pred_session == 0
    if not pos.any() or pos.all():
        raise InputError("need at least one base and one new true class")
    tp = np.count_nonzero(pos & pred_pos)
    fn = np.count_nonzero(pos & ~pred_pos)
    fp = np.count_nonzero(~pos & pred_pos)
    tn = np.count_nonzero(~pos & ~pred_pos)
    return fn / (tp + fn), fp / (fp + tn)


def base_new_accuracy(records):
    base = records.true_session == 0
    if not base.any() or base.all():
        raise InputError("need both base and new classes in the records")
    return session_accuracy(records.subset(base)), session_accuracy(records.subset(~base))


def build_report(a_t, final_records, seed, config, merge_report=None):
    a_base, a_new = base_new_accuracy(final_records)
    fnr, fpr = fnr_fpr(final_records)
    return {
        "a_t": [float(a) for a in a_t],
        "a_avg": average_accuracy(a_t),
        "a_final": float(a_t[-1]),
        "a_base": a_base,
        "a_new": a_new,
        "hacc": harmonic_accuracy(a_base, a_new),
        "fnr": float(fnr),
        "fpr": float(fpr),
        "seed": int(seed),
        "config": config,
        "merge_report": merge_report,
    }


def validate_report(report):
    import jsonschema

    try:
        jsonschema.validate(report, RUN_REPORT_SCHEMA)
    except jsonschema.ValidationError as exc:
        raise InputError(f"invalid run report: {exc.message}") from exc
    return report


def dumps_report(report):
    return json.dumps(report, indent=2, sort_keys=True)


def _pct(x):
    return f"{100.0 * x:.1f}"


def render_table(report):
    n = len(report["a_t"])
    header = [f"A{t}" for t in range(n)] + ["Aavg", "Abase", "Anew", "HAcc", "FNR", "FPR"]
    values = [report["a_t"][t] for t in range(n)] + [
        report["a_avg"],
        report["a_base"],
        report["a_new"],
        report["hacc"],
        report["fnr"],
        report["fpr"],
    ]
    cells = [_pct(v) for v in values]
    widths = [max(len(h), len(c)) for h, c in zip(header, cells)]
    line = lambda row: " | ".join(s.rjust(w) for s, w in zip(row, widths))
    return "\n".join([line(header), "-+-".join("-" * w for w in widths), line(cells)])


def render_csv(report):
    n = len(report["a_t"])
    header = [f"a_{t}" for t in range(n)] + ["a_avg", "a_base", "a_new", "hacc", "fnr", "fpr"]
    values = list(report["a_t"]) + [report[k] for k in ("a_avg", "a_base", "a_new", "hacc", "fnr", "fpr")]
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerow([repr(float(v)) for v in values])
    return buf.getvalue()
