"""Nearest-normative-graph baselines.

A normative graph is the positionwise mean of a class's training windows
(divided by subject mean beforehand). ``B1`` assigns the class of the graph
at the smallest Euclidean distance; ``B2`` treats window and graphs as
discrete distributions and picks the graph with the smallest
Kullback-Leibler divergence from the window. Ties go to HC.
"""

from dataclasses import dataclass

import numpy as np

from .errors import EmptyTestSet, LengthMismatch, MissingClass, NonPositiveSignal, NotNormalized
from .signal_io import LABELS

KL_FLOOR = 1e-12


@dataclass(eq=False)
class NormativeGraph:
    label: str
    values: np.ndarray


def build_normative_graphs(train_windows_pp):
    graphs = {}
    for label in LABELS:
        rows = [w.values for w in train_windows_pp if w.label == label]
        if not rows:
            raise MissingClass(f"no training windows of class {label}")
        if len({len(r) for r in rows}) != 1:
            raise LengthMismatch("training windows differ in length")
        graphs[label] = NormativeGraph(label, np.mean(rows, axis=0))
    return graphs


def _values(window):
    return np.asarray(getattr(window, "values", window), dtype=np.float64)


def _check_lengths(x, graphs):
    for g in graphs.values():
        if len(g.values) != len(x):
            raise LengthMismatch(f"window has {len(x)} samples, graph {g.label} has {len(g.values)}")


def _argmin_hc_first(scores):
    # LABELS lists HC first, so strict < keeps HC on ties
    best = LABELS[0]
    for label in LABELS[1:]:
        if scores[label] < scores[best]:
            best = label
    return best


def classify_b1(window_pp, graphs):
    x = _values(window_pp)
    _check_lengths(x, graphs)
    return _argmin_hc_first({label: np.linalg.norm(x - g.values) for label, g in graphs.items()})


def kl_divergence(p, q):
    """``sum p_i ln(p_i / q_i)`` with ``0 ln(0/q) = 0``.

    Where ``p`` is positive, ``q`` is floored at 1e-12 (and renormalized if
    any entry was floored), which keeps the result finite.
    """
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if p.shape != q.shape or p.ndim != 1:
        raise LengthMismatch(f"distributions of shapes {p.shape} and {q.shape}")
    for name, d in (("p", p), ("q", q)):
        if np.any(d < 0) or not np.all(np.isfinite(d)) or abs(d.sum() - 1.0) > 1e-9:
            raise NotNormalized(f"{name} is not a probability vector")
    nz = p > 0
    low = nz & (q < KL_FLOOR)
    if low.any():
        q = np.where(low, KL_FLOOR, q)
        q = q / q.sum()
    return max(0.0, float(np.sum(p[nz] * np.log(p[nz] / q[nz]))))


def _to_distribution(x):
    if np.any(x < 0) or not x.sum() > 0:
        raise NonPositiveSignal("signal must be non-negative with a positive sum")
    return x / x.sum()


def classify_b2(window_pp, graphs):
    x = _values(window_pp)
    _check_lengths(x, graphs)
    p = _to_distribution(x)
    return _argmin_hc_first(
        {label: kl_divergence(p, _to_distribution(g.values)) for label, g in graphs.items()}
    )


CLASSIFIERS = {"B1": classify_b1, "B2": classify_b2}


def evaluate_baseline(classifier, test_windows_pp, graphs):
    """Accuracy of ``classifier`` ("B1", "B2" or a callable) on the windows."""
    if not test_windows_pp:
        raise EmptyTestSet("no test windows")
    fn = CLASSIFIERS[classifier.upper()] if isinstance(classifier, str) else classifier
    hits = sum(fn(w, graphs) == w.label for w in test_windows_pp)
    return hits / len(test_windows_pp)
