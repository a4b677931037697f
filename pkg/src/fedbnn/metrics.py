"""Accuracy, ECE/MCE and reliability-diagram bins."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass

import numpy as np


def accuracy(probs: np.ndarray, labels: np.ndarray) -> float:
    """Fraction of rows whose argmax equals the label (ties go to the lowest index)."""
    probs = np.asarray(probs)
    labels = np.asarray(labels)
    if probs.shape[0] != labels.shape[0]:
        raise ValueError("probs and labels differ in length")
    if labels.shape[0] == 0:
        return 0.0
    return float(np.mean(np.argmax(probs, axis=1) == labels))


@dataclass
class ReliabilityBins:
    m: int
    counts: np.ndarray
    accuracy: np.ndarray  # per bin; 0 where empty
    confidence: np.ndarray  # mean confidence per bin; 0 where empty

    @property
    def n(self) -> int:
        return int(self.counts.sum())

    def edges(self) -> np.ndarray:
        return np.arange(self.m + 1) / self.m


@dataclass
class CalibrationReport:
    ece: float
    mce: float
    bins: ReliabilityBins


def bin_index(confidence: np.ndarray, m: int) -> np.ndarray:
    """0-based bin ids for right-closed intervals ((i-1)/m, i/m]; 0 goes to the first bin."""
    edges = np.arange(m + 1) / m
    idx = np.searchsorted(edges, np.asarray(confidence, dtype=np.float64), side="left")
    return np.clip(idx, 1, m) - 1


def bin_predictions(probs: np.ndarray, labels: np.ndarray, m: int = 10) -> ReliabilityBins:
    if m < 1:
        raise ValueError("need at least one bin")
    probs = np.asarray(probs, dtype=np.float64)
    conf = probs.max(axis=1)
    correct = (np.argmax(probs, axis=1) == np.asarray(labels)).astype(np.float64)
    b = bin_index(conf, m)
    counts = np.bincount(b, minlength=m)
    safe = np.maximum(counts, 1)
    acc = np.bincount(b, weights=correct, minlength=m) / safe
    mean_conf = np.bincount(b, weights=conf, minlength=m) / safe
    return ReliabilityBins(m, counts, acc, mean_conf)


def ece(bins: ReliabilityBins) -> float:
    n = bins.n
    if n == 0:
        return 0.0
    gaps = np.abs(bins.accuracy - bins.confidence)
    return float(np.sum(bins.counts / n * gaps))


def mce(bins: ReliabilityBins) -> float:
    nonempty = bins.counts > 0
    if not nonempty.any():
        return 0.0
    return float(np.max(np.abs(bins.accuracy - bins.confidence)[nonempty]))


def calibration_report(probs: np.ndarray, labels: np.ndarray, m: int = 10) -> CalibrationReport:
    bins = bin_predictions(probs, labels, m)
    return CalibrationReport(ece(bins), mce(bins), bins)


CSV_HEADER = ["bin_lo", "bin_hi", "count", "accuracy", "mean_confidence"]


def calibration_csv(report: CalibrationReport) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_HEADER)
    edges = report.bins.edges()
    for i in range(report.bins.m):
        w.writerow([repr(float(edges[i])), repr(float(edges[i + 1])), int(report.bins.counts[i]),
                    repr(float(report.bins.accuracy[i])), repr(float(report.bins.confidence[i]))])
    w.writerow(["ECE", repr(report.ece)])
    w.writerow(["MCE", repr(report.mce)])
    return buf.getvalue()


def parse_calibration_csv(text: str) -> CalibrationReport:
    rows = list(csv.reader(io.StringIO(text)))
    if not rows or rows[0] != CSV_HEADER:
        raise ValueError("calibration CSV: missing or wrong header")
    body, footer = [], {}
    for r in rows[1:]:
        if not r:
            continue
        if r[0] in ("ECE", "MCE"):
            footer[r[0]] = float(r[1])
        else:
            body.append(r)
    if set(footer) != {"ECE", "MCE"}:
        raise ValueError("calibration CSV: missing ECE/MCE footer")
    counts = np.array([int(r[2]) for r in body])
    acc = np.array([float(r[3]) for r in body])
    conf = np.array([float(r[4]) for r in body])
    return CalibrationReport(footer["ECE"], footer["MCE"], ReliabilityBins(len(body), counts, acc, conf))
