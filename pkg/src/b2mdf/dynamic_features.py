"""Recorded runtime artifacts turned into feature payloads.

Two inputs: syscall traces (comma/newline separated names) and resource
samples (CSV with a header of metric names).
"""
from __future__ import annotations

import csv
import io
import math
import re
from collections import Counter
from dataclasses import dataclass
from fractions import Fraction

from .errors import (
    BadHeader,
    BadToken,
    EmptyFile,
    EmptyTrace,
    NonNumeric,
    NoSamples,
    RaggedRow,
)

DEFAULT_RESOURCE_SCHEMA = (
    "total_cpu",
    "user_cpu",
    "kernel_cpu",
    "total_heap_size",
    "total_heap_free",
    "total_heap_allocated",
)
AGGREGATES = ("mean", "max", "last")
NGRAM_SEP = "|"

_SPLIT = re.compile(r"[,\n]")


@dataclass(frozen=True)
class SyscallTrace:
    app_id: str
    version_code: int
    calls: tuple[str, ...]


@dataclass(frozen=True)
class NgramFeature:
    app_id: str
    version_code: int
    n: int
    counts: dict[str, int]

    def to_payload(self) -> dict:
        return {"kind": "syscall_ngrams", "app_id": self.app_id, "version_code": self.version_code,
                "n": self.n, "counts": dict(sorted(self.counts.items()))}


@dataclass(frozen=True)
class ResourceSamples:
    app_id: str
    version_code: int
    schema: tuple[str, ...]
    samples: tuple[dict[str, float], ...]


@dataclass(frozen=True)
class ResourceFeature:
    app_id: str
    version_code: int
    values: dict[str, float]

    def to_payload(self) -> dict:
        return {"kind": "resources", "app_id": self.app_id, "version_code": self.version_code,
                "values": dict(sorted(self.values.items()))}


def parse_syscall_trace(text: str, app_id: str = "", version_code: int = 0) -> SyscallTrace:
    calls = []
    for raw in _SPLIT.split(text):
        token = raw.strip()
        if not token:
            continue
        if any(ch.isspace() for ch in token):
            raise BadToken(len(calls), token)
        calls.append(token)
    if not calls:
        raise EmptyTrace("trace contains no system calls")
    return SyscallTrace(app_id, version_code, tuple(calls))


def syscall_ngrams(trace: SyscallTrace, n: int = 2) -> NgramFeature:
    if n < 1:
        raise ValueError(f"n-gram length must be >= 1, got {n}")
    calls = trace.calls
    grams = Counter(NGRAM_SEP.join(calls[i:i + n]) for i in range(len(calls) - n + 1))
    return NgramFeature(trace.app_id, trace.version_code, n, dict(sorted(grams.items())))


def parse_resource_samples(text: str, app_id: str = "", version_code: int = 0) -> ResourceSamples:
    rows = [(i, row) for i, row in enumerate(csv.reader(io.StringIO(text)), start=1)
            if any(cell.strip() for cell in row)]
    if not rows:
        raise EmptyFile("no header row")
    schema = tuple(name.strip() for name in rows[0][1])
    if any(not name for name in schema) or len(set(schema)) != len(schema):
        raise BadHeader(f"metric names must be non-empty and unique: {schema}")
    if len(rows) == 1:
        raise EmptyFile("header present but no samples")
    samples = []
    for line, row in rows[1:]:
        if len(row) != len(schema):
            raise RaggedRow(line)
        sample = {}
        for name, cell in zip(schema, row):
            try:
                value = float(cell)
            except ValueError:
                raise NonNumeric(line, name) from None
            if not math.isfinite(value):
                raise NonNumeric(line, name)
            sample[name] = value
        samples.append(sample)
    return ResourceSamples(app_id, version_code, schema, tuple(samples))


def resource_features(samples: ResourceSamples, schema: tuple[str, ...] | None = None) -> ResourceFeature:
    """Mean, max, and last value per metric.

    ``schema`` restricts the output to a configured metric list; every listed
    metric must be present in the samples. The mean is computed exactly and
    rounded once, so it always lies within [min, max].
    """
    if not samples.samples:
        raise NoSamples("resource features need at least one sample")
    metrics = samples.schema if schema is None else tuple(schema)
    missing = [m for m in metrics if m not in samples.schema]
    if missing:
        raise BadHeader(f"samples lack configured metrics {missing}")
    values: dict[str, float] = {}
    for metric in metrics:
        column = [s[metric] for s in samples.samples]
        values[f"{metric}.mean"] = float(sum(map(Fraction, column)) / len(column))
        values[f"{metric}.max"] = max(column)
        values[f"{metric}.last"] = column[-1]
    return ResourceFeature(samples.app_id, samples.version_code, values)
