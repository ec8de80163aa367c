"""Raw event logs to one-hot spatio-temporal datasets.

The pipeline: ingest CSV records, drop exact duplicates, remove rarely seen
hosts, merge every k consecutive raw time steps into one frame (per-host
modal event id, most-recent tie-break, class 0 when a host is silent), build
the host graph from observed interactions, one-hot encode, then cut sliding
windows and split them chronologically.
"""

from __future__ import annotations

import csv
import json
import os
from dataclasses import dataclass

import numpy as np

from .errors import InputError
from .graph import HostGraph, build_host_graph, graph_from_adjacency
from .numerics import Matrix

__all__ = [
    "EventRecord",
    "RawEventLog",
    "EventDataset",
    "WindowBatch",
    "ingest",
    "bin_times",
    "filter_hosts",
    "integrate_k_steps",
    "build_dataset",
    "sliding_windows",
    "split",
    "save_dataset",
    "load_dataset",
]

EVENTS_HEADER = ["time", "src", "dst", "event_id"]
ZERO_EVENT = 0


@dataclass(frozen=True)
class EventRecord:
    time: int
    src: str
    dst: str | None
    event_id: int


@dataclass
class RawEventLog:
    records: list[EventRecord]

    def src_hosts(self) -> list[str]:
        return sorted({r.src for r in self.records})


@dataclass
class EventDataset:
    """Per-host one-hot event series plus vocabulary and host graph.

    ``vocabulary[c]`` is the raw event id of class c; class 0 is always the
    reserved no-event class. Every frame row is exactly one-hot.
    """

    graph: HostGraph
    vocabulary: tuple[int, ...]
    frames: list[Matrix]
    k_merge: int
    extra_meta: dict | None = None

    @property
    def n(self) -> int:
        return self.graph.n

    @property
    def d(self) -> int:
        return len(self.vocabulary)

    @property
    def T(self) -> int:
        return len(self.frames)

    @property
    def node_ids(self) -> tuple[str, ...]:
        return self.graph.node_ids


@dataclass
class WindowBatch:
    """Aligned (input sequence, target classes) pairs of window length s."""

    inputs: list[list[Matrix]]
    targets: list[np.ndarray]
    s: int

    def __len__(self) -> int:
        return len(self.inputs)


def ingest(path) -> RawEventLog:
    """Parse an events CSV (header ``time,src,dst,event_id``).

    Exact duplicate rows are removed keeping the first occurrence; all other
    ordering is preserved. ``dst`` may be empty (a self-event that contributes
    no edge). Malformed rows are fatal with their line number.
    """
    records: list[EventRecord] = []
    seen: set[tuple] = set()
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != EVENTS_HEADER:
            raise InputError(
                f"{path}: expected header 'time,src,dst,event_id', got {header}"
            )
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 4:
                raise InputError(f"{path}: malformed row at line {lineno}: {row}")
            raw_time, src, dst, raw_id = (c.strip() for c in row)
            try:
                time = int(raw_time)
                event_id = int(raw_id)
            except ValueError:
                raise InputError(
                    f"{path}: non-integer time or event_id at line {lineno}"
                ) from None
            if time < 0:
                raise InputError(f"{path}: negative time at line {lineno}")
            if event_id <= ZERO_EVENT:
                raise InputError(
                    f"{path}: event_id must be positive at line {lineno} "
                    f"(0 is reserved for the no-event class)"
                )
            if not src:
                raise InputError(f"{path}: empty src at line {lineno}")
            key = (time, src, dst, event_id)
            if key in seen:
                continue
            seen.add(key)
            records.append(EventRecord(time, src, dst or None, event_id))
    return RawEventLog(records)


def bin_times(log: RawEventLog, width: int) -> RawEventLog:
    """Coarsen raw timestamps into integer steps of the given width."""
    if width < 1:
        raise InputError(f"time bin width must be >= 1, got {width}")
    if width == 1:
        return log
    return RawEventLog(
        [EventRecord(r.time // width, r.src, r.dst, r.event_id) for r in log.records]
    )


def filter_hosts(log: RawEventLog, min_occurrences: int = 10) -> RawEventLog:
    """Drop hosts appearing as src fewer than ``min_occurrences`` times.

    The surviving src hosts form the node set of the graph.
    """
    if min_occurrences < 0:
        raise InputError("min_occurrences must be >= 0")
    counts: dict[str, int] = {}
    for r in log.records:
        counts[r.src] = counts.get(r.src, 0) + 1
    keep = {h for h, c in counts.items() if c >= min_occurrences}
    if not keep:
        raise InputError("no hosts survive filtering")
    return RawEventLog([r for r in log.records if r.src in keep])


def integrate_k_steps(log: RawEventLog, k: int) -> tuple[dict[str, list[int]], int]:
    """Merge every k consecutive raw steps into one per-host event.

    The time axis starts at the earliest record; only complete k-step blocks
    are kept (a trailing partial block is dropped). Within a block each host
    emits its modal event id; ties go to the most recent occurrence (by time,
    then input order); silent hosts emit class 0.
    Returns the per-host series and the merged step count.
    """
    if k < 1:
        raise InputError(f"merge step k must be >= 1, got {k}")
    if not log.records:
        raise InputError("cannot integrate an empty log")
    t0 = min(r.time for r in log.records)
    t1 = max(r.time for r in log.records)
    n_blocks = (t1 - t0 + 1) // k
    hosts = log.src_hosts()
    series = {h: [ZERO_EVENT] * n_blocks for h in hosts}
    # per (host, block): event -> (count, latest (time, input order))
    tallies: dict[tuple[str, int], dict[int, tuple[int, tuple[int, int]]]] = {}
    for idx, r in enumerate(log.records):
        block = (r.time - t0) // k
        if block >= n_blocks:
            continue
        tally = tallies.setdefault((r.src, block), {})
        count, _ = tally.get(r.event_id, (0, (-1, -1)))
        tally[r.event_id] = (count + 1, (r.time, idx))
    for (host, block), tally in tallies.items():
        best = max(tally.items(), key=lambda item: (item[1][0], item[1][1]))
        series[host][block] = best[0]
    return series, n_blocks


def build_dataset(
    log: RawEventLog,
    k_merge: int,
    edge_source: list[tuple[str, str]] | None = None,
    cheb_order: int = 2,
) -> EventDataset:
    """One-hot frames over merged steps, plus vocabulary and host graph.

    Edges default to every (src, dst) pair observed between surviving hosts;
    an explicit edge list overrides. Node order is the sorted host list.
    """
    node_ids = log.src_hosts()
    if not node_ids:
        raise InputError("cannot build a dataset from an empty log")
    series, n_steps = integrate_k_steps(log, k_merge)
    if n_steps == 0:
        raise InputError(
            f"log spans fewer than k={k_merge} raw steps; no merged frames"
        )
    observed = sorted({e for s in series.values() for e in s if e != ZERO_EVENT})
    vocabulary = (ZERO_EVENT, *observed)
    if len(vocabulary) < 2:
        raise InputError("empty vocabulary: no events survive merging")
    class_of = {event: c for c, event in enumerate(vocabulary)}

    n, d = len(node_ids), len(vocabulary)
    frames = []
    for t in range(n_steps):
        frame = np.zeros((n, d))
        for i, host in enumerate(node_ids):
            frame[i, class_of[series[host][t]]] = 1.0
        frames.append(Matrix(frame))

    if edge_source is None:
        node_set = set(node_ids)
        seen: set[frozenset] = set()
        edge_source = []
        for r in log.records:
            if r.dst is None or r.dst == r.src:
                continue
            if r.src in node_set and r.dst in node_set:
                key = frozenset((r.src, r.dst))
                if key not in seen:
                    seen.add(key)
                    edge_source.append((r.src, r.dst))
    graph = build_host_graph(edge_source, node_ids, cheb_order)
    return EventDataset(
        graph=graph, vocabulary=vocabulary, frames=frames, k_merge=k_merge
    )


def sliding_windows(dataset: EventDataset, s: int) -> WindowBatch:
    """All T-s+1 windows: the first s-1 frames in, the s-th frame's classes out."""
    if s < 2:
        raise InputError(f"window length must be >= 2, got {s}")
    if s > dataset.T:
        raise InputError(f"window length {s} exceeds series length {dataset.T}")
    inputs, targets = [], []
    for start in range(dataset.T - s + 1):
        inputs.append(dataset.frames[start : start + s - 1])
        targets.append(dataset.frames[start + s - 1].data.argmax(axis=1))
    return WindowBatch(inputs=inputs, targets=targets, s=s)


def split(batch: WindowBatch, train_fraction: float = 0.8) -> tuple[WindowBatch, WindowBatch]:
    """Chronological split: first floor(fraction * W) windows train, rest test."""
    if not 0.0 < train_fraction < 1.0:
        raise InputError(f"train fraction must be in (0, 1), got {train_fraction}")
    w = len(batch)
    n_train = int(train_fraction * w)
    if n_train == 0 or n_train == w:
        raise InputError(
            f"split of {w} windows at {train_fraction} leaves an empty side"
        )
    train = WindowBatch(batch.inputs[:n_train], batch.targets[:n_train], batch.s)
    test = WindowBatch(batch.inputs[n_train:], batch.targets[n_train:], batch.s)
    return train, test


# --------------------------------------------------------------------------
# Processed-dataset directory format
# --------------------------------------------------------------------------
#
# meta.json       n, d, T, k_merge, vocabulary, node_ids (+ generator extras)
# frames.csv      t,host_index,class_index  (one row per host per step)
# adjacency.csv   src,dst  (undirected index pairs, src < dst, sorted)


def save_dataset(dataset: EventDataset, out_dir) -> None:
    os.makedirs(out_dir, exist_ok=True)
    meta = {
        "n": dataset.n,
        "d": dataset.d,
        "T": dataset.T,
        "k_merge": dataset.k_merge,
        "vocabulary": list(dataset.vocabulary),
        "node_ids": list(dataset.node_ids),
    }
    if dataset.extra_meta:
        meta.update(dataset.extra_meta)
    with open(os.path.join(out_dir, "meta.json"), "w", encoding="utf-8") as fh:
        json.dump(meta, fh, sort_keys=True, indent=2)
        fh.write("\n")
    with open(os.path.join(out_dir, "frames.csv"), "w", encoding="utf-8", newline="\n") as fh:
        fh.write("t,host_index,class_index\n")
        for t, frame in enumerate(dataset.frames):
            classes = frame.data.argmax(axis=1)
            for i in range(dataset.n):
                fh.write(f"{t},{i},{classes[i]}\n")
    adj = dataset.graph.adjacency.data
    with open(os.path.join(out_dir, "adjacency.csv"), "w", encoding="utf-8", newline="\n") as fh:
        fh.write("src,dst\n")
        for i in range(dataset.n):
            for j in range(i + 1, dataset.n):
                if adj[i, j]:
                    fh.write(f"{i},{j}\n")


def load_dataset(in_dir, cheb_order: int = 2) -> EventDataset:
    meta_path = os.path.join(in_dir, "meta.json")
    try:
        with open(meta_path, encoding="utf-8") as fh:
            meta = json.load(fh)
    except FileNotFoundError:
        raise InputError(f"{in_dir}: not a dataset directory (missing meta.json)") from None
    required = {"n", "d", "T", "k_merge", "vocabulary", "node_ids"}
    missing = required - meta.keys()
    if missing:
        raise InputError(f"{meta_path}: missing keys {sorted(missing)}")
    n, d, T = meta["n"], meta["d"], meta["T"]
    if len(meta["vocabulary"]) != d or len(meta["node_ids"]) != n:
        raise InputError(f"{meta_path}: vocabulary/node_ids lengths disagree with d/n")

    frames = [np.zeros((n, d)) for _ in range(T)]
    with open(os.path.join(in_dir, "frames.csv"), encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != ["t", "host_index", "class_index"]:
            raise InputError(f"{in_dir}/frames.csv: unexpected header {header}")
        for row in reader:
            t, i, c = int(row[0]), int(row[1]), int(row[2])
            if not (0 <= t < T and 0 <= i < n and 0 <= c < d):
                raise InputError(f"{in_dir}/frames.csv: out-of-range row {row}")
            frames[t][i, c] = 1.0
    for t, frame in enumerate(frames):
        if not np.array_equal(frame.sum(axis=1), np.ones(n)):
            raise InputError(f"{in_dir}/frames.csv: step {t} is not one-hot per host")

    adj = np.zeros((n, n))
    with open(os.path.join(in_dir, "adjacency.csv"), encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != ["src", "dst"]:
            raise InputError(f"{in_dir}/adjacency.csv: unexpected header {header}")
        for row in reader:
            i, j = int(row[0]), int(row[1])
            if not (0 <= i < n and 0 <= j < n) or i == j:
                raise InputError(f"{in_dir}/adjacency.csv: bad edge {row}")
            adj[i, j] = 1.0
            adj[j, i] = 1.0

    graph = graph_from_adjacency(tuple(meta["node_ids"]), adj, cheb_order)
    extra = {k: v for k, v in meta.items() if k not in required}
    return EventDataset(
        graph=graph,
        vocabulary=tuple(meta["vocabulary"]),
        frames=[Matrix(f) for f in frames],
        k_merge=meta["k_merge"],
        extra_meta=extra or None,
    )
