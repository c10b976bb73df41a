"""Episodic evaluation, accuracy summaries, gain tables and frequency importance.

In eval mode every extractor is a pure function, so each test clip is embedded
once and episodes are scored from the cached embedding table.
"""
from __future__ import annotations

import csv
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .episodes import EpisodeSpec, build_test_episodes, query_order
from .fewshot import ExtractorBank, MaskSet, PrototypeSet, apply_mask, class_means, combined_logits, pairwise_distances

SCHEMA_VERSION = 1
UNDEFINED = "undefined"
Z95 = 1.96


@dataclass(frozen=True)
class EvalRecord:
    episode_id: int
    query_id: str
    true_class: int
    predicted_class: int
    classes: tuple[int, ...]
    logits: tuple[float, ...]
    concept_predictions: tuple[int, ...] = ()

    @property
    def correct(self) -> bool:
        return self.true_class == self.predicted_class


@dataclass(frozen=True)
class AccuracySummary:
    mean: float  # percent
    half_width: float  # percent, 95% CI
    episodes: int

    def __str__(self):
        return f"{self.mean:.2f} ± {self.half_width:.2f}"

    def to_dict(self):
        return {"mean": self.mean, "ci95": self.half_width, "episodes": self.episodes}


@dataclass
class AccuracyAccumulator:
    """Mergeable running sums of 0/1 correctness."""

    n: int = 0
    total: float = 0.0
    total_sq: float = 0.0

    def add(self, value: float):
        self.n += 1
        self.total += value
        self.total_sq += value * value

    def merge(self, other: "AccuracyAccumulator") -> "AccuracyAccumulator":
        return AccuracyAccumulator(self.n + other.n, self.total + other.total, self.total_sq + other.total_sq)

    def summary(self) -> AccuracySummary:
        if self.n < 2:
            raise ValueError(f"need at least 2 records for a confidence interval, got {self.n}")
        mean = self.total / self.n
        var = max(self.total_sq - self.total * mean, 0.0) / (self.n - 1)
        return AccuracySummary(100.0 * mean, 100.0 * Z95 * math.sqrt(var / self.n), self.n)


def accuracy_summary(records, per: str = "episode") -> AccuracySummary:
    """Mean accuracy and 95% CI half-width over episodes (or over query clips)."""
    records = list(records)
    if not records:
        raise ValueError("no evaluation records")
    acc = AccuracyAccumulator()
    if per == "episode":
        for r in records:
            acc.add(float(r.correct))
        return acc.summary()
    if per != "query":
        raise ValueError(f"per must be 'episode' or 'query', got {per!r}")
    groups: dict[str, list[float]] = {}
    for r in records:
        groups.setdefault(r.query_id, []).append(float(r.correct))
    for vals in groups.values():
        acc.add(sum(vals) / len(vals))
    s = acc.summary()
    return AccuracySummary(s.mean, s.half_width, len(records))


# ------------------------------------------------------------------- gain table


@dataclass
class GainTable:
    settings: list[str]
    rows: dict[str, dict[str, AccuracySummary]]
    gains: dict[str, dict[str, float]]
    baseline: str

    def format(self, title: str = "") -> str:
        width = max(14, *(len(s) + 2 for s in self.settings))
        head = f"{'Method':<18}" + "".join(f"{s:>{width}}" for s in self.settings)
        lines = [title] if title else []
        lines += [head, "-" * len(head)]
        for name, cells in self.rows.items():
            lines.append(f"{name:<18}" + "".join(f"{str(cells[s]):>{width}}" for s in self.settings))
        for name, cells in self.gains.items():
            lines.append(f"{'Gain(' + name + ')':<18}" + "".join(f"{cells[s]:>{width}.2f}" for s in self.settings))
        return "\n".join(lines)


def gain_table(runs: dict[str, dict[str, AccuracySummary]], baseline: str = "baseline") -> GainTable:
    """Per-setting accuracy gain of every method over ``baseline`` (percentage points)."""
    if baseline not in runs:
        raise ValueError(f"baseline run {baseline!r} missing (have {sorted(runs)})")
    settings = list(runs[baseline])
    for name, cells in runs.items():
        if set(cells) != set(settings):
            raise ValueError(f"run {name!r} covers {sorted(cells)}, baseline covers {sorted(settings)}")
    gains = {
        name: {s: round(cells[s].mean - runs[baseline][s].mean, 2) for s in settings}
        for name, cells in runs.items() if name != baseline
    }
    return GainTable(settings, runs, gains, baseline)


# ------------------------------------------------------------- embedding table


@dataclass
class EmbeddingTable:
    clip_ids: list[str]
    embeddings: list[np.ndarray]  # one (n_clips, D) float64 array per extractor
    row: dict[str, int] = field(init=False)

    def __post_init__(self):
        self.row = {c: i for i, c in enumerate(self.clip_ids)}

    def rows(self, ids) -> np.ndarray:
        return np.fromiter((self.row[i] for i in ids), dtype=np.intp, count=len(ids))


def embed_clips(bank: ExtractorBank, masks: MaskSet, clips: dict[str, np.ndarray], batch: int = 32,
                threads: int = 1) -> EmbeddingTable:
    """Eval-mode embeddings of every clip under every extractor."""
    bank.eval()
    bank._check(masks)
    ids = list(clips)
    chunks = [ids[i : i + batch] for i in range(0, len(ids), batch)]

    def work(chunk):
        x = np.stack([clips[c] for c in chunk])
        out = [bank.whole.forward(x)]
        for b, m in zip(bank.per_mask, masks):
            out.append(b.forward(apply_mask(x, m)))
        return out

    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            parts = list(pool.map(work, chunks))
    else:
        parts = [work(c) for c in chunks]
    n_ext = 1 + len(masks)
    embs = [np.concatenate([p[e] for p in parts]).astype(np.float64) for e in range(n_ext)]
    return EmbeddingTable(ids, embs)


def _score_episode(table: EmbeddingTable, ep, squared: bool, concepts: bool):
    s_rows = table.rows(ep.support_ids)
    q_row = table.row[ep.query_ids[0]]
    labels = np.asarray(ep.support_labels)
    classes = np.unique(labels)
    means = [class_means(e[s_rows], labels, classes) for e in table.embeddings]
    protos = PrototypeSet(classes, means[0], tuple(means[1:]))
    logits = combined_logits([e[q_row][None] for e in table.embeddings], protos, squared)[0]
    pred = int(classes[np.argmax(logits)])
    cpred = ()
    if concepts:
        cpred = tuple(
            int(classes[np.argmax(-pairwise_distances(e[q_row][None], p, squared)[0])])
            for e, p in zip(table.embeddings[1:], protos.concepts)
        )
    return EvalRecord(ep.episode_id, ep.query_ids[0], ep.query_labels[0], pred,
                      tuple(int(c) for c in classes), tuple(float(v) for v in logits), cpred)


def _partitions(n: int, parts: int) -> list[range]:
    bounds = np.linspace(0, n, parts + 1).astype(int)
    return [range(a, b) for a, b in zip(bounds[:-1], bounds[1:]) if b > a]


def evaluate(table: EmbeddingTable, novel_data: dict[int, list[str]], spec: EpisodeSpec, seed: int,
             squared: bool = False, threads: int = 1, concepts: bool = False,
             queries: list[int] | None = None) -> list[EvalRecord]:
    """Score every query-centric test episode; records come back in episode order.

    Query ranges are scored by independent workers; because each query owns
    its RNG stream the result does not depend on ``threads``.
    """
    order = query_order(novel_data)
    q_idx = list(range(len(order))) if queries is None else list(queries)

    def work(chunk):
        return [_score_episode(table, ep, squared, concepts)
                for ep in build_test_episodes(novel_data, spec, seed, queries=chunk)]

    chunks = [q_idx[r.start : r.stop] for r in _partitions(len(q_idx), max(1, threads))]
    if threads > 1 and len(chunks) > 1:
        with ThreadPoolExecutor(threads) as pool:
            parts = list(pool.map(work, chunks))
    else:
        parts = [work(c) for c in chunks]
    return [r for part in parts for r in part]


# ------------------------------------------------------------ frequency importance


@dataclass(frozen=True)
class ImportanceCounts:
    label: str
    class_id: int
    q_high: int
    q_low: int
    episodes: int

    @property
    def ratio(self) -> float | None:
        return None if self.q_low == 0 else self.q_high / self.q_low

    def ratio_text(self) -> str:
        r = self.ratio
        return UNDEFINED if r is None else f"{r:.4f}"


def frequency_importance(table: EmbeddingTable, novel_data: dict[int, list[str]], masks: MaskSet,
                         classes=None, labels=None, spec: EpisodeSpec = EpisodeSpec(5, 5, 1, 50),
                         seed: int = 0, squared: bool = False, threads: int = 1) -> list[ImportanceCounts]:
    """Correct-query counts from the high-only and low-only concept classifiers."""
    if masks.axis != "frequency" or set(masks.names) != {"low", "high"}:
        raise ValueError("frequency importance needs the low/high frequency mask set")
    classes = sorted(novel_data) if not classes else [int(c) for c in classes]
    unknown = set(classes) - set(novel_data)
    if unknown:
        raise ValueError(f"classes {sorted(unknown)} are not novel classes")
    hi, lo = masks.index("high"), masks.index("low")
    order = query_order(novel_data)
    wanted = [i for i, (_, c) in enumerate(order) if c in set(classes)]
    records = evaluate(table, novel_data, spec, seed, squared, threads, concepts=True, queries=wanted)
    counts = {c: [0, 0, 0] for c in classes}
    for r in records:
        cnt = counts[r.true_class]
        cnt[0] += r.concept_predictions[hi] == r.true_class
        cnt[1] += r.concept_predictions[lo] == r.true_class
        cnt[2] += 1
    return [ImportanceCounts(str(c) if labels is None else labels[c], c, *counts[c]) for c in classes]


def write_importance_csv(counts: list[ImportanceCounts], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["class_id", "label", "q_high", "q_low", "episodes", "ratio"])
        for c in counts:
            w.writerow([c.class_id, c.label, c.q_high, c.q_low, c.episodes, c.ratio_text()])


# ------------------------------------------------------------------------ export

RECORD_FIELDS = ["episode_id", "query_id", "true_class", "predicted_class", "classes", "logits", "concept_predictions"]


def write_records_csv(records, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(RECORD_FIELDS)
        for r in records:
            w.writerow([r.episode_id, r.query_id, r.true_class, r.predicted_class,
                        ";".join(map(str, r.classes)), ";".join(map(repr, r.logits)),
                        ";".join(map(str, r.concept_predictions))])


def read_records_csv(path) -> list[EvalRecord]:
    def ints(s):
        return tuple(int(v) for v in s.split(";")) if s else ()

    with open(path, newline="", encoding="utf-8") as fh:
        return [EvalRecord(int(r["episode_id"]), r["query_id"], int(r["true_class"]), int(r["predicted_class"]),
                           ints(r["classes"]), tuple(float(v) for v in r["logits"].split(";")),
                           ints(r["concept_predictions"]))
                for r in csv.DictReader(fh)]


def export_results(records, summary: AccuracySummary, destination, meta: dict | None = None) -> tuple[Path, Path]:
    """Write ``<destination>.csv`` (per episode) and ``<destination>.json`` (summary)."""
    dest = Path(destination)
    dest.parent.mkdir(parents=True, exist_ok=True)
    csv_path, json_path = dest.with_suffix(".csv"), dest.with_suffix(".json")
    try:
        write_records_csv(records, csv_path)
        doc = {"schema": SCHEMA_VERSION, **(meta or {}), "accuracy": summary.to_dict()}
        json_path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    except OSError as exc:
        raise OSError(f"cannot write results to {dest}: {exc}") from exc
    return csv_path, json_path
