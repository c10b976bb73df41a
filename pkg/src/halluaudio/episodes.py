"""Dataset indexing, base/novel splits and episode construction."""
from __future__ import annotations

import csv
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator

import numpy as np


class DatasetError(ValueError):
    """Raised for unreadable or inconsistent dataset metadata."""


@dataclass(frozen=True)
class Entry:
    clip_id: str
    path: str
    label: str
    class_id: int
    fold: int = 0


@dataclass
class DatasetIndex:
    entries: list[Entry]
    classes: list[str]  # class id -> label

    def __post_init__(self):
        ids = [e.clip_id for e in self.entries]
        if len(set(ids)) != len(ids):
            dup = sorted({i for i in ids if ids.count(i) > 1})[:5]
            raise DatasetError(f"duplicate clip ids: {dup}")
        for e in self.entries:
            if not 0 <= e.class_id < len(self.classes) or self.classes[e.class_id] != e.label:
                raise DatasetError(f"clip {e.clip_id}: class id {e.class_id} does not match label {e.label!r}")

    def __len__(self):
        return len(self.entries)

    @property
    def n_classes(self) -> int:
        return len(self.classes)

    def by_class(self, class_ids=None) -> dict[int, list[str]]:
        """Clip ids grouped by class, in index order."""
        keep = None if class_ids is None else set(int(c) for c in class_ids)
        out: dict[int, list[str]] = {}
        for e in self.entries:
            if keep is None or e.class_id in keep:
                out.setdefault(e.class_id, []).append(e.clip_id)
        return dict(sorted(out.items()))

    def class_counts(self) -> dict[int, int]:
        return {c: len(v) for c, v in self.by_class().items()}

    def lookup(self) -> dict[str, Entry]:
        return {e.clip_id: e for e in self.entries}


def load_esc50_index(meta_csv, audio_root, expect_classes: int | None = 50,
                     expect_per_class: int | None = 40, check_files: bool = True) -> DatasetIndex:
    """Read ESC-50's ``filename,fold,target,category`` metadata."""
    audio_root = Path(audio_root)
    problems = []
    rows = []
    with open(meta_csv, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        missing = {"filename", "fold", "target", "category"} - set(reader.fieldnames or [])
        if missing:
            raise DatasetError(f"{meta_csv}: missing columns {sorted(missing)}")
        for lineno, row in enumerate(reader, start=2):
            try:
                rows.append((row["filename"], int(row["fold"]), int(row["target"]), row["category"]))
            except (TypeError, ValueError):
                problems.append(f"row {lineno}: malformed values {row}")
                continue
            path = audio_root / row["filename"]
            if check_files and not path.is_file():
                problems.append(f"row {lineno}: missing audio file {path}")
    if not rows and not problems:
        raise DatasetError(f"{meta_csv}: no entries")

    labels = {}
    for fname, _, target, category in rows:
        if labels.setdefault(target, category) != category:
            problems.append(f"target {target} maps to both {labels[target]!r} and {category!r}")
    targets = sorted(labels)
    if targets != list(range(len(targets))):
        problems.append(f"class targets are not dense 0..{len(targets) - 1}")
    if expect_classes is not None and len(targets) != expect_classes:
        problems.append(f"expected {expect_classes} classes, found {len(targets)}")
    if expect_per_class is not None:
        counts = {t: 0 for t in targets}
        for r in rows:
            counts[r[2]] += 1
        for t, n in counts.items():
            if n != expect_per_class:
                problems.append(f"class {t} ({labels[t]}) has {n} clips, expected {expect_per_class}")
    if problems:
        raise DatasetError(f"{meta_csv}: {len(problems)} problem(s):\n  " + "\n  ".join(problems[:50]))

    classes = [labels[t] for t in targets]
    entries = [Entry(Path(f).stem, str(audio_root / f), c, t, fold) for f, fold, t, c in rows]
    return DatasetIndex(entries, classes)


def load_manifest_index(manifest_csv, root=None, check_files: bool = True) -> DatasetIndex:
    """Generic ``path,label`` corpus manifest; class ids follow sorted label order."""
    base = Path(root) if root is not None else Path(manifest_csv).parent
    rows, problems = [], []
    with open(manifest_csv, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        missing = {"path", "label"} - set(reader.fieldnames or [])
        if missing:
            raise DatasetError(f"{manifest_csv}: missing columns {sorted(missing)}")
        for lineno, row in enumerate(reader, start=2):
            if not row.get("path") or not row.get("label"):
                problems.append(f"row {lineno}: empty path or label")
                continue
            path = base / row["path"]
            if check_files and not path.is_file():
                problems.append(f"row {lineno}: missing audio file {path}")
            rows.append((row["path"], str(path), row["label"]))
    if not rows and not problems:
        raise DatasetError(f"{manifest_csv}: no entries")
    if problems:
        raise DatasetError(f"{manifest_csv}: {len(problems)} problem(s):\n  " + "\n  ".join(problems[:50]))
    classes = sorted({r[2] for r in rows})
    cid = {c: i for i, c in enumerate(classes)}
    entries = [Entry(os.path.splitext(rel)[0].replace(os.sep, "__"), p, lab, cid[lab]) for rel, p, lab in rows]
    return DatasetIndex(entries, classes)


INDEX_FIELDS = ["clip_id", "path", "label", "class_id", "fold"]


def write_index(index: DatasetIndex, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(INDEX_FIELDS)
        for e in index.entries:
            w.writerow([e.clip_id, e.path, e.label, e.class_id, e.fold])


def read_index(path) -> DatasetIndex:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        raise DatasetError(f"{path}: no entries")
    entries = [Entry(r["clip_id"], r["path"], r["label"], int(r["class_id"]), int(r["fold"])) for r in rows]
    n = max(e.class_id for e in entries) + 1
    classes = [""] * n
    for e in entries:
        classes[e.class_id] = e.label
    return DatasetIndex(entries, classes)


# ----------------------------------------------------------------------- splits


@dataclass(frozen=True)
class SplitSpec:
    base_classes: tuple[int, ...]
    novel_classes: tuple[int, ...]
    seed: int

    def __post_init__(self):
        if set(self.base_classes) & set(self.novel_classes):
            raise ValueError("base and novel classes overlap")


def make_split(index: DatasetIndex, n_novel: int, seed: int) -> SplitSpec:
    """Seeded class shuffle; the last ``n_novel`` classes become novel."""
    n = index.n_classes
    if not 0 < n_novel < n:
        raise ValueError(f"n_novel must be in (0, {n}), got {n_novel}")
    order = np.random.default_rng(seed).permutation(n)
    return SplitSpec(tuple(sorted(int(c) for c in order[:-n_novel])),
                     tuple(sorted(int(c) for c in order[-n_novel:])), seed)


SPLIT_HEADER = "# halluaudio split"
SPLIT_VERSION = 1


def write_split(split: SplitSpec, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"{SPLIT_HEADER}\nversion = {SPLIT_VERSION}\nseed = {split.seed}\n")
        fh.write("base = " + " ".join(map(str, split.base_classes)) + "\n")
        fh.write("novel = " + " ".join(map(str, split.novel_classes)) + "\n")


def read_split(path) -> SplitSpec:
    fields = {}
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            key, _, value = line.partition("=")
            fields[key.strip()] = value.strip()
    try:
        if int(fields["version"]) != SPLIT_VERSION:
            raise DatasetError(f"{path}: unsupported split version {fields['version']}")
        return SplitSpec(tuple(int(c) for c in fields["base"].split()),
                         tuple(int(c) for c in fields["novel"].split()), int(fields["seed"]))
    except KeyError as exc:
        raise DatasetError(f"{path}: missing field {exc}") from None


def hold_out_validation(split: SplitSpec, n_val: int) -> tuple[tuple[int, ...], tuple[int, ...]]:
    """Carve ``n_val`` validation classes out of the base classes (seeded by the split)."""
    base = np.array(split.base_classes)
    if n_val <= 0:
        return tuple(base.tolist()), ()
    if n_val >= len(base):
        raise ValueError(f"cannot hold out {n_val} of {len(base)} base classes")
    order = np.random.default_rng([split.seed, 1]).permutation(base)
    return tuple(sorted(order[n_val:].tolist())), tuple(sorted(order[:n_val].tolist()))


# --------------------------------------------------------------------- episodes


@dataclass(frozen=True)
class EpisodeSpec:
    n_way: int = 5
    k_shot: int = 5
    n_query: int = 5
    repetitions: int = 50

    def __post_init__(self):
        if self.n_way < 2 or self.k_shot < 1 or self.n_query < 1 or self.repetitions < 1:
            raise ValueError(f"invalid episode spec {self}")


@dataclass(frozen=True)
class Episode:
    episode_id: int
    support_ids: tuple[str, ...]
    support_labels: tuple[int, ...]
    query_ids: tuple[str, ...]
    query_labels: tuple[int, ...]

    @property
    def classes(self) -> np.ndarray:
        return np.unique(self.support_labels)


def sample_train_episode(base_data: dict[int, list[str]], spec: EpisodeSpec, rng: np.random.Generator,
                         episode_id: int = 0) -> Episode:
    """Uniform classes, then ``k_shot + n_query`` clips per class without replacement."""
    classes = sorted(base_data)
    if spec.n_way > len(classes):
        raise ValueError(f"{spec.n_way}-way episode needs {spec.n_way} classes, only {len(classes)} available")
    need = spec.k_shot + spec.n_query
    short = [c for c in classes if len(base_data[c]) < need]
    if short:
        raise ValueError(f"classes {short[:5]} have fewer than k_shot + n_query = {need} clips")
    chosen = rng.choice(classes, spec.n_way, replace=False)
    s_ids, s_lab, q_ids, q_lab = [], [], [], []
    for c in chosen:
        clips = base_data[int(c)]
        pick = rng.choice(len(clips), need, replace=False)
        s_ids += [clips[i] for i in pick[: spec.k_shot]]
        q_ids += [clips[i] for i in pick[spec.k_shot :]]
        s_lab += [int(c)] * spec.k_shot
        q_lab += [int(c)] * spec.n_query
    return Episode(episode_id, tuple(s_ids), tuple(s_lab), tuple(q_ids), tuple(q_lab))


def _check_test_data(novel_data, spec):
    if spec.n_way > len(novel_data):
        raise ValueError(f"{spec.n_way}-way evaluation needs {spec.n_way} novel classes, only {len(novel_data)} available")
    short = [c for c, v in novel_data.items() if len(v) < spec.k_shot + 1]
    if short:
        raise ValueError(f"novel classes {short[:5]} have fewer than k_shot + 1 = {spec.k_shot + 1} clips")


def query_order(novel_data: dict[int, list[str]]) -> list[tuple[str, int]]:
    return [(clip, c) for c in sorted(novel_data) for clip in novel_data[c]]


def count_test_episodes(novel_data: dict[int, list[str]], spec: EpisodeSpec) -> int:
    return sum(len(v) for v in novel_data.values()) * spec.repetitions


def build_test_episodes(novel_data: dict[int, list[str]], spec: EpisodeSpec, seed: int,
                        queries: range | None = None) -> Iterator[Episode]:
    """Query-centric test episodes, streamed lazily.

    Every novel clip is the single query of ``spec.repetitions`` episodes; each
    draws ``k_shot`` supports from the query's class (never the query itself)
    and from ``n_way - 1`` other uniformly chosen classes. Each query has its
    own RNG stream, so any sub-range of ``queries`` reproduces exactly.
    """
    _check_test_data(novel_data, spec)
    order = query_order(novel_data)
    classes = sorted(novel_data)
    for qi in queries if queries is not None else range(len(order)):
        q_clip, q_class = order[qi]
        rng = np.random.default_rng([seed, qi])
        own = [c for c in novel_data[q_class] if c != q_clip]
        others = [c for c in classes if c != q_class]
        for r in range(spec.repetitions):
            picked = rng.choice(others, spec.n_way - 1, replace=False)
            ep_classes = sorted([q_class, *(int(c) for c in picked)])
            s_ids, s_lab = [], []
            for c in ep_classes:
                pool = own if c == q_class else novel_data[c]
                idx = rng.choice(len(pool), spec.k_shot, replace=False)
                s_ids += [pool[i] for i in idx]
                s_lab += [c] * spec.k_shot
            yield Episode(qi * spec.repetitions + r, tuple(s_ids), tuple(s_lab), (q_clip,), (q_class,))
