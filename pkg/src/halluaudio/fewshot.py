"""Concept masks, prototypes and the combined-distance classifier.

A model is an :class:`ExtractorBank` (one backbone for the whole spectrogram
and one per concept mask) plus the :class:`MaskSet` that feeds it. The class
logit is the negated sum of the whole-spectrogram distance and every concept
distance; an empty mask set is the plain prototypical network.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .backbone import Backbone, BackboneSpec, init_backbone, param_count

FREQUENCY = "frequency"
TIME = "time"


@dataclass(frozen=True)
class ConceptMask:
    axis: str
    bits: np.ndarray
    name: str

    def __post_init__(self):
        if self.axis not in (FREQUENCY, TIME):
            raise ValueError(f"mask axis must be 'frequency' or 'time', got {self.axis!r}")
        bits = np.asarray(self.bits)
        if bits.ndim != 1 or not np.isin(bits, (0, 1)).all():
            raise ValueError("mask bits must be a 1-D 0/1 vector")
        if not bits.any():
            raise ValueError(f"mask {self.name!r} selects nothing")
        object.__setattr__(self, "bits", bits.astype(np.uint8))


@dataclass(frozen=True)
class MaskSet:
    masks: tuple[ConceptMask, ...] = ()

    def __post_init__(self):
        masks = tuple(self.masks)
        object.__setattr__(self, "masks", masks)
        if not masks:
            return
        if len({m.axis for m in masks}) != 1:
            raise ValueError("all masks in a set must share one axis")
        if len({len(m.bits) for m in masks}) != 1:
            raise ValueError("all masks in a set must have the same length")
        if len({m.name for m in masks}) != len(masks):
            raise ValueError("mask names must be unique")
        total = np.sum([m.bits.astype(int) for m in masks], axis=0)
        if not (total == 1).all():
            raise ValueError("masks must partition the axis (bitwise sum must be all ones)")

    def __len__(self):
        return len(self.masks)

    def __iter__(self):
        return iter(self.masks)

    def __getitem__(self, i):
        return self.masks[i]

    @property
    def axis(self) -> str | None:
        return self.masks[0].axis if self.masks else None

    @property
    def names(self) -> list[str]:
        return [m.name for m in self.masks]

    def index(self, name: str) -> int:
        return self.names.index(name)

    def describe(self) -> dict:
        return {"axis": self.axis, "masks": [{"name": m.name, "bits": "".join(map(str, m.bits))} for m in self.masks]}


def make_frequency_masks(F: int, split: int) -> MaskSet:
    """Low bands ``[0, split)`` and high bands ``[split, F)``."""
    if not 0 < split < F:
        raise ValueError(f"split must satisfy 0 < split < F={F}, got {split}")
    low = np.zeros(F, dtype=np.uint8)
    low[:split] = 1
    return MaskSet((ConceptMask(FREQUENCY, low, "low"), ConceptMask(FREQUENCY, 1 - low, "high")))


def make_time_masks(T: int) -> MaskSet:
    """First and second half of the frames, split at ``T // 2``."""
    if T < 2:
        raise ValueError(f"need at least 2 frames to split, got T={T}")
    first = np.zeros(T, dtype=np.uint8)
    first[: T // 2] = 1
    return MaskSet((ConceptMask(TIME, first, "first-half"), ConceptMask(TIME, 1 - first, "second-half")))


def make_masks(mode: str, shape: tuple[int, int], split_band: int | None = None) -> MaskSet:
    T, F = shape
    if mode == "none":
        return MaskSet()
    if mode == FREQUENCY:
        return make_frequency_masks(F, F // 2 if split_band is None else split_band)
    if mode == TIME:
        return make_time_masks(T)
    raise ValueError(f"unknown mask mode {mode!r} (expected none, frequency or time)")


def apply_mask(x: np.ndarray, m: ConceptMask) -> np.ndarray:
    """Zero everything outside the concept; ``x`` is ``(..., T, F)``."""
    axis = -1 if m.axis == FREQUENCY else -2
    if x.shape[axis] != len(m.bits):
        raise ValueError(f"{m.axis} mask of length {len(m.bits)} does not match axis of length {x.shape[axis]}")
    bits = m.bits.astype(x.dtype)
    return x * (bits if axis == -1 else bits[:, None])


# ----------------------------------------------------------------- extractors


class ExtractorBank:
    def __init__(self, whole: Backbone, per_mask: list[Backbone]):
        specs = {whole.spec} | {b.spec for b in per_mask}
        if len(specs) != 1:
            raise ValueError("all extractors must share one backbone spec")
        self.whole = whole
        self.per_mask = list(per_mask)

    @classmethod
    def create(cls, spec: BackboneSpec, masks: MaskSet, seed: int, dtype=np.float32) -> "ExtractorBank":
        seeds = np.random.SeedSequence(seed).spawn(1 + len(masks))
        whole = init_backbone(spec, seeds[0], dtype, "whole")
        per_mask = [init_backbone(spec, s, dtype, m.name) for s, m in zip(seeds[1:], masks)]
        return cls(whole, per_mask)

    @property
    def spec(self) -> BackboneSpec:
        return self.whole.spec

    @property
    def extractors(self) -> list[Backbone]:
        return [self.whole, *self.per_mask]

    def parameters(self):
        return [p for b in self.extractors for p in b.parameters()]

    def buffers(self):
        out = {}
        for b in self.extractors:
            out.update(b.buffers())
        return out

    def train(self):
        for b in self.extractors:
            b.train()
        return self

    def eval(self):
        for b in self.extractors:
            b.eval()
        return self

    def zero_grad(self):
        for b in self.extractors:
            b.zero_grad()

    def param_count(self) -> int:
        return param_count(self.parameters())

    def embed_all(self, x: np.ndarray, masks: MaskSet) -> list[np.ndarray]:
        """Embeddings of ``x`` under every extractor: whole first, then one per mask."""
        self._check(masks)
        out = [self.whole.forward(x)]
        for b, m in zip(self.per_mask, masks):
            out.append(b.forward(apply_mask(x, m)))
        return out

    def _check(self, masks: MaskSet):
        if len(masks) != len(self.per_mask):
            raise ValueError(f"bank has {len(self.per_mask)} concept extractors but {len(masks)} masks were given")


# ---------------------------------------------------------------- prototypes


@dataclass(frozen=True)
class PrototypeSet:
    classes: np.ndarray  # class ids, ascending
    whole: np.ndarray  # (n_classes, D)
    concepts: tuple[np.ndarray, ...]  # one (n_classes, D) per mask

    def __post_init__(self):
        D = self.whole.shape[1]
        for c in self.concepts:
            if c.shape != self.whole.shape:
                raise ValueError(f"concept prototypes {c.shape} do not match whole prototypes {self.whole.shape}")
        if len(self.classes) != self.whole.shape[0] or D == 0:
            raise ValueError("prototype rows must match the class list")


def class_means(embeddings: np.ndarray, labels: np.ndarray, classes: np.ndarray) -> np.ndarray:
    rows = []
    for c in classes:
        sel = embeddings[labels == c]
        if len(sel) == 0:
            raise ValueError(f"class {c} has no support samples")
        rows.append(sel.mean(axis=0))
    return np.stack(rows)


def episode_classes(labels) -> np.ndarray:
    return np.unique(np.asarray(labels))


def prototypes_from_embeddings(embs: list[np.ndarray], labels, classes=None) -> PrototypeSet:
    labels = np.asarray(labels)
    classes = episode_classes(labels) if classes is None else np.asarray(classes)
    means = [class_means(e, labels, classes) for e in embs]
    return PrototypeSet(classes, means[0], tuple(means[1:]))


def compute_prototypes(support_x, support_y, bank: ExtractorBank, masks: MaskSet, classes=None) -> PrototypeSet:
    """Per-class mean embedding under every extractor of the bank."""
    support_x = np.asarray(support_x)
    if len(support_x) == 0:
        raise ValueError("empty support set")
    return prototypes_from_embeddings(bank.embed_all(support_x, masks), support_y, classes)


# ---------------------------------------------------------------- distances


def euclidean_distance(a, b) -> float:
    a, b = np.asarray(a), np.asarray(b)
    if a.shape != b.shape:
        raise ValueError(f"length mismatch: {a.shape} vs {b.shape}")
    return float(np.sqrt(np.sum((a - b) ** 2)))


def pairwise_distances(q: np.ndarray, p: np.ndarray, squared: bool = False) -> np.ndarray:
    """(n, D) x (K, D) -> (n, K) Euclidean (or squared Euclidean) distances."""
    if q.shape[-1] != p.shape[-1]:
        raise ValueError(f"embedding dimension mismatch: {q.shape[-1]} vs {p.shape[-1]}")
    sq = np.sum((q[:, None, :] - p[None, :, :]) ** 2, axis=-1)
    return sq if squared else np.sqrt(sq)


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def protonet_logits(query_emb, support_emb, support_y, classes=None, squared=False) -> np.ndarray:
    """Plain prototypical-network logits: negative distance to each class mean."""
    support_y = np.asarray(support_y)
    classes = episode_classes(support_y) if classes is None else np.asarray(classes)
    protos = class_means(np.asarray(support_emb), support_y, classes)
    return -pairwise_distances(np.atleast_2d(query_emb), protos, squared)


def combined_logits(query_embs: list[np.ndarray], protos: PrototypeSet, squared=False) -> np.ndarray:
    """Negated sum of whole-spectrogram and per-concept distances."""
    if len(query_embs) != 1 + len(protos.concepts):
        raise ValueError(f"got {len(query_embs)} query embeddings for {1 + len(protos.concepts)} prototype groups")
    logits = -pairwise_distances(np.atleast_2d(query_embs[0]), protos.whole, squared)
    for q, p in zip(query_embs[1:], protos.concepts):
        logits = logits - pairwise_distances(np.atleast_2d(q), p, squared)
    return logits


def _as_batch(x):
    x = np.asarray(x)
    return x[None] if x.ndim == 2 else x


def score(query, protos: PrototypeSet, bank: ExtractorBank, masks: MaskSet, squared=False) -> np.ndarray:
    """Per-class logits for one ``(T, F)`` query or a ``(B, T, F)`` batch."""
    if len(protos.concepts) != len(masks):
        raise ValueError(f"prototypes carry {len(protos.concepts)} concepts but {len(masks)} masks were given")
    q = _as_batch(query)
    logits = combined_logits(bank.embed_all(q, masks), protos, squared)
    return logits[0] if np.asarray(query).ndim == 2 else logits


def concept_only_score(query, protos: PrototypeSet, bank: ExtractorBank, masks: MaskSet, mask_index: int,
                       squared=False) -> np.ndarray:
    """Logits from a single concept extractor and its prototypes."""
    if not 0 <= mask_index < len(masks):
        raise IndexError(f"mask index {mask_index} out of range for {len(masks)} masks")
    q = _as_batch(query)
    emb = bank.per_mask[mask_index].forward(apply_mask(q, masks[mask_index]))
    logits = -pairwise_distances(emb, protos.concepts[mask_index], squared)
    return logits[0] if np.asarray(query).ndim == 2 else logits


def predict(logits: np.ndarray) -> np.ndarray:
    """Argmax; ties resolve to the lowest class position."""
    return np.argmax(logits, axis=-1)


# ------------------------------------------------------------- training loss


def _distance_grads(q, p, g, squared):
    """Backprop ``g = dL/d(dist)`` of shape (n, K) to the queries and prototypes."""
    diff = q[:, None, :] - p[None, :, :]
    if squared:
        coef = 2.0 * g
    else:
        d = np.sqrt(np.sum(diff**2, axis=-1))
        coef = np.where(d > 0, g / np.where(d > 0, d, 1.0), 0.0)
    w = coef[:, :, None] * diff
    return w.sum(axis=1), -w.sum(axis=0)


@dataclass
class LossResult:
    loss: float
    logits: np.ndarray
    classes: np.ndarray


def episode_loss(support_x, support_y, query_x, query_y, bank: ExtractorBank, masks: MaskSet,
                 squared=False, backward=True) -> LossResult:
    """Mean negative log-probability of the query labels, backpropagated into the bank.

    Supports and queries go through each extractor as one batch, so batch
    norm statistics cover the whole episode. Gradients accumulate into the
    parameters; the caller zeroes them (``sgd_step`` does).
    """
    support_x, query_x = np.asarray(support_x), np.asarray(query_x)
    support_y, query_y = np.asarray(support_y), np.asarray(query_y)
    if len(support_x) != len(support_y) or len(query_x) != len(query_y):
        raise ValueError("every sample needs exactly one label")
    if len(query_x) == 0 or len(support_x) == 0:
        raise ValueError("episode needs at least one support and one query")
    classes = episode_classes(support_y)
    if not np.isin(query_y, classes).all():
        raise ValueError("query classes must appear in the support set")
    bank._check(masks)
    n_s, n_q = len(support_x), len(query_x)
    x = np.concatenate([support_x, query_x])

    bank.train()
    extractors = bank.extractors
    embs = [extractors[0].forward(x)]
    for b, m in zip(extractors[1:], masks):
        embs.append(b.forward(apply_mask(x, m)))

    protos = [class_means(e[:n_s].astype(np.float64), support_y, classes) for e in embs]
    queries = [e[n_s:].astype(np.float64) for e in embs]
    logits = np.zeros((n_q, len(classes)))
    for q, p in zip(queries, protos):
        logits -= pairwise_distances(q, p, squared)
    target = np.searchsorted(classes, query_y)
    logp = log_softmax(logits)
    loss = -logp[np.arange(n_q), target].mean()

    if backward:
        g_logits = np.exp(logp)
        g_logits[np.arange(n_q), target] -= 1.0
        g_logits /= n_q
        g_dist = -g_logits
        onehot = (support_y[:, None] == classes[None, :]).astype(np.float64)
        counts = onehot.sum(axis=0)
        for b, e, q, p in zip(extractors, embs, queries, protos):
            g_q, g_p = _distance_grads(q, p, g_dist, squared)
            g_s = onehot @ (g_p / counts[:, None])
            b.backward(np.concatenate([g_s, g_q]).astype(e.dtype))
    return LossResult(float(loss), logits, classes)
