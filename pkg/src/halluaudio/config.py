"""Run configuration: an INI file with sections, validated before any side effect.

Example::

    [data]
    kind = esc50            ; esc50 | manifest
    root = /data/ESC-50     ; HALLUAUDIO_DATA_ROOT overrides this
    meta = meta/esc50.csv   ; relative to root
    audio = audio

    [spectrogram]
    hop = 502
    clip_samples = 80000

    [run]
    seed = 0
    out = runs/esc50
"""
from __future__ import annotations

import configparser
import os
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

from .audio import ConfigError, SpectrogramConfig
from .backbone import BackboneConfigError, BackboneSpec
from .episodes import EpisodeSpec

DATA_ROOT_ENV = "HALLUAUDIO_DATA_ROOT"
MASK_MODES = ("none", "frequency", "time")
DISTANCES = ("euclidean", "squared")


class RunConfigError(ValueError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    n_way: int = 5
    k_shot: int = 5
    n_query: int = 5
    episodes_per_epoch: int = 100
    epochs: int = 60
    lr: float = 0.01
    weight_decay: float = 1e-4
    momentum: float = 0.0
    step_size: int = 20
    n_val_classes: int = 5
    val_repetitions: int = 1


@dataclass(frozen=True)
class RunConfig:
    kind: str = "esc50"
    root: str = "."
    meta: str = "meta/esc50.csv"
    audio: str = "audio"
    spectrogram: SpectrogramConfig = field(default_factory=SpectrogramConfig)
    backbone: BackboneSpec = field(default_factory=BackboneSpec)
    mask_mode: str = "frequency"
    split_band: int = 64
    distance: str = "euclidean"
    train: TrainConfig = field(default_factory=TrainConfig)
    grid: tuple[tuple[int, int], ...] = ((5, 1), (5, 5), (10, 1), (10, 5))
    repetitions: int = 50
    importance_cell: tuple[int, int] = (5, 5)
    ci: str = "episode"
    n_novel: int = 15
    split_seed: int = 0
    split_file: str = ""
    seed: int = 0
    threads: int = 1
    out: str = "runs/default"

    @property
    def squared(self) -> bool:
        return self.distance == "squared"

    @property
    def data_root(self) -> Path:
        return Path(os.environ.get(DATA_ROOT_ENV) or self.root)

    @property
    def meta_path(self) -> Path:
        return self.data_root / self.meta

    @property
    def audio_root(self) -> Path:
        return self.data_root / self.audio

    @property
    def out_dir(self) -> Path:
        return Path(self.out)

    @property
    def cache_dir(self) -> Path:
        return self.out_dir / "cache"

    @property
    def index_path(self) -> Path:
        return self.out_dir / "index.csv"

    @property
    def split_path(self) -> Path:
        return Path(self.split_file) if self.split_file else self.out_dir / "split.txt"

    def episode_spec(self, n_way: int, k_shot: int) -> EpisodeSpec:
        return EpisodeSpec(n_way, k_shot, 1, self.repetitions)

    def validate(self, need_data: bool = False) -> "RunConfig":
        if self.kind not in ("esc50", "manifest"):
            raise RunConfigError(f"data.kind must be esc50 or manifest, got {self.kind!r}")
        if self.mask_mode not in MASK_MODES:
            raise RunConfigError(f"mask_mode must be one of {MASK_MODES}, got {self.mask_mode!r}")
        if self.distance not in DISTANCES:
            raise RunConfigError(f"distance must be one of {DISTANCES}, got {self.distance!r}")
        if self.ci not in ("episode", "query"):
            raise RunConfigError(f"ci must be episode or query, got {self.ci!r}")
        if tuple(self.backbone.input_shape) != self.spectrogram.shape:
            raise RunConfigError(f"backbone input {self.backbone.input_shape} does not match "
                                 f"spectrogram shape {self.spectrogram.shape}")
        if self.mask_mode == "frequency" and not 0 < self.split_band < self.spectrogram.n_mels:
            raise RunConfigError(f"split_band must be in (0, {self.spectrogram.n_mels}), got {self.split_band}")
        t = self.train
        if t.lr <= 0 or t.weight_decay < 0 or t.epochs < 1 or t.step_size < 1 or t.episodes_per_epoch < 1:
            raise RunConfigError(f"invalid optimiser settings {t}")
        try:
            EpisodeSpec(t.n_way, t.k_shot, t.n_query)
            for w, k in (*self.grid, self.importance_cell):
                EpisodeSpec(w, k, 1, self.repetitions)
        except ValueError as exc:
            raise RunConfigError(str(exc)) from None
        if self.threads < 1:
            raise RunConfigError(f"threads must be >= 1, got {self.threads}")
        if need_data:
            if not self.meta_path.is_file():
                raise RunConfigError(f"dataset metadata not found: {self.meta_path}")
            if self.kind == "esc50" and not self.audio_root.is_dir():
                raise RunConfigError(f"audio directory not found: {self.audio_root}")
        return self


def parse_grid(text: str) -> tuple[tuple[int, int], ...]:
    """``"5x1,5x5,10x1"`` -> ((5, 1), (5, 5), (10, 1))."""
    cells = []
    for item in text.replace(" ", "").split(","):
        if not item:
            continue
        try:
            w, k = item.lower().split("x")
            cells.append((int(w), int(k)))
        except ValueError:
            raise RunConfigError(f"grid cell {item!r} is not of the form <way>x<shot>") from None
    if not cells:
        raise RunConfigError("empty evaluation grid")
    return tuple(cells)


def format_grid(grid) -> str:
    return ",".join(f"{w}x{k}" for w, k in grid)


def cell_name(n_way: int, k_shot: int) -> str:
    return f"{n_way}way{k_shot}shot"


def _ints(text):
    return tuple(int(v) for v in text.replace(",", " ").split())


def load_config(path=None, **overrides) -> RunConfig:
    cfg = RunConfig()
    if path is not None:
        parser = configparser.ConfigParser(inline_comment_prefixes=(";", "#"))
        if not parser.read(path, encoding="utf-8"):
            raise RunConfigError(f"config file not found: {path}")
        cfg = _apply(cfg, parser)
    overrides = {k: v for k, v in overrides.items() if v is not None}
    try:
        return replace(cfg, **overrides)
    except (ConfigError, BackboneConfigError) as exc:
        raise RunConfigError(str(exc)) from None


def _apply(cfg: RunConfig, p: configparser.ConfigParser) -> RunConfig:
    try:
        kw = {}
        if p.has_section("data"):
            d = p["data"]
            for key in ("kind", "root", "meta", "audio"):
                if key in d:
                    kw[key] = d[key]
        spec = cfg.spectrogram
        if p.has_section("spectrogram"):
            s = p["spectrogram"]
            sk = {}
            for key in ("sample_rate", "n_fft", "hop", "n_mels", "clip_samples"):
                if key in s:
                    sk[key] = s.getint(key)
            for key in ("f_min", "f_max", "top_db"):
                if key in s:
                    sk[key] = s.getfloat(key)
            if "n_frames" in s:
                sk["n_frames"] = None if s["n_frames"].lower() == "none" else s.getint("n_frames")
            spec = replace(spec, **sk)
        kw["spectrogram"] = spec
        channels = cfg.backbone.channels
        if p.has_section("backbone") and "channels" in p["backbone"]:
            channels = _ints(p["backbone"]["channels"])
        kw["backbone"] = BackboneSpec(spec.shape, channels)
        if p.has_section("fewshot"):
            f = p["fewshot"]
            if "mask_mode" in f:
                kw["mask_mode"] = f["mask_mode"]
            if "split_band" in f:
                kw["split_band"] = f.getint("split_band")
            if "distance" in f:
                kw["distance"] = f["distance"]
        if p.has_section("train"):
            t = p["train"]
            tk = {}
            for key in ("n_way", "k_shot", "n_query", "episodes_per_epoch", "epochs", "step_size",
                        "n_val_classes", "val_repetitions"):
                if key in t:
                    tk[key] = t.getint(key)
            for key in ("lr", "weight_decay", "momentum"):
                if key in t:
                    tk[key] = t.getfloat(key)
            kw["train"] = replace(cfg.train, **tk)
        if p.has_section("eval"):
            e = p["eval"]
            if "grid" in e:
                kw["grid"] = parse_grid(e["grid"])
            if "importance_cell" in e:
                (kw["importance_cell"],) = parse_grid(e["importance_cell"])[:1]
            if "repetitions" in e:
                kw["repetitions"] = e.getint("repetitions")
            if "ci" in e:
                kw["ci"] = e["ci"]
        if p.has_section("split"):
            s = p["split"]
            if "n_novel" in s:
                kw["n_novel"] = s.getint("n_novel")
            if "seed" in s:
                kw["split_seed"] = s.getint("seed")
            if "file" in s:
                kw["split_file"] = s["file"]
        if p.has_section("run"):
            r = p["run"]
            for key in ("seed", "threads"):
                if key in r:
                    kw[key] = r.getint(key)
            if "out" in r:
                kw["out"] = r["out"]
        return replace(cfg, **kw)
    except (ValueError, ConfigError, BackboneConfigError) as exc:
        raise RunConfigError(f"invalid config: {exc}") from None


def to_dict(cfg: RunConfig) -> dict:
    d = asdict(cfg)
    d["grid"] = format_grid(cfg.grid)
    d["importance_cell"] = format_grid([cfg.importance_cell])
    return d
