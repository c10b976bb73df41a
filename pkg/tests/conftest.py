import csv
import textwrap

import numpy as np
import pytest

from halluaudio.audio import Waveform, encode_wav

# Small pipeline used by the CLI tests: 64x64 spectrograms, 4-channel backbone.
TINY_INI = """\
[data]
kind = manifest
root = {root}
meta = manifest.csv

[spectrogram]
n_fft = 1024
hop = 256
n_mels = 64
clip_samples = 16128
n_frames = 64

[backbone]
channels = 4, 4, 4

[fewshot]
mask_mode = frequency
split_band = 32

[train]
n_way = 2
k_shot = 1
n_query = 2
episodes_per_epoch = 2
epochs = 2
step_size = 1
n_val_classes = 1

[eval]
grid = 2x1
repetitions = 2
importance_cell = 2x1

[split]
n_novel = 3
seed = 0

[run]
seed = 0
threads = 1
out = {out}
"""


def tone_corpus(root, n_classes=6, per_class=4, sr=16000, seconds=1.0, seed=0):
    """Write a manifest of noisy tones, one base frequency per class."""
    rng = np.random.default_rng(seed)
    root.mkdir(parents=True, exist_ok=True)
    t = np.arange(int(sr * seconds)) / sr
    rows = []
    for c in range(n_classes):
        f0 = 300.0 * (c + 1)
        for i in range(per_class):
            x = 0.4 * np.sin(2 * np.pi * f0 * (1 + 0.01 * i) * t) + 0.05 * rng.standard_normal(t.size)
            name = f"c{c}_{i}.wav"
            (root / name).write_bytes(encode_wav(Waveform(x.astype(np.float32), sr)))
            rows.append((name, f"tone{c}"))
    with open(root / "manifest.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["path", "label"])
        w.writerows(rows)
    return root


@pytest.fixture
def tiny_run(tmp_path):
    data = tone_corpus(tmp_path / "data")
    out = tmp_path / "run"
    ini = tmp_path / "tiny.ini"
    ini.write_text(textwrap.dedent(TINY_INI.format(root=data, out=out)))
    return ini, out


# ------------------------------------------------------------ acceptance report

ACCEPTANCE = {}


class Criterion:
    def __init__(self, label, title):
        self.label, self.title = label, title
        self.status, self.detail = None, ""

    def record(self, ok, detail):
        self.status = "PASS" if ok else "FAIL"
        self.detail = detail
        return ok

    def blocked(self, reason):
        self.status, self.detail = "BLOCKED", reason
        pytest.skip(reason)


@pytest.fixture
def criterion(request):
    marker = request.node.get_closest_marker("criterion")
    c = Criterion(*marker.args)
    yield c
    if c.status is None:
        c.status, c.detail = "FAIL", "raised before a result was recorded"
    ACCEPTANCE[c.label] = c


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")

    def order(label):
        return int(label.rstrip("abcdefgh")), label

    for label in sorted(ACCEPTANCE, key=order):
        c = ACCEPTANCE[label]
        terminalreporter.write_line(f"criterion {label:<3} {c.status:<7} {c.title}: {c.detail}")
