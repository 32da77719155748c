"""Objective metrics: speaker classification accuracy, voicing decision error, probes."""
from __future__ import annotations

import copy
import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from sklearn.linear_model import LogisticRegression
from sklearn.pipeline import make_pipeline
from sklearn.preprocessing import StandardScaler
from torch import nn

from .audio import VoicingDecisions, Waveform, mfcc, voicing_decisions
from .errors import ValidationError
from .tts import sequence_mask

log = logging.getLogger(__name__)

BOUNDED = {"sca", "vde", "probe_accuracy"}


def config_digest(config: dict | None) -> str:
    blob = json.dumps(config or {}, sort_keys=True, default=str).encode("utf-8")
    return hashlib.sha256(blob).hexdigest()[:16]


@dataclass
class MetricReport:
    metric: str
    value: float
    n_samples: int
    config_digest: str = config_digest(None)
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        self.value = float(self.value)
        if self.metric in BOUNDED and not 0.0 <= self.value <= 1.0:
            raise ValidationError(f"{self.metric} = {self.value} outside [0, 1]")

    def to_dict(self) -> dict:
        return asdict(self)


def write_reports(reports: Sequence[MetricReport], path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "a", encoding="utf-8") as f:
        for r in reports:
            f.write(json.dumps(r.to_dict(), sort_keys=True) + "\n")
    return path


def read_reports(path) -> list[MetricReport]:
    out = []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if line.strip():
            out.append(MetricReport(**json.loads(line)))
    return out


def markdown_table(reports: Sequence[MetricReport]) -> str:
    """One row per system (``extra["system"]``), one column per metric; rates shown as percentages."""
    systems: dict[str, dict[str, float]] = {}
    metrics: list[str] = []
    for r in reports:
        name = str(r.extra.get("system", "-"))
        systems.setdefault(name, {})[r.metric] = r.value
        if r.metric not in metrics:
            metrics.append(r.metric)
    lines = ["| System | " + " | ".join(m.upper() for m in metrics) + " |",
             "|---" * (len(metrics) + 1) + "|"]
    for name, vals in systems.items():
        cells = []
        for m in metrics:
            v = vals.get(m)
            cells.append("-" if v is None else (f"{100 * v:.1f}%" if m in BOUNDED else f"{v:.4g}"))
        lines.append(f"| {name} | " + " | ".join(cells) + " |")
    return "\n".join(lines) + "\n"


# --- speaker classification accuracy ---------------------------------------------

def pooled_mfcc(mel, n_coeffs: int = 13) -> np.ndarray:
    """Mean over frames of the MFCCs of a log-mel spectrogram."""
    return mfcc(np.asarray(mel), n_coeffs).mean(axis=0)


class SpeakerClassifier:
    """Single linear layer (multinomial logistic regression) over mean-pooled MFCCs."""

    def __init__(self, n_coeffs: int = 13, max_iter: int = 5000, C: float = 10.0):
        self.n_coeffs = n_coeffs
        self.model = make_pipeline(StandardScaler(), LogisticRegression(C=C, max_iter=max_iter))
        self.labels: list[str] = []
        self.train_accuracy = float("nan")
        self.test_accuracy = float("nan")

    def features(self, mels) -> np.ndarray:
        return np.stack([pooled_mfcc(m, self.n_coeffs) for m in mels])

    def fit(self, mels, labels) -> "SpeakerClassifier":
        self.labels = sorted(set(labels))
        self.model.fit(self.features(mels), np.asarray(labels))
        self.train_accuracy = self.accuracy(mels, labels)
        return self

    def predict(self, mels) -> np.ndarray:
        return self.model.predict(self.features(mels))

    def accuracy(self, mels, labels) -> float:
        return float(np.mean(self.predict(mels) == np.asarray(labels)))


def train_sca_classifier(mels, labels, test_mels=None, test_labels=None, **kw) -> SpeakerClassifier:
    labels = [str(x) for x in labels]
    if len(mels) != len(labels):
        raise ValidationError("features and labels differ in length")
    if len(set(labels)) < 2:
        raise ValidationError("speaker classifier needs at least 2 speakers")
    clf = SpeakerClassifier(**kw).fit(mels, labels)
    if test_mels is not None:
        clf.test_accuracy = clf.accuracy(test_mels, [str(x) for x in test_labels])
    return clf


def sca(classifier: SpeakerClassifier, converted_mels, target_labels, config: dict | None = None) -> MetricReport:
    target_labels = [str(x) for x in target_labels]
    unknown = sorted(set(target_labels) - set(classifier.labels))
    if unknown:
        raise ValidationError(f"labels outside classifier inventory: {unknown}")
    if len(converted_mels) != len(target_labels):
        raise ValidationError("mels and labels differ in length")
    acc = classifier.accuracy(converted_mels, target_labels)
    return MetricReport("sca", acc, len(target_labels), config_digest(config),
                        {"n_speakers": len(classifier.labels)})


# --- voicing decision error --------------------------------------------------------

def _decisions(x, threshold: float) -> np.ndarray:
    if isinstance(x, VoicingDecisions):
        return np.asarray(x.flags, dtype=bool)
    if isinstance(x, Waveform):
        return np.asarray(voicing_decisions(x, threshold).flags, dtype=bool)
    return np.asarray(x, dtype=bool)


def vde(source, converted, threshold: float = 0.7, config: dict | None = None) -> MetricReport:
    """Fraction of frames whose voiced/unvoiced decisions differ.

    Accepts waveforms, :class:`VoicingDecisions` or boolean arrays. Differing
    frame counts are truncated to the shorter one and logged.
    """
    a, b = _decisions(source, threshold), _decisions(converted, threshold)
    n = min(len(a), len(b))
    if len(a) != len(b):
        log.warning("vde: frame count mismatch %d vs %d, truncating to %d", len(a), len(b), n)
    if n == 0:
        raise ValidationError("vde needs at least one frame")
    err = float(np.count_nonzero(a[:n] != b[:n])) / n
    return MetricReport("vde", err, n, config_digest(config), {"threshold": threshold})


# --- disentanglement probe -----------------------------------------------------------

class ProbeNet(nn.Module):
    """Conv1d + BN + ReLU stack, masked temporal max-pool, MLP with dropout."""

    def __init__(self, in_dim: int, n_classes: int, channels: int = 128, n_layers: int = 4,
                 kernel_size: int = 3, dropout: float = 0.5):
        super().__init__()
        self.convs = nn.ModuleList()
        self.norms = nn.ModuleList()
        c = in_dim
        for _ in range(n_layers):
            self.convs.append(nn.Conv1d(c, channels, kernel_size, padding=kernel_size // 2))
            self.norms.append(nn.BatchNorm1d(channels))
            c = channels
        self.head = nn.Sequential(nn.Linear(channels, channels), nn.ReLU(), nn.Dropout(dropout),
                                  nn.Linear(channels, n_classes))

    def forward(self, x: torch.Tensor, lengths: torch.Tensor) -> torch.Tensor:
        mask = sequence_mask(lengths, x.shape[1]).unsqueeze(1)     # [B,1,T]
        h = x.transpose(1, 2) * mask
        for conv, bn in zip(self.convs, self.norms):
            h = torch.relu(bn(conv(h))) * mask
        pooled = h.masked_fill(~mask, float("-inf")).amax(dim=2)
        return self.head(pooled)


@dataclass
class ProbeData:
    features: list          # each [T, D]
    labels: list            # speaker ids

    def __len__(self):
        return len(self.labels)


def _pad(feats, mean, std):
    lengths = torch.tensor([f.shape[0] for f in feats])
    x = torch.zeros(len(feats), int(lengths.max()), feats[0].shape[1])
    for i, f in enumerate(feats):
        x[i, : f.shape[0]] = torch.as_tensor((np.asarray(f) - mean) / std, dtype=torch.float32)
    return x, lengths


@torch.no_grad()
def _probe_accuracy(net, data: ProbeData, index, mean, std, batch_size) -> float:
    net.eval()
    correct = 0
    for s in range(0, len(data), batch_size):
        x, ln = _pad(data.features[s:s + batch_size], mean, std)
        y = torch.tensor([index[l] for l in data.labels[s:s + batch_size]])
        correct += int((net(x, ln).argmax(1) == y).sum())
    return correct / len(data)


def disentanglement_probe(kind: str, train: ProbeData, val: ProbeData, test: ProbeData,
                          epochs: int = 20, batch_size: int = 16, lr: float = 1e-3, seed: int = 0,
                          channels: int = 128, config: dict | None = None) -> MetricReport:
    """Train a speaker probe on ``train``, keep the best-val epoch, report test accuracy."""
    for name, split in (("train", train), ("val", val), ("test", test)):
        if len(split) == 0:
            raise ValidationError(f"probe {name} split is empty; use a larger manifest")
    labels = sorted({str(l) for l in train.labels})
    if len(labels) < 2:
        raise ValidationError("probe needs at least 2 speakers")
    index = {l: i for i, l in enumerate(labels)}
    for split in (val, test):
        missing = {str(l) for l in split.labels} - set(index)
        if missing:
            raise ValidationError(f"speakers not in probe training set: {sorted(missing)}")
    train = ProbeData(train.features, [str(l) for l in train.labels])
    val = ProbeData(val.features, [str(l) for l in val.labels])
    test = ProbeData(test.features, [str(l) for l in test.labels])
    stacked = np.concatenate([np.asarray(f) for f in train.features], axis=0)
    mean, std = stacked.mean(0), stacked.std(0) + 1e-5
    torch.manual_seed(seed)
    g = torch.Generator().manual_seed(seed)
    net = ProbeNet(stacked.shape[1], len(labels), channels=channels)
    opt = torch.optim.Adam(net.parameters(), lr=lr)
    y_all = torch.tensor([index[l] for l in train.labels])
    best, best_state, best_epoch = -1.0, None, -1
    for epoch in range(epochs):
        net.train()
        perm = torch.randperm(len(train), generator=g).tolist()
        for s in range(0, len(perm), batch_size):
            idx = perm[s:s + batch_size]
            if len(idx) < 2:
                continue
            x, ln = _pad([train.features[i] for i in idx], mean, std)
            loss = nn.functional.cross_entropy(net(x, ln), y_all[idx])
            opt.zero_grad()
            loss.backward()
            opt.step()
        acc = _probe_accuracy(net, val, index, mean, std, batch_size)
        if acc > best:
            best, best_state, best_epoch = acc, copy.deepcopy(net.state_dict()), epoch
    net.load_state_dict(best_state)
    test_acc = _probe_accuracy(net, test, index, mean, std, batch_size)
    return MetricReport("probe_accuracy", test_acc, len(test), config_digest(config),
                        {"system": kind, "val_accuracy": best, "best_epoch": best_epoch,
                         "n_speakers": len(labels), "chance": 1.0 / len(labels)})
