#!/usr/bin/env python3
"""
Convolutional multi-label surrogate for the MIP binaries.

An instance is encoded as a (1 + 2|B| + e_max) x |T| map: aggregate solar
availability, per-bus P and Q loads and one schedule channel per EV slot,
the slots beyond the real fleet left at zero. The network predicts one
probability per binary of a deterministic model padded to e_max EVs; those
above the calibrated thresholds become fixings.
"""

import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn
from torch.utils.data import DataLoader, TensorDataset

from mipcore import PartialAssignment, Solution, VariableIndex
from scenariogen import JobSchedule

logger = logging.getLogger(__name__)

PROB_FLOOR = 1e-7
MODEL_FORMAT_VERSION = 1


class SurrogateError(ValueError):
    """Shape or layout mismatch between data and model."""


# ---------------------------------------------------------------------------
# Features and labels
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class FeatureMap:
    values: np.ndarray  # (1 + 2B + e_max, T)
    evs: int
    e_max: int
    buses: int

    @property
    def schedule_offset(self) -> int:
        return 1 + 2 * self.buses

    def stripped(self) -> np.ndarray:
        """Channels of the real fleet only."""
        return self.values[:self.schedule_offset + self.evs]


def encode_features(solar, load_p, load_q, schedule: JobSchedule, evs: int, e_max: int,
                    stats: "NormStats | None" = None) -> FeatureMap:
    """Raw (or, with stats, normalized) feature map.

    Schedule channels hold node id + 1 at each job timespan so that 0 always
    means no job, also for node 0 and for padded EVs.
    """
    if evs > e_max:
        raise SurrogateError(f"{evs} EVs exceed the padded capacity e_max={e_max}")
    solar = np.asarray(solar, dtype=float)
    if solar.ndim == 2:
        solar = solar.sum(axis=0)
    load_p = np.asarray(load_p, dtype=float)
    load_q = np.asarray(load_q, dtype=float)
    buses, timesteps = load_p.shape
    if solar.shape != (timesteps,) or load_q.shape != load_p.shape:
        raise SurrogateError("solar and load profiles disagree on |T| or bus count")
    values = np.zeros((1 + 2 * buses + e_max, timesteps))
    values[0] = solar
    values[1:1 + buses] = load_p
    values[1 + buses:1 + 2 * buses] = load_q
    for k, node, s in schedule.triples:
        if k >= evs:
            continue
        values[1 + 2 * buses + k, s] = node + 1
    fm = FeatureMap(values, evs, e_max, buses)
    return stats.normalize(fm) if stats is not None else fm


@dataclass(frozen=True)
class NormStats:
    """Per-channel min-max scaling; schedule channels share one [0, max node id + 1] range."""
    lo: np.ndarray
    hi: np.ndarray

    @classmethod
    def fit(cls, maps: list[FeatureMap]) -> "NormStats":
        if not maps:
            raise SurrogateError("cannot fit normalization on an empty set")
        stack = np.stack([fm.values for fm in maps])
        lo = stack.min(axis=(0, 2))
        hi = stack.max(axis=(0, 2))
        offset = maps[0].schedule_offset
        lo[offset:] = 0.0
        hi[offset:] = max(1.0, float(stack[:, offset:].max()) if stack.shape[1] > offset else 1.0)
        return cls(lo, hi)

    def normalize(self, fm: FeatureMap) -> FeatureMap:
        if fm.values.shape[0] != len(self.lo):
            raise SurrogateError(f"feature map has {fm.values.shape[0]} channels, stats have {len(self.lo)}")
        span = self.hi - self.lo
        scaled = (fm.values - self.lo[:, None]) / np.where(span > 0, span, 1.0)[:, None]
        scaled[fm.schedule_offset + fm.evs:] = 0.0
        return FeatureMap(scaled, fm.evs, fm.e_max, fm.buses)

    def to_dict(self) -> dict:
        return {"lo": self.lo.tolist(), "hi": self.hi.tolist()}

    @classmethod
    def from_dict(cls, data: dict) -> "NormStats":
        return cls(np.asarray(data["lo"], dtype=float), np.asarray(data["hi"], dtype=float))


def extract_labels(solution: Solution, index: VariableIndex, evs: int, e_max: int) -> np.ndarray:
    """EV-major binary labels of a deterministic solution, zero-padded to e_max blocks."""
    if index.scenarios != 1:
        raise SurrogateError(f"labels need a single-scenario solution, got {index.scenarios} scenarios")
    if index.evs != evs or evs > e_max:
        raise SurrogateError(f"solution has {index.evs} EVs, expected {evs} <= e_max={e_max}")
    if solution.values is None:
        raise SurrogateError(f"solution with status {solution.status} has no values")
    labels = np.zeros(e_max * index.d_ev, dtype=np.int8)
    labels[:index.binary_count] = np.round(solution.values[:index.binary_count]).astype(np.int8)
    return labels


def valid_mask(evs: int, e_max: int, d_ev: int) -> np.ndarray:
    mask = np.zeros(e_max * d_ev, dtype=bool)
    mask[:evs * d_ev] = True
    return mask


def strip_padding(probs, evs: int, d_ev: int) -> np.ndarray:
    probs = np.asarray(probs)
    if probs.shape[-1] < evs * d_ev:
        raise SurrogateError(f"{probs.shape[-1]} outputs cannot hold {evs} EV blocks of {d_ev}")
    return probs[..., :evs * d_ev]


# ---------------------------------------------------------------------------
# Network
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class LayerSpec:
    channels: tuple[int, ...] = (32, 64, 64)
    kernel: int = 3
    pool: int = 2
    hidden: int = 256
    dropout: float = 0.0


class ConvClassifier(nn.Module):
    """Conv1d stack over the time axis (channels mix across inputs) and a dense head; emits logits."""

    def __init__(self, in_channels: int, timesteps: int, outputs: int, spec: LayerSpec):
        super().__init__()
        layers = []
        width, length = in_channels, timesteps
        for out in spec.channels:
            layers += [nn.Conv1d(width, out, spec.kernel, padding=spec.kernel // 2), nn.ReLU()]
            # short horizons stop pooling once the time axis is exhausted
            if spec.pool > 1 and length >= spec.pool:
                layers.append(nn.MaxPool1d(spec.pool, ceil_mode=True))
                length = -(-length // spec.pool)
            width = out
        self.features = nn.Sequential(*layers)
        self.head = nn.Sequential(
            nn.Flatten(),
            nn.Linear(width * length, spec.hidden),
            nn.ReLU(),
            nn.Dropout(spec.dropout),
            nn.Linear(spec.hidden, outputs),
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.head(self.features(x))


@dataclass
class Thresholds:
    p0: float
    p1: float

    def validate(self) -> None:
        if not (0.0 <= self.p0 <= 1.0 and 0.0 <= self.p1 <= 1.0):
            raise SurrogateError(f"thresholds must lie in [0, 1], got p0={self.p0}, p1={self.p1}")


@dataclass
class SurrogateModel:
    net: ConvClassifier
    spec: LayerSpec
    stats: NormStats
    e_max: int
    d_ev: int
    buses: int
    timesteps: int
    thresholds: Thresholds | None = None
    history: list = field(default_factory=list)

    @property
    def in_channels(self) -> int:
        return 1 + 2 * self.buses + self.e_max

    @property
    def outputs(self) -> int:
        return self.e_max * self.d_ev


def predict(model: SurrogateModel, features: FeatureMap | list[FeatureMap]) -> np.ndarray:
    """Probabilities in (0, 1) for raw feature maps, one row per map."""
    single = isinstance(features, FeatureMap)
    maps = [features] if single else list(features)
    for fm in maps:
        if fm.values.shape != (model.in_channels, model.timesteps):
            raise SurrogateError(f"feature map shape {fm.values.shape} does not match model "
                                 f"({model.in_channels}, {model.timesteps})")
    batch = torch.as_tensor(np.stack([model.stats.normalize(fm).values for fm in maps]), dtype=torch.float32)
    model.net.eval()
    with torch.no_grad():
        probs = torch.sigmoid(model.net(batch)).clamp(PROB_FLOOR, 1.0 - PROB_FLOOR).numpy().astype(float)
    return probs[0] if single else probs


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    batch_size: int = 16
    lr: float = 1e-3
    weight_decay: float = 0.0
    val_fraction: float = 0.1
    seed: int = 0
    loss: str = "weighted_bce"  # weighted_bce | asymmetric
    gamma_pos: float = 0.0
    gamma_neg: float = 4.0
    clip: float = 0.05
    layers: LayerSpec = LayerSpec()


def class_weights(labels: np.ndarray, mask: np.ndarray) -> tuple[float, float]:
    """Inverse class frequency over valid positions, scaled so balanced data gets (1, 1)."""
    valid = labels[mask]
    total = valid.size
    ones = int(valid.sum())
    zeros = total - ones
    w0 = total / (2.0 * zeros) if zeros else 1.0
    w1 = total / (2.0 * ones) if ones else 1.0
    return w0, w1


def weighted_bce(logits: torch.Tensor, targets: torch.Tensor, mask: torch.Tensor,
                 w0: float, w1: float) -> torch.Tensor:
    weights = (targets * w1 + (1.0 - targets) * w0) * mask
    per_entry = F.binary_cross_entropy_with_logits(logits, targets, reduction="none")
    return (per_entry * weights).sum() / mask.sum().clamp(min=1.0)


def asymmetric_loss(logits: torch.Tensor, targets: torch.Tensor, mask: torch.Tensor,
                    gamma_pos: float, gamma_neg: float, clip: float) -> torch.Tensor:
    p = torch.sigmoid(logits)
    p_neg = (p - clip).clamp(min=0.0) if clip > 0 else p
    pos = targets * (1.0 - p).pow(gamma_pos) * torch.log(p.clamp(min=PROB_FLOOR))
    neg = (1.0 - targets) * p_neg.pow(gamma_neg) * torch.log((1.0 - p_neg).clamp(min=PROB_FLOOR))
    return -((pos + neg) * mask).sum() / mask.sum().clamp(min=1.0)


def _loss_fn(cfg: TrainConfig, w0: float, w1: float):
    if cfg.loss == "asymmetric":
        return lambda logits, y, m: asymmetric_loss(logits, y, m, cfg.gamma_pos, cfg.gamma_neg, cfg.clip)
    if cfg.loss != "weighted_bce":
        raise SurrogateError(f"unknown loss {cfg.loss!r}")
    return lambda logits, y, m: weighted_bce(logits, y, m, w0, w1)


def split_indices(n: int, fraction: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Shuffled (train, validation) positions; validation empty below two samples."""
    order = np.random.default_rng(seed).permutation(n)
    n_val = 0 if n < 2 else min(n - 1, max(1, int(round(n * fraction))))
    return order[n_val:], order[:n_val]


def train(maps: list[FeatureMap], labels, d_ev: int, cfg: TrainConfig = TrainConfig()) -> SurrogateModel:
    """Fit the classifier on raw feature maps and padded label vectors."""
    if not maps:
        raise SurrogateError("empty training set")
    e_max, buses = maps[0].e_max, maps[0].buses
    timesteps = maps[0].values.shape[1]
    labels = np.asarray(labels, dtype=np.float32)
    for fm in maps:
        if (fm.e_max, fm.buses, fm.values.shape[1]) != (e_max, buses, timesteps):
            raise SurrogateError("feature maps disagree on e_max, bus count or |T|")
    if labels.shape != (len(maps), e_max * d_ev):
        raise SurrogateError(f"labels have shape {labels.shape}, expected {(len(maps), e_max * d_ev)}")

    torch.manual_seed(cfg.seed)
    train_idx, val_idx = split_indices(len(maps), cfg.val_fraction, cfg.seed)
    stats = NormStats.fit([maps[i] for i in train_idx])
    x = np.stack([stats.normalize(fm).values for fm in maps]).astype(np.float32)
    masks = np.stack([valid_mask(fm.evs, e_max, d_ev) for fm in maps]).astype(np.float32)
    w0, w1 = class_weights(labels[train_idx], masks[train_idx].astype(bool))
    loss_fn = _loss_fn(cfg, w0, w1)

    net = ConvClassifier(x.shape[1], timesteps, e_max * d_ev, cfg.layers)
    optimizer = torch.optim.Adam(net.parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay)
    train_set = TensorDataset(torch.from_numpy(x[train_idx]), torch.from_numpy(labels[train_idx]),
                              torch.from_numpy(masks[train_idx]))
    loader = DataLoader(train_set, batch_size=cfg.batch_size, shuffle=True,
                        generator=torch.Generator().manual_seed(cfg.seed))
    val = tuple(torch.from_numpy(a[val_idx]) for a in (x, labels, masks)) if len(val_idx) else None

    history = []
    logger.info("Training on %d samples (%d validation), %d outputs, weights w0=%.3f w1=%.3f",
                len(train_idx), len(val_idx), e_max * d_ev, w0, w1)
    for epoch in range(cfg.epochs):
        net.train()
        running, seen = 0.0, 0
        for xb, yb, mb in loader:
            optimizer.zero_grad()
            loss = loss_fn(net(xb), yb, mb)
            loss.backward()
            optimizer.step()
            running += float(loss) * len(xb)
            seen += len(xb)
        entry = {"epoch": epoch + 1, "train_loss": running / max(seen, 1)}
        if val is not None:
            net.eval()
            with torch.no_grad():
                entry["val_loss"] = float(loss_fn(net(val[0]), val[1], val[2]))
        history.append(entry)
        logger.info("epoch %d: %s", epoch + 1,
                    ", ".join(f"{k}={v:.5f}" for k, v in entry.items() if k != "epoch"))

    return SurrogateModel(net=net, spec=cfg.layers, stats=stats, e_max=e_max, d_ev=d_ev, buses=buses,
                          timesteps=timesteps, history=history)


def gradient_check(spec: LayerSpec, in_channels: int, timesteps: int, outputs: int,
                   batch: int = 2, samples: int = 25, eps: float = 1e-6, seed: int = 0) -> float:
    """Max relative gap between autograd and central differences of the weighted loss (float64)."""
    torch.manual_seed(seed)
    net = ConvClassifier(in_channels, timesteps, outputs, spec).double()
    net.eval()
    x = torch.rand(batch, in_channels, timesteps, dtype=torch.float64)
    y = (torch.rand(batch, outputs, dtype=torch.float64) > 0.7).double()
    mask = torch.ones_like(y)

    def loss() -> torch.Tensor:
        return weighted_bce(net(x), y, mask, 0.6, 2.5)

    net.zero_grad()
    loss().backward()
    params = [p for p in net.parameters()]
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(samples):
        p = params[int(rng.integers(len(params)))]
        flat = p.data.view(-1)
        j = int(rng.integers(flat.numel()))
        analytic = float(p.grad.view(-1)[j])
        with torch.no_grad():
            original = float(flat[j])
            flat[j] = original + eps
            plus = float(loss())
            flat[j] = original - eps
            minus = float(loss())
            flat[j] = original
        numeric = (plus - minus) / (2 * eps)
        denom = max(abs(analytic), abs(numeric), 1e-4)
        worst = max(worst, abs(analytic - numeric) / denom)
    return worst


# ---------------------------------------------------------------------------
# Thresholds and fixing
# ---------------------------------------------------------------------------

def thresholds_from_predictions(probs, labels, mask=None) -> Thresholds:
    """Mean confidence in the true class, separately over label-1 and label-0 positions."""
    probs = np.asarray(probs, dtype=float).ravel()
    labels = np.asarray(labels).ravel()
    mask = np.ones(probs.shape, dtype=bool) if mask is None else np.asarray(mask, dtype=bool).ravel()
    ones = mask & (labels == 1)
    zeros = mask & (labels != 1)
    if not ones.any() or not zeros.any():
        raise SurrogateError("validation set must contain both label classes")
    return Thresholds(p0=float((1.0 - probs[zeros]).mean()), p1=float(probs[ones].mean()))


def calibrate_thresholds(model: SurrogateModel, maps: list[FeatureMap], labels) -> Thresholds:
    probs = predict(model, list(maps))
    mask = np.stack([valid_mask(fm.evs, model.e_max, model.d_ev) for fm in maps])
    thresholds = thresholds_from_predictions(probs, labels, mask)
    logger.info("Calibrated thresholds p0=%.4f p1=%.4f on %d samples", thresholds.p0, thresholds.p1, len(maps))
    return thresholds


def filter_predictions(probs, thresholds: Thresholds, offset: int = 0) -> PartialAssignment:
    """Fix to 1 where the prediction reaches p1, to 0 where its complement reaches p0."""
    thresholds.validate()
    probs = np.asarray(probs, dtype=float).ravel()
    values = {int(j) + offset: 1 for j in np.flatnonzero(probs >= thresholds.p1)}
    for j in np.flatnonzero(1.0 - probs >= thresholds.p0):
        values.setdefault(int(j) + offset, 0)
    return PartialAssignment(values)


def bump_threshold(thresholds: Thresholds, step: float = 0.1) -> Thresholds:
    # 12-decimal rounding keeps 0.7 + 3 steps at exactly 1.0
    return Thresholds(p0=thresholds.p0, p1=min(1.0, round(thresholds.p1 + step, 12)))


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------

def class_accuracy(probs, labels, mask=None) -> tuple[float, float]:
    """(Acc_0, Acc_1) with predictions rounded at 0.5; NaN for an absent class."""
    probs = np.asarray(probs, dtype=float).ravel()
    labels = np.asarray(labels).ravel()
    mask = np.ones(probs.shape, dtype=bool) if mask is None else np.asarray(mask, dtype=bool).ravel()
    predicted = probs >= 0.5
    zeros = mask & (labels == 0)
    ones = mask & (labels == 1)
    acc0 = float((~predicted[zeros]).mean()) if zeros.any() else float("nan")
    acc1 = float(predicted[ones].mean()) if ones.any() else float("nan")
    return acc0, acc1


def average_precision(scores, labels) -> float:
    """Step-wise AP: mean precision at the rank of every positive."""
    scores = np.asarray(scores, dtype=float).ravel()
    labels = np.asarray(labels).ravel().astype(bool)
    positives = int(labels.sum())
    if positives == 0:
        return float("nan")
    order = np.argsort(-scores, kind="stable")
    hits = labels[order]
    precision = np.cumsum(hits) / np.arange(1, len(hits) + 1)
    return float(precision[hits].sum() / positives)


def mean_average_precision(probs, labels, mask=None) -> float:
    """Macro mean over both classes; class 0 is scored with 1 - y_hat."""
    probs = np.asarray(probs, dtype=float).ravel()
    labels = np.asarray(labels).ravel()
    mask = np.ones(probs.shape, dtype=bool) if mask is None else np.asarray(mask, dtype=bool).ravel()
    ap1 = average_precision(probs[mask], labels[mask] == 1)
    ap0 = average_precision(1.0 - probs[mask], labels[mask] == 0)
    return float(np.nanmean([ap0, ap1]))


# ---------------------------------------------------------------------------
# Persistence
# ---------------------------------------------------------------------------

def save_model(path: str | Path, model: SurrogateModel) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save({
        "format_version": MODEL_FORMAT_VERSION,
        "spec": asdict(model.spec),
        "state_dict": model.net.state_dict(),
        "stats": model.stats.to_dict(),
        "e_max": model.e_max,
        "d_ev": model.d_ev,
        "buses": model.buses,
        "timesteps": model.timesteps,
        "thresholds": None if model.thresholds is None else asdict(model.thresholds),
        "history": model.history,
    }, path)
    return path


def load_model(path: str | Path) -> SurrogateModel:
    payload = torch.load(Path(path), map_location="cpu")
    if payload.get("format_version") != MODEL_FORMAT_VERSION:
        raise SurrogateError(f"unsupported model format {payload.get('format_version')}")
    spec_data = dict(payload["spec"])
    spec_data["channels"] = tuple(spec_data["channels"])
    spec = LayerSpec(**spec_data)
    e_max, d_ev, buses, timesteps = payload["e_max"], payload["d_ev"], payload["buses"], payload["timesteps"]
    net = ConvClassifier(1 + 2 * buses + e_max, timesteps, e_max * d_ev, spec)
    net.load_state_dict(payload["state_dict"])
    net.eval()
    thresholds = Thresholds(**payload["thresholds"]) if payload.get("thresholds") else None
    return SurrogateModel(net=net, spec=spec, stats=NormStats.from_dict(payload["stats"]), e_max=e_max,
                          d_ev=d_ev, buses=buses, timesteps=timesteps, thresholds=thresholds,
                          history=list(payload.get("history", [])))
