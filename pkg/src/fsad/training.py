"""End-to-end optimization of the reduction block and scoring head.

Training follows a fixed protocol: Adam, batches of 32 with the few
anomalous shots oversampled into every batch, early stopping on a small
validation holdout, and a binary checkpoint (raw float32 payload plus a
JSON manifest) that round-trips bit-identically.
"""

from __future__ import annotations

import csv
import json
import math
import warnings
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np
import torch

from .data import KShotSplit, load_images
from .exceptions import CheckpointError, ConfigError, ContractError, NumericError
from .metric import margin_loss, pair_distances, sample_pairs_distance_weighted
from .network import DetectionModel, build_model
from .objective import LossReport, entropy_loss, rectify_scores, total_loss

# Config-file key for the margin-loss weight ("margin_weight" attribute).
_LAMBDA_KEY = "lambda"
_EVAL_PAIR_SALT = 999331


@dataclass(frozen=True)
class TrainConfig:
    """Hyperparameters of one training run; serialized into checkpoints."""

    backbone: str = "tiny"
    backbone_weights: str = ""
    d_prime: int = 128
    temperature: float = 1.0
    top_h: int = 8
    margin_weight: float = 1.0
    mu: float = 0.2
    beta: float = 1.2
    negatives_per_anchor: int = 1
    lr: float = 1e-3
    batch_size: int = 32
    max_epochs: int = 200
    patience: int = 20
    sigma: float = 4.0
    seed: int = 0
    image_size: int = 224
    k: int = 8

    def __post_init__(self):
        positive = {
            "d_prime": self.d_prime,
            "temperature": self.temperature,
            "top_h": self.top_h,
            "mu": self.mu,
            "beta": self.beta,
            "negatives_per_anchor": self.negatives_per_anchor,
            "lr": self.lr,
            "batch_size": self.batch_size,
            "max_epochs": self.max_epochs,
            "image_size": self.image_size,
        }
        for name, value in positive.items():
            if value <= 0:
                raise ConfigError(f"{name} must be positive, got {value}")
        if self.margin_weight < 0:
            raise ConfigError(f"lambda must be >= 0, got {self.margin_weight}")
        if self.patience < 0:
            raise ConfigError(f"patience must be >= 0, got {self.patience}")
        if self.k < 0:
            raise ConfigError(f"k must be >= 0, got {self.k}")

    def to_dict(self) -> dict:
        d = {}
        for f in fields(self):
            key = _LAMBDA_KEY if f.name == "margin_weight" else f.name
            d[key] = getattr(self, f.name)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        kwargs = {}
        for key, value in d.items():
            name = "margin_weight" if key == _LAMBDA_KEY else key
            kwargs[name] = value
        return cls(**kwargs)


def build_model_from_config(config: TrainConfig, **overrides) -> DetectionModel:
    return build_model(
        backbone_kind=config.backbone,
        d_prime=config.d_prime,
        temperature=config.temperature,
        seed=config.seed,
        backbone_weights=config.backbone_weights or None,
        **overrides,
    )


@dataclass
class TrainResult:
    model: DetectionModel
    config: TrainConfig
    history: list[dict] = field(default_factory=list)
    best_epoch: int = 0
    best_val: float = math.inf
    checkpoint_path: Path | None = None
    log_path: Path | None = None


def _cached_features(model: DetectionModel, images: torch.Tensor, chunk: int = 32):
    """Backbone features for a whole set (backbone is frozen, so cache once)."""
    if images.shape[0] == 0:
        return None
    outs = []
    with torch.no_grad():
        for i in range(0, images.shape[0], chunk):
            outs.append(model.features(images[i : i + chunk]))
    return torch.cat(outs)


def _step_seed(seed: int, epoch: int, step: int) -> int:
    return int(np.random.SeedSequence((seed, epoch, step)).generate_state(1)[0])


def _epoch_batches(
    normal_idx: np.ndarray,
    anomaly_idx: np.ndarray,
    batch_size: int,
    rng: np.random.Generator,
) -> list[np.ndarray]:
    """Index batches for one epoch, oversampling the anomalous shots so every
    batch carries gradient signal for the anomaly term of the scoring loss."""
    n_total = len(normal_idx) + len(anomaly_idx)
    if n_total <= batch_size:
        return [np.concatenate([normal_idx, anomaly_idx])]
    anom_slots = max(1, batch_size // 8) if len(anomaly_idx) else 0
    norm_slots = max(1, batch_size - anom_slots)
    order = rng.permutation(normal_idx)
    batches = []
    for start in range(0, len(order), norm_slots):
        chunk = order[start : start + norm_slots]
        if len(anomaly_idx):
            picked = rng.choice(
                anomaly_idx,
                size=anom_slots,
                replace=len(anomaly_idx) < anom_slots,
            )
            chunk = np.concatenate([chunk, picked])
        batches.append(chunk)
    return batches


def _batch_loss(model, feats, labels_t, config: TrainConfig, pair_seed: int):
    """Forward pass through reduction + head and the joint loss."""
    z = model.reduce(feats)
    pooled, _ = model.score_stacks(z)
    l_entr = entropy_loss(rectify_scores(pooled[:, 1]), labels_t)
    labels_np = labels_t.detach().cpu().numpy().astype(np.int64)
    l_margin = torch.zeros((), dtype=pooled.dtype)
    if config.margin_weight > 0 and len(np.unique(labels_np)) > 1:
        emb = z.mean(dim=(-2, -1))
        pairs = sample_pairs_distance_weighted(
            emb.detach(),
            labels_np,
            per_anchor=config.negatives_per_anchor,
            seed=pair_seed,
        )
        if len(pairs):
            d = pair_distances(emb, pairs)
            l_margin = margin_loss(pairs, d, config.mu, config.beta)
    return total_loss(l_entr, l_margin, config.margin_weight), l_entr, l_margin


def evaluate_epoch(
    model: DetectionModel,
    images: torch.Tensor,
    labels,
    config: TrainConfig,
    features: torch.Tensor | None = None,
) -> LossReport:
    """Joint loss over a holdout in inference mode (no parameter updates,
    batch-norm running statistics)."""
    labels = np.asarray(labels).reshape(-1).astype(np.int64)
    if len(labels) == 0:
        warnings.warn("evaluate_epoch called with an empty holdout", stacklevel=2)
        return LossReport.compute(0.0, 0.0, config.margin_weight, 0)
    was_training = model.training
    model.eval()
    try:
        with torch.no_grad():
            feats = features if features is not None else _cached_features(model, images)
            labels_t = torch.as_tensor(labels, dtype=torch.float64)
            _, l_entr, l_margin = _batch_loss(
                model, feats, labels_t, config, _step_seed(config.seed, 0, _EVAL_PAIR_SALT)
            )
    finally:
        model.train(was_training)
    return LossReport.compute(
        float(l_entr), float(l_margin), config.margin_weight, len(labels)
    )


def split_validation(labels, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Deterministically carve a validation holdout: ~10% of the normals plus
    up to two anomalous shots. When at most two anomalies exist they stay in
    the training set as well (the anomaly term needs training signal)."""
    labels = np.asarray(labels).reshape(-1).astype(np.int64)
    normal_idx = np.flatnonzero(labels == 0)
    anom_idx = np.flatnonzero(labels == 1)
    rng = np.random.default_rng(np.random.SeedSequence((seed, 17)))
    n_val_norm = max(1, round(0.1 * len(normal_idx))) if len(normal_idx) > 1 else 0
    val_norm = np.sort(rng.choice(normal_idx, size=n_val_norm, replace=False))
    n_val_anom = min(2, len(anom_idx))
    val_anom = np.sort(rng.choice(anom_idx, size=n_val_anom, replace=False))
    val = np.concatenate([val_norm, val_anom])
    train_norm = np.setdiff1d(normal_idx, val_norm)
    train_anom = np.setdiff1d(anom_idx, val_anom)
    if len(anom_idx) and not len(train_anom):
        train_anom = anom_idx  # too few shots to hold any out exclusively
    train = np.concatenate([train_norm, train_anom])
    return train, val


def train_model(
    images: torch.Tensor,
    labels,
    config: TrainConfig,
    val_images: torch.Tensor | None = None,
    val_labels=None,
    model: DetectionModel | None = None,
    log_path: str | Path | None = None,
) -> TrainResult:
    """Optimize reduction + head on (images, labels) with early stopping.

    ``val_images`` defaults to a deterministic carve-out of the training set.
    The returned model carries the best-validation parameters.
    """
    labels = np.asarray(labels).reshape(-1).astype(np.int64)
    if images.shape[0] != len(labels):
        raise ContractError(f"{images.shape[0]} images but {len(labels)} labels")
    if not (labels == 1).any():
        raise ContractError(
            "training requires at least one anomalous image: the anomaly term "
            "of the scoring loss is undefined without one"
        )
    if not (labels == 0).any():
        raise ContractError("training requires at least one normal image")

    if val_images is None:
        train_sel, val_sel = split_validation(labels, config.seed)
        val_images, val_labels = images[val_sel], labels[val_sel]
        images, labels = images[train_sel], labels[train_sel]
    else:
        val_labels = np.asarray(val_labels).reshape(-1).astype(np.int64)

    torch.manual_seed(config.seed)
    if model is None:
        model = build_model_from_config(config)

    feats = _cached_features(model, images)
    val_feats = _cached_features(model, val_images)
    normal_idx = np.flatnonzero(labels == 0)
    anom_idx = np.flatnonzero(labels == 1)
    labels_t = torch.as_tensor(labels, dtype=torch.float64)

    optimizer = torch.optim.Adam(
        model.trainable_parameters(), lr=config.lr, betas=(0.9, 0.999)
    )

    def snapshot():
        return {k: v.detach().clone() for k, v in model.state_dict().items()}

    best_state = snapshot()
    last_finite_state = best_state
    best_val = math.inf
    best_epoch = 0
    bad_epochs = 0
    history: list[dict] = []
    diverged = False

    for epoch in range(1, config.max_epochs + 1):
        model.train()
        rng = np.random.default_rng(np.random.SeedSequence((config.seed, epoch)))
        batches = _epoch_batches(normal_idx, anom_idx, config.batch_size, rng)
        epoch_entropy, epoch_margin, epoch_total, n_seen = 0.0, 0.0, 0.0, 0
        for step, idx in enumerate(batches):
            optimizer.zero_grad()
            try:
                loss, l_entr, l_margin = _batch_loss(
                    model,
                    feats[idx],
                    labels_t[idx],
                    config,
                    _step_seed(config.seed, epoch, step),
                )
            except NumericError:
                loss = torch.tensor(math.nan)
            if not torch.isfinite(loss):
                warnings.warn(
                    f"non-finite loss at epoch {epoch}, step {step}; "
                    "aborting with the last finite parameters",
                    stacklevel=2,
                )
                diverged = True
                break
            loss.backward()
            optimizer.step()
            w = len(idx)
            epoch_entropy += float(l_entr.detach()) * w
            epoch_margin += float(l_margin.detach()) * w
            epoch_total += float(loss.detach()) * w
            n_seen += w
        if diverged:
            model.load_state_dict(last_finite_state)
            break

        train_report = LossReport.compute(
            epoch_entropy / n_seen,
            epoch_margin / n_seen,
            config.margin_weight,
            n_seen,
        )
        val_report = evaluate_epoch(
            model, val_images, val_labels, config, features=val_feats
        )
        history.append(
            {
                "epoch": epoch,
                "l_entr": train_report.entropy,
                "l_margin": train_report.margin,
                "L_total": train_report.total,
                "val_total": val_report.total,
            }
        )
        last_finite_state = snapshot()
        if val_report.n_items and val_report.total < best_val:
            best_val = val_report.total
            best_epoch = epoch
            best_state = last_finite_state
            bad_epochs = 0
        else:
            bad_epochs += 1
            if bad_epochs > config.patience:
                break

    model.load_state_dict(best_state)
    result = TrainResult(
        model=model,
        config=config,
        history=history,
        best_epoch=best_epoch,
        best_val=best_val,
    )
    if log_path is not None:
        result.log_path = write_training_log(history, log_path)
    return result


def write_training_log(history: list[dict], path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        writer = csv.DictWriter(
            fh, fieldnames=["epoch", "l_entr", "l_margin", "L_total", "val_total"]
        )
        writer.writeheader()
        writer.writerows(history)
    return path


def train_from_split(
    split: KShotSplit, config: TrainConfig, out_dir: str | Path | None = None
) -> TrainResult:
    """Load the split's images, train, and optionally write checkpoint + log."""
    records = list(split.train_normals) + list(split.train_anomalies)
    if not split.train_anomalies:
        raise ContractError(
            "training requires at least one anomalous shot (k >= 1): the "
            "anomaly term of the scoring loss is undefined without one"
        )
    images = load_images(records, split.root, config.image_size)
    labels = np.array([r.label for r in records], dtype=np.int64)
    log_path = Path(out_dir) / "train_log.csv" if out_dir is not None else None
    result = train_model(images, labels, config, log_path=log_path)
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        result.checkpoint_path = save_checkpoint(
            result.model,
            config,
            out_dir / "model.bin",
            epoch=result.best_epoch,
            best_val=result.best_val,
        )
    return result


# --- checkpoint serialization ------------------------------------------------

CHECKPOINT_FORMAT = "fsad-checkpoint"
CHECKPOINT_VERSION = 1


def _manifest_path(path: Path) -> Path:
    return path.with_suffix(".manifest.json")


def save_checkpoint(
    model: DetectionModel,
    config: TrainConfig,
    path: str | Path,
    epoch: int = 0,
    best_val: float = math.nan,
) -> Path:
    """Write raw little-endian float32 tensors plus a JSON manifest."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tensors = []
    payload = bytearray()
    state = model.state_dict()
    for name in sorted(state):
        t = state[name]
        if not torch.is_floating_point(t):
            continue  # integer bookkeeping buffers are reconstructible
        if t.dtype != torch.float32:
            raise ContractError(f"checkpoint tensors must be float32, got {t.dtype}")
        raw = t.detach().cpu().numpy().astype("<f4", copy=False).tobytes()
        tensors.append(
            {
                "name": name,
                "shape": list(t.shape),
                "dtype": "float32",
                "offset": len(payload),
                "nbytes": len(raw),
            }
        )
        payload.extend(raw)
    manifest = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "byte_order": "little",
        "epoch": int(epoch),
        "best_val": None if math.isnan(best_val) else float(best_val),
        "config": config.to_dict(),
        "payload_nbytes": len(payload),
        "tensors": tensors,
    }
    path.write_bytes(bytes(payload))
    _manifest_path(path).write_text(json.dumps(manifest, indent=2) + "\n")
    return path


def load_checkpoint(path: str | Path) -> tuple[DetectionModel, TrainConfig, dict]:
    """Rebuild a model from a checkpoint; bit-identical to what was saved."""
    path = Path(path)
    manifest_path = _manifest_path(path)
    if not path.is_file() or not manifest_path.is_file():
        raise CheckpointError(f"checkpoint or manifest missing at {path}")
    manifest = json.loads(manifest_path.read_text())
    if manifest.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"not a recognized checkpoint manifest: {manifest_path}")
    config = TrainConfig.from_dict(manifest["config"])
    payload = path.read_bytes()

    expected_end = 0
    for entry in manifest["tensors"]:
        if entry["offset"] != expected_end:
            raise CheckpointError(
                f"manifest offsets are not contiguous at tensor {entry['name']!r}"
            )
        expected_end += entry["nbytes"]
    if expected_end != len(payload) or expected_end != manifest["payload_nbytes"]:
        raise CheckpointError(
            f"payload size mismatch: manifest declares {expected_end} bytes, "
            f"file has {len(payload)}"
        )

    # Backbone weights live in the payload; do not re-read external files.
    config_for_build = replace(config, backbone_weights="")
    model = build_model_from_config(config_for_build)
    state = model.state_dict()
    new_state = dict(state)
    seen = set()
    for entry in manifest["tensors"]:
        name = entry["name"]
        if name not in state:
            raise ContractError(f"checkpoint tensor {name!r} not present in model")
        expected_shape = tuple(state[name].shape)
        if tuple(entry["shape"]) != expected_shape:
            raise ContractError(
                f"checkpoint tensor {name!r} has shape {tuple(entry['shape'])}, "
                f"model built from its config expects {expected_shape}"
            )
        arr = np.frombuffer(
            payload, dtype="<f4", count=entry["nbytes"] // 4, offset=entry["offset"]
        ).reshape(expected_shape)
        new_state[name] = torch.from_numpy(arr.copy())
        seen.add(name)
    missing = {
        k for k, v in state.items() if torch.is_floating_point(v) and k not in seen
    }
    if missing:
        raise CheckpointError(f"checkpoint is missing tensors: {sorted(missing)}")
    model.load_state_dict(new_state)
    model.eval()
    meta = {"epoch": manifest["epoch"], "best_val": manifest["best_val"]}
    return model, config, meta
