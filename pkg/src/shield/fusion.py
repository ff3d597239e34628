"""Embedding fusion, the MLP head, BCE training and accuracy evaluation."""

from __future__ import annotations

import copy
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import torch
from torch import nn

from .datasets import Post, preprocess_text
from .embedding import (
    FEATURE_SIDE,
    TEXT_SIDE,
    EmbeddingVector,
    FeatureEmbeddingCache,
    embed_feature_texts,
    feature_side_spec,
    freeze,
    load_encoder,
    parameter_digest,
    serialize_features,
    text_side_spec,
)
from .errors import DimMismatch, DivergenceError, EmptyBatch, LengthMismatch, MissingFeatures, RoleError
from .extraction import FeatureSet

logger = logging.getLogger(__name__)

EPS = 1e-7


@dataclass
class TrainConfig:
    learning_rate: float = 2e-5
    weight_decay: float = 0.01
    batch_size: int = 16
    epochs: int = 3
    seed: int = 13
    decision_threshold: float = 0.5
    hidden_dim: int = 256
    hsd_encoder: str = "detector-default"
    fe_encoder: str = "feature-default"
    max_tokens: int = 512
    max_steps: int | None = None

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if self.batch_size < 1:
            raise ValueError("batch_size must be at least 1")
        if self.epochs < 0:
            raise ValueError("epochs must be non-negative")
        if not 0.0 < self.decision_threshold < 1.0:
            raise ValueError("decision_threshold must lie in (0, 1)")


@dataclass
class TrainReport:
    train_loss: list[float] = field(default_factory=list)
    val_accuracy: list[float] = field(default_factory=list)
    best_epoch: int | None = None
    best_checkpoint: str | None = None
    steps: int = 0
    fe_digest_before: str = ""
    fe_digest_after: str = ""


def _concat(h_text: torch.Tensor, h_feat: torch.Tensor) -> torch.Tensor:
    return torch.cat([h_text, h_feat], dim=-1)


def fuse_embeddings(h_text: EmbeddingVector, h_feat: EmbeddingVector) -> torch.Tensor:
    """Text-first concatenation of one text-side and one feature-side embedding."""
    if h_text.role != TEXT_SIDE or h_feat.role != FEATURE_SIDE:
        raise RoleError(f"expected ({TEXT_SIDE}, {FEATURE_SIDE}), got ({h_text.role}, {h_feat.role})")
    return _concat(h_text.values, h_feat.values)


class FusionHead(nn.Module):
    """input_dim -> hidden_dim -> ReLU -> 1 logit."""

    def __init__(self, input_dim: int, hidden_dim: int = 256, decision_threshold: float = 0.5):
        super().__init__()
        self.input_dim = input_dim
        self.hidden_dim = hidden_dim
        self.decision_threshold = decision_threshold
        self.fc1 = nn.Linear(input_dim, hidden_dim)
        self.act = nn.ReLU()
        self.fc2 = nn.Linear(hidden_dim, 1)

    def forward(self, combined: torch.Tensor) -> torch.Tensor:
        return self.fc2(self.act(self.fc1(combined))).squeeze(-1)


class FusionClassifier(nn.Module):
    """Trainable detector encoder + frozen feature encoder + MLP head."""

    def __init__(self, text_encoder: nn.Module, feature_encoder: nn.Module,
                 hidden_dim: int = 256, decision_threshold: float = 0.5):
        super().__init__()
        self.text_encoder = text_encoder
        self.feature_encoder = freeze(feature_encoder)
        self.head = FusionHead(text_encoder.hidden_size + feature_encoder.hidden_size,
                               hidden_dim, decision_threshold)

    @property
    def input_dim(self) -> int:
        return self.head.input_dim

    @property
    def decision_threshold(self) -> float:
        return self.head.decision_threshold

    def train(self, mode: bool = True):
        super().train(mode)
        self.feature_encoder.eval()
        return self

    def forward(self, texts: Sequence[str], feature_embeddings: torch.Tensor) -> torch.Tensor:
        h_text = self.text_encoder(list(texts))
        return self.head(_concat(h_text, feature_embeddings.to(h_text.dtype)))


def classify(combined: torch.Tensor, model) -> tuple[float, int]:
    head = getattr(model, "head", model)
    if combined.dim() != 1 or combined.shape[0] != head.input_dim:
        raise DimMismatch(f"expected a vector of length {head.input_dim}, got shape {tuple(combined.shape)}")
    with torch.no_grad():
        logit = head(combined.to(head.fc1.weight.dtype))
    prob = torch.sigmoid(logit).item()
    return prob, int(prob >= head.decision_threshold)


def bce_loss(probabilities, labels) -> torch.Tensor:
    """Mean binary cross-entropy over the batch with probabilities clamped to [EPS, 1-EPS]."""
    p = probabilities if torch.is_tensor(probabilities) else torch.tensor(probabilities, dtype=torch.float64)
    y = labels if torch.is_tensor(labels) else torch.tensor(labels, dtype=p.dtype)
    if p.numel() == 0:
        raise EmptyBatch("empty batch")
    if p.shape != y.shape:
        raise LengthMismatch(f"{tuple(p.shape)} probabilities vs {tuple(y.shape)} labels")
    p = p.clamp(EPS, 1 - EPS)
    y = y.to(p.dtype)
    return -(y * torch.log(p) + (1 - y) * torch.log1p(-p)).mean()


# --- training -------------------------------------------------------------------------

def build_classifier(config: TrainConfig) -> FusionClassifier:
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(config.seed)
        text_encoder = load_encoder(text_side_spec(config.hsd_encoder, config.max_tokens))
        feature_encoder = load_encoder(feature_side_spec(config.fe_encoder, config.max_tokens))
        return FusionClassifier(text_encoder, feature_encoder, config.hidden_dim, config.decision_threshold)


def _check_features(posts: Sequence[Post], features: Mapping[str, FeatureSet]):
    missing = [p.id for p in posts if p.id not in features]
    if missing:
        raise MissingFeatures(missing)


def _feature_matrix(model: FusionClassifier, posts, features, cache=None) -> torch.Tensor:
    texts = [serialize_features(features[p.id]) for p in posts]
    return embed_feature_texts(texts, model.feature_encoder, cache)


def predict_proba(model: FusionClassifier, posts: Sequence[Post], features: Mapping[str, FeatureSet],
                  batch_size: int = 64, feature_cache: FeatureEmbeddingCache | None = None) -> torch.Tensor:
    _check_features(posts, features)
    if not posts:
        return torch.empty(0)
    feats = _feature_matrix(model, posts, features, feature_cache)
    was_training = model.training
    model.eval()
    out = []
    try:
        with torch.no_grad():
            for start in range(0, len(posts), batch_size):
                chunk = posts[start: start + batch_size]
                logits = model([preprocess_text(p.text) for p in chunk], feats[start: start + batch_size])
                out.append(torch.sigmoid(logits))
    finally:
        model.train(was_training)
    return torch.cat(out)


def evaluate_accuracy(model: FusionClassifier, posts: Sequence[Post], features: Mapping[str, FeatureSet],
                      **kwargs) -> float:
    """Fraction of posts whose predicted label equals the gold label."""
    if not posts:
        raise ValueError("no posts to evaluate")
    probs = predict_proba(model, posts, features, **kwargs)
    preds = (probs >= model.decision_threshold).long()
    correct = sum(int(pred) == p.label for pred, p in zip(preds.tolist(), posts))
    return correct / len(posts)


def train(
    train_posts: Sequence[Post],
    val_posts: Sequence[Post],
    features: Mapping[str, FeatureSet],
    config: TrainConfig,
    *,
    model: FusionClassifier | None = None,
    checkpoint_dir=None,
    metrics_path=None,
    feature_cache: FeatureEmbeddingCache | None = None,
) -> tuple[FusionClassifier, TrainReport]:
    """Jointly fit the detector encoder and head; the feature encoder stays frozen.

    The returned model carries the weights of the epoch with the best
    validation accuracy (earliest on ties).
    """
    _check_features(list(train_posts) + list(val_posts), features)
    if model is None:
        model = build_classifier(config)
    report = TrainReport(fe_digest_before=parameter_digest(model.feature_encoder))

    train_posts = list(train_posts)
    feats = _feature_matrix(model, train_posts, features, feature_cache)
    if feature_cache is not None:
        feature_cache.save()
    labels = torch.tensor([p.label for p in train_posts], dtype=torch.float32)
    texts = [preprocess_text(p.text) for p in train_posts]

    trainable = [p for p in model.parameters() if p.requires_grad]
    optimizer = torch.optim.AdamW(trainable, lr=config.learning_rate, weight_decay=config.weight_decay)
    gen = torch.Generator().manual_seed(config.seed)
    best_acc, best_state = -1.0, None
    metrics_fh = None
    if metrics_path is not None:
        Path(metrics_path).parent.mkdir(parents=True, exist_ok=True)
        metrics_fh = open(metrics_path, "w", encoding="utf-8")

    try:
        for epoch in range(config.epochs):
            if config.max_steps is not None and report.steps >= config.max_steps:
                break
            model.train()
            order = torch.randperm(len(train_posts), generator=gen).tolist()
            total, seen = 0.0, 0
            for start in range(0, len(order), config.batch_size):
                if config.max_steps is not None and report.steps >= config.max_steps:
                    break
                idx = order[start: start + config.batch_size]
                logits = model([texts[i] for i in idx], feats[idx])
                loss = bce_loss(torch.sigmoid(logits), labels[idx])
                if not torch.isfinite(loss):
                    raise DivergenceError(f"non-finite loss at epoch {epoch}, step {report.steps}")
                optimizer.zero_grad()
                loss.backward()
                optimizer.step()
                report.steps += 1
                total += loss.item() * len(idx)
                seen += len(idx)
            report.train_loss.append(total / max(seen, 1))

            val_acc = evaluate_accuracy(model, val_posts, features, feature_cache=feature_cache) if val_posts else math.nan
            report.val_accuracy.append(val_acc)
            logger.info("epoch %d: train loss %.4f, val acc %.4f", epoch, report.train_loss[-1], val_acc)
            if metrics_fh is not None:
                metrics_fh.write(json.dumps({
                    "epoch": epoch, "train_loss": report.train_loss[-1], "val_accuracy": val_acc,
                    "steps": report.steps, "logged_at": time.time(),
                }) + "\n")
                metrics_fh.flush()
            if best_state is None or val_acc > best_acc or math.isnan(val_acc):
                best_acc, best_state, report.best_epoch = val_acc, copy.deepcopy(model.state_dict()), epoch
    finally:
        if metrics_fh is not None:
            metrics_fh.close()

    if best_state is not None:
        model.load_state_dict(best_state)
    model.eval()
    report.fe_digest_after = parameter_digest(model.feature_encoder)
    if report.fe_digest_after != report.fe_digest_before:
        raise AssertionError("feature encoder parameters changed during training")
    if checkpoint_dir is not None:
        report.best_checkpoint = str(save_checkpoint(model, config, checkpoint_dir, report))
    return model, report


# --- checkpoints ----------------------------------------------------------------------

def save_checkpoint(model: FusionClassifier, config: TrainConfig, directory, report: TrainReport | None = None) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    torch.save(model.state_dict(), directory / "model.pt")
    meta = {
        "train_config": asdict(config),
        "hsd_encoder": config.hsd_encoder,
        "fe_encoder": config.fe_encoder,
        "fe_digest": parameter_digest(model.feature_encoder),
        "input_dim": model.input_dim,
    }
    if report is not None:
        meta["val_accuracy"] = report.val_accuracy
        meta["best_epoch"] = report.best_epoch
    (directory / "checkpoint.json").write_text(json.dumps(meta, indent=2, sort_keys=True), encoding="utf-8")
    return directory


def load_checkpoint(directory) -> tuple[FusionClassifier, TrainConfig]:
    directory = Path(directory)
    meta = json.loads((directory / "checkpoint.json").read_text(encoding="utf-8"))
    config = TrainConfig(**meta["train_config"])
    model = build_classifier(config)
    model.load_state_dict(torch.load(directory / "model.pt", map_location="cpu", weights_only=True))
    freeze(model.feature_encoder)
    if parameter_digest(model.feature_encoder) != meta["fe_digest"]:
        raise ValueError(f"{directory}: feature encoder digest does not match the checkpoint record")
    model.eval()
    return model, config
