"""Text-side and feature-side [CLS] embeddings, plus the encoder registry.

Encoders are ``nn.Module``s mapping a list of strings to a ``(batch, hidden)``
tensor of first-token, last-layer states. Two kinds exist:

``StubEncoder``
    hashed-vocabulary single-layer transformer, seeded from its name, so that
    tests and the synthetic corpus run without downloaded weights.
``HFEncoder``
    thin wrapper over a Hugging Face ``AutoModel``.

Encoder names resolve through :data:`ENCODER_REGISTRY`; ``stub-<dim>`` builds a
stub of that width and anything else is handed to ``transformers``.
"""

from __future__ import annotations

import hashlib
import re
import zlib
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from torch import nn

from .errors import EmptyInput, EncoderLoadError, TokenizationError
from .extraction import FeatureSet

TEXT_SIDE = "text_side"
FEATURE_SIDE = "feature_side"

ENCODER_REGISTRY = {
    "detector-default": "GroNLP/hateBERT",
    "hatebert": "GroNLP/hateBERT",
    "feature-default": "bert-base-uncased",
    "bert-base-uncased": "bert-base-uncased",
    "alt-encoder": "roberta-base",
    "roberta-base": "roberta-base",
}
DEFAULT_MAX_TOKENS = 512


@dataclass(frozen=True)
class EncoderSpec:
    name: str
    trainable: bool = True
    max_tokens: int = DEFAULT_MAX_TOKENS
    pooling: str = "cls"

    def __post_init__(self):
        if self.pooling != "cls":
            raise ValueError("only first-token (cls) pooling is supported")
        if self.max_tokens < 2:
            raise ValueError("max_tokens must leave room for at least one token")


def text_side_spec(name: str, max_tokens: int = DEFAULT_MAX_TOKENS) -> EncoderSpec:
    return EncoderSpec(name, trainable=True, max_tokens=max_tokens)


def feature_side_spec(name: str, max_tokens: int = DEFAULT_MAX_TOKENS) -> EncoderSpec:
    return EncoderSpec(name, trainable=False, max_tokens=max_tokens)


@dataclass
class EmbeddingVector:
    values: torch.Tensor
    role: str

    def __post_init__(self):
        if self.role not in (TEXT_SIDE, FEATURE_SIDE):
            raise ValueError(f"unknown role {self.role!r}")
        if self.values.dim() != 1:
            raise ValueError("an EmbeddingVector is one-dimensional")
        if not torch.isfinite(self.values).all():
            raise ValueError("embedding has non-finite entries")

    @property
    def dim(self) -> int:
        return self.values.shape[0]


# --- encoders -------------------------------------------------------------------

_TOKEN_RE = re.compile(r"<\w+>|[\w*']+|[^\w\s]")
PAD_ID, CLS_ID = 0, 1


class StubEncoder(nn.Module):
    """Small deterministic transformer encoder with a hashed vocabulary."""

    def __init__(self, spec: EncoderSpec, hidden_size: int = 16, vocab_size: int = 4096, seed: int | None = None):
        super().__init__()
        self.spec = spec
        self.hidden_size = hidden_size
        self.vocab_size = vocab_size
        if seed is None:
            seed = zlib.crc32(spec.name.encode())
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            self.tok = nn.Embedding(vocab_size, hidden_size, padding_idx=PAD_ID)
            self.pos = nn.Embedding(spec.max_tokens, hidden_size)
            self.layer = nn.TransformerEncoderLayer(
                hidden_size, nhead=2 if hidden_size % 2 == 0 else 1,
                dim_feedforward=2 * hidden_size, dropout=0.0, batch_first=True,
            )
            self.norm = nn.LayerNorm(hidden_size)
            # a zero CLS input and small positions make the first-token state carry the content
            nn.init.normal_(self.pos.weight, std=0.02)
            with torch.no_grad():
                self.tok.weight[CLS_ID].zero_()

    def token_ids(self, text: str) -> list[int]:
        pieces = _TOKEN_RE.findall(text.lower())
        ids = [CLS_ID] + [2 + zlib.crc32(p.encode()) % (self.vocab_size - 2) for p in pieces]
        return ids[: self.spec.max_tokens]

    def forward(self, texts: Sequence[str]) -> torch.Tensor:
        if not texts:
            raise TokenizationError("empty batch")
        ids = [self.token_ids(t) for t in texts]
        width = max(map(len, ids))
        batch = torch.full((len(ids), width), PAD_ID, dtype=torch.long)
        for row, seq in enumerate(ids):
            batch[row, : len(seq)] = torch.tensor(seq)
        pad_mask = batch == PAD_ID
        x = self.tok(batch) + self.pos(torch.arange(width)).unsqueeze(0)
        x = self.layer(x, src_key_padding_mask=pad_mask)
        return self.norm(x[:, 0])


class HFEncoder(nn.Module):
    def __init__(self, spec: EncoderSpec, model_name: str):
        super().__init__()
        self.spec = spec
        self.model_name = model_name
        try:
            from transformers import AutoModel, AutoTokenizer

            self.tokenizer = AutoTokenizer.from_pretrained(model_name)
            self.model = AutoModel.from_pretrained(model_name)
        except Exception as exc:
            raise EncoderLoadError(f"cannot load encoder {model_name!r}: {exc}") from exc
        self.hidden_size = self.model.config.hidden_size

    def forward(self, texts: Sequence[str]) -> torch.Tensor:
        try:
            enc = self.tokenizer(
                list(texts), padding=True, truncation="longest_first",
                max_length=self.spec.max_tokens, return_tensors="pt",
            )
        except Exception as exc:
            raise TokenizationError(str(exc)) from exc
        device = next(self.model.parameters()).device
        out = self.model(**{k: v.to(device) for k, v in enc.items()})
        return out.last_hidden_state[:, 0]


def load_encoder(spec: EncoderSpec) -> nn.Module:
    """Build the encoder a spec names. Feature-side encoders come back frozen."""
    m = re.fullmatch(r"stub-(\d+)", spec.name)
    if m:
        encoder = StubEncoder(spec, hidden_size=int(m.group(1)))
    else:
        name = ENCODER_REGISTRY.get(spec.name, spec.name)
        if not (Path(name).exists() or "/" in name or name in ENCODER_REGISTRY.values()):
            raise EncoderLoadError(f"unknown encoder {spec.name!r}")
        encoder = HFEncoder(spec, name)
    if not spec.trainable:
        freeze(encoder)
    return encoder


def freeze(encoder: nn.Module) -> nn.Module:
    encoder.requires_grad_(False)
    encoder.eval()
    return encoder


def parameter_digest(module: nn.Module) -> str:
    """sha256 over every parameter and buffer: names, dtypes, shapes, raw bytes."""
    h = hashlib.sha256()
    for name, tensor in sorted(module.state_dict().items()):
        t = tensor.detach().cpu().contiguous()
        h.update(f"{name}|{t.dtype}|{tuple(t.shape)}|".encode())
        h.update(t.numpy().tobytes() if t.dtype != torch.bfloat16 else t.float().numpy().tobytes())
    return h.hexdigest()


# --- encoding ops -----------------------------------------------------------------

def encode_text(text: str, encoder: nn.Module) -> EmbeddingVector:
    if not text or not text.strip():
        raise EmptyInput("cannot encode blank text")
    return EmbeddingVector(encoder([text])[0], TEXT_SIDE)


def serialize_features(fs: FeatureSet) -> str:
    if fs.non_hateful:
        return "non-hateful"

    def part(items, sep):
        return sep.join(items) if items else "none"

    return (
        f"rationales: {part(fs.rationales, '; ')}"
        f" | derogatory: {part(fs.derogatory_language, ', ')}"
        f" | cuss words: {part(fs.cuss_words, ', ')}"
    )


def encode_feature_texts(texts: Sequence[str], encoder: nn.Module) -> torch.Tensor:
    if getattr(encoder.spec, "trainable", False) or any(p.requires_grad for p in encoder.parameters()):
        raise ValueError("feature-side encoder must be frozen")
    was_training = encoder.training
    encoder.eval()
    try:
        with torch.no_grad():
            return encoder(list(texts))
    finally:
        encoder.train(was_training)


def encode_features(fs: FeatureSet, encoder: nn.Module) -> EmbeddingVector:
    return EmbeddingVector(encode_feature_texts([serialize_features(fs)], encoder)[0], FEATURE_SIDE)


def feature_digest(encoder_name: str, feature_text: str) -> str:
    return hashlib.sha256(f"{encoder_name}\x00{feature_text}".encode()).hexdigest()


class FeatureEmbeddingCache:
    """float32 feature-side vectors in one ``.npz`` keyed by feature digest."""

    def __init__(self, path):
        self.path = Path(path)
        self._vectors: dict[str, np.ndarray] = {}
        if self.path.exists():
            with np.load(self.path) as data:
                self._vectors = {k: data[k] for k in data.files}

    def __len__(self):
        return len(self._vectors)

    def get(self, key: str) -> np.ndarray | None:
        return self._vectors.get(key)

    def put(self, key: str, vector) -> None:
        self._vectors[key] = np.asarray(vector, dtype=np.float32)

    def save(self) -> Path:
        self.path.parent.mkdir(parents=True, exist_ok=True)
        tmp = self.path.with_name(self.path.name + ".tmp.npz")
        np.savez(tmp, **self._vectors)
        tmp.replace(self.path)
        return self.path


def embed_feature_texts(texts: Sequence[str], encoder: nn.Module, cache: FeatureEmbeddingCache | None = None,
                        batch_size: int = 64) -> torch.Tensor:
    """Feature-side embeddings for many texts, reusing cached vectors when given a cache."""
    out: list[torch.Tensor | None] = [None] * len(texts)
    todo = []
    for i, t in enumerate(texts):
        hit = cache.get(feature_digest(encoder.spec.name, t)) if cache is not None else None
        if hit is not None:
            out[i] = torch.from_numpy(hit)
        else:
            todo.append(i)
    unique = list(dict.fromkeys(texts[i] for i in todo))
    computed = {}
    for start in range(0, len(unique), batch_size):
        chunk = unique[start: start + batch_size]
        for t, v in zip(chunk, encode_feature_texts(chunk, encoder)):
            computed[t] = v
    for i in todo:
        v = computed[texts[i]]
        if cache is not None:
            cache.put(feature_digest(encoder.spec.name, texts[i]), v.numpy())
            v = torch.from_numpy(cache.get(feature_digest(encoder.spec.name, texts[i])))
        out[i] = v
    if not out:
        return torch.empty(0, getattr(encoder, "hidden_size", 0))
    return torch.stack(out)
