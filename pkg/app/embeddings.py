"""Frozen text encoders and the binary embedding bank."""
import hashlib
import logging
import os
import re
import struct
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Protocol, Sequence

import httpx
import numpy as np

from app.config import Config
from app.data.data import CLASS_PROMPT_TEMPLATE
from app.exceptions import BankFormatError, EmbeddingError
from app.schemas import MAX_CAPTION_TOKENS, CaptionRecord, EmbedRequest, EmbedResponse, EmbeddingSettings
from app.tokenizers import Tokenizer

logger = logging.getLogger(__name__)

BANK_MAGIC = b"LDEB"
BANK_VERSION = 1
BANK_HEADER = struct.Struct("<4sIIQ40s4x")
ROW_ID_LENGTH = struct.Struct("<H")
_WORD = re.compile(r"[a-z0-9]+")


def caption_hash(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


@dataclass
class EmbeddingVector:
    values: np.ndarray
    backend_id: str
    caption_hash: str = ""

    def __post_init__(self):
        self.values = np.asarray(self.values)
        if self.values.ndim != 1:
            raise EmbeddingError(f"embedding must be a vector, got shape {self.values.shape}")
        if not np.isfinite(self.values).all():
            raise EmbeddingError("embedding holds non-finite entries")
        if not np.linalg.norm(self.values) > 0:
            raise EmbeddingError("embedding has zero norm")

    @property
    def dim(self) -> int:
        return int(self.values.shape[0])


class TextEncoder(Protocol):
    backend_id: str
    dim: int

    def encode(self, caption: str) -> EmbeddingVector: ...


class HashEncoder:
    """Sum of seeded per-token unit Gaussian directions, L2-normalised.

    Tokens are lowercase alphanumeric runs; the limit counts the same tokens that get hashed.
    """

    def __init__(self, dim: int = 512, seed: int = 0, max_tokens: int = MAX_CAPTION_TOKENS):
        self.dim = dim
        self.seed = seed
        self.max_tokens = max_tokens
        self.backend_id = f"hash:d{dim}:s{seed}"
        self._token_vector = lru_cache(maxsize=65536)(self._draw)

    def _draw(self, token: str) -> np.ndarray:
        digest = hashlib.sha256(f"{self.seed}:{token}".encode("utf-8")).digest()
        rng = np.random.default_rng(int.from_bytes(digest[:8], "little"))
        vector = rng.standard_normal(self.dim)
        vector /= np.linalg.norm(vector)
        vector.setflags(write=False)
        return vector

    def token_vector(self, token: str) -> np.ndarray:
        return self._token_vector(token)

    def tokens(self, caption: str) -> List[str]:
        return _WORD.findall(caption.lower())

    def encode(self, caption: str) -> EmbeddingVector:
        tokens = self.tokens(caption)
        if len(tokens) > self.max_tokens:
            raise EmbeddingError(f"caption has {len(tokens)} tokens, limit is {self.max_tokens}")
        if not tokens:
            raise EmbeddingError("caption has no encodable tokens")
        total = np.sum([self.token_vector(t) for t in tokens], axis=0)
        norm = np.linalg.norm(total)
        if norm == 0:
            raise EmbeddingError("token directions cancel to a zero vector")
        return EmbeddingVector(total / norm, self.backend_id, caption_hash(caption))


class EmbeddingBank:
    def __init__(self, backend_id: str, dim: int):
        if len(backend_id.encode("ascii")) > 40:
            raise EmbeddingError(f"backend id '{backend_id}' exceeds 40 bytes")
        self.backend_id = backend_id
        self.dim = dim
        self.entries: Dict[str, EmbeddingVector] = {}

    def __len__(self) -> int:
        return len(self.entries)

    def __contains__(self, image_id: str) -> bool:
        return image_id in self.entries

    def add(self, image_id: str, vector: EmbeddingVector):
        if vector.dim != self.dim:
            raise EmbeddingError(f"'{image_id}': dimension {vector.dim} does not match bank dimension {self.dim}")
        if vector.backend_id != self.backend_id:
            raise EmbeddingError(f"'{image_id}': backend '{vector.backend_id}' differs from '{self.backend_id}'")
        if image_id in self.entries:
            raise EmbeddingError(f"'{image_id}' is already in the bank")
        self.entries[image_id] = vector

    def get(self, image_id: str) -> EmbeddingVector:
        try:
            return self.entries[image_id]
        except KeyError:
            raise EmbeddingError(f"no embedding for image '{image_id}'") from None

    def matrix(self, image_ids: Sequence[str]) -> np.ndarray:
        return np.stack([self.get(i).values for i in image_ids]).astype(np.float64)

    def store(self, path: Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp = path.with_suffix(path.suffix + ".tmp")
        with open(tmp, "wb") as handle:
            handle.write(BANK_HEADER.pack(BANK_MAGIC, BANK_VERSION, self.dim, len(self.entries),
                                          self.backend_id.encode("ascii")))
            for image_id in sorted(self.entries):
                raw_id = image_id.encode("utf-8")
                handle.write(ROW_ID_LENGTH.pack(len(raw_id)))
                handle.write(raw_id)
                handle.write(np.asarray(self.entries[image_id].values, dtype="<f4").tobytes())
        os.replace(tmp, path)
        return path

    @classmethod
    def load(cls, path: Path) -> "EmbeddingBank":
        data = Path(path).read_bytes()
        if len(data) < BANK_HEADER.size:
            raise BankFormatError(f"{path}: truncated header")
        magic, version, dim, count, raw_backend = BANK_HEADER.unpack_from(data, 0)
        if magic != BANK_MAGIC:
            raise BankFormatError(f"{path}: not an embedding bank")
        if version != BANK_VERSION:
            raise BankFormatError(f"{path}: unsupported version {version}")
        bank = cls(raw_backend.rstrip(b"\x00").decode("ascii"), dim)
        offset, row_bytes = BANK_HEADER.size, dim * 4
        for row in range(count):
            if offset + ROW_ID_LENGTH.size > len(data):
                raise BankFormatError(f"{path}: truncated, header promises {count} rows but found {row}")
            (id_length,) = ROW_ID_LENGTH.unpack_from(data, offset)
            offset += ROW_ID_LENGTH.size
            if offset + id_length + row_bytes > len(data):
                raise BankFormatError(f"{path}: truncated, header promises {count} rows but found {row}")
            image_id = data[offset:offset + id_length].decode("utf-8")
            offset += id_length
            values = np.frombuffer(data, dtype="<f4", count=dim, offset=offset).copy()
            offset += row_bytes
            bank.add(image_id, EmbeddingVector(values, bank.backend_id))
        if offset != len(data):
            raise BankFormatError(f"{path}: {len(data) - offset} trailing bytes after {count} rows")
        return bank


class FileBackend:
    """Serves vectors exported from any pretrained encoder."""

    def __init__(self, bank: EmbeddingBank, records: Iterable[CaptionRecord] = ()):
        self.bank = bank
        self.dim = bank.dim
        self.backend_id = bank.backend_id
        self._by_caption = {caption_hash(r.refined_caption): r.image_id for r in records if r.refined_caption}

    def encode_by_id(self, image_id: str) -> EmbeddingVector:
        return self.bank.get(image_id)

    def encode(self, caption: str) -> EmbeddingVector:
        image_id = self._by_caption.get(caption_hash(caption))
        if image_id is None:
            raise EmbeddingError("caption is not covered by the embedding file")
        stored = self.bank.get(image_id)
        return EmbeddingVector(stored.values, stored.backend_id, caption_hash(caption))


class RemoteBackend:
    """POST {texts} -> {vectors} against a live encoder service."""

    def __init__(self, endpoint: str = Config.EMBED_ENDPOINT, dim: int = 512, backend_id: str = "remote",
                 tokenizer: Optional[Tokenizer] = None, max_tokens: int = MAX_CAPTION_TOKENS,
                 batch_size: int = 64, timeout: float = Config.REQUEST_TIMEOUT,
                 transport: Optional[httpx.BaseTransport] = None):
        self.endpoint = endpoint
        self.dim = dim
        self.backend_id = backend_id
        self.tokenizer = tokenizer
        self.max_tokens = max_tokens
        self.batch_size = batch_size
        self.timeout = timeout
        self.transport = transport
        self._cache: Dict[str, np.ndarray] = {}

    def _request(self, texts: List[str]) -> List[np.ndarray]:
        try:
            with httpx.Client(transport=self.transport, timeout=self.timeout) as client:
                response = client.post(self.endpoint, json=EmbedRequest(texts=texts).model_dump())
                response.raise_for_status()
        except httpx.HTTPError as exc:
            raise EmbeddingError(f"encoder service unavailable at {self.endpoint}: {exc}") from exc
        vectors = EmbedResponse.model_validate(response.json()).vectors
        if len(vectors) != len(texts):
            raise EmbeddingError(f"encoder returned {len(vectors)} vectors for {len(texts)} texts")
        return [np.asarray(v, dtype=np.float64) for v in vectors]

    def encode_many(self, captions: Sequence[str]) -> List[EmbeddingVector]:
        for caption in captions:
            if self.tokenizer is not None and self.tokenizer.count(caption) > self.max_tokens:
                raise EmbeddingError(f"caption exceeds {self.max_tokens} tokens")
        pending = list(dict.fromkeys(c for c in captions if c not in self._cache))
        for start in range(0, len(pending), self.batch_size):
            batch = pending[start:start + self.batch_size]
            for caption, vector in zip(batch, self._request(batch)):
                if vector.shape != (self.dim,):
                    raise EmbeddingError(f"encoder returned dimension {vector.shape[-1]}, expected {self.dim}")
                self._cache[caption] = vector
        return [EmbeddingVector(self._cache[c], self.backend_id, caption_hash(c)) for c in captions]

    def encode(self, caption: str) -> EmbeddingVector:
        return self.encode_many([caption])[0]


def get_encoder(settings: EmbeddingSettings, records: Iterable[CaptionRecord] = (),
                tokenizer: Optional[Tokenizer] = None, transport=None) -> TextEncoder:
    if settings.backend == "hash":
        return HashEncoder(dim=settings.dim, seed=settings.seed)
    if settings.backend == "file":
        if settings.path is None:
            raise EmbeddingError("the file backend needs embedding.path")
        return FileBackend(EmbeddingBank.load(settings.path), records)
    return RemoteBackend(dim=settings.dim, tokenizer=tokenizer, transport=transport)


def encode_records(records: Sequence[CaptionRecord], encoder: TextEncoder) -> EmbeddingBank:
    bank = EmbeddingBank(encoder.backend_id, encoder.dim)
    pending = []
    for record in records:
        if not record.completed:
            raise EmbeddingError(f"caption for '{record.image_id}' has not been refined")
        if isinstance(encoder, FileBackend):
            bank.add(record.image_id, encoder.encode_by_id(record.image_id))
        else:
            pending.append(record)
    if isinstance(encoder, RemoteBackend):
        vectors = encoder.encode_many([r.refined_caption for r in pending])
    else:
        vectors = [encoder.encode(r.refined_caption) for r in pending]
    for record, vector in zip(pending, vectors):
        bank.add(record.image_id, vector)
    logger.info("Encoded %d captions with %s", len(bank), encoder.backend_id)
    return bank


def class_prompt_matrix(class_set: Sequence[str], encoder: TextEncoder) -> np.ndarray:
    """One ``a photo of a {class}`` embedding per class, rows in class-id order."""
    return np.stack([encoder.encode(CLASS_PROMPT_TEMPLATE.format(class_name=c)).values for c in class_set])


def class_prompt_bank(records: Sequence[CaptionRecord], class_set: Sequence[str],
                      encoder: TextEncoder) -> EmbeddingBank:
    """Per-image mean of the class prompts of the classes present, standing in for captions."""
    prompts = class_prompt_matrix(class_set, encoder)
    bank = EmbeddingBank(encoder.backend_id, encoder.dim)
    for record in records:
        ids = [class_set.index(name) for name in record.class_names]
        if not ids:
            raise EmbeddingError(f"'{record.image_id}' lists no classes for class prompts")
        text = ". ".join(CLASS_PROMPT_TEMPLATE.format(class_name=class_set[i]) for i in ids)
        bank.add(record.image_id, EmbeddingVector(prompts[ids].mean(axis=0), encoder.backend_id, caption_hash(text)))
    return bank
