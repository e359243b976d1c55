"""Caption generation, refinement, the caption bank and its token statistics."""
import asyncio
import hashlib
import logging
import os
from collections import Counter
from dataclasses import dataclass
from datetime import datetime, timezone
from pathlib import Path
from typing import Dict, Iterable, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np
from pydantic import ValidationError
from sqlalchemy import select
from sqlalchemy.exc import IntegrityError
from tqdm import tqdm

from app.clients import ChatClient, encode_png_b64
from app.config import Config
from app.database import create_cache_engine, create_tables, session_factory
from app.exceptions import BankFormatError, CaptionError, ProviderError
from app.models import CachedResponse
from app.prompts import BREVITY_RETRY, make_llm_prompt, make_vlm_prompt
from app.scene_synth import SegSample
from app.schemas import MAX_CAPTION_TOKENS, CaptionRecord, ChatMessage
from app.tokenizers import Tokenizer, token_count

logger = logging.getLogger(__name__)

HISTOGRAM_BIN_WIDTH = 10
HISTOGRAM_RANGE = 300


def cache_key(image_id: str, prompt: str, provider_id: str) -> str:
    payload = "\x1f".join((image_id, prompt, provider_id))
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()


def class_names_from_mask(mask: np.ndarray, class_set: List[str]) -> List[str]:
    ignore_index = len(class_set)
    ids = np.unique(mask[mask != ignore_index]).tolist()
    return [class_set[i] for i in ids]


class CaptionCache:
    """Provider responses keyed by (image id, rendered prompt, provider id) in SQLite."""

    def __init__(self, uri: Optional[str] = None):
        self.engine = create_cache_engine(uri)
        self.async_session = session_factory(self.engine)
        self.hits = 0
        self.misses = 0
        self._write_lock = asyncio.Lock()

    async def __aenter__(self) -> "CaptionCache":
        await create_tables(self.engine)
        return self

    async def __aexit__(self, *exc_info):
        await self.engine.dispose()

    async def get(self, key: str) -> Optional[CachedResponse]:
        async with self.async_session() as session:
            result = await session.execute(select(CachedResponse).filter_by(cache_key=key))
            entry = result.scalars().first()
        if entry is None:
            self.misses += 1
        else:
            self.hits += 1
        return entry

    async def put(self, key: str, image_id: str, provider: str, response: str) -> CachedResponse:
        entry = CachedResponse(cache_key=key, image_id=image_id, provider=provider, response=response,
                               created_at=datetime.now(timezone.utc).replace(tzinfo=None))
        async with self._write_lock, self.async_session() as session:
            try:
                session.add(entry)
                await session.commit()
            except IntegrityError:
                # a concurrent duplicate request stored it first
                await session.rollback()
                result = await session.execute(select(CachedResponse).filter_by(cache_key=key))
                entry = result.scalars().first()
        return entry


class Refinement(NamedTuple):
    text: str
    tokens: int
    truncated: bool
    attempts: int


class CaptionPipeline:
    def __init__(self, vlm: ChatClient, llm: ChatClient, tokenizer: Tokenizer, cache: CaptionCache,
                 class_set: Sequence[str], retry_budget: int = Config.RETRY_BUDGET,
                 refine_attempts: int = 3, workers: int = Config.CAPTION_WORKERS,
                 backoff: float = Config.RETRY_BACKOFF):
        self.vlm = vlm
        self.llm = llm
        self.tokenizer = tokenizer
        self.cache = cache
        self.class_set = list(class_set)
        self.retry_budget = retry_budget
        self.refine_attempts = refine_attempts
        self.workers = workers
        self.backoff = backoff
        self.attempts: Counter = Counter()
        self.client_calls = 0
        self._stamps: Dict[str, datetime] = {}

    @property
    def provider(self) -> str:
        return "template-mock" if self.vlm.is_mock and self.llm.is_mock else "vlm+llm"

    def _count(self, text: str) -> int:
        return token_count(text, self.tokenizer)

    async def _call_with_retries(self, client: ChatClient, image_id: str, messages: List[ChatMessage]) -> str:
        failure = None
        for attempt in range(1, self.retry_budget + 1):
            self.attempts[(client.provider_id, image_id)] += 1
            self.client_calls += 1
            try:
                text = await client.chat(messages)
            except ProviderError as exc:
                failure = exc
                logger.warning("%s attempt %d/%d for %s failed: %s",
                               client.provider_id, attempt, self.retry_budget, image_id, exc)
                if attempt < self.retry_budget and self.backoff > 0:
                    await asyncio.sleep(self.backoff * 2 ** (attempt - 1))
                continue
            if not text or not text.strip():
                raise CaptionError(image_id, f"{client.provider_id} returned an empty response")
            return text.strip()
        raise CaptionError(image_id, f"{client.provider_id} failed after {self.retry_budget} attempts: {failure}")

    async def _cached_call(self, client: ChatClient, image_id: str,
                           messages: List[ChatMessage]) -> Tuple[str, datetime]:
        prompt = "\n".join(f"{m.role}: {m.content}" for m in messages)
        key = cache_key(image_id, prompt, client.provider_id)
        entry = await self.cache.get(key)
        if entry is None:
            text = await self._call_with_retries(client, image_id, messages)
            entry = await self.cache.put(key, image_id, client.provider_id, text)
        return entry.response, entry.created_at.replace(tzinfo=timezone.utc)

    async def generate_caption(self, image_id: str, image: np.ndarray,
                               class_names: Optional[List[str]]) -> str:
        """Raw VLM caption; ``class_names=None`` is the class-free target query."""
        prompt = make_vlm_prompt(class_names)
        messages = [ChatMessage(role="user", content=prompt, images=[encode_png_b64(image)])]
        text, stamp = await self._cached_call(self.vlm, image_id, messages)
        self._stamps[image_id] = stamp
        return text

    async def refine_caption(self, record: CaptionRecord) -> Refinement:
        if not record.raw_caption:
            raise CaptionError(record.image_id, "raw caption is not set")
        class_names = record.class_names if record.split == "source" else None
        try:
            system, user = make_llm_prompt(class_names, record.raw_caption)
        except CaptionError as exc:
            raise CaptionError(record.image_id, str(exc)) from exc

        messages = [ChatMessage(role="system", content=system), ChatMessage(role="user", content=user)]
        text = ""
        for attempt in range(1, self.refine_attempts + 1):
            if attempt > 1:
                messages = messages + [ChatMessage(role="assistant", content=text),
                                       ChatMessage(role="user", content=BREVITY_RETRY)]
            text, _ = await self._cached_call(self.llm, record.image_id, messages)
            tokens = self._count(text)
            if tokens <= MAX_CAPTION_TOKENS:
                return Refinement(text, tokens, False, attempt)
            logger.debug("refinement of %s has %d tokens (attempt %d)", record.image_id, tokens, attempt)

        try:
            clipped = self.tokenizer.truncate(text, MAX_CAPTION_TOKENS)
        except Exception as exc:
            raise CaptionError(record.image_id, f"tokenizer '{self.tokenizer.name}' failed: {exc}") from exc
        logger.warning("refinement of %s still over budget after %d attempts, truncated",
                       record.image_id, self.refine_attempts)
        return Refinement(clipped, self._count(clipped), True, self.refine_attempts)

    async def draft_record(self, sample: SegSample, class_names: Optional[List[str]]) -> CaptionRecord:
        raw = await self.generate_caption(sample.id, sample.image, class_names)
        try:
            return CaptionRecord.model_validate({
                "image_id": sample.id,
                "class_names": class_names or [],
                "raw_caption": raw,
                "raw_tokens": self._count(raw),
                "provider": self.provider,
                "split": "source" if class_names is not None else "target",
                "created_at": self._stamps[sample.id],
            }, context={"class_set": self.class_set})
        except ValidationError as exc:
            raise CaptionError(sample.id, f"invalid caption record: {exc.errors()[0]['msg']}") from exc

    async def complete_record(self, record: CaptionRecord) -> CaptionRecord:
        refinement = await self.refine_caption(record)
        return record.model_copy(update={
            "refined_caption": refinement.text,
            "refined_tokens": refinement.tokens,
            "truncated": refinement.truncated,
        })

    async def _bounded(self, jobs: Iterable, desc: str) -> List:
        gate = asyncio.Semaphore(self.workers)
        jobs = list(jobs)
        progress = tqdm(total=len(jobs), desc=desc, disable=len(jobs) < 2)

        async def run(job):
            async with gate:
                result = await job
            progress.update(1)
            return result

        try:
            return await asyncio.gather(*(run(job) for job in jobs))
        finally:
            progress.close()

    async def caption_samples(self, samples: Sequence[SegSample],
                              class_names: Dict[str, Optional[List[str]]], refine: bool = True) -> List[CaptionRecord]:
        drafts = await self._bounded((self.draft_record(s, class_names.get(s.id)) for s in samples), "captions")
        if refine:
            drafts = await self.refine_records(drafts)
        return sorted(drafts, key=lambda r: r.image_id)

    async def refine_records(self, records: Sequence[CaptionRecord]) -> List[CaptionRecord]:
        done = await self._bounded((self.complete_record(r) for r in records), "refine")
        return sorted(done, key=lambda r: r.image_id)


def store_bank(records: Iterable[CaptionRecord], path: Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    ordered = sorted(records, key=lambda r: r.image_id)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "w", encoding="utf-8") as handle:
        for record in ordered:
            handle.write(record.model_dump_json() + "\n")
    os.replace(tmp, path)
    return path


def load_bank(path: Path, class_set: Optional[Sequence[str]] = None) -> List[CaptionRecord]:
    """Read a JSONL caption bank; with ``class_set`` every record's class names must belong to it."""
    context = {"class_set": list(class_set)} if class_set is not None else None
    records, seen = [], set()
    with open(path, encoding="utf-8") as handle:
        for lineno, line in enumerate(handle, start=1):
            if not line.strip():
                continue
            try:
                record = CaptionRecord.model_validate_json(line, context=context)
            except ValidationError as exc:
                raise BankFormatError(f"malformed caption record ({exc.error_count()} errors)", line=lineno) from exc
            if record.image_id in seen:
                raise BankFormatError(f"duplicate image id '{record.image_id}'", line=lineno)
            seen.add(record.image_id)
            records.append(record)
    return sorted(records, key=lambda r: r.image_id)


@dataclass
class CaptionStats:
    mean_raw_tokens: float
    mean_refined_tokens: float
    histogram_raw: List[int]
    histogram_refined: List[int]
    bin_edges: List[int]

    def to_dict(self) -> dict:
        return {
            "mean_raw_tokens": self.mean_raw_tokens,
            "mean_refined_tokens": self.mean_refined_tokens,
            "histogram_raw": self.histogram_raw,
            "histogram_refined": self.histogram_refined,
            "bin_edges": self.bin_edges,
        }


def _histogram(values: np.ndarray, edges: np.ndarray) -> List[int]:
    # values past the range land in the last bin
    counts, _ = np.histogram(np.clip(values, 0, HISTOGRAM_RANGE - 1), bins=edges)
    return counts.astype(int).tolist()


def caption_stats(records: Sequence[CaptionRecord]) -> CaptionStats:
    if not records:
        raise CaptionError(None, "caption bank is empty")
    raw = np.asarray([r.raw_tokens for r in records], dtype=np.float64)
    refined = np.asarray([r.refined_tokens for r in records], dtype=np.float64)
    edges = np.arange(0, HISTOGRAM_RANGE + HISTOGRAM_BIN_WIDTH, HISTOGRAM_BIN_WIDTH)
    return CaptionStats(
        mean_raw_tokens=float(raw.mean()),
        mean_refined_tokens=float(refined.mean()),
        histogram_raw=_histogram(raw, edges),
        histogram_refined=_histogram(refined, edges),
        bin_edges=edges.tolist(),
    )
