import asyncio
import json

import pytest
from pydantic import ValidationError

from app.captions import (CaptionCache, CaptionPipeline, caption_stats, class_names_from_mask, load_bank,
                          store_bank)
from app.clients import GroundedMockLlm, TemplateMockVlm, mentioned_classes
from app.exceptions import BankFormatError, CaptionError, ProviderError
from app.scene_synth import build_dataset
from app.schemas import MAX_CAPTION_TOKENS, CaptionRecord, DomainShift
from app.tokenizers import WhitespaceTokenizer


class FlakyVlm(TemplateMockVlm):
    """Fails the first ``failures`` requests with a provider error."""

    provider_id = "flaky-vlm"

    def __init__(self, class_set, failures):
        super().__init__(class_set)
        self.failures = failures

    async def chat(self, messages):
        if self.failures > 0:
            self.failures -= 1
            raise ProviderError("503 service unavailable")
        return await super().chat(messages)


class VerboseLlm(GroundedMockLlm):
    """Never condenses: every answer runs 120 tokens."""

    provider_id = "verbose-llm"

    async def chat(self, messages):
        return " ".join(["sidewalk"] * 120)


def run_pipeline(samples, class_names, class_set, cache_uri, vlm=None, llm=None, retry_budget=3,
                 refine=True, refine_attempts=3):
    async def go():
        async with CaptionCache(cache_uri) as cache:
            pipeline = CaptionPipeline(vlm or TemplateMockVlm(class_set), llm or GroundedMockLlm(class_set),
                                       WhitespaceTokenizer(), cache, class_set, retry_budget=retry_budget,
                                       refine_attempts=refine_attempts, backoff=0.0)
            records = await pipeline.caption_samples(samples, class_names, refine=refine)
            return records, pipeline
    return asyncio.run(go())


@pytest.fixture
def source_samples(scene_spec):
    dataset = build_dataset(scene_spec, 60, 1, DomainShift())
    names = {s.id: class_names_from_mask(s.mask, scene_spec.class_set) for s in dataset.source}
    return dataset.source, names


def test_mock_captions_respect_budget_and_class_list(source_samples, class_set, cache_uri):
    samples, names = source_samples
    records, _ = run_pipeline(samples, names, class_set, cache_uri)
    assert [r.image_id for r in records] == sorted(s.id for s in samples)
    for record in records:
        assert record.provider == "template-mock"
        assert record.split == "source"
        assert record.refined_tokens <= MAX_CAPTION_TOKENS
        assert record.refined_tokens == len(record.refined_caption.split())
        assert set(mentioned_classes(record.refined_caption, class_set)) <= set(record.class_names)
    stats = caption_stats(records)
    assert stats.mean_raw_tokens > MAX_CAPTION_TOKENS >= stats.mean_refined_tokens


def test_two_hundred_captions_respect_budget(scene_spec, class_set, cache_uri):
    dataset = build_dataset(scene_spec, 200, 1, DomainShift())
    names = {s.id: class_names_from_mask(s.mask, scene_spec.class_set) for s in dataset.source}
    records, _ = run_pipeline(dataset.source, names, class_set, cache_uri)
    assert len(records) == 200
    assert all(r.refined_tokens <= MAX_CAPTION_TOKENS for r in records)
    assert all(set(mentioned_classes(r.refined_caption, class_set)) <= set(r.class_names) for r in records)
    stats = caption_stats(records)
    assert stats.mean_raw_tokens > MAX_CAPTION_TOKENS >= stats.mean_refined_tokens


def test_refinement_falls_back_to_truncation(source_samples, class_set, cache_uri):
    samples, names = source_samples
    records, pipeline = run_pipeline(samples[:1], names, class_set, cache_uri, llm=VerboseLlm(class_set),
                                     refine_attempts=2)
    record = records[0]
    assert record.truncated
    assert record.refined_tokens == MAX_CAPTION_TOKENS
    assert record.refined_caption == " ".join(["sidewalk"] * MAX_CAPTION_TOKENS)
    assert pipeline.attempts[("verbose-llm", samples[0].id)] == 2


def test_refine_caption_reports_attempts(source_samples, class_set, cache_uri):
    samples, names = source_samples
    drafts, _ = run_pipeline(samples[:1], names, class_set, cache_uri, refine=False)

    async def go():
        async with CaptionCache(cache_uri) as cache:
            pipeline = CaptionPipeline(TemplateMockVlm(class_set), VerboseLlm(class_set), WhitespaceTokenizer(),
                                       cache, class_set, refine_attempts=2, backoff=0.0)
            return await pipeline.refine_caption(drafts[0])

    refinement = asyncio.run(go())
    assert refinement.truncated and refinement.attempts == 2
    assert refinement.tokens == MAX_CAPTION_TOKENS


def test_cached_rerun_makes_no_provider_calls(source_samples, class_set, cache_uri):
    samples, names = source_samples
    first, pipeline = run_pipeline(samples[:5], names, class_set, cache_uri)
    assert pipeline.client_calls > 0
    second, pipeline = run_pipeline(samples[:5], names, class_set, cache_uri)
    assert pipeline.client_calls == 0
    assert pipeline.cache.hits > 0 and pipeline.cache.misses == 0
    assert [r.model_dump() for r in second] == [r.model_dump() for r in first]


def test_target_prompts_do_not_list_classes(scene_spec, class_set, cache_uri):
    dataset = build_dataset(scene_spec, 1, 2, DomainShift(brightness_scale=0.9))
    records, _ = run_pipeline(dataset.target, {s.id: None for s in dataset.target}, class_set, cache_uri)
    assert all(r.split == "target" and r.class_names == [] for r in records)
    assert all(r.refined_tokens <= MAX_CAPTION_TOKENS for r in records)


def test_provider_errors_are_retried(source_samples, class_set, cache_uri):
    samples, names = source_samples
    records, pipeline = run_pipeline(samples[:1], names, class_set, cache_uri,
                                     vlm=FlakyVlm(class_set, failures=2), refine=False)
    assert len(records) == 1
    assert pipeline.attempts[("flaky-vlm", samples[0].id)] == 3


def test_exhausted_retry_budget_names_the_image(source_samples, class_set, cache_uri):
    samples, names = source_samples
    with pytest.raises(CaptionError) as err:
        run_pipeline(samples[:1], names, class_set, cache_uri, vlm=FlakyVlm(class_set, failures=5))
    assert err.value.image_id == samples[0].id


def test_grounded_llm_drops_unlisted_classes(class_set):
    llm = GroundedMockLlm(class_set)
    description = ("The image shows sky and car. The sky covers about 60 percent of the image in the top center "
                   "area. A car is next to sky.")
    text = llm.condense(description, ["sky"], level=0)
    assert text == "The image shows sky. The sky is top center."


def test_bank_round_trip_and_errors(source_samples, class_set, cache_uri, tmp_path):
    samples, names = source_samples
    records, _ = run_pipeline(samples[:3], names, class_set, cache_uri)
    path = store_bank(reversed(records), tmp_path / "captions.jsonl")
    assert load_bank(path) == records

    lines = path.read_text().splitlines()
    broken = tmp_path / "broken.jsonl"
    broken.write_text("\n".join([lines[0], lines[1][:20], lines[2]]) + "\n")
    with pytest.raises(BankFormatError) as err:
        load_bank(broken)
    assert err.value.line == 2

    duplicated = tmp_path / "dup.jsonl"
    duplicated.write_text("\n".join([lines[0], lines[0]]) + "\n")
    with pytest.raises(BankFormatError) as err:
        load_bank(duplicated)
    assert err.value.line == 2

    over = json.loads(lines[0])
    over["refined_tokens"] = MAX_CAPTION_TOKENS + 1
    too_long = tmp_path / "long.jsonl"
    too_long.write_text(json.dumps(over) + "\n")
    with pytest.raises(BankFormatError):
        load_bank(too_long)


def test_bank_class_names_must_belong_to_the_class_set(source_samples, class_set, cache_uri, tmp_path):
    samples, names = source_samples
    records, _ = run_pipeline(samples[:2], names, class_set, cache_uri)
    path = store_bank(records, tmp_path / "captions.jsonl")
    assert load_bank(path, class_set) == records

    stray = records[1].model_dump(mode="json")
    stray["class_names"] = stray["class_names"] + ["bicycle"]
    with pytest.raises(ValidationError, match="bicycle"):
        CaptionRecord.model_validate(stray, context={"class_set": class_set})
    CaptionRecord.model_validate(stray)

    foreign = tmp_path / "foreign.jsonl"
    foreign.write_text("\n".join([records[0].model_dump_json(), json.dumps(stray)]) + "\n")
    assert len(load_bank(foreign)) == 2
    with pytest.raises(BankFormatError) as err:
        load_bank(foreign, class_set)
    assert err.value.line == 2

    repeated = records[0].model_dump(mode="json")
    repeated["class_names"] = ["sky", "sky"]
    with pytest.raises(ValidationError):
        CaptionRecord.model_validate(repeated)


def test_caption_stats_histograms(source_samples, class_set, cache_uri):
    samples, names = source_samples
    records, _ = run_pipeline(samples[:4], names, class_set, cache_uri)
    stats = caption_stats(records)
    assert sum(stats.histogram_raw) == sum(stats.histogram_refined) == 4
    assert stats.bin_edges[0] == 0 and stats.bin_edges[1] == 10
    with pytest.raises(CaptionError):
        caption_stats([])
