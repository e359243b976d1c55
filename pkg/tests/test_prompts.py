import pytest

from app.exceptions import CaptionError
from app.prompts import PromptTemplate, format_class_names, make_llm_prompt, make_vlm_prompt
from app.tokenizers import WhitespaceTokenizer, get_tokenizer, token_count


def test_vlm_prompt_lists_classes():
    prompt = make_vlm_prompt(["sky", "road"])
    assert "['sky', 'road']" in prompt
    assert prompt.startswith("Describe the image in detail for semantic segmentation tasks.")
    assert "{" not in prompt


def test_target_prompt_has_no_class_list():
    assert "CLASS_NAMES" not in make_vlm_prompt(None)
    assert "[" not in make_vlm_prompt(None)


def test_llm_prompt_binds_caption_and_system_text():
    system, user = make_llm_prompt(["car"], "A car is parked on the road.")
    assert "refining and condensing" in system
    assert user.endswith("The description is A car is parked on the road.")
    assert "['car']" in user


def test_bound_values_are_not_rescanned():
    _, user = make_llm_prompt(["sky"], "text with {CLASS_NAMES} and {braces}")
    assert user.endswith("text with {CLASS_NAMES} and {braces}")


def test_unbound_placeholder_is_an_error():
    with pytest.raises(CaptionError, match="VLM_CAPTION"):
        PromptTemplate("", "caption: {VLM_CAPTION}").render()


def test_empty_inputs_are_rejected():
    with pytest.raises(CaptionError):
        make_vlm_prompt([])
    with pytest.raises(CaptionError):
        make_llm_prompt(["sky"], "   ")


def test_format_class_names():
    assert format_class_names(["sky"]) == "['sky']"


def test_whitespace_tokenizer():
    tokenizer = get_tokenizer("whitespace")
    assert isinstance(tokenizer, WhitespaceTokenizer)
    assert tokenizer.count("  a road  next to sky ") == 5
    assert tokenizer.truncate("one two three four", 2) == "one two"
    with pytest.raises(CaptionError):
        get_tokenizer("sentencepiece")


class BrokenTokenizer:
    name = "broken"

    def count(self, text):
        raise RuntimeError("vocabulary missing")


def test_token_count_wraps_tokenizer_failures():
    assert token_count("a road", WhitespaceTokenizer()) == 2
    with pytest.raises(CaptionError, match="broken"):
        token_count("a road", BrokenTokenizer())


def test_bpe_tokenizer_counts_without_markers():
    pytest.importorskip("open_clip")
    tokenizer = get_tokenizer("bpe")
    assert tokenizer.count("") == 0
    assert tokenizer.count("a photo of a car") == 5
    long_text = " ".join(["sidewalk"] * 100)
    assert tokenizer.count(tokenizer.truncate(long_text, 77)) <= 77
