"""Token counting for the caption budget, matched to the embedding backend family."""
from typing import Protocol

from app.exceptions import CaptionError


class Tokenizer(Protocol):
    name: str

    def count(self, text: str) -> int: ...

    def truncate(self, text: str, limit: int) -> str: ...


class WhitespaceTokenizer:
    name = "whitespace"

    def count(self, text: str) -> int:
        return len(text.split())

    def truncate(self, text: str, limit: int) -> str:
        return " ".join(text.split()[:limit])


class ClipBpeTokenizer:
    """CLIP byte-pair tokenizer; counts exclude the start/end markers."""

    name = "bpe"

    def __init__(self):
        try:
            from open_clip.tokenizer import SimpleTokenizer
        except ImportError as exc:
            raise CaptionError(None, "the bpe tokenizer needs the open_clip package") from exc
        self._tokenizer = SimpleTokenizer()

    def count(self, text: str) -> int:
        if not text.strip():
            return 0
        return len(self._tokenizer.encode(text))

    def truncate(self, text: str, limit: int) -> str:
        words = text.split()
        lo, hi = 0, len(words)
        while lo < hi:
            mid = (lo + hi + 1) // 2
            if self.count(" ".join(words[:mid])) <= limit:
                lo = mid
            else:
                hi = mid - 1
        return " ".join(words[:lo])


def get_tokenizer(name: str) -> Tokenizer:
    if name == "whitespace":
        return WhitespaceTokenizer()
    if name == "bpe":
        return ClipBpeTokenizer()
    raise CaptionError(None, f"unknown tokenizer '{name}'")


def token_count(text: str, tokenizer: Tokenizer) -> int:
    try:
        return tokenizer.count(text)
    except CaptionError:
        raise
    except Exception as exc:
        raise CaptionError(None, f"tokenizer '{tokenizer.name}' failed: {exc}") from exc
