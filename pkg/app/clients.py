"""Chat providers for caption generation and refinement: HTTP clients and offline mocks."""
import base64
import io
import re
from ast import literal_eval
from typing import List, Optional, Protocol

import httpx
import numpy as np
from PIL import Image

from app.config import Config
from app.exceptions import CaptionError, ProviderError
from app.prompts import BREVITY_RETRY
from app.scene_synth import decode_palette, template_caption
from app.schemas import ChatMessage, ChatRequest, ChatResponse

_CLASS_LIST = re.compile(r"class names? (\[[^\]]*\])")
_DESCRIPTION = re.compile(r"The description is (.*)\Z", re.DOTALL)
_LOCATION = re.compile(r"The ([^.]+?) covers about \d+ percent of the image in the (\w+) (\w+) area")
_ADJACENCY = re.compile(r"\bA ([^.]+?) is next to ([^.]+?)\.")


class ChatClient(Protocol):
    provider_id: str
    is_mock: bool

    async def chat(self, messages: List[ChatMessage]) -> str: ...


def encode_png_b64(image: np.ndarray) -> str:
    pixels = np.clip(np.round(image.transpose(1, 2, 0) * 255.0), 0, 255).astype(np.uint8)
    buffer = io.BytesIO()
    Image.fromarray(pixels).save(buffer, format="PNG")
    return base64.b64encode(buffer.getvalue()).decode("ascii")


def decode_png_b64(data: str) -> np.ndarray:
    with Image.open(io.BytesIO(base64.b64decode(data))) as img:
        return np.asarray(img.convert("RGB"), dtype=np.float64).transpose(2, 0, 1) / 255.0


def mentioned_classes(text: str, class_names: List[str]) -> List[str]:
    """Class names that occur in ``text`` as whole words, plural 's' allowed."""
    found = []
    for name in class_names:
        if re.search(rf"\b{re.escape(name)}s?\b", text, flags=re.IGNORECASE):
            found.append(name)
    return found


def _join(names: List[str]) -> str:
    return names[0] if len(names) == 1 else ", ".join(names[:-1]) + " and " + names[-1]


class HttpChatClient:
    """JSON chat-completion client: {model, messages, temperature, seed} -> {text}."""

    is_mock = False

    def __init__(self, endpoint: str, model: str, token: Optional[str] = None,
                 timeout: float = Config.REQUEST_TIMEOUT, seed: int = Config.PROVIDER_SEED,
                 transport: Optional[httpx.AsyncBaseTransport] = None):
        self.endpoint = endpoint
        self.model = model
        self.token = token
        self.timeout = timeout
        self.seed = seed
        self.transport = transport
        self.provider_id = f"http:{model}"

    async def chat(self, messages: List[ChatMessage]) -> str:
        request = ChatRequest(model=self.model, messages=messages, temperature=0.0, seed=self.seed)
        headers = {"Authorization": f"Bearer {self.token}"} if self.token else {}
        try:
            async with httpx.AsyncClient(transport=self.transport, timeout=self.timeout) as client:
                response = await client.post(self.endpoint, json=request.model_dump(), headers=headers)
                response.raise_for_status()
        except httpx.HTTPError as exc:
            raise ProviderError(f"{self.endpoint}: {exc}") from exc
        return ChatResponse.model_validate(response.json()).text


def vlm_client_from_env(transport=None) -> HttpChatClient:
    return HttpChatClient(Config.VLM_ENDPOINT, Config.VLM_MODEL, Config.PROVIDER_TOKEN, transport=transport)


def llm_client_from_env(transport=None) -> HttpChatClient:
    return HttpChatClient(Config.LLM_ENDPOINT, Config.LLM_MODEL, Config.PROVIDER_TOKEN, transport=transport)


class TemplateMockVlm:
    """Stands in for the captioning VLM: reads the scene layout off the palette and describes it."""

    provider_id = "template-mock-vlm"
    is_mock = True

    def __init__(self, class_set: List[str]):
        self.class_set = list(class_set)

    def describe(self, image: np.ndarray) -> str:
        return template_caption(decode_palette(image, self.class_set), self.class_set)

    async def chat(self, messages: List[ChatMessage]) -> str:
        images = [img for message in messages for img in message.images]
        if not images:
            raise CaptionError(None, "VLM request carries no image")
        return self.describe(decode_png_b64(images[-1]))


class GroundedMockLlm:
    """Stands in for the refining LLM; only ever names classes from the prompt's class list."""

    provider_id = "grounded-mock-llm"
    is_mock = True

    def __init__(self, class_set: List[str]):
        self.class_set = list(class_set)

    def condense(self, description: str, allowed: List[str], level: int) -> str:
        names = mentioned_classes(description, allowed)
        if not names:
            return "The image shows an outdoor scene."
        parts = [f"The image shows {_join(names)}."]
        if level == 0:
            for name, vertical, horizontal in _LOCATION.findall(description):
                if name in names:
                    parts.append(f"The {name} is {vertical} {horizontal}.")
        if level <= 1:
            for a, b in _ADJACENCY.findall(description):
                if a in names and b in names:
                    parts.append(f"{a.capitalize()} next to {b}.")
        return " ".join(parts)

    async def chat(self, messages: List[ChatMessage]) -> str:
        user_turns = [m.content for m in messages if m.role == "user"]
        if not user_turns:
            raise CaptionError(None, "LLM request carries no user message")
        match = _DESCRIPTION.search(user_turns[0])
        if match is None:
            raise CaptionError(None, "LLM request carries no description")
        listed = _CLASS_LIST.search(user_turns[0])
        allowed = list(literal_eval(listed.group(1))) if listed else self.class_set
        level = sum(turn.count(BREVITY_RETRY) for turn in user_turns)
        return self.condense(match.group(1), allowed, level)
