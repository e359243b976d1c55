import re
from dataclasses import dataclass
from typing import List, Optional, Tuple

from app.exceptions import CaptionError

CLASS_NAMES = "{CLASS_NAMES}"
VLM_CAPTION = "{VLM_CAPTION}"
_PLACEHOLDER = re.compile(r"\{[A-Z_]+\}")

LLM_SYSTEM_TEXT = ("You are a helpful assistant for refining and condensing detailed image caption "
                   "descriptions for semantic segmentation.")
BREVITY_RETRY = "Your previous answer was too long; use fewer than 70 tokens."


@dataclass(frozen=True)
class PromptTemplate:
    system_text: str
    user_text: str

    def render(self, **bindings: str) -> Tuple[str, str]:
        wanted = set(_PLACEHOLDER.findall(self.system_text + self.user_text))
        unbound = wanted - {"{" + key + "}" for key in bindings}
        if unbound:
            raise CaptionError(None, f"unbound prompt placeholders: {', '.join(sorted(unbound))}")
        # single pass: bound values are never rescanned for markers
        def fill(text: str) -> str:
            return _PLACEHOLDER.sub(lambda m: bindings[m.group(0)[1:-1]], text)

        return fill(self.system_text), fill(self.user_text)


VLM_PROMPT = PromptTemplate(
    system_text="",
    user_text=("Describe the image in detail for semantic segmentation tasks. "
               "Be sure to include the class names {CLASS_NAMES} and their pixel locations."),
)

# target images have no mask, so the class list is left out
VLM_TARGET_PROMPT = PromptTemplate(
    system_text="",
    user_text=("Describe the image in detail for semantic segmentation tasks. "
               "Be sure to include the objects and their pixel locations."),
)

LLM_PROMPT = PromptTemplate(
    system_text=LLM_SYSTEM_TEXT,
    user_text=("Shorten the description to less than 77 tokens. Do not use quotation marks or parentheses. "
               "Be sure to include the class name {CLASS_NAMES} and their pixel locations. "
               "The description is {VLM_CAPTION}"),
)

LLM_TARGET_PROMPT = PromptTemplate(
    system_text=LLM_SYSTEM_TEXT,
    user_text=("Shorten the description to less than 77 tokens. Do not use quotation marks or parentheses. "
               "The description is {VLM_CAPTION}"),
)


def format_class_names(class_names: List[str]) -> str:
    return "[" + ", ".join(f"'{name}'" for name in class_names) + "]"


def make_vlm_prompt(class_names: Optional[List[str]]) -> str:
    """Render the captioning query; ``None`` selects the class-free target variant."""
    if class_names is None:
        return VLM_TARGET_PROMPT.render()[1]
    if not class_names:
        raise CaptionError(None, "class name list is empty")
    return VLM_PROMPT.render(CLASS_NAMES=format_class_names(class_names))[1]


def make_llm_prompt(class_names: Optional[List[str]], vlm_caption: str) -> Tuple[str, str]:
    if not vlm_caption or not vlm_caption.strip():
        raise CaptionError(None, "VLM caption is empty")
    if class_names is None:
        return LLM_TARGET_PROMPT.render(VLM_CAPTION=vlm_caption)
    return LLM_PROMPT.render(CLASS_NAMES=format_class_names(class_names), VLM_CAPTION=vlm_caption)
