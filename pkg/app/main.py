from typing import List, Optional

from fastapi import FastAPI, HTTPException

from app.clients import GroundedMockLlm, TemplateMockVlm
from app.config import Config
from app.embeddings import HashEncoder
from app.exceptions import CaptionDAError
from app.schemas import ChatRequest, ChatResponse, EmbedRequest, EmbedResponse


def create_app(class_set: Optional[List[str]] = None, embed_dim: int = Config.SERVICE_EMBED_DIM) -> FastAPI:
    """Local stand-in for the chat and text-encoder providers."""
    class_set = list(class_set or Config.SERVICE_CLASS_SET)
    vlm = TemplateMockVlm(class_set)
    llm = GroundedMockLlm(class_set)
    encoder = HashEncoder(dim=embed_dim)

    service = FastAPI(title=Config.APP_TITLE, version=Config.APP_VERSION,
                      description=Config.APP_DESCRIPTION)

    @service.get("/health")
    async def health():
        return {"service": Config.APP_TITLE, "version": Config.APP_VERSION,
                "vlm": vlm.provider_id, "llm": llm.provider_id, "encoder": encoder.backend_id}

    @service.post("/chat", response_model=ChatResponse)
    async def chat(request: ChatRequest):
        has_image = any(message.images for message in request.messages)
        try:
            text = await (vlm if has_image else llm).chat(request.messages)
        except CaptionDAError as exc:
            raise HTTPException(status_code=400, detail=str(exc))
        return ChatResponse(text=text)

    @service.post("/embed", response_model=EmbedResponse)
    async def embed(request: EmbedRequest):
        if not request.texts:
            raise HTTPException(status_code=400, detail="No texts to encode")
        try:
            vectors = [encoder.encode(text).values.tolist() for text in request.texts]
        except CaptionDAError as exc:
            raise HTTPException(status_code=400, detail=str(exc))
        return EmbedResponse(vectors=vectors)

    return service


app = create_app()
