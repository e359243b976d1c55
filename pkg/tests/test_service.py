import asyncio

import httpx
import numpy as np
import pytest
from fastapi.testclient import TestClient

from app.clients import HttpChatClient, encode_png_b64
from app.embeddings import HashEncoder
from app.exceptions import ProviderError
from app.main import create_app
from app.scene_synth import generate_scene
from app.schemas import ChatMessage, DomainShift


@pytest.fixture
def service(class_set):
    return create_app(class_set, embed_dim=32)


@pytest.fixture
def client(service):
    with TestClient(service) as test_client:
        yield test_client


def test_health(client):
    body = client.get("/health").json()
    assert body["vlm"] == "template-mock-vlm"
    assert body["encoder"] == "hash:d32:s0"


def test_chat_routes_images_to_the_captioner(client, scene_spec):
    sample = generate_scene(scene_spec, "source", DomainShift())
    response = client.post("/chat", json={"model": "llava", "messages": [
        {"role": "user", "content": "Describe the image.", "images": [encode_png_b64(sample.image)]}]})
    assert response.status_code == 200
    assert response.json()["text"].startswith("The image shows sky")


def test_chat_without_description_is_a_bad_request(client):
    response = client.post("/chat", json={"model": "mistral", "messages": [{"role": "user", "content": "hi"}]})
    assert response.status_code == 400


def test_chat_rejects_unknown_fields(client):
    response = client.post("/chat", json={"model": "m", "messages": [], "top_k": 3})
    assert response.status_code == 422


def test_embed_matches_local_encoder(client):
    response = client.post("/embed", json={"texts": ["A sky is next to road.", "road"]})
    vectors = np.asarray(response.json()["vectors"])
    assert vectors.shape == (2, 32)
    np.testing.assert_allclose(vectors[0], HashEncoder(dim=32).encode("A sky is next to road.").values)
    assert client.post("/embed", json={"texts": []}).status_code == 400


def test_http_chat_client_against_the_service(service):
    transport = httpx.ASGITransport(app=service)
    llm = HttpChatClient("http://providers/chat", "mistral", token="secret", transport=transport)
    messages = [ChatMessage(role="user", content="Shorten it. The description is The image shows sky and road.")]
    assert asyncio.run(llm.chat(messages)) == "The image shows sky and road."
    assert llm.provider_id == "http:mistral"


def test_http_chat_client_wraps_server_errors():
    transport = httpx.MockTransport(lambda request: httpx.Response(500, json={"detail": "boom"}))
    client = HttpChatClient("http://providers/chat", "mistral", transport=transport)
    with pytest.raises(ProviderError):
        asyncio.run(client.chat([ChatMessage(role="user", content="x")]))
