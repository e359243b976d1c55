import logging
import os
from dotenv import load_dotenv
from pathlib import Path

from app.data.data import categories_data

load_dotenv()

APP_DIR = Path(__file__).resolve().parent
INSTANCE_DIR = APP_DIR / 'instance'
INSTANCE_DIR.mkdir(exist_ok=True)


class Config:
    APP_TITLE = "CaptionDA"
    APP_VERSION = "0.1.0"
    APP_DESCRIPTION = "Language-guided domain adaptation for semantic segmentation on a synthetic benchmark."
    ENV = os.getenv("ENV", "development")
    DEBUG = os.getenv("DEBUG", "False") == "True"
    LOG_LEVEL = os.getenv("CAPTIONDA_LOG_LEVEL", "INFO")

    CACHE_DATABASE_URI = os.getenv(
        "CAPTIONDA_CACHE_URI", f"sqlite+aiosqlite:///{INSTANCE_DIR / 'captions_cache.db'}")
    SQLALCHEMY_ECHO = True if os.getenv("CAPTIONDA_SQL_ECHO") == "True" and ENV == "development" else False

    VLM_ENDPOINT = os.getenv("CAPTIONDA_VLM_ENDPOINT", "http://127.0.0.1:8000/chat")
    VLM_MODEL = os.getenv("CAPTIONDA_VLM_MODEL", "llava")
    LLM_ENDPOINT = os.getenv("CAPTIONDA_LLM_ENDPOINT", "http://127.0.0.1:8000/chat")
    LLM_MODEL = os.getenv("CAPTIONDA_LLM_MODEL", "mistral-large")
    PROVIDER_TOKEN = os.getenv("CAPTIONDA_PROVIDER_TOKEN")
    PROVIDER_SEED = int(os.getenv("CAPTIONDA_PROVIDER_SEED", "0"))
    EMBED_ENDPOINT = os.getenv("CAPTIONDA_EMBED_ENDPOINT", "http://127.0.0.1:8000/embed")

    REQUEST_TIMEOUT = float(os.getenv("CAPTIONDA_REQUEST_TIMEOUT", "60"))
    RETRY_BUDGET = int(os.getenv("CAPTIONDA_RETRY_BUDGET", "3"))
    RETRY_BACKOFF = float(os.getenv("CAPTIONDA_RETRY_BACKOFF", "0.5"))
    CAPTION_WORKERS = int(os.getenv("CAPTIONDA_CAPTION_WORKERS", "4"))

    SERVICE_HOST = os.getenv("CAPTIONDA_SERVICE_HOST", "127.0.0.1")
    SERVICE_PORT = int(os.getenv("CAPTIONDA_SERVICE_PORT", "8000"))
    SERVICE_CLASS_SET = [name for name in os.getenv("CAPTIONDA_CLASS_SET", ",".join(c["name"] for c in categories_data))
                         .split(",") if name]
    SERVICE_EMBED_DIM = int(os.getenv("CAPTIONDA_EMBED_DIM", "512"))


def configure_logging(level: str | None = None):
    logging.basicConfig(
        level=(level or Config.LOG_LEVEL).upper(),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
