from sqlalchemy.ext.asyncio import AsyncEngine, AsyncSession, create_async_engine
from sqlalchemy.orm import sessionmaker

from app.config import Config
from app.models import Base


def create_cache_engine(uri: str | None = None) -> AsyncEngine:
    return create_async_engine(uri or Config.CACHE_DATABASE_URI, echo=Config.SQLALCHEMY_ECHO)


def session_factory(engine: AsyncEngine):
    return sessionmaker(engine, class_=AsyncSession, expire_on_commit=False)


async def create_tables(engine: AsyncEngine):
    async with engine.begin() as conn:
        await conn.run_sync(Base.metadata.create_all)
