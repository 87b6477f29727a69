"""FastAPI service layer: pydantic schemas and the ASGI app."""

from .app import app

__all__ = ["app"]
