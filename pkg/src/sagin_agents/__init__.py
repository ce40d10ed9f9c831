"""Joint model caching and inference for LLM agents in space-air-ground networks."""

__version__ = "0.1.0"
