"""Texture-only vector quantization and reconstruction-aware index prediction at desk scale."""
