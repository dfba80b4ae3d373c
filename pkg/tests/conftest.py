import numpy as np
import pytest

from pse.mixer import build_dataset, speaker_pool
from pse.model import PseModelConfig
from pse.profile import EmbedderConfig


def tiny_embedder_config(**kw):
    base = dict(n_mels=6, n_layers=1, n_heads=2, head_dim=4, ffn_hidden=10, look_back=3)
    base.update(kw)
    return EmbedderConfig(**base)


def tiny_config(variant="concat", **kw):
    """Toy dims for tensor-level tests (d_fft too small for real audio)."""
    base = dict(
        n_enc_layers=1,
        n_dec_layers=1,
        variant=variant,
        d_fft=7,
        d_model=8,
        d_embed=8,
        ffn_hidden=12,
        n_heads=2,
        head_dim=4,
        look_back=3,
        embedder=tiny_embedder_config(),
    )
    base.update(kw)
    return PseModelConfig(**base)


def small_config(variant="concat", **kw):
    """Small model that still accepts real 512-point STFT frames."""
    base = dict(
        n_enc_layers=1,
        n_dec_layers=1,
        variant=variant,
        d_model=16,
        d_embed=16,
        ffn_hidden=24,
        n_heads=2,
        head_dim=8,
        look_back=20,
        embedder=tiny_embedder_config(n_mels=8, n_heads=2, head_dim=8, look_back=20),
    )
    base.update(kw)
    return PseModelConfig(**base)


@pytest.fixture(scope="session")
def micro_dataset(tmp_path_factory):
    """A small on-disk mixture dataset shared across tests (read-only)."""
    out = tmp_path_factory.mktemp("micro_ds")
    speakers = speaker_pool(3, seed=5)
    manifest = build_dataset(speakers, 12, out, seed=5, chunk_s=1.0)
    return manifest
