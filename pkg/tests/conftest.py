import numpy as np
import pytest
from hypothesis import settings
from hypothesis import strategies as st

from prefillsim.config import QWEN3_235B, ClusterConfig, EfficiencyCurve, LinkModel, ModelConfig


def small_model(**overrides) -> ModelConfig:
    base = dict(L=4, L_moe=4, H=64, N_kv=2, d_h=16, h=32, E=8, k=2, b=2,
                n_active=1_000_000, n_total=4_000_000, attn_params_per_layer=16_384, name="tiny")
    base.update(overrides)
    return ModelConfig(**base)


def small_cluster(P: int = 4, **overrides) -> ClusterConfig:
    base = dict(P=P, F_GPU=1e12, hbm_bytes=10**9,
                link=LinkModel(nvlink_bw=1e9, pcie_bw=2.5e8, latency_floor=0.0),
                gamma=1.2, curve=EfficiencyCurve(0.5, 1024, 0.05), chunk_tokens=None)
    base.update(overrides)
    return ClusterConfig(**base)


@st.composite
def model_configs(draw) -> ModelConfig:
    L = draw(st.integers(1, 128))
    E = draw(st.integers(1, 256))
    n_active = draw(st.integers(1, 10**11))
    return ModelConfig(
        L=L, L_moe=draw(st.integers(1, L)), H=draw(st.integers(1, 16384)),
        N_kv=draw(st.integers(1, 64)), d_h=draw(st.integers(1, 256)),
        h=draw(st.integers(1, 32768)), E=E, k=draw(st.integers(1, E)),
        b=draw(st.sampled_from([1, 2])), n_active=n_active,
        n_total=n_active + draw(st.integers(0, 10**12)),
        attn_params_per_layer=draw(st.integers(1, 10**9)),
    )


@pytest.fixture
def tiny():
    return small_model()


@pytest.fixture
def qwen():
    return QWEN3_235B


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


settings.register_profile("repo", deadline=None)
settings.load_profile("repo")
