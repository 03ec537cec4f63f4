import numpy as np
import pytest

from hybridact.ar_head import NormStats
from hybridact.diffusion import ddim_sample
from hybridact.model import ModelConfig, PolicyModel
from hybridact.seeding import stream

SMALL = dict(d_model=32, n_layers=2, n_heads=4, d_ff=64)


def scene(seed=0, arms=1, n_views=1):
    gen = stream(seed, "scene")
    obs = gen.random((n_views, 32, 32, 3)).astype(np.float32)
    lang = gen.integers(0, 20, size=8)
    state = gen.uniform(0, 1, size=7 * arms)
    return obs, lang, state


def randomized(cfg_kwargs, seed=0):
    model = PolicyModel(ModelConfig(**cfg_kwargs), seed=seed)
    w2 = model.backbone.params["noise.w2"]
    w2.data = stream(seed, "w2").normal(0, 0.05, size=w2.data.shape).astype(np.float32)
    return model


@pytest.fixture
def stats():
    return NormStats(low=-0.1 * np.ones(7), high=0.1 * np.ones(7))


class TestSession:
    @pytest.mark.parametrize("layout", ["type1", "type2", "type3"])
    def test_full_pipeline_cached_equals_uncached(self, layout, stats):
        model = randomized({**SMALL, "layout": layout})
        obs, lang, state = scene(1)
        results = {}
        for use_cache in (True, False):
            session = model.open_session(obs, lang, state, use_cache=use_cache, stats=stats)
            a = ddim_sample(session, 4, stream(5, "n"))
            decoded = session.decode_greedy()
            results[use_cache] = (a, decoded.bin_ids, decoded.confidence)
        np.testing.assert_allclose(results[True][0], results[False][0], atol=1e-5)
        np.testing.assert_array_equal(results[True][1], results[False][1])
        assert results[True][2] == pytest.approx(results[False][2], abs=1e-5)

    def test_decode_requires_stats(self):
        model = randomized(SMALL)
        obs, lang, state = scene(2)
        session = model.open_session(obs, lang, state)
        ddim_sample(session, 2, stream(0, "n"))
        with pytest.raises(ValueError, match="stats"):
            session.decode_greedy()

    def test_ar_only_session_decodes_without_diffusion(self, stats):
        model = randomized({**SMALL, "mode": "ar_only"})
        obs, lang, state = scene(3)
        session = model.open_session(obs, lang, state, stats=stats)
        decoded = session.decode_greedy()
        assert decoded.pose.shape == (7,)
        assert 0.0 <= decoded.confidence <= 1.0
        with pytest.raises(KeyError):
            session.predict_noise(5, np.zeros(7))

    def test_dif_only_session_samples_without_decode(self, stats):
        model = randomized({**SMALL, "mode": "dif_only"})
        obs, lang, state = scene(4)
        session = model.open_session(obs, lang, state, stats=stats)
        a = ddim_sample(session, 4, stream(1, "n"))
        assert a.shape == (7,)
        with pytest.raises(KeyError):
            session.decode_greedy()

    def test_dual_arm_dimensions(self, stats):
        model = randomized({**SMALL, "arms": 2, "n_views": 2})
        obs, lang, state = scene(5, arms=2, n_views=2)
        stats14 = NormStats(low=-0.1 * np.ones(14), high=0.1 * np.ones(14))
        session = model.open_session(obs, lang, state, stats=stats14)
        a = ddim_sample(session, 4, stream(2, "n"))
        assert a.shape == (14,)
        decoded = session.decode_greedy()
        assert decoded.pose.shape == (14,)
        assert decoded.bin_ids.shape == (14,)

    def test_repeat_sampling_rewrites_block(self, stats):
        # two different noise draws through the same session prefix must
        # give different actions but identical prefix cache contents
        model = randomized(SMALL)
        obs, lang, state = scene(6)
        session = model.open_session(obs, lang, state, stats=stats)
        prefix_k = session.cache.k[:, :session.prefix.prefix_len].copy()
        a1 = ddim_sample(session, 4, stream(10, "a"))
        a2 = ddim_sample(session, 4, stream(11, "b"))
        assert np.abs(a1 - a2).max() > 0
        np.testing.assert_array_equal(session.cache.k[:, :session.prefix.prefix_len], prefix_k)


class TestConfig:
    def test_action_dim(self):
        assert ModelConfig(arms=2).action_dim == 14
        assert ModelConfig().n_vision == 16
        assert ModelConfig(n_views=2).n_vision == 32

    def test_hash_changes_with_config(self):
        a = PolicyModel(ModelConfig(**SMALL), seed=0)
        b = PolicyModel(ModelConfig(**{**SMALL, "n_layers": 1}), seed=0)
        assert a.config_hash != b.config_hash
