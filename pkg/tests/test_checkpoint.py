import numpy as np
import pytest

from hybridact import checkpoint
from hybridact.ar_head import NormStats
from hybridact.model import ModelConfig, PolicyModel


@pytest.fixture
def stats():
    return NormStats(low=np.array([-0.10500000000017, -0.2, -0.3]),
                     high=np.array([0.10000000031, 0.2, 0.3]))


class TestRawFormat:
    def test_roundtrip_bit_exact(self, tmp_path, stats, rng):
        params = {"w": rng.normal(size=(4, 5)).astype(np.float32),
                  "b": rng.normal(size=7).astype(np.float32)}
        cfg = {"d_model": 8, "arms": 1}
        path = tmp_path / "x.ckpt"
        checkpoint.save(path, params, cfg, stats.low, stats.high,
                        {"kind": "linear", "T": 100}, {"note": "test"})
        ck = checkpoint.load(path)
        for name in params:
            np.testing.assert_array_equal(ck.params[name], params[name])
        np.testing.assert_array_equal(ck.norm_low, stats.low)     # bit-exact floats
        np.testing.assert_array_equal(ck.norm_high, stats.high)
        assert ck.model_config == cfg
        assert ck.schedule == {"kind": "linear", "T": 100}
        assert ck.meta == {"note": "test"}

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "junk.ckpt"
        path.write_bytes(b"NOPE" + b"\x00" * 32)
        with pytest.raises(checkpoint.CheckpointError, match="magic"):
            checkpoint.load(path)

    def test_config_hash_stable(self):
        h1 = checkpoint.config_hash({"a": 1, "b": 2})
        h2 = checkpoint.config_hash({"b": 2, "a": 1})
        assert h1 == h2
        assert h1 != checkpoint.config_hash({"a": 1, "b": 3})


class TestModelRoundtrip:
    def test_save_load_preserves_everything(self, tmp_path, stats):
        model = PolicyModel(ModelConfig(d_model=32, n_layers=1, n_heads=4, d_ff=64), seed=4)
        stats3 = NormStats(low=-np.ones(7), high=np.ones(7))
        path = tmp_path / "m.ckpt"
        model.save(path, stats3, {"epochs_done": 5})
        loaded, lstats, meta = PolicyModel.load(path)
        assert loaded.cfg == model.cfg
        assert loaded.config_hash == model.config_hash
        assert meta["epochs_done"] == 5
        np.testing.assert_array_equal(lstats.low, stats3.low)
        for name, p in model.parameters().items():
            np.testing.assert_array_equal(loaded.parameters()[name].data, p.data)

    def test_schedule_restored(self, tmp_path):
        model = PolicyModel(ModelConfig(d_model=32, n_layers=1, n_heads=4, d_ff=64,
                                        schedule_kind="cosine", diffusion_steps=50), seed=0)
        path = tmp_path / "m.ckpt"
        model.save(path, NormStats(low=-np.ones(7), high=np.ones(7)))
        loaded, _, _ = PolicyModel.load(path)
        assert loaded.schedule.kind == "cosine"
        assert loaded.schedule.T == 50
        np.testing.assert_array_equal(loaded.schedule.betas, model.schedule.betas)
