import csv
import os

import numpy as np
import pytest

from hybridact.cli import main as cli_main
from hybridact.ensemble import threshold_sweep
from hybridact.evaluate import (EX_TABLE, STEP_SWEEP, THRESHOLD_SWEEP, EvalReport,
                                ModelPolicy, ablate, bench_speed, env_seed_override,
                                rollout_episodes, rollout_eval, write_report)
from hybridact.model import PolicyModel
from hybridact.simworld import expert_action, generate_dataset
from hybridact.trainer import TrainConfig, train, write_config_file

TINY = dict(epochs=2, batch_size=16, d_model=32, n_layers=2, n_heads=4, d_ff=64)
TASKS = ["reach", "pick_place"]


@pytest.fixture(scope="module")
def dataset_path(tmp_path_factory):
    path = tmp_path_factory.mktemp("data") / "tiny.ds"
    generate_dataset(TASKS, n_per_task=4, seed=0, out_path=path)
    return path


@pytest.fixture(scope="module")
def tiny_ckpt(dataset_path, tmp_path_factory):
    path = tmp_path_factory.mktemp("ckpt") / "tiny.ckpt"
    train(TrainConfig(**TINY), dataset_path, out_path=path)
    return path


class TestRolloutEval:
    def test_expert_in_the_loop_is_perfect(self):
        per_task, steps, _ = rollout_episodes(
            lambda s, rng: expert_action(s), TASKS, episodes=20, seed=3)
        assert all(np.mean(oks) == 1.0 for oks in per_task.values())
        assert np.mean(steps) < 40

    def test_untrained_model_near_zero(self, tiny_ckpt):
        report = rollout_eval(tiny_ckpt, TASKS, "dif", episodes=25, seed=2)
        assert report.mean_success < 0.10

    def test_seed_matched_reports_identical(self, tiny_ckpt):
        r1 = rollout_eval(tiny_ckpt, TASKS, "ensemble", episodes=5, seed=4)
        r2 = rollout_eval(tiny_ckpt, TASKS, "ensemble", episodes=5, seed=4)
        assert r1.key_fields() == r2.key_fields()

    def test_theta_one_equals_dif_mode(self, tiny_ckpt):
        dif = rollout_eval(tiny_ckpt, TASKS, "dif", episodes=5, seed=6)
        ens = rollout_eval(tiny_ckpt, TASKS, "ensemble", episodes=5, seed=6, theta=1.0)
        assert ens.task_success == dif.task_success
        assert ens.mean_steps == dif.mean_steps

    def test_mode_mismatch_rejected(self, dataset_path, tmp_path):
        ck = tmp_path / "dif_only.ckpt"
        train(TrainConfig(mode="dif_only", **TINY), dataset_path, out_path=ck)
        with pytest.raises(ValueError, match="diffusion-only"):
            rollout_eval(ck, TASKS, "ar", episodes=1, seed=0)
        report = rollout_eval(ck, TASKS, "dif", episodes=2, seed=0)
        assert 0.0 <= report.mean_success <= 1.0

    def test_ar_only_checkpoint_rolls_out(self, dataset_path, tmp_path):
        ck = tmp_path / "ar_only.ckpt"
        train(TrainConfig(mode="ar_only", **TINY), dataset_path, out_path=ck)
        with pytest.raises(ValueError, match="autoregressive-only"):
            rollout_eval(ck, TASKS, "ensemble", episodes=1, seed=0)
        report = rollout_eval(ck, TASKS, "ar", episodes=2, seed=0)
        assert 0.0 <= report.mean_success <= 1.0

    def test_parallel_workers_match_serial(self, tiny_ckpt):
        serial = rollout_eval(tiny_ckpt, TASKS, "dif", episodes=6, seed=9, workers=1)
        parallel = rollout_eval(tiny_ckpt, TASKS, "dif", episodes=6, seed=9, workers=3)
        assert serial.key_fields() == parallel.key_fields()

    def test_unknown_variant(self, tiny_ckpt):
        with pytest.raises(ValueError, match="variant"):
            rollout_eval(tiny_ckpt, TASKS, "dif", episodes=1, seed=0, variant="wind")

    def test_report_write(self, tiny_ckpt, tmp_path):
        report = rollout_eval(tiny_ckpt, TASKS, "dif", episodes=2, seed=0)
        csv_path, txt_path = write_report(report, tmp_path)
        rows = list(csv.DictReader(open(csv_path)))
        assert {r["task"] for r in rows} == set(TASKS)
        assert all("config_hash" in r and "seed" in r for r in rows)
        assert "mean success" in txt_path.read_text()


class TestBench:
    def test_positive_and_finite(self, tiny_ckpt):
        res = bench_speed(tiny_ckpt, use_cache=True, n_actions=1, warmup=0)
        assert res.actions_per_second > 0 and np.isfinite(res.actions_per_second)

    def test_cached_uncached_outputs_match(self, tiny_ckpt):
        cached = bench_speed(tiny_ckpt, use_cache=True, n_actions=3, warmup=0)
        uncached = bench_speed(tiny_ckpt, use_cache=False, n_actions=3, warmup=0)
        assert np.abs(cached.poses - uncached.poses).max() < 1e-5

    def test_invalid_count(self, tiny_ckpt):
        with pytest.raises(ValueError):
            bench_speed(tiny_ckpt, use_cache=True, n_actions=0)


class TestThresholdSweep:
    def test_single_theta_matches_rollout(self, tiny_ckpt):
        rows = threshold_sweep(tiny_ckpt, TASKS, [0.96], episodes=3, seed=5)
        direct = rollout_eval(tiny_ckpt, TASKS, "ensemble", episodes=3, seed=5, theta=0.96)
        assert rows[0]["success"] == direct.mean_success
        assert rows[0]["theta"] == 0.96


class TestAblate:
    def test_layouts_suite_structure(self, dataset_path, tmp_path):
        cfg = TrainConfig(epochs=1, batch_size=16, d_model=32, n_layers=1, n_heads=4, d_ff=64)
        path = ablate("layouts", cfg, dataset_path, tmp_path / "ab", episodes=2,
                      log=lambda *_: None)
        rows = list(csv.DictReader(open(path)))
        assert len(rows) == 8
        assert {(r["layout"], r["eval_mode"]) for r in rows} == {
            (lt, m) for lt in ("type1", "type2", "type3", "type4") for m in ("dif", "ar")}

    def test_threshold_suite_values(self, dataset_path, tiny_ckpt, tmp_path):
        cfg = TrainConfig(**TINY)
        path = ablate("threshold", cfg, dataset_path, tmp_path / "th", episodes=1,
                      checkpoint_path=tiny_ckpt, log=lambda *_: None)
        rows = list(csv.DictReader(open(path)))
        assert [float(r["theta"]) for r in rows] == list(THRESHOLD_SWEEP)
        assert list(THRESHOLD_SWEEP) == [0.90, 0.92, 0.94, 0.96, 0.98]

    def test_steps_suite_values(self, dataset_path, tiny_ckpt, tmp_path):
        cfg = TrainConfig(**TINY)
        path = ablate("steps", cfg, dataset_path, tmp_path / "st", episodes=1,
                      checkpoint_path=tiny_ckpt, log=lambda *_: None)
        rows = list(csv.DictReader(open(path)))
        assert [int(r["n_steps"]) for r in rows] == list(STEP_SWEEP)

    def test_unknown_suite(self, dataset_path):
        with pytest.raises(ValueError, match="unknown suite"):
            ablate("everything", TrainConfig(**TINY), dataset_path, "/tmp/x")

    def test_ex_table_rows(self):
        assert set(EX_TABLE) == {"full", "dif_eval", "dif_only", "ar_eval", "ar_only",
                                 "no_pretrain", "no_state"}

    def test_ex_table_suite_structure(self, dataset_path, tmp_path):
        cfg = TrainConfig(epochs=1, batch_size=16, d_model=32, n_layers=1, n_heads=4, d_ff=64)
        path = ablate("ex_table", cfg, dataset_path, tmp_path / "ex", episodes=1,
                      log=lambda *_: None)
        rows = list(csv.DictReader(open(path)))
        assert [r["ex"] for r in rows] == list(EX_TABLE)
        assert all({"success", "seed", "config_hash"} <= set(r) for r in rows)
        # rows sharing a checkpoint carry the same config hash
        by_ex = {r["ex"]: r for r in rows}
        assert by_ex["full"]["config_hash"] == by_ex["dif_eval"]["config_hash"]
        assert by_ex["dif_only"]["config_hash"] != ""


class TestCLI:
    def test_gen_data_and_inspect(self, tmp_path, capsys):
        out = tmp_path / "cli.ds"
        rc = cli_main(["gen-data", "--tasks", "reach", "--n-per-task", "5",
                       "--seed", "3", "--out", str(out)])
        assert rc == 0 and out.exists()
        rc = cli_main(["inspect", str(out)])
        assert rc == 0
        assert '"tasks"' in capsys.readouterr().out

    def test_train_eval_bench_inspect(self, dataset_path, tmp_path, capsys):
        cfg_path = tmp_path / "t.cfg"
        write_config_file(TrainConfig(**TINY), cfg_path)
        ck = tmp_path / "cli.ckpt"
        rc = cli_main(["train", "--config", str(cfg_path), "--dataset", str(dataset_path),
                       "--out", str(ck)])
        assert rc == 0 and ck.exists()
        rc = cli_main(["eval", "--checkpoint", str(ck), "--tasks", "reach",
                       "--mode", "dif", "--episodes", "1", "--out-dir", str(tmp_path / "ev")])
        assert rc == 0
        rc = cli_main(["bench", "--checkpoint", str(ck), "--n-actions", "2", "--warmup", "0"])
        assert rc == 0
        assert "speedup" in capsys.readouterr().out
        rc = cli_main(["inspect", str(ck)])
        assert rc == 0

    def test_usage_error_exit_code(self):
        with pytest.raises(SystemExit) as exc:
            cli_main(["eval", "--mode", "warp"])
        assert exc.value.code == 1

    def test_runtime_error_exit_code(self, capsys):
        rc = cli_main(["inspect", "/nonexistent/file.ckpt"])
        assert rc == 2

    def test_env_seed_override(self, monkeypatch):
        monkeypatch.setenv("HYBRID_SEED", "777")
        assert env_seed_override(3) == 777
        monkeypatch.delenv("HYBRID_SEED")
        assert env_seed_override(3) == 3

    def test_train_set_overrides(self, dataset_path, tmp_path):
        ck = tmp_path / "s.ckpt"
        rc = cli_main(["train", "--dataset", str(dataset_path), "--out", str(ck),
                       "--set", "epochs=1", "--set", "d_model=32", "--set", "n_layers=1",
                       "--set", "n_heads=4", "--set", "d_ff=64"])
        assert rc == 0
        model, _, meta = PolicyModel.load(ck)
        assert model.cfg.d_model == 32
        assert meta["train_config"]["epochs"] == 1
