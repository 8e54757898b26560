import json
import math

import pytest
import yaml
from hypothesis import given, settings
from hypothesis import strategies as st

from riskcem.ensemble import EnsembleModel
from riskcem.errors import InvalidInputError
from riskcem.harness import load_config, run_eval, run_training, sweep
from riskcem.harness.cli import main
from riskcem.harness.config import apply_override, dump_config, from_dict
from riskcem.harness.experiment import load_checkpoint
from riskcem.harness.records import RUN_SCHEMA, SUMMARY_SCHEMA, RecordWriter, read_records

TINY_PLANNER = ["planner.horizon=3", "planner.num_samples=8", "planner.num_particles=5", "planner.elite_size=3", "planner.opt_iterations=2"]
TINY_MODEL = ["model.size=8", "model.batch_size=32"]
TINY_SCHEDULE = ["schedule.iterations=2", "schedule.rollouts_per_iter=2", "schedule.rollout_length=6", "schedule.fit_epochs=2"]


def tiny(*extra, env="noisy_integrator", kind="learned", seed=0):
    return load_config(None, [f"env.id={env}", f"model.kind={kind}", *TINY_PLANNER, *TINY_MODEL, *TINY_SCHEDULE, *extra], seed=seed)


def files(directory):
    return {p.relative_to(directory).as_posix(): p.read_bytes() for p in sorted(directory.rglob("*")) if p.is_file() and p.name != "timing.json"}


class TestConfig:
    def test_defaults(self):
        cfg = from_dict({})
        s = cfg.schedule
        assert (s.rollouts_per_iter, s.rollout_length, s.fit_epochs) == (5, 80, 25)
        assert cfg.planner.num_particles % cfg.model.ensemble_size == 0

    def test_unknown_key(self):
        with pytest.raises(InvalidInputError, match="horizn"):
            from_dict({"planner": {"horizn": 3}})

    def test_type_errors(self):
        with pytest.raises(InvalidInputError):
            from_dict({"planner": {"horizon": "long"}})
        with pytest.raises(InvalidInputError):
            from_dict({"safety": {"enabled": 1}})

    def test_invalid_values(self):
        for bad in ({"env": {"id": "cartpole"}}, {"safety": {"delta": 2.0}}, {"schedule": {"iterations": -1}}, {"planner": {"num_particles": 7}}):
            with pytest.raises(InvalidInputError):
                from_dict(bad)

    def test_override(self):
        data = {}
        apply_override(data, "planner.w_aleatoric=0.5")
        apply_override(data, "safety.box=[null, null, [0.3, .inf]]")
        cfg = from_dict(data)
        assert cfg.planner.w_aleatoric == 0.5
        assert cfg.safety.box[2] == [0.3, math.inf]
        with pytest.raises(InvalidInputError):
            apply_override({}, "no_equals_sign")

    def test_yaml_round_trip_and_hash(self, tmp_path):
        cfg = tiny("planner.w_epistemic=0.05")
        path = tmp_path / "c.yaml"
        path.write_text(dump_config(cfg))
        again = load_config(path)
        assert again == cfg
        assert again.hash() == cfg.hash()
        assert load_config(path, output=tmp_path / "elsewhere").hash() == cfg.hash()
        assert load_config(path, seed=99).hash() != cfg.hash()


class TestRecords:
    @settings(max_examples=60, deadline=None)
    @given(
        st.integers(-(2**40), 2**40),
        st.floats(allow_nan=False),
        st.booleans(),
        st.lists(st.floats(allow_nan=False, allow_infinity=False), max_size=4),
        st.text(alphabet=st.characters(blacklist_categories=("Cs",), blacklist_characters="\r"), max_size=12),
        st.one_of(st.none(), st.floats(allow_nan=False)),
    )
    def test_round_trip(self, tmp_path_factory, i, x, flag, losses, text, maybe):
        path = tmp_path_factory.mktemp("rec") / "r.csv"
        row = {"row_type": text, "iteration": i, "return": x, "success": flag, "member_losses": losses, "coverage": maybe}
        with RecordWriter(path, RUN_SCHEMA) as w:
            w.write(row)
        back = read_records(path, RUN_SCHEMA)[0]
        assert back["iteration"] == i
        assert back["return"] == x
        assert back["success"] is flag
        assert back["member_losses"] == losses
        assert back["coverage"] == maybe
        assert back["row_type"] == (text if text else None)
        assert back["episode"] is None

    def test_unknown_field(self, tmp_path):
        with RecordWriter(tmp_path / "r.csv", RUN_SCHEMA) as w, pytest.raises(InvalidInputError):
            w.write({"nonsense": 1})


class TestTraining:
    def test_zero_iterations_header_only(self, tmp_path):
        assert main(["train", "--out", str(tmp_path / "r"), "--override", "schedule.iterations=0", "--override", "env.id=noisy_integrator"]) == 0
        lines = (tmp_path / "r" / "run.csv").read_text().splitlines()
        assert lines == [",".join(RUN_SCHEMA)]

    def test_rows_and_files(self, tmp_path):
        cfg = tiny()
        result = run_training(cfg, tmp_path / "r")
        rows = read_records(tmp_path / "r" / "run.csv", RUN_SCHEMA)
        kinds = [r["row_type"] for r in rows]
        assert kinds == ["episode", "episode", "fit", "episode", "episode", "fit"]
        assert [r["dataset_size"] for r in rows if r["row_type"] == "fit"] == [12, 24]
        assert all(r["config_hash"] == cfg.hash() for r in rows)
        assert len(rows[-1]["member_losses"]) == 5
        assert len(list((tmp_path / "r" / "episodes").glob("*.csv"))) == 4
        assert result.summary["status"] == "ok"
        assert isinstance(load_checkpoint(tmp_path / "r" / "model.ckpt", cfg), EnsembleModel)

    def test_bitwise_reproducible(self, tmp_path):
        cfg = tiny("planner.w_epistemic=0.05", env="bridge_maze")
        run_training(cfg, tmp_path / "a")
        run_training(cfg, tmp_path / "b")
        a, b = files(tmp_path / "a"), files(tmp_path / "b")
        assert a.keys() == b.keys()
        assert a == b

    def test_seed_changes_results(self, tmp_path):
        run_training(tiny(seed=1), tmp_path / "a")
        run_training(tiny(seed=2), tmp_path / "b")
        assert (tmp_path / "a" / "run.csv").read_bytes() != (tmp_path / "b" / "run.csv").read_bytes()

    def test_mismatched_replay_detected(self, tmp_path):
        run_training(tiny(), tmp_path / "r")
        with pytest.raises(InvalidInputError, match="config hash"):
            run_training(tiny("planner.w_aleatoric=1.0"), tmp_path / "r")

    def test_coverage_is_cumulative(self, tmp_path):
        run_training(tiny(env="bridge_maze"), tmp_path / "r")
        cov = [r["coverage"] for r in read_records(tmp_path / "r" / "run.csv", RUN_SCHEMA) if r["row_type"] == "episode"]
        assert all(c2 >= c1 for c1, c2 in zip(cov, cov[1:]))
        assert cov[0] > 0


class TestEval:
    def test_fifty_episodes_plus_summary(self, tmp_path):
        cfg = tiny("evaluation.episodes=50", "evaluation.episode_length=3", kind="ground_truth")
        summary = run_eval(cfg, out_dir=tmp_path / "e")
        rows = read_records(tmp_path / "e" / "run.csv", SUMMARY_SCHEMA)
        assert len(rows) == 51
        assert [r["row_type"] for r in rows].count("summary") == 1
        assert rows[-1]["violations"] == sum(r["violations"] for r in rows[:-1])
        assert summary["metrics"]["episodes"] == 50

    def test_unreachable_goal(self, tmp_path):
        cfg = tiny("evaluation.episodes=3", "evaluation.episode_length=10", env="bridge_maze", kind="moment_matched")
        assert run_eval(cfg, out_dir=tmp_path / "e")["metrics"]["success_rate"] == 0.0

    def test_learned_needs_checkpoint(self, tmp_path):
        with pytest.raises(InvalidInputError):
            run_eval(tiny(), out_dir=tmp_path / "e")

    def test_checkpoint_dimension_mismatch(self, tmp_path):
        run_training(tiny(), tmp_path / "r")
        with pytest.raises(InvalidInputError, match="dimensions"):
            run_eval(tiny(env="bridge_maze"), tmp_path / "r" / "model.ckpt", tmp_path / "e")

    def test_eval_reproducible(self, tmp_path):
        cfg = tiny("evaluation.episodes=4", "evaluation.episode_length=5", kind="ground_truth")
        run_eval(cfg, out_dir=tmp_path / "a")
        run_eval(cfg, out_dir=tmp_path / "b")
        assert files(tmp_path / "a") == files(tmp_path / "b")


class TestSweep:
    def test_single_point_matches_training(self, tmp_path):
        cfg = tiny()
        sweep(cfg, {"planner.w_aleatoric": [0.0]}, tmp_path / "s")
        run_training(cfg, tmp_path / "t")
        assert (tmp_path / "s" / "point_000" / "run.csv").read_bytes() == (tmp_path / "t" / "run.csv").read_bytes()

    def test_epistemic_grid(self, tmp_path):
        results = sweep(tiny(env="bridge_maze"), {"planner.w_epistemic": [0.0, 0.05]}, tmp_path / "s")
        assert [r["status"] for r in results] == ["ok", "ok"]
        rows = read_records(tmp_path / "s" / "sweep.csv", {"param:planner.w_epistemic": float, **RUN_SCHEMA})
        assert {r["param:planner.w_epistemic"] for r in rows} == {0.0, 0.05}
        assert all(r["coverage"] is not None for r in rows if r["row_type"] == "episode")

    def test_failed_point_recorded(self, tmp_path):
        results = sweep(tiny(), {"safety.delta": [0.1, 5.0]}, tmp_path / "s")
        assert results[0]["status"] == "ok"
        assert results[1]["status"].startswith("failed")

    def test_bad_key(self, tmp_path):
        results = sweep(tiny(), {"planner.nope": [1]}, tmp_path / "s")
        assert results[0]["status"].startswith("failed")


class TestCli:
    def test_invalid_config_exit_code(self, tmp_path, capsys):
        path = tmp_path / "c.yaml"
        path.write_text(yaml.safe_dump({"planner": {"horizn": 3}}))
        assert main(["train", "--config", str(path), "--out", str(tmp_path / "r")]) == 2
        assert "horizn" in capsys.readouterr().err
        assert main(["train", "--config", str(tmp_path / "missing.yaml")]) == 2

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_numeric_failure_exit_code(self, tmp_path):
        cfg = tiny()
        run_training(cfg, tmp_path / "r")
        ckpt = tmp_path / "r" / "model.ckpt"
        data = json.loads(ckpt.read_text())
        data["members"][0] = [float("nan")] * len(data["members"][0])
        ckpt.write_text(json.dumps(data))
        args = ["eval", "--checkpoint", str(ckpt), "--out", str(tmp_path / "e")]
        for item in ["env.id=noisy_integrator", *TINY_PLANNER, *TINY_MODEL, "evaluation.episodes=1", "evaluation.episode_length=2"]:
            args += ["--override", item]
        assert main(args) == 1

    def test_inspect_model(self, tmp_path, capsys):
        run_training(tiny(), tmp_path / "r")
        capsys.readouterr()
        assert main(["inspect-model", str(tmp_path / "r" / "model.ckpt")]) == 0
        info = json.loads(capsys.readouterr().out)
        assert (info["state_dim"], info["action_dim"], info["ensemble_size"]) == (3, 2, 5)
        assert main(["inspect-model", str(tmp_path / "nothing.ckpt")]) == 2

    def test_sweep_verb(self, tmp_path):
        args = ["sweep", "--out", str(tmp_path / "s"), "--grid", "planner.w_epistemic=0,0.05"]
        for item in ["env.id=noisy_integrator", *TINY_PLANNER, *TINY_MODEL, "schedule.iterations=1", "schedule.rollouts_per_iter=1", "schedule.rollout_length=3", "schedule.fit_epochs=1"]:
            args += ["--override", item]
        assert main(args) == 0
        assert (tmp_path / "s" / "sweep.csv").exists()
