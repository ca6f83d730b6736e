import json

import pytest

from pfadapt.cli import (
    EXIT_CAPACITY,
    EXIT_CHECKPOINT,
    EXIT_CONFIG,
    EXIT_MISSING,
    ConfigError,
    adaptation_order,
    default_config,
    load_config,
    main,
)
from pfadapt.packing import capacity_schedule

TINY = {
    "schema_version": 1,
    "seed": 3,
    "model": {"num_heads": 2, "num_encoder_layers": 1, "num_decoder_layers": 1, "embed_dim": 16, "ffn_dim": 32},
    "corpus": {"languages": ["aa", "bb", "cc"], "sizes": [60, 40, 20], "dev_size": 10, "test_size": 10, "zero_shot_size": 5},
    "train": {"warmup_steps": 10},
    "plan": {"epochs": {"multilingual": 2, "base_retrain": 1, "pair_adapt": 1, "pair_retrain": 1}, "finetune_epochs": 1},
}


def write_config(tmp_path, cfg=TINY, name="cfg.json"):
    p = tmp_path / name
    p.write_text(json.dumps(cfg))
    return str(p)


@pytest.fixture(scope="module")
def full_runs(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = write_config(root)
    codes = [main(["run-all", "--config", cfg, "--out", str(root / name)]) for name in ("a", "b")]
    return root, codes


class TestConfig:
    def test_defaults_round_trip(self, tmp_path):
        cfg = default_config()
        assert load_config(write_config(tmp_path, cfg)) == cfg

    def test_unknown_key_names_field(self, tmp_path):
        bad = json.loads(json.dumps(TINY))
        bad["plan"]["sencond_ratio"] = 0.5
        with pytest.raises(ConfigError, match=r"plan\.sencond_ratio"):
            load_config(write_config(tmp_path, bad))

    def test_syntax_error_names_line(self, tmp_path):
        p = tmp_path / "c.json"
        p.write_text('{"schema_version": 1,\n"seed": ,}')
        with pytest.raises(ConfigError, match=r":2:"):
            load_config(str(p))

    def test_missing_schema_version(self, tmp_path):
        with pytest.raises(ConfigError, match="schema_version"):
            load_config(write_config(tmp_path, {"seed": 1}))

    @pytest.mark.parametrize("order,expected", [("desc", ["aa", "bb", "cc"]), ("asc", ["cc", "bb", "aa"]), (["bb", "aa"], ["bb", "aa"])])
    def test_orders(self, tmp_path, order, expected):
        cfg = json.loads(json.dumps(TINY))
        cfg["plan"]["order"] = order
        assert adaptation_order(load_config(write_config(tmp_path, cfg))) == expected


class TestExitCodes:
    def test_ratio_one_rejected_before_training(self, tmp_path):
        cfg = json.loads(json.dumps(TINY))
        cfg["plan"]["second_ratio"] = 1.0
        assert main(["adapt", "--config", write_config(tmp_path, cfg), "--out", str(tmp_path / "r")]) == EXIT_CONFIG
        assert not (tmp_path / "r" / "checkpoints").exists()

    def test_undeclared_pair(self, tmp_path):
        assert main(["gen-data", "--config", write_config(tmp_path), "--out", str(tmp_path / "r"), "--order", "aa,zz"]) == EXIT_CONFIG

    def test_missing_parent(self, tmp_path, capsys):
        assert main(["prune-base", "--config", write_config(tmp_path), "--out", str(tmp_path / "r")]) == EXIT_MISSING
        assert "parent.ckpt" in capsys.readouterr().err

    def test_report_without_evals(self, tmp_path, capsys):
        assert main(["report", "--config", write_config(tmp_path), "--out", str(tmp_path / "r")]) == EXIT_MISSING
        assert "parent.json" in capsys.readouterr().err

    def test_corrupt_checkpoint(self, tmp_path, full_runs):
        root, _ = full_runs
        out = tmp_path / "r"
        (out / "checkpoints").mkdir(parents=True)
        blob = (root / "a" / "checkpoints" / "pruned.ckpt").read_bytes()
        (out / "checkpoints" / "pruned.ckpt").write_bytes(blob[: len(blob) // 2])
        assert main(["adapt", "--config", write_config(tmp_path), "--out", str(out)]) == EXIT_CHECKPOINT

    def test_capacity_exhausted(self, tmp_path):
        cfg = json.loads(json.dumps(TINY))
        cfg["plan"].update({"second_ratio": 0.0, "epochs": {"multilingual": 0, "base_retrain": 0, "pair_adapt": 0, "pair_retrain": 0}})
        path, out = write_config(tmp_path, cfg), str(tmp_path / "r")
        for cmd in ("train-mnmt", "prune-base"):
            assert main([cmd, "--config", path, "--out", out]) == 0
        assert main(["adapt", "--config", path, "--out", out]) == EXIT_CAPACITY


class TestFullRun:
    def test_succeeds(self, full_runs):
        assert full_runs[1] == [0, 0]

    def test_verify_passes(self, full_runs):
        root, _ = full_runs
        assert main(["verify", "--out", str(root / "a")]) == 0
        res = json.loads((root / "a" / "evals" / "verify.json").read_text())
        assert res["passed"] and res["ledger"]["passed"] and all(s["passed"] for s in res["stability"])

    def test_two_runs_byte_identical(self, full_runs):
        root, _ = full_runs
        for sub in ("checkpoints", "reports", "evals", "corpus"):
            a = sorted(p.relative_to(root / "a") for p in (root / "a" / sub).rglob("*") if p.is_file())
            b = sorted(p.relative_to(root / "b") for p in (root / "b" / sub).rglob("*") if p.is_file())
            assert a == b and a
            for rel in a:
                assert (root / "a" / rel).read_bytes() == (root / "b" / rel).read_bytes(), rel

    def test_report_idempotent(self, full_runs):
        root, _ = full_runs
        run = root / "a"
        before = {p.name: p.read_bytes() for p in (run / "reports").iterdir()}
        assert main(["report", "--out", str(run)]) == 0
        assert before == {p.name: p.read_bytes() for p in (run / "reports").iterdir()}

    def test_zero_shot_grid_has_all_directions(self, full_runs):
        lines = (full_runs[0] / "a" / "reports" / "zero_shot.tsv").read_text().splitlines()
        assert len(lines) - 1 == 3 * 2

    def test_capacity_column_matches_schedule(self, full_runs):
        rows = [l.split("\t") for l in (full_runs[0] / "a" / "reports" / "capacity.tsv").read_text().splitlines()[1:]]
        pairs = [r for r in rows if r[1] not in ("shared", "free")]
        for k, r in enumerate(pairs, start=1):
            assert float(r[4]) == pytest.approx(capacity_schedule(0.5, 0.75, k), abs=1e-6)

    def test_run_log_records_effective_config(self, full_runs):
        run = full_runs[0] / "a"
        records = [json.loads(l) for l in (run / "run_log.jsonl").read_text().splitlines()]
        assert [r["command"] for r in records][:2] == ["gen-data", "train-mnmt"]
        for r in records:
            assert r["config_hash"] and "wall_time_s" in r
            assert load_config(write_config(run.parent, r["effective_config"], "rt.json")) == r["effective_config"]
        assert records[1]["result"]["phase_log"][0]["final_loss"] is not None


def test_plot_data_without_adapted_pairs(tmp_path):
    cfg = json.loads(json.dumps(TINY))
    cfg["plan"]["epochs"] = {"multilingual": 1, "base_retrain": 0, "pair_adapt": 0, "pair_retrain": 0}
    path, out = write_config(tmp_path, cfg), str(tmp_path / "r")
    for cmd in ("train-mnmt", "prune-base", "eval", "report"):
        assert main([cmd, "--config", path, "--out", out]) == 0
    rows = (tmp_path / "r" / "reports" / "delta_plot.tsv").read_text().splitlines()[1:]
    assert [r.split("\t")[1] for r in rows] == ["parent", "pruned"]
