import csv
import io
import json
import os
import re

import numpy as np
import pytest

from adpmixup import checkpoint
from adpmixup.harness import (
    METHODS,
    ConfigError,
    StageError,
    beta_sweep,
    build_seed,
    clear_cache,
    from_dict,
    load_config,
    profile_heatmap,
    read_results,
    run_pipeline,
    threshold_tradeoff,
)
from adpmixup.harness.cli import main
from adpmixup.harness.pipeline import RESULTS_HEADER
from adpmixup.harness.studies import SWEEP_HEADER, TRADEOFF_HEADER, mixed_set, tradeoff_pool
from adpmixup.training import LabeledDataset, write_jsonl

SMALL = {
    "corpus": {"n_pretrain": 80, "n_train": 120, "n_test": 60},
    "model": {"vocab_size": 512, "dim": 16, "rank": 4},
    "pretrain": {"epochs": 5},
    "train": {"epochs": 10},
    "attacks": {"profile": ["char_swap", "word_synonym"], "profile_samples": 3},
    "mixing": {"calibration_samples": 10},
    "seeds": [0],
}


@pytest.fixture
def small_cfg():
    return from_dict(SMALL)


@pytest.fixture
def config_file(tmp_path):
    path = tmp_path / "small.json"
    path.write_text(json.dumps(SMALL))
    return str(path)


def rows(text):
    return list(csv.reader(io.StringIO(text)))


class TestConfig:
    def test_defaults_round_trip(self):
        cfg = load_config()
        assert cfg.seeds == (0, 1, 2, 3, 4) and len(cfg.beta_grid) == 11 and len(cfg.thresholds) == 11
        assert from_dict(json.loads(cfg.to_json())) == cfg

    @pytest.mark.parametrize("raw", [
        {"bogus": 1},
        {"model": {"dimm": 3}},
        {"model": 5},
        {"seeds": []},
        {"model": {"dim": 8, "rank": 8}},
        {"studies": {"beta_step": 0.3}},
        {"studies": {"thresholds": [0.5, 0.2]}},
        {"studies": {"adversarial_ratio": 1.0}},
        {"attacks": {"pre_known": []}},
        {"attacks": {"pre_known": [{"kind": "char_swap"}, {"kind": "char_swap"}]}},
        {"attacks": {"target": {"kind": "laser"}}},
        {"attacks": {"target": {"kind": "char_swap", "budget": 0}}},
        {"attacks": {"target": {"kind": "char_swap", "extra": 1}}},
        {"train": {"learning_rate": -1}},
        {"train": {"epochs": "many"}},
        {"paths": {"train": "does/not/exist.jsonl"}},
    ])
    def test_rejects(self, raw):
        with pytest.raises(ConfigError):
            from_dict(raw)

    def test_unreadable_files(self, tmp_path):
        with pytest.raises(ConfigError):
            load_config(str(tmp_path / "missing.json"))
        bad = tmp_path / "bad.json"
        bad.write_text("{not json")
        with pytest.raises(ConfigError):
            load_config(str(bad))

    def test_relative_paths_resolve_next_to_config(self, tmp_path):
        write_jsonl(LabeledDataset([("good", 1), ("bad", 0)]), str(tmp_path / "train.jsonl"))
        (tmp_path / "c.json").write_text(json.dumps({"paths": {"train": "train.jsonl"}}))
        assert load_config(str(tmp_path / "c.json")).train_path == str(tmp_path / "train.jsonl")


class TestPipeline:
    def test_results_schema(self, small_cfg, tmp_path):
        text = run_pipeline(small_cfg, str(tmp_path))
        table = rows(text)
        assert tuple(table[0]) == RESULTS_HEADER
        assert [r[0] for r in table[1:]] == list(METHODS)
        res = read_results(text)
        for clean, adv, avg in res.values():
            assert 0 <= clean <= 1 and 0 <= adv <= 1
        assert (tmp_path / "results.csv").read_text() == text
        per_seed = rows((tmp_path / "results_per_seed.csv").read_text())
        assert per_seed[0] == ["seed", *RESULTS_HEADER] and len(per_seed) == 1 + len(METHODS)
        assert json.loads((tmp_path / "config.json").read_text()) == small_cfg.to_dict()
        ckpts = tmp_path / "checkpoints" / "seed0"
        assert checkpoint.load(str(ckpts / "adapter_clean.ckpt")).tag == "clean"
        assert (ckpts / "calibration.json").exists() and (ckpts / "model_soup.ckpt").exists()
        diag = rows((tmp_path / "diagnostics_seed0.csv").read_text())
        assert diag[0][:2] == ["sample_id", "alpha_clean"]

    def test_same_splits_for_every_method(self, small_cfg):
        run = build_seed(small_cfg, 0)
        assert build_seed(small_cfg, 0) is run
        clear_cache()
        again = build_seed(small_cfg, 0)
        assert again is not run and again.test.items == run.test.items
        assert again.adv_test == run.adv_test

    def test_rerun_is_byte_identical(self, small_cfg, tmp_path):
        outs = []
        for name in ("a", "b"):
            clear_cache()
            run_pipeline(small_cfg, str(tmp_path / name))
            outs.append(tmp_path / name)
        files = sorted(p.relative_to(outs[0]) for p in outs[0].rglob("*") if p.is_file())
        assert files == sorted(p.relative_to(outs[1]) for p in outs[1].rglob("*") if p.is_file())
        for f in files:
            assert (outs[0] / f).read_bytes() == (outs[1] / f).read_bytes(), f

    def test_stage_failure_is_named(self):
        cfg = from_dict({**SMALL, "pretrain": {"epochs": 2, "learning_rate": 1e9}})
        with pytest.raises(StageError) as info:
            build_seed(cfg, 0)
        assert info.value.stage == "pretrain" and "pretrain" in str(info.value)


class TestStudies:
    def test_mixed_set(self):
        clean = LabeledDataset([(f"c{i}", 0) for i in range(5)])
        adv = LabeledDataset([(f"a{i}", 1) for i in range(5)])
        ds = mixed_set(clean, adv, 3, 2, seed=0)
        assert len(ds) == 5 and ds.items[:3] != [] and all(t.startswith("c") for t, _ in ds.items[:3])
        assert ds.items == mixed_set(clean, adv, 3, 2, seed=0).items
        pool, is_adv = tradeoff_pool(clean, adv, 0.5, 0)
        assert len(pool) == 10 and is_adv.sum() == 5

    def test_sweep_schema(self, small_cfg, tmp_path):
        table = rows(beta_sweep(small_cfg, str(tmp_path)))
        assert tuple(table[0]) == SWEEP_HEADER and len(table) == 1 + len(small_cfg.clean_ratios)
        curves = rows((tmp_path / "sweep_curves.csv").read_text())
        assert len(curves) == 1 + len(small_cfg.clean_ratios) * len(small_cfg.beta_grid)
        for r in table[1:]:
            assert float(r[3]) >= float(r[5])

    def test_tradeoff_endpoints(self, small_cfg, tmp_path):
        table = rows(threshold_tradeoff(small_cfg, str(tmp_path)))
        assert tuple(table[0]) == TRADEOFF_HEADER and len(table) == 12
        first = [float(v) for v in table[1]]
        assert first[2:] == [1.0, 0.0, 0.0]
        fnr = [float(r[2]) for r in table[1:]]
        full = [float(r[4]) for r in table[1:]]
        assert all(np.diff(fnr) <= 0) and all(np.diff(full) >= 0)

    def test_profile_shape(self, small_cfg, tmp_path):
        table = rows(profile_heatmap(small_cfg, str(tmp_path)))
        assert table[0] == ["pre_known", "char_swap", "word_synonym", "clean"]
        assert [r[0] for r in table[1:]] == ["char_swap", "word_synonym"]
        assert all(0.0 <= float(v) <= 1.0 for r in table[1:] for v in r[1:])

    def test_profile_needs_samples(self):
        from adpmixup.harness.studies import StudyError
        cfg = from_dict({**SMALL, "attacks": {"profile": ["char_swap", "word_synonym"], "profile_samples": 10**6}})
        with pytest.raises(StudyError, match="samples"):
            profile_heatmap(cfg)


class TestCli:
    def test_module_chain(self, config_file, tmp_path, capsys):
        out = str(tmp_path / "o")
        assert main(["pretrain", "--config", config_file, "--out", out]) == 0
        assert main(["train-adapter", "--config", config_file, "--out", out]) == 0
        assert main(["attack", "--config", config_file, "--out", out, "--attack-kind", "word_synonym"]) == 0
        err = capsys.readouterr().err
        m = re.search(r"(\d+) lines written to (\S+) \((\d+) attacked, (\d+) queries\)", err)
        assert m and os.path.isfile(m.group(2))
        assert len(open(m.group(2)).read().splitlines()) == int(m.group(1))
        assert int(m.group(3)) == SMALL["corpus"]["n_train"]
        assert os.path.isfile(os.path.join(out, "adapter_clean.ckpt"))

    def test_eval_prints_table(self, config_file, tmp_path, capsys):
        assert main(["eval", "--config", config_file, "--out", str(tmp_path), "--seed", "1"]) == 0
        assert capsys.readouterr().out == (tmp_path / "results.csv").read_text()
        assert json.loads((tmp_path / "config.json").read_text())["seeds"] == [1]

    def test_config_error_exit(self, tmp_path):
        bad = tmp_path / "bad.json"
        bad.write_text(json.dumps({"nonsense": True}))
        assert main(["eval", "--config", str(bad), "--out", str(tmp_path)]) == 2
        assert main(["pretrain", "--config", str(bad), "--out", str(tmp_path)]) == 2

    def test_missing_inputs_exit(self, config_file, tmp_path):
        assert main(["pretrain", "--config", config_file, "--out", str(tmp_path), "--data", "nope.jsonl"]) == 2
        assert main(["train-adapter", "--config", config_file, "--out", str(tmp_path / "empty")]) == 2

    def test_stage_error_exit(self, tmp_path, capsys):
        cfg = tmp_path / "diverge.json"
        cfg.write_text(json.dumps({**SMALL, "pretrain": {"epochs": 2, "learning_rate": 1e9}}))
        assert main(["pretrain", "--config", str(cfg), "--out", str(tmp_path)]) == 3
        assert "pretrain" in capsys.readouterr().err

    def test_corrupt_checkpoint_exit(self, config_file, tmp_path):
        (tmp_path / "backbone.ckpt").write_bytes(b"garbage")
        assert main(["train-adapter", "--config", config_file, "--out", str(tmp_path)]) == 3

    def test_bad_attack_kind_rejected_by_parser(self, config_file, tmp_path):
        with pytest.raises(SystemExit) as info:
            main(["attack", "--config", config_file, "--out", str(tmp_path), "--attack-kind", "laser"])
        assert info.value.code == 2
