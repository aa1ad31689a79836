"""Tests for config loading, stage seeding, and the end-to-end pipeline."""

import os
from dataclasses import replace
from pathlib import Path

import pytest

from conftest import TINY_SYNTH
from xmodal_uap.centroids import NegativeStrategy
from xmodal_uap.embedder import TrainConfig
from xmodal_uap.errors import ArgumentError, FingerprintMismatch, StorageError
from xmodal_uap.pipeline import (
    BENCHMARK_VICTIM_SEEDS,
    ExperimentConfig,
    benchmark_config,
    check_perturbation_against,
    load_config,
    parse_direction,
    run_full_pipeline,
    stage_gen_data,
)
from xmodal_uap.synthdata import Direction


REPO_ROOT = Path(__file__).resolve().parents[1]
DEFAULT_TOML = REPO_ROOT / "configs" / "default.toml"


def _tiny_cfg(seed=7):
    cfg = ExperimentConfig(
        seed=seed,
        synth=TINY_SYNTH,
        train=TrainConfig(epochs=6, batch_identities=5, images_per_identity=2),
        attack=replace(ExperimentConfig().attack, iter_epoch=2, batch_size=8),
    )
    return cfg.bind_stage_seeds()


class TestConfig:
    def test_load_without_path_matches_defaults(self):
        cfg = load_config(None)
        assert cfg == ExperimentConfig().bind_stage_seeds()

    def test_shipped_config_matches_benchmark(self):
        cfg = load_config(str(DEFAULT_TOML))
        assert cfg == benchmark_config(7)

    def test_seed_override(self):
        cfg = load_config(str(DEFAULT_TOML), seed=42)
        assert cfg.seed == 42
        assert cfg == benchmark_config(42)

    def test_missing_file_rejected(self, tmp_path):
        with pytest.raises(StorageError):
            load_config(str(tmp_path / "absent.toml"))

    def test_unknown_section_rejected(self, tmp_path):
        path = tmp_path / "bad.toml"
        path.write_text("[nonsense]\nx = 1\n")
        with pytest.raises(ArgumentError, match="nonsense"):
            load_config(str(path))

    def test_unknown_key_rejected(self, tmp_path):
        path = tmp_path / "bad.toml"
        path.write_text("[data]\nnum_identies = 64\n")
        with pytest.raises(ArgumentError, match="num_identies"):
            load_config(str(path))

    def test_unknown_method_rejected(self, tmp_path):
        path = tmp_path / "bad.toml"
        path.write_text('[pipeline]\nmethod = "warp"\n')
        with pytest.raises(ArgumentError, match="warp"):
            load_config(str(path))

    def test_unknown_direction_rejected(self, tmp_path):
        path = tmp_path / "bad.toml"
        path.write_text('[pipeline]\ndirections = ["v2x"]\n')
        with pytest.raises(ArgumentError, match="v2x"):
            load_config(str(path))

    def test_negative_strategy_coercion(self, tmp_path):
        path = tmp_path / "ok.toml"
        path.write_text('[attack]\nnegative_strategy = "nearest"\n')
        cfg = load_config(str(path))
        assert cfg.attack.negative_strategy is NegativeStrategy.NEAREST

    def test_parse_direction(self):
        assert parse_direction("v2i") is Direction.VISIBLE_TO_INFRARED
        assert parse_direction("i2v") is Direction.INFRARED_TO_VISIBLE
        with pytest.raises(ArgumentError):
            parse_direction("sideways")


class TestSeeding:
    def test_stage_seeds_distinct_and_stable(self):
        cfg = ExperimentConfig(seed=7)
        seeds = cfg.stage_seeds()
        assert len(set(seeds.values())) == 3
        assert seeds == ExperimentConfig(seed=7).stage_seeds()

    def test_bind_stage_seeds_replaces_section_seeds(self):
        cfg = ExperimentConfig(seed=7)
        bound = cfg.bind_stage_seeds()
        seeds = cfg.stage_seeds()
        assert bound.synth.seed == seeds["data"]
        assert bound.train.seed == seeds["train"]
        assert bound.attack.seed == seeds["attack"]

    def test_hash_ignores_section_seeds(self):
        cfg = ExperimentConfig(seed=7)
        assert cfg.hash() == cfg.bind_stage_seeds().hash()

    def test_hash_tracks_root_seed_and_settings(self):
        base = ExperimentConfig(seed=7)
        assert base.hash() != ExperimentConfig(seed=8).hash()
        bumped = replace(base, attack=replace(base.attack, epsilon=16.0))
        assert base.hash() != bumped.hash()

    def test_benchmark_victim_seeds_shape(self):
        assert len(BENCHMARK_VICTIM_SEEDS) == 5
        assert len(set(BENCHMARK_VICTIM_SEEDS)) == 5


class TestFullPipeline:
    def test_tiny_run_produces_all_artifacts(self, tmp_path):
        cfg = _tiny_cfg()
        out = run_full_pipeline(cfg, str(tmp_path / "run"))
        for key in ("dataset", "checkpoint", "centroids", "csv", "text"):
            assert os.path.exists(out[key]), key
        for method, path in out["perturbations"].items():
            assert os.path.exists(path), method
        assert len(out["rows"]) == 6  # clean + cmps + stepwise, 2 directions
        methods = [row["method"] for row in out["rows"]]
        assert methods == ["clean", "cmps", "stepwise"] * 2

    def test_rerun_is_byte_identical(self, tmp_path):
        cfg = _tiny_cfg()
        first = run_full_pipeline(cfg, str(tmp_path / "a"))
        second = run_full_pipeline(cfg, str(tmp_path / "b"))
        compared = 0
        for key in ("dataset", "checkpoint", "centroids", "csv", "text"):
            with open(first[key], "rb") as fh:
                blob_a = fh.read()
            with open(second[key], "rb") as fh:
                blob_b = fh.read()
            assert blob_a == blob_b, key
            compared += 1
        for method in first["perturbations"]:
            with open(first["perturbations"][method], "rb") as fh:
                blob_a = fh.read()
            with open(second["perturbations"][method], "rb") as fh:
                blob_b = fh.read()
            assert blob_a == blob_b, method
            compared += 1
        assert compared == 7

    def test_perturbation_guard_rejects_foreign_dataset(self, tmp_path):
        cfg = _tiny_cfg()
        out = run_full_pipeline(cfg, str(tmp_path / "run"))
        other_cfg = replace(
            cfg, synth=replace(cfg.synth, seed=cfg.synth.seed + 1)
        )
        other_ds, _ = stage_gen_data(other_cfg, str(tmp_path / "other"))
        from xmodal_uap.attack import load_perturbation

        _, header = load_perturbation(out["perturbations"]["cmps"])
        with pytest.raises(FingerprintMismatch):
            check_perturbation_against(header, other_ds,
                                       out["perturbations"]["cmps"])
