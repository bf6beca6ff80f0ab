"""Tests for staged execution, markers/resume, ablation sweeps, and reports."""

import json

import pytest

from diffboost.errors import ConfigError, StageError
from diffboost.metrics import MetricsReport
from diffboost.pipeline import (
    RUN_STAGES,
    RunConfig,
    RunPaths,
    run_ablation,
    run_pipeline,
    run_stage,
)

TINY = {
    "data": {
        "corpus": {"size": 12, "image_size": 16},
        "task": {"size": 8, "image_size": 16},
    },
    "schedule": {"steps": 8, "beta_start": 1e-3, "beta_end": 0.05},
    "denoiser": {"base_channels": 8, "depth": 2, "time_embed_dim": 16, "text_embed_dim": 16},
    "pretrain": {"iterations": 3, "batch_size": 4, "lr": 1e-3},
    "finetune": {"epochs": 2, "batch_size": 4, "lr": 1e-4},
    "generate": {"n": 2},
    "segmentation": {
        "backbone": {"kind": "basic-unet", "base_channels": 8},
        "train": {"alpha": 0.5, "n": 2, "epochs": 2, "batch_size": 4},
        "methods": ["baseline", "diffboost"],
    },
}


def tiny_config(run_dir, **extra):
    overrides = json.loads(json.dumps(TINY))
    overrides.update(extra)
    overrides["run_dir"] = str(run_dir)
    return RunConfig.from_dict(overrides)


def run_counts(paths):
    counts = {}
    for stage in RUN_STAGES:
        marker = paths.marker(stage)
        if marker.exists():
            counts[stage] = json.loads(marker.read_text())["run_count"]
    return counts


@pytest.fixture(scope="module")
def completed_run(tmp_path_factory):
    config = tiny_config(tmp_path_factory.mktemp("run"), resume=True)
    root = run_pipeline(config)
    return config, RunPaths(root)


class TestRunConfig:
    def test_defaults_are_valid(self):
        config = RunConfig.defaults()
        assert config.seed == 0
        config.corpus_spec(), config.task_spec(), config.denoiser_config()
        config.pretrain_settings(), config.finetune_settings()
        config.backbone_spec(), config.seg_train_config(seed=0)

    def test_unknown_key_rejected(self):
        with pytest.raises(ConfigError, match="unknown config key 'pretrian'"):
            RunConfig.from_dict({"pretrian": {}})
        with pytest.raises(ConfigError, match="segmentation.train.alhpa"):
            RunConfig.from_dict({"segmentation": {"train": {"alhpa": 0.5}}})

    def test_unknown_stage_rejected(self):
        with pytest.raises(ConfigError, match="unknown stage"):
            RunConfig.from_dict({"stages": ["pretrain", "deploy"]})

    def test_yaml_round_trip(self, tmp_path):
        config = tiny_config(tmp_path / "r", seed=7)
        path = tmp_path / "config.yaml"
        config.to_yaml(path)
        assert RunConfig.from_yaml(path).data == config.data

    def test_yaml_must_be_mapping(self, tmp_path):
        path = tmp_path / "bad.yaml"
        path.write_text("- a\n- b\n")
        with pytest.raises(ConfigError, match="mapping"):
            RunConfig.from_yaml(path)

    def test_overrides(self, tmp_path):
        config = tiny_config(tmp_path / "r")
        changed = config.with_overrides(seed=3, resume=True, run_dir=tmp_path / "other")
        assert changed.seed == 3 and changed.resume and changed.run_dir.name == "other"
        assert config.seed == 0  # original untouched

    def test_stage_hash_changes_with_relevant_section(self, tmp_path):
        a = tiny_config(tmp_path / "r")
        b = RunConfig.from_dict({**json.loads(json.dumps(TINY)), "run_dir": str(tmp_path / "r"),
                                 "pretrain": {"iterations": 4, "batch_size": 4, "lr": 1e-3}})
        assert a.stage_config("pretrain") != b.stage_config("pretrain")
        assert a.stage_config("generate") == b.stage_config("generate")


class TestPipelineRun:
    def test_artifacts_exist(self, completed_run):
        _, paths = completed_run
        assert (paths.corpus_dir / "manifest.json").exists()
        assert (paths.ckpt_dir / "pretrain.ckpt").exists()
        assert (paths.ckpt_dir / "finetune.ckpt").exists()
        assert (paths.cache_dir / "manifest.json").exists()
        assert (paths.seg_dir / "baseline.ckpt").exists()
        assert (paths.seg_dir / "diffboost.ckpt").exists()
        assert (paths.eval_dir / "gen_cases.csv").exists()
        assert (paths.eval_dir / "seg_diffboost_cases.csv").exists()
        assert (paths.report_dir / "summary.txt").exists()
        assert (paths.root / "config.yaml").exists()

    def test_report_has_baseline_and_diffboost_rows(self, completed_run):
        _, paths = completed_run
        text = (paths.report_dir / "segmentation.csv").read_text()
        assert "Baseline" in text and "DiffBoost" in text
        summary = (paths.report_dir / "summary.txt").read_text()
        assert "segmentation" in summary and "generation" in summary
        assert "+/-" in summary

    def test_report_aggregates_recompute_from_case_files(self, completed_run):
        _, paths = completed_run
        import csv

        with open(paths.report_dir / "segmentation.csv") as fh:
            rows = {row["method"]: row for row in csv.DictReader(fh)}
        for method in ("baseline", "diffboost"):
            cases = MetricsReport.from_csv(
                paths.eval_dir / f"seg_{method}_cases.csv", kind="segmentation"
            )
            assert float(rows[method]["dice_mean"]) == cases.mean("dice")
            assert float(rows[method]["dice_std"]) == cases.std("dice")

    def test_resume_skips_everything(self, completed_run):
        config, paths = completed_run
        before = run_counts(paths)
        run_pipeline(config)
        assert run_counts(paths) == before

    def test_deleting_cache_reruns_generate_and_downstream(self, completed_run):
        config, paths = completed_run
        before = run_counts(paths)
        (paths.cache_dir / "manifest.json").unlink()
        run_pipeline(config)
        after = run_counts(paths)
        bumped = {s for s in after if after[s] != before.get(s)}
        assert bumped == {"generate", "train-seg", "eval-seg", "report"}

    def test_config_change_invalidates_downstream_only(self, completed_run, tmp_path):
        config, paths = completed_run
        before = run_counts(paths)
        changed = RunConfig.from_dict(
            {
                **json.loads(json.dumps(TINY)),
                "run_dir": str(paths.root),
                "resume": True,
                "segmentation": {
                    "backbone": {"kind": "basic-unet", "base_channels": 8},
                    "train": {"alpha": 0.3, "n": 2, "epochs": 2, "batch_size": 4},
                    "methods": ["baseline", "diffboost"],
                },
            }
        )
        run_pipeline(changed)
        after = run_counts(paths)
        bumped = {s for s in after if after[s] != before.get(s)}
        assert bumped == {"train-seg", "eval-seg", "report"}
        # restore the original configuration state for the other tests
        run_pipeline(config)


class TestDependencyErrors:
    def test_missing_pretrain_blocks_finetune(self, tmp_path):
        config = tiny_config(tmp_path / "fresh")
        with pytest.raises(StageError) as exc_info:
            run_stage(config, "finetune")
        assert exc_info.value.missing_stage == "pretrain"

    def test_report_without_evaluations(self, tmp_path):
        config = tiny_config(tmp_path / "fresh2")
        with pytest.raises(StageError) as exc_info:
            run_stage(config, "report")
        assert exc_info.value.missing_stage == "eval-seg"

    def test_unknown_stage(self, tmp_path):
        config = tiny_config(tmp_path / "fresh3")
        with pytest.raises(ConfigError, match="unknown stage"):
            run_stage(config, "deploy")

    def test_stale_upstream_names_deepest_stage(self, completed_run, tmp_path):
        config, paths = completed_run
        edited = RunConfig.from_dict(
            {
                **json.loads(json.dumps(TINY)),
                "run_dir": str(paths.root),
                "resume": True,
                "pretrain": {"iterations": 4, "batch_size": 4, "lr": 1e-3},
            }
        )
        with pytest.raises(StageError) as exc_info:
            run_stage(edited, "train-seg")
        assert exc_info.value.missing_stage == "pretrain"


class TestDeterminism:
    def test_same_seed_reproduces_tables_bitwise(self, completed_run, tmp_path):
        config, paths = completed_run
        other = config.with_overrides(run_dir=tmp_path / "replica")
        other_root = run_pipeline(other)
        for rel in (
            "eval/gen_cases.csv",
            "eval/gen_pairing.json",
            "eval/seg_baseline_cases.csv",
            "eval/seg_diffboost_cases.csv",
            "report/segmentation.csv",
            "report/generation.csv",
            "report/summary.txt",
        ):
            assert (other_root / rel).read_bytes() == (paths.root / rel).read_bytes(), rel


class TestAblation:
    def test_alpha_sweep_rows_and_artifacts(self, completed_run):
        config, paths = completed_run
        result = run_ablation(config, "alpha", values=[0.0, 1.0])
        assert [row["value"] for row in result["rows"]] == [0.0, 1.0]
        assert result["table"].exists() and result["plot"].exists()
        cases = MetricsReport.from_csv(
            paths.ablation_dir / "alpha" / "value_0.0_cases.csv", kind="segmentation"
        )
        assert cases.mean("dice") == result["rows"][0]["dice_mean"]

    def test_n_sweep_flags_plateau_and_extends_cache(self, completed_run):
        config, paths = completed_run
        result = run_ablation(config, "n", values=[1, 10])
        assert [row["plateau_candidate"] for row in result["rows"]] == [0, 1]
        # main cache holds 2 variants; the sweep needed 10, built locally
        assert (paths.ablation_dir / "cache-n10" / "manifest.json").exists()

    def test_unknown_parameter(self, completed_run):
        config, _ = completed_run
        with pytest.raises(ConfigError, match="unknown sweep parameter"):
            run_ablation(config, "dropout")

    def test_invalid_values(self, completed_run):
        config, _ = completed_run
        with pytest.raises(ConfigError, match="alpha sweep"):
            run_ablation(config, "alpha", values=[0.5, 1.5])
        with pytest.raises(ConfigError, match="backbone"):
            run_ablation(config, "backbone", values=["mega-unet"])
        with pytest.raises(ConfigError, match="at least one"):
            run_ablation(config, "alpha", values=[])
