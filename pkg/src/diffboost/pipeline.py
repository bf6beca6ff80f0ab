"""Staged experiment orchestration.

A run directory accumulates artifacts stage by stage::

    data -> pretrain -> finetune -> generate -> train-seg -> eval-seg -> report
                                 \\-> eval-gen ------------------------/

Each completed stage writes a JSON marker holding a hash of the stage's
slice of the configuration, the list of files it produced, and the tokens
of its upstream markers.  A stage is considered fresh only when its hash,
its outputs, and every upstream token still match, so editing a config
value or deleting an artifact re-runs exactly the affected stage and
everything downstream of it.  The synthetic data stage is materialized on
demand (it is cheap and fully determined by the config).
"""

import copy
import csv
import dataclasses
import hashlib
import json
import shutil
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import yaml

from .augmentation import (
    DEFAULT_AUG_TEXTS,
    ClassicTransformSpec,
    build_augmentation_cache,
    load_augmentation_cache,
)
from .checkpoint import load_checkpoint, save_checkpoint
from .conditioning import Vocabulary, edges_from_mask, encode_prompt
from .datagen import (
    CorpusSpec,
    SegTaskSpec,
    load_manifest,
    quantize,
    save_gray_png,
    save_manifest,
    synth_corpus,
    synth_seg_task,
)
from .denoiser import (
    DenoiserConfig,
    TrainSettings,
    make_denoiser_fn,
    model_from_checkpoint,
    train_diffusion,
)
from .diffusion import ancestral_sample, schedule_from_spec
from .errors import ConfigError, StageError
from .metrics import (
    GENERATION_METRICS,
    SEGMENTATION_METRICS,
    MetricsReport,
    generation_metrics,
    segmentation_metrics,
)
from .segmentation import (
    SEG_BACKBONES,
    SegBackboneSpec,
    SegTrainConfig,
    predict,
    seg_model_from_checkpoint,
    train_segmentation,
)

RUN_STAGES = (
    "data",
    "pretrain",
    "finetune",
    "generate",
    "train-seg",
    "eval-gen",
    "eval-seg",
    "report",
)

STAGE_DEPS = {
    "data": (),
    "pretrain": ("data",),
    "finetune": ("data", "pretrain"),
    "generate": ("data", "finetune"),
    "train-seg": ("data", "generate"),
    "eval-gen": ("data", "finetune"),
    "eval-seg": ("data", "train-seg"),
    "report": (),  # dynamic: whichever eval stages have run
}

METHOD_LABELS = {"baseline": "Baseline", "diffboost": "DiffBoost"}

DEFAULT_CONFIG = {
    "seed": 0,
    "run_dir": "run",
    "resume": False,
    "stages": ["pretrain", "finetune", "generate", "train-seg", "eval-gen", "eval-seg", "report"],
    "data": {
        "corpus": {"size": 2000, "image_size": 32, "train_fraction": 0.9, "val_fraction": 0.05},
        "task": {
            "size": 32,
            "image_size": 32,
            "modality": "echo",
            "organ": "blob",
            "category": None,
            "n_train": None,
            "n_val": None,
        },
    },
    "schedule": {"steps": 200, "beta_start": 1e-4, "beta_end": 0.05},
    "denoiser": {
        "base_channels": 32,
        "depth": 2,
        "time_embed_dim": 64,
        "text_embed_dim": 64,
    },
    "pretrain": {"iterations": 3000, "batch_size": 16, "lr": 2e-4},
    "finetune": {"epochs": 100, "batch_size": 16, "lr": 1e-6},
    "generate": {"n": 10, "aug_texts": list(DEFAULT_AUG_TEXTS)},
    "segmentation": {
        "backbone": {"kind": "attention-unet", "base_channels": 16, "depth": 2, "window": 4},
        "train": {
            "alpha": 0.5,
            "patch_size": None,
            "n": 10,
            "epochs": 100,
            "batch_size": 8,
            "lr": 1e-3,
            "weight_decay": 1e-4,
            "loss_weights": [0.5, 0.5],
            "folds": 3,
        },
        "methods": ["baseline", "classic-rotate", "classic-deep-stack", "diffboost"],
    },
    "evaluation": {"splits": ["val", "test"]},
}

SWEEP_DEFAULTS = {
    "n": [1, 2, 5, 10, 20],
    "alpha": [round(i / 10, 1) for i in range(11)],
    "patch_size": [1, 8, 32, "image"],
    "backbone": list(SEG_BACKBONES),
}

PLATEAU_MIN_N = 10


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------


def _deep_merge(base: dict, override: dict, path: str = "") -> dict:
    merged = copy.deepcopy(base)
    for key, value in override.items():
        dotted = f"{path}{key}"
        if key not in base:
            raise ConfigError(f"unknown config key {dotted!r}")
        if isinstance(base[key], dict) and isinstance(value, dict):
            merged[key] = _deep_merge(base[key], value, dotted + ".")
        else:
            merged[key] = copy.deepcopy(value)
    return merged


@dataclass
class RunConfig:
    """Resolved run configuration: defaults overlaid with a user document."""

    data: dict

    def __post_init__(self):
        for stage in self.stages:
            if stage not in RUN_STAGES:
                raise ConfigError(f"unknown stage {stage!r}; expected one of {RUN_STAGES}")
        if not isinstance(self.data["seed"], int):
            raise ConfigError("seed must be an integer")

    @classmethod
    def defaults(cls) -> "RunConfig":
        return cls(copy.deepcopy(DEFAULT_CONFIG))

    @classmethod
    def from_dict(cls, overrides: dict) -> "RunConfig":
        return cls(_deep_merge(DEFAULT_CONFIG, overrides or {}))

    @classmethod
    def from_yaml(cls, path) -> "RunConfig":
        loaded = yaml.safe_load(Path(path).read_text(encoding="utf-8"))
        if loaded is None:
            loaded = {}
        if not isinstance(loaded, dict):
            raise ConfigError(f"config file {path} must contain a mapping at the top level")
        return cls.from_dict(loaded)

    def to_yaml(self, path) -> None:
        Path(path).write_text(
            yaml.safe_dump(self.data, sort_keys=True, default_flow_style=False),
            encoding="utf-8",
        )

    def with_overrides(self, seed=None, run_dir=None, resume=None) -> "RunConfig":
        data = copy.deepcopy(self.data)
        if seed is not None:
            data["seed"] = int(seed)
        if run_dir is not None:
            data["run_dir"] = str(run_dir)
        if resume is not None:
            data["resume"] = bool(resume)
        return RunConfig(data)

    # -- scalar accessors ---------------------------------------------------

    @property
    def seed(self) -> int:
        return self.data["seed"]

    @property
    def run_dir(self) -> Path:
        return Path(self.data["run_dir"])

    @property
    def resume(self) -> bool:
        return bool(self.data["resume"])

    @property
    def stages(self) -> tuple:
        return tuple(self.data["stages"])

    @property
    def methods(self) -> tuple:
        methods = tuple(self.data["segmentation"]["methods"])
        if not methods:
            raise ConfigError("segmentation.methods must not be empty")
        return methods

    @property
    def eval_splits(self) -> tuple:
        return tuple(self.data["evaluation"]["splits"])

    # -- section accessors ----------------------------------------------------

    def corpus_spec(self) -> CorpusSpec:
        return CorpusSpec(**self.data["data"]["corpus"])

    def task_spec(self) -> SegTaskSpec:
        return SegTaskSpec(**self.data["data"]["task"])

    def schedule_spec(self) -> dict:
        return dict(self.data["schedule"])

    def denoiser_config(self) -> DenoiserConfig:
        return DenoiserConfig(**self.data["denoiser"])

    def pretrain_settings(self) -> TrainSettings:
        section = self.data["pretrain"]
        return TrainSettings(
            batch_size=section["batch_size"],
            iterations=section["iterations"],
            lr=section["lr"],
            schedule=self.schedule_spec(),
        )

    def finetune_settings(self) -> TrainSettings:
        section = self.data["finetune"]
        return TrainSettings(
            batch_size=section["batch_size"],
            epochs=section["epochs"],
            lr=section["lr"],
            schedule=self.schedule_spec(),
        )

    def backbone_spec(self) -> SegBackboneSpec:
        return SegBackboneSpec(**self.data["segmentation"]["backbone"])

    def seg_train_config(self, seed: int) -> SegTrainConfig:
        section = dict(self.data["segmentation"]["train"])
        section["loss_weights"] = tuple(section["loss_weights"])
        return SegTrainConfig(seed=seed, **section)

    # -- staging helpers ------------------------------------------------------

    def stage_seed(self, stage: str) -> int:
        entropy = np.random.SeedSequence([self.seed, RUN_STAGES.index(stage)])
        return int(entropy.generate_state(1)[0])

    def stage_config(self, stage: str) -> dict:
        sections = {
            "data": ("data",),
            "pretrain": ("schedule", "denoiser", "pretrain"),
            "finetune": ("schedule", "denoiser", "finetune"),
            "generate": ("generate",),
            "train-seg": ("segmentation",),
            "eval-gen": (),
            "eval-seg": ("segmentation", "evaluation"),
            "report": ("segmentation",),
        }[stage]
        return {name: self.data[name] for name in sections}


# ---------------------------------------------------------------------------
# run directory layout and markers
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class RunPaths:
    root: Path

    @property
    def data_dir(self):
        return self.root / "data"

    @property
    def corpus_dir(self):
        return self.data_dir / "corpus"

    @property
    def task_dir(self):
        return self.data_dir / "task"

    @property
    def ckpt_dir(self):
        return self.root / "checkpoints"

    @property
    def cache_dir(self):
        return self.root / "cache"

    @property
    def seg_dir(self):
        return self.root / "seg"

    @property
    def eval_dir(self):
        return self.root / "eval"

    @property
    def report_dir(self):
        return self.root / "report"

    @property
    def ablation_dir(self):
        return self.root / "ablation"

    def marker(self, stage: str) -> Path:
        return self.root / "markers" / f"{stage}.json"


def _config_hash(payload) -> str:
    return hashlib.sha256(
        json.dumps(payload, sort_keys=True, default=str).encode("utf-8")
    ).hexdigest()


def _read_marker(paths: RunPaths, stage: str):
    path = paths.marker(stage)
    if not path.exists():
        return None
    try:
        return json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError:
        return None


def _stage_hash(config: RunConfig, stage: str) -> str:
    return _config_hash({"stage": stage, "seed": config.seed, "config": config.stage_config(stage)})


def _deps_for(paths: RunPaths, stage: str) -> tuple:
    if stage == "report":
        return tuple(s for s in ("eval-gen", "eval-seg") if _read_marker(paths, s) is not None)
    return STAGE_DEPS[stage]


def _self_ok(config: RunConfig, paths: RunPaths, stage: str) -> bool:
    marker = _read_marker(paths, stage)
    if marker is None or marker.get("config_hash") != _stage_hash(config, stage):
        return False
    for output in marker.get("outputs", []):
        if not (paths.root / output).exists():
            return False
    upstream = marker.get("upstream", {})
    deps = _deps_for(paths, stage)
    if set(upstream) != set(deps):
        return False
    for dep, token in upstream.items():
        dep_marker = _read_marker(paths, dep)
        if dep_marker is None or dep_marker.get("token") != token:
            return False
    return True


def _is_fresh(config: RunConfig, paths: RunPaths, stage: str) -> bool:
    if not _self_ok(config, paths, stage):
        return False
    return all(_is_fresh(config, paths, dep) for dep in _deps_for(paths, stage))


def _first_stale(config: RunConfig, paths: RunPaths, stage: str) -> str:
    for dep in _deps_for(paths, stage):
        if not _is_fresh(config, paths, dep):
            return _first_stale(config, paths, dep)
    return stage


def _write_marker(config: RunConfig, paths: RunPaths, stage: str, outputs, upstream) -> dict:
    previous = _read_marker(paths, stage)
    run_count = (previous.get("run_count", 0) if previous else 0) + 1
    config_hash = _stage_hash(config, stage)
    marker = {
        "stage": stage,
        "seed": config.seed,
        "config_hash": config_hash,
        "run_count": run_count,
        "token": hashlib.sha256(f"{stage}|{config_hash}|{run_count}".encode()).hexdigest(),
        "upstream": upstream,
        "outputs": sorted(str(o) for o in outputs),
    }
    paths.marker(stage).parent.mkdir(parents=True, exist_ok=True)
    paths.marker(stage).write_text(json.dumps(marker, indent=2, sort_keys=True), encoding="utf-8")
    return marker


def _fresh_dir(path: Path) -> Path:
    if path.exists():
        shutil.rmtree(path)
    path.mkdir(parents=True)
    return path


# ---------------------------------------------------------------------------
# stage implementations
# ---------------------------------------------------------------------------


def _rel(paths: RunPaths, *files) -> list:
    return [str(Path(f).relative_to(paths.root)) for f in files]


def _stage_data(config: RunConfig, paths: RunPaths) -> list:
    vocab = Vocabulary.default()
    corpus = synth_corpus(
        config.corpus_spec(), rng=np.random.default_rng([config.seed, 101]), vocab=vocab
    )
    task = synth_seg_task(
        config.task_spec(), rng=np.random.default_rng([config.seed, 202]), vocab=vocab
    )
    save_manifest(corpus, _fresh_dir(paths.corpus_dir))
    save_manifest(task, _fresh_dir(paths.task_dir))
    vocab.save(paths.data_dir / "vocab.json")
    return _rel(
        paths,
        paths.corpus_dir / "manifest.json",
        paths.task_dir / "manifest.json",
        paths.data_dir / "vocab.json",
    )


def _load_task(paths: RunPaths):
    return load_manifest(paths.task_dir)


def _vocab(paths: RunPaths) -> Vocabulary:
    return Vocabulary.load(paths.data_dir / "vocab.json")


def _stage_pretrain(config: RunConfig, paths: RunPaths) -> list:
    corpus = load_manifest(paths.corpus_dir)
    ckpt = train_diffusion(
        corpus.split("train"),
        config.denoiser_config(),
        "pretrain",
        seed=config.stage_seed("pretrain"),
        settings=config.pretrain_settings(),
        vocab=_vocab(paths),
    )
    paths.ckpt_dir.mkdir(parents=True, exist_ok=True)
    out = paths.ckpt_dir / "pretrain.ckpt"
    save_checkpoint(ckpt, out)
    return _rel(paths, out)


def _stage_finetune(config: RunConfig, paths: RunPaths) -> list:
    task = _load_task(paths)
    init = load_checkpoint(paths.ckpt_dir / "pretrain.ckpt")
    ckpt = train_diffusion(
        task.split("train"),
        config.denoiser_config(),
        "finetune",
        init=init,
        seed=config.stage_seed("finetune"),
        settings=config.finetune_settings(),
        vocab=_vocab(paths),
    )
    out = paths.ckpt_dir / "finetune.ckpt"
    save_checkpoint(ckpt, out)
    return _rel(paths, out)


def _stage_generate(config: RunConfig, paths: RunPaths) -> list:
    task = _load_task(paths)
    ckpt = load_checkpoint(paths.ckpt_dir / "finetune.ckpt")
    if paths.cache_dir.exists():
        shutil.rmtree(paths.cache_dir)
    build_augmentation_cache(
        task.split("train"),
        ckpt,
        n=config.data["generate"]["n"],
        aug_texts=config.data["generate"]["aug_texts"],
        seed=config.stage_seed("generate"),
        cache_dir=paths.cache_dir,
        vocab=_vocab(paths),
    )
    return _rel(paths, paths.cache_dir / "manifest.json")


def _method_arms(method: str):
    """Map a method name onto (cache-used, classic-transform) arguments."""
    if method == "baseline":
        return False, None
    if method == "diffboost":
        return True, None
    if method.startswith("classic-"):
        return False, ClassicTransformSpec(method[len("classic-") :])
    raise ConfigError(
        f"unknown segmentation method {method!r}; expected 'baseline', 'diffboost', or 'classic-<kind>'"
    )


def method_label(method: str) -> str:
    if method in METHOD_LABELS:
        return METHOD_LABELS[method]
    if method.startswith("classic-"):
        return f"Classic ({method[len('classic-'):]})"
    return method


def _stage_train_seg(config: RunConfig, paths: RunPaths) -> list:
    task = _load_task(paths)
    train_records = task.split("train")
    cache = load_augmentation_cache(paths.cache_dir)
    seg_seed = config.stage_seed("train-seg")
    seg_config = config.seg_train_config(seed=seg_seed)
    spec = config.backbone_spec()

    paths.seg_dir.mkdir(parents=True, exist_ok=True)
    outputs = []
    for method in config.methods:
        uses_cache, classic = _method_arms(method)
        ckpt = train_segmentation(
            train_records,
            cache if uses_cache else None,
            spec,
            seg_config,
            classic=classic,
        )
        out = paths.seg_dir / f"{method}.ckpt"
        save_checkpoint(ckpt, out)
        outputs.append(out)
    return _rel(paths, *outputs)


def _eval_records(config: RunConfig, task):
    records = [rec for split in config.eval_splits for rec in task.split(split)]
    if not records:
        raise ConfigError(f"evaluation splits {config.eval_splits} selected no records")
    return records


def _stage_eval_gen(config: RunConfig, paths: RunPaths) -> list:
    task = _load_task(paths)
    records = list(task.records)
    ckpt = load_checkpoint(paths.ckpt_dir / "finetune.ckpt")
    vocab = _vocab(paths)
    model = model_from_checkpoint(ckpt, vocab)
    table = model.export_embedding_table()
    schedule = schedule_from_spec(ckpt.schedule_spec)

    text = np.stack([encode_prompt(rec.triplet, table) for rec in records])
    edges = np.stack([edges_from_mask(rec.mask) for rec in records])
    fn = make_denoiser_fn(model, text, edges)
    rng = np.random.default_rng([config.stage_seed("eval-gen")])
    shape = (len(records),) + records[0].image.shape
    samples = quantize(ancestral_sample(fn, None, schedule, shape, rng))

    paths.eval_dir.mkdir(parents=True, exist_ok=True)
    generated_dir = _fresh_dir(paths.eval_dir / "generated")
    report = MetricsReport(kind="generation")
    for i, rec in enumerate(records):
        report.add(rec.case_id, generation_metrics(samples[i], rec.image))
        save_gray_png(samples[i], generated_dir / f"{rec.case_id}.png")

    # fidelity gap: each sample against its own original vs a rotated pairing
    rolled = np.roll(np.arange(len(records)), 1)
    paired = [float(np.mean(np.abs(samples[i] - records[i].image))) for i in range(len(records))]
    shuffled = [
        float(np.mean(np.abs(samples[i] - records[rolled[i]].image))) for i in range(len(records))
    ]
    pairing = {
        "cases": len(records),
        "paired_mae": float(np.mean(paired)),
        "shuffled_mae": float(np.mean(shuffled)),
    }

    cases_csv = paths.eval_dir / "gen_cases.csv"
    report.to_csv(cases_csv)
    pairing_json = paths.eval_dir / "gen_pairing.json"
    pairing_json.write_text(json.dumps(pairing, indent=2, sort_keys=True), encoding="utf-8")
    return _rel(paths, cases_csv, pairing_json)


def _stage_eval_seg(config: RunConfig, paths: RunPaths) -> list:
    task = _load_task(paths)
    records = _eval_records(config, task)
    paths.eval_dir.mkdir(parents=True, exist_ok=True)
    outputs = []
    for method in config.methods:
        model = seg_model_from_checkpoint(load_checkpoint(paths.seg_dir / f"{method}.ckpt"))
        report = MetricsReport(kind="segmentation", spacing=(1.0, 1.0))
        for rec in records:
            row = segmentation_metrics(predict(model, rec.image), rec.mask, spacing=rec.spacing)
            report.add(rec.case_id, row)
        out = paths.eval_dir / f"seg_{method}_cases.csv"
        report.to_csv(out)
        outputs.append(out)
    return _rel(paths, *outputs)


def _write_table(path: Path, header, rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for row in rows:
            writer.writerow([repr(v) if isinstance(v, float) else v for v in row])


def _plot_bars(path: Path, labels, means, stds, ylabel: str, title: str) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(max(4.0, 1.2 * len(labels)), 3.2))
    ax.bar(range(len(labels)), means, yerr=stds, capsize=4, color="#4878d0")
    ax.set_xticks(range(len(labels)))
    ax.set_xticklabels(labels, rotation=20, ha="right")
    ax.set_ylabel(ylabel)
    ax.set_title(title)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)


def _plot_sweep(path: Path, labels, means, stds, xlabel: str, title: str) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    xs = range(len(labels))
    fig, ax = plt.subplots(figsize=(4.8, 3.2))
    ax.errorbar(xs, means, yerr=stds, marker="o", capsize=3, color="#4878d0")
    ax.set_xticks(list(xs))
    ax.set_xticklabels([str(v) for v in labels], rotation=20, ha="right")
    ax.set_xlabel(xlabel)
    ax.set_ylabel("dice")
    ax.set_title(title)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)


def _stage_report(config: RunConfig, paths: RunPaths) -> list:
    gen_csv = paths.eval_dir / "gen_cases.csv"
    seg_csvs = [
        (method, paths.eval_dir / f"seg_{method}_cases.csv")
        for method in config.methods
        if (paths.eval_dir / f"seg_{method}_cases.csv").exists()
    ]
    if not gen_csv.exists() and not seg_csvs:
        raise StageError(
            "no evaluation artifacts found; run 'eval-seg' or 'eval-gen' first",
            missing_stage="eval-seg",
        )

    paths.report_dir.mkdir(parents=True, exist_ok=True)
    outputs = []
    summary_lines = []

    if seg_csvs:
        header = ["method", "label", "cases"]
        for metric in SEGMENTATION_METRICS:
            header += [f"{metric}_mean", f"{metric}_std"]
        rows, labels, dice_means, dice_stds = [], [], [], []
        summary_lines.append("segmentation (mean +/- std over held-out cases):")
        for method, path in seg_csvs:
            report = MetricsReport.from_csv(path, kind="segmentation")
            row = [method, method_label(method), len(report.rows)]
            for metric in SEGMENTATION_METRICS:
                row += [report.mean(metric), report.std(metric)]
            rows.append(row)
            labels.append(method_label(method))
            dice_means.append(report.mean("dice"))
            dice_stds.append(report.std("dice"))
            summary_lines.append(
                "  {:<22s} dice {:.4f} +/- {:.4f}   hd95 {:.4f} +/- {:.4f}   assd {:.4f} +/- {:.4f}".format(
                    method_label(method),
                    report.mean("dice"),
                    report.std("dice"),
                    report.mean("hd95"),
                    report.std("hd95"),
                    report.mean("assd"),
                    report.std("assd"),
                )
            )
        seg_table = paths.report_dir / "segmentation.csv"
        _write_table(seg_table, header, rows)
        seg_plot = paths.report_dir / "segmentation_dice.png"
        _plot_bars(seg_plot, labels, dice_means, dice_stds, "dice", "segmentation methods")
        outputs += [seg_table, seg_plot]

    if gen_csv.exists():
        report = MetricsReport.from_csv(gen_csv, kind="generation")
        rows = [
            [metric, report.mean(metric), report.std(metric)] for metric in GENERATION_METRICS
        ]
        gen_table = paths.report_dir / "generation.csv"
        _write_table(gen_table, ["metric", "mean", "std"], rows)
        summary_lines.append(f"generation ({len(report.rows)} cases, mean +/- std):")
        for metric in GENERATION_METRICS:
            summary_lines.append(
                f"  {metric:<8s} {report.mean(metric):.4f} +/- {report.std(metric):.4f}"
            )
        pairing_json = paths.eval_dir / "gen_pairing.json"
        if pairing_json.exists():
            pairing = json.loads(pairing_json.read_text(encoding="utf-8"))
            summary_lines.append(
                "  edge-pairing fidelity gap: paired MAE {paired_mae:.4f} vs shuffled MAE {shuffled_mae:.4f}".format(
                    **pairing
                )
            )
        gen_plot = paths.report_dir / "generation_metrics.png"
        _plot_bars(
            gen_plot,
            list(GENERATION_METRICS),
            [report.mean(m) for m in GENERATION_METRICS],
            [report.std(m) for m in GENERATION_METRICS],
            "value",
            "generation metrics",
        )
        outputs += [gen_table, gen_plot]

    summary = paths.report_dir / "summary.txt"
    summary.write_text("\n".join(summary_lines) + "\n", encoding="utf-8")
    outputs.append(summary)
    return _rel(paths, *outputs)


_STAGE_FUNCS = {
    "data": _stage_data,
    "pretrain": _stage_pretrain,
    "finetune": _stage_finetune,
    "generate": _stage_generate,
    "train-seg": _stage_train_seg,
    "eval-gen": _stage_eval_gen,
    "eval-seg": _stage_eval_seg,
    "report": _stage_report,
}


# ---------------------------------------------------------------------------
# public entry points
# ---------------------------------------------------------------------------


def run_stage(config: RunConfig, stage: str) -> RunPaths:
    """Execute one stage (materializing the synthetic data on demand),
    honoring completion markers when resuming."""
    if stage not in RUN_STAGES:
        raise ConfigError(f"unknown stage {stage!r}; expected one of {RUN_STAGES}")
    paths = RunPaths(Path(config.run_dir))
    paths.root.mkdir(parents=True, exist_ok=True)

    if stage == "report" and not _deps_for(paths, stage):
        raise StageError(
            "report needs at least one completed evaluation stage; run 'eval-seg' first",
            missing_stage="eval-seg",
        )

    upstream = {}
    for dep in _deps_for(paths, stage):
        if dep == "data":
            run_stage(config, "data")
        elif not _is_fresh(config, paths, dep):
            first = _first_stale(config, paths, dep)
            raise StageError(
                f"stage '{stage}' needs '{dep}' to be up to date; run '{first}' first",
                missing_stage=first,
            )
        upstream[dep] = _read_marker(paths, dep)["token"]

    skippable = config.resume or stage == "data"
    if skippable and _is_fresh(config, paths, stage):
        return paths

    outputs = _STAGE_FUNCS[stage](config, paths)
    _write_marker(config, paths, stage, outputs, upstream)
    return paths


def run_pipeline(config: RunConfig) -> Path:
    """Run the configured stages in dependency order and persist the resolved
    configuration alongside the artifacts."""
    paths = RunPaths(Path(config.run_dir))
    paths.root.mkdir(parents=True, exist_ok=True)
    config.to_yaml(paths.root / "config.yaml")
    for stage in RUN_STAGES:
        if stage in config.stages:
            run_stage(config, stage)
    return paths.root


# ---------------------------------------------------------------------------
# ablation sweeps
# ---------------------------------------------------------------------------


def _check_sweep_values(param: str, values) -> list:
    if not values:
        raise ConfigError("sweep needs at least one value")
    out = []
    for value in values:
        if param == "n":
            if not isinstance(value, int) or value < 1:
                raise ConfigError(f"n sweep values must be positive ints, got {value!r}")
        elif param == "alpha":
            value = float(value)
            if not 0.0 <= value <= 1.0:
                raise ConfigError(f"alpha sweep values must lie in [0, 1], got {value!r}")
        elif param == "patch_size":
            if value != "image" and (not isinstance(value, int) or value < 1):
                raise ConfigError(
                    f"patch_size sweep values must be positive ints or 'image', got {value!r}"
                )
        elif param == "backbone":
            if value not in SEG_BACKBONES:
                raise ConfigError(f"unknown backbone {value!r}; expected one of {SEG_BACKBONES}")
        out.append(value)
    return out


def _sweep_cache(config: RunConfig, paths: RunPaths, needed_n: int):
    """Return a cache with at least ``needed_n`` variants per image, building
    a sweep-local one next to the main cache when the main one is too small."""
    cache = load_augmentation_cache(paths.cache_dir)
    if cache.n >= needed_n:
        return cache
    sweep_dir = paths.ablation_dir / f"cache-n{needed_n}"
    seed = config.stage_seed("generate")
    if (sweep_dir / "manifest.json").exists():
        existing = load_augmentation_cache(sweep_dir)
        if existing.n == needed_n and existing.meta.get("seed") == seed:
            return existing
    task = _load_task(paths)
    ckpt = load_checkpoint(paths.ckpt_dir / "finetune.ckpt")
    if sweep_dir.exists():
        shutil.rmtree(sweep_dir)
    return build_augmentation_cache(
        task.split("train"),
        ckpt,
        n=needed_n,
        aug_texts=config.data["generate"]["aug_texts"],
        seed=seed,
        cache_dir=sweep_dir,
        vocab=_vocab(paths),
    )


def run_ablation(config: RunConfig, param: str, values=None) -> dict:
    """Sweep one hyperparameter, training one segmentation model per value on
    shared upstream artifacts, and emit a summary table plus a line plot."""
    if param not in SWEEP_DEFAULTS:
        raise ConfigError(
            f"unknown sweep parameter {param!r}; expected one of {tuple(SWEEP_DEFAULTS)}"
        )
    values = _check_sweep_values(param, SWEEP_DEFAULTS[param] if values is None else list(values))

    shared = config.with_overrides(resume=True)
    for stage in ("pretrain", "finetune", "generate"):
        run_stage(shared, stage)
    paths = RunPaths(Path(config.run_dir))

    task = _load_task(paths)
    train_records = task.split("train")
    eval_records = _eval_records(config, task)
    seg_seed = config.stage_seed("train-seg")
    base_config = config.seg_train_config(seed=seg_seed)
    base_spec = config.backbone_spec()

    needed_n = max(values) if param == "n" else base_config.n
    cache = _sweep_cache(config, paths, needed_n)

    sweep_dir = paths.ablation_dir / param
    sweep_dir.mkdir(parents=True, exist_ok=True)

    rows = []
    for value in values:
        seg_config, spec = base_config, base_spec
        if param == "backbone":
            spec = dataclasses.replace(base_spec, kind=value)
        else:
            seg_config = dataclasses.replace(base_config, **{param: value})
        ckpt = train_segmentation(train_records, cache, spec, seg_config)
        model = seg_model_from_checkpoint(ckpt)
        report = MetricsReport(kind="segmentation", spacing=(1.0, 1.0))
        for rec in eval_records:
            report.add(
                rec.case_id,
                segmentation_metrics(predict(model, rec.image), rec.mask, spacing=rec.spacing),
            )
        report.to_csv(sweep_dir / f"value_{value}_cases.csv")
        row = {
            "value": value,
            "dice_mean": report.mean("dice"),
            "dice_std": report.std("dice"),
            "hd95_mean": report.mean("hd95"),
            "hd95_std": report.std("hd95"),
            "assd_mean": report.mean("assd"),
            "assd_std": report.std("assd"),
        }
        if param == "n":
            row["plateau_candidate"] = int(value >= PLATEAU_MIN_N)
        rows.append(row)

    header = list(rows[0])
    table = paths.ablation_dir / f"{param}.csv"
    _write_table(table, header, [[row[k] for k in header] for row in rows])
    plot = paths.ablation_dir / f"{param}.png"
    _plot_sweep(
        plot,
        [row["value"] for row in rows],
        [row["dice_mean"] for row in rows],
        [row["dice_std"] for row in rows],
        param,
        f"{param} sweep",
    )
    return {"param": param, "rows": rows, "table": table, "plot": plot}


def write_report(config: RunConfig) -> RunPaths:
    """Consolidate evaluation artifacts into tables, a summary, and plots."""
    return run_stage(config, "report")
