import json
from contextlib import contextmanager
from pathlib import Path
from typing import Optional

import numpy as np
import typer
from pydantic import BaseModel, ValidationError
from rich.table import Table

from neurospike.config import (
    SEED_ENVVAR,
    SWEEP_THRESHOLDS,
    CliConfig,
    ModelName,
    PipelineConfig,
    QualityConfig,
    Subcommand,
    SynthConfig,
    TrainConfig,
    load_config,
    resolve_config,
)
from neurospike.dataset import (
    TRIAL_FILE,
    dataset_hash,
    discover_trials,
    load_dataset,
    read_manifest,
    read_recording,
    write_epoch_dataset,
    write_manifest,
    write_recording,
    write_recordings_manifest,
    write_spike_dataset,
)
from neurospike.eeg import (
    CHANNELS,
    PipelineStats,
    QualityGrade,
    grand_average,
    iter_cnv_trials,
    preprocess_recording,
    quality_grade,
    quality_report,
)
from neurospike.errors import FormatError, NeurospikeError, TrialRejected
from neurospike.graph import adjacency_from_dataset
from neurospike.harness import (
    ExperimentReport,
    encode_dataset,
    restore_model,
    run_comparison,
    run_threshold_sweep,
)
from neurospike.report import ReportWriter, format_p, mean_sd
from neurospike.storage import save_checkpoint, write_ntsr
from neurospike.utils import console, error, info, warning

cli = typer.Typer(no_args_is_help=True)

RUN_FILE = "run.json"

SEED_OPTION = typer.Option(
    None,
    "--seed",
    envvar=SEED_ENVVAR,
    help="Run seed; every random stream is derived from it [default: 0]",
)
CONFIG_OPTION = typer.Option(
    None,
    "--config",
    exists=True,
    file_okay=True,
    dir_okay=False,
    readable=True,
    resolve_path=True,
    help="TOML file with a [tool.neurospike] table (pyproject.toml) or "
    "top-level keys; command-line flags take precedence",
)
JOBS_OPTION = typer.Option(
    None, "--jobs", help="Worker processes for the folds [default: 1]"
)
PAIRED_OPTION = typer.Option(
    None,
    "--paired/--welch",
    help="Paired t-test instead of Welch's two-sample test "
    "[default: welch]",
)


def input_option(help: str):
    return typer.Option(
        ...,
        "--input",
        "-i",
        exists=True,
        file_okay=False,
        dir_okay=True,
        readable=True,
        resolve_path=True,
        help=help,
    )


def output_option(help: str):
    return typer.Option(
        ...,
        "--output",
        "-o",
        file_okay=False,
        dir_okay=True,
        resolve_path=True,
        help=help,
    )


@contextmanager
def reported_errors():
    """Print neurospike errors and exit with code 1."""
    try:
        yield
    except NeurospikeError as exc:
        error(str(exc))
        raise typer.Exit(code=1) from exc


def resolve(model, file_config: dict, section: str, **flags):
    try:
        return resolve_config(model, file_config, section, **flags)
    except ValidationError as exc:
        problems = "; ".join(
            f"{'.'.join(str(loc) for loc in item['loc'])}: {item['msg']}"
            for item in exc.errors()
        )
        raise typer.BadParameter(problems) from exc


def parse_models(value: str) -> list[ModelName]:
    models = []
    for name in filter(None, (part.strip() for part in value.split(","))):
        try:
            models.append(ModelName(name.lower()))
        except ValueError as exc:
            raise typer.BadParameter(
                f"unknown model '{name}'; choose from "
                f"{', '.join(model.value for model in ModelName)}",
                param_hint="'--models'",
            ) from exc
    if not models:
        raise typer.BadParameter("no model given", param_hint="'--models'")
    return models


def positive_threshold(value: float) -> float:
    if value <= 0:
        raise typer.BadParameter(
            f"threshold must be > 0, got {value:g}",
            param_hint="'--threshold'",
        )
    return value


def parse_thresholds(value: str) -> list[float]:
    try:
        thresholds = [
            float(part) for part in value.split(",") if part.strip()
        ]
    except ValueError as exc:
        raise typer.BadParameter(
            f"'{value}' is not a comma-separated list of numbers",
            param_hint="'--thresholds'",
        ) from exc
    if not thresholds or min(thresholds) <= 0:
        raise typer.BadParameter(
            "thresholds must be positive", param_hint="'--thresholds'"
        )
    return thresholds


def write_run(run: CliConfig) -> None:
    path = run.output / RUN_FILE
    path.write_text(
        json.dumps(run.model_dump(mode="json"), indent=2, sort_keys=True)
        + "\n",
        encoding="utf-8",
    )
    info(f"Resolved configuration saved to '{path}'")


def print_config(title: str, settings: BaseModel) -> None:
    table = Table(title=title)
    table.add_column("Key", style="green", no_wrap=True)
    table.add_column("Value", style="green", no_wrap=True)
    for key, value in settings.model_dump(mode="json").items():
        table.add_row(f"{key}", f"{value}")
    console.print(table)


def print_report(report: ExperimentReport) -> None:
    sweep = report.kind == "sweep"
    table = Table(title="Threshold sweep" if sweep else "Model comparison")
    table.add_column("Threshold" if sweep else "Model", style="green")
    for column in ("Acc (%)", "TPR (%)", "TNR (%)", "Epochs", "p (Acc)"):
        table.add_column(column, justify="right")
    for model in report.models:
        table.add_row(
            model.name,
            mean_sd(model.mean.acc, model.sd.acc),
            mean_sd(model.mean.tpr, model.sd.tpr),
            mean_sd(model.mean.tnr, model.sd.tnr),
            mean_sd(model.mean.epochs, model.sd.epochs, 0),
            format_p((model.p_vs_ref or {}).get("acc")),
        )
    console.print(table)


def train_settings(file_config: dict, **flags) -> TrainConfig:
    return resolve(TrainConfig, file_config, "train", **flags)


@cli.command()
def synth(
    output: Path = output_option("Directory the trials are written to"),
    trials: Optional[int] = typer.Option(
        None, "--trials", help="Number of trials [default: 240]"
    ),
    noise: Optional[float] = typer.Option(
        None, "--noise", help="Background noise SD in µV [default: 10]"
    ),
    ramp: Optional[float] = typer.Option(
        None,
        "--ramp",
        help="Final-segment CNV ramp depth in µV; 0 gives a no-signal "
        "control [default: 30]",
    ),
    participants: Optional[int] = typer.Option(
        None, "--participants", help="Simulated participants [default: 1]"
    ),
    seed: Optional[int] = SEED_OPTION,
    config: Optional[Path] = CONFIG_OPTION,
):
    """
    Generate a synthetic CNV dataset in the recording format.
    """
    file_config = load_config(config)
    settings = resolve(
        SynthConfig,
        file_config,
        "synth",
        n_trials=trials,
        noise_std=noise,
        ramp_amplitude=ramp,
        participants=participants,
        seed=seed,
    )
    info(f"Synthesising {settings.n_trials} trials into '{output}'")
    with reported_errors():
        output.mkdir(parents=True, exist_ok=True)
        trial_ids = []
        for recording in iter_cnv_trials(settings):
            write_recording(output, recording)
            trial_ids.append(recording.trial_id)
        write_recordings_manifest(
            output, trial_ids, settings.model_dump(mode="json")
        )
    print_config("Synthetic dataset", settings)
    info(f"Dataset hash {dataset_hash(output)}")
    write_run(
        CliConfig(subcommand=Subcommand.synth, output=output, synth=settings)
    )


@cli.command()
def preprocess(
    input: Path = input_option("Directory of recorded trials"),
    output: Path = output_option("Directory the epoch dataset is written to"),
    low: Optional[float] = typer.Option(
        None, "--low", help="Band-pass low edge in Hz [default: 0.1]"
    ),
    high: Optional[float] = typer.Option(
        None, "--high", help="Band-pass high edge in Hz [default: 1.0]"
    ),
    transition: Optional[float] = typer.Option(
        None,
        "--transition",
        help="FIR transition width in Hz [default: 0.1]",
    ),
    amplitude_limit: Optional[float] = typer.Option(
        None,
        "--amplitude-limit",
        help="Artifact amplitude limit in µV [default: 100]",
    ),
    target_length: Optional[int] = typer.Option(
        None,
        "--target-length",
        help="Zero-padded epoch length in samples [default: 1848]",
    ),
    adjacency: bool = typer.Option(
        False,
        "--adjacency",
        help="Also write the dataset-level channel adjacency",
    ),
    grand_average_path: Optional[Path] = typer.Option(
        None,
        "--grand-average",
        dir_okay=False,
        resolve_path=True,
        help="Write the per-label Cz grand average [2, L] to this file",
    ),
    config: Optional[Path] = CONFIG_OPTION,
):
    """
    Filter, clean, epoch, baseline-correct, reject, normalise and pad.
    """
    file_config = load_config(config)
    settings = resolve(
        PipelineConfig,
        file_config,
        "pipeline",
        low_hz=low,
        high_hz=high,
        transition_hz=transition,
        amplitude_limit_uv=amplitude_limit,
        target_length=target_length,
    )
    trial_dirs = discover_trials(input)
    if not trial_dirs:
        raise typer.BadParameter(
            f"no '{TRIAL_FILE}' found below '{input}'",
            param_hint="'--input'",
        )
    info(f"Preprocessing {len(trial_dirs)} trials from '{input}'")

    stats = PipelineStats()
    skipped = []

    def epochs():
        nonlocal stats
        for trial_dir in trial_dirs:
            try:
                recording = read_recording(trial_dir)
            except FormatError as exc:
                warning(str(exc))
                skipped.append(trial_dir)
                continue
            if recording.rejected:
                stats.trials += 1
                stats.trials_screened_out += 1
                continue
            try:
                kept, trial_stats = preprocess_recording(recording, settings)
            except TrialRejected as exc:
                warning(str(exc))
                stats.trials += 1
                stats.trials_rejected += 1
                continue
            stats = stats.add(trial_stats)
            yield from kept

    with reported_errors():
        manifest = write_epoch_dataset(
            output, epochs(), settings.model_dump(mode="json")
        )
        manifest.stages = stats.model_dump()
        write_manifest(output, manifest)
        if not manifest.epochs:
            raise FormatError("no epoch survived preprocessing")
        if adjacency or grand_average_path:
            data, labels, _ = load_dataset(output)
        if adjacency:
            shared = adjacency_from_dataset(data, manifest.channels)
            write_ntsr(output / "adjacency.ntsr", shared.A)
            (output / "adjacency.json").write_text(
                json.dumps(shared.metadata(), indent=2) + "\n",
                encoding="utf-8",
            )
            info(f"Adjacency saved to '{output / 'adjacency.ntsr'}'")
        if grand_average_path:
            write_ntsr(grand_average_path, grand_average(data, labels))
            info(f"Grand average saved to '{grand_average_path}'")

    if skipped:
        warning(f"{len(skipped)} malformed trial(s) were skipped:")
        console.print(
            f"{', '.join(str(path) for path in skipped)}", style="blue"
        )
    print_config("Preprocessing", stats)
    write_run(
        CliConfig(
            subcommand=Subcommand.preprocess,
            input=input,
            output=output,
            pipeline=settings,
        )
    )


@cli.command()
def encode(
    input: Path = input_option("Normalised epoch dataset"),
    output: Path = output_option("Directory the spike dataset is written to"),
    threshold: float = typer.Option(
        0.5,
        "--threshold",
        callback=positive_threshold,
        help="Delta-modulation threshold on normalised data",
    ),
):
    """
    Delta-modulate a normalised epoch dataset into SPKT spike trains.
    """
    with reported_errors():
        data, _, manifest = load_dataset(input)
        if manifest.kind != "epochs":
            raise FormatError(f"'{input}' is not a floating-point dataset")
        spikes = encode_dataset(data, threshold, manifest.lengths)
        encoded = write_spike_dataset(output, spikes, manifest, threshold)
    info(
        f"Encoded {len(spikes)} epochs at threshold {threshold:g}: "
        f"mean spike density {encoded.spike_density:.6f}"
    )
    write_run(
        CliConfig(
            subcommand=Subcommand.encode,
            input=input,
            output=output,
            threshold=threshold,
        )
    )


def run_experiment(
    subcommand: Subcommand,
    input: Path,
    output: Path,
    models: list[ModelName],
    settings: TrainConfig,
    checkpoint: Optional[Path] = None,
) -> None:
    with reported_errors():
        data, labels, manifest = load_dataset(input)
        info(
            f"Loaded {len(labels)} epochs ({int(labels.sum())} of class 1) "
            f"from '{input}'"
        )

        def save_last_fold(name, outcomes):
            if checkpoint is not None:
                last = outcomes[-1]
                save_checkpoint(checkpoint, last.state, last.metadata)
                info(f"Checkpoint of '{name.value}' saved to '{checkpoint}'")

        report = run_comparison(
            data,
            labels,
            models,
            settings,
            channels=manifest.channels,
            dataset_hash=dataset_hash(input),
            on_fold=save_last_fold,
        )
        ReportWriter(report, output).run()
    print_report(report)
    write_run(
        CliConfig(
            subcommand=subcommand,
            input=input,
            output=output,
            models=models,
            train=settings,
        )
    )


@cli.command()
def train(
    input: Path = input_option("Epoch or spike dataset"),
    output: Path = output_option("Directory the reports are written to"),
    model: ModelName = typer.Option(
        ModelName.csnn, "--model", help="Classifier to cross-validate"
    ),
    folds: Optional[int] = typer.Option(
        None, "--folds", help="Cross-validation folds [default: 10]"
    ),
    max_epochs: Optional[int] = typer.Option(
        None, "--max-epochs", help="Training epochs per fold [default: 1000]"
    ),
    patience: Optional[int] = typer.Option(
        None, "--patience", help="Early-stopping patience [default: 50]"
    ),
    batch_size: Optional[int] = typer.Option(
        None, "--batch-size", help="Mini-batch size [default: 8]"
    ),
    lr: Optional[float] = typer.Option(
        None, "--lr", help="Adam learning rate [default: 5e-4]"
    ),
    steps: Optional[int] = typer.Option(
        None, "--steps", help="CSNN time steps [default: 25]"
    ),
    beta: Optional[float] = typer.Option(
        None, "--beta", help="LIF membrane decay [default: 0.5]"
    ),
    lif_threshold: Optional[float] = typer.Option(
        None, "--lif-threshold", help="LIF firing threshold [default: 0.5]"
    ),
    slope: Optional[float] = typer.Option(
        None, "--slope", help="Surrogate gradient slope [default: 0.25]"
    ),
    checkpoint: Optional[Path] = typer.Option(
        None,
        "--checkpoint",
        file_okay=False,
        resolve_path=True,
        help="Save the model of the last fold to this directory",
    ),
    jobs: Optional[int] = JOBS_OPTION,
    seed: Optional[int] = SEED_OPTION,
    config: Optional[Path] = CONFIG_OPTION,
):
    """
    Cross-validate one model and write JSON, CSV and Markdown reports.
    """
    settings = train_settings(
        load_config(config),
        folds=folds,
        max_epochs=max_epochs,
        patience=patience,
        batch_size=batch_size,
        lr=lr,
        steps=steps,
        beta=beta,
        threshold=lif_threshold,
        slope=slope,
        jobs=jobs,
        seed=seed,
    )
    run_experiment(
        Subcommand.train, input, output, [model], settings, checkpoint
    )


@cli.command()
def compare(
    input: Path = input_option("Epoch or spike dataset"),
    output: Path = output_option("Directory the reports are written to"),
    models: str = typer.Option(
        "csnn,cnn",
        "--models",
        help="Comma-separated models; p-values are against the first",
    ),
    folds: Optional[int] = typer.Option(
        None, "--folds", help="Cross-validation folds [default: 10]"
    ),
    max_epochs: Optional[int] = typer.Option(
        None, "--max-epochs", help="Training epochs per fold [default: 1000]"
    ),
    patience: Optional[int] = typer.Option(
        None, "--patience", help="Early-stopping patience [default: 50]"
    ),
    paired: Optional[bool] = PAIRED_OPTION,
    jobs: Optional[int] = JOBS_OPTION,
    seed: Optional[int] = SEED_OPTION,
    config: Optional[Path] = CONFIG_OPTION,
):
    """
    Cross-validate several models on the same folds and compare them.
    """
    chosen = parse_models(models)
    settings = train_settings(
        load_config(config),
        folds=folds,
        max_epochs=max_epochs,
        patience=patience,
        paired=paired,
        jobs=jobs,
        seed=seed,
    )
    run_experiment(Subcommand.compare, input, output, chosen, settings)


@cli.command()
def sweep(
    input: Path = input_option("Normalised epoch dataset"),
    output: Path = output_option("Directory the reports are written to"),
    thresholds: str = typer.Option(
        ",".join(f"{value:g}" for value in SWEEP_THRESHOLDS),
        "--thresholds",
        help="Comma-separated delta-modulation thresholds",
    ),
    folds: Optional[int] = typer.Option(
        None, "--folds", help="Cross-validation folds [default: 10]"
    ),
    max_epochs: Optional[int] = typer.Option(
        None, "--max-epochs", help="Training epochs per fold [default: 1000]"
    ),
    patience: Optional[int] = typer.Option(
        None, "--patience", help="Early-stopping patience [default: 50]"
    ),
    paired: Optional[bool] = PAIRED_OPTION,
    jobs: Optional[int] = JOBS_OPTION,
    seed: Optional[int] = SEED_OPTION,
    config: Optional[Path] = CONFIG_OPTION,
):
    """
    Encode at each threshold and cross-validate the CSNN on the spikes.
    """
    values = parse_thresholds(thresholds)
    settings = train_settings(
        load_config(config),
        folds=folds,
        max_epochs=max_epochs,
        patience=patience,
        paired=paired,
        jobs=jobs,
        seed=seed,
    )
    with reported_errors():
        data, labels, manifest = load_dataset(input)
        if manifest.kind != "epochs":
            raise FormatError(f"'{input}' is not a floating-point dataset")
        report = run_threshold_sweep(
            data,
            labels,
            values,
            settings,
            lengths=manifest.lengths,
            dataset_hash=dataset_hash(input),
        )
        ReportWriter(report, output).run()
    print_report(report)
    write_run(
        CliConfig(
            subcommand=Subcommand.sweep,
            input=input,
            output=output,
            thresholds=values,
            train=settings,
        )
    )


def inspect_recordings(path: Path, quality: QualityConfig) -> None:
    trial_dirs = discover_trials(path)
    info(f"{len(trial_dirs)} trial(s) below '{path}'")
    worst = np.zeros(len(CHANNELS))
    flagged = np.zeros(len(CHANNELS))
    windows = 0
    for trial_dir in trial_dirs:
        recording = read_recording(trial_dir)
        report = quality_report(recording, quality)
        if report.size == 0:
            continue
        worst = np.maximum(worst, report.max(axis=1))
        flagged += (report >= 0.5).sum(axis=1)
        windows += report.shape[1]
    table = Table(title="Signal quality")
    table.add_column("Channel", style="green")
    table.add_column("Worst QI", justify="right")
    table.add_column("Grade")
    table.add_column("Orange/red windows", justify="right")
    styles = {
        QualityGrade.green: "green",
        QualityGrade.orange: "yellow",
        QualityGrade.red: "red",
    }
    for index, name in enumerate(CHANNELS):
        grade = quality_grade(worst[index])
        share = flagged[index] / windows if windows else 0.0
        table.add_row(
            name,
            f"{worst[index]:.3f}",
            f"[{styles[grade]}]{grade.value}[/{styles[grade]}]",
            f"{100 * share:.1f}%",
        )
    console.print(table)


def inspect_dataset(path: Path) -> None:
    data, labels, manifest = load_dataset(path)
    table = Table(title=f"Dataset '{path.name}'")
    table.add_column("Key", style="green", no_wrap=True)
    table.add_column("Value")
    table.add_row("kind", manifest.kind)
    table.add_row("epochs", str(len(labels)))
    table.add_row(
        "label 0 / label 1",
        f"{(labels == 0).sum()} / {(labels == 1).sum()}",
    )
    table.add_row("shape", " x ".join(str(n) for n in data.shape[1:]))
    table.add_row("version", manifest.version)
    for key, value in manifest.stages.items():
        table.add_row(key, str(value))
    if manifest.kind == "spikes":
        table.add_row("threshold", f"{manifest.threshold:g}")
        table.add_row("spike density", f"{manifest.spike_density:.6f}")
    else:
        averages = grand_average(data, labels)
        for label in (0, 1):
            chosen = manifest.lengths[labels == label]
            if not chosen.size:
                table.add_row(f"Cz average, label {label}", "n/a")
                continue
            length = int(chosen.mean()) - 1
            table.add_row(
                f"Cz average, label {label}",
                f"first {averages[label, 0]:.3f} / "
                f"last {averages[label, max(length, 0)]:.3f}",
            )
    console.print(table)


def inspect_checkpoint(path: Path) -> None:
    model = restore_model(path)
    arrays = model.state()
    table = Table(title=f"Checkpoint '{model.kind}'")
    table.add_column("Tensor", style="green", no_wrap=True)
    table.add_column("Shape", justify="right")
    for name, array in arrays.items():
        table.add_row(name, " x ".join(str(n) for n in array.shape))
    console.print(table)


def read_report(path: Path) -> ExperimentReport:
    try:
        return ExperimentReport(**json.loads(path.read_text("utf-8")))
    except (OSError, ValueError, TypeError) as exc:
        raise FormatError(f"'{path}' is not a report: {exc}") from exc


@cli.command()
def inspect(
    path: Path = typer.Argument(
        ...,
        exists=True,
        resolve_path=True,
        help="A recording directory, processed dataset, checkpoint "
        "directory or report.json",
    ),
    config: Optional[Path] = CONFIG_OPTION,
):
    """
    Summarise recordings, datasets, checkpoints or reports.
    """
    quality = resolve(QualityConfig, load_config(config), "quality")
    with reported_errors():
        if path.is_file():
            print_report(read_report(path))
        elif (path / "index.json").exists():
            inspect_checkpoint(path)
        elif (path / "manifest.json").exists() and read_manifest(
            path
        ).kind in ("epochs", "spikes"):
            inspect_dataset(path)
        elif discover_trials(path):
            inspect_recordings(path, quality)
        else:
            raise FormatError(f"nothing to inspect in '{path}'")
