"""Command-line interface for the template inversion lab."""

import logging
import shutil
import sys
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import click
import cv2
from pydantic import ValidationError

from til import __version__
from til.codec import rasterize, read_template
from til.config import (
    EvaluateConfig,
    LabConfig,
    LabSettings,
    MapConfig,
    MatcherSpec,
    NetworkProfile,
    RunManifest,
    SynthConfig,
    TemplateSourceSpec,
    apply_overrides,
)
from til.evaluation import attack_matrix, load_report, ridge_overlay
from til.exceptions import (
    ConfigurationError,
    ContractError,
    DependencyError,
    IngestionError,
    InvalidInputError,
    ParseError,
    ProtocolError,
)
from til.networks import (
    GeneratorE,
    MANIFEST_FILE,
    embed,
    generate,
    load_embedder,
    load_generator,
    load_map_estimator,
    read_manifest,
    trace_for,
)
from til.synthdata import build_dataset, load_dataset, save_dataset
from til.training import FrozenNetworks, train_embedder, train_inverter, train_map_estimator
from til.utils import derive_seed, directory_hash, read_image, resolve_device, write_image

# Default logging configuration (can be overridden by --log-level)
logging.basicConfig(
    level=logging.INFO,
    format="%(asctime)s - %(name)s - %(levelname)s - %(message)s",
    handlers=[logging.StreamHandler(sys.stdout)],
)
logger = logging.getLogger(__name__)

STAGES = ("map-estimator", "embedder-a", "embedder-b", "invert-minutiae", "invert-deep")
STAGE_DEPENDENCIES = {
    "map-estimator": (),
    "embedder-a": (),
    "embedder-b": (),
    "invert-minutiae": ("map-estimator", "embedder-a"),
    "invert-deep": ("embedder-a",),
}

VALIDATION_ERRORS = (
    ParseError,
    InvalidInputError,
    ContractError,
    ConfigurationError,
    ProtocolError,
    IngestionError,
    ValidationError,
    click.UsageError,
)


def set_log_level(level: str) -> None:
    """Set logging level for all til loggers."""
    numeric_level = getattr(logging, level.upper(), None)
    if not isinstance(numeric_level, int):
        raise ValueError(f"Invalid log level: {level}")

    # Set root logger level
    logging.getLogger().setLevel(numeric_level)
    # Set til package logger level
    logging.getLogger("til").setLevel(numeric_level)


def exit_code(error: BaseException) -> int:
    """0 success, 2 configuration/validation, 3 missing dependency, 4 runtime failure."""
    if isinstance(error, DependencyError):
        return 3
    if isinstance(error, VALIDATION_ERRORS):
        return 2
    return 4


def _fail(command: str, error: Exception) -> None:
    logger.error(f"{command} failed: {error}")
    logger.debug("Traceback", exc_info=error)
    sys.exit(exit_code(error))


def load_lab_config(
    config: Optional[Path],
    overrides: Tuple[str, ...] = (),
    seed: Optional[int] = None,
    profile: Optional[str] = None,
) -> LabConfig:
    """Load the YAML config (or defaults) and apply ``--set``, ``--seed`` and ``--profile``."""
    lab = LabConfig.from_yaml(config) if config else LabConfig()
    lab = apply_overrides(lab, list(overrides))
    if seed is not None:
        lab.synth.seed = seed
        lab.train.seed = seed
    if profile is not None:
        chosen = NetworkProfile.from_name(profile)
        lab.synth.profile = chosen
        lab.train.profile = chosen
    return lab


def prepare_output(out: Path, force: bool) -> Path:
    """
    Refuse a non-empty output directory unless ``force`` is set, in which
    case it is cleared.
    """
    out = Path(out)
    if out.exists() and any(out.iterdir()):
        if not force:
            raise ConfigurationError(f"Output directory {out} is not empty; pass --force to replace it")
        logger.warning(f"Replacing existing output directory {out}")
        shutil.rmtree(out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _device(lab: LabConfig, settings: LabSettings) -> str:
    name = lab.train.device if lab.train.device != "auto" else settings.device
    return str(resolve_device(name))


def _stage_dir(lab: LabConfig, stage: str) -> Path:
    return Path(lab.checkpoint_dir) / stage


def _require_stage(lab: LabConfig, stage: str, needed_by: str) -> Path:
    """
    Raises:
        DependencyError: Naming the missing upstream stage
    """
    path = _stage_dir(lab, stage)
    if not (path / MANIFEST_FILE).exists():
        raise DependencyError(
            f"Stage '{needed_by}' needs the {stage} checkpoint at {path}; "
            f"run `til train {stage}` first",
            dependency=stage,
        )
    return path


def _hashes(paths: Dict[str, Path]) -> Dict[str, str]:
    return {role: directory_hash(path) for role, path in sorted(paths.items())}


config_option = click.option(
    "--config",
    type=click.Path(exists=True, path_type=Path),
    envvar="TIL_CONFIG",
    help="Path to YAML configuration file. Reads from $TIL_CONFIG if not provided.",
)
set_option = click.option(
    "--set",
    "overrides",
    multiple=True,
    metavar="KEY=VALUE",
    help="Override a configuration value by dotted key (repeatable), e.g. train.lr_generator=0.0002",
)
seed_option = click.option("--seed", type=int, default=None, help="Seed for every random stream of the command")
profile_option = click.option(
    "--profile",
    type=click.Choice(["full", "reduced"]),
    default=None,
    help="Network profile (full = 512px, reduced = 128px)",
)
force_option = click.option("--force", is_flag=True, help="Replace a non-empty output directory")


@click.group()
@click.version_option(version=__version__)
@click.option(
    "--log-level",
    type=click.Choice(["DEBUG", "INFO", "WARNING", "ERROR"], case_sensitive=False),
    default="INFO",
    envvar="LOG_LEVEL",
    help="Set logging level. Reads from $LOG_LEVEL if not provided.",
)
@click.pass_context
def main(ctx, log_level: str):
    """TIL - Fingerprint template inversion lab."""
    set_log_level(log_level)
    ctx.ensure_object(dict)
    ctx.obj["log_level"] = log_level


@main.command()
@config_option
@click.option("--fingers", type=int, default=None, help="Number of fingers (>= 2)")
@click.option("--impressions", type=int, default=None, help="Impressions per finger (>= 2)")
@click.option("--eval-fingers", type=int, default=None, help="Fingers tagged as the eval split")
@seed_option
@profile_option
@click.option("--out", type=click.Path(path_type=Path), default=None, help="Dataset directory")
@force_option
@set_option
def synth(
    config: Optional[Path],
    fingers: Optional[int],
    impressions: Optional[int],
    eval_fingers: Optional[int],
    seed: Optional[int],
    profile: Optional[str],
    out: Optional[Path],
    force: bool,
    overrides: Tuple[str, ...],
):
    """Generate a synthetic identity-labeled fingerprint dataset."""
    try:
        lab = load_lab_config(config, overrides, seed, profile)
        cli_values = {"n_fingers": fingers, "impressions": impressions, "eval_fingers": eval_fingers}
        synth_cfg = SynthConfig.model_validate(
            {**lab.synth.model_dump(), **{k: v for k, v in cli_values.items() if v is not None}}
        )
        out = out or LabSettings().data_root / f"synth-s{synth_cfg.seed}"
        prepare_output(out, force)

        dataset = build_dataset(
            synth_cfg.n_fingers,
            synth_cfg.impressions,
            synth_cfg.profile,
            synth_cfg.seed,
            eval_fingers=synth_cfg.eval_fingers,
            config=synth_cfg,
        )
        map_cfg = MapConfig.for_resolution(
            synth_cfg.profile.resolution, sigma_s=lab.map.sigma_s, sigma_o=lab.map.sigma_o
        )
        save_dataset(dataset, out, map_cfg)
        lab.synth = synth_cfg
        RunManifest(
            command="synth",
            version=__version__,
            config=lab.model_dump(mode="json"),
            seeds={"synth": synth_cfg.seed},
            outputs={"dataset": str(out)},
        ).write(out)
        click.echo(
            f"\nGenerated {len(dataset)} fingers x {synth_cfg.impressions} impressions in {out}"
        )

    except Exception as e:
        _fail("Synth", e)


@main.command()
@click.argument("stage", type=click.Choice(STAGES))
@config_option
@click.option("--dataset", type=click.Path(path_type=Path), default=None, help="Training dataset directory")
@seed_option
@profile_option
@click.option("--out", type=click.Path(path_type=Path), default=None, help="Checkpoint directory for this stage")
@force_option
@set_option
def train(
    stage: str,
    config: Optional[Path],
    dataset: Optional[Path],
    seed: Optional[int],
    profile: Optional[str],
    out: Optional[Path],
    force: bool,
    overrides: Tuple[str, ...],
):
    """Train one stage: map-estimator, embedder-a, embedder-b, invert-minutiae or invert-deep."""
    try:
        lab = load_lab_config(config, overrides, seed, profile)
        settings = LabSettings()
        lab.train.device = _device(lab, settings)
        # embedder-b draws its own seed from the command seed unless one is given
        if stage == "embedder-b" and seed is None:
            lab.train.seed = derive_seed(lab.train.seed, "embedder-b")

        deps = {dep: _require_stage(lab, dep, stage) for dep in STAGE_DEPENDENCIES[stage]}
        data_root = dataset or lab.dataset or settings.data_root
        full = load_dataset(data_root)
        train_data = full.split("train")
        out = out or _stage_dir(lab, stage)
        prepare_output(out, force)

        logger.info(f"Training stage {stage} on {len(train_data)} fingers from {data_root}")
        if stage == "map-estimator":
            state = train_map_estimator(train_data, lab.train, out, map_config=lab.map_config())
        elif stage in ("embedder-a", "embedder-b"):
            instance = stage[-1].upper()
            peer = _stage_dir(lab, "embedder-b" if instance == "A" else "embedder-a")
            peer_seed = read_manifest(peer)["seed"] if (peer / MANIFEST_FILE).exists() else None
            state = train_embedder(train_data, lab.train, instance, out, peer_seed=peer_seed)
        else:
            embedder_a = load_embedder(deps["embedder-a"], lab.train.device)
            if read_manifest(deps["embedder-a"]).get("instance") != "A":
                raise ConfigurationError(f"{deps['embedder-a']} does not hold embedder-A")
            frozen = FrozenNetworks(embedder_a=embedder_a)
            if "map-estimator" in deps:
                frozen.map_estimator = load_map_estimator(deps["map-estimator"], lab.train.device)
            kind = "minutiae" if stage == "invert-minutiae" else "deep"
            holdout = full.split("eval")
            state = train_inverter(
                kind,
                train_data,
                lab.train,
                frozen,
                out,
                map_config=lab.map_config(),
                holdout=holdout if len(holdout) else None,
            )

        RunManifest(
            command=f"train {stage}",
            version=__version__,
            config=lab.model_dump(mode="json"),
            seeds={"train": lab.train.seed},
            inputs={"dataset": str(data_root), **{dep: str(path) for dep, path in deps.items()}},
            outputs={"checkpoint": str(out)},
            input_hashes=_hashes(deps),
        ).write(out)
        if state.d_updates:
            click.echo(
                f"\nTrained {stage}: {state.g_updates} generator / {state.d_updates} discriminator updates"
            )
        else:
            click.echo(f"\nTrained {stage}: {state.g_updates} steps")
        click.echo(f"Checkpoint: {out}")

    except Exception as e:
        _fail("Training", e)


def _collect_inputs(paths: Tuple[Path, ...], suffix: str) -> List[Tuple[Path, Path]]:
    """Return (file, relative output stem) pairs; directories are searched recursively."""
    found = []
    for path in paths:
        path = Path(path)
        if path.is_dir():
            for item in sorted(path.rglob(f"*{suffix}")):
                if item.name == "master.png":
                    continue
                found.append((item, item.relative_to(path).with_suffix("")))
        elif path.suffix == suffix:
            found.append((path, Path(path.stem)))
        else:
            raise ContractError(f"Input {path} is not a {suffix} file for this checkpoint kind")
    return found


@main.command()
@click.option(
    "--checkpoint",
    type=click.Path(path_type=Path),
    required=True,
    help="Inverter checkpoint (invert-minutiae or invert-deep stage)",
)
@click.argument("inputs", nargs=-1, type=click.Path(exists=True, path_type=Path))
@config_option
@click.option(
    "--embedder",
    type=click.Path(path_type=Path),
    default=None,
    help="Embedder-A checkpoint for deep inversion (defaults to the embedder-a stage)",
)
@click.option("--out", type=click.Path(path_type=Path), required=True, help="Reconstruction directory")
@click.option("--overlay", is_flag=True, help="Also write ridge overlays when the source image is known")
@force_option
@set_option
def invert(
    checkpoint: Path,
    inputs: Tuple[Path, ...],
    config: Optional[Path],
    embedder: Optional[Path],
    out: Path,
    overlay: bool,
    force: bool,
    overrides: Tuple[str, ...],
):
    """Reconstruct fingerprints from templates (.tpl) or, for deep inversion, images (.png)."""
    try:
        lab = load_lab_config(config, overrides)
        device = _device(lab, LabSettings())
        generator = load_generator(checkpoint, device)
        res = generator.profile.resolution
        consumed = {"inverter": Path(checkpoint)}
        deep = isinstance(generator, GeneratorE)
        items = _collect_inputs(inputs, ".png" if deep else ".tpl")
        prepare_output(out, force)

        if deep:
            consumed["embedder-a"] = Path(embedder or _require_stage(lab, "embedder-a", "invert"))
            if read_manifest(consumed["embedder-a"]).get("instance") != "A":
                raise ConfigurationError(f"{consumed['embedder-a']} does not hold embedder-A")
            net = load_embedder(consumed["embedder-a"], device)
        map_cfg = MapConfig.for_resolution(res, sigma_s=lab.map.sigma_s, sigma_o=lab.map.sigma_o)

        if not items:
            logger.warning("No inputs to invert; writing an empty output directory")
        for source_path, stem in items:
            source_image = None
            if deep:
                source_image = read_image(source_path)
                if source_image.shape != (res, res):
                    raise ContractError(
                        f"{source_path} is {source_image.shape[1]}x{source_image.shape[0]}, "
                        f"inverter expects {res}x{res}"
                    )
                reconstruction = generate(generator, embed(net, source_image))
            else:
                template = read_template(source_path)
                if (template.width, template.height) != (res, res):
                    raise ContractError(
                        f"{source_path} is a {template.width}x{template.height} template, "
                        f"inverter expects {res}x{res}"
                    )
                reconstruction = generate(generator, rasterize(template, map_cfg))
                sibling = source_path.with_suffix(".png")
                if sibling.exists():
                    source_image = read_image(sibling)

            target = out / stem.with_suffix(".png")
            target.parent.mkdir(parents=True, exist_ok=True)
            write_image(reconstruction, target)
            if overlay and source_image is not None:
                rgb = ridge_overlay(source_image, reconstruction)
                cv2.imwrite(str(target.with_name(f"{target.stem}_overlay.png")), rgb[..., ::-1])
            logger.debug(f"Inverted {source_path} -> {target}")

        RunManifest(
            command="invert",
            version=__version__,
            config=lab.model_dump(mode="json"),
            inputs={
                **{role: str(p) for role, p in consumed.items()},
                **{f"input_{i}": str(p) for i, p in enumerate(inputs)},
            },
            outputs={"reconstructions": str(out)},
            input_hashes=_hashes(consumed),
        ).write(out)
        click.echo(f"\nWrote {len(items)} reconstructions to {out}")

    except Exception as e:
        _fail("Inversion", e)


def _consumed_checkpoints(evaluate: EvaluateConfig) -> Dict[str, Path]:
    consumed: Dict[str, Path] = {}
    for source in evaluate.sources:
        for role in ("inverter_checkpoint", "map_estimator_checkpoint", "embedder_checkpoint"):
            path = getattr(source, role)
            if path is not None:
                consumed[f"{source.name}.{role}"] = Path(path)
    for matcher in evaluate.matchers:
        if matcher.embedder_checkpoint is not None:
            consumed[f"{matcher.name}.embedder_checkpoint"] = Path(matcher.embedder_checkpoint)
    return consumed


@main.command()
@config_option
@click.option("--dataset", type=click.Path(path_type=Path), default=None, help="Evaluation dataset directory")
@click.option("--far", type=float, default=None, help="False accept rate of the operating point (default 0.0001)")
@click.option("--out", type=click.Path(path_type=Path), required=True, help="Report directory")
@click.option("--workers", type=int, default=None, help="Parallel workers for reconstruction and scoring")
@force_option
@set_option
def evaluate(
    config: Optional[Path],
    dataset: Optional[Path],
    far: Optional[float],
    out: Path,
    workers: Optional[int],
    force: bool,
    overrides: Tuple[str, ...],
):
    """Fill the (template source x matcher) attack matrix with type-I and type-II TAR@FAR."""
    try:
        lab = load_lab_config(config, overrides)
        settings = LabSettings()
        if far is not None:
            lab.evaluate.far = far
        if workers is not None:
            lab.evaluate.workers = workers
        ev = EvaluateConfig.model_validate(lab.evaluate.model_dump())
        if not ev.sources or not ev.matchers:
            raise ConfigurationError("evaluate.sources and evaluate.matchers must both be listed in the config")

        consumed = _consumed_checkpoints(ev)
        for role, path in consumed.items():
            if not (path / MANIFEST_FILE).exists():
                raise DependencyError(f"Checkpoint {path} for {role} is missing", dependency=role)
        data_root = dataset or ev.dataset or settings.data_root
        data = load_dataset(data_root).split(ev.split)
        if len(data) == 0:
            raise ConfigurationError(f"Dataset {data_root} has no '{ev.split}' fingers")
        prepare_output(out, force)

        h, w = data.impressions()[0].image.shape
        report = attack_matrix(
            ev.sources,
            ev.matchers,
            data,
            ev.far,
            style=ev.style,
            map_config=MapConfig(height=h, width=w, sigma_s=lab.map.sigma_s, sigma_o=lab.map.sigma_o),
            device=_device(lab, settings),
            workers=ev.workers,
        )
        report.write(out, histograms=ev.histograms)
        lab.evaluate = ev
        RunManifest(
            command="evaluate",
            version=__version__,
            config=lab.model_dump(mode="json"),
            inputs={"dataset": str(data_root), **{role: str(p) for role, p in consumed.items()}},
            outputs={"report": str(out)},
            input_hashes={"dataset": directory_hash(data_root), **_hashes(consumed)},
        ).write(out)
        click.echo("\n" + report.to_markdown())
        click.echo(f"Report written to {out}")

    except Exception as e:
        _fail("Evaluation", e)


@main.command()
@click.argument("report_dir", type=click.Path(exists=True, file_okay=False, path_type=Path))
@click.option("--far", type=float, required=True, help="New false accept rate")
@click.option("--out", type=click.Path(path_type=Path), default=None, help="Output directory (default REPORT_DIR/far_<far>)")
@force_option
def report(report_dir: Path, far: float, out: Optional[Path], force: bool):
    """Re-render an existing report at a new FAR from its stored score distributions."""
    try:
        if not 0.0 < far < 1.0:
            raise ConfigurationError(f"--far must lie in (0, 1), got {far}")
        rendered = load_report(report_dir, far)
        out = out or report_dir / f"far_{far:g}"
        prepare_output(out, force)
        rendered.write(out, histograms=False)
        RunManifest(
            command="report",
            version=__version__,
            config={"far": far},
            inputs={"report": str(report_dir)},
            outputs={"report": str(out)},
        ).write(out)
        click.echo("\n" + rendered.to_markdown())

    except Exception as e:
        _fail("Report", e)


@main.command()
@click.argument("kind", type=click.Choice(["minutiae", "deep", "discriminator"]))
@profile_option
def trace(kind: str, profile: Optional[str]):
    """Print the per-stage output dimensions of a network."""
    try:
        rows = trace_for(kind, NetworkProfile.from_name(profile or "full"))
        width = max(len(name) for name, _ in rows)
        for name, shape in rows:
            click.echo(f"{name:<{width}}  {' x '.join(str(s) for s in shape)}")

    except Exception as e:
        _fail("Trace", e)


@main.command()
@click.option(
    "--output",
    type=click.Path(path_type=Path),
    default=Path("config.yaml"),
    help="Output configuration file path",
)
def init_config(output: Path):
    """Generate a sample configuration file."""
    checkpoints = Path("checkpoints")
    config = LabConfig(
        dataset=Path("data/lab"),
        checkpoint_dir=checkpoints,
        evaluate=EvaluateConfig(
            dataset=Path("data/lab"),
            split="eval",
            sources=[
                TemplateSourceSpec(
                    name="classical",
                    kind="classical",
                    system="classical",
                    inverter_checkpoint=checkpoints / "invert-minutiae",
                ),
                TemplateSourceSpec(
                    name="estimator",
                    kind="estimator",
                    system="estimator",
                    inverter_checkpoint=checkpoints / "invert-minutiae",
                    map_estimator_checkpoint=checkpoints / "map-estimator",
                ),
                TemplateSourceSpec(
                    name="deep",
                    kind="deep",
                    system="embedder-a",
                    inverter_checkpoint=checkpoints / "invert-deep",
                    embedder_checkpoint=checkpoints / "embedder-a",
                ),
            ],
            matchers=[
                MatcherSpec(name="minutiae", kind="minutiae", system="classical"),
                MatcherSpec(
                    name="embedder-a",
                    kind="embedding",
                    system="embedder-a",
                    instance="A",
                    embedder_checkpoint=checkpoints / "embedder-a",
                ),
                MatcherSpec(
                    name="embedder-b",
                    kind="embedding",
                    system="embedder-b",
                    instance="B",
                    embedder_checkpoint=checkpoints / "embedder-b",
                ),
            ],
        ),
    )

    # Save to file
    config.to_yaml(output)
    click.echo(f"Created sample configuration file: {output}")
    click.echo("\nEdit this file with your specific settings and run:")
    click.echo(f"  til synth --config {output} --fingers 300 --eval-fingers 100 --out data/lab")
    click.echo(f"  til train map-estimator --config {output}")


if __name__ == "__main__":
    main()
